//! 2D convolution over `[C, H, W]` tensors via im2col + GEMM.
//!
//! Zero padding, square kernels, arbitrary stride. The column buffer is
//! rebuilt in backward rather than saved; at desk scale recompute is cheaper
//! than holding the buffers across a training step.

use super::gemm;

pub struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(
        in_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvDims> {
        let [cin, h, w] = *in_shape else { return None };
        let [cout, wcin, kh, kw] = *w_shape else { return None };
        if wcin != cin || kh != kw || stride == 0 {
            return None;
        }
        let ksize = kh;
        if h + 2 * pad < ksize || w + 2 * pad < ksize {
            return None;
        }
        let ho = (h + 2 * pad - ksize) / stride + 1;
        let wo = (w + 2 * pad - ksize) / stride + 1;
        Some(ConvDims { cin, h, w, cout, ksize, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

pub fn im2col(x: &[f32], d: &ConvDims) -> Vec<f32> {
    let (k, m) = (d.col_rows(), d.out_pixels());
    let mut col = vec![0.0f32; k * m];
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.ksize {
            for kx in 0..d.ksize {
                let row = &mut col[((ci * d.ksize + ky) * d.ksize + kx) * m..][..m];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f32], d: &ConvDims) -> Vec<f32> {
    let m = d.out_pixels();
    let mut dx = vec![0.0f32; d.cin * d.h * d.w];
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.ksize {
            for kx in 0..d.ksize {
                let row = &dcol[((ci * d.ksize + ky) * d.ksize + kx) * m..][..m];
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.wo..(oy + 1) * d.wo];
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Forward: out[Cout, Ho, Wo] = W · im2col(x) (+ bias per channel).
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let col = im2col(x, d);
    let m = d.out_pixels();
    let mut out = vec![0.0f32; d.cout * m];
    gemm::gemm_nn(w, &col, &mut out, d.cout, d.col_rows(), m);
    if let Some(b) = bias {
        for co in 0..d.cout {
            let bv = b[co];
            for v in &mut out[co * m..(co + 1) * m] {
                *v += bv;
            }
        }
    }
    out
}

/// Backward. Returns (dx, dw, dbias); each is computed only when the
/// corresponding `want_*` flag is set.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let m = d.out_pixels();
    let k = d.col_rows();
    let dw = if want_w {
        let col = im2col(x, d);
        let mut dw = vec![0.0f32; d.cout * k];
        // dW[co, r] = Σ_m dout[co, m] col[r, m]
        gemm::gemm_nt(dout, &col, &mut dw, d.cout, m, k);
        Some(dw)
    } else {
        None
    };
    let dx = if want_x {
        let mut dcol = vec![0.0f32; k * m];
        // dcol[r, m] = Σ_co w[co, r] dout[co, m]
        gemm::gemm_tn(w, dout, &mut dcol, k, d.cout, m);
        Some(col2im(&dcol, d))
    } else {
        None
    };
    let db = if want_b {
        let mut db = vec![0.0f32; d.cout];
        for co in 0..d.cout {
            let mut s = 0.0f32;
            for &g in &dout[co * m..(co + 1) * m] {
                s += g;
            }
            db[co] = s;
        }
        Some(db)
    } else {
        None
    };
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution reference, scalar loops.
    fn naive_conv(
        x: &[f32],
        w: &[f32],
        bias: Option<&[f32]>,
        d: &ConvDims,
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; d.cout * d.ho * d.wo];
        for co in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..d.cin {
                        for ky in 0..d.ksize {
                            for kx in 0..d.ksize {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[(ci * d.h + iy as usize) * d.w + ix as usize];
                                let wv = w[((co * d.cin + ci) * d.ksize + ky) * d.ksize + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(co * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_convolution() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let d = ConvDims::new(&[3, 6, 5], &[4, 3, 3, 3], stride, pad).unwrap();
            let x: Vec<f32> = (0..3 * 6 * 5).map(|i| ((i * 31 % 17) as f32 - 8.0) * 0.1).collect();
            let w: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 13 % 19) as f32 - 9.0) * 0.05).collect();
            let b: Vec<f32> = vec![0.3, -0.2, 0.05, 0.0];
            let got = conv2d_forward(&x, &w, Some(&b), &d);
            let want = naive_conv(&x, &w, Some(&b), &d);
            assert_eq!(got.len(), want.len());
            for (g, t) in got.iter().zip(&want) {
                assert!((g - t).abs() < 1e-5, "stride {stride} pad {pad}: {g} vs {t}");
            }
        }
    }
}
