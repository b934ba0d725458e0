//! NeRF-style volumetric ray marching over a tri-plane.
//!
//! Sampling places `samples_per_ray` strata between `near` and `far`; the
//! sample sits at the stratum start (or jittered inside it, with a per-ray
//! stream derived from seed and ray index). `δ_i` is the distance to the
//! next sample, and for the last sample the distance to the far plane, which
//! makes the compositing telescope identity exact.
//!
//! Per sample: `(c, σ) = decode(sample(tp, p))`, `α_i = 1 − exp(−σ_i δ_i)`,
//! transmittance `T_i = Π_{j<i}(1 − α_j)`, weight `w_i = T_i α_i`, and
//! `rgb = Σ w_i c_i + (1 − Σ w_i)·background`, `alpha = Σ w_i`.

use crate::camera::{generate_rays, CameraPose, Intrinsics, PoseError};
use crate::img::ImageRgb;
use crate::par;
use crate::tensor::rng::derive_seed;
use crate::tensor::{
    BackwardCtx, CustomGrad, ParamId, ParamLeaves, ParamStore, Tape, Tensor, TensorError, TensorId,
};
use crate::triplane::{sample_batch, TriPlane};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("non-finite {0} during rendering (parameter blow-up?)")]
    NonFinite(&'static str),
    #[error("invalid render config: {0}")]
    BadConfig(String),
    #[error("decoder expects {expected} feature channels, tri-plane has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
    pub jitter: bool,
    pub seed: u64,
    /// Also composite the sampled tri-plane features per pixel (input for
    /// the upsampler).
    pub collect_features: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 128,
            height: 128,
            samples_per_ray: 48,
            near: 0.95,
            far: 4.45,
            background: [0.0; 3],
            jitter: false,
            seed: 0,
            collect_features: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.samples_per_ray < 2 {
            return Err(RenderError::BadConfig(format!(
                "samples_per_ray {} < 2",
                self.samples_per_ray
            )));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(RenderError::BadConfig(format!(
                "need 0 < near < far, got {}..{}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::BadConfig("zero resolution".into()));
        }
        Ok(())
    }
}

/// Maps a C-dimensional point feature to color and density.
pub trait FieldDecoder {
    fn channels(&self) -> usize;
    /// Returns (rgb in [0,1], sigma >= 0).
    fn decode(&self, feat: &[f32]) -> ([f32; 3], f32);
}

// ── fixed affine decoder (baked assets) ──────────────────────────────

/// Sum-then-affine decoder: `pre = W·feat + b`, rgb = clamp01(pre[0..3]),
/// σ = max(pre[3], 0). Used with baked ground-truth tri-planes.
#[derive(Clone, Debug)]
pub struct AffineDecoder {
    pub weight: Vec<f32>, // [4, C] row-major
    pub bias: [f32; 4],
    pub in_channels: usize,
}

impl AffineDecoder {
    /// Selects channels 0..2 as rgb and channel 3 as density.
    pub fn identity_selection(in_channels: usize) -> Self {
        assert!(in_channels >= 4);
        let mut weight = vec![0.0; 4 * in_channels];
        for r in 0..4 {
            weight[r * in_channels + r] = 1.0;
        }
        AffineDecoder { weight, bias: [0.0; 4], in_channels }
    }

    pub fn zero(in_channels: usize) -> Self {
        AffineDecoder { weight: vec![0.0; 4 * in_channels], bias: [0.0; 4], in_channels }
    }
}

impl FieldDecoder for AffineDecoder {
    fn channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    fn decode(&self, feat: &[f32]) -> ([f32; 3], f32) {
        let c = self.in_channels;
        let mut pre = self.bias;
        for r in 0..4 {
            let row = &self.weight[r * c..(r + 1) * c];
            let mut acc = 0.0f32;
            for (w, f) in row.iter().zip(feat) {
                acc += w * f;
            }
            pre[r] += acc;
        }
        (
            [pre[0].clamp(0.0, 1.0), pre[1].clamp(0.0, 1.0), pre[2].clamp(0.0, 1.0)],
            pre[3].max(0.0),
        )
    }
}

// ── learned MLP decoder ──────────────────────────────────────────────

pub const MLP_HIDDEN: usize = 64;

/// Shallow decoder MLP: C → 64 → 64 (softplus) → 4, color through sigmoid,
/// density through softplus. Parameters live in a [`ParamStore`] under the
/// given prefix.
#[derive(Clone, Debug)]
pub struct DecoderMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub in_channels: usize,
}

fn init_linear(
    store: &mut ParamStore,
    name_w: &str,
    name_b: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> (ParamId, ParamId) {
    let bound = (1.0 / fan_in as f32).sqrt();
    let w = Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, seed);
    let b = Tensor::zeros(&[fan_out]);
    (store.add(name_w, w).expect("unique param"), store.add(name_b, b).expect("unique param"))
}

impl DecoderMlp {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, seed: u64) -> Self {
        let (w1, b1) = init_linear(
            store,
            &format!("{prefix}l1.w"),
            &format!("{prefix}l1.b"),
            in_channels,
            MLP_HIDDEN,
            derive_seed(seed, 1),
        );
        let (w2, b2) = init_linear(
            store,
            &format!("{prefix}l2.w"),
            &format!("{prefix}l2.b"),
            MLP_HIDDEN,
            MLP_HIDDEN,
            derive_seed(seed, 2),
        );
        let (w3, b3) = init_linear(
            store,
            &format!("{prefix}l3.w"),
            &format!("{prefix}l3.b"),
            MLP_HIDDEN,
            4,
            derive_seed(seed, 3),
        );
        // start mostly transparent: σ = softplus(pre) small at init
        let mut b3t = store.value(b3).clone();
        b3t.data_mut()[3] = -2.0;
        store.set_value(b3, b3t).expect("shape unchanged");
        DecoderMlp { w1, b1, w2, b2, w3, b3, in_channels }
    }

    /// Borrowed weight view for the fast inference path.
    pub fn view<'a>(&self, store: &'a ParamStore) -> MlpView<'a> {
        MlpView {
            w1: store.value(self.w1).data(),
            b1: store.value(self.b1).data(),
            w2: store.value(self.w2).data(),
            b2: store.value(self.b2).data(),
            w3: store.value(self.w3).data(),
            b3: store.value(self.b3).data(),
            in_channels: self.in_channels,
        }
    }

    /// Tape forward over a batch of point features `[N, C]`; returns
    /// (rgb `[N,3]`, sigma `[N,1]`).
    pub fn forward_points(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        store: &ParamStore,
        feats: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let w1 = leaves.get(tape, store, self.w1);
        let b1 = leaves.get(tape, store, self.b1);
        let w2 = leaves.get(tape, store, self.w2);
        let b2 = leaves.get(tape, store, self.b2);
        let w3 = leaves.get(tape, store, self.w3);
        let b3 = leaves.get(tape, store, self.b3);
        let h = tape.linear(feats, w1, b1)?;
        let h = tape.softplus(h);
        let h = tape.linear(h, w2, b2)?;
        let h = tape.softplus(h);
        let out = tape.linear(h, w3, b3)?;
        let rgb_raw = tape.slice(out, 1, 0, 3)?;
        let rgb = tape.sigmoid(rgb_raw);
        let sg_raw = tape.slice(out, 1, 3, 1)?;
        let sigma = tape.softplus(sg_raw);
        Ok((rgb, sigma))
    }
}

/// Borrowed MLP weights implementing the scalar decode path. Produces the
/// same arithmetic per point as the tape path's GEMM kernels (sequential
/// accumulation over the reduction index).
pub struct MlpView<'a> {
    w1: &'a [f32],
    b1: &'a [f32],
    w2: &'a [f32],
    b2: &'a [f32],
    w3: &'a [f32],
    b3: &'a [f32],
    in_channels: usize,
}

impl FieldDecoder for MlpView<'_> {
    fn channels(&self) -> usize {
        self.in_channels
    }

    fn decode(&self, feat: &[f32]) -> ([f32; 3], f32) {
        let mut h1 = [0.0f32; MLP_HIDDEN];
        h1.copy_from_slice(self.b1);
        for (k, &x) in feat.iter().enumerate() {
            let row = &self.w1[k * MLP_HIDDEN..(k + 1) * MLP_HIDDEN];
            for (h, &w) in h1.iter_mut().zip(row) {
                *h += x * w;
            }
        }
        for h in &mut h1 {
            *h = crate::tensor::softplus_f32(*h);
        }
        let mut h2 = [0.0f32; MLP_HIDDEN];
        h2.copy_from_slice(self.b2);
        for (k, &x) in h1.iter().enumerate() {
            let row = &self.w2[k * MLP_HIDDEN..(k + 1) * MLP_HIDDEN];
            for (h, &w) in h2.iter_mut().zip(row) {
                *h += x * w;
            }
        }
        for h in &mut h2 {
            *h = crate::tensor::softplus_f32(*h);
        }
        let mut out = [self.b3[0], self.b3[1], self.b3[2], self.b3[3]];
        for (k, &x) in h2.iter().enumerate() {
            let row = &self.w3[k * 4..(k + 1) * 4];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
        ([sig(out[0]), sig(out[1]), sig(out[2])], crate::tensor::softplus_f32(out[3]))
    }
}

// ── sampling & compositing ───────────────────────────────────────────

/// Stratified sample positions along a ray. Without jitter the sample sits
/// at the stratum start; with jitter, uniformly inside the stratum from a
/// stream derived from (seed, ray index).
pub fn sample_ts(cfg: &RenderConfig, ray_index: u64) -> Vec<f32> {
    let s = cfg.samples_per_ray;
    let h = (cfg.far - cfg.near) / s as f32;
    (0..s)
        .map(|i| {
            let u = if cfg.jitter {
                let bits = derive_seed(derive_seed(cfg.seed, ray_index), i as u64);
                ((bits >> 40) as f32) * (1.0 / (1u64 << 24) as f32)
            } else {
                0.0
            };
            cfg.near + (i as f32 + u) * h
        })
        .collect()
}

/// δ_i = t_{i+1} − t_i; for the last sample, distance to the far plane.
pub fn deltas_from_ts(ts: &[f32], far: f32) -> Vec<f32> {
    let s = ts.len();
    (0..s).map(|i| if i + 1 < s { ts[i + 1] - ts[i] } else { far - ts[s - 1] }).collect()
}

pub struct CompositeOut {
    pub rgb: [f32; 3],
    pub alpha: f32,
    pub t_final: f32,
}

/// Front-to-back alpha compositing shared by the renderer and the analytic
/// scene path.
pub fn composite_ray(
    rgbs: &[[f32; 3]],
    sigmas: &[f32],
    deltas: &[f32],
    background: [f32; 3],
    weights_out: Option<&mut Vec<f32>>,
) -> CompositeOut {
    let mut transmittance = 1.0f32;
    let mut acc = [0.0f32; 3];
    let mut wsum = 0.0f32;
    let mut weights = weights_out;
    for i in 0..sigmas.len() {
        let alpha_i = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = transmittance * alpha_i;
        acc[0] += w * rgbs[i][0];
        acc[1] += w * rgbs[i][1];
        acc[2] += w * rgbs[i][2];
        wsum += w;
        if let Some(ws) = weights.as_deref_mut() {
            ws.push(w);
        }
        transmittance *= 1.0 - alpha_i;
    }
    let bgw = 1.0 - wsum;
    CompositeOut {
        rgb: [
            acc[0] + bgw * background[0],
            acc[1] + bgw * background[1],
            acc[2] + bgw * background[2],
        ],
        alpha: wsum,
        t_final: transmittance,
    }
}

pub struct MarchResult {
    pub rgb: [f32; 3],
    pub alpha: f32,
    /// Per-sample compositing weights.
    pub weights: Vec<f32>,
    pub ts: Vec<f32>,
    /// Composited tri-plane feature, when requested.
    pub feature: Option<Vec<f32>>,
}

/// Marches a single ray. `direction` must be unit length.
pub fn march_ray<D: FieldDecoder>(
    tp: &TriPlane,
    dec: &D,
    origin: [f32; 3],
    direction: [f32; 3],
    cfg: &RenderConfig,
    ray_index: u64,
) -> Result<MarchResult, RenderError> {
    march_ray_impl(tp, dec, origin, direction, cfg, ray_index, cfg.collect_features)
}

fn march_ray_impl<D: FieldDecoder>(
    tp: &TriPlane,
    dec: &D,
    origin: [f32; 3],
    direction: [f32; 3],
    cfg: &RenderConfig,
    ray_index: u64,
    with_features: bool,
) -> Result<MarchResult, RenderError> {
    let (_, _, c) = tp.dims();
    if dec.channels() != c {
        return Err(RenderError::ChannelMismatch { expected: dec.channels(), got: c });
    }
    let ts = sample_ts(cfg, ray_index);
    let deltas = deltas_from_ts(&ts, cfg.far);
    let s = ts.len();
    let mut feat = vec![0.0f32; c];
    let mut rgbs = Vec::with_capacity(s);
    let mut sigmas = Vec::with_capacity(s);
    let mut feats_all = if with_features { Vec::with_capacity(s * c) } else { Vec::new() };
    for &t in &ts {
        let p = [
            origin[0] + t * direction[0],
            origin[1] + t * direction[1],
            origin[2] + t * direction[2],
        ];
        tp.sample_into(p, &mut feat);
        let (rgb, sigma) = dec.decode(&feat);
        if !sigma.is_finite() || rgb.iter().any(|v| !v.is_finite()) {
            return Err(RenderError::NonFinite("decoder output"));
        }
        rgbs.push(rgb);
        sigmas.push(sigma);
        if with_features {
            feats_all.extend_from_slice(&feat);
        }
    }
    let mut weights = Vec::with_capacity(s);
    let out = composite_ray(&rgbs, &sigmas, &deltas, cfg.background, Some(&mut weights));
    let feature = if with_features {
        let mut fc = vec![0.0f32; c];
        for (i, w) in weights.iter().enumerate() {
            for ch in 0..c {
                fc[ch] += w * feats_all[i * c + ch];
            }
        }
        Some(fc)
    } else {
        None
    };
    Ok(MarchResult { rgb: out.rgb, alpha: out.alpha, weights, ts, feature })
}

/// Rendered output: color, accumulated opacity, optional feature image.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub rgb: ImageRgb,
    pub alpha: Vec<f32>,
    pub feature_channels: usize,
    pub features: Option<Vec<f32>>, // H×W×C
}

/// Renders one image by marching every pixel's ray. Rows fan out over the
/// worker pool; per-pixel work is independent and each row writes only its
/// own slice, so output is bit-identical for any worker count.
pub fn render_image<D: FieldDecoder + Sync>(
    tp: &TriPlane,
    dec: &D,
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<RenderedImage, RenderError> {
    cfg.validate()?;
    let rays = generate_rays(pose, intr, cfg.width, cfg.height)?;
    let (_, _, c) = tp.dims();
    let rows: Vec<Result<RowOut, RenderError>> = par::map_indexed(cfg.height, |py| {
        let mut rgb = Vec::with_capacity(cfg.width * 3);
        let mut alpha = Vec::with_capacity(cfg.width);
        let mut feats = if cfg.collect_features {
            Vec::with_capacity(cfg.width * c)
        } else {
            Vec::new()
        };
        for px in 0..cfg.width {
            let i = py * cfg.width + px;
            let m = march_ray_impl(
                tp,
                dec,
                rays.origins[i],
                rays.directions[i],
                cfg,
                i as u64,
                cfg.collect_features,
            )?;
            rgb.extend_from_slice(&m.rgb);
            alpha.push(m.alpha);
            if let Some(f) = m.feature {
                feats.extend_from_slice(&f);
            }
        }
        Ok(RowOut { rgb, alpha, feats })
    });
    let mut img = ImageRgb::new(cfg.width, cfg.height);
    let mut alpha = Vec::with_capacity(cfg.width * cfg.height);
    let mut features = if cfg.collect_features {
        Some(Vec::with_capacity(cfg.width * cfg.height * c))
    } else {
        None
    };
    for (py, row) in rows.into_iter().enumerate() {
        let row = row?;
        img.data[py * cfg.width * 3..(py + 1) * cfg.width * 3].copy_from_slice(&row.rgb);
        alpha.extend_from_slice(&row.alpha);
        if let Some(f) = features.as_mut() {
            f.extend_from_slice(&row.feats);
        }
    }
    Ok(RenderedImage { rgb: img, alpha, feature_channels: c, features })
}

struct RowOut {
    rgb: Vec<f32>,
    alpha: Vec<f32>,
    feats: Vec<f32>,
}

// ── differentiable ray rendering (training path) ─────────────────────

/// A ray for the tape path; `index` seeds the jitter stream.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f32; 3],
    pub dir: [f32; 3],
    pub index: u64,
}

struct CompositeOp {
    n: usize,
    s: usize,
    cv: usize,
    deltas: Vec<f32>,   // [n, s]
    background: Vec<f32>, // [cv]
}

impl CustomGrad for CompositeOp {
    fn backward(
        &self,
        ctx: &BackwardCtx<'_>,
        grad_out: &[f32],
        want: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let sigmas = ctx.inputs[0].data();
        let values = ctx.inputs[1].data();
        let (n, s, cv) = (self.n, self.s, self.cv);
        let mut dsigma = if want[0] { vec![0.0f32; n * s] } else { Vec::new() };
        let mut dval = if want[1] { vec![0.0f32; n * s * cv] } else { Vec::new() };
        for r in 0..n {
            let sg = &sigmas[r * s..(r + 1) * s];
            let dl = &self.deltas[r * s..(r + 1) * s];
            let go = &grad_out[r * (cv + 1)..(r + 1) * (cv + 1)];
            let g_alpha = go[cv];
            // forward recompute: alphas, transmittances, weights
            let mut alphas = vec![0.0f32; s];
            let mut trans = vec![0.0f32; s];
            let mut t = 1.0f32;
            for i in 0..s {
                alphas[i] = 1.0 - (-sg[i] * dl[i]).exp();
                trans[i] = t;
                t *= 1.0 - alphas[i];
            }
            // g_w[i] = Σ_c go_c (val_ic − bg_c) + g_alpha
            let mut g_w = vec![0.0f32; s];
            for i in 0..s {
                let v = &values[(r * s + i) * cv..(r * s + i + 1) * cv];
                let mut acc = g_alpha;
                for ch in 0..cv {
                    acc += go[ch] * (v[ch] - self.background[ch]);
                }
                g_w[i] = acc;
                if want[1] {
                    let w = trans[i] * alphas[i];
                    let dv = &mut dval[(r * s + i) * cv..(r * s + i + 1) * cv];
                    for ch in 0..cv {
                        dv[ch] = w * go[ch];
                    }
                }
            }
            if want[0] {
                // dα_i = T_i g_w_i − (Σ_{j>i} g_w_j w_j) / (1 − α_i)
                let mut suffix = 0.0f32;
                for i in (0..s).rev() {
                    let one_minus = (1.0 - alphas[i]).max(1e-30);
                    let d_alpha = trans[i] * g_w[i] - suffix / one_minus;
                    // dσ_i = dα_i δ_i exp(−σδ) = dα_i δ_i (1 − α_i)
                    dsigma[r * s + i] = d_alpha * dl[i] * (1.0 - alphas[i]);
                    suffix += g_w[i] * trans[i] * alphas[i];
                }
            }
        }
        vec![
            if want[0] { Some(dsigma) } else { None },
            if want[1] { Some(dval) } else { None },
        ]
    }

    fn name(&self) -> &'static str {
        "composite"
    }
}

/// Differentiable compositing: `sigma [N,S]`, `values [N,S,Cv]`, per-sample
/// `deltas [N·S]`, background `[Cv]` → `[N, Cv+1]` (composited values, then
/// accumulated alpha).
pub fn composite_tape(
    tape: &mut Tape,
    sigma: TensorId,
    values: TensorId,
    deltas: Vec<f32>,
    background: Vec<f32>,
) -> Result<TensorId, TensorError> {
    let ss = tape.shape(sigma).to_vec();
    let vs = tape.shape(values).to_vec();
    if ss.len() != 2 || vs.len() != 3 || vs[0] != ss[0] || vs[1] != ss[1] {
        return Err(TensorError::ShapeMismatch { op: "composite", a: ss, b: vs });
    }
    let (n, s, cv) = (ss[0], ss[1], vs[2]);
    if deltas.len() != n * s || background.len() != cv {
        return Err(TensorError::InvalidArg {
            op: "composite",
            msg: format!("deltas {} (want {}), background {} (want {cv})", deltas.len(), n * s, background.len()),
        });
    }
    let sg = tape.data(sigma);
    let vals = tape.data(values);
    let mut out = vec![0.0f32; n * (cv + 1)];
    for r in 0..n {
        let mut transmittance = 1.0f32;
        let mut wsum = 0.0f32;
        let row = &mut out[r * (cv + 1)..(r + 1) * (cv + 1)];
        for i in 0..s {
            let a = 1.0 - (-sg[r * s + i] * deltas[r * s + i]).exp();
            let w = transmittance * a;
            let v = &vals[(r * s + i) * cv..(r * s + i + 1) * cv];
            for ch in 0..cv {
                row[ch] += w * v[ch];
            }
            wsum += w;
            transmittance *= 1.0 - a;
        }
        let bgw = 1.0 - wsum;
        for ch in 0..cv {
            row[ch] += bgw * background[ch];
        }
        row[cv] = wsum;
    }
    let value = Tensor::new(vec![n, cv + 1], out).expect("composite shape");
    let op = CompositeOp { n, s, cv, deltas, background };
    Ok(tape.custom(vec![sigma, values], value, Box::new(op)))
}

/// Differentiable render of a batch of rays against tri-plane tensor
/// `planes [3,H,W,C]` and a decoder MLP. Returns (rgb `[N,3]`, alpha `[N,1]`).
#[allow(clippy::too_many_arguments)]
pub fn render_rays_tape(
    tape: &mut Tape,
    leaves: &mut ParamLeaves,
    store: &ParamStore,
    planes: TensorId,
    extent: f32,
    mlp: &DecoderMlp,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> Result<(TensorId, TensorId), RenderError> {
    cfg.validate()?;
    let n = rays.len();
    let s = cfg.samples_per_ray;
    let mut points = Vec::with_capacity(n * s);
    let mut deltas = Vec::with_capacity(n * s);
    for ray in rays {
        let ts = sample_ts(cfg, ray.index);
        let ds = deltas_from_ts(&ts, cfg.far);
        for (i, &t) in ts.iter().enumerate() {
            points.push([
                ray.origin[0] + t * ray.dir[0],
                ray.origin[1] + t * ray.dir[1],
                ray.origin[2] + t * ray.dir[2],
            ]);
            deltas.push(ds[i]);
        }
    }
    let feats = sample_batch(tape, planes, &points, extent)?;
    let (rgb, sigma) = mlp.forward_points(tape, leaves, store, feats)?;
    if !tape.value(sigma).all_finite() || !tape.value(rgb).all_finite() {
        return Err(RenderError::NonFinite("decoder output"));
    }
    let sigma_ns = tape.reshape(sigma, vec![n, s])?;
    let vals = tape.reshape(rgb, vec![n, s, 3])?;
    let out = composite_tape(tape, sigma_ns, vals, deltas, cfg.background.to_vec())?;
    let rgb_out = tape.slice(out, 1, 0, 3)?;
    let alpha_out = tape.slice(out, 1, 3, 1)?;
    Ok((rgb_out, alpha_out))
}

/// The rays of a full pixel grid in row-major order (ray index = pixel index).
pub fn pixel_rays(
    pose: &CameraPose,
    intr: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<Vec<Ray>, PoseError> {
    let b = generate_rays(pose, intr, width, height)?;
    Ok((0..width * height)
        .map(|i| Ray { origin: b.origins[i], dir: b.directions[i], index: i as u64 })
        .collect())
}

// ── learned upsampler ────────────────────────────────────────────────

/// Four-conv residual upsampler on the rendered rgb+feature image:
/// three convs at low resolution, pixel-shuffle by the factor, then a
/// zero-initialized final conv whose output is added to the bilinearly
/// upsampled rgb. Identity at initialization.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub c1w: ParamId,
    pub c1b: ParamId,
    pub c2w: ParamId,
    pub c2b: ParamId,
    pub c3w: ParamId,
    pub c3b: ParamId,
    pub c4w: ParamId,
    pub c4b: ParamId,
    pub in_channels: usize,
    pub factor: usize,
    mid: usize,
}

fn init_conv(
    store: &mut ParamStore,
    prefix: &str,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    seed: u64,
    zero: bool,
) -> (ParamId, ParamId) {
    let fan_in = cin * k * k;
    let w = if zero {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        let bound = (1.0 / fan_in as f32).sqrt();
        Tensor::rand_uniform(&[cout, cin, k, k], -bound, bound, seed)
    };
    let b = Tensor::zeros(&[cout]);
    (
        store.add(&format!("{prefix}{name}.w"), w).expect("unique param"),
        store.add(&format!("{prefix}{name}.b"), b).expect("unique param"),
    )
}

impl Upsampler {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        factor: usize,
        seed: u64,
    ) -> Self {
        assert!(factor == 2 || factor == 4, "upsample factor 2 or 4");
        let mid = 16;
        let (c1w, c1b) = init_conv(store, prefix, "c1", 32, in_channels, 3, derive_seed(seed, 1), false);
        let (c2w, c2b) = init_conv(store, prefix, "c2", 32, 32, 3, derive_seed(seed, 2), false);
        let (c3w, c3b) =
            init_conv(store, prefix, "c3", mid * factor * factor, 32, 3, derive_seed(seed, 3), false);
        let (c4w, c4b) = init_conv(store, prefix, "c4", 3, mid, 3, 0, true);
        Upsampler { c1w, c1b, c2w, c2b, c3w, c3b, c4w, c4b, in_channels, factor, mid }
    }

    /// `input` is `[Cin, H, W]` (rgb plus feature channels), `rgb` is the
    /// `[3, H, W]` slice carried on the residual path.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &mut ParamLeaves,
        store: &ParamStore,
        input: TensorId,
        rgb: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(TensorError::BadShape {
                op: "upsample",
                expected: format!("[{}, H, W]", self.in_channels),
                got: shape,
            });
        }
        let c1w = leaves.get(tape, store, self.c1w);
        let c1b = leaves.get(tape, store, self.c1b);
        let c2w = leaves.get(tape, store, self.c2w);
        let c2b = leaves.get(tape, store, self.c2b);
        let c3w = leaves.get(tape, store, self.c3w);
        let c3b = leaves.get(tape, store, self.c3b);
        let c4w = leaves.get(tape, store, self.c4w);
        let c4b = leaves.get(tape, store, self.c4b);
        let base = tape.upsample_bilinear(rgb, self.factor)?;
        let h = tape.conv2d(input, c1w, Some(c1b), 1, 1)?;
        let h = tape.leaky_relu(h);
        let h = tape.conv2d(h, c2w, Some(c2b), 1, 1)?;
        let h = tape.leaky_relu(h);
        let h = tape.conv2d(h, c3w, Some(c3b), 1, 1)?;
        let h = tape.pixel_shuffle(h, self.factor)?;
        let h = tape.leaky_relu(h);
        let res = tape.conv2d(h, c4w, Some(c4b), 1, 1)?;
        let sum = tape.add(base, res)?;
        Ok(tape.clamp01(sum))
    }
}

/// Applies the upsampler to a rendered image. Input channels are rgb plus
/// the feature image when present; a mismatch with the network's configured
/// input is an error.
pub fn upsample_rendered(
    store: &ParamStore,
    net: &Upsampler,
    img: &RenderedImage,
) -> Result<ImageRgb, RenderError> {
    let (w, h) = (img.rgb.width, img.rgb.height);
    let have = 3 + img.features.as_ref().map_or(0, |_| img.feature_channels);
    if have != net.in_channels {
        return Err(RenderError::ChannelMismatch { expected: net.in_channels, got: have });
    }
    // HWC → CHW
    let mut chw = vec![0.0f32; have * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                chw[ch * h * w + y * w + x] = img.rgb.data[(y * w + x) * 3 + ch];
            }
            if let Some(f) = &img.features {
                let c = img.feature_channels;
                for ch in 0..c {
                    chw[(3 + ch) * h * w + y * w + x] = f[(y * w + x) * c + ch];
                }
            }
        }
    }
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new();
    let input = tape.constant(&Tensor::new(vec![have, h, w], chw).expect("chw"));
    let rgb = tape.slice(input, 0, 0, 3)?;
    let out = net.forward(&mut tape, &mut leaves, store, input, rgb)?;
    let f = net.factor;
    let (hw, hh) = (w * f, h * f);
    let mut out_img = ImageRgb::new(hw, hh);
    let data = tape.data(out);
    for y in 0..hh {
        for x in 0..hw {
            for ch in 0..3 {
                out_img.data[(y * hw + x) * 3 + ch] = data[ch * hh * hw + y * hw + x];
            }
        }
    }
    Ok(out_img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::pose_from_yaw_pitch;
    use crate::tensor::grad_check;

    fn blobby_triplane(c: usize) -> TriPlane {
        // additive blob: σ-channel carries a bump on each plane, color
        // channels constant (a solid Lambertian object)
        let (h, w) = (32, 32);
        TriPlane::from_fn(h, w, c, 1.0, |_pl, v, u, ch| {
            let fu = u as f32 / (w - 1) as f32 * 2.0 - 1.0;
            let fv = v as f32 / (h - 1) as f32 * 2.0 - 1.0;
            let bump = (-(fu * fu + fv * fv) / 0.18).exp();
            match ch {
                0 => 0.8 / 3.0,          // r
                1 => 0.25 / 3.0,         // g
                2 => 0.1 / 3.0,          // b
                3 => 8.0 * bump - 1.2,   // σ pre-relu: negative far from center
                _ => 0.0,
            }
        })
    }

    #[test]
    fn zero_density_gives_exact_background() {
        let tp = TriPlane::zeros(8, 8, 4, 1.0);
        let dec = AffineDecoder::zero(4);
        let cfg = RenderConfig {
            width: 4,
            height: 4,
            samples_per_ray: 16,
            background: [0.3, 0.5, 0.9],
            ..Default::default()
        };
        let pose = pose_from_yaw_pitch(0.0, 0.0, 2.7).unwrap();
        let img = render_image(&tp, &dec, &pose, &Intrinsics::default(), &cfg).unwrap();
        for px in img.rgb.data.chunks_exact(3) {
            assert_eq!(px, [0.3, 0.5, 0.9]);
        }
        for &a in &img.alpha {
            assert_eq!(a, 0.0);
        }
    }

    #[test]
    fn homogeneous_slab_matches_beer_lambert() {
        // constant σ over the whole marched path: α = 1 − exp(−σL)
        let tp = TriPlane::zeros(8, 8, 4, 1.0);
        let mut dec = AffineDecoder::zero(4);
        let sigma0 = 0.8f32;
        dec.bias = [0.6, 0.6, 0.6, sigma0];
        let cfg = RenderConfig {
            near: 1.0,
            far: 3.5,
            samples_per_ray: 96,
            ..Default::default()
        };
        let m = march_ray(&tp, &dec, [0.0, 0.0, 2.7], [0.0, 0.0, -1.0], &cfg, 0).unwrap();
        let want = 1.0 - (-sigma0 * (3.5 - 1.0)).exp();
        assert!((m.alpha - want).abs() < 1e-3, "{} vs {}", m.alpha, want);
    }

    #[test]
    fn interior_slab_alpha_error_decreases_with_sample_count() {
        // slab occupying [1.5, 2.5] inside a [1, 3.5] march: discretization
        // error from the slab edges shrinks (within noise) as samples double
        let sigma0 = 1.0f32;
        let (a, b) = (1.5f32, 2.5f32);
        let want = 1.0 - (-sigma0 * (b - a)).exp();
        let mut prev = f32::INFINITY;
        for s in [8usize, 16, 32, 64, 128] {
            let cfg = RenderConfig { near: 1.0, far: 3.5, samples_per_ray: s, ..Default::default() };
            let ts = sample_ts(&cfg, 0);
            let deltas = deltas_from_ts(&ts, cfg.far);
            let sigmas: Vec<f32> =
                ts.iter().map(|&t| if t >= a && t < b { sigma0 } else { 0.0 }).collect();
            let rgbs = vec![[1.0, 1.0, 1.0]; ts.len()];
            let out = composite_ray(&rgbs, &sigmas, &deltas, [0.0; 3], None);
            let err = (out.alpha - want).abs();
            assert!(err <= prev + 1e-4, "error grew: {err} after {prev} at {s} samples");
            prev = err;
        }
        assert!(prev < 0.02, "finest error {prev}");
    }

    #[test]
    fn telescope_identity_holds_for_random_fields() {
        let mut rng = crate::tensor::rng::SplitMix::new(9);
        for _ in 0..200 {
            let s = 16 + rng.next_index(32);
            let sigmas: Vec<f32> = (0..s).map(|_| rng.next_range(0.0, 4.0)).collect();
            let deltas: Vec<f32> = (0..s).map(|_| rng.next_range(0.01, 0.1)).collect();
            let rgbs = vec![[0.5, 0.5, 0.5]; s];
            let mut weights = Vec::new();
            let out = composite_ray(&rgbs, &sigmas, &deltas, [0.0; 3], Some(&mut weights));
            let wsum: f32 = weights.iter().sum();
            assert!((wsum + out.t_final - 1.0).abs() < 1e-6);
            // Σw = 1 − Π(1−α) restated
            assert!((out.alpha - (1.0 - out.t_final)).abs() < 1e-6);
        }
    }

    #[test]
    fn increasing_one_sigma_never_decreases_alpha() {
        let mut rng = crate::tensor::rng::SplitMix::new(31);
        for _ in 0..100 {
            let s = 12;
            let sigmas: Vec<f32> = (0..s).map(|_| rng.next_range(0.0, 3.0)).collect();
            let deltas = vec![0.05f32; s];
            let rgbs = vec![[0.5; 3]; s];
            let base = composite_ray(&rgbs, &sigmas, &deltas, [0.0; 3], None).alpha;
            let i = rng.next_index(s);
            let mut bumped = sigmas.clone();
            bumped[i] += rng.next_range(0.1, 2.0);
            let after = composite_ray(&rgbs, &bumped, &deltas, [0.0; 3], None).alpha;
            assert!(after >= base - 1e-7, "{after} < {base}");
        }
    }

    #[test]
    fn render_is_deterministic() {
        let tp = blobby_triplane(4);
        let dec = AffineDecoder::identity_selection(4);
        let pose = pose_from_yaw_pitch(10.0, 5.0, 2.7).unwrap();
        let cfg = RenderConfig {
            width: 16,
            height: 16,
            samples_per_ray: 24,
            jitter: true,
            seed: 7,
            ..Default::default()
        };
        let a = render_image(&tp, &dec, &pose, &Intrinsics::default(), &cfg).unwrap();
        let b = render_image(&tp, &dec, &pose, &Intrinsics::default(), &cfg).unwrap();
        assert_eq!(a.rgb.to_ppm_bytes(), b.rgb.to_ppm_bytes());
        let bits =
            |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<u32>>();
        assert_eq!(bits(&a.rgb.data), bits(&b.rgb.data));
        assert_eq!(bits(&a.alpha), bits(&b.alpha));
    }

    #[test]
    fn nearby_views_of_a_solid_blob_agree() {
        // geometric consistency smoke test: 3 degrees apart, overlapping
        // (opaque) pixels agree in color
        let tp = blobby_triplane(4);
        let dec = AffineDecoder::identity_selection(4);
        let cfg = RenderConfig { width: 32, height: 32, samples_per_ray: 48, ..Default::default() };
        let intr = Intrinsics::default();
        let a = render_image(&tp, &dec, &pose_from_yaw_pitch(0.0, 0.0, 2.7).unwrap(), &intr, &cfg)
            .unwrap();
        let b = render_image(&tp, &dec, &pose_from_yaw_pitch(3.0, 0.0, 2.7).unwrap(), &intr, &cfg)
            .unwrap();
        let mut diff = 0.0f64;
        let mut count = 0usize;
        for i in 0..a.alpha.len() {
            if a.alpha[i] > 0.5 && b.alpha[i] > 0.5 {
                for ch in 0..3 {
                    diff += (a.rgb.data[i * 3 + ch] as f64 - b.rgb.data[i * 3 + ch] as f64).abs();
                }
                count += 3;
            }
        }
        assert!(count > 30, "blob should cover overlapping pixels");
        let mad = diff / count as f64;
        assert!(mad < 0.05, "view-consistency MAD {mad}");
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let (n, s, cv) = (3usize, 6usize, 3usize);
        let sigma = Tensor::rand_uniform(&[n, s], 0.2, 2.0, 5);
        let values = Tensor::rand_uniform(&[n, s, cv], 0.2, 0.9, 6);
        let deltas: Vec<f32> = (0..n * s).map(|i| 0.05 + 0.01 * (i % 5) as f32).collect();
        let bg = vec![0.1, 0.2, 0.3];

        // gradient wrt sigma
        let (v2, d2, bg2) = (values.clone(), deltas.clone(), bg.clone());
        let err = grad_check(
            move |t, sid| {
                let vid = t.leaf(&v2);
                let out = composite_tape(t, sid, vid, d2.clone(), bg2.clone())?;
                let w = Tensor::rand_uniform(&[n, cv + 1], 0.5, 1.0, 9);
                let wid = t.leaf(&w);
                let p = t.mul(out, wid)?;
                Ok(t.sum_all(p))
            },
            &sigma,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "sigma grad rel error {err}");

        // gradient wrt values
        let (s2, d2, bg2) = (sigma.clone(), deltas.clone(), bg.clone());
        let err = grad_check(
            move |t, vid| {
                let sid = t.leaf(&s2);
                let out = composite_tape(t, sid, vid, d2.clone(), bg2.clone())?;
                let w = Tensor::rand_uniform(&[n, cv + 1], 0.5, 1.0, 10);
                let wid = t.leaf(&w);
                let p = t.mul(out, wid)?;
                Ok(t.sum_all(p))
            },
            &values,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "values grad rel error {err}");
    }

    #[test]
    fn tape_render_matches_scalar_march() {
        let tp = blobby_triplane(4);
        let mut store = ParamStore::new();
        let mlp = DecoderMlp::new(&mut store, "dmlp/", 4, 42);
        let pose = pose_from_yaw_pitch(5.0, -3.0, 2.7).unwrap();
        let cfg = RenderConfig { width: 6, height: 6, samples_per_ray: 12, ..Default::default() };
        let rays = pixel_rays(&pose, &Intrinsics::default(), 6, 6).unwrap();

        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let planes = tape.constant(&tp.to_tensor());
        let (rgb, alpha) = render_rays_tape(
            &mut tape, &mut leaves, &store, planes, tp.extent(), &mlp, &rays, &cfg,
        )
        .unwrap();

        let view = mlp.view(&store);
        for (i, ray) in rays.iter().enumerate() {
            let m = march_ray(&tp, &view, ray.origin, ray.dir, &cfg, ray.index).unwrap();
            for ch in 0..3 {
                let a = tape.data(rgb)[i * 3 + ch];
                assert!((a - m.rgb[ch]).abs() < 1e-5, "{a} vs {}", m.rgb[ch]);
            }
            assert!((tape.data(alpha)[i] - m.alpha).abs() < 1e-5);
        }
    }

    #[test]
    fn render_gradients_wrt_mlp_match_finite_differences() {
        // mean-pixel loss at 8×8, gradient wrt the first MLP weight matrix
        let tp = blobby_triplane(4);
        let mut store = ParamStore::new();
        let mlp = DecoderMlp::new(&mut store, "dmlp/", 4, 3);
        let pose = pose_from_yaw_pitch(0.0, 0.0, 2.7).unwrap();
        let cfg = RenderConfig { width: 8, height: 8, samples_per_ray: 8, ..Default::default() };
        let rays = pixel_rays(&pose, &Intrinsics::default(), 8, 8).unwrap();
        let w1 = store.value(mlp.w1).clone();
        let planes_t = tp.to_tensor();

        let err = grad_check(
            move |t, w1_id| {
                // rebuild the MLP path with w1 swapped for the checked tensor
                let planes = t.constant(&planes_t);
                let mut pts = Vec::new();
                let mut deltas = Vec::new();
                for ray in &rays {
                    let ts = sample_ts(&cfg, ray.index);
                    let ds = deltas_from_ts(&ts, cfg.far);
                    for (i, &tv) in ts.iter().enumerate() {
                        pts.push([
                            ray.origin[0] + tv * ray.dir[0],
                            ray.origin[1] + tv * ray.dir[1],
                            ray.origin[2] + tv * ray.dir[2],
                        ]);
                        deltas.push(ds[i]);
                    }
                }
                let feats = sample_batch(t, planes, &pts, 1.0)?;
                let b1 = t.constant(&store.value(mlp.b1).clone());
                let w2 = t.constant(&store.value(mlp.w2).clone());
                let b2 = t.constant(&store.value(mlp.b2).clone());
                let w3 = t.constant(&store.value(mlp.w3).clone());
                let b3 = t.constant(&store.value(mlp.b3).clone());
                let h = t.linear(feats, w1_id, b1)?;
                let h = t.softplus(h);
                let h = t.linear(h, w2, b2)?;
                let h = t.softplus(h);
                let out = t.linear(h, w3, b3)?;
                let rgb_raw = t.slice(out, 1, 0, 3)?;
                let rgb = t.sigmoid(rgb_raw);
                let sg_raw = t.slice(out, 1, 3, 1)?;
                let sigma = t.softplus(sg_raw);
                let n = 64;
                let sigma_ns = t.reshape(sigma, vec![n, 8])?;
                let vals = t.reshape(rgb, vec![n, 8, 3])?;
                let out = composite_tape(t, sigma_ns, vals, deltas.clone(), vec![0.0; 3])?;
                let rgb_out = t.slice(out, 1, 0, 3)?;
                Ok(t.mean_all(rgb_out))
            },
            &w1,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel error {err}");
    }

    #[test]
    fn upsampler_is_identity_at_init() {
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "sr/", 3, 2, 5);
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new();
        let img = Tensor::rand_uniform(&[3, 12, 12], 0.0, 1.0, 8);
        let input = tape.constant(&img);
        let out = up.forward(&mut tape, &mut leaves, &store, input, input).unwrap();
        let base = tape.upsample_bilinear(input, 2).unwrap();
        assert_eq!(tape.shape(out), &[3, 24, 24]);
        for (a, b) in tape.data(out).iter().zip(tape.data(base)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn upsampler_shape_contract_and_channel_mismatch() {
        let mut store = ParamStore::new();
        let up = Upsampler::new(&mut store, "sr/", 7, 2, 5);
        let img = RenderedImage {
            rgb: ImageRgb::new(8, 8),
            alpha: vec![0.0; 64],
            feature_channels: 4,
            features: Some(vec![0.0; 64 * 4]),
        };
        let out = upsample_rendered(&store, &up, &img).unwrap();
        assert_eq!((out.width, out.height), (16, 16));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));

        let img_no_feat = RenderedImage {
            rgb: ImageRgb::new(8, 8),
            alpha: vec![0.0; 64],
            feature_channels: 0,
            features: None,
        };
        assert!(matches!(
            upsample_rendered(&store, &up, &img_no_feat),
            Err(RenderError::ChannelMismatch { .. })
        ));
    }
}
