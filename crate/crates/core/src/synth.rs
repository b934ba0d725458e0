//! Synthetic blob-world scenes: analytic radiance fields with known ground
//! truth, used in place of pretrained generators and real video.
//!
//! A scene is a set of Gaussian density blobs with colors, plus a small
//! expression vector that displaces designated blob centers along fixed
//! per-scene basis directions (linearly). The analytic field renders with
//! exactly the same sampling and compositing as the tri-plane renderer, and
//! can be baked into a tri-plane + fixed affine decoder by a closed-form
//! least-squares fit on the texel lattice.

use crate::camera::{generate_rays, pose_from_yaw_pitch, CameraPose, Intrinsics};
use crate::img::ImageRgb;
use crate::par;
use crate::renderer::{
    composite_ray, deltas_from_ts, sample_ts, AffineDecoder, RenderConfig, RenderError,
    RenderedImage,
};
use crate::tensor::rng::{derive_seed, SplitMix};
use crate::triplane::TriPlane;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bake requires square planes, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("bake requires at least 4 feature channels, got {0}")]
    TooFewChannels(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Default background of blob-world renders: dark gray, distinguishable
/// from black border masking.
pub const BLOB_BACKGROUND: [f32; 3] = [0.1, 0.1, 0.1];

/// World-units displacement per unit of one expression coordinate.
pub const EXPR_GAIN: f32 = 0.25;

/// Expression dimensionality.
pub const EXPR_DIM: usize = 4;

/// Canonical frontal orbit radius in units of the cube extent.
pub const FRONTAL_RADIUS: f64 = 2.7;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f32; 3],
    pub radius: f32,
    pub rgb: [f32; 3],
    pub peak: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub blobs: Vec<Blob>,
    /// Per expression coordinate: (designated blob, unit direction).
    /// Directions lie in the xy plane so expression changes stay visible
    /// from frontal views.
    pub basis: Vec<(usize, [f32; 3])>,
    pub expression: Vec<f32>,
    pub extent: f32,
}

impl SyntheticScene {
    /// Draws appearance and basis parameters from a seeded distribution.
    /// Expression starts at zero.
    pub fn sample_params(seed: u64) -> Self {
        let mut rng = SplitMix::new(derive_seed(seed, 0xb10b));
        let k = 3 + rng.next_index(4); // K in [3, 6]
        let blobs = (0..k)
            .map(|_| Blob {
                center: [
                    rng.next_range(-0.38, 0.38),
                    rng.next_range(-0.38, 0.38),
                    rng.next_range(-0.38, 0.38),
                ],
                radius: rng.next_range(0.22, 0.38),
                rgb: [
                    rng.next_range(0.15, 0.95),
                    rng.next_range(0.15, 0.95),
                    rng.next_range(0.15, 0.95),
                ],
                peak: rng.next_range(6.0, 18.0),
            })
            .collect();
        let basis = (0..EXPR_DIM)
            .map(|j| {
                let theta = rng.next_range(0.0, std::f32::consts::TAU);
                (j % k, [theta.cos(), theta.sin(), 0.0])
            })
            .collect();
        SyntheticScene { blobs, basis, expression: vec![0.0; EXPR_DIM], extent: 1.0 }
    }

    pub fn with_expression(&self, e: &[f32]) -> Self {
        let mut s = self.clone();
        s.expression = e.to_vec();
        s
    }

    /// Blob centers displaced by the current expression; displacement is
    /// linear in the expression vector.
    pub fn displaced_centers(&self) -> Vec<[f32; 3]> {
        let mut centers: Vec<[f32; 3]> = self.blobs.iter().map(|b| b.center).collect();
        for (j, &(blob, dir)) in self.basis.iter().enumerate() {
            let e = self.expression.get(j).copied().unwrap_or(0.0);
            for k in 0..3 {
                centers[blob][k] += EXPR_GAIN * e * dir[k];
            }
        }
        centers
    }

    /// Density σ(p) ≥ 0: a sum of Gaussian blobs.
    pub fn density(&self, p: [f32; 3]) -> f32 {
        self.density_color(p).0
    }

    /// Density and the density-weighted color blend at `p`.
    pub fn density_color(&self, p: [f32; 3]) -> (f32, [f32; 3]) {
        let centers = self.displaced_centers();
        let mut sigma = 0.0f32;
        let mut rgb = [0.0f32; 3];
        for (b, c) in self.blobs.iter().zip(&centers) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let dz = p[2] - c[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            let s = b.peak * (-d2 / (2.0 * b.radius * b.radius)).exp();
            sigma += s;
            rgb[0] += s * b.rgb[0];
            rgb[1] += s * b.rgb[1];
            rgb[2] += s * b.rgb[2];
        }
        let denom = sigma + 1e-4;
        ((sigma), [rgb[0] / denom, rgb[1] / denom, rgb[2] / denom])
    }

    /// Canonical frontal pose for this scene's cube.
    pub fn frontal_pose(&self) -> CameraPose {
        pose_from_yaw_pitch(0.0, 0.0, FRONTAL_RADIUS * self.extent as f64).expect("valid pose")
    }
}

/// Default render config for blob-world frames at a given square resolution.
pub fn blob_render_config(res: usize, samples: usize) -> RenderConfig {
    RenderConfig {
        width: res,
        height: res,
        samples_per_ray: samples,
        background: BLOB_BACKGROUND,
        ..Default::default()
    }
}

/// Ray-marches the analytic field directly (no tri-plane, no MLP), with the
/// same sampling and compositing as the renderer module.
pub fn analytic_render(
    scene: &SyntheticScene,
    pose: &CameraPose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<RenderedImage, RenderError> {
    cfg.validate()?;
    let rays = generate_rays(pose, intr, cfg.width, cfg.height)?;
    // displaced centers are fixed for the whole frame
    let centers = scene.displaced_centers();
    let rows: Vec<(Vec<f32>, Vec<f32>)> = par::map_indexed(cfg.height, |py| {
        let mut rgb_row = Vec::with_capacity(cfg.width * 3);
        let mut alpha_row = Vec::with_capacity(cfg.width);
        let s = cfg.samples_per_ray;
        let mut rgbs = vec![[0.0f32; 3]; s];
        let mut sigmas = vec![0.0f32; s];
        for px in 0..cfg.width {
            let i = py * cfg.width + px;
            let o = rays.origins[i];
            let d = rays.directions[i];
            let ts = sample_ts(cfg, i as u64);
            let deltas = deltas_from_ts(&ts, cfg.far);
            for (si, &t) in ts.iter().enumerate() {
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let (sg, col) = density_color_at(scene, &centers, p);
                sigmas[si] = sg;
                rgbs[si] = col;
            }
            let out = composite_ray(&rgbs, &sigmas, &deltas, cfg.background, None);
            rgb_row.extend_from_slice(&out.rgb);
            alpha_row.push(out.alpha);
        }
        (rgb_row, alpha_row)
    });
    let mut img = ImageRgb::new(cfg.width, cfg.height);
    let mut alpha = Vec::with_capacity(cfg.width * cfg.height);
    for (py, (rgb_row, alpha_row)) in rows.into_iter().enumerate() {
        img.data[py * cfg.width * 3..(py + 1) * cfg.width * 3].copy_from_slice(&rgb_row);
        alpha.extend_from_slice(&alpha_row);
    }
    Ok(RenderedImage { rgb: img, alpha, feature_channels: 0, features: None })
}

fn density_color_at(
    scene: &SyntheticScene,
    centers: &[[f32; 3]],
    p: [f32; 3],
) -> (f32, [f32; 3]) {
    let mut sigma = 0.0f32;
    let mut rgb = [0.0f32; 3];
    for (b, c) in scene.blobs.iter().zip(centers) {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        let dz = p[2] - c[2];
        let d2 = dx * dx + dy * dy + dz * dz;
        let s = b.peak * (-d2 / (2.0 * b.radius * b.radius)).exp();
        sigma += s;
        rgb[0] += s * b.rgb[0];
        rgb[1] += s * b.rgb[1];
        rgb[2] += s * b.rgb[2];
    }
    let denom = sigma + 1e-4;
    (sigma, [rgb[0] / denom, rgb[1] / denom, rgb[2] / denom])
}

/// A baked ground-truth tri-plane with its fixed decoder and lattice fit
/// diagnostics (mean absolute residual of the additive fit, per field).
pub struct BakedTriPlane {
    pub triplane: TriPlane,
    pub decoder: AffineDecoder,
    pub sigma_fit_mae: f32,
    pub color_fit_mae: f32,
}

/// Fits plane features to the analytic field by exact least squares on the
/// texel lattice. The fixed decoder is sum-then-affine: channels 0..2 carry
/// color, channel 3 carries density; remaining channels are zero.
///
/// On a complete product lattice the least-squares additive decomposition
/// f_xy + f_yz + f_zx has a closed form: the ANOVA decomposition up to
/// two-way interactions, with the grand mean split three ways and each main
/// effect split between the two planes containing its axis.
pub fn bake_triplane(
    scene: &SyntheticScene,
    n: usize,
    channels: usize,
) -> Result<BakedTriPlane, SynthError> {
    if channels < 4 {
        return Err(SynthError::TooFewChannels(channels));
    }
    let e = scene.extent;
    let grid: Vec<f32> = (0..n)
        .map(|k| -e + 2.0 * e * k as f32 / (n - 1) as f32)
        .collect();
    let centers = scene.displaced_centers();

    // field samples on the lattice, 4 channels (r, g, b, sigma)
    let n3 = n * n * n;
    let mut fields = vec![0.0f32; 4 * n3];
    {
        let (r_f, rest) = fields.split_at_mut(n3);
        let (g_f, rest) = rest.split_at_mut(n3);
        let (b_f, s_f) = rest.split_at_mut(n3);
        par::for_each_chunk(s_f, n * n, |ix, s_chunk| {
            // chunk = all (iy, iz) for one ix
            for iy in 0..n {
                for iz in 0..n {
                    let p = [grid[ix], grid[iy], grid[iz]];
                    let (sg, _) = density_color_at(scene, &centers, p);
                    s_chunk[iy * n + iz] = sg;
                }
            }
            let _ = ix;
        });
        // colors sequentially (cheap relative to density eval reuse)
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let p = [grid[ix], grid[iy], grid[iz]];
                    let (_, col) = density_color_at(scene, &centers, p);
                    let idx = (ix * n + iy) * n + iz;
                    r_f[idx] = col[0];
                    g_f[idx] = col[1];
                    b_f[idx] = col[2];
                }
            }
        }
    }

    let sigma_field = fields[3 * n3..4 * n3].to_vec();
    let peak_max = scene.blobs.iter().map(|b| b.peak).fold(0.0f32, f32::max);
    let tau = 0.02 * peak_max.max(1e-6);

    let mut tp = TriPlane::zeros(n, n, channels, e);
    let mut maes = [0.0f64; 4];
    for ch in 0..4 {
        let field = &fields[ch * n3..(ch + 1) * n3];
        let fit = fit_with_refinement(field, &sigma_field, n, tau, ch == 3);
        // write plane values honoring the (u, v) conventions:
        // T_xy (u=x, v=y), T_yz (u=y, v=z), T_zx (u=z, v=x)
        for a in 0..n {
            for b in 0..n {
                // f_xy(ix=a, iy=b) → T_xy[v=b][u=a]
                tp.plane_mut(crate::triplane::PLANE_XY)[(b * n + a) * channels + ch] =
                    fit.f_xy[a * n + b];
                // f_yz(iy=a, iz=b) → T_yz[v=b][u=a]
                tp.plane_mut(crate::triplane::PLANE_YZ)[(b * n + a) * channels + ch] =
                    fit.f_yz[a * n + b];
                // f_zx(iz=a, ix=b) → T_zx[v=b][u=a]
                tp.plane_mut(crate::triplane::PLANE_ZX)[(b * n + a) * channels + ch] =
                    fit.f_zx[a * n + b];
            }
        }
        // lattice fit residual
        let mut mae = 0.0f64;
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let pred =
                        fit.f_xy[ix * n + iy] + fit.f_yz[iy * n + iz] + fit.f_zx[iz * n + ix];
                    mae += (pred as f64 - field[(ix * n + iy) * n + iz] as f64).abs();
                }
            }
        }
        maes[ch] = mae / n3 as f64;
    }

    Ok(BakedTriPlane {
        triplane: tp,
        decoder: AffineDecoder::identity_selection(channels),
        sigma_fit_mae: maes[3] as f32,
        color_fit_mae: ((maes[0] + maes[1] + maes[2]) / 3.0) as f32,
    })
}

struct AdditiveFit {
    f_xy: Vec<f32>, // indexed [ix * n + iy]
    f_yz: Vec<f32>, // [iy * n + iz]
    f_zx: Vec<f32>, // [iz * n + ix]
}

impl AdditiveFit {
    #[inline]
    fn sum_at(&self, n: usize, ix: usize, iy: usize, iz: usize) -> f32 {
        self.f_xy[ix * n + iy] + self.f_yz[iy * n + iz] + self.f_zx[iz * n + ix]
    }
}

/// One-sided refinement of the additive fit. Rendering applies relu to the
/// density (and ignores color where density is zero), so lattice points in
/// empty space only hurt when the fitted sum is positive. Each pass frees
/// satisfied empty-space points (target := current fit, zero residual) and
/// pushes violating ones below zero, concentrating the plane capacity on
/// the occupied region.
fn fit_with_refinement(
    field: &[f32],
    sigma_field: &[f32],
    n: usize,
    tau: f32,
    is_density: bool,
) -> AdditiveFit {
    let mut target = field.to_vec();
    let mut fit = anova_additive_fit(&target, n);
    let margin = if is_density { 0.5f32 * tau } else { 0.0 };
    for _ in 0..3 {
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let idx = (ix * n + iy) * n + iz;
                    if sigma_field[idx] >= tau {
                        continue; // occupied: keep the true target
                    }
                    let s = fit.sum_at(n, ix, iy, iz);
                    target[idx] = if is_density {
                        if s <= 0.0 {
                            s // satisfied: relu clamps it anyway
                        } else {
                            -margin
                        }
                    } else {
                        s // color in empty space never renders
                    };
                }
            }
        }
        fit = anova_additive_fit(&target, n);
    }
    fit
}

/// Exact least-squares fit of f_xy(x,y) + f_yz(y,z) + f_zx(z,x) to a field
/// on a complete n³ lattice, via ANOVA means (f64 accumulation).
fn anova_additive_fit(field: &[f32], n: usize) -> AdditiveFit {
    let nf = n as f64;
    let n3 = nf * nf * nf;
    let mut mean = 0.0f64;
    let mut mx = vec![0.0f64; n];
    let mut my = vec![0.0f64; n];
    let mut mz = vec![0.0f64; n];
    let mut mxy = vec![0.0f64; n * n];
    let mut myz = vec![0.0f64; n * n];
    let mut mzx = vec![0.0f64; n * n];
    for ix in 0..n {
        for iy in 0..n {
            let base = (ix * n + iy) * n;
            for iz in 0..n {
                let v = field[base + iz] as f64;
                mean += v;
                mx[ix] += v;
                my[iy] += v;
                mz[iz] += v;
                mxy[ix * n + iy] += v;
                myz[iy * n + iz] += v;
                mzx[iz * n + ix] += v;
            }
        }
    }
    mean /= n3;
    for v in mx.iter_mut().chain(my.iter_mut()).chain(mz.iter_mut()) {
        *v /= nf * nf;
    }
    for v in mxy.iter_mut().chain(myz.iter_mut()).chain(mzx.iter_mut()) {
        *v /= nf;
    }
    // main effects
    let ax: Vec<f64> = mx.iter().map(|v| v - mean).collect();
    let by: Vec<f64> = my.iter().map(|v| v - mean).collect();
    let cz: Vec<f64> = mz.iter().map(|v| v - mean).collect();
    let third = mean / 3.0;
    let mut f_xy = vec![0.0f32; n * n];
    let mut f_yz = vec![0.0f32; n * n];
    let mut f_zx = vec![0.0f32; n * n];
    for a in 0..n {
        for b in 0..n {
            let d_xy = mxy[a * n + b] - mean - ax[a] - by[b];
            f_xy[a * n + b] = (d_xy + 0.5 * ax[a] + 0.5 * by[b] + third) as f32;
            let d_yz = myz[a * n + b] - mean - by[a] - cz[b];
            f_yz[a * n + b] = (d_yz + 0.5 * by[a] + 0.5 * cz[b] + third) as f32;
            let d_zx = mzx[a * n + b] - mean - cz[a] - ax[b];
            f_zx[a * n + b] = (d_zx + 0.5 * cz[a] + 0.5 * ax[b] + third) as f32;
        }
    }
    AdditiveFit { f_xy, f_yz, f_zx }
}

// ── datasets ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub pose: CameraPose,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub expression: Vec<f32>,
    pub image: ImageRgb,
    /// 2x resolution target for upsampler training, when requested.
    pub image_hi: Option<ImageRgb>,
}

#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub scene: SyntheticScene,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub seed: u64,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetOptions {
    pub resolution: usize,
    pub samples_per_ray: usize,
    /// Render a 2x-resolution copy of each frame as well.
    pub hires: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions { resolution: 64, samples_per_ray: 48, hires: false }
    }
}

/// Smooth seeded trajectory value: a two-harmonic sine with random phases.
fn smooth_path(rng: &mut SplitMix, amplitude: f32) -> impl Fn(f32) -> f32 {
    let a1 = rng.next_range(0.5, 1.0) * amplitude;
    let a2 = rng.next_range(0.0, 0.4) * amplitude;
    let p1 = rng.next_range(0.0, std::f32::consts::TAU);
    let p2 = rng.next_range(0.0, std::f32::consts::TAU);
    move |t: f32| {
        a1 * (std::f32::consts::TAU * t + p1).sin() + a2 * (2.0 * std::f32::consts::TAU * t + p2).sin()
    }
}

/// Deterministic dataset: `n_scenes` scenes, each a smooth pose+expression
/// trajectory of `frames_per_scene` frames rendered analytically.
pub fn make_dataset(
    seed: u64,
    n_scenes: usize,
    frames_per_scene: usize,
    opts: DatasetOptions,
) -> SceneDataset {
    let scenes: Vec<SceneRecord> = par::map_indexed(n_scenes, |si| {
        let scene_seed = derive_seed(seed, si as u64);
        let scene = SyntheticScene::sample_params(scene_seed);
        let mut rng = SplitMix::new(derive_seed(scene_seed, 0x7247));
        let yaw_path = smooth_path(&mut rng, 30.0);
        let pitch_path = smooth_path(&mut rng, 12.0);
        let expr_paths: Vec<_> = (0..EXPR_DIM)
            .map(|_| {
                let amp = rng.next_range(0.5, 0.9);
                smooth_path(&mut rng, amp)
            })
            .collect();
        let frames = (0..frames_per_scene)
            .map(|fi| {
                let t = fi as f32 / frames_per_scene.max(1) as f32;
                let yaw = yaw_path(t) as f64;
                let pitch = pitch_path(t) as f64;
                let pose = pose_from_yaw_pitch(yaw, pitch, FRONTAL_RADIUS * scene.extent as f64)
                    .expect("trajectory pose");
                let expression: Vec<f32> = expr_paths.iter().map(|p| p(t)).collect();
                let posed = scene.with_expression(&expression);
                let cfg = blob_render_config(opts.resolution, opts.samples_per_ray);
                let image = analytic_render(&posed, &pose, &Intrinsics::default(), &cfg)
                    .expect("analytic render")
                    .rgb;
                let image_hi = if opts.hires {
                    let cfg2 = blob_render_config(opts.resolution * 2, opts.samples_per_ray);
                    Some(
                        analytic_render(&posed, &pose, &Intrinsics::default(), &cfg2)
                            .expect("analytic render hi")
                            .rgb,
                    )
                } else {
                    None
                };
                FrameRecord { pose, yaw_deg: yaw, pitch_deg: pitch, expression, image, image_hi }
            })
            .collect();
        SceneRecord { scene, frames }
    });
    SceneDataset {
        seed,
        resolution: opts.resolution,
        samples_per_ray: opts.samples_per_ray,
        scenes,
    }
}

/// Content hash over all rendered frames (for determinism checks).
pub fn dataset_hash(ds: &SceneDataset) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    for s in &ds.scenes {
        for f in &s.frames {
            for &v in &f.image.data {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

// ── manifest output (CLI `synth`) ────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: String,
    pub pose: String,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub expression: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestScene {
    pub index: usize,
    pub params: SyntheticScene,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub resolution: usize,
    pub scene_list: Vec<ManifestScene>,
}

/// Writes a dataset directory: `manifest.json`, per-frame PPM images and
/// pose JSON files.
pub fn save_dataset(ds: &SceneDataset, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut scene_list = Vec::new();
    for (si, s) in ds.scenes.iter().enumerate() {
        let mut frames = Vec::new();
        for (fi, f) in s.frames.iter().enumerate() {
            let img_name = format!("scene{si:03}_frame{fi:03}.ppm");
            let pose_name = format!("scene{si:03}_frame{fi:03}.pose.json");
            f.image
                .save_ppm(&dir.join(&img_name))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            std::fs::write(dir.join(&pose_name), f.pose.to_json())?;
            frames.push(ManifestFrame {
                image: img_name,
                pose: pose_name,
                yaw_deg: f.yaw_deg,
                pitch_deg: f.pitch_deg,
                expression: f.expression.clone(),
            });
        }
        scene_list.push(ManifestScene { index: si, params: s.scene.clone(), frames });
    }
    let manifest = Manifest {
        seed: ds.seed,
        scenes: ds.scenes.len(),
        frames_per_scene: ds.scenes.first().map_or(0, |s| s.frames.len()),
        resolution: ds.resolution,
        scene_list,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
