//! Camera poses, fixed pinhole intrinsics, per-pixel rays, and the
//! holographic yaw-sweep pose generator.
//!
//! Conventions, shared with the renderer and the synthetic-scene generator:
//! camera-to-world rotation, camera looks along its local −z, up is +y,
//! pixel (0,0) is the top-left corner and rays pass through pixel centers.
//! Focal length is normalized by image width. Angles at the API surface are
//! degrees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("rotation is not orthonormal (max deviation {0:.2e})")]
    NotOrthonormal(f64),
    #[error("rotation determinant {0:.6} is not +1")]
    NotRightHanded(f64),
    #[error("pitch {0} deg leaves the up-vector undefined")]
    GimbalPitch(f64),
    #[error("{what} must be positive, got {value}")]
    NotPositive { what: &'static str, value: f64 },
    #[error("view count must be at least 1")]
    EmptySweep,
    #[error("yaw range [{0}, {1}] is inverted")]
    InvertedRange(f64, f64),
    #[error("image dims {0}x{1} invalid")]
    BadDims(usize, usize),
}

/// Rigid camera-to-world transform. `rotation` is row-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Focal length normalized by image width.
    pub focal: f64,
    /// Principal point in [0,1]².
    pub principal: [f64; 2],
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics { focal: 2.0, principal: [0.5, 0.5] }
    }
}

/// One ray per pixel, row-major, f32 for the sampling path.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub origins: Vec<[f32; 3]>,
    pub directions: Vec<[f32; 3]>,
    pub width: usize,
    pub height: usize,
}

fn mat_mul_vec(r: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
        r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
        r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { rotation: [1., 0., 0., 0., 1., 0., 0., 0., 1.], translation: [0.; 3] }
    }

    /// Checks RᵀR = I and det(R) = +1 within 1e-5.
    pub fn validate(&self) -> Result<(), PoseError> {
        let r = &self.rotation;
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k * 3 + i] * r[k * 3 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - want).abs());
            }
        }
        if max_dev > 1e-5 {
            return Err(PoseError::NotOrthonormal(max_dev));
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(PoseError::NotRightHanded(det));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        self.translation
    }

    /// World-space direction of the camera-local vector `v`.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        mat_mul_vec(&self.rotation, v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Camera on a sphere of `radius` looking at the origin, up +y.
/// Yaw 0 / pitch 0 puts the camera at (0, 0, radius) looking along −z.
pub fn pose_from_yaw_pitch(
    yaw_deg: f64,
    pitch_deg: f64,
    radius: f64,
) -> Result<CameraPose, PoseError> {
    if radius <= 0.0 {
        return Err(PoseError::NotPositive { what: "radius", value: radius });
    }
    if pitch_deg.abs() >= 90.0 - 1e-9 {
        return Err(PoseError::GimbalPitch(pitch_deg));
    }
    let yaw = yaw_deg.to_radians();
    let pitch = pitch_deg.to_radians();
    let pos = [
        radius * yaw.sin() * pitch.cos(),
        radius * pitch.sin(),
        radius * yaw.cos() * pitch.cos(),
    ];
    // camera -z looks at the origin
    let z_axis = normalize(pos);
    let x_axis = normalize(cross([0.0, 1.0, 0.0], z_axis));
    let y_axis = cross(z_axis, x_axis);
    Ok(CameraPose {
        rotation: [
            x_axis[0], y_axis[0], z_axis[0],
            x_axis[1], y_axis[1], z_axis[1],
            x_axis[2], y_axis[2], z_axis[2],
        ],
        translation: pos,
    })
}

/// One ray per pixel through the pixel center. All origins equal the camera
/// position; directions are unit length.
pub fn generate_rays(
    pose: &CameraPose,
    intr: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<RayBundle, PoseError> {
    if width == 0 || height == 0 {
        return Err(PoseError::BadDims(width, height));
    }
    pose.validate()?;
    let origin = [
        pose.translation[0] as f32,
        pose.translation[1] as f32,
        pose.translation[2] as f32,
    ];
    let aspect = height as f64 / width as f64;
    let mut directions = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            let u = (px as f64 + 0.5) / width as f64;
            let v = (py as f64 + 0.5) / height as f64;
            let cam = [
                (u - intr.principal[0]) / intr.focal,
                -(v - intr.principal[1]) * aspect / intr.focal,
                -1.0,
            ];
            let d = normalize(mat_mul_vec(&pose.rotation, cam));
            directions.push([d[0] as f32, d[1] as f32, d[2] as f32]);
        }
    }
    Ok(RayBundle { origins: vec![origin; width * height], directions, width, height })
}

/// `count` poses orbiting the origin at the center pose's radius and pitch,
/// yaws uniformly spaced inclusive of both endpoints. `count == 1` yields
/// the midpoint yaw.
pub fn yaw_sweep(
    center: &CameraPose,
    count: usize,
    yaw_min_deg: f64,
    yaw_max_deg: f64,
) -> Result<Vec<CameraPose>, PoseError> {
    if count < 1 {
        return Err(PoseError::EmptySweep);
    }
    if yaw_min_deg > yaw_max_deg {
        return Err(PoseError::InvertedRange(yaw_min_deg, yaw_max_deg));
    }
    let radius = norm(center.translation);
    if radius <= 0.0 {
        return Err(PoseError::NotPositive { what: "orbit radius", value: radius });
    }
    let pitch = (center.translation[1] / radius).asin().to_degrees();
    sweep_yaws(count, yaw_min_deg, yaw_max_deg)
        .into_iter()
        .map(|yaw| pose_from_yaw_pitch(yaw, pitch, radius))
        .collect()
}

/// The yaw angles a sweep visits, endpoints inclusive.
pub fn sweep_yaws(count: usize, yaw_min_deg: f64, yaw_max_deg: f64) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (yaw_min_deg + yaw_max_deg)];
    }
    (0..count)
        .map(|i| yaw_min_deg + (yaw_max_deg - yaw_min_deg) * (i as f64 / (count - 1) as f64))
        .collect()
}
