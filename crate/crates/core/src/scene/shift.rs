//! Sensor- and style-like distribution shifts applied to finished scenes.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::generate::rerender;
use super::{normalize3, Labels, Result, Scene, SceneError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftProfile {
    /// Gaussian σ on coordinates, metres.
    pub coord_noise: f32,
    /// Gaussian σ on normals before renormalisation.
    pub normal_noise: f32,
    pub color_gain: [f32; 3],
    pub color_bias: [f32; 3],
    /// Rotation of colours about the grey axis.
    pub hue_rotation_deg: f32,
    /// Point-count multiplier in `(0, 4]`.
    pub density: f32,
    /// Proportion family: 0 unchanged, 1 squat and wide, 2 tall and narrow.
    pub style: u32,
}

impl Default for ShiftProfile {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftProfile {
    pub fn identity() -> Self {
        Self {
            coord_noise: 0.0,
            normal_noise: 0.0,
            color_gain: [1.0; 3],
            color_bias: [0.0; 3],
            hue_rotation_deg: 0.0,
            density: 1.0,
            style: 0,
        }
    }

    /// Named presets: `identity`, `sensor-A`, `sensor-B`, `style-shift`.
    pub fn preset(name: &str) -> Option<Self> {
        let id = Self::identity();
        Some(match name {
            "identity" => id,
            "sensor-A" => Self {
                coord_noise: 0.015,
                normal_noise: 0.35,
                color_gain: [1.2, 0.85, 0.7],
                color_bias: [0.05, 0.0, -0.05],
                hue_rotation_deg: 40.0,
                ..id
            },
            "sensor-B" => Self {
                coord_noise: 0.01,
                normal_noise: 0.2,
                color_gain: [0.6, 0.6, 0.6],
                color_bias: [0.0, 0.0, 0.05],
                density: 0.6,
                ..id
            },
            "style-shift" => Self {
                style: 1,
                color_gain: [0.9, 1.0, 1.1],
                ..id
            },
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 4] = ["identity", "sensor-A", "sensor-B", "style-shift"];

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 4.0) {
            return Err(SceneError::Shift(format!("density {} outside (0, 4]", self.density)));
        }
        if !(self.coord_noise >= 0.0 && self.normal_noise >= 0.0) {
            return Err(SceneError::Shift("noise sigmas must be non-negative".into()));
        }
        if self.style > 2 {
            return Err(SceneError::Shift(format!("unknown style {}", self.style)));
        }
        let finite = self
            .color_gain
            .iter()
            .chain(&self.color_bias)
            .chain(std::iter::once(&self.hue_rotation_deg))
            .all(|v| v.is_finite());
        if !finite {
            return Err(SceneError::Shift("colour transform must be finite".into()));
        }
        Ok(())
    }
}

/// Rodrigues rotation about `(1,1,1)/√3`.
fn hue_matrix(deg: f32) -> [[f64; 3]; 3] {
    let (s, c) = (deg as f64).to_radians().sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let t = 1.0 - c;
    let a = c + t / 3.0;
    let b = t / 3.0 - s * k;
    let d = t / 3.0 + s * k;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn resample(scene: &Scene, density: f32, rng: &mut rng::Rng) -> Result<Scene> {
    let n = scene.len();
    let target = (n as f64 * density as f64).round() as usize;
    if target < 16 {
        return Err(SceneError::Shift(format!(
            "density {density} leaves {target} of {n} points (minimum 16)"
        )));
    }
    if target == n {
        return Ok(scene.clone());
    }
    if target < n {
        let mut keep = rand::seq::index::sample(rng, n, target).into_vec();
        keep.sort_unstable();
        return Ok(scene.select(&keep));
    }
    let mut keep: Vec<usize> = (0..n).collect();
    keep.extend((n..target).map(|_| rng.gen_range(0..n)));
    let mut out = scene.select(&keep);
    // duplicates sit exactly on their source; nudge them within the surface plane
    for i in n..target {
        let f = out.feats[i];
        for k in 0..3 {
            out.points[i][k] += rng.gen_range(-0.01..0.01) * (1.0 - f[k].abs());
        }
    }
    Ok(out)
}

/// Apply `profile`. Pure in `(scene, profile, seed)`; images and correspondences are
/// re-rendered from the scene's cameras.
pub fn apply_shift(scene: &Scene, profile: &ShiftProfile, seed: u64) -> Result<Scene> {
    profile.validate()?;
    if profile.is_identity() {
        return Ok(scene.clone());
    }
    if scene.cameras.is_empty() {
        return Err(SceneError::MissingCameras);
    }
    let mut rng = rng::rng(rng::mix(seed, rng::tag("shift")));
    let mut out = if profile.density != 1.0 {
        resample(scene, profile.density, &mut rng)?
    } else {
        scene.clone()
    };
    out.labels = Labels::new(out.labels.ids.clone());

    if profile.style != 0 {
        let (sxy, sz) = if profile.style == 1 { (1.1f32, 0.85f32) } else { (0.92, 1.15) };
        let c = out.centroid();
        for (p, f) in out.points.iter_mut().zip(out.feats.iter_mut()) {
            p[0] = c[0] + (p[0] - c[0]) * sxy;
            p[1] = c[1] + (p[1] - c[1]) * sxy;
            p[2] *= sz;
            let n = normalize3([f[0] / sxy, f[1] / sxy, f[2] / sz]);
            f[..3].copy_from_slice(&n);
        }
    }
    if profile.coord_noise > 0.0 {
        let d = Normal::new(0.0, profile.coord_noise).expect("sigma checked");
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += d.sample(&mut rng);
            }
        }
    }
    if profile.normal_noise > 0.0 {
        let d = Normal::new(0.0, profile.normal_noise).expect("sigma checked");
        for f in &mut out.feats {
            let n = normalize3([
                f[0] + d.sample(&mut rng),
                f[1] + d.sample(&mut rng),
                f[2] + d.sample(&mut rng),
            ]);
            f[..3].copy_from_slice(&n);
        }
    }
    let m = hue_matrix(profile.hue_rotation_deg);
    for f in &mut out.feats {
        let rgb = [f[3] as f64, f[4] as f64, f[5] as f64];
        for k in 0..3 {
            let rot = m[k][0] * rgb[0] + m[k][1] * rgb[1] + m[k][2] * rgb[2];
            let v = rot * profile.color_gain[k] as f64 + profile.color_bias[k] as f64;
            f[3 + k] = v.clamp(0.0, 1.0) as f32;
        }
    }
    rerender(&mut out);
    Ok(out)
}
