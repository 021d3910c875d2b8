//! Training-time augmentations. Geometry and point colours change; images and
//! correspondences stay as captured apart from re-indexing.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize3, Correspondence, Labels, Result, Scene, SceneError};
use crate::rng;

pub const CROP_RETRIES: usize = 8;
const MIN_CROP_POINTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Mirror x and y, each with probability 1/2.
    pub mirror: bool,
    /// Uniform rotation about the up axis.
    pub rotate: bool,
    pub scale: bool,
    pub scale_range: [f32; 2],
    pub jitter: bool,
    pub jitter_sigma: f32,
    pub jitter_clip: f32,
    pub crop: bool,
    /// Side of the kept xy box as a fraction of the scene extent.
    pub crop_fraction: f32,
    pub translate: bool,
    pub translate_range: f32,
    pub brightness_contrast: bool,
    pub brightness: f32,
    pub contrast: [f32; 2],
    pub rgb_shift: bool,
    pub rgb_shift_range: f32,
    pub mix_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mirror: true,
            rotate: true,
            scale: true,
            scale_range: [0.9, 1.1],
            jitter: true,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            crop: true,
            crop_fraction: 0.8,
            translate: true,
            translate_range: 0.2,
            brightness_contrast: true,
            brightness: 0.1,
            contrast: [0.8, 1.2],
            rgb_shift: true,
            rgb_shift_range: 0.05,
            mix_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every toggle off.
    pub fn none() -> Self {
        Self {
            mirror: false,
            rotate: false,
            scale: false,
            jitter: false,
            crop: false,
            translate: false,
            brightness_contrast: false,
            rgb_shift: false,
            mix_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SceneError::Augment(m.to_string()));
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return bad("mix_prob outside [0, 1]");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction outside (0, 1]");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[1] >= self.scale_range[0]) {
            return bad("scale_range must be positive and ordered");
        }
        if !(self.contrast[0] >= 0.0 && self.contrast[1] >= self.contrast[0]) {
            return bad("contrast range must be non-negative and ordered");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_clip >= 0.0) {
            return bad("jitter parameters must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub scene: Scene,
    pub mixed_with_partner: bool,
}

/// Negate one coordinate axis (and the matching normal component).
pub fn mirror(scene: &Scene, axis: usize) -> Scene {
    let mut out = scene.clone();
    for (p, f) in out.points.iter_mut().zip(out.feats.iter_mut()) {
        p[axis] = -p[axis];
        f[axis] = -f[axis];
    }
    out
}

/// Concatenate two scenes; `b`'s correspondences are offset by `a.len()`.
pub fn mix_scenes(a: &Scene, b: &Scene) -> Scene {
    let offset = a.len() as u32;
    let mut ids = a.labels.read().to_vec();
    ids.extend_from_slice(b.labels.read());
    let mut correspondences = a.correspondences.clone();
    correspondences.extend(b.correspondences.iter().map(|cs| {
        cs.iter()
            .map(|c| Correspondence {
                point: c.point + offset,
                ..*c
            })
            .collect()
    }));
    let mut images = a.images.clone();
    images.extend(b.images.iter().cloned());
    let mut cameras = a.cameras.clone();
    cameras.extend(b.cameras.iter().cloned());
    Scene {
        points: a.points.iter().chain(&b.points).copied().collect(),
        feats: a.feats.iter().chain(&b.feats).copied().collect(),
        labels: Labels::new(ids),
        num_classes: a.num_classes.max(b.num_classes),
        height: a.height,
        width: a.width,
        images,
        correspondences,
        cameras,
    }
}

fn crop(scene: &Scene, fraction: f32, rng: &mut rng::Rng) -> Result<Scene> {
    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for p in &scene.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut frac = fraction;
    for _ in 0..=CROP_RETRIES {
        let mut box_lo = [0.0f32; 2];
        let mut box_hi = [0.0f32; 2];
        for k in 0..2 {
            let side = (hi[k] - lo[k]) * frac;
            let slack = (hi[k] - lo[k]) - side;
            box_lo[k] = lo[k] + rng.gen::<f32>() * slack;
            box_hi[k] = box_lo[k] + side;
        }
        let keep: Vec<usize> = (0..scene.len())
            .filter(|&i| {
                let p = scene.points[i];
                (0..2).all(|k| p[k] >= box_lo[k] && p[k] <= box_hi[k])
            })
            .collect();
        if keep.len() >= MIN_CROP_POINTS {
            return Ok(scene.select(&keep));
        }
        frac += (1.0 - frac) / 2.0;
    }
    Err(SceneError::Crop(CROP_RETRIES))
}

/// Apply the enabled augmentations in a fixed order. With a partner and
/// probability `mix_prob` the two scenes are concatenated first.
pub fn augment(scene: &Scene, partner: Option<&Scene>, config: &AugmentConfig, seed: u64) -> Result<Augmented> {
    config.validate()?;
    let mut rng = rng::rng(rng::mix(seed, rng::tag("augment")));
    let mixed = partner.is_some() && config.mix_prob > 0.0 && rng.gen::<f32>() < config.mix_prob;
    let mut s = match partner {
        Some(b) if mixed => mix_scenes(scene, b),
        _ => scene.clone(),
    };
    if config.crop {
        s = crop(&s, config.crop_fraction, &mut rng)?;
    }
    if config.mirror {
        for axis in 0..2 {
            if rng.gen_bool(0.5) {
                s = mirror(&s, axis);
            }
        }
    }
    if config.rotate {
        let a = rng.gen_range(0.0..std::f32::consts::TAU);
        s = s.rotate_up(a);
    }
    if config.scale {
        let k = rng.gen_range(config.scale_range[0]..=config.scale_range[1]);
        s.points.iter_mut().flatten().for_each(|v| *v *= k);
    }
    if config.jitter && config.jitter_sigma > 0.0 {
        let d = Normal::new(0.0, config.jitter_sigma).expect("sigma checked");
        let clip = config.jitter_clip;
        for v in s.points.iter_mut().flatten() {
            *v += d.sample(&mut rng).clamp(-clip, clip);
        }
    }
    if config.translate {
        let r = config.translate_range;
        let t = [rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
        for p in &mut s.points {
            for k in 0..3 {
                p[k] += t[k];
            }
        }
    }
    if config.brightness_contrast {
        let b = rng.gen_range(-config.brightness..=config.brightness);
        let c = rng.gen_range(config.contrast[0]..=config.contrast[1]);
        let n = s.len().max(1) as f32;
        let mean = s.feats.iter().map(|f| (f[3] + f[4] + f[5]) / 3.0).sum::<f32>() / n;
        for f in &mut s.feats {
            for v in &mut f[3..] {
                *v = ((*v - mean) * c + mean + b).clamp(0.0, 1.0);
            }
        }
    }
    if config.rgb_shift {
        let r = config.rgb_shift_range;
        let shift = [rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
        for f in &mut s.feats {
            for k in 0..3 {
                f[3 + k] = (f[3 + k] + shift[k]).clamp(0.0, 1.0);
            }
        }
    }
    if config.mirror || config.rotate {
        for f in &mut s.feats {
            let n = normalize3([f[0], f[1], f[2]]);
            f[..3].copy_from_slice(&n);
        }
    }
    Ok(Augmented {
        scene: s,
        mixed_with_partner: mixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::io::encode_scene_unaudited;
    use crate::scene::{generate_scene, SceneSpec};

    fn scene(n: u32, seed: u64) -> Scene {
        let spec = SceneSpec {
            points: [n, n],
            image_height: 16,
            image_width: 16,
            cameras: 2,
            ..Default::default()
        };
        generate_scene(&spec, seed).unwrap()
    }

    #[test]
    fn all_off_is_identity() {
        let s = scene(200, 1);
        let a = augment(&s, Some(&scene(150, 2)), &AugmentConfig::none(), 4).unwrap();
        assert!(!a.mixed_with_partner);
        assert_eq!(encode_scene_unaudited(&a.scene), encode_scene_unaudited(&s));
    }

    #[test]
    fn mirror_twice_is_identity() {
        let s = scene(100, 1);
        assert_eq!(mirror(&mirror(&s, 0), 0).points, s.points);
    }

    #[test]
    fn mixing_offsets_second_scene() {
        let (a, b) = (scene(100, 1), scene(150, 2));
        let m = mix_scenes(&a, &b);
        assert_eq!(m.len(), 250);
        assert_eq!(m.images.len(), 4);
        assert_eq!(m.correspondences[2].len(), b.correspondences[0].len());
        for (x, y) in m.correspondences[2].iter().zip(&b.correspondences[0]) {
            assert_eq!(x.point, y.point + 100);
        }
        assert_eq!(&m.labels.read()[100..], b.labels.read());
    }

    #[test]
    fn full_pipeline_transports_labels() {
        let s = scene(300, 3);
        let cfg = AugmentConfig {
            crop: false,
            mix_prob: 0.0,
            ..Default::default()
        };
        let a = augment(&s, None, &cfg, 9).unwrap().scene;
        assert_eq!(a.labels, s.labels);
        assert_eq!(a.correspondences, s.correspondences);
        for f in &a.feats {
            let n = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn crop_keeps_consistent_indices() {
        let s = scene(400, 3);
        let cfg = AugmentConfig {
            crop: true,
            crop_fraction: 0.5,
            ..AugmentConfig::none()
        };
        let a = augment(&s, None, &cfg, 2).unwrap().scene;
        assert!(a.len() < s.len() && a.len() >= 16);
        assert!(a.correspondences.iter().flatten().all(|c| (c.point as usize) < a.len()));
    }

    #[test]
    fn crop_fails_on_tiny_scene() {
        let s = scene(16, 3).select(&(0..10).collect::<Vec<_>>());
        let cfg = AugmentConfig {
            crop: true,
            ..AugmentConfig::none()
        };
        assert!(matches!(augment(&s, None, &cfg, 0), Err(SceneError::Crop(8))));
    }
}
