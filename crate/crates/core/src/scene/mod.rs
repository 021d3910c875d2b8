//! Labelled point-cloud scenes paired with rendered images and point↔pixel
//! correspondences, plus the synthetic generator, distribution shifts and
//! training augmentations that produce them.

pub mod augment;
pub mod camera;
pub mod generate;
pub mod io;
pub mod shift;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use augment::{augment, mix_scenes, AugmentConfig, Augmented};
pub use camera::{project_point, render, Camera, Projection};
pub use generate::{generate_scene, CameraMode, Layout, SceneSpec};
pub use shift::{apply_shift, ShiftProfile};

pub const CLASS_NAMES: [&str; 8] = [
    "floor", "wall", "ceiling", "table", "chair", "cabinet", "sofa", "clutter",
];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("shift failed: {0}")]
    Shift(String),
    #[error("crop failed after {0} retries")]
    Crop(usize),
    #[error("augmentation failed: {0}")]
    Augment(String),
    #[error("scene has no cameras; correspondences cannot be recomputed")]
    MissingCameras,
    #[error("scene file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, SceneError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-point class ids behind a read counter. Clones share the counter so every
/// derived view of a scene reports into the same audit.
#[derive(Debug, Clone)]
pub struct Labels {
    ids: Vec<u16>,
    reads: Arc<AtomicU64>,
}

impl Labels {
    pub fn new(ids: Vec<u16>) -> Self {
        Self {
            ids,
            reads: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ground-truth ids. Every call is counted.
    pub fn read(&self) -> &[u16] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.ids
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        self.reads.store(0, Ordering::Relaxed);
    }
}

impl PartialEq for Labels {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
    }
}

/// One visible point in one image: pixel cell `(u, v)` shows point `point`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Correspondence {
    pub point: u32,
    pub u: u16,
    pub v: u16,
}

/// RGB image in `[0, 1]`, `height × width × 3`, row-major.
pub type Image = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<[f32; 3]>,
    /// Unit normal followed by RGB.
    pub feats: Vec<[f32; 6]>,
    pub labels: Labels,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Image>,
    pub correspondences: Vec<Vec<Correspondence>>,
    /// Rig that rendered `images`; empty when loaded without a camera sidecar.
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.correspondences.iter().map(Vec::len).sum()
    }

    pub fn centroid(&self) -> [f32; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32]
    }

    /// Stable 64-bit content hash of the serialised scene.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(io::encode_scene_unaudited(self));
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Rotate points and normals about the +z axis through the centroid. Colours,
    /// labels, images and correspondences are untouched.
    pub fn rotate_up(&self, angle: f32) -> Scene {
        if angle == 0.0 {
            return self.clone();
        }
        let (s, c) = (angle as f64).sin_cos();
        let ctr = self.centroid();
        let mut out = self.clone();
        for (p, f) in out.points.iter_mut().zip(out.feats.iter_mut()) {
            let x = (p[0] - ctr[0]) as f64;
            let y = (p[1] - ctr[1]) as f64;
            p[0] = (c * x - s * y) as f32 + ctr[0];
            p[1] = (s * x + c * y) as f32 + ctr[1];
            let (nx, ny) = (f[0] as f64, f[1] as f64);
            f[0] = (c * nx - s * ny) as f32;
            f[1] = (s * nx + c * ny) as f32;
        }
        out
    }

    /// Keep the listed points (in the given order); correspondences are filtered and
    /// re-indexed accordingly.
    pub fn select(&self, keep: &[usize]) -> Scene {
        let mut remap = vec![u32::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        let ids = self.labels.read();
        Scene {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            feats: keep.iter().map(|&i| self.feats[i]).collect(),
            labels: Labels::new(keep.iter().map(|&i| ids[i]).collect()),
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
            images: self.images.clone(),
            correspondences: self
                .correspondences
                .iter()
                .map(|cs| {
                    cs.iter()
                        .filter(|c| remap[c.point as usize] != u32::MAX)
                        .map(|c| Correspondence {
                            point: remap[c.point as usize],
                            ..*c
                        })
                        .collect()
                })
                .collect(),
            cameras: self.cameras.clone(),
        }
    }

    /// Per-pixel class map of image `img` derived from its correspondences; pixels
    /// with no visible point are `None`. Reads ground truth.
    pub fn class_map(&self, img: usize) -> Vec<Option<u16>> {
        let ids = self.labels.read();
        let mut map = vec![None; self.height * self.width];
        for c in &self.correspondences[img] {
            map[c.v as usize * self.width + c.u as usize] = Some(ids[c.point as usize]);
        }
        map
    }
}

pub(crate) fn normalize3(v: [f32; 3]) -> [f32; 3] {
    let n = (v[0] as f64).hypot(v[1] as f64).hypot(v[2] as f64);
    if n < 1e-12 {
        return [0.0, 0.0, 1.0];
    }
    [
        (v[0] as f64 / n) as f32,
        (v[1] as f64 / n) as f32,
        (v[2] as f64 / n) as f32,
    ]
}
