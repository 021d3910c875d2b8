//! The frozen 2D teacher: dense per-image feature grids, either synthesised from
//! class maps or loaded from `.tttf` caches exported by an external model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scene::{Correspondence, Image, Scene};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("class map has {got} cells, image needs {want}")]
    Alignment { got: usize, want: usize },
    #[error("pixel ({u}, {v}) outside {w_cells}x{h_cells} cells of stride {stride}")]
    Bounds {
        u: usize,
        v: usize,
        w_cells: usize,
        h_cells: usize,
        stride: usize,
    },
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("feature cache {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TeacherError>;

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TeacherError + '_ {
    move |source| TeacherError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `h_cells × w_cells × dim` grid; each cell covers `stride × stride` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatureMap {
    pub h_cells: usize,
    pub w_cells: usize,
    pub dim: usize,
    pub stride: usize,
    pub data: Vec<f32>,
}

impl TeacherFeatureMap {
    pub fn new(h_cells: usize, w_cells: usize, dim: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if h_cells == 0 || w_cells == 0 || stride == 0 || dim < 8 {
            return Err(TeacherError::Config(format!(
                "map {h_cells}x{w_cells}x{dim} stride {stride} (need positive sizes, dim >= 8)"
            )));
        }
        if data.len() != h_cells * w_cells * dim {
            return Err(TeacherError::Config(format!(
                "payload has {} values, expected {}",
                data.len(),
                h_cells * w_cells * dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TeacherError::Config("non-finite feature value".into()));
        }
        Ok(Self {
            h_cells,
            w_cells,
            dim,
            stride,
            data,
        })
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.w_cells + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Stored vector of the cell containing pixel `(u, v)`.
    pub fn sample(&self, u: usize, v: usize) -> Result<&[f32]> {
        let (row, col) = (v / self.stride, u / self.stride);
        if row >= self.h_cells || col >= self.w_cells {
            return Err(TeacherError::Bounds {
                u,
                v,
                w_cells: self.w_cells,
                h_cells: self.h_cells,
                stride: self.stride,
            });
        }
        Ok(self.cell(row, col))
    }
}

pub fn sample_feature(map: &TeacherFeatureMap, u: usize, v: usize) -> Result<&[f32]> {
    map.sample(u, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTeacherConfig {
    pub dim: usize,
    pub stride: usize,
    pub num_classes: usize,
    /// Per-entry Gaussian nuisance before normalisation.
    pub sigma: f32,
    /// Weight of the colour-driven appearance component, `[0, 1)`.
    pub alpha: f32,
    /// Box radius (in cells) of the neighbour blend; 0 disables it.
    pub radius: usize,
    /// Weight of each neighbour in the blend.
    pub neighbor_weight: f32,
    pub seed: u64,
}

impl Default for SyntheticTeacherConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            stride: 4,
            num_classes: 8,
            sigma: 0.05,
            alpha: 0.2,
            radius: 0,
            neighbor_weight: 0.1,
            seed: 0,
        }
    }
}

/// Prototypes (one per class plus a background row) and the appearance projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTeacher {
    pub config: SyntheticTeacherConfig,
    /// `(num_classes + 1) × dim`, unit rows; the last row is background.
    pub prototypes: Vec<Vec<f32>>,
    /// `dim × 3`.
    appearance: Vec<[f32; 3]>,
}

fn unit(v: &mut [f32]) {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn image_hash(image: &[f32]) -> u64 {
    image.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SyntheticTeacher {
    pub fn new(config: SyntheticTeacherConfig) -> Result<Self> {
        if config.dim < 8 || config.stride == 0 || config.num_classes < 2 {
            return Err(TeacherError::Config(format!(
                "dim {} (>= 8), stride {} (>= 1), classes {} (>= 2)",
                config.dim, config.stride, config.num_classes
            )));
        }
        if !(0.0..1.0).contains(&config.alpha) || !(config.sigma >= 0.0) || !(config.neighbor_weight >= 0.0) {
            return Err(TeacherError::Config("alpha in [0,1), sigma and neighbor_weight >= 0".into()));
        }
        let mut r = rng::rng(rng::mix(config.seed, rng::tag("teacher-prototypes")));
        let mut prototypes: Vec<Vec<f32>> = Vec::new();
        let mut attempts = 0;
        while prototypes.len() < config.num_classes + 1 {
            attempts += 1;
            if attempts > 10_000 {
                return Err(TeacherError::Config(format!(
                    "cannot place {} prototypes with cosine < 0.5 in {} dims",
                    config.num_classes + 1,
                    config.dim
                )));
            }
            let mut p: Vec<f32> = (0..config.dim).map(|_| StandardNormal.sample(&mut r)).collect();
            unit(&mut p);
            if prototypes.iter().all(|q| dot(q, &p) < 0.5) {
                prototypes.push(p);
            }
        }
        let appearance = (0..config.dim)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        Ok(Self {
            config,
            prototypes,
            appearance,
        })
    }

    fn appearance_of(&self, rgb: [f32; 3]) -> Vec<f32> {
        let c = [rgb[0] - 0.5, rgb[1] - 0.5, rgb[2] - 0.5];
        let mut a: Vec<f32> = self
            .appearance
            .iter()
            .map(|w| w[0] * c[0] + w[1] * c[1] + w[2] * c[2])
            .collect();
        unit(&mut a);
        a
    }

    /// Features for one `height × width` image given its per-pixel class map.
    pub fn features(
        &self,
        image: &[f32],
        class_map: &[Option<u16>],
        height: usize,
        width: usize,
    ) -> Result<TeacherFeatureMap> {
        let cfg = &self.config;
        if class_map.len() != height * width {
            return Err(TeacherError::Alignment {
                got: class_map.len(),
                want: height * width,
            });
        }
        if image.len() != height * width * 3 {
            return Err(TeacherError::Alignment {
                got: image.len() / 3,
                want: height * width,
            });
        }
        let g = cfg.stride;
        let (hc, wc) = (height.div_ceil(g), width.div_ceil(g));
        let d = cfg.dim;
        let base_seed = rng::mix(cfg.seed, image_hash(image));
        let mut raw = vec![0.0f32; hc * wc * d];
        for row in 0..hc {
            for col in 0..wc {
                let mut votes = vec![0usize; cfg.num_classes];
                let mut rgb = [0.0f64; 3];
                let mut pixels = 0usize;
                for v in row * g..((row + 1) * g).min(height) {
                    for u in col * g..((col + 1) * g).min(width) {
                        let p = v * width + u;
                        if let Some(c) = class_map[p] {
                            if (c as usize) < cfg.num_classes {
                                votes[c as usize] += 1;
                            }
                        }
                        for k in 0..3 {
                            rgb[k] += image[p * 3 + k] as f64;
                        }
                        pixels += 1;
                    }
                }
                // ties go to the lowest class id; no visible point means background
                let mut best = cfg.num_classes;
                for (c, &n) in votes.iter().enumerate() {
                    if n > 0 && (best == cfg.num_classes || n > votes[best]) {
                        best = c;
                    }
                }
                let mean = rgb.map(|s| (s / pixels as f64) as f32);
                let app = self.appearance_of(mean);
                let mut nr = rng::rng(rng::mix(base_seed, (row * wc + col) as u64));
                let cell = &mut raw[(row * wc + col) * d..(row * wc + col + 1) * d];
                for j in 0..d {
                    let noise: f32 = if cfg.sigma > 0.0 {
                        StandardNormal.sample(&mut nr)
                    } else {
                        0.0
                    };
                    cell[j] = (1.0 - cfg.alpha) * self.prototypes[best][j] + cfg.alpha * app[j] + cfg.sigma * noise;
                }
            }
        }
        let mut data = vec![0.0f32; hc * wc * d];
        let r = cfg.radius as isize;
        for row in 0..hc {
            for col in 0..wc {
                let out = &mut data[(row * wc + col) * d..(row * wc + col + 1) * d];
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row as isize + dr, col as isize + dc);
                        if rr < 0 || cc < 0 || rr >= hc as isize || cc >= wc as isize {
                            continue;
                        }
                        let w = if dr == 0 && dc == 0 { 1.0 } else { cfg.neighbor_weight };
                        let src = &raw[(rr as usize * wc + cc as usize) * d..][..d];
                        for (o, s) in out.iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
                unit(out);
            }
        }
        TeacherFeatureMap::new(hc, wc, d, g, data)
    }

    /// Feature maps for every image of a scene. Reads the scene's ground truth, so
    /// call it before any test-time audit window.
    pub fn scene_features(&self, scene: &Scene) -> Result<SceneFeatures> {
        let maps = (0..scene.images.len())
            .map(|i| self.features(&scene.images[i], &scene.class_map(i), scene.height, scene.width))
            .collect::<Result<_>>()?;
        Ok(SceneFeatures { maps })
    }

    /// Index of the most similar prototype (background included).
    pub fn nearest_prototype(&self, f: &[f32]) -> usize {
        let mut best = 0;
        let mut best_dot = f32::NEG_INFINITY;
        for (i, p) in self.prototypes.iter().enumerate() {
            let s = dot(p, f);
            if s > best_dot {
                best_dot = s;
                best = i;
            }
        }
        best
    }
}

pub fn synth_teacher_features(
    image: &Image,
    class_map: &[Option<u16>],
    height: usize,
    width: usize,
    teacher: &SyntheticTeacher,
) -> Result<TeacherFeatureMap> {
    teacher.features(image, class_map, height, width)
}

/// One feature map per image of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub maps: Vec<TeacherFeatureMap>,
}

impl SceneFeatures {
    pub fn dim(&self) -> usize {
        self.maps.first().map_or(0, |m| m.dim)
    }

    /// Stack the sampled vectors for `(image, correspondence)` pairs.
    pub fn targets(&self, pairs: &[(usize, Correspondence)]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(pairs.len() * d);
        for &(img, c) in pairs {
            let map = self.maps.get(img).ok_or_else(|| {
                TeacherError::Config(format!("no feature map for image {img} ({} maps)", self.maps.len()))
            })?;
            data.extend_from_slice(map.sample(c.u as usize, c.v as usize)?);
        }
        Tensor::new(vec![pairs.len(), d], data).map_err(|e| TeacherError::Config(e.to_string()))
    }

    /// `stem_img00.tttf`, `stem_img01.tttf`, …
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.maps
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let p = dir.join(format!("{stem}_img{i:02}.{CACHE_EXTENSION}"));
                save_feature_cache(m, &p).map(|_| p)
            })
            .collect()
    }

    pub fn load(dir: &Path, stem: &str, images: usize) -> Result<Self> {
        let maps = (0..images)
            .map(|i| load_feature_cache(&dir.join(format!("{stem}_img{i:02}.{CACHE_EXTENSION}"))))
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }
}

const MAGIC: &[u8; 4] = b"TTTF";
const VERSION: u32 = 1;
pub const CACHE_EXTENSION: &str = "tttf";

pub fn encode_feature_cache(map: &TeacherFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + map.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, map.h_cells as u32, map.w_cells as u32, map.dim as u32, map.stride as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_cache(buf: &[u8], path: &str) -> Result<TeacherFeatureMap> {
    let fail = |reason: String| TeacherError::Format {
        path: path.to_string(),
        reason,
    };
    if buf.len() < 24 {
        return Err(fail(format!("truncated header ({} bytes)", buf.len())));
    }
    if &buf[..4] != MAGIC {
        return Err(fail("wrong magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(fail(format!("unsupported version {}", word(0))));
    }
    let (h, w, d, g) = (word(1), word(2), word(3), word(4));
    let want = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| fail("header sizes overflow".into()))?;
    let payload = &buf[24..];
    if payload.len() != want {
        return Err(fail(format!(
            "payload is {} bytes, header {h}x{w}x{d} needs {want}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| v.is_nan()) {
        return Err(fail(format!("NaN at payload index {i}")));
    }
    TeacherFeatureMap::new(h, w, d, g, data).map_err(|e| fail(e.to_string()))
}

pub fn save_feature_cache(map: &TeacherFeatureMap, path: &Path) -> Result<()> {
    fs::write(path, encode_feature_cache(map)).map_err(io_err(path))?;
    Ok(())
}

pub fn load_feature_cache(path: &Path) -> Result<TeacherFeatureMap> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_feature_cache(&buf, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher(sigma: f32, alpha: f32) -> SyntheticTeacher {
        SyntheticTeacher::new(SyntheticTeacherConfig {
            sigma,
            alpha,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn prototypes_are_separated_units() {
        let t = teacher(0.05, 0.2);
        assert_eq!(t.prototypes.len(), 9);
        for (i, p) in t.prototypes.iter().enumerate() {
            assert!((dot(p, p) - 1.0).abs() < 1e-5);
            for q in &t.prototypes[i + 1..] {
                assert!(dot(p, q) < 0.5);
            }
        }
    }

    #[test]
    fn noise_free_cells_equal_prototypes() {
        let t = teacher(0.0, 0.0);
        let (h, w) = (8, 8);
        let img = vec![0.3; h * w * 3];
        let mut cm = vec![Some(2u16); h * w];
        cm[0] = None;
        for v in 4..8 {
            for u in 0..8 {
                cm[v * w + u] = Some(5);
            }
        }
        let m = t.features(&img, &cm, h, w).unwrap();
        assert_eq!((m.h_cells, m.w_cells), (2, 2));
        for (k, a) in m.cell(0, 0).iter().zip(&t.prototypes[2]) {
            assert!((k - a).abs() < 1e-6);
        }
        assert_eq!(m.cell(0, 0), m.cell(0, 1));
        for (k, a) in m.cell(1, 1).iter().zip(&t.prototypes[5]) {
            assert!((k - a).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_error() {
        let t = teacher(0.0, 0.0);
        assert!(matches!(
            t.features(&vec![0.0; 48], &vec![None; 15], 4, 4),
            Err(TeacherError::Alignment { .. })
        ));
    }

    #[test]
    fn sampling_is_floor_division() {
        let data: Vec<f32> = (0..2 * 3 * 8).map(|v| v as f32).collect();
        let m = TeacherFeatureMap::new(2, 3, 8, 4, data).unwrap();
        assert_eq!(m.sample(7, 2).unwrap(), m.cell(0, 1));
        assert_eq!(m.sample(11, 7).unwrap(), m.cell(1, 2));
        assert!(m.sample(12, 0).is_err());
        let g1 = TeacherFeatureMap::new(1, 2, 8, 1, vec![1.0; 16]).unwrap();
        assert_eq!(g1.sample(1, 0).unwrap(), g1.cell(0, 1));
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::rng(3);
        let data: Vec<f32> = (0..4 * 5 * 16).map(|_| r.gen()).collect();
        let m = TeacherFeatureMap::new(4, 5, 16, 4, data).unwrap();
        let p = dir.path().join("m.tttf");
        save_feature_cache(&m, &p).unwrap();
        let back = load_feature_cache(&p).unwrap();
        assert!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bytes = encode_feature_cache(&m);
        bytes[1] = b'X';
        assert!(decode_feature_cache(&bytes, "x").unwrap_err().to_string().contains("magic"));
        let bytes = encode_feature_cache(&m);
        assert!(decode_feature_cache(&bytes[..bytes.len() - 4], "x")
            .unwrap_err()
            .to_string()
            .contains("payload"));
        let mut nan = encode_feature_cache(&m);
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_feature_cache(&nan, "x").unwrap_err().to_string().contains("NaN"));
    }

    #[test]
    fn large_header_payload_length() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        for v in [1u32, 16, 16, 1024, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(std::iter::repeat(0u8).take(16 * 16 * 1024 * 4));
        let m = decode_feature_cache(&bytes, "x").unwrap();
        assert_eq!(m.data.len(), 16 * 16 * 1024);
        bytes.pop();
        assert!(decode_feature_cache(&bytes, "x").is_err());
    }

    #[test]
    fn repeated_calls_identical() {
        let t = teacher(0.1, 0.3);
        let img: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let cm: Vec<Option<u16>> = (0..256).map(|i| Some((i % 8) as u16)).collect();
        let a = t.features(&img, &cm, 16, 16).unwrap();
        let b = t.features(&img, &cm, 16, 16).unwrap();
        assert_eq!(a, b);
    }
}
