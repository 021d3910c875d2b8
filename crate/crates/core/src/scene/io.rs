//! Binary scene files (`.ttts`) with an optional JSON camera sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, Camera, Correspondence, Labels, Result, Scene, SceneError};

const MAGIC: &[u8; 4] = b"TTTS";
const VERSION: u32 = 1;
pub const EXTENSION: &str = "ttts";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: impl IntoIterator<Item = f32>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_with(scene: &Scene, ids: &[u16]) -> Vec<u8> {
    let n = scene.len();
    let mut out = Vec::with_capacity(24 + n * 38 + scene.images.len() * scene.height * scene.width * 12);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        n as u32,
        scene.num_classes as u32,
        scene.images.len() as u32,
        scene.height as u32,
        scene.width as u32,
    ] {
        put_u32(&mut out, v);
    }
    put_f32s(&mut out, scene.points.iter().flatten().copied());
    put_f32s(&mut out, scene.feats.iter().flatten().copied());
    for &l in ids {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for img in &scene.images {
        put_f32s(&mut out, img.iter().copied());
    }
    for cs in &scene.correspondences {
        put_u32(&mut out, cs.len() as u32);
        for c in cs {
            put_u32(&mut out, c.point);
            out.extend_from_slice(&c.u.to_le_bytes());
            out.extend_from_slice(&c.v.to_le_bytes());
        }
    }
    out
}

/// Serialise a scene. Counts as one label read.
pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    encode_with(scene, scene.labels.read())
}

/// Serialise without touching the label audit counter; used for hashing and
/// equality checks.
pub fn encode_scene_unaudited(scene: &Scene) -> Vec<u8> {
    encode_with(scene, &scene.labels.ids)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(SceneError::Format {
            path: self.path.to_string(),
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        let vs: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vs.iter().any(|v| !v.is_finite()) {
            return self.fail("non-finite value in payload");
        }
        Ok(vs)
    }
}

pub fn decode_scene(buf: &[u8], path: &str) -> Result<Scene> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return r.fail("wrong magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let n = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let points = r.f32s(n * 3)?;
    let feats = r.f32s(n * 6)?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u16()?;
        if l as usize >= classes {
            return r.fail(format!("label {l} out of range for {classes} classes"));
        }
        ids.push(l);
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        images.push(r.f32s(height * width * 3)?);
    }
    let mut correspondences = Vec::with_capacity(count);
    for _ in 0..count {
        let m = r.u32()? as usize;
        let mut cs = Vec::with_capacity(m.min(height * width));
        for _ in 0..m {
            let c = Correspondence {
                point: r.u32()?,
                u: r.u16()?,
                v: r.u16()?,
            };
            if c.point as usize >= n || c.u as usize >= width || c.v as usize >= height {
                return r.fail(format!("correspondence {c:?} out of range"));
            }
            cs.push(c);
        }
        correspondences.push(cs);
    }
    if r.pos != buf.len() {
        return r.fail(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(Scene {
        points: points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        feats: feats
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect(),
        labels: Labels::new(ids),
        num_classes: classes,
        height,
        width,
        images,
        correspondences,
        cameras: Vec::new(),
    })
}

/// `room.ttts` → `room.cams.json`.
pub fn camera_sidecar(path: &Path) -> PathBuf {
    path.with_extension("cams.json")
}

/// Write the scene and its camera sidecar.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, encode_scene_unaudited(scene)).map_err(io_err(path))?;
    if !scene.cameras.is_empty() {
        let json = serde_json::to_string(&scene.cameras).expect("cameras serialise");
        let side = camera_sidecar(path);
        fs::write(&side, json).map_err(io_err(&side))?;
    }
    Ok(())
}

/// Read a scene; cameras are restored when the sidecar exists.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let mut scene = decode_scene(&buf, &name)?;
    let side = camera_sidecar(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        let cams: Vec<Camera> = serde_json::from_str(&text).map_err(|e| SceneError::Format {
            path: side.display().to_string(),
            reason: e.to_string(),
        })?;
        if cams.len() != scene.images.len() {
            return Err(SceneError::Format {
                path: side.display().to_string(),
                reason: format!("{} cameras for {} images", cams.len(), scene.images.len()),
            });
        }
        scene.cameras = cams;
    }
    Ok(scene)
}

/// Scene files in `dir`, sorted by name.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    list_scenes(dir)?.iter().map(|p| load_scene(p)).collect()
}

/// Write `scenes` as `scene_0000.ttts`, `scene_0001.ttts`, …
pub fn save_dir(scenes: &[Scene], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("scene_{i:04}.{EXTENSION}"));
            save_scene(s, &p).map(|_| p)
        })
        .collect()
}
