//! Procedural indoor rooms: axis-aligned structure plus box-built furniture, sampled
//! into points and rendered from a small camera rig.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::camera::{render, Camera};
use super::{Labels, Result, Scene, SceneError, CLASS_NAMES};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    #[default]
    Room,
    /// A single floor plane, nothing else.
    FloorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CameraMode {
    /// Cameras near the room corners looking at the centre.
    #[default]
    Corners,
    /// Cameras above the centre looking straight down.
    TopDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub layout: Layout,
    pub room_x: [f32; 2],
    pub room_y: [f32; 2],
    pub room_height: [f32; 2],
    pub objects: [u32; 2],
    pub points: [u32; 2],
    /// Class palette; label ids index into it.
    pub classes: Vec<String>,
    pub cameras: u32,
    pub camera_mode: CameraMode,
    pub image_height: u32,
    pub image_width: u32,
    pub fov_deg: f32,
    /// Sampling density of furniture relative to walls/floor/ceiling.
    pub object_density: f32,
    pub color_jitter: f32,
    pub point_color_noise: f32,
    /// Zero every colour channel (geometry-only sensors).
    pub coords_only: bool,
    /// Object proportion family.
    pub style: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Room,
            room_x: [4.0, 7.0],
            room_y: [4.0, 7.0],
            room_height: [2.5, 3.0],
            objects: [5, 9],
            points: [900, 1100],
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            cameras: 4,
            camera_mode: CameraMode::Corners,
            image_height: 64,
            image_width: 64,
            fov_deg: 90.0,
            object_density: 5.0,
            color_jitter: 0.08,
            point_color_noise: 0.03,
            coords_only: false,
            style: 0,
        }
    }
}

impl SceneSpec {
    /// Single forward camera, geometry only.
    pub fn outdoor_lite() -> Self {
        Self {
            cameras: 1,
            coords_only: true,
            ..Self::default()
        }
    }

    /// One floor plane seen from above.
    pub fn floor_only() -> Self {
        Self {
            layout: Layout::FloorOnly,
            camera_mode: CameraMode::TopDown,
            cameras: 1,
            objects: [0, 0],
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Spec(m));
        if self.classes.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if self.cameras < 1 {
            return bad("need at least one camera".into());
        }
        for (name, r) in [
            ("room_x", self.room_x),
            ("room_y", self.room_y),
            ("room_height", self.room_height),
        ] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return bad(format!("{name} range {r:?} is empty or non-positive"));
            }
        }
        if self.points[0] < 16 || self.points[1] < self.points[0] {
            return bad(format!("point range {:?} invalid (min 16)", self.points));
        }
        if self.objects[1] < self.objects[0] {
            return bad(format!("object range {:?} invalid", self.objects));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive".into());
        }
        if !(1.0..179.0).contains(&self.fov_deg) {
            return bad(format!("fov {} out of range", self.fov_deg));
        }
        if !(self.object_density > 0.0) {
            return bad("object_density must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Floor,
    Wall,
    Ceiling,
    Table,
    Chair,
    Cabinet,
    Sofa,
    Clutter,
}

impl Kind {
    fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }

    fn base_color(self) -> [f32; 3] {
        match self {
            Kind::Floor => [0.55, 0.42, 0.30],
            Kind::Wall => [0.80, 0.78, 0.72],
            Kind::Ceiling => [0.92, 0.92, 0.90],
            Kind::Table => [0.45, 0.30, 0.18],
            Kind::Chair => [0.25, 0.30, 0.55],
            Kind::Cabinet => [0.62, 0.55, 0.42],
            Kind::Sofa => [0.55, 0.22, 0.22],
            Kind::Clutter => [0.5, 0.5, 0.5],
        }
    }

    fn is_structure(self) -> bool {
        matches!(self, Kind::Floor | Kind::Wall | Kind::Ceiling)
    }
}

#[derive(Debug, Clone)]
struct Quad {
    origin: [f64; 3],
    e1: [f64; 3],
    e2: [f64; 3],
    normal: [f32; 3],
    label: u16,
    kind: Kind,
    color: [f32; 3],
}

impl Quad {
    fn area(&self) -> f64 {
        let c = [
            self.e1[1] * self.e2[2] - self.e1[2] * self.e2[1],
            self.e1[2] * self.e2[0] - self.e1[0] * self.e2[2],
            self.e1[0] * self.e2[1] - self.e1[1] * self.e2[0],
        ];
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }
}

struct Builder<'a> {
    spec: &'a SceneSpec,
    quads: Vec<Quad>,
    rng: Rng,
}

fn jitter(rng: &mut Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    let mut out = c;
    for v in &mut out {
        *v = (*v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

impl Builder<'_> {
    fn label(&self, kind: Kind) -> Option<u16> {
        self.spec
            .classes
            .iter()
            .position(|c| c == kind.name())
            .map(|i| i as u16)
    }

    fn push(&mut self, kind: Kind, color: [f32; 3], origin: [f64; 3], e1: [f64; 3], e2: [f64; 3], normal: [f64; 3]) {
        let Some(label) = self.label(kind) else { return };
        self.quads.push(Quad {
            origin,
            e1,
            e2,
            normal: [normal[0] as f32, normal[1] as f32, normal[2] as f32],
            label,
            kind,
            color,
        });
    }

    /// Box standing on `z0` with footprint centred at `(cx, cy)` and rotated by
    /// `yaw`. The bottom face is omitted.
    #[allow(clippy::too_many_arguments)]
    fn boxed(&mut self, kind: Kind, color: [f32; 3], cx: f64, cy: f64, yaw: f64, size: [f64; 3], z0: f64) {
        let (s, c) = yaw.sin_cos();
        let ax = [c, s, 0.0];
        let ay = [-s, c, 0.0];
        let (hx, hy, h) = (size[0] / 2.0, size[1] / 2.0, size[2]);
        let at = |u: f64, v: f64, z: f64| [cx + ax[0] * u + ay[0] * v, cy + ax[1] * u + ay[1] * v, z];
        let scale = |a: [f64; 3], k: f64| [a[0] * k, a[1] * k, a[2] * k];
        // top
        self.push(kind, color, at(-hx, -hy, z0 + h), scale(ax, 2.0 * hx), scale(ay, 2.0 * hy), [0.0, 0.0, 1.0]);
        let up = [0.0, 0.0, h];
        // ±x faces
        self.push(kind, color, at(hx, -hy, z0), scale(ay, 2.0 * hy), up, ax);
        self.push(kind, color, at(-hx, -hy, z0), scale(ay, 2.0 * hy), up, scale(ax, -1.0));
        // ±y faces
        self.push(kind, color, at(-hx, hy, z0), scale(ax, 2.0 * hx), up, ay);
        self.push(kind, color, at(-hx, -hy, z0), scale(ax, 2.0 * hx), up, scale(ay, -1.0));
    }

    fn room(&mut self, x: f64, y: f64, h: f64) {
        let j = self.spec.color_jitter;
        let floor = jitter(&mut self.rng, Kind::Floor.base_color(), j);
        self.push(Kind::Floor, floor, [0.0, 0.0, 0.0], [x, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, 1.0]);
        if self.spec.layout == Layout::FloorOnly {
            return;
        }
        let wall = jitter(&mut self.rng, Kind::Wall.base_color(), j);
        let ceil = jitter(&mut self.rng, Kind::Ceiling.base_color(), j);
        self.push(Kind::Ceiling, ceil, [0.0, 0.0, h], [x, 0.0, 0.0], [0.0, y, 0.0], [0.0, 0.0, -1.0]);
        let up = [0.0, 0.0, h];
        self.push(Kind::Wall, wall, [0.0, 0.0, 0.0], [x, 0.0, 0.0], up, [0.0, 1.0, 0.0]);
        self.push(Kind::Wall, wall, [0.0, y, 0.0], [x, 0.0, 0.0], up, [0.0, -1.0, 0.0]);
        self.push(Kind::Wall, wall, [0.0, 0.0, 0.0], [0.0, y, 0.0], up, [1.0, 0.0, 0.0]);
        self.push(Kind::Wall, wall, [x, 0.0, 0.0], [0.0, y, 0.0], up, [-1.0, 0.0, 0.0]);
    }

    fn object(&mut self, x: f64, y: f64, tables: &mut Vec<(f64, f64, f64, f64)>) {
        let r = &mut self.rng;
        let style = self.spec.style;
        let kind = match r.gen_range(0..100) {
            0..=29 => Kind::Chair,
            30..=49 => Kind::Table,
            50..=69 => Kind::Cabinet,
            70..=84 => Kind::Sofa,
            _ => Kind::Clutter,
        };
        let cx = r.gen_range(0.6..(x - 0.6).max(0.61));
        let cy = r.gen_range(0.6..(y - 0.6).max(0.61));
        let yaw = r.gen_range(0.0..std::f64::consts::TAU);
        let j = self.spec.color_jitter * 1.5;
        let color = if kind == Kind::Clutter {
            [r.gen(), r.gen(), r.gen()]
        } else {
            jitter(r, kind.base_color(), j)
        };
        let alt = style % 2 == 1;
        match kind {
            Kind::Table => {
                let (w, d) = (r.gen_range(0.8..1.6), r.gen_range(0.6..1.0));
                let top = if alt { r.gen_range(0.55..0.62) } else { r.gen_range(0.70..0.78) };
                let w = if alt { w * 1.3 } else { w };
                self.boxed(kind, color, cx, cy, yaw, [w, d, 0.05], top - 0.05);
                let (s, c) = yaw.sin_cos();
                for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let u = su * (w / 2.0 - 0.05);
                    let v = sv * (d / 2.0 - 0.05);
                    self.boxed(kind, color, cx + c * u - s * v, cy + s * u + c * v, yaw, [0.05, 0.05, top - 0.05], 0.0);
                }
                tables.push((cx, cy, w.min(d) / 2.0, top));
            }
            Kind::Chair => {
                let seat = if alt { 0.5 } else { 0.45 };
                let back = if alt { 0.65 } else { 0.45 };
                self.boxed(kind, color, cx, cy, yaw, [0.45, 0.45, 0.05], seat - 0.05);
                let (s, c) = yaw.sin_cos();
                self.boxed(kind, color, cx - c * 0.2, cy - s * 0.2, yaw, [0.05, 0.45, back], seat);
                for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let (u, v) = (su * 0.19, sv * 0.19);
                    self.boxed(kind, color, cx + c * u - s * v, cy + s * u + c * v, yaw, [0.04, 0.04, seat - 0.05], 0.0);
                }
            }
            Kind::Cabinet => {
                let (w, d) = (r.gen_range(0.5..1.0), r.gen_range(0.4..0.6));
                let h = if alt { r.gen_range(0.6..1.0) } else { r.gen_range(0.8..2.0) };
                let w = if alt { w * 1.5 } else { w };
                self.boxed(kind, color, cx, cy, yaw, [w, d, h], 0.0);
            }
            Kind::Sofa => {
                let w = r.gen_range(1.6..2.2);
                let d = if alt { 1.1 } else { 0.85 };
                self.boxed(kind, color, cx, cy, yaw, [w, d, 0.42], 0.0);
                let (s, c) = yaw.sin_cos();
                let off = d / 2.0 - 0.1;
                self.boxed(kind, color, cx - s * off, cy + c * off, yaw, [w, 0.2, 0.4], 0.42);
                for su in [-1.0, 1.0] {
                    let u = su * (w / 2.0 - 0.1);
                    self.boxed(kind, color, cx + c * u, cy + s * u, yaw, [0.2, d, 0.2], 0.42);
                }
            }
            Kind::Clutter => {
                let size = r.gen_range(0.1..0.3);
                let (px, py, z) = match tables.last().copied() {
                    Some((tx, ty, rad, top)) if r.gen_bool(0.7) => {
                        let a = r.gen_range(0.0..std::f64::consts::TAU);
                        let dist = r.gen_range(0.0..(rad - size / 2.0).max(0.01));
                        (tx + a.cos() * dist, ty + a.sin() * dist, top)
                    }
                    _ => (cx, cy, 0.0),
                };
                self.boxed(kind, color, px, py, yaw, [size, size * 0.8, size], z);
            }
            _ => unreachable!(),
        }
    }
}

fn cameras(spec: &SceneSpec, rng: &mut Rng, x: f64, y: f64, h: f64) -> Vec<Camera> {
    let (w, hh) = (spec.image_width as usize, spec.image_height as usize);
    let fov = spec.fov_deg as f64;
    (0..spec.cameras as usize)
        .map(|i| match spec.camera_mode {
            CameraMode::TopDown => {
                let eye = [x / 2.0 + 0.1 * i as f64, y / 2.0, h.max(2.5) + 0.5];
                Camera::look_at(eye, [eye[0], eye[1], 0.0], w, hh, fov)
            }
            CameraMode::Corners => {
                let corner = i % 4;
                let inset = 0.4 + 0.3 * (i / 4) as f64;
                let (ex, ey) = match corner {
                    0 => (inset, inset),
                    1 => (x - inset, inset),
                    2 => (x - inset, y - inset),
                    _ => (inset, y - inset),
                };
                let eye = [
                    ex + rng.gen_range(-0.15..0.15),
                    ey + rng.gen_range(-0.15..0.15),
                    h * rng.gen_range(0.55..0.8),
                ];
                let target = [
                    x / 2.0 + rng.gen_range(-0.5..0.5),
                    y / 2.0 + rng.gen_range(-0.5..0.5),
                    h * 0.2,
                ];
                Camera::look_at(eye, target, w, hh, fov)
            }
        })
        .collect()
}

/// Generate one scene. Pure in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        quads: Vec::new(),
        rng: rng::rng(seed),
    };
    let x = b.rng.gen_range(spec.room_x[0]..=spec.room_x[1]) as f64;
    let y = b.rng.gen_range(spec.room_y[0]..=spec.room_y[1]) as f64;
    let h = b.rng.gen_range(spec.room_height[0]..=spec.room_height[1]) as f64;
    b.room(x, y, h);
    if spec.layout == Layout::Room {
        let count = b.rng.gen_range(spec.objects[0]..=spec.objects[1]);
        let mut tables = Vec::new();
        for _ in 0..count {
            b.object(x, y, &mut tables);
        }
    }
    if b.quads.is_empty() {
        return Err(SceneError::Spec("palette matches no generated surface".into()));
    }
    let mut cdf = Vec::with_capacity(b.quads.len());
    let mut acc = 0.0;
    for q in &b.quads {
        let density = if q.kind.is_structure() { 1.0 } else { spec.object_density as f64 };
        acc += q.area() * density;
        cdf.push(acc);
    }
    let n = b.rng.gen_range(spec.points[0]..=spec.points[1]) as usize;
    let mut points = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let noise = spec.point_color_noise;
    for _ in 0..n {
        let t = b.rng.gen_range(0.0..acc);
        let qi = cdf.partition_point(|&c| c <= t).min(b.quads.len() - 1);
        let q = &b.quads[qi];
        let (a, c): (f64, f64) = (b.rng.gen(), b.rng.gen());
        let p = [
            (q.origin[0] + a * q.e1[0] + c * q.e2[0]) as f32,
            (q.origin[1] + a * q.e1[1] + c * q.e2[1]) as f32,
            (q.origin[2] + a * q.e1[2] + c * q.e2[2]) as f32,
        ];
        let color = if spec.coords_only {
            [0.0; 3]
        } else {
            let (n0, n1, n2) = (
                b.rng.gen_range(-noise..=noise),
                b.rng.gen_range(-noise..=noise),
                b.rng.gen_range(-noise..=noise),
            );
            [
                (q.color[0] + n0).clamp(0.0, 1.0),
                (q.color[1] + n1).clamp(0.0, 1.0),
                (q.color[2] + n2).clamp(0.0, 1.0),
            ]
        };
        points.push(p);
        feats.push([q.normal[0], q.normal[1], q.normal[2], color[0], color[1], color[2]]);
        labels.push(q.label);
    }
    let cams = cameras(spec, &mut b.rng, x, y, h);
    let mut scene = Scene {
        points,
        feats,
        labels: Labels::new(labels),
        num_classes: spec.num_classes(),
        height: spec.image_height as usize,
        width: spec.image_width as usize,
        images: Vec::new(),
        correspondences: Vec::new(),
        cameras: cams,
    };
    rerender(&mut scene);
    Ok(scene)
}

/// Recompute images and correspondences from the current points and cameras.
pub(crate) fn rerender(scene: &mut Scene) {
    let colors: Vec<[f32; 3]> = scene.feats.iter().map(|f| [f[3], f[4], f[5]]).collect();
    let (images, corr) = scene
        .cameras
        .iter()
        .map(|cam| render(&scene.points, &colors, cam))
        .unzip();
    scene.images = images;
    scene.correspondences = corr;
}
