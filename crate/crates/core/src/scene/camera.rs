//! Pinhole cameras and nearest-point z-buffer splatting.

use serde::{Deserialize, Serialize};

use super::{Correspondence, Image};

/// Pinhole camera. `rotation` maps world directions into the camera frame
/// (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn cell(&self) -> (u16, u16) {
        (self.u.floor() as u16, self.v.floor() as u16)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Camera at `eye` looking at `target` with +z up, horizontal field of view
    /// `fov_deg`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], width: usize, height: usize, fov_deg: f64) -> Self {
        let fwd = unit([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let up = if fwd[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = unit(cross(fwd, up));
        let down = cross(fwd, right);
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: [right, down, fwd],
            position: eye,
        }
    }

    pub fn to_camera_frame(&self, p: [f32; 3]) -> [f64; 3] {
        let d = [
            p[0] as f64 - self.position[0],
            p[1] as f64 - self.position[1],
            p[2] as f64 - self.position[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }
}

/// Pinhole projection; `None` when the point is behind the camera, at its centre,
/// or outside the image.
pub fn project_point(p: [f32; 3], cam: &Camera) -> Option<Projection> {
    let c = cam.to_camera_frame(p);
    if c[2] <= 1e-9 {
        return None;
    }
    let u = cam.fx * c[0] / c[2] + cam.cx;
    let v = cam.fy * c[1] / c[2] + cam.cy;
    if !(0.0..cam.width as f64).contains(&u) || !(0.0..cam.height as f64).contains(&v) {
        return None;
    }
    Some(Projection { u, v, depth: c[2] })
}

/// Splat every point into its pixel cell keeping the nearest (ties to the lower
/// index). Returns the image and the winners sorted by point index.
pub fn render(points: &[[f32; 3]], colors: &[[f32; 3]], cam: &Camera) -> (Image, Vec<Correspondence>) {
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner = vec![u32::MAX; w * h];
    for (i, &p) in points.iter().enumerate() {
        if let Some(pr) = project_point(p, cam) {
            let (u, v) = pr.cell();
            let cell = v as usize * w + u as usize;
            if pr.depth < depth[cell] {
                depth[cell] = pr.depth;
                owner[cell] = i as u32;
            }
        }
    }
    let mut image = vec![0.0f32; w * h * 3];
    let mut corr = Vec::new();
    for (cell, &o) in owner.iter().enumerate() {
        if o != u32::MAX {
            image[cell * 3..cell * 3 + 3].copy_from_slice(&colors[o as usize]);
            corr.push(Correspondence {
                point: o,
                u: (cell % w) as u16,
                v: (cell / w) as u16,
            });
        }
    }
    corr.sort_by_key(|c| c.point);
    (image, corr)
}
