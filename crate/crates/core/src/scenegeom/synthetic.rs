//! Ray-cast synthetic scenes: oriented boxes in front of a background plane,
//! rendered into a point map with one mask per box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vqa::Scene;
use super::{Intrinsics, Mask, PointMap, SceneObject};
use crate::so3::{quat_to_matrix, sample_uniform_quat, Quaternion, Vec3};

/// Depth of the background plane.
pub const BACKGROUND_Z: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub label: String,
    pub center: Vec3,
    pub rotation: Quaternion,
    pub extents: Vec3,
}

pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = width as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
    }
}

/// Distance along `dir` from the origin to the box surface, if hit.
fn ray_box(dir: Vec3, b: &BoxSpec) -> Option<f64> {
    let r = quat_to_matrix(&b.rotation);
    let rt = r.transpose();
    let o = rt.apply([-b.center[0], -b.center[1], -b.center[2]]);
    let d = rt.apply(dir);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let h = 0.5 * b.extents[a];
        if d[a].abs() < 1e-15 {
            if o[a].abs() > h {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Renders boxes over a fronto-parallel background. Points are rounded to
/// `f32` so that a scene survives a write/read cycle unchanged.
pub fn render_scene(width: usize, height: usize, boxes: &[BoxSpec]) -> Scene {
    let k = default_intrinsics(width, height);
    let n = width * height;
    let mut points = Vec::with_capacity(n);
    let mut owner: Vec<Option<usize>> = Vec::with_capacity(n);
    for v in 0..height {
        for u in 0..width {
            let dir = [
                (u as f64 + 0.5 - k.cx) / k.fx,
                (v as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            ];
            let mut best = (BACKGROUND_Z, None);
            for (i, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box(dir, b) {
                    if t < best.0 {
                        best = (t, Some(i));
                    }
                }
            }
            let p = [dir[0] * best.0, dir[1] * best.0, dir[2] * best.0];
            points.push(p.map(|c| c as f32 as f64));
            owner.push(best.1);
        }
    }
    let pm = PointMap::new(width, height, points, vec![true; n]).expect("grid sizes agree");
    let objects = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let bits: Vec<bool> = owner.iter().map(|o| *o == Some(i)).collect();
            let mask = Mask::new(width, height, bits).expect("grid sizes agree");
            SceneObject::from_mask(b.label.clone(), mask, &pm).ok()
        })
        .collect();
    Scene {
        point_map: pm,
        intrinsics: k,
        objects,
    }
}

pub const LABELS: [&str; 8] = ["mug", "bowl", "plate", "box", "bottle", "can", "sponge", "cup"];

/// A scene with `n_objects` randomly posed boxes. Labels are drawn with
/// replacement so some scenes contain duplicates.
pub fn random_scene<R: Rng + ?Sized>(width: usize, height: usize, n_objects: usize, rng: &mut R) -> Scene {
    let boxes: Vec<BoxSpec> = (0..n_objects)
        .map(|_| BoxSpec {
            label: LABELS[rng.random_range(0..LABELS.len())].to_string(),
            center: [
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.5..0.5),
                rng.random_range(1.8..3.2),
            ],
            rotation: sample_uniform_quat(rng),
            extents: [
                rng.random_range(0.15..0.4),
                rng.random_range(0.15..0.4),
                rng.random_range(0.15..0.4),
            ],
        })
        .collect();
    render_scene(width, height, &boxes)
}
