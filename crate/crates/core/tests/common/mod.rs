//! Oracles shared by several test targets.
#![allow(dead_code)]

use geoflow::actionpipe::{Pose, Trajectory};
use geoflow::scenegeom::synthetic::{render_scene, BoxSpec};
use geoflow::scenegeom::vqa::Scene;
use geoflow::scenegeom::OrientedBox3D;
use geoflow::so3::RotationMatrix;
use rand::seq::SliceRandom;
use geoflow::so3::{canonicalize, norm4, sample_uniform_quat, Quaternion, Vec3};
use rand::Rng;

/// A rotated, translated cube of side `side`: its 8 corners plus a regular
/// grid on every face.
pub fn cube_surface_grid(q: &Quaternion, center: Vec3, side: f64, per_edge: usize) -> Vec<Vec3> {
    let mut pts = Vec::new();
    let s = |i: usize| side * (i as f64 / per_edge as f64 - 0.5);
    for axis in 0..3 {
        for face in [-0.5, 0.5] {
            for i in 0..=per_edge {
                for j in 0..=per_edge {
                    let mut p = [0.0; 3];
                    p[axis] = face * side;
                    p[(axis + 1) % 3] = s(i);
                    p[(axis + 2) % 3] = s(j);
                    let r = q.rotate(p);
                    pts.push([r[0] + center[0], r[1] + center[1], r[2] + center[2]]);
                }
            }
        }
    }
    pts
}

/// `n` points uniform on the surface of a rotated unit-side cube.
pub fn cube_surface_samples<R: Rng>(rng: &mut R, q: &Quaternion, center: Vec3, side: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let mut p: [f64; 3] = [0, 1, 2].map(|_| side * rng.random_range(-0.5..0.5));
            let a = rng.random_range(0..3);
            p[a] = if rng.random::<bool>() { 0.5 * side } else { -0.5 * side };
            let r = q.rotate(p);
            [r[0] + center[0], r[1] + center[1], r[2] + center[2]]
        })
        .collect()
}

/// `n` points uniform inside a rotated cube.
pub fn cube_volume_samples<R: Rng>(rng: &mut R, q: &Quaternion, center: Vec3, side: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let p: [f64; 3] = [0, 1, 2].map(|_| side * rng.random_range(-0.5..0.5));
            let r = q.rotate(p);
            [r[0] + center[0], r[1] + center[1], r[2] + center[2]]
        })
        .collect()
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Quaternion {
    sample_uniform_quat(rng)
}

/// Attention rule from block boundaries: token `i` may see token `j` iff
/// `j` lies before the end of the block containing `i`.
pub fn brute_force_mask(lengths: &[usize]) -> Vec<Vec<bool>> {
    let total: usize = lengths.iter().sum();
    let mut out = vec![vec![false; total]; total];
    for (i, row) in out.iter_mut().enumerate() {
        let mut end = 0;
        for n in lengths {
            end += n;
            if i < end {
                break;
            }
        }
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = j < end;
        }
    }
    out
}

/// The spherical path written out independently of the library.
pub fn path(eps: [f64; 4], clean: [f64; 4], tau: f64) -> [f64; 4] {
    let theta = (eps[0] * clean[0] + eps[1] * clean[1] + eps[2] * clean[2] + eps[3] * clean[3]).acos();
    let (a, b) = (((1.0 - tau) * theta).sin() / theta.sin(), (tau * theta).sin() / theta.sin());
    [0, 1, 2, 3].map(|i| a * eps[i] + b * clean[i])
}

/// A canonical pair at quaternion angle `theta` (before canonicalization flips).
pub fn pair_at<R: Rng>(rng: &mut R, theta: f64) -> (Quaternion, Quaternion) {
    let e = sample_uniform_quat(rng);
    let ea = e.to_array();
    let mut d: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0));
    let proj: f64 = (0..4).map(|i| d[i] * ea[i]).sum();
    d.iter_mut().zip(ea).for_each(|(v, x)| *v -= proj * x);
    let n = norm4(d);
    let c = [0, 1, 2, 3].map(|i| theta.cos() * ea[i] + theta.sin() * d[i] / n);
    (e, canonicalize(c).unwrap())
}

/// A smooth random trajectory sampled at `hz`.
pub fn trajectory<R: Rng>(rng: &mut R, len: usize, hz: f64) -> Trajectory {
    let start = sample_uniform_quat(rng);
    let axis: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
    let rate = rng.random_range(0.1..1.5);
    let vel: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.2..0.2));
    let poses = (0..len)
        .map(|i| {
            let t = i as f64 / hz;
            Pose {
                stamp: t,
                t: [0, 1, 2].map(|k| vel[k] * t + 0.05 * (3.0 * t + k as f64).sin()),
                r: start.compose(&Quaternion::from_axis_angle(axis, rate * t)),
                g: if (t * 0.7).sin() > 0.0 { 1.0 } else { 0.0 },
            }
        })
        .collect();
    Trajectory::new(poses).unwrap()
}

/// Rotation angle between two unit quaternions, well conditioned near zero:
/// four times the half-angle between the nearer of `±b` and `a`.
pub fn precise_angle(a: &Quaternion, b: &Quaternion) -> f64 {
    let (a, mut b) = (a.to_array(), b.to_array());
    if a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() < 0.0 {
        b = b.map(|x| -x);
    }
    let diff = norm4([0, 1, 2, 3].map(|i| a[i] - b[i]));
    let sum = norm4([0, 1, 2, 3].map(|i| a[i] + b[i]));
    4.0 * diff.atan2(sum)
}

/// The same box with its axes permuted and independently sign-flipped.
pub fn rerepresent<R: Rng>(b: &OrientedBox3D, rng: &mut R) -> OrientedBox3D {
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let cols: Vec<_> = perm
        .iter()
        .map(|i| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            b.axes.column(*i).map(|c| s * c)
        })
        .collect();
    OrientedBox3D {
        center: b.center,
        axes: RotationMatrix::from_columns(cols[0], cols[1], cols[2]),
        extents: perm.map(|i| b.extents[i]),
    }
}

/// Boxes in a row, one per label.
pub fn fixture(labels: &[&str]) -> Scene {
    let boxes: Vec<BoxSpec> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| BoxSpec {
            label: l.to_string(),
            center: [-0.9 + 0.6 * i as f64, 0.0, 2.5],
            rotation: Quaternion::from_axis_angle([0.3, 1.0, 0.2], 0.4 * i as f64),
            extents: [0.3, 0.25, 0.2],
        })
        .collect();
    render_scene(96, 64, &boxes)
}
