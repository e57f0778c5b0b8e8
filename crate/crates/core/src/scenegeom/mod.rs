//! Geometry over annotated scenes: masked point clouds, outlier removal,
//! oriented boxes with a canonical vertex order, keypoints, distances and
//! pinhole projection.
//!
//! Coordinates are camera-frame and affine-invariant; nothing here assumes
//! metric scale.

mod kdtree;
pub mod io;
pub mod synthetic;
pub mod vqa;

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{add3, cross, dot3, norm3, scale3, sub3, RotationMatrix, Vec3};

pub use kdtree::KdTree;

pub const DEFAULT_NEIGHBORS: usize = 20;
pub const DEFAULT_STD_RATIO: f64 = 2.0;
/// Extent assigned to the flat direction of a planar cloud.
pub const MIN_EXTENT: f64 = 1e-9;
/// Relative eigenvalue gap below which principal directions are unreliable.
/// Sampled cubes and squares land well inside this, so their boxes also go
/// through the minimum-volume search and keep whichever box is smaller.
const NEAR_DEGENERATE_GAP: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("mask selects no valid point")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{got} points, need more than {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),
    #[error("empty cloud")]
    EmptyCloud,
    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("no objects left to ask about")]
    NoObjects,
}

/// A per-pixel 3D point grid with validity flags, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>, valid: Vec<bool>) -> Result<Self, SceneError> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(SceneError::DimensionMismatch(format!(
                "{width}x{height} grid with {} points and {} validity flags",
                points.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            points,
            valid,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, SceneError> {
        if bits.len() != width * height {
            return Err(SceneError::DimensionMismatch(format!(
                "{width}x{height} mask with {} entries",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub label: String,
    pub mask: Mask,
    /// Valid masked points of the scene's point map, row-major.
    pub cloud: Vec<Vec3>,
}

impl SceneObject {
    pub fn from_mask(label: impl Into<String>, mask: Mask, pm: &PointMap) -> Result<Self, SceneError> {
        let cloud = masked_points(pm, &mask)?;
        Ok(Self {
            label: label.into(),
            mask,
            cloud,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

pub fn masked_points(pm: &PointMap, mask: &Mask) -> Result<Vec<Vec3>, SceneError> {
    if pm.width != mask.width || pm.height != mask.height {
        return Err(SceneError::DimensionMismatch(format!(
            "point map {}x{} vs mask {}x{}",
            pm.width, pm.height, mask.width, mask.height
        )));
    }
    let cloud: Vec<Vec3> = pm
        .points
        .iter()
        .zip(&pm.valid)
        .zip(&mask.bits)
        .filter(|((_, v), m)| **v && **m)
        .map(|((p, _), _)| *p)
        .collect();
    if cloud.is_empty() {
        return Err(SceneError::EmptyMask);
    }
    Ok(cloud)
}

/// Mean distance from each point to its `k` nearest other points.
pub fn mean_neighbor_distances(cloud: &[Vec3], k: usize) -> Vec<f64> {
    let tree = KdTree::build(cloud);
    cloud
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.nearest(p, k, Some(i));
            nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
        })
        .collect()
}

/// Drops points whose mean k-NN distance exceeds `mean + ratio · std` of
/// those per-point means.
pub fn remove_outliers(cloud: &[Vec3], k: usize, ratio: f64) -> Result<Vec<Vec3>, SceneError> {
    if k == 0 || cloud.len() <= k {
        return Err(SceneError::TooFewPoints {
            got: cloud.len(),
            need: k,
        });
    }
    let d = mean_neighbor_distances(cloud, k);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let threshold = mean + ratio * var.sqrt();
    Ok(cloud
        .iter()
        .zip(&d)
        .filter(|(_, di)| **di <= threshold)
        .map(|(p, _)| *p)
        .collect())
}

/// A box with center, orthonormal right-handed axes (matrix columns), and
/// full side lengths along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub center: Vec3,
    pub axes: RotationMatrix,
    pub extents: Vec3,
}

impl OrientedBox3D {
    /// Vertices in local sign-pattern order `−−−, −−+, …, +++` (last axis fastest).
    pub fn vertices(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, v) in out.iter_mut().enumerate() {
            let mut p = self.center;
            for a in 0..3 {
                let s = if (i >> (2 - a)) & 1 == 1 { 0.5 } else { -0.5 };
                p = add3(p, scale3(self.axes.column(a), s * self.extents[a]));
            }
            *v = p;
        }
        out
    }

    /// Coordinates of `p` in the box frame, relative to the center.
    pub fn local(&self, p: Vec3) -> Vec3 {
        let d = sub3(p, self.center);
        [
            dot3(d, self.axes.column(0)),
            dot3(d, self.axes.column(1)),
            dot3(d, self.axes.column(2)),
        ]
    }

    pub fn contains(&self, p: Vec3, slack: f64) -> bool {
        let l = self.local(p);
        (0..3).all(|i| l[i].abs() <= 0.5 * self.extents[i] + slack)
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }
}

pub fn centroid(cloud: &[Vec3]) -> Result<Vec3, SceneError> {
    if cloud.is_empty() {
        return Err(SceneError::EmptyCloud);
    }
    let s = cloud.iter().fold([0.0; 3], |acc, p| add3(acc, *p));
    Ok(scale3(s, 1.0 / cloud.len() as f64))
}

fn unit(v: Vec3) -> Vec3 {
    scale3(v, 1.0 / norm3(v))
}

/// Flips `v` so that its largest-magnitude component is positive.
fn sign_normalize(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        scale3(v, -1.0)
    } else {
        v
    }
}

/// Extents and center-offset (in the given frame) of `cloud` along orthonormal `axes`.
fn fit_extents(cloud: &[Vec3], origin: Vec3, axes: &[Vec3; 3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud {
        let d = sub3(*p, origin);
        for a in 0..3 {
            let v = dot3(d, axes[a]);
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mid = [0.5 * (hi[0] + lo[0]), 0.5 * (hi[1] + lo[1]), 0.5 * (hi[2] + lo[2])];
    (ext, mid)
}

/// Convex hull of 2D points, counter-clockwise, without collinear points.
fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && turn(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Minimum-area enclosing rectangle of the cloud projected on the plane
/// spanned by orthonormal `u`, `w`. Returns the rectangle's two in-plane axes.
fn min_area_axes(cloud: &[Vec3], origin: Vec3, u: Vec3, w: Vec3) -> (Vec3, Vec3, f64) {
    let proj: Vec<[f64; 2]> = cloud
        .iter()
        .map(|p| {
            let d = sub3(*p, origin);
            [dot3(d, u), dot3(d, w)]
        })
        .collect();
    let hull = convex_hull_2d(&proj);
    let mut best = (u, w, f64::INFINITY);
    if hull.len() < 2 {
        return (u, w, 0.0);
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
        if len < 1e-15 {
            continue;
        }
        let (c, s) = (e[0] / len, e[1] / len);
        let (mut lo0, mut hi0, mut lo1, mut hi1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let x = p[0] * c + p[1] * s;
            let y = -p[0] * s + p[1] * c;
            lo0 = lo0.min(x);
            hi0 = hi0.max(x);
            lo1 = lo1.min(y);
            hi1 = hi1.max(y);
        }
        let area = (hi0 - lo0) * (hi1 - lo1);
        if area < best.2 * (1.0 - 1e-12) {
            let a0 = add3(scale3(u, c), scale3(w, s));
            let a1 = add3(scale3(u, -s), scale3(w, c));
            best = (a0, a1, area);
        }
    }
    best
}

/// Any unit vector orthogonal to `d`.
fn orthogonal(d: Vec3) -> Vec3 {
    let pick = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    unit(cross(d, pick))
}

/// Volume of the box with first axis `a0` and the minimum-area rectangle
/// in the orthogonal plane.
fn volume_along(cloud: &[Vec3], origin: Vec3, a0: Vec3) -> ([Vec3; 3], f64) {
    let u = orthogonal(a0);
    let w = cross(a0, u);
    let (a1, a2, _) = min_area_axes(cloud, origin, u, w);
    let axes = [a0, a1, a2];
    let (ext, _) = fit_extents(cloud, origin, &axes);
    (axes, ext[0] * ext[1] * ext[2])
}

/// Points extreme along a fixed set of 13 directions. For small clouds, all points.
fn support_points(cloud: &[Vec3]) -> Vec<Vec3> {
    if cloud.len() <= 64 {
        return cloud.to_vec();
    }
    let mut idx = Vec::new();
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            for c in -1i32..=1 {
                if (a, b, c) <= (0, 0, 0) {
                    continue;
                }
                let d = [a as f64, b as f64, c as f64];
                let (mut lo, mut hi) = (0, 0);
                for (i, p) in cloud.iter().enumerate() {
                    if dot3(*p, d) < dot3(cloud[lo], d) {
                        lo = i;
                    }
                    if dot3(*p, d) > dot3(cloud[hi], d) {
                        hi = i;
                    }
                }
                idx.push(lo);
                idx.push(hi);
            }
        }
    }
    idx.sort_unstable();
    idx.dedup();
    idx.into_iter().map(|i| cloud[i]).collect()
}

/// Roughly even directions on the upper hemisphere (Fibonacci lattice).
fn hemisphere_grid(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Minimum-volume box search for clouds whose covariance is (nearly)
/// isotropic. Candidate first axes are the directions between support
/// points, a hemisphere grid and the given `seeds`; each is paired with the
/// minimum-area rectangle in its orthogonal plane. The best few are then
/// polished by a shrinking pattern search on the sphere.
fn isotropic_axes(cloud: &[Vec3], origin: Vec3, seeds: &[Vec3]) -> [Vec3; 3] {
    let support = support_points(cloud);
    let mut dirs: Vec<Vec3> = seeds.to_vec();
    for i in 0..support.len() {
        for j in (i + 1)..support.len() {
            let d = sub3(support[j], support[i]);
            if norm3(d) > 1e-12 {
                dirs.push(unit(d));
            }
        }
    }
    dirs.extend(hemisphere_grid(400));

    let mut scored: Vec<([Vec3; 3], f64)> = dirs.iter().map(|d| volume_along(cloud, origin, *d)).collect();
    // Stable sort keeps the earlier candidate on ties.
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut best = scored[0];
    for start in scored.iter().take(4) {
        let (mut axes, mut vol) = *start;
        let mut step = 0.05;
        while step > 1e-11 {
            let a0 = axes[0];
            let t1 = orthogonal(a0);
            let t2 = cross(a0, t1);
            let mut moved = false;
            for (s1, s2) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let d = unit(add3(a0, add3(scale3(t1, s1 * step), scale3(t2, s2 * step))));
                let (cand, v) = volume_along(cloud, origin, d);
                if v < vol * (1.0 - 1e-13) {
                    axes = cand;
                    vol = v;
                    moved = true;
                    break;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if vol < best.1 * (1.0 - 1e-12) {
            best = (axes, vol);
        }
    }
    best.0
}

/// Principal-component oriented box.
///
/// Axes are the covariance eigenvectors (largest variance first). Where
/// eigenvalues are close the principal directions are unreliable, so the
/// near-degenerate subspace is also resolved by a minimum-area (or, for
/// near-isotropic clouds, minimum-volume) search and the smaller box is kept. Planar clouds get a third axis
/// from the cross product with extent [`MIN_EXTENT`].
pub fn oriented_bbox(cloud: &[Vec3]) -> Result<OrientedBox3D, SceneError> {
    if cloud.len() < 4 {
        return Err(SceneError::DegenerateCloud(format!("{} points, need at least 4", cloud.len())));
    }
    let c = centroid(cloud)?;
    let mut cov = Matrix3::<f64>::zeros();
    for p in cloud {
        let d = nalgebra::Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        cov += d * d.transpose();
    }
    cov /= cloud.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let lam: Vec<f64> = order.iter().map(|i| eig.eigenvalues[*i].max(0.0)).collect();
    let vecs: Vec<Vec3> = order
        .iter()
        .map(|i| {
            let v = eig.eigenvectors.column(*i);
            unit([v[0], v[1], v[2]])
        })
        .collect();
    let scale = lam[0];
    if !(scale > 0.0) {
        return Err(SceneError::DegenerateCloud("all points coincide".into()));
    }
    let rank = lam.iter().filter(|l| **l > 1e-12 * scale).count();
    if rank < 2 {
        return Err(SceneError::DegenerateCloud("points are collinear".into()));
    }
    let near01 = (lam[0] - lam[1]) / scale <= NEAR_DEGENERATE_GAP;
    let near12 = rank == 3 && (lam[1] - lam[2]) / scale <= NEAR_DEGENERATE_GAP;

    let pca = [vecs[0], vecs[1], vecs[2]];
    let searched: Option<[Vec3; 3]> = if near01 && near12 {
        Some(isotropic_axes(cloud, c, &pca))
    } else if near01 {
        let (a0, a1, _) = min_area_axes(cloud, c, vecs[0], vecs[1]);
        Some([a0, a1, vecs[2]])
    } else if near12 {
        let (a1, a2, _) = min_area_axes(cloud, c, vecs[1], vecs[2]);
        Some([vecs[0], a1, a2])
    } else {
        None
    };
    let box_volume = |axes: &[Vec3; 3]| {
        let (e, _) = fit_extents(cloud, c, axes);
        (0..rank).map(|i| e[i]).product::<f64>()
    };
    let axes = match searched {
        // The principal box wins only if strictly smaller.
        Some(s) if box_volume(&s) <= box_volume(&pca) * (1.0 + 1e-12) => {
            // The search has no variance order; order its axes by extent.
            let (ext, _) = fit_extents(cloud, c, &s);
            let mut idx = [0usize, 1, 2];
            if rank == 2 {
                // The flat direction stays last.
                idx[..2].sort_by(|a, b| ext[*b].total_cmp(&ext[*a]));
            } else {
                idx.sort_by(|a, b| ext[*b].total_cmp(&ext[*a]));
            }
            [s[idx[0]], s[idx[1]], s[idx[2]]]
        }
        _ => pca,
    };

    let a0 = sign_normalize(axes[0]);
    let a1 = sign_normalize(unit(sub3(axes[1], scale3(a0, dot3(axes[1], a0)))));
    let a2 = cross(a0, a1);
    let frame = [a0, a1, a2];
    let (mut ext, mid) = fit_extents(cloud, c, &frame);
    for e in ext.iter_mut() {
        *e = e.max(MIN_EXTENT);
    }
    let center = add3(
        c,
        add3(add3(scale3(a0, mid[0]), scale3(a1, mid[1])), scale3(a2, mid[2])),
    );
    Ok(OrientedBox3D {
        center,
        axes: RotationMatrix::from_columns(a0, a1, a2),
        extents: ext,
    })
}

/// Lexicographic `(z, y, x)` comparison that treats differences within
/// `tol` as ties, so near-equal coordinates from different box
/// representations order the same way.
fn cmp_zyx(a: &Vec3, b: &Vec3, tol: f64) -> Ordering {
    for i in [2, 1, 0] {
        if (a[i] - b[i]).abs() > tol {
            return a[i].total_cmp(&b[i]);
        }
    }
    Ordering::Equal
}

/// Canonical vertex order.
///
/// Vertex 0 is the `(z, y, x)`-lexicographic minimum in the camera frame.
/// The three box edges leaving vertex 0 are ranked by the same key applied
/// to the neighbor they reach; vertex `4·a + 2·b + c` is vertex 0 plus `a`
/// times the edge to the highest-ranked neighbor, `b` times the middle one
/// and `c` times the lowest one. Any representation of the same box (axis
/// permutation or sign flips) yields the same list.
pub fn order_vertices(b: &OrientedBox3D) -> [Vec3; 8] {
    let verts = b.vertices();
    let scale = 1.0 + norm3(b.center) + norm3(b.extents);
    let tol = 1e-9 * scale;
    let mut i0 = 0;
    for i in 1..8 {
        if cmp_zyx(&verts[i], &verts[i0], tol) == Ordering::Less {
            i0 = i;
        }
    }
    let v0 = verts[i0];
    // Edge vectors from v0 into the box: flip each axis where v0 sits on its + side.
    let mut edges: Vec<Vec3> = (0..3)
        .map(|a| {
            let plus = (i0 >> (2 - a)) & 1 == 1;
            let dir = if plus { -1.0 } else { 1.0 };
            scale3(b.axes.column(a), dir * b.extents[a])
        })
        .collect();
    edges.sort_by(|e1, e2| {
        let (n1, n2) = (add3(v0, *e1), add3(v0, *e2));
        cmp_zyx(&n1, &n2, tol).then_with(|| cmp_zyx(&n1, &n2, 0.0))
    });
    let (lo, mi, hi) = (edges[0], edges[1], edges[2]);
    let mut out = [[0.0; 3]; 8];
    for (k, v) in out.iter_mut().enumerate() {
        let mut p = v0;
        if k & 4 != 0 {
            p = add3(p, hi);
        }
        if k & 2 != 0 {
            p = add3(p, mi);
        }
        if k & 1 != 0 {
            p = add3(p, lo);
        }
        *v = p;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub closest: Vec3,
    pub furthest: Vec3,
    pub center: Vec3,
}

/// Points nearest to and furthest from the camera origin, and the centroid.
pub fn keypoints(cloud: &[Vec3]) -> Result<Keypoints, SceneError> {
    let center = centroid(cloud)?;
    let by_norm = |a: &&Vec3, b: &&Vec3| norm3(**a).total_cmp(&norm3(**b));
    let closest = *cloud.iter().min_by(by_norm).ok_or(SceneError::EmptyCloud)?;
    let furthest = *cloud.iter().max_by(by_norm).ok_or(SceneError::EmptyCloud)?;
    Ok(Keypoints {
        closest,
        furthest,
        center,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Centroid,
    /// Closest pair of points between the two clouds.
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectDistance {
    pub direct: f64,
    pub components: Vec3,
}

/// Vector from `a` to `b` and its length.
pub fn object_distance(a: &[Vec3], b: &[Vec3]) -> Result<ObjectDistance, SceneError> {
    object_distance_with(a, b, DistanceMode::Centroid)
}

pub fn object_distance_with(a: &[Vec3], b: &[Vec3], mode: DistanceMode) -> Result<ObjectDistance, SceneError> {
    let components = match mode {
        DistanceMode::Centroid => sub3(centroid(b)?, centroid(a)?),
        DistanceMode::Surface => {
            if a.is_empty() || b.is_empty() {
                return Err(SceneError::EmptyCloud);
            }
            let tree = KdTree::build(b);
            let mut best = (f64::INFINITY, [0.0; 3]);
            for p in a {
                let (j, d) = tree.nearest(p, 1, None)[0];
                if d < best.0 {
                    best = (d, sub3(b[j], *p));
                }
            }
            best.1
        }
    };
    Ok(ObjectDistance {
        direct: norm3(components),
        components,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxOffsets {
    pub vertices: [Vec3; 8],
    pub center: Vec3,
}

/// Per-vertex offsets `b[i] − a[i]` of two ordered boxes, plus the center offset.
pub fn bbox_vertex_distances(a: &OrientedBox3D, b: &OrientedBox3D) -> BoxOffsets {
    let (va, vb) = (order_vertices(a), order_vertices(b));
    let mut vertices = [[0.0; 3]; 8];
    for i in 0..8 {
        vertices[i] = sub3(vb[i], va[i]);
    }
    BoxOffsets {
        vertices,
        center: sub3(b.center, a.center),
    }
}

/// Pinhole projection to pixel coordinates `(u, v)`.
pub fn backproject(points: &[Vec3], k: &Intrinsics) -> Result<Vec<[f64; 2]>, SceneError> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p[2] > 1e-6) {
                return Err(SceneError::BehindCamera { index: i, z: p[2] });
            }
            Ok([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
        })
        .collect()
}

/// Inverse of [`backproject`] for a known depth.
pub fn unproject(pixel: [f64; 2], z: f64, k: &Intrinsics) -> Vec3 {
    [(pixel[0] - k.cx) * z / k.fx, (pixel[1] - k.cy) * z / k.fy, z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthComparison {
    pub dist_a: f64,
    pub dist_b: f64,
    pub closer: String,
    /// Distances were exactly equal; `closer` is the lexicographically smaller label.
    pub tie: bool,
}

pub fn compare_depths(a: &SceneObject, b: &SceneObject) -> Result<DepthComparison, SceneError> {
    compare_depth_clouds(&a.label, &a.cloud, &b.label, &b.cloud)
}

pub fn compare_depth_clouds(
    label_a: &str,
    a: &[Vec3],
    label_b: &str,
    b: &[Vec3],
) -> Result<DepthComparison, SceneError> {
    let dist_a = norm3(centroid(a)?);
    let dist_b = norm3(centroid(b)?);
    let tie = dist_a == dist_b;
    let closer = match dist_a.total_cmp(&dist_b) {
        Ordering::Less => label_a,
        Ordering::Greater => label_b,
        Ordering::Equal => label_a.min(label_b),
    };
    Ok(DepthComparison {
        dist_a,
        dist_b,
        closer: closer.to_string(),
        tie,
    })
}

/// Removes every object whose label appears more than once.
pub fn filter_duplicates(objects: Vec<SceneObject>) -> Vec<SceneObject> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for o in &objects {
        *counts.entry(o.label.clone()).or_default() += 1;
    }
    objects.into_iter().filter(|o| counts[&o.label] == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{quat_to_matrix, Quaternion};

    fn cube_corners() -> Vec<Vec3> {
        let mut v = Vec::new();
        for i in 0..8 {
            v.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        v
    }

    fn grid(w: usize, h: usize) -> PointMap {
        let pts = (0..w * h).map(|i| [(i % w) as f64, (i / w) as f64, 1.0]).collect();
        PointMap::new(w, h, pts, vec![true; w * h]).unwrap()
    }

    #[test]
    fn masked_points_examples() {
        let pm = grid(4, 4);
        let all = Mask::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(masked_points(&pm, &all).unwrap().len(), 16);
        let none = Mask::new(4, 4, vec![false; 16]).unwrap();
        assert_eq!(masked_points(&pm, &none), Err(SceneError::EmptyMask));
        let checker = Mask::new(4, 4, (0..16).map(|i| (i % 4 + i / 4) % 2 == 0).collect()).unwrap();
        assert_eq!(masked_points(&pm, &checker).unwrap().len(), 8);
        let wrong = Mask::new(2, 8, vec![true; 16]).unwrap();
        assert!(matches!(masked_points(&pm, &wrong), Err(SceneError::DimensionMismatch(_))));
    }

    #[test]
    fn invalid_points_excluded() {
        let mut pm = grid(2, 2);
        pm.valid[0] = false;
        let all = Mask::new(2, 2, vec![true; 4]).unwrap();
        assert_eq!(masked_points(&pm, &all).unwrap().len(), 3);
    }

    #[test]
    fn outlier_edge_cases() {
        let dup = vec![[1.0, 2.0, 3.0]; 30];
        assert_eq!(remove_outliers(&dup, 20, 2.0).unwrap().len(), 30);
        assert!(matches!(
            remove_outliers(&dup[..20], 20, 2.0),
            Err(SceneError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn unit_cube_box() {
        let b = oriented_bbox(&cube_corners()).unwrap();
        for e in b.extents {
            assert!((e - 1.0).abs() < 1e-12);
        }
        for j in 0..3 {
            let c = b.axes.column(j);
            let m = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-12, "axis {c:?}");
        }
        assert!((b.axes.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planar_and_degenerate_clouds() {
        let square = vec![[0.0, 0.0, 2.0], [1.0, 0.0, 2.0], [0.0, 2.0, 2.0], [1.0, 2.0, 2.0]];
        let b = oriented_bbox(&square).unwrap();
        assert!((b.extents[0] - 2.0).abs() < 1e-12 && (b.extents[1] - 1.0).abs() < 1e-12);
        assert_eq!(b.extents[2], MIN_EXTENT);
        let line = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert!(matches!(oriented_bbox(&line), Err(SceneError::DegenerateCloud(_))));
        assert!(matches!(oriented_bbox(&line[..3]), Err(SceneError::DegenerateCloud(_))));
    }

    #[test]
    fn vertex_zero_is_lowest_zyx_corner() {
        let b = oriented_bbox(&cube_corners()).unwrap();
        let v = order_vertices(&b);
        assert!(v[0].iter().all(|c| c.abs() < 1e-12));
        // Neighbors ranked by (z, y, x): (1,0,0) < (0,1,0) < (0,0,1).
        assert!((v[1][0] - 1.0).abs() < 1e-12);
        assert!((v[2][1] - 1.0).abs() < 1e-12);
        assert!((v[4][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_axes_same_order() {
        let rot = quat_to_matrix(&Quaternion::from_axis_angle([0.2, 0.5, 1.0], 0.7));
        let b = OrientedBox3D {
            center: [0.1, -0.2, 3.0],
            axes: rot,
            extents: [0.3, 0.5, 0.2],
        };
        let (c0, c1, c2) = (rot.column(0), rot.column(1), rot.column(2));
        let swapped = OrientedBox3D {
            center: b.center,
            axes: RotationMatrix::from_columns(c1, c0, scale3(c2, -1.0)),
            extents: [0.5, 0.3, 0.2],
        };
        let (va, vb) = (order_vertices(&b), order_vertices(&swapped));
        for i in 0..8 {
            assert!(norm3(sub3(va[i], vb[i])) < 1e-12);
        }
        let mut shifted = b;
        shifted.center[2] += 1.0;
        let vs = order_vertices(&shifted);
        for i in 0..8 {
            assert!(norm3(sub3(vs[i], add3(va[i], [0.0, 0.0, 1.0]))) < 1e-12);
        }
    }

    #[test]
    fn keypoint_and_distance_examples() {
        let p = [0.5, -1.0, 2.0];
        let k = keypoints(&[p]).unwrap();
        assert_eq!((k.closest, k.furthest, k.center), (p, p, p));
        let k = keypoints(&[[0.0, 0.0, 2.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(k.closest, [1.0, 0.0, 0.0]);
        assert_eq!(k.furthest, [0.0, 0.0, 2.0]);
        assert_eq!(k.center, [0.5, 0.0, 1.0]);
        assert_eq!(keypoints(&[]), Err(SceneError::EmptyCloud));

        let a = [[0.0, 0.0, 1.0]];
        let d = object_distance(&a, &[[0.0, 0.0, 3.0]]).unwrap();
        assert_eq!((d.components, d.direct), ([0.0, 0.0, 2.0], 2.0));
        assert_eq!(object_distance(&a, &a).unwrap().direct, 0.0);
        let s = object_distance_with(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]], &[[6.0, 0.0, 0.0]], DistanceMode::Surface)
            .unwrap();
        assert_eq!(s.direct, 1.0);
    }

    #[test]
    fn box_offsets_examples() {
        let b = oriented_bbox(&cube_corners()).unwrap();
        let same = bbox_vertex_distances(&b, &b);
        assert!(same.vertices.iter().all(|v| norm3(*v) == 0.0));
        let mut moved = b;
        moved.center = add3(b.center, [1.0, 0.0, 0.0]);
        let off = bbox_vertex_distances(&b, &moved);
        for v in off.vertices {
            assert!(norm3(sub3(v, [1.0, 0.0, 0.0])) < 1e-12);
        }
        let back = bbox_vertex_distances(&moved, &b);
        for i in 0..8 {
            assert!(norm3(add3(off.vertices[i], back.vertices[i])) < 1e-12);
        }
    }

    #[test]
    fn backprojection_examples() {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 0.0, cy: 0.0 };
        assert_eq!(backproject(&[[1.0, 2.0, 2.0]], &k).unwrap(), vec![[50.0, 100.0]]);
        let k2 = Intrinsics { fx: 300.0, fy: 310.0, cx: 160.0, cy: 120.0 };
        assert_eq!(backproject(&[[0.0, 0.0, 7.0]], &k2).unwrap(), vec![[160.0, 120.0]]);
        assert!(matches!(
            backproject(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], &k2),
            Err(SceneError::BehindCamera { index: 1, .. })
        ));
        let p = [0.3, -0.4, 2.5];
        let px = backproject(&[p], &k2).unwrap()[0];
        assert!(norm3(sub3(unproject(px, p[2], &k2), p)) < 1e-9);
    }

    #[test]
    fn depth_comparison_examples() {
        let c = compare_depth_clouds("mug", &[[0.0, 0.0, 1.0]], "bowl", &[[0.0, 0.0, 2.0]]).unwrap();
        assert_eq!((c.closer.as_str(), c.tie), ("mug", false));
        let t = compare_depth_clouds("mug", &[[0.0, 0.0, 1.0]], "bowl", &[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!((t.closer.as_str(), t.tie), ("bowl", true));
    }

    #[test]
    fn duplicate_filter_examples() {
        let pm = grid(2, 2);
        let obj = |l: &str| SceneObject::from_mask(l, Mask::new(2, 2, vec![true; 4]).unwrap(), &pm).unwrap();
        let labels = |v: Vec<SceneObject>| v.into_iter().map(|o| o.label).collect::<Vec<_>>();
        assert_eq!(labels(filter_duplicates(vec![obj("cup"), obj("cup"), obj("plate")])), vec!["plate"]);
        assert_eq!(labels(filter_duplicates(vec![obj("a"), obj("b")])), vec!["a", "b"]);
        assert!(filter_duplicates(vec![obj("cup"), obj("cup")]).is_empty());
    }
}
