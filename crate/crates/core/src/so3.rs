//! Unit quaternions on the half-space of S³, rotation matrices, and the
//! manifold operations used by the rotation flow.
//!
//! Component order is scalar-first, `(w, x, y, z)`, everywhere, including
//! the serialized `[w, x, y, z]` form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A raw, not necessarily unit, 4-vector in `(w, x, y, z)` order.
pub type Quat4 = [f64; 4];
pub type Vec3 = [f64; 3];

const ZERO_NORM: f64 = 1e-12;
const SLERP_SIN_EPS: f64 = 1e-7;
const OMEGA_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("quaternion norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

/// A unit quaternion in canonical half-space form.
///
/// Either `w > 0`, or `w == 0` and the first nonzero of `(x, y, z)` is
/// positive. `q` and `-q` therefore map to the same value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = So3Error;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        canonicalize(v)
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.to_array()
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes `(w, x, y, z)`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        canonicalize([w, x, y, z])
    }

    /// Rotation of `angle` radians about `axis`. A zero axis yields the identity.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        if n < ZERO_NORM {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        canonicalize([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
            .expect("axis-angle quaternion has unit norm")
    }

    /// Exponential map of a rotation vector (axis times angle).
    pub fn from_rotation_vector(rv: Vec3) -> Self {
        Self::from_axis_angle(rv, norm3(rv))
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> Quat4 {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        dot4(self.to_array(), other.to_array())
    }

    pub fn conjugate(&self) -> Quaternion {
        conjugate(*self)
    }

    /// Rotates a 3-vector by this quaternion.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let p = hamilton_raw(
            hamilton_raw(self.to_array(), [0.0, v[0], v[1], v[2]]),
            conjugate(*self).to_array(),
        );
        [p[1], p[2], p[3]]
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        geodesic_angle(&Self::IDENTITY, self)
    }

    /// `self ⊗ other`, re-canonicalized.
    pub fn compose(&self, other: &Quaternion) -> Quaternion {
        canonicalize(hamilton(self, other)).expect("product of unit quaternions is unit")
    }
}

/// Normalizes `q` and flips its sign into the canonical half-space.
pub fn canonicalize(q: Quat4) -> Result<Quaternion, So3Error> {
    let n = norm4(q);
    if !(n > ZERO_NORM) {
        return Err(So3Error::ZeroNorm(n));
    }
    let mut v = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let flip = if v[0] != 0.0 {
        v[0] < 0.0
    } else {
        v[1..].iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|c| *c = -*c);
    }
    // -0.0 would break exact equality between canonicalize(q) and canonicalize(-q).
    v.iter_mut().for_each(|c| *c += 0.0);
    Ok(Quaternion {
        w: v[0],
        x: v[1],
        y: v[2],
        z: v[3],
    })
}

/// Hamilton product on raw 4-vectors.
pub fn hamilton_raw(a: Quat4, b: Quat4) -> Quat4 {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn hamilton(q1: &Quaternion, q2: &Quaternion) -> Quat4 {
    hamilton_raw(q1.to_array(), q2.to_array())
}

pub fn conjugate(q: Quaternion) -> Quaternion {
    // The conjugate of a canonical quaternion with w > 0 is still canonical;
    // the w = 0 case needs the tie-break re-applied.
    if q.w > 0.0 {
        Quaternion {
            w: q.w,
            x: -q.x + 0.0,
            y: -q.y + 0.0,
            z: -q.z + 0.0,
        }
    } else {
        canonicalize([q.w, -q.x, -q.y, -q.z]).expect("unit quaternion")
    }
}

/// The raw conjugate `(w, -x, -y, -z)` of a 4-vector.
pub fn conjugate_raw(q: Quat4) -> Quat4 {
    [q[0], -q[1], -q[2], -q[3]]
}

fn clamped_acos(d: f64) -> f64 {
    d.clamp(-1.0, 1.0).acos()
}

/// Spherical linear interpolation from `q_eps` (τ = 0) to `q_t` (τ = 1).
///
/// This is the interpolation as written, without the shortest-arc sign flip:
/// both inputs are canonical and the angle is `acos(q_eps · q_t)`.
pub fn slerp(q_eps: &Quaternion, q_t: &Quaternion, tau: f64) -> Quaternion {
    if tau == 0.0 {
        return *q_eps;
    }
    if tau == 1.0 {
        return *q_t;
    }
    let d = q_eps.dot(q_t);
    let theta = clamped_acos(d);
    let s = theta.sin();
    let a = q_eps.to_array();
    let b = q_t.to_array();
    let raw = if s < SLERP_SIN_EPS && d > 0.0 {
        lincomb4(1.0 - tau, a, tau, b)
    } else {
        lincomb4(((1.0 - tau) * theta).sin() / s, a, (tau * theta).sin() / s, b)
    };
    canonicalize(raw).expect("slerp of unit quaternions is unit")
}

/// Shortest-arc slerp: flips `b` when `a · b < 0` so the interpolation
/// follows the smaller rotation.
pub fn slerp_shortest(a: &Quaternion, b: &Quaternion, t: f64) -> Quaternion {
    let mut bv = b.to_array();
    let mut d = a.dot(b);
    if d < 0.0 {
        bv.iter_mut().for_each(|c| *c = -*c);
        d = -d;
    }
    let theta = clamped_acos(d);
    let s = theta.sin();
    let raw = if s < SLERP_SIN_EPS {
        lincomb4(1.0 - t, a.to_array(), t, bv)
    } else {
        lincomb4(((1.0 - t) * theta).sin() / s, a.to_array(), (t * theta).sin() / s, bv)
    };
    canonicalize(raw).expect("slerp of unit quaternions is unit")
}

/// Rotation angle between the rotations represented by `q1` and `q2`, in `[0, π]`.
pub fn geodesic_angle(q1: &Quaternion, q2: &Quaternion) -> f64 {
    2.0 * q1.dot(q2).abs().min(1.0).acos()
}

/// Body-frame angular velocity `2 · Im(q* ⊗ q̇)`.
pub fn angular_velocity(q: &Quaternion, q_dot: Quat4) -> Vec3 {
    let p = hamilton_raw(conjugate_raw(q.to_array()), q_dot);
    [2.0 * p[1], 2.0 * p[2], 2.0 * p[3]]
}

/// Delta quaternion `[cos(φ/2), ω̂ sin(φ/2)]` for `φ = |ω| dt`, as a raw 4-vector.
pub fn delta_quat(omega: Vec3, dt: f64) -> Quat4 {
    let n = norm3(omega);
    if n < OMEGA_EPS {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let (s, c) = (0.5 * n * dt).sin_cos();
    [c, s * omega[0] / n, s * omega[1] / n, s * omega[2] / n]
}

/// Advances `q` by the velocity `q_dot` over `dt` on the manifold: `q ⊗ Δq`.
pub fn integrate_quat(q: &Quaternion, q_dot: Quat4, dt: f64) -> Quaternion {
    let omega = angular_velocity(q, q_dot);
    if norm3(omega) < OMEGA_EPS {
        return *q;
    }
    canonicalize(hamilton_raw(q.to_array(), delta_quat(omega, dt)))
        .expect("product of unit quaternions is unit")
}

/// Draws a rotation uniformly: four standard normals, normalized, canonicalized.
pub fn sample_uniform_quat<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    loop {
        let v: Quat4 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        if let Ok(q) = canonicalize(v) {
            return q;
        }
    }
}

/// A proper rotation matrix, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn column(&self, j: usize) -> Vec3 {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        RotationMatrix([
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &RotationMatrix) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.0)
    }
}

/// Orthonormalizes the first two columns of `m` and completes a right-handed frame.
pub fn gram_schmidt_rotation(m: &[[f64; 3]; 3]) -> Result<RotationMatrix, So3Error> {
    let c0 = [m[0][0], m[1][0], m[2][0]];
    let c1 = [m[0][1], m[1][1], m[2][1]];
    gram_schmidt_columns(c0, c1)
}

pub fn gram_schmidt_columns(c0: Vec3, c1: Vec3) -> Result<RotationMatrix, So3Error> {
    let n0 = norm3(c0);
    let n1 = norm3(c1);
    if n0 < ZERO_NORM || n1 < ZERO_NORM {
        return Err(So3Error::DegenerateInput("zero column"));
    }
    let e0 = scale3(c0, 1.0 / n0);
    // Parallel columns: angle between them below 1e-6 rad.
    if norm3(cross(e0, c1)) / n1 < 1e-6 {
        return Err(So3Error::DegenerateInput("columns are parallel"));
    }
    let p = dot3(e0, c1);
    let r = sub3(c1, scale3(e0, p));
    let e1 = scale3(r, 1.0 / norm3(r));
    let e2 = cross(e0, e1);
    Ok(RotationMatrix::from_columns(e0, e1, e2))
}

pub fn quat_to_matrix(q: &Quaternion) -> RotationMatrix {
    let [w, x, y, z] = q.to_array();
    RotationMatrix([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])
}

/// Inverse of [`quat_to_matrix`], using the numerically largest pivot.
pub fn matrix_to_quat(r: &RotationMatrix) -> Quaternion {
    let m = &r.0;
    let trace = m[0][0] + m[1][1] + m[2][2];
    let raw = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    canonicalize(raw).expect("rotation matrix yields a nonzero quaternion")
}

// Small fixed-size vector helpers shared across the crate.

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
pub fn dot4(a: Quat4, b: Quat4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}
pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}
pub fn norm4(a: Quat4) -> f64 {
    dot4(a, a).sqrt()
}
pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
pub fn sub4(a: Quat4, b: Quat4) -> Quat4 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}
pub fn add4(a: Quat4, b: Quat4) -> Quat4 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}
pub fn scale4(a: Quat4, s: f64) -> Quat4 {
    [a[0] * s, a[1] * s, a[2] * s, a[3] * s]
}
pub fn lincomb4(s: f64, a: Quat4, t: f64, b: Quat4) -> Quat4 {
    [
        s * a[0] + t * b[0],
        s * a[1] + t * b[1],
        s * a[2] + t * b[2],
        s * a[3] + t * b[3],
    ]
}
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
