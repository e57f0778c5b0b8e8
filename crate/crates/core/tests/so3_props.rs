use geoflow::so3::{
    angular_velocity, canonicalize, conjugate, delta_quat, geodesic_angle, hamilton, hamilton_raw, integrate_quat,
    matrix_to_quat, norm3, norm4, quat_to_matrix, slerp, slerp_shortest, Quaternion,
};
use proptest::prelude::*;
use std::f64::consts::PI;

fn raw_quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("away from zero", |q| norm4(*q) > 1e-3)
}

fn quat() -> impl Strategy<Value = Quaternion> {
    raw_quat().prop_map(|q| canonicalize(q).unwrap())
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0f64..2.0)
}

proptest! {
    #[test]
    fn canonical_form_is_unit_with_nonnegative_scalar(q in raw_quat()) {
        let c = canonicalize(q).unwrap().to_array();
        prop_assert!((norm4(c) - 1.0).abs() < 1e-12);
        prop_assert!(c[0] >= 0.0);
        // q and −q name the same rotation.
        let neg = canonicalize([-q[0], -q[1], -q[2], -q[3]]).unwrap();
        prop_assert!(geodesic_angle(&neg, &canonicalize(q).unwrap()) < 1e-7);
    }

    #[test]
    fn hamilton_product_is_associative(a in quat(), b in quat(), c in quat()) {
        let ab = canonicalize(hamilton(&a, &b)).unwrap();
        let bc = canonicalize(hamilton(&b, &c)).unwrap();
        let l = canonicalize(hamilton(&ab, &c)).unwrap();
        let r = canonicalize(hamilton(&a, &bc)).unwrap();
        prop_assert!(geodesic_angle(&l, &r) < 1e-7);
    }

    #[test]
    fn conjugate_inverts(q in quat()) {
        let p = canonicalize(hamilton(&q, &conjugate(q))).unwrap();
        prop_assert!(geodesic_angle(&p, &Quaternion::IDENTITY) < 1e-7);
    }

    #[test]
    fn rotation_preserves_length_and_matches_matrix(q in quat(), v in vec3()) {
        let r = q.rotate(v);
        prop_assert!((norm3(r) - norm3(v)).abs() < 1e-12);
        let m = quat_to_matrix(&q).apply(v);
        for i in 0..3 {
            prop_assert!((m[i] - r[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_roundtrip(q in quat()) {
        let back = matrix_to_quat(&quat_to_matrix(&q));
        prop_assert!(geodesic_angle(&back, &q) < 1e-7);
        let d = quat_to_matrix(&q).determinant();
        prop_assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_angle_is_a_metric(a in quat(), b in quat(), c in quat()) {
        let ab = geodesic_angle(&a, &b);
        prop_assert!((0.0..=PI + 1e-12).contains(&ab));
        prop_assert!((ab - geodesic_angle(&b, &a)).abs() < 1e-12);
        prop_assert!(ab <= geodesic_angle(&a, &c) + geodesic_angle(&c, &b) + 1e-9);
    }

    #[test]
    fn slerp_hits_endpoints_and_moves_at_constant_speed(a in quat(), b in quat(), t in 0.0f64..1.0) {
        prop_assert_eq!(slerp(&a, &b, 0.0), a);
        prop_assert_eq!(slerp(&a, &b, 1.0), b);
        // As written (no sign flip) the quaternion arc angle is acos(a·b).
        let theta = a.dot(&b).clamp(-1.0, 1.0).acos();
        let p = slerp(&a, &b, t);
        let arc = |x: &Quaternion, y: &Quaternion| x.dot(y).abs().clamp(-1.0, 1.0).acos();
        if theta > 1e-3 && theta < PI / 2.0 - 1e-3 {
            prop_assert!((arc(&a, &p) - t * theta).abs() < 1e-7);
            prop_assert!((arc(&p, &b) - (1.0 - t) * theta).abs() < 1e-7);
        }
    }

    #[test]
    fn shortest_slerp_never_exceeds_the_geodesic(a in quat(), b in quat(), t in 0.0f64..1.0) {
        let p = slerp_shortest(&a, &b, t);
        let total = geodesic_angle(&a, &b);
        prop_assert!((geodesic_angle(&a, &p) - t * total).abs() < 1e-6);
    }

    #[test]
    fn integration_matches_the_exponential_map(q in quat(), w in vec3(), dt in 0.0f64..1.0) {
        // Velocity with body rate w: q̇ = ½ q ⊗ (0, w).
        let p = hamilton_raw(q.to_array(), [0.0, w[0], w[1], w[2]]);
        let qdot = [0.5 * p[0], 0.5 * p[1], 0.5 * p[2], 0.5 * p[3]];
        let omega = angular_velocity(&q, qdot);
        for i in 0..3 {
            prop_assert!((omega[i] - w[i]).abs() < 1e-12);
        }
        let next = integrate_quat(&q, qdot, dt);
        prop_assert!((norm4(next.to_array()) - 1.0).abs() < 1e-12);
        let expect = canonicalize(hamilton_raw(q.to_array(), delta_quat(w, dt))).unwrap();
        for (a, b) in next.to_array().iter().zip(expect.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // The rotation advanced by |w|·dt (folded into [0, π]).
        let phi = (norm3(w) * dt) % (2.0 * PI);
        prop_assert!((geodesic_angle(&q, &next) - phi.min(2.0 * PI - phi)).abs() < 1e-6);
    }
}
