mod common;

use common::{pair_at, path};
use geoflow::flowmatch::{
    euler_step_rotation, euler_step_translation, generate, integrate_from, loss_cosine_normalized, loss_geodesic,
    make_noisy_at, sample_noise, target_field_rotation, target_fields, FmConfig, TargetField,
};
use geoflow::seeding;
use geoflow::so3::{geodesic_angle, norm3, norm4, sample_uniform_quat, sub3};
use geoflow::{Action, ActionChunk};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn rotation_field_is_the_path_derivative() {
    let mut rng = seeding::rng(101);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let angle = rng.random_range(1e-3..std::f64::consts::PI - 1e-2);
        let (e, c) = pair_at(&mut rng, angle);
        let theta = e.dot(&c).clamp(-1.0, 1.0).acos();
        if !(1e-3..=std::f64::consts::PI - 1e-2).contains(&theta) {
            continue;
        }
        let tau = rng.random_range(h..1.0 - h);
        let (p1, p0) = (path(e.to_array(), c.to_array(), tau + h), path(e.to_array(), c.to_array(), tau - h));
        let fd = [0, 1, 2, 3].map(|i| (p1[i] - p0[i]) / (2.0 * h));
        let u = target_field_rotation(&c, &e, tau);
        let err = norm4([0, 1, 2, 3].map(|i| u[i] - fd[i])) / norm4(fd);
        worst = worst.max(err);
        checked += 1;
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn field_speed_is_the_arc_angle() {
    let mut rng = seeding::rng(5);
    for _ in 0..200 {
        let angle = rng.random_range(0.01..3.0);
        let (e, c) = pair_at(&mut rng, angle);
        let theta = e.dot(&c).acos();
        let u = target_field_rotation(&c, &e, rng.random_range(0.0..1.0));
        assert!((norm4(u) - theta).abs() < 1e-9);
    }
}

fn random_chunk<R: Rng>(rng: &mut R, horizon: usize) -> ActionChunk {
    ActionChunk::new(
        (0..horizon)
            .map(|_| Action {
                x: [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)),
                q: sample_uniform_quat(rng),
                g: f64::from(rng.random_range(0..2u8)),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn exact_conditional_field_integrates_to_the_target() {
    let mut rng = seeding::rng(7);
    let steps = 100;
    for _ in 0..200 {
        let clean = random_chunk(&mut rng, 5);
        let eps = sample_noise(&mut rng, 5).unwrap();
        let mut state = eps.clone();
        for i in 0..steps {
            let tau = i as f64 / steps as f64;
            let s = make_noisy_at(&clean, eps.clone(), tau).unwrap();
            let f = target_fields(&s);
            for (a, fs) in state.actions_mut().iter_mut().zip(&f) {
                a.x = euler_step_translation(a.x, fs.u_x, 1.0 / steps as f64);
                a.q = euler_step_rotation(&a.q, fs.u_q, 1.0 / steps as f64);
            }
        }
        for (a, c) in state.iter().zip(clean.iter()) {
            assert!(norm3(sub3(a.x, c.x)) < 1e-3);
            assert!(geodesic_angle(&a.q, &c.q) < 1e-3);
        }
    }
}

#[test]
fn two_small_steps_equal_one_double_advance() {
    let mut rng = seeding::rng(9);
    for _ in 0..200 {
        let angle = rng.random_range(0.05..3.0);
        let (e, c) = pair_at(&mut rng, angle);
        let tau = rng.random_range(0.0..0.9);
        let delta = 0.04;
        let q = geoflow::so3::slerp(&e, &c, tau);
        let q1 = euler_step_rotation(&q, target_field_rotation(&c, &e, tau), delta);
        let q2 = euler_step_rotation(&q1, target_field_rotation(&c, &e, tau + delta), delta);
        let want = geoflow::so3::slerp(&e, &c, tau + 2.0 * delta);
        assert!(geodesic_angle(&q2, &want) < 1e-4);
    }
}

#[test]
fn oracle_model_generation_reaches_the_target() {
    let mut rng = seeding::rng(3);
    let target = random_chunk(&mut rng, 5);
    let model = TargetField { target: target.clone() };
    let cfg = FmConfig {
        steps: 100,
        ..FmConfig::default()
    };
    let out = generate(&model, &[], 5, &cfg, &mut seeding::rng(4)).unwrap();
    for (a, t) in out.iter().zip(target.iter()) {
        assert!(geodesic_angle(&a.q, &t.q) < 1e-2);
        assert!(norm3(sub3(a.x, t.x)) < 1e-3);
    }
    let again = generate(&model, &[], 5, &cfg, &mut seeding::rng(4)).unwrap();
    assert_eq!(out, again);

    // One full-length jump: translation exact, rotation inside the first-order bound.
    let start = sample_noise(&mut seeding::rng(8), 5).unwrap();
    let one = integrate_from(&model, start.clone(), &[], 1).unwrap();
    for ((a, t), s) in one.iter().zip(target.iter()).zip(start.iter()) {
        assert!(norm3(sub3(a.x, t.x)) < 1e-12);
        let theta = geodesic_angle(&s.q, &t.q);
        assert!(geodesic_angle(&a.q, &t.q) <= theta * theta / 2.0 + 1e-9);
    }
}

proptest! {
    #[test]
    fn exact_field_has_small_geodesic_loss(seed in 0u64..10_000, tau in 0.0f64..0.99, delta in 0.0f64..0.01) {
        let mut rng = seeding::rng(seed);
        let (c, e) = (sample_uniform_quat(&mut rng), sample_uniform_quat(&mut rng));
        let q = geoflow::so3::slerp(&e, &c, tau);
        let u = target_field_rotation(&c, &e, tau);
        prop_assert!(loss_geodesic(&q, u, &c, &e, tau, delta).unwrap() < 1e-6);
        prop_assert!(loss_cosine_normalized(u, u).abs() < 1e-12);
    }
}
