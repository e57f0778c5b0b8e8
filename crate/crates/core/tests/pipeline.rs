mod common;

use common::{precise_angle, trajectory};
use geoflow::actionpipe::{
    apply_chunk, chunk_starts, denormalize, fit_norm, make_chunk, mixture_sampler, normalize, parse_jsonl, resample,
    to_jsonl, MixtureSpec, NormScheme,
};
use geoflow::seeding;
use geoflow::so3::{norm3, sample_uniform_quat, sub3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunks_reapply_to_the_resampled_poses(seed in 0u64..1_000_000, len in 30usize..120, h in 1usize..8) {
        let mut rng = seeding::rng(seed);
        let res = resample(&trajectory(&mut rng, len, 10.0), 5.0).unwrap();
        for s in chunk_starts(res.len(), h, h) {
            let chunk = make_chunk(&res, s, h).unwrap();
            let back = apply_chunk(&res.poses[s], &chunk, 0.2);
            for (k, p) in back.iter().enumerate() {
                let want = &res.poses[s + 1 + k];
                prop_assert!(norm3(sub3(p.t, want.t)) < 1e-9);
                prop_assert!(precise_angle(&p.r, &want.r) < 1e-9);
                prop_assert!((p.stamp - want.stamp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deltas_are_frame_equivariant(seed in 0u64..1_000_000) {
        let mut rng = seeding::rng(seed);
        let traj = trajectory(&mut rng, 40, 5.0);
        let rot = sample_uniform_quat(&mut rng);
        let moved = traj.rotated(&rot);
        let a = make_chunk(&traj, 3, 5).unwrap();
        let b = make_chunk(&moved, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(norm3(sub3(rot.rotate(x.dt), y.dt)) < 1e-12);
            prop_assert!(precise_angle(&x.dr, &y.dr) < 1e-9);
            prop_assert_eq!(x.g, y.g);
        }
    }
}

#[test]
fn chunk_count_for_non_overlapping_stride() {
    let mut rng = seeding::rng(1);
    for len in [60, 61, 99, 100, 201] {
        let res = resample(&trajectory(&mut rng, len, 10.0), 5.0).unwrap();
        let n = chunk_starts(res.len(), 5, 5).len();
        // 10 Hz → 5 Hz keeps every other pose: ceil(len / 2) of them.
        assert_eq!(res.len(), len.div_ceil(2));
        assert_eq!(n, (res.len() - 1) / 5);
    }
}

#[test]
fn normalization_inverts_for_every_scheme() {
    let mut rng = seeding::rng(4);
    let res = resample(&trajectory(&mut rng, 400, 10.0), 5.0).unwrap();
    let deltas: Vec<_> = chunk_starts(res.len(), 4, 1)
        .into_iter()
        .flat_map(|s| make_chunk(&res, s, 4).unwrap())
        .collect();
    for scheme in [NormScheme::Quantile, NormScheme::MinmaxConst, NormScheme::MeanStd] {
        let stats = fit_norm(&deltas, scheme).unwrap();
        let json = serde_json::to_string(&stats).unwrap();
        assert_eq!(serde_json::from_str::<geoflow::actionpipe::NormStats>(&json).unwrap(), stats);
        for d in &deltas {
            let back = denormalize(&normalize(d, &stats), &stats);
            assert!(norm3(sub3(back.dt, d.dt)) < 1e-12);
            assert_eq!(back.dr, d.dr);
            assert_eq!(back.g, d.g);
        }
    }
}

#[test]
fn jsonl_roundtrip() {
    let traj = trajectory(&mut seeding::rng(6), 25, 10.0);
    let back = parse_jsonl(&to_jsonl(&traj)).unwrap();
    for (a, b) in back.poses.iter().zip(&traj.poses) {
        assert_eq!((a.stamp, a.t, a.g), (b.stamp, b.t, b.g));
        // Parsing renormalizes the quaternion, which may move the last bit.
        for (x, y) in a.r.to_array().iter().zip(b.r.to_array()) {
            assert!((x - y).abs() <= 2.0 * f64::EPSILON);
        }
    }
}

#[test]
fn mixture_frequencies_follow_weights() {
    let spec = MixtureSpec::new([("a", 1.0), ("b", 3.0)]).unwrap();
    let mut s = mixture_sampler(&spec, seeding::rng(3)).unwrap();
    let n = 100_000;
    let hits = (0..n).filter(|_| s.next_index() == 1).count();
    assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
}
