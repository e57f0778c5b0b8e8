use geoflow::seeding;
use geoflow::tokenizer3d::{
    decode, encode, fit_vocab, init_embeddings, parse_tokens, render_tokens, usage_histogram, EmbeddingMatrix,
    TokenVocab3D, TokenizerError,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn vocab() -> &'static TokenVocab3D {
    static V: OnceLock<TokenVocab3D> = OnceLock::new();
    V.get_or_init(|| {
        let mut r = seeding::rng(17);
        let xs: Vec<f64> = (0..100_000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        fit_vocab(&xs, 256).unwrap()
    })
}

proptest! {
    #[test]
    fn encode_is_monotone(a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let v = vocab();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(encode(lo, v) <= encode(hi, v));
    }

    #[test]
    fn roundtrip_stays_inside_the_bin(x in -4.0f64..4.0) {
        let v = vocab();
        let idx = encode(x, v);
        let back = decode(idx, v).unwrap();
        if x >= v.z_min && x <= v.z_max {
            prop_assert!((back - x).abs() <= v.bin_width(idx));
            prop_assert!(v.edges[idx] <= x && x <= v.edges[idx + 1]);
        } else {
            prop_assert!(idx == 0 || idx == v.n_bins - 1);
        }
    }

    #[test]
    fn centers_encode_to_their_own_token(i in 0usize..256) {
        let v = vocab();
        prop_assert_eq!(encode(decode(i, v).unwrap(), v), i);
    }

    #[test]
    fn token_text_roundtrip(tokens in prop::collection::vec(0usize..1024, 0..30)) {
        prop_assert_eq!(parse_tokens(&render_tokens(&tokens)), tokens);
    }
}

#[test]
fn vocab_json_roundtrip_and_validation() {
    let v = vocab();
    let back = TokenVocab3D::from_json(&v.to_json()).unwrap();
    assert_eq!(&back, v);
    back.validate().unwrap();
    let mut broken = back.clone();
    broken.edges.swap(3, 4);
    assert!(broken.validate().is_err());
    let mut old = back;
    old.format_version = 99;
    assert_eq!(old.validate(), Err(TokenizerError::UnsupportedVersion(99)));
}

#[test]
fn bins_hold_equal_mass_on_fresh_data() {
    let v = vocab();
    let mut r = seeding::rng(18);
    let xs: Vec<f64> = (0..200_000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let h = usage_histogram(v, &xs);
    assert!(h.ratio < 3.0, "usage ratio {}", h.ratio);
    let outside = (h.below_range + h.above_range) as f64 / xs.len() as f64;
    assert!((outside - 0.02).abs() < 0.003, "tail mass {outside}");
    assert!(decode(256, v).is_err());
}

#[test]
fn too_few_samples_is_insufficient_data() {
    assert!(matches!(fit_vocab(&[0.0, 1.0, 2.0], 1024), Err(TokenizerError::InsufficientData(_))));
}

#[test]
fn embedding_init_is_seeded() {
    let mut r = seeding::rng(2);
    let existing = EmbeddingMatrix::new(50, 3, (0..150).map(|_| r.sample(StandardNormal)).collect());
    let a = init_embeddings(&existing, 10, &mut seeding::rng(5)).unwrap();
    let b = init_embeddings(&existing, 10, &mut seeding::rng(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.rows, a.dim), (10, 3));
}
