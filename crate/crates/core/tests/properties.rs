mod common;

use common::criteria;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitasd::data::augment::{augment, one_hot, AugmentConfig};
use vitasd::data::Image;
use vitasd::mae::plan_mask;

#[test]
fn attention_rows_and_identity_blocks() {
    let c = criteria::attention_invariants();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn sequence_length_law() {
    let c = criteria::sequence_law();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn rff_kernel_oracle() {
    let c = criteria::rff_kernel();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn auroc_rank_equals_pairwise() {
    let c = criteria::auroc_oracle();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn augmentation_identities() {
    let c = criteria::augmentation_invariants();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn mask_frequency_is_uniform() {
    let n = 64;
    let mut counts = vec![0usize; n];
    for seed in 0..1000 {
        let plan = plan_mask(n, 0.75, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(plan.masked.len(), 48);
        for i in plan.masked {
            counts[i] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        let f = *c as f64 / 1000.0;
        assert!((f - 0.75).abs() <= 0.05, "patch {i} masked with frequency {f}");
    }
}

proptest! {
    #[test]
    fn augment_keeps_range_and_label_mass(seed in any::<u64>(), label in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(8, 8, (0..192).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).unwrap();
        let partner = Image::new(8, 8, (0..192).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).unwrap();
        let cfg = AugmentConfig { mix_p: 1.0, ..AugmentConfig::default() };
        let (out, y) = augment(&img, &one_hot(label, 3), (&partner, &one_hot((label + 1) % 3, 3)), &cfg, &mut rng).unwrap();
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
