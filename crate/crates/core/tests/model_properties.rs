mod common;

use common::{random_sample, tiny_model};
use crnet::config::ModelConfig;
use crnet::data::{ClassId, Episode};
use crnet::model::{
    co_occurrence_head, condition, cross_reference, encode_pair, foreground_pool, init_params, mask_background,
    FeatureMap,
};
use crnet::refine::{init_cache, refine, refine_step, RefinementInput};
use crnet::train::forward_episode;
use crnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feature_pair(seed: u64, c: usize, h: usize) -> (FeatureMap<f32>, FeatureMap<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = FeatureMap::new(Tensor::uniform(&[c, h, h], -2.0, 2.0, &mut rng)).unwrap();
    let b = FeatureMap::new(Tensor::uniform(&[c, h, h], -2.0, 2.0, &mut rng)).unwrap();
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_pair_is_swap_equivariant(seed in any::<u64>()) {
        let cfg = tiny_model();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_sample(&mut rng, 16, ClassId(1));
        let b = random_sample(&mut rng, 16, ClassId(1));
        let (fa, fb) = encode_pair(&a, &b, &params, &cfg).unwrap();
        let (gb, ga) = encode_pair(&b, &a, &params, &cfg).unwrap();
        prop_assert_eq!(fa, ga);
        prop_assert_eq!(fb, gb);
    }

    #[test]
    fn cross_reference_is_swap_equivariant_and_contracting(seed in any::<u64>()) {
        let cfg = tiny_model();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let (fs, fq) = feature_pair(seed, 8, 4);
        let (gs, gq, gate) = cross_reference(&fs, &fq, &params, &cfg).unwrap();
        let (hq, hs, gate2) = cross_reference(&fq, &fs, &params, &cfg).unwrap();
        prop_assert_eq!(&gs, &hs);
        prop_assert_eq!(&gq, &hq);
        prop_assert_eq!(&gate, &gate2);
        prop_assert!(gate.values.iter().all(|&v| v > 0.0 && v < 1.0));
        for (g, f) in gs.data.data().iter().zip(fs.data.data()) {
            prop_assert!(g.abs() <= f.abs());
        }
    }

    #[test]
    fn co_occurrence_head_is_swap_equivariant(seed in any::<u64>()) {
        let cfg = tiny_model();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let (a, b) = feature_pair(seed, 8, 5);
        let (la, lb) = co_occurrence_head(&a, &b, &params, &cfg).unwrap();
        let (mb, ma) = co_occurrence_head(&b, &a, &params, &cfg).unwrap();
        prop_assert_eq!(la, ma);
        prop_assert_eq!(lb, mb);
    }

    #[test]
    fn refine_caches_are_distributions(seed in any::<u64>(), steps in 1usize..4) {
        let cfg = tiny_model();
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureMap::new(Tensor::uniform(&[cfg.refine_input_channels(), 5, 5], -1.0, 1.0, &mut rng)).unwrap();
        let inp = RefinementInput { features };
        let mut cache = init_cache::<f32>(5, 5);
        for i in 0..steps {
            let (logits, next) = refine_step(&inp, &cache, &params, &cfg).unwrap();
            prop_assert_eq!(logits.shape(), &[2, 5, 5]);
            prop_assert_eq!(next.step_index, i + 1);
            for p in 0..25 {
                let (b, f) = (next.probs.data()[p], next.probs.data()[25 + p]);
                prop_assert!(b >= 0.0 && f >= 0.0);
                prop_assert!(((b + f) as f64 - 1.0).abs() <= 1e-6);
            }
            cache = next;
        }
    }
}

#[test]
fn cache_starts_at_zero() {
    let c = init_cache::<f64>(3, 4);
    assert_eq!(c.step_index, 0);
    assert_eq!(c.probs.shape(), &[2, 3, 4]);
    assert!(c.probs.data().iter().all(|&v| v == 0.0));
}

#[test]
fn refine_matches_repeated_steps() {
    let cfg = tiny_model();
    let params = init_params::<f64>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features = FeatureMap::new(Tensor::uniform(&[cfg.refine_input_channels(), 4, 4], -1.0, 1.0, &mut rng)).unwrap();
    let inp = RefinementInput { features };
    let mut cache = init_cache(4, 4);
    let mut last = None;
    for _ in 0..3 {
        let (l, c) = refine_step(&inp, &cache, &params, &cfg).unwrap();
        cache = c;
        last = Some(l);
    }
    let unrolled = refine(&inp, &params, &cfg, 3).unwrap();
    assert!(unrolled.max_abs_diff(&last.unwrap()) < 1e-12);
    assert!(refine(&inp, &params, &cfg, 0).is_err());
}

#[test]
fn refine_rejects_wrong_channel_count() {
    let cfg = tiny_model();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let features = FeatureMap::new(Tensor::zeros(&[3, 4, 4])).unwrap();
    assert!(refine(&RefinementInput { features }, &params, &cfg, 1).is_err());
}

#[test]
fn foreground_pool_averages_class_pixels() {
    // 2 channels on a 2x2 grid; class 1 covers the left column.
    let data = Tensor::from_vec(&[2, 2, 2], vec![1.0f64, 5.0, 3.0, 7.0, -2.0, 0.0, 4.0, 0.0]).unwrap();
    let f = FeatureMap::new(data).unwrap();
    let mask = crnet::data::LabelMap::new(2, 2, vec![1, 0, 1, 0]).unwrap();
    let v = foreground_pool(&f, &mask, ClassId(1)).unwrap();
    assert_eq!(v.values, vec![2.0, 1.0]);
    assert!(foreground_pool(&f, &mask, ClassId(4)).is_err());
}

#[test]
fn condition_accepts_any_category_vector_of_matching_width() {
    let cfg = tiny_model();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let (g, _) = feature_pair(1, 8, 3);
    let mask = crnet::data::LabelMap::filled(3, 3, ClassId(2));
    let cv = foreground_pool(&g, &mask, ClassId(2)).unwrap();
    let out = condition(&g, &cv, &params, &cfg).unwrap();
    assert_eq!(out.data.shape(), &[cfg.width, 3, 3]);
    let short = crnet::model::CategoryVector { values: vec![0.0; 3], source_class: ClassId(2) };
    assert!(condition(&g, &short, &params, &cfg).is_err());
}

#[test]
fn masking_keeps_only_the_class_of_interest() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_sample(&mut rng, 8, ClassId(3));
    let m = mask_background(&s, [0.25, 0.5, 0.75]);
    for (p, &l) in s.mask.labels.iter().enumerate() {
        let px = &m.pixels[3 * p..3 * p + 3];
        if l == 3 {
            assert_eq!(px, &s.pixels[3 * p..3 * p + 3]);
        } else {
            assert_eq!(px, &[0.25, 0.5, 0.75]);
        }
    }
}

fn episode(seed: u64, size: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_sample(&mut rng, size, ClassId(1));
    let q = random_sample(&mut rng, size, ClassId(1));
    Episode::from_samples(vec![s], q, ClassId(1)).unwrap()
}

#[test]
fn forward_outputs_have_image_resolution() {
    let cfg = tiny_model();
    let params = init_params::<f32>(&cfg, 2).unwrap();
    let out = forward_episode(&params, &cfg, &episode(2, 20), 2).unwrap();
    for t in [&out.logits_q, &out.logits_s, out.aux_logits_q.as_ref().unwrap(), out.aux_logits_s.as_ref().unwrap()] {
        assert_eq!(t.shape(), &[2, 20, 20]);
    }
}

#[test]
fn swapping_roles_swaps_outputs_without_input_masking() {
    let cfg = ModelConfig { mask_support_input: false, ..tiny_model() };
    let params = init_params::<f32>(&cfg, 4).unwrap();
    let ep = episode(4, 16);
    let swapped = Episode::from_samples(vec![ep.query.clone()], ep.support[0].clone(), ClassId(1)).unwrap();
    let a = forward_episode(&params, &cfg, &ep, 2).unwrap();
    let b = forward_episode(&params, &cfg, &swapped, 2).unwrap();
    assert_eq!(a.logits_q, b.logits_s);
    assert_eq!(a.logits_s, b.logits_q);
    assert_eq!(a.aux_logits_q, b.aux_logits_s);
}

#[test]
fn multi_support_episodes_are_rejected_by_the_pair_forward() {
    let cfg = tiny_model();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let mut ep = episode(0, 16);
    ep.support.push(ep.support[0].clone());
    assert!(forward_episode(&params, &cfg, &ep, 1).is_err());
}

#[test]
fn ablations_drop_their_parameter_groups() {
    let no_cr = ModelConfig { use_cross_reference: false, ..tiny_model() };
    let groups = init_params::<f32>(&no_cr, 0).unwrap();
    assert!(!groups.groups_present().contains("cross_reference"));
    let no_cache = ModelConfig { use_cache: false, ..tiny_model() };
    let p = init_params::<f32>(&no_cache, 0).unwrap();
    assert!(p.get("refinement.gc_a1.weight").is_none());
    let params = init_params::<f32>(&no_cr, 0).unwrap();
    let out = forward_episode(&params, &no_cr, &episode(1, 16), 2).unwrap();
    assert!(out.aux_logits_q.is_none());
}
