mod common;

use std::collections::BTreeSet;

use crnet::data::{
    generate_synthetic, load_layout, load_pascal_style, make_folds, sample_episode, write_layout, ClassId,
    DatasetIndex, IndexedImage, ImageSample, LabelMap, Mode, SynthConfig, PASCAL_VOC_CLASSES,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pascal_ids() -> Vec<ClassId> {
    (1..=20).map(ClassId).collect()
}

fn names_of(ids: &BTreeSet<ClassId>) -> Vec<&'static str> {
    ids.iter().map(|c| PASCAL_VOC_CLASSES[c.0 as usize - 1]).collect()
}

#[test]
fn pascal_folds_follow_the_class_division_table() {
    let folds = make_folds(&pascal_ids(), 4).unwrap();
    assert_eq!(names_of(&folds[0].test_classes), ["aeroplane", "bicycle", "bird", "boat", "bottle"]);
    assert_eq!(names_of(&folds[1].test_classes), ["bus", "car", "cat", "chair", "cow"]);
    assert_eq!(names_of(&folds[3].test_classes), ["potted plant", "sheep", "sofa", "train", "tv/monitor"]);
    let mut all = BTreeSet::new();
    for f in &folds {
        assert!(f.train_classes.is_disjoint(&f.test_classes));
        assert_eq!(f.train_classes.len() + f.test_classes.len(), 20);
        assert!(all.is_disjoint(&f.test_classes));
        all.extend(f.test_classes.iter().copied());
    }
    assert_eq!(all.len(), 20);
}

#[test]
fn uneven_fold_counts_are_errors() {
    assert!(make_folds(&pascal_ids(), 3).is_err());
    assert!(make_folds(&pascal_ids(), 0).is_err());
}

fn small_synth(seed: u64) -> DatasetIndex {
    let cfg = SynthConfig { image_size: 32, instances_per_class: 6, ..SynthConfig::default() };
    generate_synthetic(&cfg, seed).unwrap()
}

#[test]
fn train_and_test_episodes_respect_the_fold() {
    let index = small_synth(1);
    let folds = make_folds(&index.class_ids(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for f in &folds {
        for _ in 0..500 {
            let tr = sample_episode(&index, f, Mode::Train, 1, &mut rng).unwrap();
            assert!(f.train_classes.contains(&tr.target_class));
            let te = sample_episode(&index, f, Mode::Test, 1, &mut rng).unwrap();
            assert!(f.test_classes.contains(&te.target_class));
        }
    }
}

#[test]
fn episode_images_are_distinct_and_contain_the_target() {
    let index = small_synth(2);
    let folds = make_folds(&index.class_ids(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in [1, 3, 5] {
        for _ in 0..50 {
            let ep = sample_episode(&index, &folds[1], Mode::Train, k, &mut rng).unwrap();
            assert_eq!(ep.support.len(), k);
            let ids: BTreeSet<usize> = ep.image_ids.iter().copied().collect();
            assert_eq!(ids.len(), k + 1);
            for s in ep.support.iter().chain([&ep.query]) {
                assert!(s.mask.contains(ep.target_class));
                assert_eq!(s.class_of_interest, ep.target_class);
            }
        }
    }
}

#[test]
fn too_few_images_is_an_error() {
    let index = small_synth(3);
    let folds = make_folds(&index.class_ids(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_episode(&index, &folds[0], Mode::Test, 200, &mut rng).is_err());
    assert!(sample_episode(&index, &folds[0], Mode::Test, 0, &mut rng).is_err());
}

#[test]
fn sampling_is_seed_deterministic() {
    let index = small_synth(4);
    let folds = make_folds(&index.class_ids(), 4).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| sample_episode(&index, &folds[2], Mode::Train, 2, &mut rng).unwrap().image_ids).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn larger_k_extends_the_same_episode() {
    let index = small_synth(4);
    let folds = make_folds(&index.class_ids(), 4).unwrap();
    for seed in 0..30 {
        let small = sample_episode(&index, &folds[0], Mode::Test, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let large = sample_episode(&index, &folds[0], Mode::Test, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(small.target_class, large.target_class);
        assert_eq!(small.query, large.query);
        assert_eq!(small.support[..], large.support[..2]);
    }
}

#[test]
fn default_synthetic_set_respects_area_bounds() {
    let cfg = SynthConfig::default();
    let index = generate_synthetic(&cfg, 0).unwrap();
    assert_eq!(index.class_names.len(), 8);
    assert_eq!(index.images.len(), 8 * 40);
    for (i, im) in index.images.iter().enumerate() {
        let s = &im.sample;
        assert_eq!((s.height, s.width), (64, 64));
        let frac = s.mask.count(s.class_of_interest) as f64 / (64.0 * 64.0);
        assert!((cfg.min_area..=cfg.max_area).contains(&frac), "image {i}: area {frac}");
        // At most two distractor classes besides the target.
        let classes: Vec<ClassId> = s.mask.classes().into_iter().filter(|c| *c != ClassId::BACKGROUND).collect();
        assert!(classes.len() <= 3);
        assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_byte_identical_per_seed() {
    assert_eq!(small_synth(11), small_synth(11));
    assert_ne!(small_synth(11), small_synth(12));
}

#[test]
fn exported_layout_round_trips() {
    let index = small_synth(6);
    let dir = tempfile::tempdir().unwrap();
    write_layout(&index, dir.path(), false).unwrap();
    let back = load_layout(dir.path(), None).unwrap();
    assert_eq!(back, index);
    // A second export into the now non-empty directory needs force.
    assert!(write_layout(&index, dir.path(), false).is_err());
    write_layout(&index, dir.path(), true).unwrap();
}

fn write_png_pair(dir: &std::path::Path, stem: &str, labels: &[u8], size: u32) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    image::RgbImage::from_pixel(size, size, image::Rgb([10, 20, 30])).save(dir.join("images").join(format!("{stem}.png"))).unwrap();
    image::GrayImage::from_raw(size, size, labels.to_vec()).unwrap().save(dir.join("masks").join(format!("{stem}.png"))).unwrap();
}

#[test]
fn a_mask_with_two_classes_is_indexed_under_both() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("classes.txt");
    std::fs::write(&table, (1..=8).map(|i| format!("c{i}\n")).collect::<String>()).unwrap();
    write_png_pair(dir.path(), "a", &[0, 3, 7, 255], 2);
    let index = load_pascal_style(&dir.path().join("images"), &dir.path().join("masks"), &table, None).unwrap();
    assert_eq!(index.images_of(ClassId(3)), &[0]);
    assert_eq!(index.images_of(ClassId(7)), &[0]);
    // 255 is the void label and reads as background.
    assert_eq!(index.images[0].sample.mask.labels, vec![0, 3, 7, 0]);
}

#[test]
fn unknown_label_and_orphans_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("classes.txt");
    std::fs::write(&table, "one\ntwo\n").unwrap();
    write_png_pair(dir.path(), "bad", &[0, 9, 0, 0], 2);
    let err = load_pascal_style(&dir.path().join("images"), &dir.path().join("masks"), &table, None).unwrap_err();
    assert!(err.to_string().contains("bad.png"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    write_png_pair(dir.path(), "ok", &[0, 1, 0, 0], 2);
    image::GrayImage::new(2, 2).save(dir.path().join("masks").join("lonely.png")).unwrap();
    let err = load_pascal_style(&dir.path().join("images"), &dir.path().join("masks"), &table, None).unwrap_err();
    assert!(err.to_string().contains("lonely.png"), "{err}");
}

#[test]
fn empty_directories_give_an_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    std::fs::write(dir.path().join("classes.txt"), "a\n").unwrap();
    assert!(load_layout(dir.path(), None).unwrap().is_empty());
}

#[test]
fn loading_resizes_masks_with_nearest_neighbour() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("classes.txt"), "a\nb\n").unwrap();
    let labels: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect();
    write_png_pair(dir.path(), "x", &labels, 4);
    let index = load_layout(dir.path(), Some((2, 2))).unwrap();
    assert_eq!(index.images[0].sample.mask.labels, vec![1, 2, 1, 2]);
    assert_eq!(index.images[0].sample.pixels.len(), 12);
}

#[test]
fn excluding_classes_drops_images_that_show_them() {
    let index = small_synth(7);
    let banned: BTreeSet<ClassId> = [ClassId(1), ClassId(2)].into();
    let sub = index.without_classes(&banned).unwrap();
    assert!(sub.images.len() < index.images.len());
    assert!(sub.images.iter().all(|im| !im.sample.mask.classes().iter().any(|c| banned.contains(c))));
}

#[test]
fn the_index_rejects_labels_beyond_the_class_table() {
    let mask = LabelMap::new(1, 2, vec![0, 5]).unwrap();
    let sample = ImageSample::new(vec![0.0; 6], mask, ClassId(5)).unwrap();
    let img = IndexedImage { name: "x".into(), sample, source: None };
    assert!(DatasetIndex::build(vec!["a".into()], vec![img]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn folds_partition_any_divisible_class_list(n_folds in 1usize..6, per in 1usize..5) {
        let classes: Vec<ClassId> = (1..=(n_folds * per) as u16).map(ClassId).collect();
        let folds = make_folds(&classes, n_folds).unwrap();
        for (i, f) in folds.iter().enumerate() {
            prop_assert_eq!(f.fold_id, i);
            prop_assert_eq!(f.test_classes.len(), per);
            prop_assert!(f.train_classes.is_disjoint(&f.test_classes));
            prop_assert_eq!(f.train_classes.len() + per, classes.len());
        }
    }

    #[test]
    fn train_mode_never_leaks_test_classes(seed in any::<u64>(), fold in 0usize..4) {
        let index = small_synth(8);
        let folds = make_folds(&index.class_ids(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let ep = sample_episode(&index, &folds[fold], Mode::Train, 1, &mut rng).unwrap();
            prop_assert!(!folds[fold].test_classes.contains(&ep.target_class));
        }
    }
}
