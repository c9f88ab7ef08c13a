//! Acceptance run: one PASS/FAIL line per criterion and a passed count;
//! `CRNET_ACCEPTANCE_STRICT=1` turns any failure into a nonzero exit. The trend criteria train desk models on the synthetic shapes
//! set; set `CRNET_ACCEPTANCE_CACHE=<dir>` to keep and reuse the trained
//! checkpoints between runs (files are keyed by the run configuration hash).

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::{random_mask, random_sample, tiny_model};
use crnet::config::ModelConfig;
use crnet::data::{
    generate_synthetic, load_layout, make_folds, sample_episode, write_layout, ClassId, DatasetIndex, FoldSplit,
    Mode, SynthConfig, PASCAL_VOC_CLASSES,
};
use crnet::eval::{evaluate_fold, fb_iou, iou, iou_accumulate, EvalConfig, EvalReport, IouAccumulator};
use crnet::kshot::{kshot_predict, make_pairs, FinetuneConfig, KshotMode};
use crnet::model::{co_occurrence_head, cross_reference, encode_pair, init_params, FeatureMap};
use crnet::refine::{init_cache, refine_step, RefinementInput};
use crnet::train::{grad_check, run_config, train, Checkpoint, ShapeSpec, TrainConfig, TrainIo};
use crnet::{Params32, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed of the synthetic benchmark used by the trend criteria.
const SYNTH_SEED: u64 = 1;
const FOLDS: usize = 4;
const TREND_EPISODES: usize = 1000;
const KSHOT_EPISODES: usize = 200;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok { Ok(detail) } else { Err(detail) }
}

fn criterion_gradients() -> Check {
    let t = Instant::now();
    let shape = ShapeSpec { channels: 8, height: 6, width: 6 };
    let mut worst: f64 = 0.0;
    for module in ["cross_reference", "condition", "foreground_pool", "co_occurrence_head", "refine"] {
        let r = grad_check(module, shape, 1e-5, 11).map_err(|e| e.to_string())?;
        if !r.passed(1e-4) {
            return Err(format!("{module}: max rel err {:.2e} over {} coords", r.max_rel_err, r.checked));
        }
        worst = worst.max(r.max_rel_err);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("max rel err {worst:.2e}, {secs:.1}s"))
}

fn criterion_symmetry() -> Check {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100u64 {
        let params = init_params::<f32>(&cfg, i).map_err(|e| e.to_string())?;
        let a = random_sample(&mut rng, 16, ClassId(1));
        let b = random_sample(&mut rng, 16, ClassId(1));
        let (fa, fb) = encode_pair(&a, &b, &params, &cfg).unwrap();
        let (gb, ga) = encode_pair(&b, &a, &params, &cfg).unwrap();
        if fa != ga || fb != gb {
            return Err(format!("encode_pair differs on pair {i}"));
        }
        let (gs, gq, gate) = cross_reference(&fa, &fb, &params, &cfg).unwrap();
        let (hq, hs, gate2) = cross_reference(&fb, &fa, &params, &cfg).unwrap();
        if gs != hs || gq != hq || gate != gate2 {
            return Err(format!("cross_reference differs on pair {i}"));
        }
        let (la, lb) = co_occurrence_head(&fa, &fb, &params, &cfg).unwrap();
        let (mb, ma) = co_occurrence_head(&fb, &fa, &params, &cfg).unwrap();
        if la != ma || lb != mb {
            return Err(format!("co_occurrence_head differs on pair {i}"));
        }
    }
    Ok("100 pairs bit-exact".into())
}

fn criterion_gates_and_caches() -> Check {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gates = 0usize;
    for i in 0..1000u64 {
        let params = init_params::<f32>(&cfg, i).unwrap();
        let h = rng.random_range(1..7);
        let scale = rng.random_range(0.1f64..10.0);
        let fs = FeatureMap::new(Tensor::uniform(&[8, h, h], -scale, scale, &mut rng)).unwrap();
        let fq = FeatureMap::new(Tensor::uniform(&[8, h, h], -scale, scale, &mut rng)).unwrap();
        let (gs, gq, gate) = cross_reference(&fs, &fq, &params, &cfg).unwrap();
        if !gate.values.iter().all(|&v| v > 0.0 && v < 1.0) {
            return Err(format!("gate outside (0,1) on call {i}"));
        }
        gates += gate.values.len();
        for (g, f) in [(&gs, &fs), (&gq, &fq)] {
            if g.data.data().iter().zip(f.data.data()).any(|(a, b)| a.abs() > b.abs()) {
                return Err(format!("|G| > |F| on call {i}"));
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..200u64 {
        let params = init_params::<f64>(&cfg, i).unwrap();
        let h = rng.random_range(2..9);
        let features = FeatureMap::new(Tensor::uniform(&[cfg.refine_input_channels(), h, h], -3.0, 3.0, &mut rng)).unwrap();
        let inp = RefinementInput { features };
        let mut cache = init_cache::<f64>(h, h);
        for _ in 0..5 {
            let (_, next) = refine_step(&inp, &cache, &params, &cfg).unwrap();
            let p = next.probs.data();
            for k in 0..h * h {
                if p[k] < 0.0 || p[h * h + k] < 0.0 {
                    return Err(format!("negative cache entry in call {i}"));
                }
                worst = worst.max((p[k] + p[h * h + k] - 1.0).abs());
            }
            cache = next;
        }
    }
    ensure(worst <= 1e-6, format!("{gates} gate entries in (0,1); cache max deviation {worst:.1e}"))
}

fn criterion_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..500 {
        let (pp, pg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = random_mask(&mut rng, 256, pp);
        let g = random_mask(&mut rng, 256, pg);
        let count = |f: &dyn Fn(bool, bool) -> bool| p.iter().zip(&g).filter(|(a, b)| f(**a, **b)).count();
        let ratio = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let fg = ratio(count(&|a, b| a && b), count(&|a, b| a || b));
        let bg = ratio(count(&|a, b| !a && !b), count(&|a, b| !a || !b));
        let acc = iou_accumulate(&p, &g, ClassId(1), IouAccumulator::new(false)).unwrap();
        if iou(&p, &g).unwrap() != fg || acc.mean_iou() != fg || fb_iou(&acc) != 0.5 * (fg + bg) {
            return Err(format!("pair {i} differs from brute force"));
        }
    }
    let gt: Vec<bool> = (0..100).map(|i| i < 50).collect();
    let half = iou(&vec![true; 100], &gt).unwrap();
    ensure(half == 0.5, format!("500 pairs exact; hand case {half}"))
}

fn criterion_protocol() -> Check {
    let ids: Vec<ClassId> = (1..=20).map(ClassId).collect();
    let folds = make_folds(&ids, 4).map_err(|e| e.to_string())?;
    let table = [
        ["aeroplane", "bicycle", "bird", "boat", "bottle"],
        ["bus", "car", "cat", "chair", "cow"],
        ["diningtable", "dog", "horse", "motorbike", "person"],
        ["potted plant", "sheep", "sofa", "train", "tv/monitor"],
    ];
    for (f, row) in folds.iter().zip(table) {
        let names: Vec<&str> = f.test_classes.iter().map(|c| PASCAL_VOC_CLASSES[c.0 as usize - 1]).collect();
        if names != row {
            return Err(format!("fold {}: {names:?}", f.fold_id));
        }
    }
    let index = generate_synthetic(&SynthConfig::default(), SYNTH_SEED).map_err(|e| e.to_string())?;
    let folds = make_folds(&index.class_ids(), FOLDS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for f in &folds {
        for n in 0..10_000 {
            let ep = sample_episode(&index, f, Mode::Train, 1, &mut rng).unwrap();
            if f.test_classes.contains(&ep.target_class) {
                return Err(format!("fold {} episode {n} leaks class {}", f.fold_id, ep.target_class));
            }
        }
    }
    for k in [2, 3, 5] {
        let support: Vec<_> = (0..k).map(|_| random_sample(&mut rng, 8, ClassId(1))).collect();
        let (a, b) = (make_pairs(&support, false).unwrap().len(), make_pairs(&support, true).unwrap().len());
        if a != k * (k - 1) || b != k * k {
            return Err(format!("k = {k}: {a} and {b} pairs"));
        }
    }
    Ok("folds verbatim; 40000 train episodes without leaks; pair counts".into())
}

/// Trained desk models shared by the trend criteria.
struct Bench {
    index: DatasetIndex,
    folds: Vec<FoldSplit>,
    full: Vec<(ModelConfig, Params32)>,
    condition_only: Vec<(ModelConfig, Params32)>,
}

fn train_or_load(model: &ModelConfig, tc: &TrainConfig, index: &DatasetIndex, split: &FoldSplit) -> Params32 {
    let cache = std::env::var_os("CRNET_ACCEPTANCE_CACHE").map(PathBuf::from);
    let mut kv = run_config(model, tc);
    kv.set("synth_seed", SYNTH_SEED.to_string());
    let path = cache.map(|d| d.join(format!("fold{}_{}.ckpt", split.fold_id, &kv.hash()[..16])));
    if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
        if let Ok(ck) = Checkpoint::<f32>::load(p) {
            return ck.params;
        }
    }
    let t = Instant::now();
    let out = train::<f32>(tc, model, index, split, TrainIo::default()).expect("training");
    eprintln!(
        "  trained fold {} (cross_reference = {}) in {:.0}s",
        split.fold_id,
        model.use_cross_reference,
        t.elapsed().as_secs_f64()
    );
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().unwrap()).ok();
        out.checkpoint(model, tc).save(&p).expect("cache checkpoint");
    }
    out.params
}

fn bench() -> Bench {
    let index = generate_synthetic(&SynthConfig::default(), SYNTH_SEED).unwrap();
    let folds = make_folds(&index.class_ids(), FOLDS).unwrap();
    let full_cfg = ModelConfig::desk();
    let cond_cfg = ModelConfig { use_cross_reference: false, ..ModelConfig::desk() };
    let mut full = Vec::new();
    let mut condition_only = Vec::new();
    for split in &folds {
        let tc = TrainConfig { fold: split.fold_id, ..TrainConfig::default() };
        full.push((full_cfg.clone(), train_or_load(&full_cfg, &tc, &index, split)));
        condition_only.push((cond_cfg.clone(), train_or_load(&cond_cfg, &tc, &index, split)));
    }
    Bench { index, folds, full, condition_only }
}

fn mean_miou(b: &Bench, models: &[(ModelConfig, Params32)], ecfg: &EvalConfig) -> Result<(f64, Vec<f64>), String> {
    let mut per = Vec::new();
    for (split, (cfg, params)) in b.folds.iter().zip(models) {
        let r: EvalReport = evaluate_fold(params, cfg, &b.index, split, ecfg).map_err(|e| e.to_string())?;
        per.push(r.mean_iou);
    }
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

fn pct(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

fn trend_config(refine_steps: usize) -> EvalConfig {
    EvalConfig { episodes: TREND_EPISODES, refine_steps, ..EvalConfig::default() }
}

fn criterion_ablation(b: &Bench) -> Check {
    let ecfg = trend_config(5);
    let (full, fp) = mean_miou(b, &b.full, &ecfg)?;
    let (cond, cp) = mean_miou(b, &b.condition_only, &ecfg)?;
    let gap = 100.0 * (full - cond);
    ensure(
        gap >= 5.0,
        format!("full {:.1} [{}] vs condition-only {:.1} [{}]: {gap:+.1} points", 100.0 * full, pct(&fp), 100.0 * cond, pct(&cp)),
    )
}

fn criterion_test_time(b: &Bench) -> Check {
    let (base, _) = mean_miou(b, &b.full, &trend_config(1))?;
    let multi_cfg = EvalConfig { scales: crnet::eval::DEFAULT_SCALES.to_vec(), ..trend_config(1) };
    let (multi, _) = mean_miou(b, &b.full, &multi_cfg)?;
    let (refined, _) = mean_miou(b, &b.full, &trend_config(5))?;
    let (dm, dr) = (100.0 * (multi - base), 100.0 * (refined - base));
    ensure(
        dm >= -0.5 && dr >= -0.5,
        format!("single/1-step {:.1}; multi-scale {dm:+.1}; 5 steps {dr:+.1}", 100.0 * base),
    )
}

fn kshot_config(k: usize, mode: KshotMode) -> EvalConfig {
    EvalConfig { episodes: KSHOT_EPISODES, k, mode, refine_steps: 5, ..EvalConfig::default() }
}

fn criterion_kshot(b: &Bench) -> Check {
    let (fusion5, _) = mean_miou(b, &b.full, &kshot_config(5, KshotMode::Fusion))?;
    let (ft5, p5) = mean_miou(b, &b.full, &kshot_config(5, KshotMode::Finetune))?;
    let (ft10, p10) = mean_miou(b, &b.full, &kshot_config(10, KshotMode::Finetune))?;
    let (cfg, params) = &b.full[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = sample_episode(&b.index, &b.folds[0], Mode::Test, 1, &mut rng).unwrap();
    let one_shot = kshot_predict(params, cfg, &ep.support, &ep.query, KshotMode::Finetune, &FinetuneConfig::default(), 5);
    let one_shot_cfg = kshot_config(1, KshotMode::Finetune).validate();
    let detail = format!(
        "5-shot fusion {:.1}, finetune {:.1} [{}]; 10-shot finetune {:.1} [{}]; k=1 finetune {}",
        100.0 * fusion5,
        100.0 * ft5,
        pct(&p5),
        100.0 * ft10,
        pct(&p10),
        if one_shot.is_err() && one_shot_cfg.is_err() { "errors" } else { "DID NOT ERROR" }
    );
    ensure(
        ft5 - fusion5 >= 0.02 && ft10 >= ft5 - 0.005 && one_shot.is_err() && one_shot_cfg.is_err(),
        detail,
    )
}

/// synth -> on-disk layout -> train 200 episodes -> eval, returning the
/// loss sequence and the evaluation report.
fn end_to_end(seed: u64) -> (Vec<[u64; 4]>, EvalReport, BTreeSet<String>) {
    let dir = tempfile::tempdir().unwrap();
    let sc = SynthConfig { instances_per_class: 12, ..SynthConfig::default() };
    write_layout(&generate_synthetic(&sc, seed).unwrap(), dir.path(), false).unwrap();
    let index = load_layout(dir.path(), Some((64, 64))).unwrap();
    let files = std::fs::read_dir(dir.path().join("images")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let split = &make_folds(&index.class_ids(), FOLDS).unwrap()[1];
    let tc = TrainConfig { episodes: 200, seed, fold: 1, ..TrainConfig::default() };
    let model = ModelConfig::desk();
    let out = train::<f32>(&tc, &model, &index, split, TrainIo::default()).unwrap();
    let losses = out
        .metrics
        .iter()
        .map(|m| [m.episode_idx as u64, m.query_ce.to_bits(), m.support_ce.to_bits(), m.aux_ce.to_bits()])
        .collect();
    let ecfg = EvalConfig { episodes: 50, seed, ..EvalConfig::default() };
    let report = evaluate_fold(&out.params, &model, &index, split, &ecfg).unwrap();
    (losses, report, files)
}

fn criterion_determinism() -> Check {
    let a = end_to_end(7);
    let b = end_to_end(7);
    ensure(
        a == b,
        format!("{} loss records and eval mIoU {:.4} {}", a.0.len(), a.1.mean_iou, if a == b { "identical" } else { "differ" }),
    )
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("PASS  {name}: {d} ({secs:.0}s)"),
        Err(d) => println!("FAIL  {name}: {d} ({secs:.0}s)"),
    }
    outcome.is_ok()
}

fn main() {
    let mut results = vec![
        run("1 gradient suite", criterion_gradients),
        run("2 symmetry suite", criterion_symmetry),
        run("3 gate/cache suite", criterion_gates_and_caches),
        run("4 metric oracle", criterion_metrics),
        run("5 protocol suite", criterion_protocol),
    ];
    let t = Instant::now();
    let b = bench();
    println!("      desk models for 4 folds ready after {:.0}s", t.elapsed().as_secs_f64());
    results.push(run("6 cross-reference ablation", || criterion_ablation(&b)));
    results.push(run("7 test-time options", || criterion_test_time(&b)));
    results.push(run("8 k-shot finetune vs fusion", || criterion_kshot(&b)));
    results.push(run("9 determinism", criterion_determinism));
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    // The report is the output; a nonzero exit on FAIL lines is opt-in.
    if passed < results.len() && std::env::var_os("CRNET_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
