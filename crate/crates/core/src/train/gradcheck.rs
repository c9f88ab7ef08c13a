//! Central finite-difference verification of analytic gradients.
//!
//! Each check builds a scalar `sum(output * R)` for a fixed random `R` and
//! compares the reverse-mode gradient against `(f(x+e) - f(x-e)) / 2e` on
//! randomly chosen input and parameter coordinates, in `f64`.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{co_occurrence_nodes, condition_nodes, cross_reference_nodes, init_params};
use crate::params::{ModelParams, ParamBuilder, ParamNodes};
use crate::refine::refine_nodes;
use crate::tensor::Tensor;

/// Input geometry of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub module: String,
    pub checked: usize,
    /// Coordinates where the two step sizes disagree (an activation kink
    /// lies inside the difference stencil); excluded from the maximum.
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance && self.skipped_nonsmooth * 10 <= self.checked
    }
}

pub const MODULES: [&str; 6] = ["linear", "cross_reference", "condition", "foreground_pool", "co_occurrence_head", "refine"];

type Builder<'a> = dyn Fn(&mut Graph<f64>, &ParamNodes, &[NodeId]) -> Result<NodeId> + 'a;

/// Tiny model whose encoder output has `channels` channels.
pub fn tiny_config(channels: usize) -> ModelConfig {
    let half = (channels / 2).max(1);
    ModelConfig {
        encoder_widths: [4, 4, half, channels - half],
        width: 6,
        fc_reduction: 4,
        aspp_rates: vec![1, 2],
        refine_width: 5,
        cache_width: 3,
        ..ModelConfig::default()
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Checker<'a> {
    build: &'a Builder<'a>,
    probe: Option<Tensor<f64>>,
}

impl Checker<'_> {
    fn loss(&mut self, params: &ModelParams<f64>, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, &[]);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (self.build)(&mut g, &p, &ids)?;
        let probe = self
            .probe
            .get_or_insert_with(|| Tensor::uniform(g.value(out).shape(), -1.0, 1.0, rng))
            .clone();
        let l = g.dot_const(out, probe)?;
        Ok(g.value(l).data()[0])
    }
}

fn run_check(
    module: &str,
    params: ModelParams<f64>,
    inputs: Vec<Tensor<f64>>,
    build: &Builder<'_>,
    eps: f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradReport> {
    let mut checker = Checker { build, probe: None };
    checker.loss(&params, &inputs, rng)?;
    let probe = checker.probe.clone().expect("set by first evaluation");

    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &p, &ids)?;
    let l = g.dot_const(out, probe)?;
    let grads = g.backward(l)?;

    let mut report = GradReport {
        module: module.to_string(),
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut consider = |label: String, analytic: f64, f: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        let full = (f(eps)? - f(-eps)?) / (2.0 * eps);
        let half = (f(eps / 2.0)? - f(-eps / 2.0)?) / eps;
        if relative_error(full, half) > 1e-3 {
            report.skipped_nonsmooth += 1;
            return Ok(());
        }
        report.checked += 1;
        let err = relative_error(analytic, full);
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = format!("{label}: analytic {analytic:.6e} numeric {full:.6e}");
        }
        Ok(())
    };

    for (i, t) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.get(ids[i]).unwrap_or(&zero);
        let picks = sample_indices(rng, t.len(), per_tensor.min(t.len())).into_vec();
        for j in picks {
            let mut f = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += delta;
                checker.loss(&params, &moved, &mut ChaCha8Rng::seed_from_u64(0))
            };
            consider(format!("input{i}[{j}]"), analytic.data()[j], &mut f)?;
        }
    }
    for (name, t) in params.iter() {
        let id = p.get(name)?;
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.get(id).unwrap_or(&zero);
        let picks = sample_indices(rng, t.len(), per_tensor.min(t.len())).into_vec();
        for j in picks {
            let mut f = |delta: f64| {
                let mut moved = params.clone();
                moved.get_mut(name).expect("present").data_mut()[j] += delta;
                checker.loss(&moved, &inputs, &mut ChaCha8Rng::seed_from_u64(0))
            };
            consider(format!("{name}[{j}]"), analytic.data()[j], &mut f)?;
        }
    }
    Ok(report)
}

fn only_groups(params: ModelParams<f64>, groups: &[&str]) -> ModelParams<f64> {
    let mut out = ModelParams::default();
    for (name, t) in params.iter() {
        if groups.contains(&crate::params::group_of(name)) {
            out.insert(name.to_string(), t.clone()).expect("unique names");
        }
    }
    out
}

/// Randomise biases too, so zero-initialised biases do not hide errors.
fn jitter(mut params: ModelParams<f64>, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    params
}

/// Finite-difference check of one module on random inputs and weights.
pub fn grad_check(module: &str, shape: ShapeSpec, eps: f64, seed: u64) -> Result<GradReport> {
    let ShapeSpec { channels: c, height: h, width: w } = shape;
    if c < 2 || h == 0 || w == 0 {
        return Err(Error::InvalidInput("grad_check needs channels >= 2 and a non-empty grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(c);
    let all = || init_params::<f64>(&cfg, seed);
    let per_tensor = 12;
    match module {
        "linear" => {
            let mut b = ParamBuilder::<f64, _>::new(&mut rng);
            b.linear("decoder.probe", 3, c)?;
            let params = b.finish();
            let x = Tensor::uniform(&[2, c], -1.0, 1.0, &mut rng);
            let build = |g: &mut Graph<f64>, p: &ParamNodes, ids: &[NodeId]| {
                crate::model::layers::linear(g, p, "decoder.probe", ids[0])
            };
            run_check(module, params, vec![x], &build, eps, per_tensor, &mut rng)
        }
        "cross_reference" => {
            let params = jitter(only_groups(all()?, &["cross_reference"]), &mut rng);
            let x = Tensor::uniform(&[2, c, h, w], -1.0, 1.0, &mut rng);
            let build = |g: &mut Graph<f64>, p: &ParamNodes, ids: &[NodeId]| {
                cross_reference_nodes(g, p, &cfg, ids[0]).map(|(gated, _)| gated)
            };
            run_check(module, params, vec![x], &build, eps, per_tensor, &mut rng)
        }
        "co_occurrence_head" => {
            let params = jitter(only_groups(all()?, &["decoder"]), &mut rng);
            let x = Tensor::uniform(&[2, c, h, w], -1.0, 1.0, &mut rng);
            let build = |g: &mut Graph<f64>, p: &ParamNodes, ids: &[NodeId]| co_occurrence_nodes(g, p, &cfg, ids[0]);
            run_check(module, params, vec![x], &build, eps, per_tensor, &mut rng)
        }
        "condition" => {
            let params = jitter(only_groups(all()?, &["condition"]), &mut rng);
            let x = Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut rng);
            let v = Tensor::uniform(&[1, c], -1.0, 1.0, &mut rng);
            let build = |g: &mut Graph<f64>, p: &ParamNodes, ids: &[NodeId]| {
                condition_nodes(g, p, &cfg, ids[0], Some(ids[1]))
            };
            run_check(module, params, vec![x, v], &build, eps, per_tensor, &mut rng)
        }
        "foreground_pool" => {
            let x = Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut rng);
            let mut mask: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            mask[0] = 1.0;
            let count: f64 = mask.iter().sum();
            let weights: Vec<f64> = mask.iter().map(|m| m / count).collect();
            let build = move |g: &mut Graph<f64>, _: &ParamNodes, ids: &[NodeId]| {
                crate::model::foreground_pool_nodes(g, ids[0], weights.clone())
            };
            run_check(module, ModelParams::default(), vec![x], &build, eps, per_tensor, &mut rng)
        }
        "refine" => {
            let params = jitter(only_groups(all()?, &["refinement"]), &mut rng);
            let x = Tensor::uniform(&[1, cfg.refine_input_channels(), h, w], -1.0, 1.0, &mut rng);
            let build = |g: &mut Graph<f64>, p: &ParamNodes, ids: &[NodeId]| {
                refine_nodes(g, p, &cfg, ids[0], 2).map(|(logits, _)| logits)
            };
            run_check(module, params, vec![x], &build, eps, per_tensor, &mut rng)
        }
        other => Err(Error::InvalidInput(format!("unknown module {other:?}; expected one of {MODULES:?}"))),
    }
}
