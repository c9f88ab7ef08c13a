use serde::{Deserialize, Serialize};

use super::forward::{EpisodeOutputs, PairNodes};
use crate::autograd::{Graph, NodeId};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative weights of the three supervised heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub query: f64,
    pub support: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { query: 1.0, support: 1.0, aux: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub query_ce: f64,
    pub support_ce: f64,
    /// Mean of the support and query co-occurrence head losses.
    pub aux_ce: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.query_ce, self.support_ce, self.aux_ce, self.total].iter().all(|v| v.is_finite())
    }
}

/// Loss terms recorded on the graph.
pub struct LossNodes {
    pub total: NodeId,
    pub query_ce: NodeId,
    pub support_ce: NodeId,
    pub aux_ce: Option<NodeId>,
}

/// Binary per-pixel targets of (support, query), each `H*W`.
pub fn pair_targets(episode: &Episode) -> Result<(Vec<usize>, Vec<usize>)> {
    let support = episode
        .support
        .first()
        .ok_or_else(|| Error::InvalidInput("episode has no support".into()))?;
    Ok((support.target(), episode.query.target()))
}

pub fn loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &PairNodes,
    support_target: &[usize],
    query_target: &[usize],
    weights: LossWeights,
) -> Result<LossNodes> {
    let ls = g.select(nodes.logits, 0)?;
    let lq = g.select(nodes.logits, 1)?;
    let support_ce = g.cross_entropy(ls, support_target.to_vec())?;
    let query_ce = g.cross_entropy(lq, query_target.to_vec())?;
    let mut terms = vec![(query_ce, T::of(weights.query)), (support_ce, T::of(weights.support))];
    let aux_ce = match nodes.aux {
        Some(a) => {
            let both: Vec<usize> = support_target.iter().chain(query_target).copied().collect();
            let ce = g.cross_entropy(a, both)?;
            terms.push((ce, T::of(weights.aux)));
            Some(ce)
        }
        None => None,
    };
    let total = g.weighted_sum(&terms)?;
    Ok(LossNodes { total, query_ce, support_ce, aux_ce })
}

pub fn breakdown<T: Scalar>(g: &Graph<T>, l: &LossNodes, weights: LossWeights) -> LossBreakdown {
    let v = |id: NodeId| g.value(id).data()[0].as_f64();
    LossBreakdown {
        query_ce: v(l.query_ce),
        support_ce: v(l.support_ce),
        aux_ce: l.aux_ce.map(v).unwrap_or(0.0),
        total: v(l.total),
        weights,
    }
}

fn ce_of<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(logits.shape());
    let mut g = Graph::new();
    let x = g.input(logits.clone().reshape(&shape)?);
    let ce = g.cross_entropy(x, target.to_vec())?;
    Ok(g.value(ce).data()[0].as_f64())
}

/// Loss of already computed outputs.
pub fn compute_loss<T: Scalar>(
    outputs: &EpisodeOutputs<T>,
    episode: &Episode,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let (ts, tq) = pair_targets(episode)?;
    let query_ce = ce_of(&outputs.logits_q, &tq)?;
    let support_ce = ce_of(&outputs.logits_s, &ts)?;
    let aux_ce = match (&outputs.aux_logits_s, &outputs.aux_logits_q) {
        (Some(s), Some(q)) => 0.5 * (ce_of(s, &ts)? + ce_of(q, &tq)?),
        _ => 0.0,
    };
    let total = weights.query * query_ce + weights.support * support_ce + weights.aux * aux_ce;
    Ok(LossBreakdown { query_ce, support_ce, aux_ce, total, weights })
}
