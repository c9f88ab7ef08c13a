//! Query prediction: per-pixel probabilities, support fusion and
//! multi-scale testing.

use crate::autograd::kernels::bilinear_forward;
use crate::autograd::Graph;
use crate::config::ModelConfig;
use crate::data::{Episode, ImageSample};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::train::pair_nodes;

pub const DEFAULT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

/// Background and foreground probabilities of one query, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub background: Vec<f64>,
    pub foreground: Vec<f64>,
}

impl ProbMap {
    /// Per-pixel argmax; background wins ties.
    pub fn binarize(&self) -> Vec<bool> {
        self.foreground.iter().zip(&self.background).map(|(f, b)| f > b).collect()
    }

    /// Element-wise mean of maps of equal size, summed in the given order.
    pub fn mean(maps: &[ProbMap]) -> Result<ProbMap> {
        let first = maps.first().ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
        let n = first.background.len();
        let mut bg = vec![0.0; n];
        let mut fg = vec![0.0; n];
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape("probability maps differ in size".into()));
            }
            for i in 0..n {
                bg[i] += m.background[i];
                fg[i] += m.foreground[i];
            }
        }
        let k = maps.len() as f64;
        bg.iter_mut().for_each(|v| *v /= k);
        fg.iter_mut().for_each(|v| *v /= k);
        Ok(ProbMap { height: first.height, width: first.width, background: bg, foreground: fg })
    }

    fn resized(&self, height: usize, width: usize) -> ProbMap {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut planes = self.background.clone();
        planes.extend_from_slice(&self.foreground);
        let mut out = vec![0.0; 2 * height * width];
        bilinear_forward(&planes, 2, (self.height, self.width), (height, width), &mut out);
        let fg = out.split_off(height * width);
        ProbMap { height, width, background: out, foreground: fg }
    }
}

/// Query-branch probabilities for one support/query pair. The query's
/// mask is never read.
pub fn pair_probabilities<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    support: &ImageSample,
    query: &ImageSample,
    steps: usize,
) -> Result<ProbMap> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, &[]);
    let nodes = pair_nodes(&mut g, &p, cfg, support, query, false, steps)?;
    let lq = g.select(nodes.logits, 1)?;
    let probs = g.softmax_channels(lq)?;
    let v = g.value(probs).data();
    let plane = query.height * query.width;
    Ok(ProbMap {
        height: query.height,
        width: query.width,
        background: v[..plane].iter().map(|x| x.as_f64()).collect(),
        foreground: v[plane..2 * plane].iter().map(|x| x.as_f64()).collect(),
    })
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidInput("at least one test scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidInput(format!("test scale must be positive, got {s}")));
    }
    Ok(())
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

/// Probabilities averaged over `supports` and `scales`. At each scale both
/// images are resized and the query probabilities are bilinearly resized
/// back to the original query size.
pub fn predict_probabilities<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    supports: &[ImageSample],
    query: &ImageSample,
    scales: &[f64],
    steps: usize,
) -> Result<ProbMap> {
    check_scales(scales)?;
    if supports.is_empty() {
        return Err(Error::InvalidInput("prediction needs at least one support".into()));
    }
    let mut maps = Vec::with_capacity(supports.len() * scales.len());
    for support in supports {
        for &s in scales {
            let (h, w) = (scaled(query.height, s), scaled(query.width, s));
            let q = query.resized(h, w);
            let sp = support.resized(h, w);
            maps.push(pair_probabilities(params, cfg, &sp, &q, steps)?.resized(query.height, query.width));
        }
    }
    ProbMap::mean(&maps)
}

/// Binary query mask fused over the episode's supports and `scales`.
pub fn multiscale_predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    episode: &Episode,
    scales: &[f64],
    steps: usize,
) -> Result<Vec<bool>> {
    Ok(predict_probabilities(params, cfg, &episode.support, &episode.query, scales, steps)?.binarize())
}
