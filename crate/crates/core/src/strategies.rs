//! Batch selection rules. Every selector returns `min(b, |unlabeled|)` distinct
//! ids drawn from the unlabeled pool; ties always go to the smaller id.

use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean_of, probabilities, row_entropy};
use crate::dataio::TaskType;
use crate::error::{Error, Result};
use crate::seeding::Rng;
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tyger,
    Random,
    Entropy,
    McDropout,
    Coreset,
    Badge,
    KMeansPP,
    DiSep,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Tyger,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::McDropout,
        Strategy::Coreset,
        Strategy::Badge,
        Strategy::KMeansPP,
        Strategy::DiSep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tyger => "tyger",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::McDropout => "mcdropout",
            Strategy::Coreset => "coreset",
            Strategy::Badge => "badge",
            Strategy::KMeansPP => "kmeanspp",
            Strategy::DiSep => "disep",
        }
    }

    /// Whether a querying module is trained before selecting.
    pub fn needs_querying_module(self) -> bool {
        matches!(self, Strategy::Tyger | Strategy::KMeansPP | Strategy::DiSep)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Task-learner outputs over the pools; rows follow the id order of each pool.
#[derive(Debug, Clone, Default)]
pub struct TaskView {
    pub unlabeled_logits: Array2<f64>,
    pub unlabeled_pooled: Array2<f64>,
    pub labeled_pooled: Array2<f64>,
    /// Dropout passes over the unlabeled pool.
    pub mc_passes: Vec<Array2<f64>>,
}

/// Inputs shared by every selector. Optional parts are filled by the driver
/// according to the strategy.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    /// Ascending unlabeled ids.
    pub unlabeled: &'a [usize],
    pub b: usize,
    pub seed: u64,
    pub task: TaskType,
    /// Discriminator scores aligned with `unlabeled`.
    pub disc_scores: Option<&'a [f64]>,
    /// Querying-module embeddings aligned with `unlabeled`.
    pub embeddings: Option<&'a Array2<f64>>,
    pub task_view: Option<&'a TaskView>,
}

fn missing(what: &str) -> Error {
    Error::Invalid(format!("selection needs {what}"))
}

pub fn select(strategy: Strategy, ctx: &SelectionContext) -> Result<Vec<usize>> {
    let mut rng = crate::seeding::stream(ctx.seed, strategy.name(), 0);
    let view = || ctx.task_view.ok_or_else(|| missing("task-learner outputs"));
    match strategy {
        Strategy::Tyger | Strategy::DiSep => {
            let scores = ctx.disc_scores.ok_or_else(|| missing("discriminator scores"))?;
            Ok(select_tyger(ctx.unlabeled, scores, ctx.b))
        }
        Strategy::Random => Ok(select_random(ctx.unlabeled, ctx.b, &mut rng)),
        Strategy::Entropy => select_entropy(ctx.unlabeled, &view()?.unlabeled_logits, ctx.b, ctx.task),
        Strategy::McDropout => Ok(select_mc_dropout(ctx.unlabeled, &view()?.mc_passes, ctx.b, ctx.task)),
        Strategy::Coreset => {
            let v = view()?;
            Ok(select_coreset(ctx.unlabeled, &v.unlabeled_pooled, &v.labeled_pooled, ctx.b))
        }
        Strategy::Badge => {
            let v = view()?;
            let emb = badge_embeddings(&v.unlabeled_pooled, &v.unlabeled_logits, ctx.task);
            Ok(select_kmeanspp(ctx.unlabeled, &emb, ctx.b, &mut rng))
        }
        Strategy::KMeansPP => {
            let emb = ctx.embeddings.ok_or_else(|| missing("querying-module embeddings"))?;
            Ok(select_kmeanspp(ctx.unlabeled, emb, ctx.b, &mut rng))
        }
    }
}

/// Ids of the `b` largest scores; equal scores go to the smaller id.
pub fn top_b(ids: &[usize], scores: &[f64], b: usize) -> Vec<usize> {
    assert_eq!(ids.len(), scores.len());
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(ids[x].cmp(&ids[y])));
    order.into_iter().take(b).map(|i| ids[i]).collect()
}

/// The `b` unlabeled molecules the discriminator deems least like the labeled pool.
pub fn select_tyger(unlabeled: &[usize], scores: &[f64], b: usize) -> Vec<usize> {
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    top_b(unlabeled, &neg, b)
}

pub fn select_random(unlabeled: &[usize], b: usize, rng: &mut Rng) -> Vec<usize> {
    unlabeled
        .choose_multiple(rng, b.min(unlabeled.len()))
        .copied()
        .collect()
}

/// Highest mean per-label entropy of the sigmoid outputs.
pub fn select_entropy(unlabeled: &[usize], logits: &Array2<f64>, b: usize, task: TaskType) -> Result<Vec<usize>> {
    if !task.is_classification() {
        return Err(Error::TaskTypeUnsupported {
            method: "entropy".into(),
            task: task.name().into(),
        });
    }
    Ok(top_b(unlabeled, &row_entropy(&probabilities(logits)), b))
}

/// Uncertainty over dropout passes: entropy of the mean probability for
/// classification, mean predictive variance for regression.
pub fn mc_dropout_uncertainty(passes: &[Array2<f64>], task: TaskType) -> Vec<f64> {
    assert!(!passes.is_empty(), "at least one dropout pass");
    if task.is_classification() {
        let probs: Vec<Array2<f64>> = passes.iter().map(probabilities).collect();
        row_entropy(&mean_of(&probs))
    } else {
        let mean = mean_of(passes);
        let k = passes.len() as f64;
        let mut var = Array2::<f64>::zeros(mean.dim());
        for p in passes {
            let d = p - &mean;
            var += &(&d * &d);
        }
        var.mapv_inplace(|v| v / k);
        var.rows()
            .into_iter()
            .map(|r| r.sum() / r.len() as f64)
            .collect()
    }
}

pub fn select_mc_dropout(unlabeled: &[usize], passes: &[Array2<f64>], b: usize, task: TaskType) -> Vec<usize> {
    top_b(unlabeled, &mc_dropout_uncertainty(passes, task), b)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-center greedy: repeatedly take the unlabeled point farthest (Euclidean) from
/// everything labeled or already picked.
pub fn select_coreset(
    unlabeled: &[usize],
    unlabeled_emb: &Array2<f64>,
    labeled_emb: &Array2<f64>,
    b: usize,
) -> Vec<usize> {
    let n = unlabeled.len();
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| {
            labeled_emb
                .rows()
                .into_iter()
                .map(|l| sq_dist(unlabeled_emb.row(i), l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut picked = vec![false; n];
    let mut out = Vec::with_capacity(b.min(n));
    for _ in 0..b.min(n) {
        let best = (0..n)
            .filter(|&i| !picked[i])
            .max_by(|&x, &y| min_d[x].total_cmp(&min_d[y]).then(unlabeled[y].cmp(&unlabeled[x])))
            .expect("unpicked point remains");
        picked[best] = true;
        out.push(unlabeled[best]);
        for i in 0..n {
            if !picked[i] {
                min_d[i] = min_d[i].min(sq_dist(unlabeled_emb.row(i), unlabeled_emb.row(best)));
            }
        }
    }
    out
}

/// Sampling probabilities of the next k-means++ center given the chosen rows:
/// proportional to the squared distance to the nearest chosen center. Chosen
/// rows get zero. When every distance is zero the result is all zeros.
pub fn kmeanspp_weights(points: &Array2<f64>, chosen: &[usize]) -> Vec<f64> {
    let n = points.nrows();
    let d2: Vec<f64> = (0..n)
        .map(|i| {
            if chosen.contains(&i) {
                0.0
            } else {
                chosen
                    .iter()
                    .map(|&c| sq_dist(points.row(i), points.row(c)))
                    .fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let total: f64 = d2.iter().sum();
    if total > 0.0 {
        d2.iter().map(|d| d / total).collect()
    } else {
        vec![0.0; n]
    }
}

/// k-means++ seeding: `k` distinct row indices. The first is uniform; later
/// ones are D^2-weighted, falling back to the lowest unpicked index when all
/// remaining distances vanish.
pub fn kmeanspp_seeding(points: &Array2<f64>, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.nrows();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut picked = vec![false; n];
    picked[chosen[0]] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    d2[chosen[0]] = 0.0;
    while chosen.len() < k {
        let total: f64 = (0..n).filter(|&i| !picked[i]).map(|i| d2[i]).sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !picked[i] && d2[i] > 0.0) {
                pick = Some(i);
                if r < d2[i] {
                    break;
                }
                r -= d2[i];
            }
            pick.expect("positive weight exists")
        } else {
            (0..n).find(|&i| !picked[i]).expect("unpicked point remains")
        };
        picked[next] = true;
        chosen.push(next);
        for i in 0..n {
            if !picked[i] {
                d2[i] = d2[i].min(sq_dist(points.row(i), points.row(next)));
            } else {
                d2[i] = 0.0;
            }
        }
    }
    chosen
}

/// Seeds `b` centers over the unlabeled embeddings; each center is a data point
/// and so is its own nearest member.
pub fn select_kmeanspp(unlabeled: &[usize], embeddings: &Array2<f64>, b: usize, rng: &mut Rng) -> Vec<usize> {
    kmeanspp_seeding(embeddings, b, rng)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect()
}

/// Gradient embedding of the task loss with respect to the output weights at
/// the hallucinated label. Classification: `(sigma(out) - yhat) / n` outer the
/// pooled features, with `yhat` the 0.5-threshold of each sigmoid. Regression
/// returns the pooled features, since that gradient vanishes at `yhat = out`.
pub fn badge_embeddings(pooled: &Array2<f64>, logits: &Array2<f64>, task: TaskType) -> Array2<f64> {
    if !task.is_classification() {
        return pooled.clone();
    }
    let (rows, d) = pooled.dim();
    let n = logits.ncols();
    let mut out = Array2::zeros((rows, d * n));
    for r in 0..rows {
        for j in 0..n {
            let p = sigmoid(logits[[r, j]]);
            let yhat = if p >= 0.5 { 1.0 } else { 0.0 };
            let g = (p - yhat) / n as f64;
            for k in 0..d {
                out[[r, k * n + j]] = g * pooled[[r, k]];
            }
        }
    }
    out
}
