//! Evaluation metrics and batch diagnostics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::TaskType;
use crate::error::{Error, Result};
use crate::fingerprint::{tanimoto, ContrastSets, Fingerprint};
use crate::tensor::sigmoid;

pub const AUROC: &str = "auroc";
pub const MSE: &str = "mse";
pub const SIMR: &str = "simr";
pub const MTANISIM: &str = "mtanisim";
pub const ENT: &str = "ent";
pub const MC_ENT: &str = "mc_ent";
pub const LOSS: &str = "loss";
pub const GNORM: &str = "gnorm";

/// Mann-Whitney AUROC of one label; ties count one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let rank_sum: f64 = (0..labels.len())
        .filter(|&k| labels[k] == 1.0)
        .map(|k| ranks[k])
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Unweighted mean AUROC over label columns, skipping single-class columns.
pub fn auroc_multi(scores: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    assert_eq!(scores.dim(), labels.dim());
    let mut values = Vec::new();
    for j in 0..scores.ncols() {
        let s = scores.column(j).to_vec();
        let y = labels.column(j).to_vec();
        match auroc(&s, &y) {
            Ok(v) => values.push(v),
            Err(Error::SingleClass) => log::warn!("label {j} has a single class; skipped"),
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn mse(predictions: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    assert_eq!(predictions.dim(), labels.dim());
    let n = predictions.len().max(1) as f64;
    predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n
}

fn cosine_matrix(embeddings: &Array2<f64>) -> Array2<f64> {
    let mut unit = embeddings.clone();
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    unit.dot(&unit.t())
}

/// Ratio of summed per-molecule mean negative-set cosine to summed per-molecule
/// mean positive-set cosine. Molecules with an empty set are skipped.
pub fn sim_ratio(embeddings: &Array2<f64>, sets: &ContrastSets) -> Result<f64> {
    assert_eq!(embeddings.nrows(), sets.len());
    let cos = cosine_matrix(embeddings);
    let (mut neg_total, mut pos_total, mut skipped) = (0.0, 0.0, 0);
    for i in 0..sets.len() {
        let pos = sets.positives(i);
        let neg = sets.negatives(i);
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            continue;
        }
        pos_total += pos.iter().map(|&j| cos[[i, j]]).sum::<f64>() / pos.len() as f64;
        neg_total += neg.iter().map(|&j| cos[[i, j]]).sum::<f64>() / neg.len() as f64;
    }
    if skipped > 0 {
        log::warn!("{skipped} molecules without both positive and negative partners skipped");
    }
    if skipped == sets.len() {
        return Err(Error::EmptySet);
    }
    Ok(neg_total / pos_total)
}

/// Mean Tanimoto similarity over unordered pairs.
pub fn mean_tanimoto(fingerprints: &[&Fingerprint]) -> Result<f64> {
    let n = fingerprints.len();
    if n < 2 {
        return Err(Error::EmptyPairSet);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += tanimoto(fingerprints[i], fingerprints[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Mean binary entropy across the columns of each row of probabilities.
pub fn row_entropy(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&p| binary_entropy(p)).sum::<f64>() / r.len() as f64)
        .collect()
}

pub fn probabilities(logits: &Array2<f64>) -> Array2<f64> {
    logits.mapv(sigmoid)
}

/// Elementwise mean over several equally shaped matrices.
pub fn mean_of(passes: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = Array2::zeros(passes[0].dim());
    for p in passes {
        acc += p;
    }
    acc / passes.len() as f64
}

/// Norm of the per-molecule loss gradient with respect to the output-layer
/// weight matrix. For a linear head the gradient is the outer product of the
/// pooled features with the output residual.
pub fn output_grad_norms(
    pooled: &Array2<f64>,
    predictions: &Array2<f64>,
    labels: &Array2<f64>,
    task: TaskType,
) -> Vec<f64> {
    let n = predictions.ncols() as f64;
    (0..pooled.nrows())
        .map(|i| {
            let phi = pooled.row(i);
            let residual: f64 = predictions
                .row(i)
                .iter()
                .zip(labels.row(i))
                .map(|(&out, &y)| {
                    let r = if task.is_classification() {
                        (sigmoid(out) - y) / n
                    } else {
                        2.0 * (out - y) / n
                    };
                    r * r
                })
                .sum();
            phi.dot(&phi).sqrt() * residual.sqrt()
        })
        .collect()
}

pub fn task_loss_value(predictions: &Array2<f64>, labels: &Array2<f64>, task: TaskType) -> f64 {
    if task.is_classification() {
        let n = predictions.len().max(1) as f64;
        predictions
            .iter()
            .zip(labels)
            .map(|(&x, &y)| crate::tensor::softplus(x) - y * x)
            .sum::<f64>()
            / n
    } else {
        mse(predictions, labels)
    }
}

/// Informativeness diagnostics of one selected batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Informativeness {
    pub ent: Option<f64>,
    pub mc_ent: Option<f64>,
    pub loss: f64,
    pub gnorm: Option<f64>,
}

/// `logits` is the deterministic pass, `mc_logits` the dropout passes, all with
/// one row per selected molecule. Entropy terms and GNorm require classification.
pub fn informativeness(
    logits: &Array2<f64>,
    mc_logits: &[Array2<f64>],
    pooled: &Array2<f64>,
    labels: &Array2<f64>,
    task: TaskType,
) -> Informativeness {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let loss = task_loss_value(logits, labels, task);
    if !task.is_classification() {
        return Informativeness {
            ent: None,
            mc_ent: None,
            loss,
            gnorm: None,
        };
    }
    let ent = mean(row_entropy(&probabilities(logits)));
    let mc_ent = (!mc_logits.is_empty()).then(|| {
        let probs: Vec<Array2<f64>> = mc_logits.iter().map(probabilities).collect();
        mean(row_entropy(&mean_of(&probs)))
    });
    let gnorm = mean(output_grad_norms(pooled, logits, labels, task));
    Informativeness {
        ent: Some(ent),
        mc_ent,
        loss,
        gnorm: Some(gnorm),
    }
}
