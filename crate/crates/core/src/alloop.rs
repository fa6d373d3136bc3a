//! Round-by-round driver: querying-module training, selection, pool update,
//! task-learner retraining with validation-based model selection, evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, Informativeness};
use crate::chemgraph::{build_vocabulary, TokenSequence, Vocabulary};
use crate::dataio::{annotate_and_update, init_pools, query_size, Dataset, DatasetSplit, PoolState, TaskType};
use crate::error::{Error, Result};
use crate::fingerprint::{self, contrast_sets, ContrastSets, Fingerprint, SimilarityMatrix};
use crate::nets::{Fwd, GraphBatch, MolFeatures, NetConfig, QueryingModule, TaskModel, TokenBatch};
use crate::objectives::{self, LossParts, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{c, Scalar};
use crate::seeding::{self, Rng};
use crate::strategies::{self, SelectionContext, Strategy, TaskView};
use crate::tensor::{Mat, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub rounds: usize,
    pub batch_fraction: f64,
    pub init_fraction: f64,
    pub query_epochs: usize,
    pub query_batch: usize,
    pub query_lr: f64,
    pub task_epochs: usize,
    pub task_batch: usize,
    pub task_lr: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub use_know: bool,
    pub use_feed: bool,
    /// Train the discriminator only after the translator has finished.
    pub disep: bool,
    /// Quartile (1..=3) of pairwise similarity used as the positive threshold.
    pub quartile: u8,
    pub mc_passes: usize,
    pub fp_radius: usize,
    pub fp_bits: usize,
    pub matrix_cap: usize,
    /// Rows per forward pass at evaluation time.
    pub eval_chunk: usize,
    /// Per-round SimR, mTaniSim and informativeness of the selected batch.
    pub diagnostics: bool,
    /// Record wall-clock seconds per round; off keeps records byte-stable.
    pub record_seconds: bool,
    pub weights: LossWeights,
    pub net: NetConfig,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            batch_fraction: 0.04,
            init_fraction: 0.10,
            query_epochs: 50,
            query_batch: 128,
            query_lr: 5e-4,
            task_epochs: 50,
            task_batch: 128,
            task_lr: 1e-3,
            strategy: Strategy::Tyger,
            seed: 0,
            use_know: true,
            use_feed: true,
            disep: false,
            quartile: 3,
            mc_passes: 20,
            fp_radius: fingerprint::DEFAULT_RADIUS,
            fp_bits: fingerprint::DEFAULT_NBITS,
            matrix_cap: fingerprint::DEFAULT_MATRIX_CAP,
            eval_chunk: 256,
            diagnostics: true,
            record_seconds: false,
            weights: LossWeights::default(),
            net: NetConfig::default(),
        }
    }
}

impl ALConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.batch_fraction) || !open(self.init_fraction) {
            return Err(Error::Config("fractions must lie in (0, 1)".into()));
        }
        if self.rounds as f64 * self.batch_fraction + self.init_fraction > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "{} rounds of {} plus {} initial exceed the training set",
                self.rounds, self.batch_fraction, self.init_fraction
            )));
        }
        if self.query_batch < 2 || self.task_batch == 0 {
            return Err(Error::Config("batch sizes too small".into()));
        }
        if !(self.query_lr > 0.0 && self.task_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(1..=3).contains(&self.quartile) {
            return Err(Error::Config(format!("quartile {} not in 1..=3", self.quartile)));
        }
        if self.strategy == Strategy::McDropout && self.mc_passes == 0 {
            return Err(Error::Config("mcdropout needs at least one pass".into()));
        }
        self.net.validate()?;
        self.weights.validate(self.net.gine_layers)
    }

    /// Loss weights after applying the variant flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_know {
            w.lambda_know = 0.0;
        }
        if !self.use_feed {
            w.lambda_feed = 0.0;
        }
        w
    }

    /// Discriminator training is deferred for DiSep or when the flag is set.
    pub fn deferred_discriminator(&self) -> bool {
        self.disep || self.strategy == Strategy::DiSep
    }

    /// Short content hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Everything derived once per dataset and split: features, token sequences,
/// fingerprints, the training similarity matrix and its contrast sets.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub features: Vec<MolFeatures<T>>,
    pub vocab: Vocabulary,
    pub tokens: Vec<TokenSequence>,
    pub fingerprints: Vec<Fingerprint>,
    /// Dataset id to position in `split.train`.
    pub train_pos: Vec<Option<usize>>,
    pub similarity: SimilarityMatrix,
    pub contrast: ContrastSets,
    pub dataset_hash: String,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(dataset: Dataset, split: DatasetSplit, cfg: &ALConfig) -> Result<Self> {
        if split.train.is_empty() || split.test.is_empty() {
            return Err(Error::Invalid("split needs non-empty train and test folds".into()));
        }
        let features = crate::nets::featurize_all(&dataset.graphs);
        let train_smiles: Vec<&str> = split.train.iter().map(|&i| dataset.records[i].smiles.as_str()).collect();
        let vocab = build_vocabulary(&train_smiles)?;
        let max_tokens = cfg.net.max_len + 1;
        let tokens = dataset
            .records
            .iter()
            .map(|r| {
                let mut seq = vocab.encode_smiles(&r.smiles)?;
                if seq.len() > max_tokens {
                    seq.ids.truncate(max_tokens - 1);
                    seq.ids.push(vocab.eos_id());
                }
                Ok(seq)
            })
            .collect::<Result<Vec<_>>>()?;
        let fingerprints: Vec<Fingerprint> = dataset
            .graphs
            .iter()
            .map(|g| fingerprint::ecfp(g, cfg.fp_radius, cfg.fp_bits))
            .collect();
        let mut train_pos = vec![None; dataset.len()];
        for (p, &i) in split.train.iter().enumerate() {
            train_pos[i] = Some(p);
        }
        let train_fps: Vec<Fingerprint> = split.train.iter().map(|&i| fingerprints[i].clone()).collect();
        let similarity = SimilarityMatrix::from_fingerprints(&train_fps, cfg.matrix_cap)?;
        let contrast = contrast_sets(&similarity, cfg.quartile)?;
        info!(
            "prepared {} molecules ({} train), vocabulary {}, alpha {:.4}",
            dataset.len(),
            split.train.len(),
            vocab.len(),
            contrast.alpha
        );
        let dataset_hash = dataset.hash();
        Ok(Self {
            dataset,
            split,
            features,
            vocab,
            tokens,
            fingerprints,
            train_pos,
            similarity,
            contrast,
            dataset_hash,
        })
    }

    pub fn task(&self) -> TaskType {
        self.dataset.schema.task_type
    }

    pub fn mols(&self, ids: &[usize]) -> Vec<&MolFeatures<T>> {
        ids.iter().map(|&i| &self.features[i]).collect()
    }

    pub fn labels(&self, ids: &[usize]) -> Array2<f64> {
        let n = self.dataset.schema.n();
        Array2::from_shape_fn((ids.len(), n), |(r, j)| self.dataset.records[ids[r]].labels[j])
    }

    fn train_positions(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .map(|&i| self.train_pos[i].expect("id belongs to the training fold"))
            .collect()
    }
}

pub fn to_f64<T: Scalar>(m: &Mat<T>) -> Array2<f64> {
    m.mapv(|v| v.to_f64_lossy())
}

fn from_f64<T: Scalar>(m: &Array2<f64>) -> Mat<T> {
    m.mapv(c)
}

fn check_finite(value: f64, what: &str, ids: &[usize]) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    warn!("non-finite {what} on batch {ids:?}");
    Err(Error::NonFinite {
        value,
        context: format!("{what} on batch {ids:?}"),
    })
}

/// Endless shuffled pass over a pool, reshuffled at each wrap.
struct Cycler {
    ids: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(ids: Vec<usize>, rng: &mut Rng) -> Self {
        let mut c = Self { ids, pos: 0 };
        c.ids.shuffle(rng);
        c
    }

    /// `n` distinct ids (`n <= len`).
    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.ids.len() {
                self.ids.shuffle(rng);
                self.pos = 0;
            }
            let id = self.ids[self.pos];
            self.pos += 1;
            if !out.contains(&id) {
                out.push(id);
            }
        }
        out
    }
}

/// Stratified minibatches: half labeled, half unlabeled when both exist.
struct PoolBatches {
    labeled: Cycler,
    unlabeled: Cycler,
    batch: usize,
}

impl PoolBatches {
    fn new(pools: &PoolState, batch: usize, rng: &mut Rng) -> Self {
        Self {
            labeled: Cycler::new(pools.labeled_ids(), rng),
            unlabeled: Cycler::new(pools.unlabeled_ids(), rng),
            batch,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let (nl, nu) = (self.labeled.ids.len(), self.unlabeled.ids.len());
        let take_l = if nu == 0 { self.batch } else { self.batch / 2 }.min(nl);
        let take_u = (self.batch - take_l).min(nu);
        (self.labeled.take(take_l, rng), self.unlabeled.take(take_u, rng))
    }
}

/// Per-step losses of querying-module training, for logging and tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub full: Vec<f64>,
    pub disc: Vec<f64>,
}

/// Translator step on the full objective with the critic frozen; returns the loss.
fn translator_step<T: Scalar>(
    prep: &Prepared<T>,
    qm: &mut QueryingModule<T>,
    opt: &mut Adam<T>,
    labeled: &[usize],
    unlabeled: &[usize],
    task_states: Option<&Mat<T>>,
    weights: &LossWeights,
    adversarial: bool,
) -> Result<f64> {
    let ids: Vec<usize> = labeled.iter().chain(unlabeled).copied().collect();
    let graphs = GraphBatch::pack(&prep.mols(&ids));
    let seqs: Vec<&TokenSequence> = ids.iter().map(|&i| &prep.tokens[i]).collect();
    let tokens = TokenBatch::pack(&seqs);
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &qm.translator);
    let enc = qm.encoder.forward(&mut f, &graphs);
    let logits = qm.decoder.forward(&mut f, enc.z, &tokens);
    let trans = objectives::loss_trans(&mut tape, logits, &tokens.targets, prep.vocab.pad_id());

    let adv = if adversarial && !labeled.is_empty() && !unlabeled.is_empty() {
        let mut g = Fwd::frozen(&mut tape, &qm.critic);
        let l = qm.discriminator.logits(&mut g, enc.z);
        let ll = tape.gather_rows(l, (0..labeled.len()).collect());
        let lu = tape.gather_rows(l, (labeled.len()..ids.len()).collect());
        Some(objectives::loss_adv(&mut tape, ll, lu))
    } else {
        None
    };

    let know = if weights.lambda_know > 0.0 {
        let positives = prep.contrast.batch_positives(&prep.train_positions(&ids));
        match objectives::loss_know(&mut tape, enc.z, positives, weights.temperature) {
            Ok(v) => Some(v),
            Err(Error::DegenerateBatch) => {
                debug!("no positive pair in batch; knowledge term skipped");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let feed = match task_states {
        Some(states) if weights.lambda_feed > 0.0 => {
            let rows = prep.train_positions(&ids);
            let target = states.select(ndarray::Axis(0), &rows);
            let layer = enc.layer_states[weights.feed_layer - 1];
            Some(objectives::loss_feed(&mut tape, layer, &target, &graphs.segments)?)
        }
        _ => None,
    };

    let parts = LossParts { trans, adv, know, feed };
    let total = objectives::loss_full(&mut tape, parts, weights).map_err(|e| match e {
        Error::NonFinite { value, context } => {
            warn!("non-finite {context} on batch {ids:?}");
            Error::NonFinite {
                value,
                context: format!("{context} on batch {ids:?}"),
            }
        }
        e => e,
    })?;
    let value = tape.scalar(total).to_f64_lossy();
    check_finite(value, "full loss", &ids)?;
    let grads = tape.backward(total);
    opt.step(&mut qm.translator, &grads);
    Ok(value)
}

/// Critic step on embeddings held constant.
fn discriminator_step<T: Scalar>(
    qm: &mut QueryingModule<T>,
    opt: &mut Adam<T>,
    z_labeled: Mat<T>,
    z_unlabeled: Mat<T>,
    ids: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &qm.critic);
    let zl = f.tape.constant(z_labeled);
    let zu = f.tape.constant(z_unlabeled);
    let ll = qm.discriminator.logits(&mut f, zl);
    let lu = qm.discriminator.logits(&mut f, zu);
    let loss = objectives::loss_disc(&mut tape, ll, lu);
    let value = tape.scalar(loss).to_f64_lossy();
    check_finite(value, "discriminator loss", ids)?;
    let grads = tape.backward(loss);
    opt.step(&mut qm.critic, &grads);
    Ok(value)
}

/// Trains a freshly initialized querying module for `cfg.query_epochs` epochs of
/// `ceil(N_train / batch)` steps. `task` supplies the feedback targets.
pub fn train_querying_module<T: Scalar>(
    prep: &Prepared<T>,
    pools: &PoolState,
    task: Option<&TaskModel<T>>,
    cfg: &ALConfig,
    round: usize,
) -> Result<(QueryingModule<T>, QueryLog)> {
    let mut init_rng = seeding::stream(cfg.seed, "query-init", round as u64);
    let mut qm = QueryingModule::<T>::new(&cfg.net, prep.vocab.len(), &mut init_rng);
    let mut log = QueryLog::default();
    if cfg.query_epochs == 0 {
        return Ok((qm, log));
    }
    let weights = cfg.effective_weights();
    let task_states = match task {
        Some(t) if weights.lambda_feed > 0.0 => {
            Some(t.pooled_layer(&prep.mols(&prep.split.train), weights.feed_layer - 1, cfg.eval_chunk))
        }
        _ => None,
    };
    let mut batch_rng = seeding::stream(cfg.seed, "query-batches", round as u64);
    let mut batches = PoolBatches::new(pools, cfg.query_batch, &mut batch_rng);
    let steps = prep.split.train.len().div_ceil(cfg.query_batch);
    let mut opt_t = Adam::new(&qm.translator, AdamConfig::with_lr(cfg.query_lr));
    let mut opt_d = Adam::new(&qm.critic, AdamConfig::with_lr(cfg.query_lr));
    let deferred = cfg.deferred_discriminator();

    for epoch in 0..cfg.query_epochs {
        for _ in 0..steps {
            let (lab, unl) = batches.next(&mut batch_rng);
            let full = translator_step(prep, &mut qm, &mut opt_t, &lab, &unl, task_states.as_ref(), &weights, !deferred)?;
            log.full.push(full);
            if !deferred && !lab.is_empty() && !unl.is_empty() {
                let zl = qm.embed(&prep.mols(&lab), cfg.eval_chunk);
                let zu = qm.embed(&prep.mols(&unl), cfg.eval_chunk);
                let ids: Vec<usize> = lab.iter().chain(&unl).copied().collect();
                log.disc.push(discriminator_step(&mut qm, &mut opt_d, zl, zu, &ids)?);
            }
        }
        debug!("query epoch {epoch}: full {:.4}", log.full.last().copied().unwrap_or(f64::NAN));
    }

    if deferred && pools.n_labeled() > 0 && pools.n_unlabeled() > 0 {
        let z_all = qm.embed(&prep.mols(&prep.split.train), cfg.eval_chunk);
        for _ in 0..cfg.query_epochs {
            for _ in 0..steps {
                let (lab, unl) = batches.next(&mut batch_rng);
                let zl = z_all.select(ndarray::Axis(0), &prep.train_positions(&lab));
                let zu = z_all.select(ndarray::Axis(0), &prep.train_positions(&unl));
                let ids: Vec<usize> = lab.iter().chain(&unl).copied().collect();
                log.disc.push(discriminator_step(&mut qm, &mut opt_d, zl, zu, &ids)?);
            }
        }
    }
    Ok((qm, log))
}

/// Per-column affine map applied to regression targets during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Fitted on regression labels; identity for classification.
    pub fn fit(labels: &Array2<f64>, task: TaskType) -> Self {
        let n = labels.ncols();
        if task.is_classification() || labels.nrows() == 0 {
            return Self::identity(n);
        }
        let mut s = Self::identity(n);
        for j in 0..n {
            let col = labels.column(j);
            let m = col.mean().unwrap_or(0.0);
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            s.mean[j] = m;
            s.std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        s
    }

    pub fn forward(&self, labels: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(labels.dim(), |(i, j)| (labels[[i, j]] - self.mean[j]) / self.std[j])
    }

    pub fn inverse(&self, outputs: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(outputs.dim(), |(i, j)| outputs[[i, j]] * self.std[j] + self.mean[j])
    }
}

/// Task learner selected on validation, with its target scaling.
#[derive(Debug, Clone)]
pub struct TrainedTask<T> {
    pub model: TaskModel<T>,
    pub scaler: Standardizer,
    /// Validation metric after each epoch.
    pub val_history: Vec<f64>,
    /// 0-based epoch of the returned checkpoint; `None` with zero epochs.
    pub best_epoch: Option<usize>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

impl<T: Scalar> TrainedTask<T> {
    /// Predictions on the original label scale (logits for classification).
    pub fn predict(&self, prep: &Prepared<T>, ids: &[usize], chunk: usize, dropout: Option<&mut Rng>) -> (Array2<f64>, Array2<f64>) {
        let out = self.model.predict(&prep.mols(ids), chunk, dropout);
        (to_f64(&out.pooled), self.scaler.inverse(&to_f64(&out.predictions)))
    }
}

/// Index of the best validation value; earliest wins ties.
pub fn best_index(history: &[f64], higher_is_better: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if higher_is_better => v > history[b],
            Some(b) => v < history[b],
        };
        if better && !v.is_nan() {
            best = Some(i);
        }
    }
    best.or(if history.is_empty() { None } else { Some(0) })
}

/// Metric on the original label scale; AUROC falls back to negative loss if no
/// label has both classes. Returned so that higher is better.
fn validation_score(preds: &Array2<f64>, labels: &Array2<f64>, task: TaskType) -> f64 {
    if task.is_classification() {
        analysis::auroc_multi(preds, labels).unwrap_or_else(|_| -analysis::task_loss_value(preds, labels, task))
    } else {
        -analysis::mse(preds, labels)
    }
}

fn train_loss<T: Scalar>(model: &TaskModel<T>, prep: &Prepared<T>, ids: &[usize], targets: &Array2<f64>, chunk: usize) -> f64 {
    let out = model.predict(&prep.mols(ids), chunk, None);
    analysis::task_loss_value(&to_f64(&out.predictions), targets, prep.task())
}

/// Fresh initialization, `cfg.task_epochs` epochs on `labeled`, best checkpoint
/// on the validation fold.
pub fn train_task_learner<T: Scalar>(
    prep: &Prepared<T>,
    labeled: &[usize],
    cfg: &ALConfig,
    round: usize,
) -> Result<TrainedTask<T>> {
    if labeled.is_empty() {
        return Err(Error::Invalid("task learner needs a non-empty labeled pool".into()));
    }
    let task = prep.task();
    let mut init_rng = seeding::stream(cfg.seed, "task-init", round as u64);
    let mut model = TaskModel::<T>::new(&cfg.net, prep.dataset.schema.n(), &mut init_rng);
    let raw = prep.labels(labeled);
    let scaler = Standardizer::fit(&raw, task);
    let targets = scaler.forward(&raw);
    let initial_train_loss = train_loss(&model, prep, labeled, &targets, cfg.eval_chunk);

    let val = &prep.split.val;
    let val_labels = prep.labels(val);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(cfg.task_lr));
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut rng = seeding::stream(cfg.seed, "task-train", round as u64);
    let mut history = Vec::with_capacity(cfg.task_epochs);
    let mut best: Option<(f64, ParamStore<T>)> = None;

    for epoch in 0..cfg.task_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.task_batch) {
            let ids: Vec<usize> = chunk.iter().map(|&k| labeled[k]).collect();
            let y: Mat<T> = from_f64(&targets.select(ndarray::Axis(0), chunk));
            let batch = GraphBatch::pack(&prep.mols(&ids));
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &model.store);
            let out = model.learner.forward(&mut f, &batch, Some(&mut rng));
            let loss = objectives::task_loss(&mut tape, out.predictions, y, task);
            let value = tape.scalar(loss).to_f64_lossy();
            check_finite(value, "task loss", &ids)?;
            let grads = tape.backward(loss);
            opt.step(&mut model.store, &grads);
        }
        let score = if val.is_empty() {
            -train_loss(&model, prep, labeled, &targets, cfg.eval_chunk)
        } else {
            let out = model.predict(&prep.mols(val), cfg.eval_chunk, None);
            validation_score(&scaler.inverse(&to_f64(&out.predictions)), &val_labels, task)
        };
        history.push(score);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.store.clone()));
        }
        debug!("task epoch {epoch}: val {score:.4}");
    }
    let best_epoch = best_index(&history, true);
    if let Some((_, store)) = best {
        model.store = store;
    }
    let final_train_loss = train_loss(&model, prep, labeled, &targets, cfg.eval_chunk);
    // stored as the metric itself, not the higher-is-better score
    let val_history = if task.is_classification() {
        history
    } else {
        history.into_iter().map(|v| -v).collect()
    };
    Ok(TrainedTask {
        model,
        scaler,
        val_history,
        best_epoch,
        initial_train_loss,
        final_train_loss,
    })
}

/// Test-fold metric: mean AUROC over labels or MSE on the original scale.
pub fn evaluate<T: Scalar>(prep: &Prepared<T>, trained: &TrainedTask<T>, chunk: usize) -> Result<f64> {
    let (_, preds) = trained.predict(prep, &prep.split.test, chunk, None);
    let labels = prep.labels(&prep.split.test);
    if prep.task().is_classification() {
        analysis::auroc_multi(&preds, &labels)
    } else {
        Ok(analysis::mse(&preds, &labels))
    }
}

/// Diversity and informativeness of the batch picked in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub simr: Option<f64>,
    pub mtanisim: Option<f64>,
    #[serde(flatten)]
    pub informativeness: Informativeness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub selected_ids: Vec<usize>,
    pub seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub dataset: String,
    pub dataset_hash: String,
    pub task_type: TaskType,
    pub config_hash: String,
    pub strategy: Strategy,
    /// Label of the configuration variant, e.g. an ablation name.
    pub variant: String,
    pub seed: u64,
    pub pool: usize,
    pub config: ALConfig,
}

/// Header plus one entry per round, round 0 first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub header: RunHeader,
    pub rounds: Vec<RoundResult>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header(RunHeader),
    Round(RoundResult),
}

pub fn header_line(header: &RunHeader) -> String {
    serde_json::to_string(&Line::Header(header.clone())).expect("header serializes")
}

pub fn round_line(round: &RoundResult) -> String {
    serde_json::to_string(&Line::Round(round.clone())).expect("round serializes")
}

impl RunRecord {
    pub fn to_jsonl(&self) -> String {
        let mut s = header_line(&self.header);
        s.push('\n');
        for r in &self.rounds {
            s.push_str(&round_line(r));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut rounds = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Line>(line)? {
                Line::Header(h) if i == 0 => header = Some(h),
                Line::Header(_) => return Err(Error::Invalid(format!("line {}: second header", i + 1))),
                Line::Round(r) => rounds.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::Invalid("record has no header line".into()))?;
        Ok(Self { header, rounds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Writes `<path>.partial` and renames it to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let partial = partial_path(path);
        std::fs::write(&partial, self.to_jsonl()).map_err(|e| Error::io(&partial, e))?;
        std::fs::rename(&partial, path).map_err(|e| Error::io(path, e))
    }
}

pub fn partial_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    s.into()
}

/// Appends lines to a `.partial` file as rounds finish; `finish` renames it.
pub struct RecordWriter {
    file: std::fs::File,
    partial: std::path::PathBuf,
    target: std::path::PathBuf,
}

impl RecordWriter {
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self> {
        let partial = partial_path(path);
        let mut file = std::fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        writeln!(file, "{}", header_line(header)).map_err(|e| Error::io(&partial, e))?;
        Ok(Self {
            file,
            partial,
            target: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, round: &RoundResult) -> Result<()> {
        writeln!(self.file, "{}", round_line(round)).map_err(|e| Error::io(&self.partial, e))?;
        self.file.flush().map_err(|e| Error::io(&self.partial, e))
    }

    pub fn finish(self) -> Result<()> {
        drop(self.file);
        std::fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.target, e))
    }
}

/// Task-learner outputs needed by the selector, plus the dropout passes.
fn task_view<T: Scalar>(
    prep: &Prepared<T>,
    trained: &TrainedTask<T>,
    pools: &PoolState,
    cfg: &ALConfig,
    round: usize,
) -> TaskView {
    let unl = pools.unlabeled_ids();
    let (unlabeled_pooled, unlabeled_logits) = trained.predict(prep, &unl, cfg.eval_chunk, None);
    let (labeled_pooled, _) = trained.predict(prep, &pools.labeled_ids(), cfg.eval_chunk, None);
    let mc_passes = if cfg.strategy == Strategy::McDropout {
        let mut rng = seeding::stream(cfg.seed, "mc-dropout", round as u64);
        (0..cfg.mc_passes)
            .map(|_| trained.predict(prep, &unl, cfg.eval_chunk, Some(&mut rng)).1)
            .collect()
    } else {
        Vec::new()
    };
    TaskView {
        unlabeled_logits,
        unlabeled_pooled,
        labeled_pooled,
        mc_passes,
    }
}

fn diagnostics<T: Scalar>(
    prep: &Prepared<T>,
    trained: &TrainedTask<T>,
    qm: Option<&QueryingModule<T>>,
    selected: &[usize],
    cfg: &ALConfig,
    round: usize,
) -> Diagnostics {
    let simr = qm.and_then(|qm| {
        let z = to_f64(&qm.embed(&prep.mols(&prep.split.train), cfg.eval_chunk));
        analysis::sim_ratio(&z, &prep.contrast).ok()
    });
    let fps: Vec<&Fingerprint> = selected.iter().map(|&i| &prep.fingerprints[i]).collect();
    let mtanisim = analysis::mean_tanimoto(&fps).ok();
    let (pooled, logits) = trained.predict(prep, selected, cfg.eval_chunk, None);
    let mut rng = seeding::stream(cfg.seed, "diag-dropout", round as u64);
    let mc: Vec<Array2<f64>> = (0..cfg.mc_passes)
        .map(|_| trained.predict(prep, selected, cfg.eval_chunk, Some(&mut rng)).1)
        .collect();
    let labels = prep.labels(selected);
    let informativeness = analysis::informativeness(&logits, &mc, &pooled, &labels, prep.task());
    Diagnostics {
        simr,
        mtanisim,
        informativeness,
    }
}

/// Identifies one run inside an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunId {
    pub dataset: String,
    pub variant: String,
    pub pool: usize,
}

pub fn run_header<T: Scalar>(prep: &Prepared<T>, cfg: &ALConfig, id: &RunId) -> RunHeader {
    RunHeader {
        dataset: id.dataset.clone(),
        dataset_hash: prep.dataset_hash.clone(),
        task_type: prep.task(),
        config_hash: cfg.hash(),
        strategy: cfg.strategy,
        variant: id.variant.clone(),
        seed: cfg.seed,
        pool: id.pool,
        config: cfg.clone(),
    }
}

/// Round 0 on the initial pool, then `cfg.rounds` rounds of select, annotate,
/// retrain, evaluate. `on_round` sees every result as it is produced.
pub fn run_active_learning<T: Scalar>(
    prep: &Prepared<T>,
    cfg: &ALConfig,
    id: &RunId,
    mut on_round: impl FnMut(&RoundResult) -> Result<()>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let header = run_header(prep, cfg, id);
    let n_train = prep.split.train.len();
    let pool_seed = seeding::derive_seed(cfg.seed, "pool", id.pool as u64);
    let mut pools = init_pools(&prep.split.train, cfg.init_fraction, pool_seed)?;
    let b = query_size(n_train, cfg.batch_fraction);
    let metric_name = prep.task().metric_name().to_string();
    let mut rounds = Vec::with_capacity(cfg.rounds + 1);

    let started = Instant::now();
    let mut trained = train_task_learner(prep, &pools.labeled_ids(), cfg, 0)?;
    let metric = evaluate(prep, &trained, cfg.eval_chunk)?;
    let r0 = RoundResult {
        round: 0,
        n_labeled: pools.n_labeled(),
        n_unlabeled: pools.n_unlabeled(),
        metric_name: metric_name.clone(),
        metric_value: metric,
        selected_ids: Vec::new(),
        seconds: cfg.record_seconds.then(|| started.elapsed().as_secs_f64()),
        diagnostics: None,
    };
    info!("{} seed {} pool {} round 0: {metric_name} {metric:.4}", cfg.strategy, cfg.seed, id.pool);
    on_round(&r0)?;
    rounds.push(r0);

    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let unl = pools.unlabeled_ids();
        if unl.len() < b {
            warn!("round {t}: only {} unlabeled molecules left for a batch of {b}", unl.len());
        }
        let qm = if cfg.strategy.needs_querying_module() {
            Some(train_querying_module(prep, &pools, Some(&trained.model), cfg, t)?.0)
        } else {
            None
        };
        let (disc_scores, embeddings) = match &qm {
            Some(qm) => {
                let z = qm.embed(&prep.mols(&unl), cfg.eval_chunk);
                let s: Vec<f64> = qm.scores(&z).into_iter().map(|v| v.to_f64_lossy()).collect();
                (Some(s), Some(to_f64(&z)))
            }
            None => (None, None),
        };
        let view = match cfg.strategy {
            Strategy::Entropy | Strategy::McDropout | Strategy::Coreset | Strategy::Badge => {
                Some(task_view(prep, &trained, &pools, cfg, t))
            }
            _ => None,
        };
        let ctx = SelectionContext {
            unlabeled: &unl,
            b,
            seed: seeding::derive_seed(cfg.seed, "select", t as u64),
            task: prep.task(),
            disc_scores: disc_scores.as_deref(),
            embeddings: embeddings.as_ref(),
            task_view: view.as_ref(),
        };
        let selected = strategies::select(cfg.strategy, &ctx)?;
        let diag = cfg
            .diagnostics
            .then(|| diagnostics(prep, &trained, qm.as_ref(), &selected, cfg, t));
        pools = annotate_and_update(&pools, &selected)?;
        trained = train_task_learner(prep, &pools.labeled_ids(), cfg, t)?;
        let metric = evaluate(prep, &trained, cfg.eval_chunk)?;
        let r = RoundResult {
            round: t,
            n_labeled: pools.n_labeled(),
            n_unlabeled: pools.n_unlabeled(),
            metric_name: metric_name.clone(),
            metric_value: metric,
            selected_ids: selected,
            seconds: cfg.record_seconds.then(|| started.elapsed().as_secs_f64()),
            diagnostics: diag,
        };
        info!("{} seed {} pool {} round {t}: {metric_name} {metric:.4}", cfg.strategy, cfg.seed, id.pool);
        on_round(&r)?;
        rounds.push(r);
    }
    Ok(RunRecord { header, rounds })
}
