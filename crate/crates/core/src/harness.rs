//! Experiment configuration, run dispatch with resume, curve plots and the
//! diversity/informativeness table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::alloop::{run_active_learning, run_header, ALConfig, Prepared, RecordWriter, RunId, RunRecord};
use crate::dataio::{read_header, scaffold_split, Dataset, DatasetSplit, LabelSchema, TaskType, SMILES_COLUMN};
use crate::error::{Error, Result};
use crate::strategies::Strategy;

/// Environment variable holding the number of concurrent runs.
pub const WORKERS_ENV: &str = "MOLAL_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub task_type: TaskType,
    /// Label columns; every non-SMILES column when empty.
    #[serde(default)]
    pub label_columns: Vec<String>,
    /// Precomputed split as JSON; a scaffold split is computed otherwise.
    #[serde(default)]
    pub split: Option<PathBuf>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// A named configuration of one strategy, e.g. an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub strategy: Strategy,
    #[serde(default)]
    pub use_know: Option<bool>,
    #[serde(default)]
    pub use_feed: Option<bool>,
    #[serde(default)]
    pub disep: Option<bool>,
}

impl Variant {
    pub fn plain(strategy: Strategy) -> Self {
        Self {
            name: strategy.name().to_string(),
            strategy,
            use_know: None,
            use_feed: None,
            disep: None,
        }
    }

    pub fn apply(&self, base: &ALConfig, seed: u64) -> ALConfig {
        let mut cfg = base.clone();
        cfg.strategy = self.strategy;
        cfg.seed = seed;
        if let Some(v) = self.use_know {
            cfg.use_know = v;
        }
        if let Some(v) = self.use_feed {
            cfg.use_feed = v;
        }
        if let Some(v) = self.disep {
            cfg.disep = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Number of initial pools drawn per seed.
    #[serde(default = "one")]
    pub pools: usize,
    #[serde(default)]
    pub al: ALConfig,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.dataset.path = resolve(&cfg.dataset.path);
        cfg.dataset.split = cfg.dataset.split.as_deref().map(resolve);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.pools == 0 {
            return Err(Error::Config("at least one initial pool is required".into()));
        }
        let mut names = BTreeSet::new();
        for v in self.all_variants() {
            if !names.insert(v.name.clone()) {
                return Err(Error::Config(format!("variant {:?} listed twice", v.name)));
            }
            if v.name.is_empty() || v.name.contains(['/', '\\']) || v.name.contains("__") {
                return Err(Error::Config(format!("variant name {:?} is not file-safe", v.name)));
            }
        }
        if !self.dataset.path.exists() {
            return Err(Error::Config(format!("dataset {} not found", self.dataset.path.display())));
        }
        if let Some(s) = &self.dataset.split {
            if !s.exists() {
                return Err(Error::Config(format!("split {} not found", s.display())));
            }
        }
        self.al.validate()
    }

    /// Plain strategies followed by the named variants.
    pub fn all_variants(&self) -> Vec<Variant> {
        self.strategies
            .iter()
            .map(|&s| Variant::plain(s))
            .chain(self.variants.iter().cloned())
            .collect()
    }

    /// Every (variant, seed, pool) triple in a fixed order.
    pub fn plan(&self) -> Vec<PlannedRun> {
        let mut out = Vec::new();
        for v in self.all_variants() {
            for &seed in &self.seeds {
                for pool in 0..self.pools {
                    let path = self.output_dir.join(record_file_name(&v.name, seed, pool));
                    out.push(PlannedRun {
                        config: v.apply(&self.al, seed),
                        variant: v.name.clone(),
                        seed,
                        pool,
                        path,
                    });
                }
            }
        }
        out
    }
}

pub fn record_file_name(variant: &str, seed: u64, pool: usize) -> String {
    format!("{variant}__seed{seed}__pool{pool}.jsonl")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub config: ALConfig,
    pub variant: String,
    pub seed: u64,
    pub pool: usize,
    pub path: PathBuf,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let columns = if spec.label_columns.is_empty() {
        read_header(&spec.path)?
            .into_iter()
            .filter(|h| h != SMILES_COLUMN)
            .collect()
    } else {
        spec.label_columns.clone()
    };
    let schema = LabelSchema::new(spec.task_type, columns)?;
    Dataset::load(&spec.path, &schema)
}

pub fn load_split(spec: &DatasetSpec, dataset: &Dataset) -> Result<DatasetSplit> {
    let split = match &spec.split {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => {
            let [a, b, c] = spec.ratios;
            scaffold_split(&dataset.graphs, (a, b, c))?
        }
    };
    check_split(&split, dataset.len())?;
    Ok(split)
}

fn check_split(split: &DatasetSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!("split id {i} out of range or repeated")));
        }
    }
    Ok(())
}

/// A finished record on disk: parses and has every round.
fn is_complete(path: &Path, rounds: usize) -> bool {
    match RunRecord::load(path) {
        Ok(r) => r.rounds.len() == rounds + 1,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub completed: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Worker count from the environment, at least one.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Executes every planned run not already on disk. Runs are independent and
/// share only the read-only prepared dataset.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let plan = cfg.plan();
    let mut summary = RunSummary::default();
    if plan.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let (todo, done): (Vec<_>, Vec<_>) = plan.into_iter().partition(|r| !is_complete(&r.path, r.config.rounds));
    for r in &done {
        info!("skipping completed {}", r.path.display());
    }
    summary.skipped = done.into_iter().map(|r| r.path).collect();
    if todo.is_empty() {
        return Ok(summary);
    }
    let dataset = load_dataset(&cfg.dataset)?;
    let split = load_split(&cfg.dataset, &dataset)?;
    let prep = Prepared::<f32>::new(dataset, split, &cfg.al)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<()>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, todo.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = todo.get(k) else { break };
                let res = execute(&prep, cfg, run);
                if let Err(e) = &res {
                    warn!("run {} failed: {e}", run.path.display());
                }
                results.lock().expect("no poisoned workers").push((k, res));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned workers");
    results.sort_by_key(|(k, _)| *k);
    for (k, res) in results {
        res?;
        summary.completed.push(todo[k].path.clone());
    }
    Ok(summary)
}

fn execute(prep: &Prepared<f32>, cfg: &ExperimentConfig, run: &PlannedRun) -> Result<()> {
    let id = RunId {
        dataset: cfg.name.clone(),
        variant: run.variant.clone(),
        pool: run.pool,
    };
    let mut writer: Option<RecordWriter> = None;
    let record = run_active_learning(prep, &run.config, &id, |round| {
        if writer.is_none() {
            let header = run_header(prep, &run.config, &id);
            writer = Some(RecordWriter::create(&run.path, &header)?);
        }
        writer.as_mut().expect("writer created").push(round)
    })?;
    match writer {
        Some(w) => w.finish(),
        None => record.save(&run.path),
    }
}

/// Every complete `.jsonl` record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::NoResults(dir.to_path_buf()));
    }
    Ok(records)
}

/// Mean and sample standard deviation of the test metric per round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub variant: String,
    pub metric_name: String,
    pub rounds: Vec<usize>,
    pub mean: Vec<f64>,
    /// `None` with a single run.
    pub std: Option<Vec<f64>>,
    pub runs: usize,
}

fn single_dataset(records: &[RunRecord]) -> Result<String> {
    let hashes: BTreeSet<&str> = records.iter().map(|r| r.header.dataset_hash.as_str()).collect();
    if hashes.len() > 1 {
        return Err(Error::Invalid(format!("records mix dataset hashes {hashes:?}")));
    }
    Ok(hashes.into_iter().next().unwrap_or_default().to_string())
}

/// One curve per variant over rounds `1..=T`; round 0 is left out.
pub fn curves(records: &[RunRecord]) -> Result<Vec<Curve>> {
    single_dataset(records)?;
    let mut by_variant: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_variant.entry(r.header.variant.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (variant, runs) in by_variant {
        let t = runs.iter().map(|r| r.rounds.len()).min().unwrap_or(0);
        let rounds: Vec<usize> = (1..t).collect();
        let column = |k: usize| -> Vec<f64> { runs.iter().map(|r| r.rounds[k].metric_value).collect() };
        let mean: Vec<f64> = rounds.iter().map(|&k| mean(&column(k))).collect();
        let std = (runs.len() > 1).then(|| rounds.iter().map(|&k| sample_std(&column(k))).collect());
        out.push(Curve {
            variant: variant.to_string(),
            metric_name: runs[0].rounds[0].metric_name.clone(),
            rounds,
            mean,
            std,
            runs: runs.len(),
        });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

const PALETTE: [plotters::style::RGBColor; 8] = [
    plotters::style::RGBColor(31, 119, 180),
    plotters::style::RGBColor(255, 127, 14),
    plotters::style::RGBColor(44, 160, 44),
    plotters::style::RGBColor(214, 39, 40),
    plotters::style::RGBColor(148, 103, 189),
    plotters::style::RGBColor(140, 86, 75),
    plotters::style::RGBColor(227, 119, 194),
    plotters::style::RGBColor(127, 127, 127),
];

/// Writes an SVG with one mean line and deviation band per variant.
pub fn plot_curves(curves: &[Curve], title: &str, out: &Path) -> Result<()> {
    use plotters::prelude::*;
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let max_round = curves.iter().flat_map(|c| c.rounds.last().copied()).max().unwrap_or(1).max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for (k, &m) in c.mean.iter().enumerate() {
            let s = c.std.as_ref().map_or(0.0, |s| s[k]);
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let metric = curves.first().map_or("metric", |c| c.metric_name.as_str());

    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.5f64..max_round as f64 + 0.5, (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc(metric)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let xs: Vec<f64> = c.rounds.iter().map(|&r| r as f64).collect();
        if let Some(std) = &c.std {
            let upper = xs.iter().zip(&c.mean).zip(std).map(|((&x, m), s)| (x, m + s));
            let lower: Vec<(f64, f64)> = xs.iter().zip(&c.mean).zip(std).map(|((&x, m), s)| (x, m - s)).collect();
            let band: Vec<(f64, f64)> = upper.chain(lower.into_iter().rev()).collect();
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                .map_err(|e| plot_err(&e))?;
        }
        chart
            .draw_series(LineSeries::new(xs.iter().copied().zip(c.mean.iter().copied()), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(c.variant.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))
}

/// Loads every record in `dir` and writes `curves.svg` and `curves.json` next to them.
pub fn plot_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let records = load_records(dir)?;
    let curves = curves(&records)?;
    let title = records[0].header.dataset.clone();
    let svg = dir.join("curves.svg");
    plot_curves(&curves, &title, &svg)?;
    let json = dir.join("curves.json");
    std::fs::write(&json, serde_json::to_string_pretty(&curves)?).map_err(|e| Error::io(&json, e))?;
    Ok(vec![svg, json])
}

/// Per-variant means of the selection diagnostics over all rounds and runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub variant: String,
    pub simr: Option<f64>,
    pub mtanisim: Option<f64>,
    pub ent: Option<f64>,
    pub mc_ent: Option<f64>,
    pub loss: Option<f64>,
    pub gnorm: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn analyze(records: &[RunRecord]) -> Result<Vec<AnalysisRow>> {
    single_dataset(records)?;
    let mut by_variant: BTreeMap<&str, Vec<&crate::alloop::Diagnostics>> = BTreeMap::new();
    for r in records {
        let entry = by_variant.entry(r.header.variant.as_str()).or_default();
        entry.extend(r.rounds.iter().filter_map(|x| x.diagnostics.as_ref()));
    }
    Ok(by_variant
        .into_iter()
        .map(|(variant, d)| AnalysisRow {
            variant: variant.to_string(),
            simr: mean_present(d.iter().map(|x| x.simr)),
            mtanisim: mean_present(d.iter().map(|x| x.mtanisim)),
            ent: mean_present(d.iter().map(|x| x.informativeness.ent)),
            mc_ent: mean_present(d.iter().map(|x| x.informativeness.mc_ent)),
            loss: mean_present(d.iter().map(|x| Some(x.informativeness.loss))),
            gnorm: mean_present(d.iter().map(|x| x.informativeness.gnorm)),
        })
        .collect())
}

pub fn analysis_tsv(rows: &[AnalysisRow]) -> String {
    use crate::analysis as m;
    let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut s = format!("variant\t{}\t{}\t{}\t{}\t{}\t{}\n", m::SIMR, m::MTANISIM, m::ENT, m::MC_ENT, m::LOSS, m::GNORM);
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            cell(r.simr),
            cell(r.mtanisim),
            cell(r.ent),
            cell(r.mc_ent),
            cell(r.loss),
            cell(r.gnorm)
        ));
    }
    s
}

/// Writes `analysis.tsv` into `dir`.
pub fn analyze_dir(dir: &Path) -> Result<PathBuf> {
    let rows = analyze(&load_records(dir)?)?;
    let out = dir.join("analysis.tsv");
    std::fs::write(&out, analysis_tsv(&rows)).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}
