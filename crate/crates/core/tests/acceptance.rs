//! Acceptance criteria 1-10. Runs as a plain binary and prints one line per
//! criterion; exits non-zero if any fails. `ACCEPTANCE_ONLY=3,5` restricts the set.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;

use molal::alloop::{train_querying_module, train_task_learner, ALConfig, Prepared, RunRecord};
use molal::analysis::{auroc, sim_ratio};
use molal::chemgraph::{detokenize, parse_smiles, tokenize_smiles};
use molal::dataio::{
    annotate_and_update, init_pools, query_size, scaffold_split, Dataset, DatasetSplit, LabelSchema, MoleculeRecord,
    TaskType,
};
use molal::fingerprint::{ecfp, scaffold, similarity_matrix, tanimoto, Fingerprint};
use molal::harness::{self, DatasetSpec, ExperimentConfig, Variant};
use molal::nets::{Fwd, GraphBatch, MolFeatures, NetConfig, QueryingModule, TaskModel, TokenBatch};
use molal::objectives::{self, LossParts, LossWeights};
use molal::seeding::{self, Rng};
use molal::strategies::{kmeanspp_weights, select_coreset, select_random, select_tyger, Strategy};
use molal::tensor::{Mat, ParamStore, Tape, Var};

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");
const ESOL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/esol.csv");

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn esol() -> Dataset {
    let schema = LabelSchema::new(TaskType::Regression, vec!["measured_log_solubility".into()]).unwrap();
    Dataset::load(Path::new(ESOL), &schema).unwrap()
}

fn esol_subset(n: usize) -> Dataset {
    let d = esol();
    Dataset::from_records(d.schema.clone(), d.records[..n].to_vec()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

fn pool_protocol() -> Check {
    let cfg = ALConfig::default();
    cfg.validate().map_err(|e| e.to_string())?;
    let ids: Vec<usize> = (0..1000).collect();
    let all: BTreeSet<usize> = ids.iter().copied().collect();
    let mut pools = init_pools(&ids, cfg.init_fraction, 11).map_err(|e| e.to_string())?;
    let b = query_size(ids.len(), cfg.batch_fraction);
    ensure(b == 40, format!("b = {b}"))?;
    let mut rng = seeding::rng(5);
    for t in 0..=cfg.rounds {
        if t > 0 {
            let batch = select_random(&pools.unlabeled_ids(), b, &mut rng);
            pools = annotate_and_update(&pools, &batch).map_err(|e| e.to_string())?;
        }
        ensure(pools.n_labeled() == 100 + 40 * t, format!("round {t}: |D_L| = {}", pools.n_labeled()))?;
        ensure(pools.labeled.is_disjoint(&pools.unlabeled), format!("round {t}: pools overlap"))?;
        ensure(pools.all_ids().into_iter().collect::<BTreeSet<_>>() == all, format!("round {t}: union changed"))?;
    }
    Ok(format!("|D_L| = 100 + 40t for t = 0..={}", cfg.rounds))
}

// ---------------------------------------------------------------- 2

fn brute_tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let sa: HashSet<usize> = a.on_bits().into_iter().collect();
    let sb: HashSet<usize> = b.on_bits().into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

fn brute_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn oracles() -> Check {
    let d = esol_subset(50);
    let fps: Vec<Fingerprint> = d.graphs.iter().map(|g| ecfp(g, 2, 2048)).collect();
    for a in &fps {
        for b in &fps {
            let t = tanimoto(a, b).map_err(|e| e.to_string())?;
            ensure(t == brute_tanimoto(a, b), "tanimoto differs from set oracle")?;
        }
    }
    let m = similarity_matrix(&d.graphs, 2, 2048, 20_000).map_err(|e| e.to_string())?;
    for i in 0..50 {
        for j in 0..50 {
            ensure(m.get(i, j) == brute_tanimoto(&fps[i], &fps[j]), format!("A[{i},{j}] differs"))?;
        }
    }

    let mut rng = seeding::rng(2024);
    for trial in 0..20 {
        let n = rng.gen_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 20.0).round() / 20.0).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = brute_auroc(&scores, &labels);
        ensure((got - want).abs() <= 1e-12, format!("auroc trial {trial}: {got} vs {want}"))?;
    }

    let mut ids: Vec<usize> = (0..20_000).collect();
    ids.shuffle(&mut rng);
    let mut pool: Vec<usize> = ids[..10_000].to_vec();
    pool.sort_unstable();
    let scores: Vec<f64> = (0..pool.len()).map(|_| (rng.gen::<f64>() * 500.0).floor() / 500.0).collect();
    let b = 400;
    let got = select_tyger(&pool, &scores, b);
    let mut taken = vec![false; pool.len()];
    let mut want = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                Some(k) if (scores[k], pool[k]) <= (scores[i], pool[i]) => Some(k),
                _ => Some(i),
            };
        }
        let k = best.unwrap();
        taken[k] = true;
        want.push(pool[k]);
    }
    ensure(got == want, "select_tyger differs from repeated-minimum oracle")?;

    for trial in 0..20 {
        let nu = rng.gen_range(1..60);
        let nl = rng.gen_range(1..30);
        let dim = rng.gen_range(1..6);
        let gen = |r: usize, rng: &mut Rng| Array2::from_shape_fn((r, dim), |_| (rng.gen::<f64>() * 4.0).round());
        let ue = gen(nu, &mut rng);
        let le = gen(nl, &mut rng);
        let unl: Vec<usize> = (0..nu).map(|i| 3 * i + 1).collect();
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..nu {
            let mut dmin = f64::INFINITY;
            for l in 0..nl {
                let mut s = 0.0;
                for k in 0..dim {
                    s += (ue[[i, k]] - le[[l, k]]).powi(2);
                }
                dmin = dmin.min(s);
            }
            if dmin > best.0 {
                best = (dmin, unl[i]);
            }
        }
        let got = select_coreset(&unl, &ue, &le, 1);
        ensure(got == vec![best.1], format!("coreset trial {trial}: {got:?} vs {}", best.1))?;
    }

    for trial in 0..20 {
        let n = rng.gen_range(2..40);
        let pts = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        let k = rng.gen_range(1..n);
        let chosen: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
        let w = kmeanspp_weights(&pts, &chosen);
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                chosen
                    .iter()
                    .map(|&c| {
                        let d = (&pts.row(i) - &pts.row(c)).mapv(|x| x * x).sum().sqrt();
                        d * d
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        for i in 0..n {
            ensure((w[i] - d2[i] / total).abs() <= 1e-12, format!("k-means++ weight trial {trial} row {i}"))?;
        }
    }
    Ok("tanimoto, A (N=50), auroc, tyger (10000), coreset b=1, k-means++ weights".into())
}

// ---------------------------------------------------------------- 3

fn small_net() -> NetConfig {
    NetConfig {
        width: 8,
        heads: 2,
        gine_layers: 3,
        decoder_blocks: 1,
        dropout: 0.2,
        max_len: 64,
    }
}

/// Moves every parameter off its initial value. Zero biases put ReLU inputs
/// exactly on the kink, where the two one-sided derivatives disagree.
fn jitter(store: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut rng = seeding::rng(seed);
    let mut s = store.clone();
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        s.get_mut(id).mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    }
    s
}

struct GradReport {
    probes: usize,
    compared: usize,
    worst: f64,
}

/// Central differences on random parameter entries against the tape gradient.
/// A probe passes on relative error below 1e-4. When both values are below
/// 1e-7 it passes if they agree to 1e-9, the resolution of the quotient.
fn grad_check(store: &ParamStore<f64>, probes: usize, seed: u64, loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) -> std::result::Result<GradReport, String> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l);
    let ids: Vec<_> = store.ids().filter(|&id| grads.param(id).is_some()).collect();
    if ids.is_empty() {
        return Err("no parameter receives a gradient".into());
    }
    let mut rng = seeding::rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for p in 0..probes {
        let id = ids[p % ids.len()];
        let numel = store.get(id).len();
        let k = rng.gen_range(0..numel);
        let (r, c) = (k / store.get(id).ncols(), k % store.get(id).ncols());
        let analytic = grads.param(id).unwrap()[[r, c]];
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id)[[r, c]] += delta;
            let mut t = Tape::new();
            let l = loss(&mut t, &s);
            t.scalar(l)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            if diff >= 1e-9 {
                return Err(format!("{} [{r},{c}]: analytic {analytic:e} numeric {numeric:e}", store.name(id)));
            }
            continue;
        }
        compared += 1;
        let rel = diff / scale;
        worst = worst.max(rel);
        if rel >= 1e-4 {
            return Err(format!(
                "{} [{r},{c}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}",
                store.name(id)
            ));
        }
    }
    Ok(GradReport { probes, compared, worst })
}

fn gradient_checks() -> Check {
    let d = esol_subset(12);
    let feats: Vec<MolFeatures<f64>> = molal::nets::featurize_all(&d.graphs);
    let mols: Vec<&MolFeatures<f64>> = feats.iter().take(6).collect();
    let graphs = GraphBatch::pack(&mols);
    let vocab = molal::chemgraph::build_vocabulary(&d.smiles()).unwrap();
    let seqs: Vec<_> = d.records[..6].iter().map(|r| vocab.encode_smiles(&r.smiles).unwrap()).collect();
    let tokens = TokenBatch::pack(&seqs.iter().collect::<Vec<_>>());
    let net = small_net();
    let qm = QueryingModule::<f64>::new(&net, vocab.len(), &mut seeding::rng(31));
    let task = TaskModel::<f64>::new(&net, 2, &mut seeding::rng(32));
    let positives = vec![vec![1, 2], vec![0], vec![0], vec![4], vec![3], vec![]];
    let mut rng = seeding::rng(33);
    let task_pooled = Mat::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
    let z_const = Mat::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
    let labels = Mat::from_shape_fn((6, 2), |(i, j)| ((i + j) % 2) as f64);
    let reg_labels = Mat::from_shape_fn((6, 2), |_| rng.gen_range(-2.0..2.0));
    let weights = LossWeights::default();
    let pad = vocab.pad_id();
    let probes = 24;
    let translator = jitter(&qm.translator, 34);
    let critic = jitter(&qm.critic, 35);
    let task_store = jitter(&task.store, 36);

    let enc_z = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let mut f = Fwd::new(t, s);
        qm.encoder.forward(&mut f, &graphs)
    };
    let adv = |t: &mut Tape<f64>, z: Var| {
        let mut g = Fwd::frozen(t, &critic);
        let l = qm.discriminator.logits(&mut g, z);
        let ll = t.gather_rows(l, vec![0, 1, 2]);
        let lu = t.gather_rows(l, vec![3, 4, 5]);
        objectives::loss_adv(t, ll, lu)
    };

    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut record = |name: &str, r: std::result::Result<GradReport, String>| -> std::result::Result<(), String> {
        match r {
            Ok(r) => lines.push(format!("{name} {}/{}p max {:.1e}", r.compared, r.probes, r.worst)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
        Ok(())
    };

    record(
        "trans",
        grad_check(&translator, probes, 1, |t, s| {
            let enc = enc_z(t, s);
            let mut f = Fwd::new(t, s);
            let logits = qm.decoder.forward(&mut f, enc.z, &tokens);
            objectives::loss_trans(t, logits, &tokens.targets, pad)
        }),
    )?;
    record(
        "know",
        grad_check(&translator, probes, 2, |t, s| {
            let enc = enc_z(t, s);
            objectives::loss_know(t, enc.z, positives.clone(), weights.temperature).unwrap()
        }),
    )?;
    record(
        "feed",
        grad_check(&translator, probes, 3, |t, s| {
            let enc = enc_z(t, s);
            objectives::loss_feed(t, enc.layer_states[weights.feed_layer - 1], &task_pooled, &graphs.segments).unwrap()
        }),
    )?;
    record(
        "disc",
        grad_check(&critic, probes, 4, |t, s| {
            let mut f = Fwd::new(t, s);
            let z = f.tape.constant(z_const.clone());
            let l = qm.discriminator.logits(&mut f, z);
            let ll = t.gather_rows(l, vec![0, 1, 2]);
            let lu = t.gather_rows(l, vec![3, 4, 5]);
            objectives::loss_disc(t, ll, lu)
        }),
    )?;
    record(
        "adv",
        grad_check(&translator, probes, 5, |t, s| {
            let enc = enc_z(t, s);
            adv(t, enc.z)
        }),
    )?;
    record(
        "full",
        grad_check(&translator, probes * 2, 6, |t, s| {
            let enc = enc_z(t, s);
            let mut f = Fwd::new(t, s);
            let logits = qm.decoder.forward(&mut f, enc.z, &tokens);
            let trans = objectives::loss_trans(t, logits, &tokens.targets, pad);
            let a = adv(t, enc.z);
            let know = objectives::loss_know(t, enc.z, positives.clone(), weights.temperature).unwrap();
            let feed = objectives::loss_feed(t, enc.layer_states[weights.feed_layer - 1], &task_pooled, &graphs.segments).unwrap();
            let parts = LossParts {
                trans,
                adv: Some(a),
                know: Some(know),
                feed: Some(feed),
            };
            objectives::loss_full(t, parts, &weights).unwrap()
        }),
    )?;
    for (name, y, tt) in [
        ("task-bce", &labels, TaskType::MultiLabelClassification),
        ("task-mse", &reg_labels, TaskType::Regression),
    ] {
        record(
            name,
            grad_check(&task_store, probes, 7, |t, s| {
                let mut f = Fwd::new(t, s);
                let out = task.learner.forward(&mut f, &graphs, None);
                objectives::task_loss(t, out.predictions, y.clone(), tt)
            }),
        )?;
    }
    ensure(failures.is_empty(), failures.join("; "))?;
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- 4

fn closed_forms() -> Check {
    let mut tape = Tape::<f64>::new();
    let v = 29;
    let logits = tape.constant(Mat::zeros((5, v)));
    let trans = objectives::loss_trans(&mut tape, logits, &[3, 4, 5, 6, 7], 0);
    let trans = tape.scalar(trans);
    ensure((trans - (v as f64).ln()).abs() <= 1e-9, format!("L_trans {trans}"))?;

    let zl = tape.constant(Mat::zeros((4, 1)));
    let zu = tape.constant(Mat::zeros((6, 1)));
    let disc = objectives::loss_disc(&mut tape, zl, zu);
    let disc = tape.scalar(disc);
    let ln2 = std::f64::consts::LN_2;
    ensure((disc - 2.0 * ln2).abs() <= 1e-9, format!("L_D {disc}"))?;
    let scores = objectives::loss_disc_scores(&[0.5; 4], &[0.5; 6]);
    ensure((scores - 2.0 * ln2).abs() <= 1e-9, format!("L_D on scores {scores}"))?;

    let z = tape.constant(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let know = objectives::loss_know(&mut tape, z, vec![vec![1], vec![0], vec![]], 1.0).map_err(|e| e.to_string())?;
    let know = tape.scalar(know);
    let e = std::f64::consts::E;
    let want = -(e / (e + 1.0)).ln();
    ensure((know - want).abs() <= 1e-9, format!("L_know {know} vs {want}"))?;
    Ok(format!("ln {v} = {trans:.12}, 2 ln 2 = {disc:.12}, L_know = {know:.12}"))
}

// ---------------------------------------------------------------- 5, 6

fn toy_prepared(cfg: &ALConfig) -> Prepared<f64> {
    let d = esol_subset(56);
    let split = DatasetSplit {
        train: (0..50).collect(),
        val: (50..53).collect(),
        test: (53..56).collect(),
    };
    Prepared::new(d, split, cfg).unwrap()
}

fn toy_config(seed: u64) -> ALConfig {
    ALConfig {
        seed,
        query_epochs: 80,
        query_batch: 50,
        query_lr: 1e-3,
        task_epochs: 40,
        task_batch: 16,
        task_lr: 5e-3,
        use_know: false,
        use_feed: false,
        net: NetConfig {
            width: 16,
            heads: 2,
            gine_layers: 3,
            decoder_blocks: 1,
            dropout: 0.1,
            max_len: 128,
        },
        ..ALConfig::default()
    }
}

fn knowledge_direction() -> Check {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in [0, 1, 2] {
        for (know, out) in [(true, &mut with), (false, &mut without)] {
            let cfg = ALConfig {
                use_know: know,
                ..toy_config(seed)
            };
            let prep = toy_prepared(&cfg);
            let pools = init_pools(&prep.split.train, 0.5, seed).unwrap();
            let (qm, _) = train_querying_module(&prep, &pools, None, &cfg, 1).map_err(|e| e.to_string())?;
            let z = molal::alloop::to_f64(&qm.embed(&prep.mols(&prep.split.train), 64));
            out.push(sim_ratio(&z, &prep.contrast).map_err(|e| e.to_string())?);
        }
    }
    let (m1, m0) = (median(with.clone()), median(without.clone()));
    let detail = format!("median SimR {m1:.4} (know) vs {m0:.4} (none); per seed {with:.4?} vs {without:.4?}");
    ensure(m1 < m0, detail.clone())?;
    Ok(detail)
}

/// Mean over molecules of `1 - cos` between pooled encoder and task states at the feedback layer.
fn feedback_distance(prep: &Prepared<f64>, qm: &QueryingModule<f64>, task: &TaskModel<f64>, layer: usize) -> f64 {
    let mols = prep.mols(&prep.split.train);
    let target = task.pooled_layer(&mols, layer, 64);
    let batch = GraphBatch::pack(&mols);
    let mut tape = Tape::new();
    let mut f = Fwd::frozen(&mut tape, &qm.translator);
    let enc = qm.encoder.forward(&mut f, &batch);
    let g = tape.segment_mean(enc.layer_states[layer], &batch.segments);
    let loss = objectives::feed_from_pooled(&mut tape, g, &target).unwrap();
    tape.scalar(loss)
}

fn feedback_direction() -> Check {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in [0, 1, 2] {
        let base = toy_config(seed);
        let prep = toy_prepared(&base);
        let pools = init_pools(&prep.split.train, 0.5, seed).unwrap();
        let task = train_task_learner(&prep, &pools.labeled_ids(), &base, 0).map_err(|e| e.to_string())?;
        let layer = base.weights.feed_layer - 1;
        for (feed, out) in [(true, &mut with), (false, &mut without)] {
            let cfg = ALConfig { use_feed: feed, ..base.clone() };
            let (qm, _) = train_querying_module(&prep, &pools, Some(&task.model), &cfg, 1).map_err(|e| e.to_string())?;
            out.push(feedback_distance(&prep, &qm, &task.model, layer));
        }
    }
    let (m1, m0) = (median(with.clone()), median(without.clone()));
    let detail = format!("median cosine distance {m1:.4} (feed) vs {m0:.4} (none); per seed {with:.4?} vs {without:.4?}");
    ensure(m1 < m0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn parser_corpus() -> Check {
    let corpus = std::fs::read_to_string(format!("{DATA}/golden_smiles.txt")).unwrap();
    let lines: Vec<&str> = corpus.lines().filter(|l| !l.trim().is_empty()).collect();
    ensure(lines.len() == 100, format!("corpus has {} entries", lines.len()))?;
    for s in &lines {
        parse_smiles(s).map_err(|e| format!("{s}: {e}"))?;
        let toks = tokenize_smiles(s).map_err(|e| format!("{s}: {e}"))?;
        ensure(detokenize(&toks) == *s, format!("round trip changed {s}"))?;
    }
    let mut reader = csv::Reader::from_path(format!("{DATA}/golden_counts.csv")).unwrap();
    let mut checked = 0;
    for row in reader.records() {
        let row = row.unwrap();
        let g = parse_smiles(&row[0]).map_err(|e| e.to_string())?;
        let atoms: usize = row[1].parse().unwrap();
        let bonds: usize = row[2].parse().unwrap();
        let rings: usize = row[3].parse().unwrap();
        let cycles = g.bond_count() + 1 - g.atom_count();
        ensure(
            (g.atom_count(), g.bond_count(), cycles) == (atoms, bonds, rings),
            format!("{}: got {}/{}/{cycles}, want {atoms}/{bonds}/{rings}", &row[0], g.atom_count(), g.bond_count()),
        )?;
        checked += 1;
    }
    ensure(checked == 20, format!("{checked} count entries"))?;
    Ok("100 parsed and round-tripped, 20 atom/bond/ring counts match".into())
}

// ---------------------------------------------------------------- 8

/// Fold sizes may miss the 80/10/10 targets by at most one scaffold group.
fn check_scaffold_split(d: &Dataset) -> std::result::Result<String, String> {
    let split = scaffold_split(&d.graphs, (0.8, 0.1, 0.1)).map_err(|e| e.to_string())?;
    let keys: Vec<_> = d.graphs.iter().map(scaffold).collect();
    let mut fold_of = BTreeMap::new();
    for (f, ids) in [&split.train, &split.val, &split.test].iter().enumerate() {
        for &i in ids.iter() {
            if let Some(prev) = fold_of.insert(keys[i].clone(), f) {
                ensure(prev == f, format!("scaffold {:?} spans folds {prev} and {f}", keys[i].0))?;
            }
        }
    }
    let mut sizes: BTreeMap<_, usize> = BTreeMap::new();
    for k in &keys {
        *sizes.entry(k.clone()).or_default() += 1;
    }
    let largest = *sizes.values().max().unwrap();
    let n = d.len() as f64;
    let total = split.train.len() + split.val.len() + split.test.len();
    ensure(total == d.len(), "split loses molecules")?;
    for (name, got, frac) in [
        ("train", split.train.len(), 0.8),
        ("val", split.val.len(), 0.1),
        ("test", split.test.len(), 0.1),
    ] {
        let target = n * frac;
        ensure(
            (got as f64 - target).abs() <= largest as f64,
            format!("{name} {got} vs target {target:.1} (largest group {largest})"),
        )?;
    }
    Ok(format!(
        "{}/{}/{} of {} across {} scaffolds (largest {largest})",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        d.len(),
        sizes.len()
    ))
}

fn scaffold_folds() -> Check {
    let full = check_scaffold_split(&esol())?;
    let corpus = std::fs::read_to_string(format!("{DATA}/golden_smiles.txt")).unwrap();
    let schema = LabelSchema::new(TaskType::Regression, vec!["y".into()]).unwrap();
    let records = corpus
        .lines()
        .enumerate()
        .map(|(i, s)| MoleculeRecord {
            id: i,
            smiles: s.to_string(),
            labels: vec![0.0],
        })
        .collect();
    let small = check_scaffold_split(&Dataset::from_records(schema, records).unwrap())?;
    Ok(format!("ESOL {full}; corpus {small}"))
}

// ---------------------------------------------------------------- 9

fn desk_config(out: &Path, dataset: &Path, strategies: Vec<Strategy>, seeds: Vec<u64>, rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "esol".into(),
        output_dir: out.to_path_buf(),
        dataset: DatasetSpec {
            path: dataset.to_path_buf(),
            task_type: TaskType::Regression,
            label_columns: vec![],
            split: None,
            ratios: [0.8, 0.1, 0.1],
        },
        strategies,
        variants: Vec::<Variant>::new(),
        seeds,
        pools: 1,
        al: ALConfig {
            rounds,
            query_epochs: 10,
            task_epochs: 10,
            task_batch: 32,
            net: NetConfig {
                width: 64,
                heads: 4,
                gine_layers: 5,
                decoder_blocks: 2,
                dropout: 0.2,
                max_len: 256,
            },
            ..ALConfig::default()
        },
    }
}

fn desk_run() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), Path::new(ESOL), vec![Strategy::Tyger, Strategy::Random], vec![0, 1, 2], 5);
    let started = Instant::now();
    let summary = harness::run_experiment(&cfg, 1).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(summary.completed.len() == 6, format!("{} runs completed", summary.completed.len()))?;
    let records = harness::load_records(dir.path()).map_err(|e| e.to_string())?;
    ensure(records.iter().all(|r| r.rounds.len() == 6), "a record lacks rounds")?;
    let plots = harness::plot_dir(dir.path()).map_err(|e| e.to_string())?;
    ensure(plots.iter().all(|p| p.exists()), "plot missing")?;
    ensure(elapsed < Duration::from_secs(30 * 60), format!("took {elapsed:?}"))?;

    let mut parts = Vec::new();
    let mut ok = true;
    let mut finals = BTreeMap::new();
    for s in ["tyger", "random"] {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.header.variant == s).collect();
        let first = median(runs.iter().map(|r| r.rounds[1].metric_value).collect());
        let last = median(runs.iter().map(|r| r.rounds[5].metric_value).collect());
        ok &= last < first;
        finals.insert(s, last);
        parts.push(format!("{s} median MSE round1 {first:.4} -> round5 {last:.4}"));
    }
    parts.push(format!(
        "tyger {} random at round 5 (reported only)",
        if finals["tyger"] < finals["random"] { "beats" } else { "does not beat" }
    ));
    parts.push(format!("{:.0}s", elapsed.as_secs_f64()));
    let detail = parts.join("; ");
    ensure(ok, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let d = esol_subset(150);
    let csv_path = tmp.path().join("esol150.csv");
    molal::dataio::write_csv(&csv_path, &d.schema, &d.records).unwrap();
    let mut outputs: Vec<BTreeMap<PathBuf, Vec<u8>>> = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let mut cfg = desk_config(&out, &csv_path, vec![Strategy::Tyger, Strategy::Random], vec![7], 2);
        cfg.al.query_epochs = 2;
        cfg.al.task_epochs = 3;
        cfg.al.net.width = 16;
        harness::run_experiment(&cfg, 1).map_err(|e| e.to_string())?;
        let mut files = BTreeMap::new();
        for e in std::fs::read_dir(&out).unwrap() {
            let p = e.unwrap().path();
            files.insert(PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap());
        }
        outputs.push(files);
    }
    ensure(outputs[0].len() == 2, format!("{} files", outputs[0].len()))?;
    ensure(outputs[0] == outputs[1], "records differ between identical runs")?;
    let bytes: usize = outputs[0].values().map(Vec::len).sum();
    Ok(format!("2 records, {bytes} bytes identical"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Check); 10] = [
        (1, "pool protocol", pool_protocol),
        (2, "oracle equivalence", oracles),
        (3, "gradient checks", gradient_checks),
        (4, "closed-form losses", closed_forms),
        (5, "knowledge objective lowers SimR", knowledge_direction),
        (6, "feedback objective aligns states", feedback_direction),
        (7, "parser corpus", parser_corpus),
        (8, "scaffold split", scaffold_folds),
        (9, "ESOL desk run", desk_run),
        (10, "determinism", determinism),
    ];
    let only: Option<BTreeSet<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
