use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::meta::{init_kernel_lengthscales, meta_test_finetune, meta_train, pretrain, source_batch, Ablation, MetaConfig, MetricEvent, TrainState};
use crate::networks::{predict, snapshot, ModelParams};
use crate::stream::{accuracy, complement, episode_split, make_target_stream, DomainStream, EpisodeSplit};

use super::config::Config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Pretrain on the source and never adapt.
    SourceOnly,
    /// Fine-tune heads domain by domain with a fixed Gaussian MMD; no
    /// quantizer, no meta-training.
    FixedMmdSeq,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SourceOnly => "source_only",
            BaselineKind::FixedMmdSeq => "fixed_mmd_seq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [BaselineKind::SourceOnly, BaselineKind::FixedMmdSeq].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Meta(Ablation),
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Meta(a) => a.name(),
            Method::Baseline(b) => b.name(),
        }
    }
}

/// Published averages kept next to each record for orientation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub full: f64,
    pub f_and_d: f64,
    pub fe: f64,
    pub source_only: f64,
    pub asserted: bool,
    pub note: String,
}

impl Default for Reference {
    fn default() -> Self {
        Self {
            full: 73.6,
            f_and_d: 72.1,
            fe: 68.2,
            source_only: 63.4,
            asserted: false,
            note: "published skin-lesion averages in percent; not comparable at this scale".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub pretrain_ce: Vec<f64>,
    /// Meta-training events in order.
    pub traces: Vec<MetricEvent>,
    /// `A[i][j]`: accuracy on domain `j + 1` after adapting through domain
    /// `i`; row 0 is the pretrained model.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Mean of the last row.
    pub avg_target_accuracy: f64,
    pub bwt: Option<f64>,
    pub drops: Vec<f64>,
    pub eval_protocol: String,
    pub target_label_reads: usize,
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub bwt: f64,
    /// `A[j][j] − A[M][j]` per domain.
    pub drops: Vec<f64>,
}

/// Backward transfer and per-domain drops of a complete accuracy matrix.
pub fn compute_forgetting(matrix: &[Vec<f64>]) -> Result<Forgetting> {
    let m = matrix.first().map_or(0, Vec::len);
    if m == 0 || matrix.len() < m + 1 || matrix.iter().any(|r| r.len() != m) {
        return Err(contract(format!(
            "forgetting needs {} complete rows of {m} domains, got {} rows",
            m + 1,
            matrix.len()
        )));
    }
    let drops: Vec<f64> = (0..m).map(|j| matrix[j + 1][j] - matrix[m][j]).collect();
    // the last domain has no later adaptation, so BWT averages j < M
    let bwt = if m > 1 {
        -drops[..m - 1].iter().sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    Ok(Forgetting { bwt, drops })
}

/// Append-only JSON-lines sink; every line is flushed so a crashed run
/// leaves a valid prefix.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
    path: Option<std::path::PathBuf>,
}

impl MetricsLog {
    pub fn discard() -> Self {
        Self { out: None, path: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn log(&mut self, e: &MetricEvent) -> Result<()> {
        if let (Some(w), Some(p)) = (self.out.as_mut(), self.path.as_ref()) {
            let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Fixed deployment split per domain, derived from the run seed only so
/// that every method sees the same supports and evaluation sets.
fn deployment_splits(stream: &DomainStream, seed: u64) -> Result<Vec<EpisodeSplit>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3 << 32);
    stream
        .targets
        .iter()
        .map(|t| episode_split(&t.pool, stream.n_support, 0, rng.gen()))
        .collect()
}

fn evaluate(mp: &ModelParams<f64>, stream: &DomainStream, splits: &[EpisodeSplit]) -> Result<Vec<f64>> {
    stream
        .targets
        .iter()
        .zip(splits)
        .map(|(t, s)| {
            let idx = complement(t.pool.len(), &s.support_idx);
            let pred = predict(&t.pool.subset(&idx).x, mp)?;
            Ok(accuracy(&pred, &t.labels.reveal_for_eval(&idx)))
        })
        .collect()
}

fn eval_events(row: usize, accs: &[f64], log: &mut MetricsLog) -> Result<()> {
    for (j, &a) in accs.iter().enumerate() {
        let mut e = MetricEvent::new(row, "eval", j + 1);
        e.acc = Some(a);
        log.log(&e)?;
    }
    Ok(())
}

struct Prepared {
    stream: DomainStream,
    state: TrainState,
    splits: Vec<EpisodeSplit>,
    pretrain_ce: Vec<f64>,
    matrix: Vec<Vec<f64>>,
}

fn prepare(cfg: &Config, meta: &MetaConfig, seed: u64, log: &mut MetricsLog) -> Result<Prepared> {
    cfg.validate()?;
    let stream = make_target_stream(&cfg.stream, seed)?;
    let mut state = TrainState::new(&stream, &cfg.network, &cfg.kernel, meta, &cfg.twosample, seed)?;
    let pretrain_ce = pretrain(&mut state, &stream.source, meta)?;
    let warm = source_batch(&mut state.rng, &stream.source, stream.n_support)?;
    init_kernel_lengthscales(&mut state, &warm.x)?;
    let splits = deployment_splits(&stream, seed)?;
    let row0 = evaluate(&state.mp, &stream, &splits)?;
    eval_events(0, &row0, log)?;
    Ok(Prepared {
        stream,
        state,
        splits,
        pretrain_ce,
        matrix: vec![row0],
    })
}

/// Sequential head fine-tuning over every domain with a snapshot after each.
fn deploy(p: &mut Prepared, meta: &MetaConfig, log: &mut MetricsLog) -> Result<()> {
    p.state.snapshots.clear();
    if !meta.persist_heads {
        p.state.reset_heads()?;
    }
    for j in 0..p.stream.targets.len() {
        let (r, jl) = meta_test_finetune(&mut p.state, &p.splits[j], &p.stream.source, meta)?;
        let snap = snapshot(&p.state.mp, j + 1);
        p.state.snapshots.push(snap);
        if let Some(r) = r {
            let mut e = MetricEvent::new(j + 1, "sap", j + 1);
            e.loss_ce = Some(r.get("ce"));
            e.loss_ak = Some(r.get("ak"));
            e.loss_w = Some(r.get("w"));
            e.j_lambda = jl;
            log.log(&e)?;
        }
        let row = evaluate(&p.state.mp, &p.stream, &p.splits)?;
        eval_events(j + 1, &row, log)?;
        p.matrix.push(row);
    }
    Ok(())
}

fn finish(cfg: &Config, seed: u64, method: Method, p: Prepared, traces: Vec<MetricEvent>) -> Result<RunRecord> {
    let last = p.matrix.last().expect("row 0 exists");
    let avg = last.iter().sum::<f64>() / last.len() as f64;
    let (bwt, drops) = match compute_forgetting(&p.matrix) {
        Ok(f) => (Some(f.bwt), f.drops),
        Err(_) => (None, Vec::new()),
    };
    Ok(RunRecord {
        config_hash: cfg.hash(),
        seed,
        method: method.name().to_string(),
        pretrain_ce: p.pretrain_ce,
        traces,
        accuracy_matrix: p.matrix,
        avg_target_accuracy: avg,
        bwt,
        drops,
        eval_protocol: format!(
            "each domain is scored on its pool minus a fixed deployment support of {} points",
            p.stream.n_support
        ),
        target_label_reads: p.stream.total_label_reads(),
        reference: Reference::default(),
    })
}

/// Pretrain, meta-train, then deploy over the whole stream. With
/// `meta.max_iter = 0` nothing is adapted and only the pretrain row exists.
pub fn run_experiment(cfg: &Config, seed: u64, out: Option<&Path>, log: &mut MetricsLog) -> Result<RunRecord> {
    let meta = &cfg.meta;
    let mut p = prepare(cfg, meta, seed, log)?;
    let reads_before = p.stream.total_label_reads();
    let mut traces = Vec::new();
    let dump = match (cfg.run.dump_on_failure, out) {
        (true, Some(o)) => Some(o.join("failure_state")),
        _ => None,
    };
    let one = MetaConfig {
        max_iter: 1,
        ..meta.clone()
    };
    for t in 0..meta.max_iter {
        meta_train(&p.stream, &mut p.state, &one, dump.as_deref(), &mut |e| {
            traces.push(e.clone());
            log.log(e)
        })?;
        if let (Some(o), true) = (out, cfg.run.checkpoint_every > 0 && (t + 1) % cfg.run.checkpoint_every.max(1) == 0) {
            p.state.dump(&o.join(format!("checkpoint_{:04}", t + 1)))?;
        }
    }
    if p.stream.total_label_reads() != reads_before {
        return Err(contract("meta-training read target labels"));
    }
    if meta.max_iter > 0 {
        deploy(&mut p, meta, log)?;
    }
    finish(cfg, seed, Method::Meta(meta.ablation), p, traces)
}

pub fn run_baseline(kind: BaselineKind, cfg: &Config, seed: u64, log: &mut MetricsLog) -> Result<RunRecord> {
    let meta = MetaConfig {
        ablation: Ablation::Fe,
        lambda_forget: 0.0,
        ..cfg.meta.clone()
    };
    let mut p = prepare(cfg, &meta, seed, log)?;
    match kind {
        BaselineKind::SourceOnly => {
            let row = p.matrix[0].clone();
            for j in 0..p.stream.targets.len() {
                eval_events(j + 1, &row, log)?;
                p.matrix.push(row.clone());
            }
        }
        BaselineKind::FixedMmdSeq => deploy(&mut p, &meta, log)?,
    }
    finish(cfg, seed, Method::Baseline(kind), p, Vec::new())
}

/// Writes `summary.json` (the record) and `accuracy.csv` into `dir`.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
    let csv = dir.join("accuracy.csv");
    let m = record.accuracy_matrix.first().map_or(0, Vec::len);
    let mut s = String::from("row");
    for j in 1..=m {
        s.push_str(&format!(",domain_{j}"));
    }
    s.push('\n');
    for (i, r) in record.accuracy_matrix.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in r {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    std::fs::write(&csv, s).map_err(|e| Error::io(&csv, e))
}
