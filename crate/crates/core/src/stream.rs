//! Synthetic labelled source and a stream of drifting, unlabelled target
//! domains.
//!
//! The source is a Gaussian mixture with one component per class, means on a
//! circle in the first two coordinates. Target domain `m` rotates that
//! mixture by `θ_m` in the same plane and optionally shifts its mean.
//! Consecutive domains must satisfy `|Δθ| + ‖Δshift‖ ≤ α·|Δt|` (degrees and
//! input units), with the source at `θ = 0`, `t = 0`.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::distributions::WeightedIndex;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};
use crate::losses::one_hot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub dim: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_meta_train: usize,
    pub n_meta_test: usize,
    pub n_support: usize,
    pub n_query: usize,
    /// Radius of the circle carrying the component means.
    pub radius: f64,
    /// Per-coordinate standard deviation of each component.
    pub component_std: f64,
    pub source_proportions: Vec<f64>,
    /// Rotation of domain `m` (1-based) is `angle_step_deg · m` unless
    /// `angles_deg` lists every domain explicitly.
    pub angle_step_deg: f64,
    pub angles_deg: Vec<f64>,
    /// Mean shift added per unit of arrival time, first two coordinates.
    pub shift_step: [f64; 2],
    /// Domain (1-based) whose proportions drop one class; 0 disables.
    pub drop_class_domain: usize,
    pub drop_class: usize,
    pub alpha_drift: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            classes: 4,
            n_source: 2000,
            n_target: 600,
            n_meta_train: 3,
            n_meta_test: 2,
            n_support: 64,
            n_query: 64,
            radius: 2.0,
            component_std: 0.6,
            source_proportions: vec![0.4, 0.3, 0.2, 0.1],
            angle_step_deg: 12.0,
            angles_deg: Vec::new(),
            shift_step: [0.0, 0.0],
            drop_class_domain: 4,
            drop_class: 3,
            alpha_drift: 15.0,
        }
    }
}

impl StreamConfig {
    pub fn domains(&self) -> usize {
        self.n_meta_train + self.n_meta_test
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dim < 2 {
            errs.push(format!("stream.dim must be >= 2, got {}", self.dim));
        }
        if self.classes < 2 {
            errs.push(format!("stream.classes must be >= 2, got {}", self.classes));
        }
        if let Err(e) = check_proportions(&self.source_proportions, self.classes) {
            errs.push(format!("stream.source_proportions: {e}"));
        }
        if self.domains() == 0 {
            errs.push("stream needs at least one target domain".to_string());
        }
        if self.n_meta_train == 0 {
            errs.push("stream.n_meta_train must be >= 1".to_string());
        }
        if self.n_support < 2 {
            errs.push(format!("stream.n_support must be >= 2, got {}", self.n_support));
        }
        if self.n_support + self.n_query > self.n_target {
            errs.push(format!(
                "stream.n_support + stream.n_query ({}) exceeds stream.n_target ({})",
                self.n_support + self.n_query,
                self.n_target
            ));
        }
        if self.n_source < 2 {
            errs.push("stream.n_source must be >= 2".to_string());
        }
        if !(self.radius >= 0.0) || !(self.component_std > 0.0) {
            errs.push("stream.radius must be >= 0 and stream.component_std > 0".to_string());
        }
        if !(self.alpha_drift > 0.0) {
            errs.push(format!("stream.alpha_drift must be > 0, got {}", self.alpha_drift));
        }
        if !self.angles_deg.is_empty() && self.angles_deg.len() != self.domains() {
            errs.push(format!(
                "stream.angles_deg lists {} angles for {} domains",
                self.angles_deg.len(),
                self.domains()
            ));
        }
        if self.drop_class_domain > self.domains() || self.drop_class >= self.classes {
            errs.push("stream.drop_class_domain / stream.drop_class out of range".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn angle(&self, m: usize) -> f64 {
        if self.angles_deg.is_empty() {
            self.angle_step_deg * m as f64
        } else {
            self.angles_deg[m - 1]
        }
    }
}

fn check_proportions(p: &[f64], classes: usize) -> Result<()> {
    if p.len() != classes {
        return Err(contract(format!("{} proportions for {classes} classes", p.len())));
    }
    if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(contract("proportions must be nonnegative and sum to 1"));
    }
    Ok(())
}

/// Generator parameters of one target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// 1-based domain index.
    pub index: usize,
    pub arrival_time: f64,
    pub angle_deg: f64,
    pub shift: [f64; 2],
    pub cov_scale: f64,
    pub proportions: Vec<f64>,
    pub n_samples: usize,
}

/// Labelled data, used for the source only.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Tensor<f64> {
        one_hot(&self.labels, self.classes).expect("labels in range")
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledData {
        LabeledData {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Inputs without labels; the only view training code receives.
#[derive(Clone, Debug, PartialEq)]
pub struct Unlabeled {
    pub x: Tensor<f64>,
}

impl Unlabeled {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Unlabeled {
        Unlabeled {
            x: self.x.select_rows(idx),
        }
    }
}

/// Target labels kept for evaluation. Every read is counted, and clones
/// share the counter.
#[derive(Clone, Debug)]
pub struct HiddenLabels {
    labels: Vec<usize>,
    reads: Arc<AtomicUsize>,
}

impl HiddenLabels {
    fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Labels at `idx`, for scoring predictions only.
    pub fn reveal_for_eval(&self, idx: &[usize]) -> Vec<usize> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl PartialEq for HiddenLabels {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDomain {
    pub spec: DomainSpec,
    pub pool: Unlabeled,
    pub labels: HiddenLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub source: LabeledData,
    pub targets: Vec<TargetDomain>,
    pub alpha_drift: f64,
    pub seed: u64,
    pub n_meta_train: usize,
    pub n_support: usize,
    pub n_query: usize,
}

impl DomainStream {
    pub fn total_label_reads(&self) -> usize {
        self.targets.iter().map(|t| t.labels.access_count()).sum()
    }

    pub fn meta_train(&self) -> &[TargetDomain] {
        &self.targets[..self.n_meta_train]
    }
}

/// Class means for `classes` components on a circle of `radius`.
pub fn class_means(classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * a.cos();
            m[1] = radius * a.sin();
            m
        })
        .collect()
}

fn rotate(v: &mut [f64], deg: f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let (x, y) = (v[0], v[1]);
    v[0] = c * x - s * y;
    v[1] = s * x + c * y;
}

fn sample_mixture(
    rng: &mut ChaCha8Rng,
    n: usize,
    means: &[Vec<f64>],
    std: f64,
    proportions: &[f64],
    angle_deg: f64,
    shift: [f64; 2],
) -> Result<(Tensor<f64>, Vec<usize>)> {
    let dim = means[0].len();
    let pick = WeightedIndex::new(proportions).map_err(|e| contract(format!("proportions: {e}")))?;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick.sample(rng);
        let mut v: Vec<f64> = means[k]
            .iter()
            .map(|&mu| {
                let z: f64 = StandardNormal.sample(rng);
                mu + std * z
            })
            .collect();
        rotate(&mut v, angle_deg);
        v[0] += shift[0];
        v[1] += shift[1];
        data.extend(v);
        labels.push(k);
    }
    Ok((Tensor::matrix(n, dim, data)?, labels))
}

fn domain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_source(cfg: &StreamConfig, seed: u64) -> Result<LabeledData> {
    if cfg.classes < 2 || cfg.dim < 2 {
        return Err(contract(format!(
            "source needs >= 2 classes and >= 2 dims, got {} and {}",
            cfg.classes, cfg.dim
        )));
    }
    check_proportions(&cfg.source_proportions, cfg.classes)?;
    let means = class_means(cfg.classes, cfg.dim, cfg.radius);
    let mut rng = domain_rng(seed, 0);
    let (x, labels) = sample_mixture(
        &mut rng,
        cfg.n_source,
        &means,
        cfg.component_std,
        &cfg.source_proportions,
        0.0,
        [0.0, 0.0],
    )?;
    Ok(LabeledData {
        x,
        labels,
        classes: cfg.classes,
    })
}

/// Domain specs implied by the config, before any sampling.
pub fn domain_specs(cfg: &StreamConfig) -> Vec<DomainSpec> {
    (1..=cfg.domains())
        .map(|m| {
            let mut p = cfg.source_proportions.clone();
            if m == cfg.drop_class_domain {
                p[cfg.drop_class] = 0.0;
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
            }
            DomainSpec {
                index: m,
                arrival_time: m as f64,
                angle_deg: cfg.angle(m),
                shift: [cfg.shift_step[0] * m as f64, cfg.shift_step[1] * m as f64],
                cov_scale: 1.0,
                proportions: p,
                n_samples: cfg.n_target,
            }
        })
        .collect()
}

/// `|Δθ| + ‖Δshift‖`.
pub fn drift_distance(a: &DomainSpec, b: &DomainSpec) -> f64 {
    let ds = ((a.shift[0] - b.shift[0]).powi(2) + (a.shift[1] - b.shift[1]).powi(2)).sqrt();
    (a.angle_deg - b.angle_deg).abs() + ds
}

/// Checks time ordering, proportions and the drift bound along the stream,
/// starting from the source at `θ = 0`, `t = 0`.
pub fn check_drift(specs: &[DomainSpec], alpha: f64) -> Result<()> {
    let origin = DomainSpec {
        index: 0,
        arrival_time: 0.0,
        angle_deg: 0.0,
        shift: [0.0, 0.0],
        cov_scale: 1.0,
        proportions: Vec::new(),
        n_samples: 0,
    };
    let mut prev = &origin;
    for s in specs {
        if !(s.arrival_time > prev.arrival_time) {
            return Err(contract(format!("arrival times must increase at domain {}", s.index)));
        }
        if s.index > 0 {
            check_proportions(&s.proportions, s.proportions.len())?;
        }
        if s.angle_deg < prev.angle_deg {
            return Err(contract(format!("rotation must be monotone at domain {}", s.index)));
        }
        let d = drift_distance(prev, s);
        let bound = alpha * (s.arrival_time - prev.arrival_time);
        if d > bound + 1e-9 {
            return Err(contract(format!(
                "drift {d} between domains {} and {} exceeds alpha·Δt = {bound}",
                prev.index, s.index
            )));
        }
        prev = s;
    }
    Ok(())
}

pub fn make_target_stream(cfg: &StreamConfig, seed: u64) -> Result<DomainStream> {
    cfg.validate()?;
    let specs = domain_specs(cfg);
    check_drift(&specs, cfg.alpha_drift)?;
    let source = make_source(cfg, seed)?;
    let means = class_means(cfg.classes, cfg.dim, cfg.radius);
    let targets = specs
        .into_iter()
        .map(|spec| {
            let mut rng = domain_rng(seed, spec.index as u64);
            let (x, labels) = sample_mixture(
                &mut rng,
                spec.n_samples,
                &means,
                cfg.component_std * spec.cov_scale,
                &spec.proportions,
                spec.angle_deg,
                spec.shift,
            )?;
            Ok(TargetDomain {
                spec,
                pool: Unlabeled { x },
                labels: HiddenLabels::new(labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainStream {
        source,
        targets,
        alpha_drift: cfg.alpha_drift,
        seed,
        n_meta_train: cfg.n_meta_train,
        n_support: cfg.n_support,
        n_query: cfg.n_query,
    })
}

/// Disjoint support and query subsets of a domain pool.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSplit {
    pub support: Unlabeled,
    pub query: Unlabeled,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

pub fn episode_split(pool: &Unlabeled, n_sup: usize, n_que: usize, seed: u64) -> Result<EpisodeSplit> {
    if n_sup + n_que > pool.len() {
        return Err(contract(format!(
            "episode budget {} + {} exceeds pool of {}",
            n_sup,
            n_que,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, pool.len(), n_sup + n_que).into_vec();
    let support_idx = idx[..n_sup].to_vec();
    let query_idx = idx[n_sup..].to_vec();
    Ok(EpisodeSplit {
        support: pool.subset(&support_idx),
        query: pool.subset(&query_idx),
        support_idx,
        query_idx,
    })
}

/// Indices of `0..n` not in `exclude`.
pub fn complement(n: usize, exclude: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; n];
    for &i in exclude {
        keep[i] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Bayes rule of the source mixture (isotropic components).
pub fn bayes_predict(x: &Tensor<f64>, cfg: &StreamConfig) -> Vec<usize> {
    let means = class_means(cfg.classes, cfg.dim, cfg.radius);
    let var = cfg.component_std * cfg.component_std;
    (0..x.rows())
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, mu) in means.iter().enumerate() {
                let p = cfg.source_proportions[k];
                if p == 0.0 {
                    continue;
                }
                let d: f64 = x.row(i).iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                let s = p.ln() - d / (2.0 * var);
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Writes source (domain 0) and every target domain as CSV with header
/// `f1..fd,label,domain`. Reading target labels here counts as an access.
pub fn export_csv(stream: &DomainStream, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let d = stream.source.x.cols();
    let header: Vec<String> = (1..=d).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},label,domain", header.join(",")).map_err(io)?;
    let mut rows = |x: &Tensor<f64>, labels: &[usize], domain: usize| -> std::io::Result<()> {
        for (i, &label) in labels.iter().enumerate() {
            let cols: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{label},{domain}", cols.join(","))?;
        }
        Ok(())
    };
    rows(&stream.source.x, &stream.source.labels, 0).map_err(io)?;
    for t in &stream.targets {
        let all: Vec<usize> = (0..t.pool.len()).collect();
        rows(&t.pool.x, &t.labels.reveal_for_eval(&all), t.spec.index).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            n_source: 400,
            n_target: 200,
            ..Default::default()
        }
    }

    #[test]
    fn single_class_proportions() {
        let cfg = StreamConfig {
            source_proportions: vec![1.0, 0.0, 0.0, 0.0],
            ..small()
        };
        let s = make_source(&cfg, 1).unwrap();
        assert!(s.labels.iter().all(|&k| k == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_target_stream(&small(), 5).unwrap();
        let b = make_target_stream(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = make_target_stream(&small(), 6).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn class_frequencies_match_proportions() {
        let cfg = StreamConfig::default();
        let s = make_source(&cfg, 2).unwrap();
        let n = s.len() as f64;
        for (k, &p) in cfg.source_proportions.iter().enumerate() {
            let f = s.labels.iter().filter(|&&l| l == k).count() as f64 / n;
            let sd = (p * (1.0 - p) / n).sqrt();
            assert!((f - p).abs() <= 3.0 * sd, "class {k}: {f} vs {p}");
        }
    }

    #[test]
    fn invalid_proportions_are_rejected() {
        let cfg = StreamConfig {
            source_proportions: vec![0.5, 0.5, 0.5, -0.5],
            ..small()
        };
        assert!(make_source(&cfg, 0).is_err());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_rotation_targets_match_source_distribution() {
        let cfg = StreamConfig {
            angle_step_deg: 0.0,
            drop_class_domain: 0,
            ..small()
        };
        let st = make_target_stream(&cfg, 3).unwrap();
        for t in &st.targets {
            assert_eq!(t.spec.angle_deg, 0.0);
            assert_eq!(t.spec.proportions, cfg.source_proportions);
            assert_eq!(t.spec.shift, [0.0, 0.0]);
        }
    }

    #[test]
    fn drift_bound_holds_with_equality() {
        let cfg = StreamConfig {
            n_meta_train: 2,
            n_meta_test: 1,
            angles_deg: vec![10.0, 20.0, 30.0],
            alpha_drift: 10.0,
            drop_class_domain: 0,
            ..small()
        };
        let st = make_target_stream(&cfg, 0).unwrap();
        let mut prev = 0.0;
        for t in &st.targets {
            assert!((t.spec.angle_deg - prev - 10.0).abs() < 1e-12);
            prev = t.spec.angle_deg;
        }
        let too_fast = StreamConfig {
            alpha_drift: 9.0,
            ..cfg
        };
        assert!(matches!(make_target_stream(&too_fast, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn dropped_class_is_absent() {
        let st = make_target_stream(&StreamConfig::default(), 4).unwrap();
        let t = &st.targets[3];
        assert_eq!(t.spec.proportions[3], 0.0);
        let all: Vec<usize> = (0..t.pool.len()).collect();
        assert!(t.labels.reveal_for_eval(&all).iter().all(|&k| k != 3));
    }

    #[test]
    fn episode_split_is_disjoint_and_seeded() {
        let st = make_target_stream(&small(), 7).unwrap();
        let pool = &st.targets[0].pool;
        let a = episode_split(pool, 64, 64, 11).unwrap();
        let b = episode_split(pool, 64, 64, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.support_idx.iter().all(|i| !a.query_idx.contains(i)));
        let e = episode_split(pool, 10, 0, 1).unwrap();
        assert!(e.query.is_empty());
        assert!(episode_split(pool, 150, 51, 1).is_err());
    }

    #[test]
    fn label_reads_are_counted() {
        let st = make_target_stream(&small(), 8).unwrap();
        assert_eq!(st.total_label_reads(), 0);
        let clone = st.targets[0].labels.clone();
        clone.reveal_for_eval(&[0, 1]);
        assert_eq!(st.total_label_reads(), 1);
    }

    #[test]
    fn bayes_accuracy_degrades_with_rotation() {
        let base = StreamConfig {
            n_target: 4000,
            drop_class_domain: 0,
            ..StreamConfig::default()
        };
        let mut last = 1.0;
        for angle in [0.0, 15.0, 30.0, 45.0] {
            let cfg = StreamConfig {
                n_meta_train: 1,
                n_meta_test: 0,
                angles_deg: vec![angle],
                alpha_drift: 90.0,
                ..base.clone()
            };
            let st = make_target_stream(&cfg, 9).unwrap();
            let t = &st.targets[0];
            let all: Vec<usize> = (0..t.pool.len()).collect();
            let acc = accuracy(&bayes_predict(&t.pool.x, &cfg), &t.labels.reveal_for_eval(&all));
            assert!(acc < last, "{angle}: {acc} vs {last}");
            last = acc;
        }
    }

    #[test]
    fn csv_export_layout() {
        let cfg = StreamConfig {
            n_source: 10,
            n_target: 8,
            n_support: 2,
            n_query: 2,
            ..Default::default()
        };
        let st = make_target_stream(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        export_csv(&st, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "f1,f2,label,domain");
        assert_eq!(lines.len(), 1 + 10 + 5 * 8);
        assert!(lines.last().unwrap().ends_with(",5"));
    }
}
