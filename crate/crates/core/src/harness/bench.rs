use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{GaussianKernel, KernelConfig, KernelParams};
use crate::twosample::{permutation_test, train_kernel, BlobConfig, KernelOptimizer, TwoSampleConfig};

/// Blob power benchmark: a deep kernel is trained once, on a fresh pair of
/// alternative draws per step, then both kernels are tested on new trials.
/// The optimizer and step size here override the `twosample` section for
/// this training only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub blob: BlobConfig,
    pub n: usize,
    pub trials: usize,
    pub null_trials: usize,
    pub train_steps: usize,
    pub kernel_optimizer: KernelOptimizer,
    pub eta_ker: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            blob: BlobConfig::default(),
            n: 128,
            trials: 100,
            null_trials: 200,
            train_steps: 1000,
            kernel_optimizer: KernelOptimizer::Adam,
            eta_ker: 1e-3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.blob.validate() {
            Ok(()) => Vec::new(),
            Err(Error::Config(l)) => l,
            Err(e) => vec![e.to_string()],
        };
        if self.n < 2 {
            errs.push(format!("bench.n must be >= 2, got {}", self.n));
        }
        if !(self.eta_ker > 0.0 && self.eta_ker.is_finite()) {
            errs.push(format!("bench.eta_ker must be > 0, got {}", self.eta_ker));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTrial {
    pub trial: usize,
    pub kernel: String,
    pub alternative: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub alternative: bool,
    pub trials: usize,
    pub median_rejection_rate: f64,
    pub deep_rejection_rate: f64,
    pub j_first: f64,
    pub j_last: f64,
}

/// Trains the deep kernel for `train_steps` on independent draws from the
/// alternative, then runs `trials` permutation tests with each kernel.
pub fn blob_bench(
    bench: &BenchConfig,
    kernel: &KernelConfig,
    ts: &TwoSampleConfig,
    seed: u64,
    alternative: bool,
    sink: &mut dyn FnMut(&BenchTrial) -> Result<()>,
) -> Result<BenchSummary> {
    bench.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for _ in 0..bench.train_steps.max(1) {
        let (p, q) = bench.blob.sample(bench.n, true, &mut rng);
        src.push(p);
        tgt.push(q);
    }
    let mut kp: KernelParams<f64> = kernel.build(2, &mut rng)?;
    kp.init_lengthscales_median(&src[0].vstack(&tgt[0])?)?;
    let train_cfg = TwoSampleConfig {
        kernel_optimizer: bench.kernel_optimizer,
        eta_ker: bench.eta_ker,
        ..ts.clone()
    };
    let (kp, trace) = train_kernel(&src, &tgt, &kp, &train_cfg, bench.train_steps)?;
    let n_trials = if alternative { bench.trials } else { bench.null_trials };
    let (mut rej_med, mut rej_deep) = (0usize, 0usize);
    for trial in 0..n_trials {
        let (xs, xt) = bench.blob.sample(bench.n, alternative, &mut rng);
        let med = GaussianKernel::median_heuristic(&xs.vstack(&xt)?);
        let test_seed: u64 = rng.gen();
        for (name, out) in [
            ("median_gaussian", permutation_test(&xs, &xt, &med, ts, test_seed)?),
            ("deep", permutation_test(&xs, &xt, &kp, ts, test_seed)?),
        ] {
            if out.reject {
                if name == "deep" {
                    rej_deep += 1;
                } else {
                    rej_med += 1;
                }
            }
            sink(&BenchTrial {
                trial,
                kernel: name.to_string(),
                alternative,
                statistic: out.statistic,
                threshold: out.threshold,
                p_value: out.p_value,
                reject: out.reject,
            })?;
        }
    }
    let rate = |k: usize| if n_trials == 0 { 0.0 } else { k as f64 / n_trials as f64 };
    Ok(BenchSummary {
        alternative,
        trials: n_trials,
        median_rejection_rate: rate(rej_med),
        deep_rejection_rate: rate(rej_deep),
        j_first: trace.j_values.first().copied().unwrap_or(f64::NAN),
        j_last: trace.j_values.last().copied().unwrap_or(f64::NAN),
    })
}

/// Type-I rate of the median-heuristic permutation test on blob nulls.
pub fn null_calibration(bench: &BenchConfig, ts: &TwoSampleConfig, seed: u64) -> Result<f64> {
    bench.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejections = 0;
    for _ in 0..bench.null_trials {
        let (xs, xt) = bench.blob.sample(bench.n, false, &mut rng);
        let k = GaussianKernel::median_heuristic(&xs.vstack(&xt)?);
        if permutation_test(&xs, &xt, &k, ts, rng.gen())?.reject {
            rejections += 1;
        }
    }
    Ok(rejections as f64 / bench.null_trials.max(1) as f64)
}
