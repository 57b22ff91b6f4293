use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::MetaGradMode;
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::meta::MetaConfig;
use crate::networks::NetworkConfig;
use crate::stream::StreamConfig;
use crate::twosample::TwoSampleConfig;

use super::bench::BenchConfig;

/// Settings of the run itself rather than of any model part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Write a checkpoint every this many outer iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Dump the training state when a loss turns non-finite.
    pub dump_on_failure: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 0,
            dump_on_failure: true,
        }
    }
}

/// Whole configuration, one TOML section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub stream: StreamConfig,
    pub network: NetworkConfig,
    pub kernel: KernelConfig,
    pub twosample: TwoSampleConfig,
    pub meta: MetaConfig,
    pub bench: BenchConfig,
    pub run: RunConfig,
}

fn collect(errs: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(list)) => errs.extend(list),
        Err(e) => errs.push(e.to_string()),
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dump_defaults() -> String {
        Self::default().to_toml()
    }

    /// Checks every section and the constraints between them; the error
    /// lists every violated field.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        collect(&mut errs, self.stream.validate());
        collect(&mut errs, self.network.validate());
        collect(&mut errs, self.kernel.validate());
        collect(&mut errs, self.twosample.validate());
        collect(&mut errs, self.meta.validate());
        collect(&mut errs, self.bench.validate());
        let depth = self.stream.n_meta_train * self.meta.inner_steps_per_domain;
        if self.meta.meta_grad_mode == MetaGradMode::Unrolled && depth > self.meta.max_unroll_depth {
            errs.push(format!(
                "meta.max_unroll_depth {} is below stream.n_meta_train x meta.inner_steps_per_domain = {depth}",
                self.meta.max_unroll_depth
            ));
        }
        if self.stream.n_support > self.stream.n_source {
            errs.push(format!(
                "stream.n_support {} exceeds stream.n_source {}",
                self.stream.n_support, self.stream.n_source
            ));
        }
        if self.stream.n_support < 2 || self.stream.n_query < 2 {
            errs.push("stream.n_support and stream.n_query must be >= 2".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
