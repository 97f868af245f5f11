//! The single JSON file that drives every subcommand.
//!
//! Every key is required, so a missing one fails with its name. The global
//! `seed` is the only seed: sections that have one of their own get it
//! derived from the global value, and setting it per section is rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use oral3d_core::metrics::SsimConfig;
use oral3d_core::{DeformConfig, PhantomSpec, SynthConfig};
use oral3d_nn::{ArchDescriptor, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Context, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub phantom: PhantomSpec,
    pub synth: SynthConfig,
    pub arch: ArchDescriptor,
    pub train: TrainConfig,
    pub deform: DeformConfig,
    pub metrics: MetricConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Experiment directory; every artifact path is derived from it.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub phantoms: usize,
    pub split: SplitRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    /// Dice threshold.
    pub tau: f64,
    pub ssim: SsimConfig,
}

/// Train/validation/test proportions written as `"a:b:c"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SplitRatio(pub [usize; 3]);

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("split ratio {s:?} is not of the form a:b:c"));
        let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let parts: [usize; 3] = parts.try_into().map_err(|_| bad())?;
        if parts.iter().sum::<usize>() == 0 {
            return Err(Error::Config(format!("split ratio {s:?} has no nonzero part")));
        }
        Ok(Self(parts))
    }
}

impl TryFrom<String> for SplitRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SplitRatio> for String {
    fn from(r: SplitRatio) -> Self {
        r.to_string()
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a}:{b}:{c}")
    }
}

/// Independent seed streams derived from the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Phantom = 1,
    Split = 2,
    Train = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index)
}

const SEEDED_SECTIONS: [&str; 3] = ["phantom", "synth", "train"];

impl PipelineConfig {
    /// Parses and validates; `seed` and `out` override the file's values.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_json(&text).at(path)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.paths.out = o.to_path_buf();
        }
        cfg.validate().at(path)?;
        Ok(cfg.seeded())
    }

    /// Parses without validating.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        for section in SEEDED_SECTIONS {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!("{section}.seed is not allowed; set the top-level seed")));
            }
        }
        serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))
    }

    /// Section seeds derived from the global one.
    pub fn seeded(mut self) -> Self {
        self.phantom.seed = derive_seed(self.seed, Stream::Phantom, 0);
        self.synth.seed = self.seed;
        self.train.seed = derive_seed(self.seed, Stream::Train, 0);
        self
    }

    pub fn phantom_spec(&self, index: usize) -> PhantomSpec {
        self.phantom.with_seed(derive_seed(self.seed, Stream::Phantom, index as u64))
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, Stream::Split, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.paths.out.as_os_str().is_empty() {
            return cfg("paths.out is empty".into());
        }
        if self.dataset.phantoms == 0 {
            return cfg("dataset.phantoms must be >= 1".into());
        }
        let [train, _, test] = crate::split::split_counts(self.dataset.phantoms, self.dataset.split);
        if train == 0 || test == 0 {
            return cfg(format!(
                "dataset.split {} leaves an empty train or test set for {} phantoms",
                self.dataset.split, self.dataset.phantoms
            ));
        }
        self.phantom.validate().map_err(|e| Error::Config(format!("phantom: {e}")))?;
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        self.arch.validate().map_err(|e| Error::Config(format!("arch: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.train.check_against(&self.arch).map_err(|e| Error::Config(format!("train: {e}")))?;
        self.deform.validate().map_err(|e| Error::Config(format!("deform: {e}")))?;
        self.metrics.ssim.validate().map_err(|e| Error::Config(format!("metrics.ssim: {e}")))?;
        if !(-1.0..=1.0).contains(&self.metrics.tau) {
            return cfg(format!("metrics.tau {} outside [-1, 1]", self.metrics.tau));
        }
        let [nx, ny, nz] = self.phantom.dims;
        let pairs: [(&str, usize, &str, usize); 5] = [
            ("arch.in_w", self.arch.in_w, "synth.w", self.synth.w),
            ("arch.in_h", self.arch.in_h, "phantom.dims[2]", nz),
            ("arch.depth", self.arch.depth, "synth.d", self.synth.d),
            ("deform.out_w", self.deform.out_w, "phantom.dims[0]", nx),
            ("deform.out_d", self.deform.out_d, "phantom.dims[1]", ny),
        ];
        for (a, va, b, vb) in pairs {
            if va != vb {
                return cfg(format!("{a} ({va}) must equal {b} ({vb})"));
            }
        }
        if self.deform.depth_step != self.synth.depth_step {
            return cfg(format!(
                "deform.depth_step ({}) must equal synth.depth_step ({})",
                self.deform.depth_step, self.synth.depth_step
            ));
        }
        let reach = (self.synth.d as f64 - 1.0) / 2.0 * self.synth.depth_step;
        if self.synth.d_half > reach {
            return cfg(format!(
                "synth.d_half ({}) exceeds the flattened depth reach (d - 1) / 2 * depth_step = {reach}",
                self.synth.d_half
            ));
        }
        if nz < self.metrics.ssim.window || nx < self.metrics.ssim.window || ny < self.metrics.ssim.window {
            return cfg(format!("phantom.dims {:?} smaller than metrics.ssim.window", self.phantom.dims));
        }
        Ok(())
    }
}
