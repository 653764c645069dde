//! Reproducible experiment runners.
//!
//! Every runner is a pure function of its configuration: rows are produced
//! in index order from per-item seed streams, so the same configuration
//! always yields byte-identical CSV.

mod demos;
mod sweeps;

pub use demos::{AdversarialConfig, BvDemoConfig, CascadeConfig, TheoremDemoConfig};
pub use sweeps::{GammaConfig, Lemma1Config, Lemma2Config, SubmartingaleConfig, WaveconeConfig};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fourier::bv_space;
use crate::space::ConstraintSpace;

/// Largest branching factor accepted without an override.
pub const MAX_Q: usize = 5;
/// Largest number of leaves accepted without an override (`3¹²`).
pub const MAX_LEAVES: usize = 531_441;
/// Largest torus side accepted without an override.
pub const MAX_M: usize = 4;

/// Where a constraint space comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpaceSource {
    Full { q: usize, l: usize },
    Zero { q: usize, l: usize },
    Bv { m: usize },
    File { path: PathBuf },
}

impl SpaceSource {
    pub fn load(&self) -> Result<ConstraintSpace> {
        match self {
            SpaceSource::Full { q, l } => Ok(ConstraintSpace::full(*q, *l)),
            SpaceSource::Zero { q, l } => Ok(ConstraintSpace::zero(*q, *l)),
            SpaceSource::Bv { m } => bv_space(*m),
            SpaceSource::File { path } => ConstraintSpace::load(path),
        }
    }

    /// `q`, when known without loading.
    fn q(&self) -> Option<usize> {
        match self {
            SpaceSource::Full { q, .. } | SpaceSource::Zero { q, .. } => Some(*q),
            SpaceSource::Bv { m } => Some(m * m),
            SpaceSource::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Gamma(GammaConfig),
    Wavecone(WaveconeConfig),
    Lemma1(Lemma1Config),
    Lemma2(Lemma2Config),
    Submartingale(SubmartingaleConfig),
    Cascade(CascadeConfig),
    TheoremDemo(TheoremDemoConfig),
    BvDemo(BvDemoConfig),
    Adversarial(AdversarialConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Gamma(_) => "gamma",
            ExperimentConfig::Wavecone(_) => "wavecone",
            ExperimentConfig::Lemma1(_) => "lemma1",
            ExperimentConfig::Lemma2(_) => "lemma2",
            ExperimentConfig::Submartingale(_) => "submartingale",
            ExperimentConfig::Cascade(_) => "cascade",
            ExperimentConfig::TheoremDemo(_) => "theorem-demo",
            ExperimentConfig::BvDemo(_) => "bv-demo",
            ExperimentConfig::Adversarial(_) => "adversarial",
        }
    }

    /// Desk-scale guard: `q ≤ 5`, at most `3¹²` leaves, `m ≤ 4`.
    pub fn check_limits(&self) -> std::result::Result<(), String> {
        let tree = |q: Option<usize>, depth: usize| -> std::result::Result<(), String> {
            let Some(q) = q else { return Ok(()) };
            if q > MAX_Q {
                return Err(format!("q = {q} exceeds the limit {MAX_Q}"));
            }
            let leaves = (q as f64).powi(depth as i32);
            if leaves > MAX_LEAVES as f64 {
                return Err(format!(
                    "q = {q}, depth = {depth} gives {leaves} leaves, more than {MAX_LEAVES}"
                ));
            }
            Ok(())
        };
        let torus = |m: usize| -> std::result::Result<(), String> {
            if m > MAX_M {
                Err(format!("m = {m} exceeds the limit {MAX_M}"))
            } else {
                Ok(())
            }
        };
        match self {
            ExperimentConfig::Gamma(c) => match &c.space {
                Some(SpaceSource::Bv { m }) => torus(*m),
                Some(s) => tree(s.q(), 0),
                None => Ok(()),
            },
            ExperimentConfig::Wavecone(c) => match &c.space {
                SpaceSource::Bv { m } => torus(*m),
                s => tree(s.q(), 0),
            },
            ExperimentConfig::Lemma1(c) => tree(Some(c.q), 0),
            ExperimentConfig::Lemma2(c) => tree(Some(c.q), 0),
            ExperimentConfig::Submartingale(c) => match c.measure {
                Some(_) => Ok(()),
                None => tree(Some(c.q), c.depth),
            },
            ExperimentConfig::Cascade(c) => {
                if let SpaceSource::Bv { m } = c.space {
                    torus(m)?;
                }
                tree(c.space.q(), c.cascade.depth)
            }
            ExperimentConfig::TheoremDemo(c) => {
                torus(c.m).and_then(|_| tree(Some(c.m * c.m), c.depth))
            }
            ExperimentConfig::BvDemo(c) => torus(c.m),
            ExperimentConfig::Adversarial(c) => {
                torus(c.m).and_then(|_| tree(Some(c.m * c.m), c.depth))
            }
        }
    }
}

/// A named output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub experiment: &'static str,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
    /// Number of invariant violations detected.
    pub violations: usize,
}

impl ExperimentOutput {
    pub fn artifact(&self, file_name: &str) -> Option<&str> {
        self.artifacts
            .iter()
            .find(|a| a.file_name == file_name)
            .map(|a| a.contents.as_str())
    }
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config {
        ExperimentConfig::Gamma(c) => sweeps::run_gamma(c),
        ExperimentConfig::Wavecone(c) => sweeps::run_wavecone(c),
        ExperimentConfig::Lemma1(c) => sweeps::run_lemma1(c),
        ExperimentConfig::Lemma2(c) => sweeps::run_lemma2(c),
        ExperimentConfig::Submartingale(c) => sweeps::run_submartingale(c),
        ExperimentConfig::Cascade(c) => demos::run_cascade(c),
        ExperimentConfig::TheoremDemo(c) => demos::run_theorem_demo(c),
        ExperimentConfig::BvDemo(c) => demos::run_bv_demo(c),
        ExperimentConfig::Adversarial(c) => demos::run_adversarial(c),
    }
}

pub(crate) fn csv_artifact<T: Serialize>(file_name: &str, rows: &[T]) -> Result<Artifact> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(Artifact {
        file_name: file_name.to_string(),
        contents: String::from_utf8(bytes).expect("csv writer emits utf-8"),
    })
}

pub(crate) fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}
