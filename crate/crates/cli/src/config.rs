//! The `--config` file: one TOML document with optional sections for every
//! subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use semtraj::dataset::{DatasetConfig, Generator};
use semtraj::language::{LabelSet, Lexicon};
use semtraj::train::TrainConfig;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Used when `--seed` is not given.
    pub seed: Option<u64>,
    /// Lexicon file replacing the bundled one.
    pub lexicon: Option<PathBuf>,
    /// Label list replacing the bundled one.
    pub labels: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// Training settings; absent means the `--preset`.
    pub train: Option<TrainConfig>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        match &self.lexicon {
            Some(p) => Ok(Lexicon::load(p)?),
            None => Ok(Lexicon::default()),
        }
    }

    pub fn generator(&self) -> Result<Generator> {
        let lexicon = self.lexicon()?;
        let labels = match &self.labels {
            Some(p) => LabelSet::load(p, &lexicon)?,
            None => LabelSet::default_for(&lexicon)?,
        };
        Ok(Generator::new(self.dataset.clone(), lexicon, labels))
    }

    /// `cli` if given, else the file's seed, else `fallback`.
    pub fn seed(&self, cli: Option<u64>, fallback: u64) -> u64 {
        cli.or(self.seed).unwrap_or(fallback)
    }
}
