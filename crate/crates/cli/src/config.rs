//! Run configuration: one TOML file, then command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use fracpos::data::SplitConfig;
use fracpos::{HeadKind, Mode, ModelConfig, PeScheme, Task, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Unset picks incremental whenever the model allows it.
    pub mode: Option<Mode>,
    pub eos_penalty: f64,
    pub beam_size: usize,
    /// Source tokens per decode batch.
    pub budget: usize,
    pub max_len: Option<usize>,
    /// EOS penalties tried by `sweep-eos`.
    pub eos_grid: Vec<f64>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: None,
            eos_penalty: 0.0,
            beam_size: 1,
            budget: 1024,
            max_len: None,
            eos_grid: (0..=10).map(|i| i as f64 * 0.5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub budgets: Vec<usize>,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            budgets: vec![64, 256, 1024],
            warmup: 1,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub data: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            data: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags that override config values. Every field is optional.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// One seed for data, initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Positional scheme: abs, rel or fpe.
    #[arg(long)]
    pub pe: Option<PeScheme>,
    /// Output head: insertion or l2r.
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decode mode: recompute or incremental.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub eos_penalty: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s {
        "insertion" => Ok(HeadKind::Insertion),
        "l2r" => Ok(HeadKind::L2r),
        other => Err(format!("unknown head `{other}`")),
    }
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.data.seed = s;
            c.model.seed = s;
            c.train.seed = s;
        }
        if let Some(t) = self.task {
            c.task = t;
        }
        if let Some(p) = self.pe {
            c.model.pe_scheme = p;
        }
        if let Some(h) = self.head {
            c.model.head = h;
        }
        if let Some(s) = self.steps {
            c.train.steps = s;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.train.peak_lr = lr;
        }
        if self.mode.is_some() {
            c.decode.mode = self.mode;
        }
        if let Some(b) = self.eos_penalty {
            c.decode.eos_penalty = b;
        }
        if let Some(b) = self.beam {
            c.decode.beam_size = b;
        }
        if let Some(b) = self.budget {
            c.decode.budget = b;
        }
        Ok(c)
    }
}
