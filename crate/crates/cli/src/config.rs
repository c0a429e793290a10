//! Run configuration: one TOML file, then the smoke profile, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use recdepth::data::{Corridor, World};
use recdepth::{EvalConfig, Mode, ModelConfig, SparsePattern, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Dataset root in the KITTI raw layout, with split files under `splits/`.
    pub data_root: PathBuf,
    /// Checkpoint, training log and reports go here.
    pub out_dir: PathBuf,
    /// Sparse input drawn from ground truth for completion.
    pub pattern: SparsePattern,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SelfComp,
            seed: 0,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            pattern: SparsePattern::Random { count: 200 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Synthetic dataset written by `synth`. The last `val + test` sequences
/// go to the validation and test splits, the rest to training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub val: usize,
    pub test: usize,
    /// Start of the first trajectory along the corridor.
    pub start_z: f64,
    /// Distance between consecutive trajectory starts.
    pub spacing: f64,
    pub supersample: usize,
    pub world: World,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 200,
            val: 1,
            test: 1,
            start_z: 5.0,
            spacing: 45.0,
            supersample: 2,
            world: World::Corridor(Corridor {
                end_z: 1000.0,
                texture_seed: 7,
                ..Corridor::default()
            }),
        }
    }
}

/// Grid for `eval --sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub points: Vec<usize>,
    pub lines: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            points: vec![50, 200, 500],
            lines: Vec::new(),
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub pattern: Option<SparsePattern>,
    pub points: Option<usize>,
    pub lines: Option<usize>,
    pub seed: Option<u64>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub smoke: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    /// Tiny model and a 50-iteration schedule.
    pub fn apply_smoke(&mut self) {
        self.model = ModelConfig {
            recurrent: self.model.recurrent,
            lstm_activation: self.model.lstm_activation,
            ..ModelConfig::smoke()
        };
        self.train.batch_size = 2;
        self.train.stage1_epochs = 1;
        self.train.stage2_epochs = 1;
        self.train.subseq_length = 10;
        self.train.max_steps_per_epoch = Some(25);
        self.synth.sequences = 3;
        self.synth.frames = 24;
        self.synth.supersample = 1;
    }

    pub fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        if o.smoke {
            self.apply_smoke();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        let picked = [o.pattern.is_some(), o.points.is_some(), o.lines.is_some()];
        if picked.iter().filter(|&&b| b).count() > 1 {
            bail!("--pattern, --points and --lines are mutually exclusive");
        }
        if let Some(p) = o.pattern {
            self.pattern = p;
        }
        if let Some(n) = o.points {
            self.pattern = SparsePattern::Random { count: n };
        }
        if let Some(n) = o.lines {
            self.pattern = SparsePattern::Lines { num_lines: n };
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = &o.data_root {
            self.data_root = r.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.train.seed = self.seed;
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let s = &self.synth;
        if s.frames == 0 || s.supersample == 0 {
            bail!("synth.frames and synth.supersample must be positive");
        }
        if s.val + s.test >= s.sequences {
            bail!(
                "synth needs at least one training sequence ({} requested, {} held out)",
                s.sequences,
                s.val + s.test
            );
        }
        if matches!(self.pattern, SparsePattern::Random { count: 0 } | SparsePattern::Lines { num_lines: 0 }) {
            bail!("sparse pattern `{}` selects nothing", self.pattern);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> anyhow::Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}
