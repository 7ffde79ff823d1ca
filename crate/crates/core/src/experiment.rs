//! Experiment configuration and the on-disk run layout shared by the CLI
//! and the end-to-end tests.
//!
//! ```text
//! <output_dir>/data/stage{t}/manifest.json   stage datasets
//! <output_dir>/data/full/manifest.json       fully labeled val/test
//! <output_dir>/runs/<mode>/stage{t}.ckpt
//! <output_dir>/runs/<mode>/stage{t}.log.jsonl
//! <output_dir>/runs/<mode>/eval_stage{t}.csv
//! ```

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{full_manifest_path, generate, stage_manifest_path, Dataset, GeneratedData, GeneratorConfig, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Category, ModelConfig};
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, Mode, StageRun, StageSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub categories: Vec<u8>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointEntry {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Per-stage overrides; empty means one entry per generator stage.
    pub stages: Vec<StageEntry>,
    pub joint: JointEntry,
    pub modes: Vec<Mode>,
    pub output_dir: PathBuf,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stages: Vec::new(),
            joint: JointEntry::default(),
            modes: Mode::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
            eval_batch_size: 8,
        }
    }
}

/// How far [`Experiment::train`] got.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    Complete(Vec<PathBuf>),
    Interrupted { stage: usize, epochs_done: usize },
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Run only this stage (its predecessor's checkpoint must exist).
    pub only_stage: Option<usize>,
    /// Stop after this many epochs in total, leaving a mid-stage checkpoint.
    pub interrupt_after: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.modes.is_empty() {
            return Err(Error::Config("no modes selected".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be at least 1".into()));
        }
        if !self.stages.is_empty() {
            if self.stages.len() != self.data.stages.len() {
                return Err(Error::Config(format!(
                    "{} stage entries for {} generated stage datasets",
                    self.stages.len(),
                    self.data.stages.len()
                )));
            }
            for (t, (s, ids)) in self.stages.iter().zip(&self.data.stages).enumerate() {
                if &s.categories != ids {
                    return Err(Error::Config(format!(
                        "stage {} lists categories {:?} but its dataset labels {ids:?}",
                        t + 1,
                        s.categories
                    )));
                }
                if s.epochs == Some(0) {
                    return Err(Error::Config(format!("stage {} has zero epochs", t + 1)));
                }
            }
        }
        if self.joint.epochs == Some(0) {
            return Err(Error::Config("joint training has zero epochs".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.data.stages.len()
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    fn categories(&self, ids: &[u8]) -> Vec<Category> {
        let all = self.data.categories();
        ids.iter()
            .filter_map(|id| all.iter().find(|c| c.id == *id).cloned())
            .collect()
    }

    pub fn stage_spec(&self, stage: usize, mode: Mode) -> Result<StageSpec> {
        if stage == 0 || stage > self.num_stages() {
            return Err(Error::Config(format!("stage {stage} outside 1..={}", self.num_stages())));
        }
        let entry = self.stages.get(stage - 1);
        let default_lr = if stage == 1 { self.train.lr_first } else { self.train.lr_later };
        Ok(StageSpec {
            stage,
            mode,
            new_categories: self.categories(&self.data.stages[stage - 1]),
            epochs: entry.and_then(|e| e.epochs).unwrap_or(self.train.epochs),
            lr: entry.and_then(|e| e.lr).unwrap_or(default_lr),
            seed: self.seed,
            train: self.train.clone(),
        })
    }

    pub fn joint_spec(&self) -> StageSpec {
        let first = self.stages.first();
        let all: Vec<u8> = self.data.stages.iter().flatten().copied().collect();
        StageSpec {
            stage: self.num_stages(),
            mode: Mode::Joint,
            new_categories: self.categories(&all),
            epochs: self
                .joint
                .epochs
                .or(first.and_then(|e| e.epochs))
                .unwrap_or(self.train.epochs),
            lr: self.joint.lr.or(first.and_then(|e| e.lr)).unwrap_or(self.train.lr_first),
            seed: self.seed,
            train: self.train.clone(),
        }
    }
}

/// A configuration bound to its output directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    data_root: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data_root = config.output_dir.join("data");
        Ok(Experiment { config, data_root })
    }

    /// Read and write datasets under `dir` instead of `<output_dir>/data`.
    pub fn with_data_root(mut self, dir: PathBuf) -> Self {
        self.data_root = dir;
        self
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root.clone()
    }

    pub fn runs_root(&self) -> PathBuf {
        self.config.output_dir.join("runs")
    }

    pub fn run_dir(&self, mode: Mode) -> PathBuf {
        self.runs_root().join(mode.name())
    }

    pub fn checkpoint_path(&self, mode: Mode, stage: usize) -> PathBuf {
        self.run_dir(mode).join(format!("stage{stage}.ckpt"))
    }

    pub fn log_path(&self, mode: Mode, stage: usize) -> PathBuf {
        self.run_dir(mode).join(format!("stage{stage}.log.jsonl"))
    }

    pub fn eval_path(&self, mode: Mode, stage: usize) -> PathBuf {
        self.run_dir(mode).join(format!("eval_stage{stage}.csv"))
    }

    pub fn generate_data(&self) -> Result<GeneratedData> {
        generate(&self.config.data, self.config.seed, &self.data_root())
    }

    pub fn train_split(&self, stage: usize) -> Result<Dataset> {
        Manifest::load(&stage_manifest_path(&self.data_root(), stage))?.load_split(Split::Train)
    }

    pub fn full_split(&self, split: Split) -> Result<Dataset> {
        Manifest::load(&full_manifest_path(&self.data_root()))?.load_split(split)
    }

    /// Score a checkpoint on the fully labeled validation split.
    pub fn evaluate_checkpoint(&self, ckpt: &Checkpoint) -> Result<MetricsReport> {
        let val = self.full_split(Split::Val)?;
        evaluate(&ckpt.model, &val, ckpt.stage, self.config.eval_batch_size)
    }

    /// Stages a mode trains, in order.
    pub fn stages_of(&self, mode: Mode) -> Vec<usize> {
        match mode {
            Mode::Joint => vec![self.config.num_stages()],
            _ => (1..=self.config.num_stages()).collect(),
        }
    }

    /// Train one mode through all its stages, writing checkpoints, logs
    /// and validation reports.
    pub fn train(&self, mode: Mode, opts: &TrainOptions) -> Result<TrainOutcome> {
        let dir = self.run_dir(mode);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let stages = match opts.only_stage {
            Some(s) if !self.stages_of(mode).contains(&s) => {
                return Err(Error::Config(format!("mode {mode} has no stage {s}")));
            }
            Some(s) => vec![s],
            None => self.stages_of(mode),
        };
        let mut budget = opts.interrupt_after;
        let mut written = Vec::new();
        for stage in stages {
            let path = self.checkpoint_path(mode, stage);
            let spec = match mode {
                Mode::Joint => self.config.joint_spec(),
                _ => self.config.stage_spec(stage, mode)?,
            };
            let existing = if opts.resume && path.exists() {
                Some(load_checkpoint(&path)?)
            } else {
                None
            };
            let mut run = match existing {
                Some(ckpt) if ckpt.resume.is_none() => {
                    if ckpt.spec != spec {
                        return Err(Error::Config(format!(
                            "{} was trained with a different configuration",
                            path.display()
                        )));
                    }
                    log::info!("{mode} stage {stage}: already complete");
                    written.push(path);
                    continue;
                }
                Some(ckpt) => {
                    let data = self.training_data(mode, stage)?;
                    let run = StageRun::resume(ckpt, spec, data)?;
                    truncate_log(&self.log_path(mode, stage), run.iteration())?;
                    log::info!("{mode} stage {stage}: resuming after epoch {}", run.epochs_done());
                    run
                }
                None => {
                    let prev = if mode == Mode::Joint || stage == 1 {
                        None
                    } else {
                        let p = self.checkpoint_path(mode, stage - 1);
                        if !p.exists() {
                            return Err(Error::Lineage(format!(
                                "stage {stage} needs the stage {} checkpoint at {}",
                                stage - 1,
                                p.display()
                            )));
                        }
                        Some(load_checkpoint(&p)?)
                    };
                    let data = self.training_data(mode, stage)?;
                    let run = StageRun::start(prev.as_ref(), spec, &self.config.model_config(), data)?;
                    truncate_log(&self.log_path(mode, stage), 0)?;
                    run
                }
            };
            run.set_log_reference(Some(format!("stage{stage}.log.jsonl")));
            let log_path = self.log_path(mode, stage);
            let mut log_file = OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)
                .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
            let mut sink = |rec: &crate::train::LogRecord| -> Result<()> {
                log_file
                    .write_all(rec.to_json_line().as_bytes())
                    .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))
            };
            while !run.is_complete() {
                if budget == Some(0) {
                    save_checkpoint(&run.checkpoint(), &path)?;
                    return Ok(TrainOutcome::Interrupted {
                        stage,
                        epochs_done: run.epochs_done(),
                    });
                }
                run.run_epochs(1, &mut sink)?;
                budget = budget.map(|b| b - 1);
                log::info!("{mode} stage {stage}: epoch {}/{}", run.epochs_done(), run.spec().epochs);
            }
            let ckpt = run.finish()?;
            save_checkpoint(&ckpt, &path)?;
            let report = self.evaluate_checkpoint(&ckpt)?;
            let eval = self.eval_path(mode, stage);
            std::fs::write(&eval, report.to_csv()).map_err(|e| Error::io(format!("writing {}", eval.display()), e))?;
            log::info!(
                "{mode} stage {stage}: mean validation DC {}",
                report.mean_dc().map_or("-".into(), |v| format!("{v:.3}"))
            );
            written.push(path);
        }
        Ok(TrainOutcome::Complete(written))
    }

    fn training_data(&self, mode: Mode, stage: usize) -> Result<Dataset> {
        match mode {
            Mode::Joint => Dataset::concat(
                (1..=self.config.num_stages())
                    .map(|t| self.train_split(t))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => self.train_split(stage),
        }
    }
}

/// Keep the first `lines` records of a training log (creating it if absent).
fn truncate_log(path: &Path, lines: usize) -> Result<()> {
    let io = |e| Error::io(format!("rewriting {}", path.display()), e);
    let kept: Vec<String> = if lines == 0 || !path.exists() {
        Vec::new()
    } else {
        let f = std::fs::File::open(path).map_err(io)?;
        BufReader::new(f).lines().take(lines).collect::<std::io::Result<_>>().map_err(io)?
    };
    if kept.len() < lines {
        return Err(Error::Lineage(format!(
            "{} holds {} records but the checkpoint is at iteration {lines}",
            path.display(),
            kept.len()
        )));
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io)
}
