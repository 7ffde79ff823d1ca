use rand::seq::index::sample as sample_indices;

use super::checkpoint::{Checkpoint, ResumeState, RngState};
use super::optim::{poly_lr, Optimizer};
use super::{LogRecord, Mode, StageSpec};
use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{kd_loss, remap_hat, remap_tilde, remap_tilde_per_sample, seg_loss, seg_loss_per_sample, softmax_channels, LabelSpace, SegLossWeights};
use crate::memory::{class_mean, mask_positions, mem_loss, oppo_loss, same_loss, MemoryBank};
use crate::model::{FrozenModel, ModelConfig, ModelOutput, SegModel};
use crate::rng::{derive_seed, stream, TAG_BACKGROUND, TAG_SHUFFLE};
use crate::tensor::Tensor;

/// Tape handles of the objective's terms; `total` already carries the weights.
pub struct LossTerms {
    pub total: Var,
    pub seg: Var,
    pub kd: Var,
    pub mem: Var,
    pub same: Var,
    pub oppo: Var,
}

/// Supervision derived from a batch before the forward pass.
struct Targets {
    /// Channel index per voxel.
    gt: Vec<u8>,
    old_probs: Option<Tensor>,
    /// Argmax channel of the frozen model per voxel.
    pseudo: Option<Vec<u8>>,
}

/// A stage in progress.
pub struct StageRun {
    spec: StageSpec,
    data: Dataset,
    model: SegModel,
    teacher: Option<FrozenModel>,
    bank: Option<MemoryBank>,
    optimizer: Optimizer,
    epochs_done: usize,
    iteration: usize,
    log: Option<String>,
}

fn check_data(spec: &StageSpec, data: &Dataset) -> Result<()> {
    let ids: Vec<u8> = spec.new_categories.iter().map(|c| c.id).collect();
    for (i, s) in data.samples.iter().enumerate() {
        if let Some(id) = s.annotated.iter().find(|id| !ids.contains(id)) {
            return Err(Error::CategoryMismatch(format!(
                "training sample {i} annotates category {id}, which stage {} does not introduce ({ids:?})",
                spec.stage
            )));
        }
    }
    for c in &data.categories {
        if let Some(n) = spec.new_categories.iter().find(|n| n.id == c.id && n.name != c.name) {
            return Err(Error::CategoryMismatch(format!(
                "category {} is {:?} in the data but {:?} in the stage",
                c.id, c.name, n.name
            )));
        }
    }
    Ok(())
}

impl StageRun {
    /// Prepare a stage: expand the previous model's head (or build a fresh
    /// model for the first stage and for joint training) and freeze a copy
    /// of the previous model as the teacher.
    pub fn start(prev: Option<&Checkpoint>, spec: StageSpec, model_config: &ModelConfig, data: Dataset) -> Result<Self> {
        spec.validate()?;
        check_data(&spec, &data)?;
        let fresh_bank = |model: &SegModel| -> Result<MemoryBank> {
            MemoryBank::new(model.config().feature_channels, spec.train.memory_m0, spec.train.memory_power)
        };
        let (model, teacher, mut bank) = match prev {
            None => {
                if spec.stage != 1 && spec.mode != Mode::Joint {
                    return Err(Error::Lineage(format!(
                        "stage {} needs the checkpoint of stage {}",
                        spec.stage,
                        spec.stage - 1
                    )));
                }
                let model = SegModel::build(model_config.clone(), spec.new_categories.clone())?;
                let bank = if spec.mode.uses_memory() {
                    let mut b = fresh_bank(&model)?;
                    b.add_categories(&spec.new_categories.iter().map(|c| c.id).collect::<Vec<_>>())?;
                    Some(b)
                } else {
                    None
                };
                (model, None, bank)
            }
            Some(prev) => {
                if spec.mode == Mode::Joint || spec.stage == 1 {
                    return Err(Error::Lineage(format!("{} stage {} starts from scratch", spec.mode, spec.stage)));
                }
                if prev.resume.is_some() {
                    return Err(Error::Lineage(format!("stage {} checkpoint is unfinished; resume it first", prev.stage)));
                }
                if prev.stage + 1 != spec.stage || prev.mode != spec.mode {
                    return Err(Error::Lineage(format!(
                        "stage {} ({}) cannot follow a stage {} ({}) checkpoint",
                        spec.stage, spec.mode, prev.stage, prev.mode
                    )));
                }
                if let Some(c) = spec.new_categories.iter().find(|c| prev.model.channel_of(c.id).is_some()) {
                    return Err(Error::CategoryMismatch(format!(
                        "category {} ({}) is already in the registry",
                        c.id, c.name
                    )));
                }
                let model = prev.model.expand_head(&spec.new_categories)?;
                let teacher = spec.mode.uses_distillation().then(|| prev.model.freeze());
                let bank = if spec.mode.uses_memory() {
                    let mut b = prev
                        .bank
                        .clone()
                        .ok_or_else(|| Error::Lineage("previous checkpoint carries no memory bank".into()))?;
                    b.add_categories(&spec.new_categories.iter().map(|c| c.id).collect::<Vec<_>>())?;
                    Some(b)
                } else {
                    None
                };
                (model, teacher, bank)
            }
        };
        let iters = data.iterations_per_epoch(spec.train.batch_size);
        if let Some(b) = &mut bank {
            b.set_schedule(spec.epochs * iters)?;
            if b.len() != model.registry().len() {
                return Err(Error::Memory("bank rows do not match the category registry".into()));
            }
        }
        let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
        let optimizer = Optimizer::new(spec.train.optimizer, &sizes);
        Ok(StageRun {
            spec,
            data,
            model,
            teacher,
            bank,
            optimizer,
            epochs_done: 0,
            iteration: 0,
            log: None,
        })
    }

    /// Continue an interrupted stage from a mid-stage checkpoint.
    pub fn resume(ckpt: Checkpoint, spec: StageSpec, data: Dataset) -> Result<Self> {
        let Some(state) = ckpt.resume else {
            return Err(Error::Lineage(format!("stage {} checkpoint is already complete", ckpt.stage)));
        };
        if ckpt.spec != spec {
            return Err(Error::Config("resume configuration differs from the interrupted run".into()));
        }
        check_data(&spec, &data)?;
        let needs_teacher = spec.mode.uses_distillation() && spec.stage > 1;
        if needs_teacher != state.teacher.is_some() {
            return Err(Error::Lineage("interrupted checkpoint has an inconsistent teacher".into()));
        }
        if spec.mode.uses_memory() != ckpt.bank.is_some() {
            return Err(Error::Lineage("interrupted checkpoint has an inconsistent memory bank".into()));
        }
        Ok(StageRun {
            spec,
            data,
            model: ckpt.model,
            teacher: state.teacher.map(|t| t.freeze()),
            bank: ckpt.bank,
            optimizer: state.optimizer,
            epochs_done: state.epochs_done,
            iteration: ckpt.rng.iteration,
            log: ckpt.log,
        })
    }

    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn teacher(&self) -> Option<&FrozenModel> {
        self.teacher.as_ref()
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_complete(&self) -> bool {
        self.epochs_done >= self.spec.epochs
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.data.iterations_per_epoch(self.spec.train.batch_size)
    }

    /// Reference to the training log recorded in checkpoints.
    pub fn set_log_reference(&mut self, log: Option<String>) {
        self.log = log;
    }

    fn batch_seed(&self) -> u64 {
        derive_seed(self.spec.seed, &[TAG_SHUFFLE, self.spec.stage as u64])
    }

    /// The batches of epoch `epoch`, identical whenever they are requested.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Batch>> {
        let t = &self.spec.train;
        self.data.epoch_batches(t.batch_size, self.batch_seed(), epoch as u64, t.augment)
    }

    /// Train up to `epochs` further epochs (stopping at the configured total),
    /// passing each iteration's record to `sink`.
    pub fn run_epochs(&mut self, epochs: usize, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        let end = (self.epochs_done + epochs).min(self.spec.epochs);
        while self.epochs_done < end {
            let e = self.epochs_done;
            let lr = poly_lr(self.spec.lr, e, self.spec.epochs);
            for batch in self.epoch_batches(e)? {
                let rec = self.step(&batch, e, lr)?;
                sink(&rec)?;
            }
            self.epochs_done += 1;
            log::debug!("stage {} epoch {} done", self.spec.stage, e);
        }
        Ok(())
    }

    pub fn run_to_end(&mut self, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        self.run_epochs(self.spec.epochs, sink)
    }

    fn targets(&self, batch: &Batch) -> Result<Targets> {
        let gt = batch
            .labels
            .iter()
            .map(|&id| match id {
                0 => Ok(0u8),
                _ => self
                    .model
                    .channel_of(id)
                    .map(|c| c as u8)
                    .ok_or_else(|| Error::CategoryMismatch(format!("label {id} is not in the registry"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let (old_probs, pseudo) = match &self.teacher {
            None => (None, None),
            Some(t) => {
                let (_, logits) = t.infer(&batch.images)?;
                let probs = softmax_channels(&logits, self.spec.train.kd_temperature)?;
                let s = logits.shape();
                let (k, plane) = (s[1], s[2] * s[3]);
                let d = logits.data();
                let pseudo = (0..s[0] * plane)
                    .map(|i| {
                        let (b, p) = (i / plane, i % plane);
                        let mut best = 0;
                        for c in 1..k {
                            if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                                best = c;
                            }
                        }
                        best as u8
                    })
                    .collect();
                (Some(probs), Some(pseudo))
            }
        };
        Ok(Targets { gt, old_probs, pseudo })
    }

    /// Frozen-model distribution for `images`, if this stage has a teacher.
    pub fn teacher_probs(&self, images: &Tensor) -> Result<Option<Tensor>> {
        match &self.teacher {
            None => Ok(None),
            Some(t) => Ok(Some(softmax_channels(&t.infer(images)?.1, self.spec.train.kd_temperature)?)),
        }
    }

    fn n_new(&self) -> usize {
        self.spec.new_categories.len()
    }

    fn n_old(&self) -> usize {
        self.model.registry().len() - self.n_new()
    }

    /// Assemble the stage objective for one forward pass.
    pub fn loss_terms(&self, tape: &mut Tape<f32>, out: &ModelOutput, batch: &Batch) -> Result<LossTerms> {
        let targets = self.targets(batch)?;
        self.objective(tape, out, batch, &targets)
    }

    fn objective(&self, tape: &mut Tape<f32>, out: &ModelOutput, batch: &Batch, tg: &Targets) -> Result<LossTerms> {
        let w = self.spec.train.weights;
        let k = self.model.num_channels();
        let zero = |tape: &mut Tape<f32>| tape.constant(Tensor::scalar(0.0));
        let seg = match self.spec.mode {
            Mode::Full | Mode::WoMem => {
                let ls = LabelSpace::stage(self.n_old(), self.n_new());
                let tilde = remap_tilde(tape, out.logits, &ls)?;
                seg_loss(tape, tilde, &tg.gt, &ls, SegLossWeights::default())?.total
            }
            Mode::Ft => {
                // unlabeled categories count as background: plain cross-entropy
                let ls = LabelSpace::flat(k - 1);
                let probs = tape.softmax(out.logits, 1)?;
                seg_loss(tape, probs, &tg.gt, &ls, SegLossWeights { ce: 1.0, dice: 0.0 })?.total
            }
            Mode::Joint => {
                let spaces = batch
                    .annotated
                    .iter()
                    .map(|ids| {
                        let new: Vec<usize> = ids
                            .iter()
                            .map(|&id| self.model.channel_of(id).expect("checked against the registry"))
                            .collect();
                        let old = (1..k).filter(|c| !new.contains(c)).collect();
                        LabelSpace::new(old, new)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let tilde = remap_tilde_per_sample(tape, out.logits, &spaces)?;
                seg_loss_per_sample(tape, tilde, &tg.gt, &spaces, SegLossWeights::default())?.total
            }
        };
        let mut total = seg;
        let kd = match (&tg.old_probs, self.spec.mode.uses_distillation() && w.kd > 0.0) {
            (Some(old), true) => {
                let ls = LabelSpace::stage(self.n_old(), self.n_new());
                let scaled = match self.spec.train.kd_temperature {
                    t if t != 1.0 => tape.scale(out.logits, 1.0 / t)?,
                    _ => out.logits,
                };
                let hat = remap_hat(tape, scaled, &ls)?;
                let kd = kd_loss(tape, hat, Some(old))?;
                let weighted = tape.scale(kd, w.kd)?;
                total = tape.add(total, weighted)?;
                kd
            }
            _ => zero(tape),
        };
        let (mut mem, mut same, mut oppo) = (zero(tape), zero(tape), zero(tape));
        if let (Some(bank), true) = (&self.bank, self.spec.mode.uses_memory()) {
            let (b, h, wd) = {
                let s = tape.shape(out.logits);
                (s[0], s[2], s[3])
            };
            let plane = h * wd;
            let head = self.model.params().len() - 2;
            if w.mem > 0.0 {
                mem = mem_loss(tape, bank, out.params[head], out.params[head + 1])?;
                let weighted = tape.scale(mem, w.mem)?;
                total = tape.add(total, weighted)?;
            }
            let n_old = self.n_old();
            if w.same > 0.0 && n_old > 0 {
                let pseudo = tg.pseudo.as_ref().ok_or_else(|| Error::Lineage("memory losses need the frozen model".into()))?;
                let old_positions: Vec<(usize, Vec<[usize; 3]>)> = (0..n_old)
                    .map(|row| {
                        let c = (row + 1) as u8;
                        let mask: Vec<bool> = tg.gt.iter().zip(pseudo).map(|(&g, &p)| g == 0 && p == c).collect();
                        (row, mask_positions(&mask, h, wd))
                    })
                    .collect();
                same = same_loss(tape, bank, out.features, &old_positions)?;
                let weighted = tape.scale(same, w.same)?;
                total = tape.add(total, weighted)?;
            }
            if w.oppo > 0.0 {
                let new_positions: Vec<Vec<[usize; 3]>> = (n_old + 1..k)
                    .map(|c| {
                        let mask: Vec<bool> = tg.gt.iter().map(|&g| g as usize == c).collect();
                        mask_positions(&mask, h, wd)
                    })
                    .collect();
                let bg_mask: Vec<bool> = (0..b * plane)
                    .map(|i| tg.gt[i] == 0 && tg.pseudo.as_ref().is_none_or(|p| p[i] == 0))
                    .collect();
                let mut bg = mask_positions(&bg_mask, h, wd);
                let cap = self.spec.train.background_samples;
                if bg.len() > cap {
                    let mut rng = stream(
                        self.spec.seed,
                        &[TAG_BACKGROUND, self.spec.stage as u64, self.iteration as u64],
                    );
                    let mut keep = sample_indices(&mut rng, bg.len(), cap).into_vec();
                    keep.sort_unstable();
                    bg = keep.into_iter().map(|i| bg[i]).collect();
                }
                let old_rows: Vec<usize> = (0..n_old).collect();
                oppo = oppo_loss(tape, bank, out.features, &new_positions, &bg, &old_rows, self.spec.train.oppo_margin)?;
                let weighted = tape.scale(oppo, w.oppo)?;
                total = tape.add(total, weighted)?;
            }
        }
        Ok(LossTerms {
            total,
            seg,
            kd,
            mem,
            same,
            oppo,
        })
    }

    /// Objective values on `batch` at the current parameters, without a step.
    pub fn evaluate_objective(&self, batch: &Batch) -> Result<LogRecord> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let out = self.model.forward(&mut tape, x, false)?;
        let terms = self.loss_terms(&mut tape, &out, batch)?;
        self.record(&tape, &terms, self.epochs_done, 0.0, 0.0)
    }

    fn record(&self, tape: &Tape<f32>, t: &LossTerms, epoch: usize, lr: f64, m_k: f64) -> Result<LogRecord> {
        let v = |x: Var| tape.value(x).item() as f64;
        Ok(LogRecord {
            stage: self.spec.stage,
            epoch,
            iter: self.iteration,
            lr,
            m_k,
            loss_total: v(t.total),
            loss_seg: v(t.seg),
            loss_kd: v(t.kd),
            loss_mem: v(t.mem),
            loss_same: v(t.same),
            loss_oppo: v(t.oppo),
        })
    }

    /// One iteration: forward, objective, backward, optimizer step, then the
    /// prototype update for the stage's categories.
    pub fn step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<LogRecord> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let out = self.model.forward(&mut tape, x, true)?;
        let targets = self.targets(batch)?;
        let terms = self.objective(&mut tape, &out, batch, &targets)?;
        let m_k = match &self.bank {
            Some(b) => b.momentum_at(self.iteration.min(b.total_iters()))?,
            None => 0.0,
        };
        let rec = self.record(&tape, &terms, epoch, lr, m_k)?;
        if !rec.loss_total.is_finite() {
            return Err(Error::NonFinite { op: "training objective" });
        }
        tape.backward(terms.total)?;
        {
            let grads: Vec<Vec<f32>> = out
                .params
                .iter()
                .map(|&p| tape.grad(p).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).len()]))
                .collect();
            let grads: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f32]> = self.model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            self.optimizer.update(&mut params, &grads, lr)?;
        }
        if let Some(bank) = &mut self.bank {
            let n_old = self.model.registry().len() - self.spec.new_categories.len();
            let features = tape.value(out.features);
            for row in n_old..bank.len() {
                let c = (row + 1) as u8;
                let mask: Vec<bool> = targets.gt.iter().map(|&g| g == c).collect();
                if let Some((mean, _)) = class_mean(features, &mask)? {
                    bank.ema_update(row, &mean, m_k)?;
                }
            }
        }
        self.iteration += 1;
        Ok(rec)
    }

    fn rng_state(&self) -> RngState {
        RngState {
            seed: self.spec.seed,
            epoch: self.epochs_done,
            iteration: self.iteration,
        }
    }

    /// Snapshot from which [`StageRun::resume`] continues exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.spec.stage,
            mode: self.spec.mode,
            model: self.model.clone(),
            bank: self.bank.clone(),
            spec: self.spec.clone(),
            rng: self.rng_state(),
            resume: Some(ResumeState {
                epochs_done: self.epochs_done,
                optimizer: self.optimizer.clone(),
                teacher: self.teacher.as_ref().map(|t| t.model().clone()),
            }),
            log: self.log.clone(),
        }
    }

    /// Freeze the stage's prototypes and produce the final checkpoint.
    pub fn finish(mut self) -> Result<Checkpoint> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument(format!(
                "stage {} has run {} of {} epochs",
                self.spec.stage, self.epochs_done, self.spec.epochs
            )));
        }
        if let Some(bank) = &mut self.bank {
            bank.finalize_stage()?;
        }
        Ok(Checkpoint {
            stage: self.spec.stage,
            mode: self.spec.mode,
            rng: self.rng_state(),
            model: self.model,
            bank: self.bank,
            spec: self.spec,
            resume: None,
            log: self.log,
        })
    }
}
