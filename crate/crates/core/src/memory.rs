//! Prototype memory: one mean feature vector per category, maintained by a
//! moving average whose momentum decays over the stage, and the three
//! prototype losses that use it.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_M0: f64 = 0.9;
pub const DEFAULT_POWER: f64 = 0.9;
const COS_EPS: f64 = 1e-8;

/// Scheduled momentum `m_k = 0.9 m0 (1 - k/K)^p + 0.1 m0`.
pub fn momentum(k: usize, total: usize, m0: f64, p: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("momentum schedule needs K >= 1".into()));
    }
    if k > total {
        return Err(Error::InvalidArgument(format!("iteration {k} beyond schedule length {total}")));
    }
    if !(m0 > 0.0 && m0 <= 1.0) || p <= 0.0 {
        return Err(Error::InvalidArgument(format!("momentum parameters m0={m0}, p={p} out of range")));
    }
    let frac = 1.0 - k as f64 / total as f64;
    Ok(9.0 * m0 / 10.0 * frac.powf(p) + m0 / 10.0)
}

/// Mean feature over the masked positions of `features: [B, C, H, W]`
/// (`mask: [B * H * W]`), with the number of positions. `None` when the mask
/// is empty.
pub fn class_mean<T: Scalar>(features: &Tensor<T>, mask: &[bool]) -> Result<Option<(Vec<T>, usize)>> {
    let s = features.shape();
    if s.len() != 4 || mask.len() != s[0] * s[2] * s[3] {
        return Err(Error::shape(
            "class_mean",
            format!("mask of {} voxels for features {s:?}", mask.len()),
        ));
    }
    let (c, plane) = (s[1], s[2] * s[3]);
    let data = features.data();
    let mut sum = vec![T::zero(); c];
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (b, p) = (i / plane, i % plane);
        for (ch, acc) in sum.iter_mut().enumerate() {
            *acc += data[(b * c + ch) * plane + p];
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let inv = T::one() / T::of(n as f64);
    Ok(Some((sum.into_iter().map(|v| v * inv).collect(), n)))
}

/// Positions `(batch, y, x)` of a `[B * H * W]` mask.
pub fn mask_positions(mask: &[bool], height: usize, width: usize) -> Vec<[usize; 3]> {
    let plane = height * width;
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| [i / plane, (i % plane) / width, i % width])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRow<T: Scalar> {
    pub category: u8,
    pub values: Vec<T>,
    pub initialized: bool,
    pub frozen: bool,
}

/// Prototype matrix with one row per category, in logit-channel order
/// (row `i` belongs to channel `i + 1`; there is no background row).
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Scalar = f32> {
    feature_dim: usize,
    rows: Vec<MemoryRow<T>>,
    m0: f64,
    power: f64,
    total_iters: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(feature_dim: usize, m0: f64, power: f64) -> Result<Self> {
        momentum(0, 1, m0, power)?;
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        Ok(MemoryBank {
            feature_dim,
            rows: Vec::new(),
            m0,
            power,
            total_iters: 1,
        })
    }

    pub fn from_rows(feature_dim: usize, m0: f64, power: f64, total_iters: usize, rows: Vec<MemoryRow<T>>) -> Result<Self> {
        let mut bank = Self::new(feature_dim, m0, power)?;
        bank.set_schedule(total_iters)?;
        for r in &rows {
            if r.values.len() != feature_dim {
                return Err(Error::Memory(format!("row for category {} has {} values, expected {feature_dim}", r.category, r.values.len())));
            }
            if r.initialized && r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Memory(format!("row for category {} is not finite", r.category)));
            }
        }
        bank.rows = rows;
        Ok(bank)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn total_iters(&self) -> usize {
        self.total_iters
    }

    pub fn rows(&self) -> &[MemoryRow<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Schedule length `K` for the current stage.
    pub fn set_schedule(&mut self, total_iters: usize) -> Result<()> {
        if total_iters == 0 {
            return Err(Error::InvalidArgument("schedule length must be positive".into()));
        }
        self.total_iters = total_iters;
        Ok(())
    }

    pub fn momentum_at(&self, k: usize) -> Result<f64> {
        momentum(k, self.total_iters, self.m0, self.power)
    }

    /// Append uninitialized rows for a stage's new categories.
    pub fn add_categories(&mut self, ids: &[u8]) -> Result<()> {
        for &id in ids {
            if self.rows.iter().any(|r| r.category == id) {
                return Err(Error::Memory(format!("category {id} already has a row")));
            }
        }
        self.rows.extend(ids.iter().map(|&category| MemoryRow {
            category,
            values: vec![T::zero(); self.feature_dim],
            initialized: false,
            frozen: false,
        }));
        Ok(())
    }

    /// `M := (1 - m) M + m r`; an uninitialized row takes `r` directly.
    pub fn ema_update(&mut self, row: usize, r_mean: &[T], m: f64) -> Result<()> {
        let dim = self.feature_dim;
        let entry = self
            .rows
            .get_mut(row)
            .ok_or_else(|| Error::Memory(format!("no row {row}")))?;
        if entry.frozen {
            return Err(Error::Memory(format!("row for category {} is frozen", entry.category)));
        }
        if r_mean.len() != dim {
            return Err(Error::shape("ema_update", format!("mean has {} values, bank rows {dim}", r_mean.len())));
        }
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
        }
        if !entry.initialized {
            entry.values.copy_from_slice(r_mean);
            entry.initialized = true;
            return Ok(());
        }
        let (keep, take) = (T::of(1.0 - m), T::of(m));
        for (v, &r) in entry.values.iter_mut().zip(r_mean) {
            let mixed = keep * *v + take * r;
            // keep rounding inside the segment spanned by the two inputs
            *v = mixed.max(v.min(r)).min(v.max(r));
        }
        Ok(())
    }

    /// Freeze every row of the ending stage. Fails naming any category that was never observed.
    pub fn finalize_stage(&mut self) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| !r.frozen && !r.initialized) {
            return Err(Error::Memory(format!(
                "category {} never appeared in the training data; its prototype is uninitialized",
                r.category
            )));
        }
        for r in &mut self.rows {
            r.frozen = true;
        }
        Ok(())
    }

    fn initialized_rows(&self) -> impl Iterator<Item = (usize, &MemoryRow<T>)> {
        self.rows.iter().enumerate().filter(|(_, r)| r.initialized)
    }
}

fn cosine<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.dot(a, b)?;
    let na = tape.l2_norm(a)?;
    let nb = tape.l2_norm(b)?;
    let den = tape.mul(na, nb)?;
    let den = tape.clamp_min(den, COS_EPS)?;
    tape.div(d, den)
}

fn zero<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn prototype<T: Scalar>(tape: &mut Tape<T>, row: &MemoryRow<T>) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![row.values.len()], row.values.clone())?))
}

/// Differentiable mean feature `[C]` at the given positions.
pub fn mean_feature<T: Scalar>(tape: &mut Tape<T>, features: Var, positions: &[[usize; 3]]) -> Result<Option<Var>> {
    if positions.is_empty() {
        return Ok(None);
    }
    let g = tape.gather_positions(features, positions)?;
    Ok(Some(tape.mean_axes(g, &[0])?))
}

/// Cross-entropy of the head applied to every initialized prototype (as a
/// 1x1 feature map) against the prototype's own channel. Prototypes enter as
/// constants, so gradients reach the head only.
pub fn mem_loss<T: Scalar>(tape: &mut Tape<T>, bank: &MemoryBank<T>, head_weight: Var, head_bias: Var) -> Result<Var> {
    let ws = tape.shape(head_weight).to_vec();
    if ws.len() != 4 || ws[0] != bank.len() + 1 || ws[1] != bank.feature_dim() {
        return Err(Error::shape(
            "mem_loss",
            format!(
                "head {ws:?} does not match bank of {} rows x {} features",
                bank.len(),
                bank.feature_dim()
            ),
        ));
    }
    let chosen: Vec<(usize, &MemoryRow<T>)> = bank.initialized_rows().collect();
    if chosen.is_empty() {
        return Ok(zero(tape));
    }
    let (n, c, k) = (chosen.len(), bank.feature_dim(), ws[0]);
    let protos: Vec<T> = chosen.iter().flat_map(|(_, r)| r.values.iter().copied()).collect();
    let protos = tape.constant(Tensor::new(vec![n, c, 1, 1], protos)?);
    let logits = tape.conv2d(protos, head_weight, Some(head_bias), 1, 0)?;
    let logp = tape.log_softmax(logits, 1)?;
    let mut onehot = vec![T::zero(); n * k];
    for (i, (row, _)) in chosen.iter().enumerate() {
        onehot[i * k + row + 1] = T::one();
    }
    let onehot = tape.constant(Tensor::new(vec![n, k, 1, 1], onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `Σ_old (1 - cos(M_old, mean R_old))` over old categories with a nonempty mask.
/// `old_positions[i]` pairs a bank row with the positions assigned to it.
pub fn same_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &MemoryBank<T>,
    features: Var,
    old_positions: &[(usize, Vec<[usize; 3]>)],
) -> Result<Var> {
    let mut total = zero(tape);
    for (row, positions) in old_positions {
        let entry = bank
            .rows()
            .get(*row)
            .ok_or_else(|| Error::Memory(format!("no row {row}")))?;
        if !entry.initialized {
            continue;
        }
        let Some(mean) = mean_feature(tape, features, positions)? else {
            continue;
        };
        let m = prototype(tape, entry)?;
        let cos = cosine(tape, m, mean)?;
        let term = tape.scale(cos, -1.0)?;
        let term = tape.add_scalar(term, 1.0)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// For each new category with a nonempty mask:
/// `max(0, cos(mean R_bg, mean R_new) - margin) + Σ_old max(0, cos(M_old, mean R_new) - margin)`.
pub fn oppo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &MemoryBank<T>,
    features: Var,
    new_positions: &[Vec<[usize; 3]>],
    background_positions: &[[usize; 3]],
    old_rows: &[usize],
    margin: f64,
) -> Result<Var> {
    let mut total = zero(tape);
    let bg_mean = mean_feature(tape, features, background_positions)?;
    let mut protos = Vec::new();
    for &row in old_rows {
        let entry = bank
            .rows()
            .get(row)
            .ok_or_else(|| Error::Memory(format!("no row {row}")))?;
        if entry.initialized {
            protos.push(prototype(tape, entry)?);
        }
    }
    for positions in new_positions {
        let Some(mean) = mean_feature(tape, features, positions)? else {
            continue;
        };
        for other in bg_mean.iter().chain(&protos) {
            let cos = cosine(tape, *other, mean)?;
            let shifted = tape.add_scalar(cos, -margin)?;
            let hinge = tape.relu(shifted)?;
            total = tape.add(total, hinge)?;
        }
    }
    Ok(total)
}
