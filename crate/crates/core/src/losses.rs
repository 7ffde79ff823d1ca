//! Background-merged prediction remapping and the segmentation and
//! distillation losses built on it.
//!
//! With background at channel 0, old categories `Y_old` and new categories
//! `C_new`:
//!
//! * `hat`   folds the new categories into background: channels
//!   `[b + Σ C_new, Y_old...]`, the output space of the frozen old model.
//! * `tilde` folds the old categories into background and zeroes them,
//!   keeping the full channel layout: `[b + Σ Y_old, 0..., C_new...]`.
//!
//! Both merge *probabilities* (sums of softmax entries), so each remains a
//! normalized distribution.

use crate::autodiff::{ChannelGroups, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PROB_FLOOR: f64 = 1e-8;
pub const DICE_SMOOTH: f64 = 1e-5;

/// Split of logit channels `1..K` into old and new categories (background is channel 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    old: Vec<usize>,
    new: Vec<usize>,
}

impl LabelSpace {
    pub fn new(old: Vec<usize>, new: Vec<usize>) -> Result<Self> {
        let k = old.len() + new.len();
        let mut seen = vec![false; k + 1];
        for &c in old.iter().chain(&new) {
            if c == 0 {
                return Err(Error::LabelSpace("background channel 0 cannot be a category".into()));
            }
            if c > k || seen[c] {
                return Err(Error::LabelSpace(format!(
                    "channels old={old:?} new={new:?} must partition 1..={k}"
                )));
            }
            seen[c] = true;
        }
        Ok(LabelSpace { old, new })
    }

    /// Stage layout: old categories on channels `1..=n_old`, new ones after them.
    pub fn stage(n_old: usize, n_new: usize) -> Self {
        LabelSpace {
            old: (1..=n_old).collect(),
            new: (n_old + 1..=n_old + n_new).collect(),
        }
    }

    /// Every category supervised directly, nothing merged.
    pub fn flat(n: usize) -> Self {
        Self::stage(0, n)
    }

    pub fn old(&self) -> &[usize] {
        &self.old
    }

    pub fn new_channels(&self) -> &[usize] {
        &self.new
    }

    pub fn num_channels(&self) -> usize {
        1 + self.old.len() + self.new.len()
    }

    /// Channels `{0} ∪ C_new`, the ones supervised by ground truth.
    pub fn active(&self) -> Vec<usize> {
        let mut a = vec![0];
        a.extend(&self.new);
        a.sort_unstable();
        a
    }

    fn hat_groups(&self) -> Vec<Vec<usize>> {
        let mut bg = vec![0];
        bg.extend(&self.new);
        let mut groups = vec![bg];
        groups.extend(self.old.iter().map(|&c| vec![c]));
        groups
    }

    fn tilde_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_channels()];
        groups[0].push(0);
        groups[0].extend(&self.old);
        for &c in &self.new {
            groups[c].push(c);
        }
        groups
    }
}

fn check_channels<T: Scalar>(tape: &Tape<T>, logits: Var, k: usize) -> Result<()> {
    let s = tape.shape(logits);
    if s.len() != 4 || s[1] != k {
        return Err(Error::shape(
            "remap",
            format!("logits {s:?} do not have the label space's {k} channels"),
        ));
    }
    Ok(())
}

/// Distribution over `{b} ∪ Y_old` with new categories merged into background.
pub fn remap_hat<T: Scalar>(tape: &mut Tape<T>, logits: Var, ls: &LabelSpace) -> Result<Var> {
    check_channels(tape, logits, ls.num_channels())?;
    let probs = tape.softmax(logits, 1)?;
    tape.merge_channels(probs, vec![ls.hat_groups()])
}

/// Distribution over `{b} ∪ C_new` in the full channel layout, old categories
/// merged into background and their channels zeroed.
pub fn remap_tilde<T: Scalar>(tape: &mut Tape<T>, logits: Var, ls: &LabelSpace) -> Result<Var> {
    remap_tilde_per_sample(tape, logits, std::slice::from_ref(ls))
}

/// [`remap_tilde`] with an individual label space for each batch item
/// (a single space applies to the whole batch).
pub fn remap_tilde_per_sample<T: Scalar>(tape: &mut Tape<T>, logits: Var, spaces: &[LabelSpace]) -> Result<Var> {
    let batch = tape.shape(logits).first().copied().unwrap_or(0);
    if spaces.is_empty() || (spaces.len() != 1 && spaces.len() != batch) {
        return Err(Error::LabelSpace(format!("{} label spaces for batch of {batch}", spaces.len())));
    }
    for ls in spaces {
        if ls.new.is_empty() {
            return Err(Error::LabelSpace("a stage must introduce at least one category".into()));
        }
        check_channels(tape, logits, ls.num_channels())?;
    }
    let probs = tape.softmax(logits, 1)?;
    let groups: ChannelGroups = spaces.iter().map(LabelSpace::tilde_groups).collect();
    tape.merge_channels(probs, groups)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        SegLossWeights { ce: 1.0, dice: 1.0 }
    }
}

pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// Cross-entropy (voxel mean) plus soft Dice (mean over supervised channels,
/// sums taken over the whole batch) of a merged distribution against channel
/// labels `gt: [B * H * W]`.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    gt: &[u8],
    ls: &LabelSpace,
    weights: SegLossWeights,
) -> Result<SegLoss> {
    seg_loss_per_sample(tape, probs, gt, std::slice::from_ref(ls), weights)
}

pub fn seg_loss_per_sample<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    gt: &[u8],
    spaces: &[LabelSpace],
    weights: SegLossWeights,
) -> Result<SegLoss> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("seg_loss", format!("expected [B, K, H, W], got {s:?}")));
    }
    let (b, k, plane) = (s[0], s[1], s[2] * s[3]);
    if gt.len() != b * plane {
        return Err(Error::shape(
            "seg_loss",
            format!("ground truth has {} voxels, predictions {s:?}", gt.len()),
        ));
    }
    if spaces.is_empty() || (spaces.len() != 1 && spaces.len() != b) {
        return Err(Error::LabelSpace(format!("{} label spaces for batch of {b}", spaces.len())));
    }
    let mut onehot = vec![T::zero(); b * k * plane];
    let mut active = vec![false; k];
    for item in 0..b {
        let ls = &spaces[if spaces.len() == 1 { 0 } else { item }];
        if ls.num_channels() != k {
            return Err(Error::shape("seg_loss", format!("label space has {} channels, predictions {k}", ls.num_channels())));
        }
        let allowed = ls.active();
        for &c in &allowed {
            active[c] = true;
        }
        for (p, &label) in gt[item * plane..(item + 1) * plane].iter().enumerate() {
            let c = label as usize;
            if !allowed.contains(&c) {
                return Err(Error::LabelSpace(format!(
                    "ground truth label {c} is not background or a current category {:?}",
                    ls.new
                )));
            }
            onehot[(item * k + c) * plane + p] = T::one();
        }
    }
    let n_active = active.iter().filter(|&&a| a).count();
    let onehot = Tensor::new(s.clone(), onehot)?;
    let gsum = {
        let mut g = vec![T::zero(); k];
        for (i, v) in onehot.data().iter().enumerate() {
            g[(i / plane) % k] += *v;
        }
        Tensor::new(vec![k], g)?
    };
    let mask = Tensor::new(vec![k], active.iter().map(|&a| if a { T::one() } else { T::zero() }).collect())?;

    let onehot = tape.constant(onehot);
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let picked = tape.mul(logp, onehot)?;
    let ce = tape.sum(picked)?;
    let ce = tape.scale(ce, -1.0 / (b * plane) as f64)?;

    let inter = tape.mul(probs, onehot)?;
    let inter = tape.sum_axes(inter, &[0, 2, 3])?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let psum = tape.sum_axes(probs, &[0, 2, 3])?;
    let gsum = tape.constant(gsum);
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let dice = tape.div(num, den)?;
    let mask = tape.constant(mask);
    let dice = tape.mul(dice, mask)?;
    let dice = tape.sum(dice)?;
    let dice = tape.scale(dice, -1.0 / n_active as f64)?;
    let dice = tape.add_scalar(dice, 1.0)?;

    let a = tape.scale(ce, weights.ce)?;
    let d = tape.scale(dice, weights.dice)?;
    let total = tape.add(a, d)?;
    Ok(SegLoss { total, ce, dice })
}

/// Voxel-mean `KL(old || hat)` with both distributions floored at
/// [`PROB_FLOOR`] inside the logarithm. Without an old model (first stage)
/// the loss is the constant 0.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, hat: Var, old_probs: Option<&Tensor<T>>) -> Result<Var> {
    let Some(old) = old_probs else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    let s = tape.shape(hat).to_vec();
    if old.shape() != s.as_slice() || s.len() != 4 {
        return Err(Error::shape(
            "kd_loss",
            format!("old distribution {:?} does not match remapped prediction {s:?}", old.shape()),
        ));
    }
    let voxels = s[0] * s[2] * s[3];
    let floor = T::of(PROB_FLOOR);
    let ln_old = Tensor::new(s.clone(), old.data().iter().map(|&p| p.max(floor).ln()).collect())?;
    let ln_old = tape.constant(ln_old);
    let weight = tape.constant(old.clone());
    let clamped = tape.clamp_min(hat, PROB_FLOOR)?;
    let ln_hat = tape.log(clamped)?;
    let diff = tape.sub(ln_old, ln_hat)?;
    let terms = tape.mul(weight, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / voxels as f64)
}

/// Plain softmax of a logits tensor along channels (no tape).
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let x = if temperature != 1.0 { tape.scale(x, 1.0 / temperature)? } else { x };
    let p = tape.softmax(x, 1)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn voxel_logits(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn eval_remap(values: &[f64], ls: &LabelSpace, hat: bool) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(voxel_logits(values));
        let y = if hat {
            remap_hat(&mut tape, x, ls).unwrap()
        } else {
            remap_tilde(&mut tape, x, ls).unwrap()
        };
        tape.data(y).to_vec()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn label_space_validation() {
        assert!(LabelSpace::new(vec![1], vec![2]).is_ok());
        assert!(LabelSpace::new(vec![1], vec![1]).is_err());
        assert!(LabelSpace::new(vec![0], vec![1]).is_err());
        assert!(LabelSpace::new(vec![1], vec![3]).is_err());
        let s = LabelSpace::stage(2, 1);
        assert_eq!(s.old(), &[1, 2]);
        assert_eq!(s.new_channels(), &[3]);
        assert!(LabelSpace::stage(0, 1).old().is_empty());
    }

    #[test]
    fn hat_uniform_merges_two_of_three() {
        let q = eval_remap(&[0.0, 0.0, 0.0], &LabelSpace::stage(1, 1), true);
        assert!(close(&q, &[2.0 / 3.0, 1.0 / 3.0], 1e-12), "{q:?}");
    }

    #[test]
    fn hat_without_new_is_plain_softmax() {
        let ls = LabelSpace::new(vec![1, 2], vec![]).unwrap();
        let q = eval_remap(&[0.3, -1.0, 2.0], &ls, true);
        let z: f64 = [0.3f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        assert!(close(&q, &[0.3f64.exp() / z, (-1.0f64).exp() / z, 2f64.exp() / z], 1e-12));
    }

    #[test]
    fn hat_known_values() {
        let q = eval_remap(&[0.0, 3f64.ln(), 0.0], &LabelSpace::stage(1, 1), true);
        assert!(close(&q, &[0.4, 0.6], 1e-12), "{q:?}");
    }

    #[test]
    fn hat_first_stage_is_all_ones() {
        let q = eval_remap(&[0.5, -0.2], &LabelSpace::stage(0, 1), true);
        assert!(close(&q, &[1.0], 1e-12));
    }

    #[test]
    fn tilde_uniform_and_known_values() {
        let q = eval_remap(&[0.0, 0.0, 0.0], &LabelSpace::stage(1, 1), false);
        assert!(close(&q, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-12), "{q:?}");
        assert_eq!(q[1], 0.0);
        let q = eval_remap(&[0.0, 3f64.ln(), 0.0], &LabelSpace::stage(1, 1), false);
        assert!(close(&q, &[0.8, 0.0, 0.2], 1e-12), "{q:?}");
    }

    #[test]
    fn tilde_first_stage_is_plain_softmax() {
        let v = [0.1, 1.3, -0.4];
        let q = eval_remap(&v, &LabelSpace::flat(2), false);
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        assert!(close(&q, &v.map(|x| x.exp() / z), 1e-12));
    }

    #[test]
    fn tilde_rejects_empty_new() {
        let ls = LabelSpace::new(vec![1], vec![]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(voxel_logits(&[0.0, 0.0]));
        assert!(remap_tilde(&mut tape, x, &ls).is_err());
    }

    #[test]
    fn remap_rejects_wrong_width() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(voxel_logits(&[0.0, 0.0]));
        assert!(remap_hat(&mut tape, x, &LabelSpace::stage(1, 1)).is_err());
    }

    fn seg_value(probs: Tensor<f64>, gt: &[u8], ls: &LabelSpace) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let l = seg_loss(&mut tape, p, gt, ls, SegLossWeights::default()).unwrap();
        (tape.value(l.total).item(), tape.value(l.ce).item(), tape.value(l.dice).item())
    }

    #[test]
    fn seg_loss_zero_for_perfect_prediction() {
        // 1 x 3 x 1 x 4 (old channel 1 zeroed), gt over {0, 2}
        let gt = [0u8, 2, 2, 0];
        let mut p = vec![0.0; 12];
        for (i, &g) in gt.iter().enumerate() {
            p[g as usize * 4 + i] = 1.0;
        }
        let (total, ce, dice) = seg_value(Tensor::new(vec![1, 3, 1, 4], p).unwrap(), &gt, &LabelSpace::stage(1, 1));
        assert_eq!(ce, 0.0);
        assert_eq!(dice, 0.0);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn seg_loss_uniform_ce_is_ln2() {
        let probs = Tensor::new(vec![1, 2, 1, 4], vec![0.5; 8]).unwrap();
        let (_, ce, _) = seg_value(probs, &[0, 1, 0, 1], &LabelSpace::flat(1));
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_old_labels() {
        let probs = Tensor::new(vec![1, 3, 1, 2], vec![1.0 / 3.0; 6]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let err = seg_loss(&mut tape, p, &[1, 0], &LabelSpace::stage(1, 1), SegLossWeights::default());
        assert!(matches!(err, Err(Error::LabelSpace(_))));
    }

    /// Straight-loop reference for CE + soft Dice.
    fn seg_oracle(p: &[f64], gt: &[u8], b: usize, k: usize, plane: usize, active: &[usize]) -> f64 {
        let mut ce = 0.0;
        for item in 0..b {
            for v in 0..plane {
                let c = gt[item * plane + v] as usize;
                ce -= p[(item * k + c) * plane + v].max(PROB_FLOOR).ln();
            }
        }
        ce /= (b * plane) as f64;
        let mut dice = 0.0;
        for &c in active {
            let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for item in 0..b {
                for v in 0..plane {
                    let pv = p[(item * k + c) * plane + v];
                    let g = if gt[item * plane + v] as usize == c { 1.0 } else { 0.0 };
                    inter += pv * g;
                    ps += pv;
                    gs += g;
                }
            }
            dice += (2.0 * inter + DICE_SMOOTH) / (ps + gs + DICE_SMOOTH);
        }
        ce + 1.0 - dice / active.len() as f64
    }

    #[test]
    fn seg_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let ls = LabelSpace::stage(1, 2);
            let logits = Tensor::from_fn(&[2, 4, 4, 4], |_| rng.gen_range(-2.0..2.0));
            let gt: Vec<u8> = (0..32).map(|_| [0u8, 2, 3][rng.gen_range(0..3)]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(logits);
            let q = remap_tilde(&mut tape, x, &ls).unwrap();
            let l = seg_loss(&mut tape, q, &gt, &ls, SegLossWeights::default()).unwrap();
            let oracle = seg_oracle(tape.data(q), &gt, 2, 4, 16, &[0, 2, 3]);
            assert!((tape.value(l.total).item() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn kd_examples() {
        let mut tape = Tape::<f64>::new();
        let old = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let hat = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.25, 0.75]).unwrap());
        let l = kd_loss(&mut tape, hat, Some(&old)).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);

        let same = tape.constant(old.clone());
        let l = kd_loss(&mut tape, same, Some(&old)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let zero = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![0.0, 1.0]).unwrap());
        let l = kd_loss(&mut tape, zero, Some(&old)).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite() && v <= (1e8f64).ln() * 0.5 + 1.0);

        let h = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let l = kd_loss(&mut tape, h, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn seg_and_kd_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ls = LabelSpace::stage(2, 1);
        for _ in 0..5 {
            let logits = Tensor::from_fn(&[1, 4, 2, 3], |_| rng.gen_range(-2.0..2.0));
            let gt: Vec<u8> = (0..6).map(|_| [0u8, 3][rng.gen_range(0..2)]).collect();
            let old = softmax_channels(&Tensor::from_fn(&[1, 3, 2, 3], |_| rng.gen_range(-2.0..2.0)), 1.0).unwrap();
            let e = finite_difference_check(
                |t, x| {
                    let q = remap_tilde(t, x, &ls)?;
                    Ok(seg_loss(t, q, &gt, &ls, SegLossWeights::default())?.total)
                },
                &logits,
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-5, "seg {e}");
            let e = finite_difference_check(
                |t, x| {
                    let q = remap_hat(t, x, &ls)?;
                    kd_loss(t, q, Some(&old))
                },
                &logits,
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-5, "kd {e}");
        }
    }

    #[test]
    fn per_sample_tilde_matches_individual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::from_fn(&[2, 4, 2, 2], |_| rng.gen_range(-2.0..2.0));
        let spaces = [
            LabelSpace::new(vec![1, 3], vec![2]).unwrap(),
            LabelSpace::new(vec![2], vec![1, 3]).unwrap(),
        ];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(logits.clone());
        let q = remap_tilde_per_sample(&mut tape, x, &spaces).unwrap();
        let joint = tape.data(q).to_vec();
        for (b, ls) in spaces.iter().enumerate() {
            let one = Tensor::new(vec![1, 4, 2, 2], logits.data()[b * 16..(b + 1) * 16].to_vec()).unwrap();
            let x = tape.constant(one);
            let q = remap_tilde(&mut tape, x, ls).unwrap();
            assert_eq!(tape.data(q), &joint[b * 16..(b + 1) * 16]);
        }
    }
}
