//! Encoder-decoder segmentation network with an expandable 1x1 head.
//!
//! The decoder's last level produces the (non-rectified) feature map `R` that the memory
//! module reads; the head maps it to `1 + |categories|` logit channels with
//! background at channel 0 and channel `c` belonging to `registry[c - 1]`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;
const HEAD_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// New rows drawn from N(0, 0.01^2), zero bias.
    #[default]
    Random,
    /// Copy the background row into new rows and split the background
    /// probability mass evenly between background and new categories.
    BackgroundCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            base_channels: 16,
            feature_channels: 32,
            head_init: HeadInit::Random,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    registry: Vec<Category>,
}

/// Tape handles produced by one forward pass.
pub struct ModelOutput {
    /// Decoder feature map `[B, C_feat, H, W]`.
    pub features: Var,
    /// Logits `[B, 1 + |categories|, H, W]`.
    pub logits: Var,
    /// Parameter leaves in [`SegModel::params`] order.
    pub params: Vec<Var>,
}

fn level_channels(cfg: &ModelConfig, level: usize) -> usize {
    cfg.base_channels << level
}

fn kaiming<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

fn push_block<T: Scalar>(params: &mut Vec<Param<T>>, rng: &mut impl Rng, prefix: &str, cin: usize, cout: usize) {
    params.push(Param {
        name: format!("{prefix}.conv_a.weight"),
        tensor: kaiming(rng, &[cout, cin, 3, 3]),
    });
    params.push(Param {
        name: format!("{prefix}.norm_a.gamma"),
        tensor: Tensor::full(&[cout], T::one()),
    });
    params.push(Param {
        name: format!("{prefix}.norm_a.beta"),
        tensor: Tensor::zeros(&[cout]),
    });
    params.push(Param {
        name: format!("{prefix}.conv_b.weight"),
        tensor: kaiming(rng, &[cout, cout, 3, 3]),
    });
    params.push(Param {
        name: format!("{prefix}.norm_b.gamma"),
        tensor: Tensor::full(&[cout], T::one()),
    });
    params.push(Param {
        name: format!("{prefix}.norm_b.beta"),
        tensor: Tensor::zeros(&[cout]),
    });
}

impl<T: Scalar> SegModel<T> {
    /// Deterministically initialized network whose head covers `categories`.
    pub fn build(config: ModelConfig, categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one category".into()));
        }
        if config.depth == 0 || config.base_channels == 0 || config.feature_channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model config {config:?}")));
        }
        check_unique(&categories, &[])?;
        let mut rng = rng::stream(config.seed, &[rng::TAG_INIT]);
        let mut params = Vec::new();
        for level in 0..=config.depth {
            let cin = if level == 0 { 1 } else { level_channels(&config, level - 1) };
            push_block(&mut params, &mut rng, &format!("enc{level}"), cin, level_channels(&config, level));
        }
        for level in (0..config.depth).rev() {
            let cin = level_channels(&config, level + 1) + level_channels(&config, level);
            let cout = if level == 0 {
                config.feature_channels
            } else {
                level_channels(&config, level)
            };
            push_block(&mut params, &mut rng, &format!("dec{level}"), cin, cout);
        }
        let k = 1 + categories.len();
        params.push(Param {
            name: "head.weight".into(),
            tensor: kaiming(&mut rng, &[k, config.feature_channels, 1, 1]),
        });
        params.push(Param {
            name: "head.bias".into(),
            tensor: Tensor::zeros(&[k]),
        });
        Ok(SegModel {
            config,
            params,
            registry: categories,
        })
    }

    /// Reassemble a model from stored parts, validating parameter names and shapes.
    pub fn from_parts(config: ModelConfig, registry: Vec<Category>, params: Vec<Param<T>>) -> Result<Self> {
        let template = SegModel::<T>::build(config.clone(), registry.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.tensor.shape() != p.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(SegModel {
            config,
            params,
            registry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &[Category] {
        &self.registry
    }

    /// Logit channel of a category id (channel 0 is background).
    pub fn channel_of(&self, id: u8) -> Option<usize> {
        self.registry.iter().position(|c| c.id == id).map(|p| p + 1)
    }

    pub fn num_channels(&self) -> usize {
        1 + self.registry.len()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn head_index(&self) -> usize {
        self.params.len() - 2
    }

    /// `(weight [K, C_feat, 1, 1], bias [K])`.
    pub fn head(&self) -> (&Tensor<T>, &Tensor<T>) {
        let h = self.head_index();
        (&self.params[h].tensor, &self.params[h + 1].tensor)
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            registry: self.registry.clone(),
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(
                "model",
                format!("expected images of shape [B, 1, H, W], got {shape:?}"),
            ));
        }
        let m = 1usize << self.config.depth;
        if !shape[2].is_multiple_of(m) || !shape[3].is_multiple_of(m) {
            return Err(Error::shape(
                "model",
                format!(
                    "spatial extent {}x{} not divisible by {m} (depth {})",
                    shape[2], shape[3], self.config.depth
                ),
            ));
        }
        Ok(())
    }

    /// Run the network on `images`; parameters enter the tape as leaves that
    /// require gradients iff `trainable`.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var, trainable: bool) -> Result<ModelOutput> {
        self.check_input(tape.shape(images))?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(trainable)))
            .collect();
        let mut cursor = params.iter().copied();
        let mut next = move || cursor.next().expect("parameter layout matches forward");

        let mut block = |tape: &mut Tape<T>, x: Var, stride: usize, activate: bool| -> Result<Var> {
            let (wa, ga, ba, wb, gb, bb) = (next(), next(), next(), next(), next(), next());
            let h = tape.conv2d(x, wa, None, stride, 1)?;
            let h = tape.instance_norm(h, ga, ba, NORM_EPS)?;
            let h = tape.relu(h)?;
            let h = tape.conv2d(h, wb, None, 1, 1)?;
            let h = tape.instance_norm(h, gb, bb, NORM_EPS)?;
            if activate {
                tape.relu(h)
            } else {
                Ok(h)
            }
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = images;
        for level in 0..=self.config.depth {
            x = block(tape, x, if level == 0 { 1 } else { 2 }, true)?;
            if level < self.config.depth {
                skips.push(x);
            }
        }
        for (i, skip) in skips.into_iter().rev().enumerate() {
            let up = tape.upsample2x(x)?;
            let cat = tape.concat(&[up, skip], 1)?;
            // R stays signed so prototype cosines span [-1, 1]
            x = block(tape, cat, 1, i + 1 < self.config.depth)?;
        }
        let features = x;
        let h = self.head_index();
        let logits = tape.conv2d(features, params[h], Some(params[h + 1]), 1, 0)?;
        Ok(ModelOutput {
            features,
            logits,
            params,
        })
    }

    /// Inference without gradient recording: `(features, logits)`.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, false)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// Append head rows for `new` categories; every existing parameter is kept bitwise.
    pub fn expand_head(&self, new: &[Category]) -> Result<SegModel<T>> {
        if new.is_empty() {
            return Err(Error::InvalidArgument("head expansion needs at least one new category".into()));
        }
        check_unique(new, &self.registry)?;
        let mut model = self.clone();
        let h = model.head_index();
        let c = self.config.feature_channels;
        let k_old = self.num_channels();
        let k_new = k_old + new.len();

        let old_w = self.params[h].tensor.data();
        let old_b = self.params[h + 1].tensor.data();
        let mut w = old_w.to_vec();
        let mut b = old_b.to_vec();
        match self.config.head_init {
            HeadInit::Random => {
                let mut rng = rng::stream(self.config.seed, &[rng::TAG_HEAD, k_old as u64]);
                let normal = Normal::new(0.0, HEAD_STD).expect("valid std");
                w.extend((0..new.len() * c).map(|_| T::of(normal.sample(&mut rng))));
                b.extend(std::iter::repeat_n(T::zero(), new.len()));
            }
            HeadInit::BackgroundCopy => {
                let shift = T::of(((new.len() + 1) as f64).ln());
                let bg_bias = old_b[0] - shift;
                for _ in 0..new.len() {
                    w.extend_from_slice(&old_w[..c]);
                    b.push(bg_bias);
                }
                b[0] = bg_bias;
            }
        }
        model.params[h].tensor = Tensor::new(vec![k_new, c, 1, 1], w)?;
        model.params[h + 1].tensor = Tensor::new(vec![k_new], b)?;
        model.registry.extend(new.iter().cloned());
        Ok(model)
    }

    pub fn freeze(&self) -> FrozenModel<T> {
        FrozenModel(Arc::new(self.clone()))
    }
}

fn check_unique(new: &[Category], existing: &[Category]) -> Result<()> {
    for (i, c) in new.iter().enumerate() {
        if c.id == 0 {
            return Err(Error::InvalidArgument("category id 0 is reserved for background".into()));
        }
        if existing.iter().chain(&new[..i]).any(|e| e.id == c.id) {
            return Err(Error::InvalidArgument(format!("duplicate category id {}", c.id)));
        }
    }
    Ok(())
}

/// Immutable snapshot of a model, shareable for concurrent inference.
#[derive(Clone, Debug)]
pub struct FrozenModel<T: Scalar = f32>(Arc<SegModel<T>>);

impl<T: Scalar> FrozenModel<T> {
    pub fn model(&self) -> &SegModel<T> {
        &self.0
    }

    pub fn registry(&self) -> &[Category] {
        self.0.registry()
    }

    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.0.infer(images)
    }

    pub fn clone_frozen(&self) -> FrozenModel<T> {
        FrozenModel(Arc::new((*self.0).clone()))
    }
}
