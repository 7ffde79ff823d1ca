use rand::seq::SliceRandom;
use rand::Rng;

use super::sample::Sample;
use crate::error::{Error, Result};
use crate::model::Category;
use crate::rng::{stream, TAG_AUGMENT, TAG_SHUFFLE};
use crate::tensor::Tensor;

pub const MAX_AUGMENT_SHIFT: i64 = 4;
pub const MAX_AUGMENT_GAIN: f64 = 0.1;

/// In-memory split with a common spatial extent.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub categories: Vec<Category>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, H, W]`.
    pub images: Tensor<f32>,
    /// Category ids, `[B * H * W]`.
    pub labels: Vec<u8>,
    pub annotated: Vec<Vec<u8>>,
    /// Dataset positions of the batch members.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, categories: Vec<Category>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Manifest("no samples in split".into()))?;
        if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (first.height, first.width)) {
            return Err(Error::Manifest(format!(
                "mixed extents {}x{} and {}x{}",
                first.height, first.width, s.height, s.width
            )));
        }
        Ok(Dataset { samples, categories })
    }

    /// Union of several datasets; a category id named differently in two of them is rejected.
    pub fn concat(parts: Vec<Dataset>) -> Result<Self> {
        let mut categories: Vec<Category> = Vec::new();
        let mut samples = Vec::new();
        for part in parts {
            for c in part.categories {
                match categories.iter().find(|o| o.id == c.id) {
                    Some(o) if o.name != c.name => {
                        return Err(Error::CategoryMismatch(format!(
                            "category {} is named {:?} and {:?}",
                            c.id, o.name, c.name
                        )))
                    }
                    Some(_) => {}
                    None => categories.push(c),
                }
            }
            samples.extend(part.samples);
        }
        categories.sort_by_key(|c| c.id);
        Dataset::new(samples, categories)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted union of the samples' annotated ids.
    pub fn annotated_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.samples.iter().flat_map(|s| s.annotated.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn iterations_per_epoch(&self, batch_size: usize) -> usize {
        self.samples.len().div_ceil(batch_size.max(1))
    }

    /// Batches of one epoch: seeded shuffle keyed by `(seed, epoch)`, the
    /// final batch possibly short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64, augment: bool) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut stream(seed, &[TAG_SHUFFLE, epoch]));
        order
            .chunks(batch_size)
            .enumerate()
            .map(|(b, idx)| {
                let aug = augment.then_some((seed, epoch, (b * batch_size) as u64));
                self.assemble(idx, aug)
            })
            .collect()
    }

    /// Batches in stored order without augmentation.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let order: Vec<usize> = (0..self.samples.len()).collect();
        order.chunks(batch_size).map(|idx| self.assemble(idx, None)).collect()
    }

    fn assemble(&self, indices: &[usize], augment: Option<(u64, u64, u64)>) -> Result<Batch> {
        let (h, w) = (self.samples[0].height, self.samples[0].width);
        let mut images = Vec::with_capacity(indices.len() * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            match augment {
                None => {
                    images.extend_from_slice(&s.image);
                    labels.extend_from_slice(&s.labels);
                }
                Some((seed, epoch, pos)) => {
                    let mut rng = stream(seed, &[TAG_AUGMENT, epoch, pos + k as u64]);
                    let dx = rng.gen_range(-MAX_AUGMENT_SHIFT..=MAX_AUGMENT_SHIFT);
                    let dy = rng.gen_range(-MAX_AUGMENT_SHIFT..=MAX_AUGMENT_SHIFT);
                    let gain = 1.0 + rng.gen_range(-MAX_AUGMENT_GAIN..=MAX_AUGMENT_GAIN);
                    let (img, lab) = translate(s, dx, dy);
                    images.extend(img.into_iter().map(|v| (v as f64 * gain).clamp(0.0, 1.0) as f32));
                    labels.extend(lab);
                }
            }
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), 1, h, w], images)?,
            labels,
            annotated: indices.iter().map(|&i| self.samples[i].annotated.clone()).collect(),
            indices: indices.to_vec(),
        })
    }
}

/// Integer shift; uncovered pixels become zero intensity and background.
fn translate(s: &Sample, dx: i64, dy: i64) -> (Vec<f32>, Vec<u8>) {
    let (h, w) = (s.height as i64, s.width as i64);
    let mut img = vec![0.0f32; s.image.len()];
    let mut lab = vec![0u8; s.labels.len()];
    for y in 0..h {
        let sy = y - dy;
        if !(0..h).contains(&sy) {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if (0..w).contains(&sx) {
                let (d, src) = ((y * w + x) as usize, (sy * w + sx) as usize);
                img[d] = s.image[src];
                lab[d] = s.labels[src];
            }
        }
    }
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                height: 4,
                width: 4,
                image: (0..16).map(|p| ((i * 16 + p) % 97) as f32 / 97.0).collect(),
                labels: (0..16).map(|p| if p % 5 == i % 5 { 1 } else { 0 }).collect(),
                annotated: vec![1],
            })
            .collect();
        Dataset::new(samples, vec![Category { id: 1, name: "a".into() }]).unwrap()
    }

    fn order(batches: &[Batch]) -> Vec<usize> {
        batches.iter().flat_map(|b| b.indices.iter().copied()).collect()
    }

    #[test]
    fn shuffles_are_seeded_per_epoch() {
        let d = dataset(9);
        let e1 = d.epoch_batches(2, 7, 1, true).unwrap();
        assert_eq!(e1, d.epoch_batches(2, 7, 1, true).unwrap());
        let e2 = d.epoch_batches(2, 7, 2, true).unwrap();
        assert_ne!(order(&e1), order(&e2));
        let mut all = order(&e1);
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(e1.len(), 5);
        assert_eq!(e1.last().unwrap().len(), 1);
        assert_eq!(d.iterations_per_epoch(2), 5);
    }

    #[test]
    fn no_augmentation_returns_stored_values() {
        let d = dataset(5);
        for b in d.epoch_batches(3, 1, 0, false).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(&b.images.data()[k * 16..(k + 1) * 16], d.samples[i].image.as_slice());
                assert_eq!(&b.labels[k * 16..(k + 1) * 16], d.samples[i].labels.as_slice());
            }
        }
    }

    #[test]
    fn augmentation_shifts_images_and_labels_together() {
        let d = dataset(6);
        for b in d.epoch_batches(2, 3, 4, true).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                let s = &d.samples[i];
                let img = &b.images.data()[k * 16..(k + 1) * 16];
                let lab = &b.labels[k * 16..(k + 1) * 16];
                // find a shift and gain consistent with the output
                let found = (-4..=4i64).flat_map(|dy| (-4..=4i64).map(move |dx| (dx, dy))).any(|(dx, dy)| {
                    let (ti, tl) = translate(s, dx, dy);
                    if tl != lab {
                        return false;
                    }
                    ti.iter().zip(img).all(|(a, b)| {
                        let lo = (*a as f64 * 0.9).clamp(0.0, 1.0) - 1e-6;
                        let hi = (*a as f64 * 1.1).clamp(0.0, 1.0) + 1e-6;
                        (lo..=hi).contains(&(*b as f64))
                    })
                });
                assert!(found);
            }
        }
    }

    #[test]
    fn rejects_empty_and_zero_batch() {
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(dataset(2).epoch_batches(0, 0, 0, false).is_err());
    }

    #[test]
    fn concat_checks_names() {
        let a = dataset(2);
        let mut b = dataset(3);
        b.categories.push(Category { id: 2, name: "b".into() });
        let joined = Dataset::concat(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(joined.len(), 5);
        assert_eq!(joined.categories.len(), 2);
        assert_eq!(joined.annotated_ids(), vec![1]);
        b.categories[0].name = "other".into();
        assert!(matches!(Dataset::concat(vec![a, b]), Err(Error::CategoryMismatch(_))));
    }

    #[test]
    fn translate_moves_content() {
        let d = dataset(1);
        let (img, lab) = translate(&d.samples[0], 1, 0);
        assert_eq!(img[0], 0.0);
        assert_eq!(img[1], d.samples[0].image[0]);
        assert_eq!(lab[5], d.samples[0].labels[4]);
    }
}
