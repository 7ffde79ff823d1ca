use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Split, MANIFEST_VERSION};
use super::sample::{save_sample, Sample};
use crate::error::{Error, Result};
use crate::model::Category;
use crate::rng::{stream, TAG_SAMPLE};

const MAX_REGENERATIONS: u64 = 50;

/// Geometry of one organ-like ellipse, relative to the image extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub id: u8,
    pub name: String,
    /// Centre `(x, y)` as fractions of the image side.
    pub center: [f64; 2],
    /// Semi-axes `(rx, ry)` as fractions of the image side.
    pub radii: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    /// Mean intensity; each sample draws from `intensity ± intensity_band`.
    pub intensity: f64,
    /// Allowed labeled area as a fraction of the image.
    pub area_range: [f64; 2],
}

impl ShapeSpec {
    fn new(id: u8, name: &str, center: [f64; 2], radii: [f64; 2], angle: f64, intensity: f64) -> Self {
        let nominal = std::f64::consts::PI * radii[0] * radii[1];
        ShapeSpec {
            id,
            name: name.to_string(),
            center,
            radii,
            angle,
            intensity,
            area_range: [0.6 * nominal, 1.45 * nominal],
        }
    }
}

fn default_shapes() -> Vec<ShapeSpec> {
    vec![
        ShapeSpec::new(1, "liver", [0.30, 0.38], [0.19, 0.13], 0.35, 0.55),
        ShapeSpec::new(2, "spleen", [0.76, 0.36], [0.08, 0.12], -0.3, 0.70),
        ShapeSpec::new(3, "pancreas", [0.57, 0.57], [0.15, 0.05], -0.15, 0.40),
        ShapeSpec::new(4, "kidney_r", [0.29, 0.75], [0.07, 0.10], 0.15, 0.85),
        ShapeSpec::new(5, "kidney_l", [0.71, 0.75], [0.07, 0.10], -0.15, 0.85),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub train_per_stage: usize,
    pub val_per_stage: usize,
    pub test_per_stage: usize,
    /// Size of the fully labeled validation and test splits.
    pub full_val: usize,
    pub full_test: usize,
    pub max_shift_px: f64,
    pub max_scale: f64,
    pub intensity_band: f64,
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    /// Fraction of a shape's pixels that may be shared with other shapes.
    pub overlap_tolerance: f64,
    pub max_attempts: usize,
    pub shapes: Vec<ShapeSpec>,
    /// Category ids introduced by each stage.
    pub stages: Vec<Vec<u8>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 128,
            train_per_stage: 200,
            val_per_stage: 40,
            test_per_stage: 40,
            full_val: 40,
            full_test: 40,
            max_shift_px: 8.0,
            max_scale: 0.1,
            intensity_band: 0.03,
            noise_sigma: 0.05,
            texture_amplitude: 0.05,
            overlap_tolerance: 0.05,
            max_attempts: 20,
            shapes: default_shapes(),
            stages: vec![vec![1], vec![2], vec![3], vec![4, 5]],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.train_per_stage == 0 {
            return bad("train_per_stage must be positive".into());
        }
        if !(0.0..1.0).contains(&self.max_scale) || self.max_shift_px < 0.0 {
            return bad("jitter bounds out of range".into());
        }
        if self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 || self.intensity_band < 0.0 {
            return bad("noise parameters must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_tolerance) || self.max_attempts == 0 {
            return bad("overlap tolerance must lie in [0, 1] with at least one attempt".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.id == 0 || self.shapes[..i].iter().any(|o| o.id == s.id || o.name == s.name) {
                return bad(format!("shape {} ({}) has a reserved or duplicate id/name", s.id, s.name));
            }
            if s.radii.iter().any(|&r| r <= 0.0) || !(s.area_range[0] <= s.area_range[1]) {
                return bad(format!("shape {} has invalid geometry", s.name));
            }
        }
        let mut seen = Vec::new();
        for (t, ids) in self.stages.iter().enumerate() {
            if ids.is_empty() {
                return bad(format!("stage {} introduces no categories", t + 1));
            }
            for id in ids {
                if seen.contains(id) || !self.shapes.iter().any(|s| s.id == *id) {
                    return bad(format!("stage {} lists unknown or repeated category {id}", t + 1));
                }
                seen.push(*id);
            }
        }
        if self.stages.is_empty() {
            return bad("no stages configured".into());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        self.shapes
            .iter()
            .map(|s| Category {
                id: s.id,
                name: s.name.clone(),
            })
            .collect()
    }
}

struct Placed {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Draw one jittered layout; `None` if the overlap or area checks fail.
fn try_layout(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<bool>>> {
    let n = cfg.image_size;
    let side = n as f64;
    let masks: Vec<Vec<bool>> = cfg
        .shapes
        .iter()
        .map(|s| {
            let scale = 1.0 + rng.gen_range(-cfg.max_scale..=cfg.max_scale);
            let shift = [
                rng.gen_range(-cfg.max_shift_px..=cfg.max_shift_px),
                rng.gen_range(-cfg.max_shift_px..=cfg.max_shift_px),
            ];
            let p = Placed {
                cx: s.center[0] * side + shift[0],
                cy: s.center[1] * side + shift[1],
                rx: s.radii[0] * side * scale,
                ry: s.radii[1] * side * scale,
                cos: s.angle.cos(),
                sin: s.angle.sin(),
            };
            (0..n * n)
                .map(|i| p.contains((i % n) as f64 + 0.5, (i / n) as f64 + 0.5))
                .collect()
        })
        .collect();
    let total = (n * n) as f64;
    for (i, (m, spec)) in masks.iter().zip(&cfg.shapes).enumerate() {
        let area = m.iter().filter(|&&b| b).count();
        let shared = (0..n * n)
            .filter(|&p| m[p] && masks.iter().enumerate().any(|(j, o)| j != i && o[p]))
            .count();
        let visible = area - shared;
        if area == 0 || shared as f64 > cfg.overlap_tolerance * area as f64 {
            return None;
        }
        // the labeled area lies between the unshared and the full footprint
        if (visible as f64 / total) < spec.area_range[0] || (area as f64 / total) > spec.area_range[1] {
            return None;
        }
    }
    Some(masks)
}

/// Fully labeled sample number `index` from the stream `(seed, dataset, split)`.
pub fn generate_sample(cfg: &GeneratorConfig, seed: u64, dataset: u64, split: Split, index: u64) -> Result<Sample> {
    let n = cfg.image_size;
    for regen in 0..MAX_REGENERATIONS {
        let mut rng = stream(seed, &[TAG_SAMPLE, dataset, split.code(), index, regen]);
        let Some(masks) = (0..cfg.max_attempts).find_map(|_| try_layout(cfg, &mut rng)) else {
            continue;
        };
        let mut labels = vec![0u8; n * n];
        for (m, spec) in masks.iter().zip(&cfg.shapes) {
            for (l, _) in labels.iter_mut().zip(m).filter(|(_, &b)| b) {
                *l = spec.id;
            }
        }
        let intensities: Vec<f64> = cfg
            .shapes
            .iter()
            .map(|s| s.intensity + rng.gen_range(-cfg.intensity_band..=cfg.intensity_band))
            .collect();
        let waves: Vec<[f64; 3]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(1.0..4.0) * std::f64::consts::TAU / n as f64,
                    rng.gen_range(1.0..4.0) * std::f64::consts::TAU / n as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(e.to_string()))?;
        let body = Placed {
            cx: 0.5 * n as f64,
            cy: 0.55 * n as f64,
            rx: 0.47 * n as f64,
            ry: 0.42 * n as f64,
            cos: 1.0,
            sin: 0.0,
        };
        let image = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                let base = match cfg.shapes.iter().position(|s| s.id == labels[i]) {
                    Some(k) => intensities[k],
                    None if body.contains(x, y) => {
                        let tex: f64 = waves.iter().map(|w| (w[0] * x + w[1] * y + w[2]).sin()).sum();
                        0.22 + cfg.texture_amplitude * tex / 3.0
                    }
                    None => 0.03,
                };
                let v = if cfg.noise_sigma > 0.0 { base + noise.sample(&mut rng) } else { base };
                v.clamp(0.0, 1.0) as f32
            })
            .collect();
        let mut annotated: Vec<u8> = cfg.shapes.iter().map(|s| s.id).collect();
        annotated.sort_unstable();
        return Ok(Sample {
            height: n,
            width: n,
            image,
            labels,
            annotated,
        });
    }
    Err(Error::Config(format!(
        "no layout satisfied the overlap tolerance after {MAX_REGENERATIONS} regenerations"
    )))
}

/// Keep only the labels in `keep`.
pub fn restrict_labels(sample: &mut Sample, keep: &[u8]) {
    for l in &mut sample.labels {
        if !keep.contains(l) {
            *l = 0;
        }
    }
    sample.annotated.retain(|id| keep.contains(id));
}

/// Manifests written by [`generate`]: one per stage dataset, then the fully labeled set.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub stage_manifests: Vec<PathBuf>,
    pub full_manifest: PathBuf,
}

pub fn stage_manifest_path(root: &Path, stage: usize) -> PathBuf {
    root.join(format!("stage{stage}")).join("manifest.json")
}

pub fn full_manifest_path(root: &Path) -> PathBuf {
    root.join("full").join("manifest.json")
}

/// Write every stage dataset and the fully labeled validation/test set under `root`.
pub fn generate(cfg: &GeneratorConfig, seed: u64, root: &Path) -> Result<GeneratedData> {
    cfg.validate()?;
    let all = cfg.categories();
    let mut stage_manifests = Vec::new();
    for (t, ids) in cfg.stages.iter().enumerate() {
        let splits = [
            (Split::Train, cfg.train_per_stage),
            (Split::Val, cfg.val_per_stage),
            (Split::Test, cfg.test_per_stage),
        ];
        let cats = all.iter().filter(|c| ids.contains(&c.id)).cloned().collect();
        let path = stage_manifest_path(root, t + 1);
        write_dataset(cfg, seed, t as u64 + 1, &splits, Some(ids), cats, &path)?;
        stage_manifests.push(path);
    }
    let full_manifest = full_manifest_path(root);
    let splits = [(Split::Val, cfg.full_val), (Split::Test, cfg.full_test)];
    write_dataset(cfg, seed, 0, &splits, None, all, &full_manifest)?;
    Ok(GeneratedData {
        stage_manifests,
        full_manifest,
    })
}

fn write_dataset(
    cfg: &GeneratorConfig,
    seed: u64,
    dataset: u64,
    splits: &[(Split, usize)],
    keep: Option<&[u8]>,
    categories: Vec<Category>,
    manifest_path: &Path,
) -> Result<()> {
    let dir = manifest_path.parent().expect("manifest path has a parent");
    let mut samples = Vec::new();
    for &(split, count) in splits {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        for i in 0..count {
            let mut s = generate_sample(cfg, seed, dataset, split, i as u64)?;
            if let Some(keep) = keep {
                restrict_labels(&mut s, keep);
            }
            let rel = format!("{}/{i:05}.ils", split.name());
            save_sample(&s, &dir.join(&rel))?;
            samples.push(ManifestEntry {
                path: rel,
                annotated: s.annotated.clone(),
                split,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        categories,
        samples,
        seed,
        root: dir.to_path_buf(),
    };
    manifest.save(manifest_path)
}
