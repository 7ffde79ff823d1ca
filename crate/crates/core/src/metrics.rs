//! Dice and 95th-percentile boundary Hausdorff distance, plus per-category
//! evaluation reports.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Category, SegModel};

const FAR: f64 = 1e18;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn from_labels(height: usize, width: usize, labels: &[u8], id: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == id).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn at(&self, y: i64, x: i64) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.data[y as usize * self.width + x as usize]
    }
}

fn check_extent(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "metric",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_extent(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mask pixels `(y, x)` with a 4-neighbour outside the mask or the image.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height as i64 {
        for x in 0..mask.width as i64 {
            if mask.at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !mask.at(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform of a point set on an `h x w` grid.
fn squared_edt(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let mut buf = Vec::new();
    for x in 0..w {
        buf.clear();
        buf.extend((0..h).map(|y| grid[y * w + x]));
        let col = edt_1d(&buf);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        let row = edt_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Lower envelope of parabolas rooted at `(q, f[q])`.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`, ascending.
fn directed_distances(from: &BinaryMask, to: &BinaryMask, spacing: f64) -> Vec<f64> {
    let field = squared_edt(&boundary(to), to.height, to.width);
    let mut d: Vec<f64> = boundary(from)
        .into_iter()
        .map(|(y, x)| field[y * from.width + x].sqrt() * spacing)
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Nearest-rank percentile of ascending values: index `ceil(q n / 100) - 1`.
pub fn nearest_rank(sorted: &[f64], q: usize) -> f64 {
    let n = sorted.len();
    let rank = (q * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distance {
    pub value: f64,
    /// Either mask was empty; `value` is then the image diagonal.
    pub degenerate: bool,
}

fn percentile_hausdorff(pred: &BinaryMask, gt: &BinaryMask, spacing: f64, q: usize) -> Result<Distance> {
    check_extent(pred, gt)?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("spacing {spacing} must be positive")));
    }
    if pred.is_empty() || gt.is_empty() {
        let (h, w) = (pred.height as f64, pred.width as f64);
        return Ok(Distance {
            value: (h * h + w * w).sqrt() * spacing,
            degenerate: true,
        });
    }
    let a = nearest_rank(&directed_distances(pred, gt, spacing), q);
    let b = nearest_rank(&directed_distances(gt, pred, spacing), q);
    Ok(Distance {
        value: a.max(b),
        degenerate: false,
    })
}

/// Symmetric 95th-percentile boundary distance.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: f64) -> Result<Distance> {
    percentile_hausdorff(pred, gt, spacing, 95)
}

/// Symmetric boundary Hausdorff distance (100th percentile).
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask, spacing: f64) -> Result<Distance> {
    percentile_hausdorff(pred, gt, spacing, 100)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: Category,
    /// Mean Dice over samples annotating the category; `None` when absent.
    pub dc: Option<f64>,
    /// Mean HD95 over non-degenerate samples.
    pub hd95: Option<f64>,
    pub samples: usize,
    pub degenerate: usize,
}

impl CategoryMetrics {
    pub fn is_absent(&self) -> bool {
        self.dc.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub stage: usize,
    pub rows: Vec<CategoryMetrics>,
}

pub const CSV_HEADER: &str = "stage,category,dc,hd95,degenerate";

impl MetricsReport {
    pub fn row(&self, id: u8) -> Option<&CategoryMetrics> {
        self.rows.iter().find(|r| r.category.id == id)
    }

    pub fn dc(&self, id: u8) -> Option<f64> {
        self.row(id).and_then(|r| r.dc)
    }

    pub fn mean_dc(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.dc))
    }

    pub fn mean_hd95(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.hd95))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = match r.dc {
                None => writeln!(out, "{},{},absent,absent,0", self.stage, r.category.name),
                Some(dc) => writeln!(
                    out,
                    "{},{},{:.6},{},{}",
                    self.stage,
                    r.category.name,
                    dc,
                    fmt_opt(r.hd95),
                    r.degenerate
                ),
            };
        }
        let _ = writeln!(
            out,
            "{},mean,{},{},{}",
            self.stage,
            fmt_opt(self.mean_dc()),
            fmt_opt(self.mean_hd95()),
            self.rows.iter().map(|r| r.degenerate).sum::<usize>()
        );
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-category scores from predicted label maps (one per dataset sample).
/// Rows cover `categories`; those in `unknown` or never annotated are absent.
pub fn evaluate_predictions(
    predictions: &[Vec<u8>],
    dataset: &Dataset,
    categories: &[Category],
    unknown: &[u8],
    stage: usize,
) -> Result<MetricsReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} samples",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut rows = Vec::new();
    for cat in categories {
        let mut dcs = Vec::new();
        let mut hds = Vec::new();
        let mut degenerate = 0;
        if !unknown.contains(&cat.id) {
            for (s, pred) in dataset.samples.iter().zip(predictions) {
                if !s.annotated.contains(&cat.id) {
                    continue;
                }
                let p = BinaryMask::from_labels(s.height, s.width, pred, cat.id)?;
                let g = BinaryMask::from_labels(s.height, s.width, &s.labels, cat.id)?;
                dcs.push(dice(&p, &g)?);
                let d = hd95(&p, &g, 1.0)?;
                if d.degenerate {
                    degenerate += 1;
                } else {
                    hds.push(d.value);
                }
            }
        }
        rows.push(CategoryMetrics {
            category: cat.clone(),
            dc: mean(dcs.iter().copied()),
            hd95: mean(hds.iter().copied()),
            samples: dcs.len(),
            degenerate,
        });
    }
    Ok(MetricsReport { stage, rows })
}

/// Argmax label maps of `model` over `dataset`, as category ids.
pub fn predict(model: &SegModel, dataset: &Dataset, batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let ids: Vec<u8> = std::iter::once(0).chain(model.registry().iter().map(|c| c.id)).collect();
    for batch in dataset.ordered_batches(batch_size)? {
        let (_, logits) = model.infer(&batch.images)?;
        let s = logits.shape();
        let (k, plane) = (s[1], s[2] * s[3]);
        let data = logits.data();
        for b in 0..s[0] {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if data[(b * k + c) * plane + p] > data[(b * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    ids[best]
                })
                .collect();
            out.push(labels);
        }
    }
    Ok(out)
}

/// Evaluate `model` on `dataset`. Report rows are the union of the model's
/// registry and the dataset's categories in id order; categories the model
/// lacks are reported absent. A shared id with different names is a mismatch.
pub fn evaluate(model: &SegModel, dataset: &Dataset, stage: usize, batch_size: usize) -> Result<MetricsReport> {
    let mut categories: Vec<Category> = model.registry().to_vec();
    for c in &dataset.categories {
        match categories.iter().find(|m| m.id == c.id) {
            Some(m) if m.name != c.name => {
                return Err(Error::CategoryMismatch(format!(
                    "category {} is {:?} in the model but {:?} in the data",
                    c.id, m.name, c.name
                )))
            }
            Some(_) => {}
            None => categories.push(c.clone()),
        }
    }
    categories.sort_by_key(|c| c.id);
    let unknown: Vec<u8> = categories
        .iter()
        .filter(|c| model.channel_of(c.id).is_none())
        .map(|c| c.id)
        .collect();
    let preds = predict(model, dataset, batch_size)?;
    evaluate_predictions(&preds, dataset, &categories, &unknown, stage)
}
