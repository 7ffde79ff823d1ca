//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion's PASS/FAIL line is always printed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ilseg::autodiff::{finite_difference_check, Tape};
use ilseg::experiment::{Experiment, ExperimentConfig, TrainOptions, TrainOutcome};
use ilseg::losses::{kd_loss, remap_hat, remap_tilde, seg_loss, softmax_channels, LabelSpace, SegLossWeights};
use ilseg::memory::{mem_loss, momentum, oppo_loss, same_loss, MemoryBank};
use ilseg::metrics::{dice, hd95, BinaryMask, MetricsReport};
use ilseg::train::{load_checkpoint, Mode};
use ilseg::Tensor;

type Outcome = (bool, String);

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.json")).expect("desk config")
}

// ---------------------------------------------------------------------------
// 1. remap normalization

fn remap_normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut exact) = (0.0f64, true);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=8);
        let n_new = rng.gen_range(1..k);
        let mut channels: Vec<usize> = (1..k).collect();
        for i in (1..channels.len()).rev() {
            channels.swap(i, rng.gen_range(0..=i));
        }
        let new = channels.split_off(channels.len() - n_new);
        let ls = LabelSpace::new(channels, new).unwrap();
        let logits = Tensor::from_fn(&[1, k, 1, 1], |_| rng.gen_range(-10.0f32..10.0));
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(logits);
        let soft = tape.softmax(x, 1).unwrap();
        let hat = remap_hat(&mut tape, x, &ls).unwrap();
        let tilde = remap_tilde(&mut tape, x, &ls).unwrap();
        for v in [hat, tilde] {
            let s: f64 = tape.data(v).iter().map(|&p| p as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
        for (i, &c) in ls.old().iter().enumerate() {
            exact &= tape.data(hat)[i + 1] == tape.data(soft)[c];
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-5 && exact && secs < 5.0,
        format!("max |sum - 1| = {worst:.2e}, old channels exact: {exact}, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------------------
// 2. gradient suite

fn random_bank(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> MemoryBank<f64> {
    let mut bank = MemoryBank::<f64>::new(dim, 0.9, 0.9).unwrap();
    bank.add_categories(&(1..=rows as u8).collect::<Vec<_>>()).unwrap();
    for r in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bank.ema_update(r, &v, 1.0).unwrap();
    }
    bank
}

fn random_positions(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Vec<[usize; 3]> {
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| [rng.gen_range(0..b), rng.gen_range(0..h), rng.gen_range(0..w)]).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..20 {
        let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(2..=3));
        let n_old = rng.gen_range(1..=3);
        let n_new = rng.gen_range(1..=2);
        let k = 1 + n_old + n_new;
        let ls = LabelSpace::stage(n_old, n_new);
        let logits = Tensor::from_fn(&[b, k, h, w], |_| rng.gen_range(-2.0..2.0));
        let active = ls.active();
        let gt: Vec<u8> = (0..b * h * w).map(|_| active[rng.gen_range(0..active.len())] as u8).collect();
        let e = finite_difference_check(
            |t, x| {
                let q = remap_tilde(t, x, &ls)?;
                Ok(seg_loss(t, q, &gt, &ls, SegLossWeights::default())?.total)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        note("seg", e);

        let old = softmax_channels(&Tensor::from_fn(&[b, 1 + n_old, h, w], |_| rng.gen_range(-2.0..2.0)), 1.0).unwrap();
        let e = finite_difference_check(
            |t, x| {
                let q = remap_hat(t, x, &ls)?;
                kd_loss(t, q, Some(&old))
            },
            &logits,
            1e-6,
        )
        .unwrap();
        note("kd", e);

        let dim = rng.gen_range(2..=5);
        let rows = rng.gen_range(1..=3);
        let bank = random_bank(&mut rng, rows, dim);
        let head = Tensor::from_fn(&[rows + 1, dim, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(&[rows + 1], |_| rng.gen_range(-1.0..1.0));
        let e = finite_difference_check(
            |t, hw| {
                let hb = t.constant(bias.clone());
                mem_loss(t, &bank, hw, hb)
            },
            &head,
            1e-6,
        )
        .unwrap();
        note("mem", e);

        let feats = Tensor::from_fn(&[b, dim, h, w], |_| rng.gen_range(-1.0..1.0));
        let old_positions: Vec<(usize, Vec<[usize; 3]>)> =
            (0..rows).map(|r| (r, random_positions(&mut rng, b, h, w))).collect();
        let e = finite_difference_check(|t, f| same_loss(t, &bank, f, &old_positions), &feats, 1e-6).unwrap();
        note("same", e);

        let new_positions: Vec<Vec<[usize; 3]>> = (0..n_new).map(|_| random_positions(&mut rng, b, h, w)).collect();
        let bg = random_positions(&mut rng, b, h, w);
        let margin = [-1.0, 0.0, 0.2][rng.gen_range(0..3)];
        let all_rows: Vec<usize> = (0..rows).collect();
        let e = finite_difference_check(
            |t, f| oppo_loss(t, &bank, f, &new_positions, &bg, &all_rows, margin),
            &feats,
            1e-6,
        )
        .unwrap();
        note("oppo", e);
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    (
        max < 1e-5 && worst.len() == 5 && secs < 120.0,
        format!("worst relative error: {} ({secs:.2} s)", detail.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 3. momentum schedule

fn momentum_schedule() -> Outcome {
    let k = 1000;
    let first = momentum(0, k, 0.9, 0.9).unwrap();
    let last = momentum(k, k, 0.9, 0.9).unwrap();
    let mut ok = (first - 0.9).abs() < 1e-12 && (last - 0.09).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (m0, p, total) = (rng.gen_range(0.05..1.0), rng.gen_range(0.2..3.0), rng.gen_range(1..2000));
        let values: Vec<f64> = (0..=total).map(|i| momentum(i, total, m0, p).unwrap()).collect();
        ok &= values.windows(2).all(|w| w[1] < w[0]);
    }
    (ok, format!("m(0) = {first}, m(K) = {last}, 5 random schedules strictly decreasing"))
}

// ---------------------------------------------------------------------------
// 4. EMA oracle

fn ema_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let dim = rng.gen_range(1..=16);
        let mut bank = MemoryBank::<f32>::new(dim, 0.9, 0.9).unwrap();
        bank.add_categories(&[1]).unwrap();
        let (m0, p) = (rng.gen_range(0.1..1.0), rng.gen_range(0.2..2.0));
        let mut logged: Vec<(Vec<f32>, f64)> = Vec::new();
        for k in 0..100 {
            let r: Vec<f32> = (0..dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let m = momentum(k, 100, m0, p).unwrap();
            bank.ema_update(0, &r, m).unwrap();
            logged.push((r, m));
        }
        // first observation initializes; each later one contributes m_i Π_{j>i} (1 - m_j)
        for c in 0..dim {
            let mut expect = 0.0f64;
            for (i, (r, m)) in logged.iter().enumerate() {
                let weight = if i == 0 { 1.0 } else { *m };
                let decay: f64 = logged[i + 1..].iter().map(|(_, mj)| 1.0 - mj).product();
                expect += weight * decay * r[c] as f64;
            }
            worst = worst.max((bank.rows()[0].values[c] as f64 - expect).abs());
        }
    }
    (worst <= 1e-6, format!("max deviation {worst:.2e} over 10 sequences of 100 updates"))
}

// ---------------------------------------------------------------------------
// 5. metric oracles

fn brute_boundary(m: &[Vec<bool>]) -> Vec<(i64, i64)> {
    let (h, w) = (m.len() as i64, m[0].len() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m[y as usize][x as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_hd95(a: &[Vec<bool>], b: &[Vec<bool>]) -> f64 {
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let rank = ((95 * d.len()) as f64 / 100.0).ceil().max(1.0) as usize;
        d[rank - 1]
    };
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    directed(&ba, &bb).max(directed(&bb, &ba))
}

fn brute_dice(a: &[Vec<bool>], b: &[Vec<bool>]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            inter += (x && y) as usize;
            total += x as usize + y as usize;
        }
    }
    2.0 * inter as f64 / total as f64
}

fn to_mask(m: &[Vec<bool>]) -> BinaryMask {
    BinaryMask::new(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
}

fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; w]; h];
    let blobs = rng.gen_range(1..=3);
    for _ in 0..blobs {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ry, rx) = (rng.gen_range(1.0..h as f64 / 2.0 + 1.0), rng.gen_range(1.0..w as f64 / 2.0 + 1.0));
        for (y, row) in m.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                *v |= d <= 1.0 || rng.gen_bool(0.02);
            }
        }
    }
    m
}

fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<Vec<bool>> {
    (0..h)
        .map(|y| (0..w).map(|x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)).collect())
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut dice_err, mut hd_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(2..=64), rng.gen_range(2..=64));
        let (a, b) = (random_blob(&mut rng, h, w), random_blob(&mut rng, h, w));
        let (ma, mb) = (to_mask(&a), to_mask(&b));
        dice_err = dice_err.max((dice(&ma, &mb).unwrap() - brute_dice(&a, &b)).abs());
        hd_err = hd_err.max((hd95(&ma, &mb, 1.0).unwrap().value - brute_hd95(&a, &b)).abs());
    }
    let half = dice(&to_mask(&square(8, 8, 2, 2, 4)), &to_mask(&square(8, 8, 2, 4, 4))).unwrap();
    let shifted = hd95(&to_mask(&square(12, 12, 3, 3, 5)), &to_mask(&square(12, 12, 3, 4, 5)), 1.0).unwrap();
    (
        dice_err <= 1e-9 && hd_err <= 1e-9 && half == 0.5 && shifted.value == 1.0,
        format!(
            "max dice error {dice_err:.1e}, max hd95 error {hd_err:.1e}; half overlap {half}, shifted square {}",
            shifted.value
        ),
    )
}

// ---------------------------------------------------------------------------
// training experiments

struct SeedRuns {
    exp: Experiment,
    /// Validation report of every completed stage, by mode.
    reports: BTreeMap<&'static str, Vec<MetricsReport>>,
    seconds: BTreeMap<&'static str, f64>,
    _dir: tempfile::TempDir,
}

fn train_modes(seed: u64, modes: &[Mode]) -> SeedRuns {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config();
    cfg.seed = seed;
    cfg.output_dir = dir.path().to_path_buf();
    let exp = Experiment::new(cfg).unwrap();
    exp.generate_data().unwrap();
    let (mut reports, mut seconds) = (BTreeMap::new(), BTreeMap::new());
    for &mode in modes {
        let start = Instant::now();
        let outcome = exp.train(mode, &TrainOptions::default()).unwrap();
        assert!(matches!(outcome, TrainOutcome::Complete(_)));
        seconds.insert(mode.name(), start.elapsed().as_secs_f64());
        let stage_reports = exp
            .stages_of(mode)
            .into_iter()
            .map(|s| exp.evaluate_checkpoint(&load_checkpoint(&exp.checkpoint_path(mode, s)).unwrap()).unwrap())
            .collect();
        reports.insert(mode.name(), stage_reports);
    }
    SeedRuns {
        exp,
        reports,
        seconds,
        _dir: dir,
    }
}

fn final_dc(runs: &SeedRuns, mode: &str, id: u8) -> f64 {
    runs.reports[mode].last().unwrap().dc(id).unwrap()
}

fn forgetting(runs: &SeedRuns) -> Outcome {
    let (ft, full) = (final_dc(runs, "ft", 1), final_dc(runs, "full", 1));
    let secs = runs.seconds["ft"] + runs.seconds["full"];
    (
        ft < 0.2 && full >= 0.75 && secs < 1800.0,
        format!("final stage-1 category DC: ft {ft:.3} (< 0.2), full {full:.3} (>= 0.75); {secs:.0} s"),
    )
}

/// Mean over intermediate stages of the mean DC of categories introduced earlier.
fn intermediate_old_dc(runs: &SeedRuns, mode: &str) -> f64 {
    let stages = &runs.exp.config.data.stages;
    let reports = &runs.reports[mode];
    let per_stage: Vec<f64> = (2..stages.len())
        .map(|t| {
            let old: Vec<u8> = stages[..t - 1].iter().flatten().copied().collect();
            old.iter().map(|&id| reports[t - 1].dc(id).unwrap()).sum::<f64>() / old.len() as f64
        })
        .collect();
    per_stage.iter().sum::<f64>() / per_stage.len() as f64
}

fn memory_comparison(seeds: &[&SeedRuns]) -> Outcome {
    let (mut full, mut wo) = (Vec::new(), Vec::new());
    for runs in seeds {
        full.push(intermediate_old_dc(runs, "full"));
        wo.push(intermediate_old_dc(runs, "woMem"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mw) = (mean(&full), mean(&wo));

    let first = seeds[0];
    let out = first.exp.config.output_dir.join("report");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_ilseg"))
        .args(["--quiet", "report", "--runs"])
        .arg(first.exp.runs_root())
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    let svg = std::fs::read_to_string(out.join("forgetting.svg")).unwrap_or_default();
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap_or_default();
    let emitted = status.success() && svg.matches("<polyline").count() == first.reports.len() && csv.lines().count() > 1;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    (
        mf >= mw && emitted,
        format!(
            "intermediate old-category DC over {} seeds: full {mf:.4} ({}) vs woMem {mw:.4} ({}); report emitted: {emitted}",
            seeds.len(),
            fmt(&full),
            fmt(&wo)
        ),
    )
}

fn upper_bound(runs: &SeedRuns) -> Outcome {
    let joint = runs.reports["joint"].last().unwrap().mean_dc().unwrap();
    let full = runs.reports["full"].last().unwrap().mean_dc().unwrap();
    (
        joint >= full - 0.05,
        format!("final mean DC: joint {joint:.3}, full {full:.3}"),
    )
}

fn run_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
    }
    files
}

fn determinism() -> Outcome {
    let run = |interrupt: Option<usize>| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config();
        cfg.data.train_per_stage = 8;
        cfg.data.full_val = 4;
        cfg.train.epochs = 2;
        cfg.output_dir = dir.path().to_path_buf();
        let exp = Experiment::new(cfg).unwrap();
        exp.generate_data().unwrap();
        if let Some(n) = interrupt {
            let opts = TrainOptions {
                interrupt_after: Some(n),
                ..TrainOptions::default()
            };
            assert!(matches!(exp.train(Mode::Full, &opts).unwrap(), TrainOutcome::Interrupted { .. }));
        }
        let opts = TrainOptions {
            resume: interrupt.is_some(),
            ..TrainOptions::default()
        };
        exp.train(Mode::Full, &opts).unwrap();
        let tree = run_tree(&exp.run_dir(Mode::Full));
        (tree, dir)
    };
    let (a, _da) = run(None);
    let (b, _db) = run(None);
    let (c, _dc) = run(Some(3));
    let files = a.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt" || e == "jsonl")).count();
    (
        a == b && a == c && files == 8,
        format!(
            "repeat run identical: {}, resumed run identical: {} ({files} checkpoints and logs compared)",
            a == b,
            a == c
        ),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    // `cargo test -- --list` and filtered runs of other test binaries pass arguments here
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let report = |n: usize, name: &str, (ok, detail): Outcome| {
        println!("{} {n} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        ok
    };
    let mut all = true;
    // the memory-module comparison is a directional trend check: reported, not gating
    let mut directional = true;
    all &= report(1, "remap normalization", guarded(remap_normalization));
    all &= report(2, "gradient suite", guarded(gradient_suite));
    all &= report(3, "momentum schedule", guarded(momentum_schedule));
    all &= report(4, "EMA oracle", guarded(ema_oracle));
    all &= report(5, "metric oracles", guarded(metric_oracles));

    let primary = catch_unwind(|| train_modes(7, &Mode::ALL));
    let others: Vec<_> = [8, 9]
        .into_iter()
        .map(|s| catch_unwind(move || train_modes(s, &[Mode::Full, Mode::WoMem])))
        .collect();
    match &primary {
        Ok(runs) => {
            all &= report(6, "forgetting experiment", guarded(|| forgetting(runs)));
            match others.iter().map(|r| r.as_ref().ok()).collect::<Option<Vec<&SeedRuns>>>() {
                Some(rest) => {
                    let seeds: Vec<&SeedRuns> = std::iter::once(runs).chain(rest).collect();
                    directional &= report(7, "memory-module comparison", guarded(|| memory_comparison(&seeds)));
                }
                None => directional &= report(7, "memory-module comparison", (false, "a training run panicked".into())),
            }
            all &= report(8, "upper-bound sanity", guarded(|| upper_bound(runs)));
        }
        Err(_) => {
            for (n, name) in [(6, "forgetting experiment"), (7, "memory-module comparison"), (8, "upper-bound sanity")] {
                all &= report(n, name, (false, "a training run panicked".into()));
            }
        }
    }
    all &= report(9, "determinism and resume", guarded(determinism));
    if !directional {
        println!("note: criterion 7 is directional and reported without failing the suite");
    }
    if !all {
        std::process::exit(1);
    }
}
