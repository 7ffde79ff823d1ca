use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ilseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra_data: &str) -> PathBuf {
    let path = dir.join("config.json");
    let out = dir.join("out");
    let text = format!(
        r#"{{
  "seed": 3,
  "data": {{"image_size": 16, "train_per_stage": 4, "val_per_stage": 2, "test_per_stage": 2,
           "full_val": 4, "full_test": 2, "max_shift_px": 1.0{extra_data}}},
  "model": {{"depth": 2, "base_channels": 4, "feature_channels": 6}},
  "train": {{"epochs": 2, "lr_first": 0.001, "lr_later": 0.0005}},
  "output_dir": {out:?}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ilseg(&["--quiet", "--config", cfg, "gen-data", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a.join("data")), tree(&b.join("data")));
    assert!(ta.contains_key(Path::new("full/manifest.json")));
    for t in 1..=4 {
        assert!(ta.contains_key(&PathBuf::from(format!("stage{t}/manifest.json"))));
    }
    assert_eq!(ta, tb);

    let c = dir.path().join("c");
    let o = ilseg(&["--quiet", "--config", cfg, "--seed", "4", "gen-data", "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_ne!(tree(&c.join("data")), ta);
}

#[test]
fn configuration_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"seed\": 1,\n  \"data\": {\"image_size\": }\n}\n").unwrap();
    let o = ilseg(&["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3 column"), "{}", stderr(&o));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let o = ilseg(&["--config", unknown.to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));

    assert_eq!(code(&ilseg(&["gen-data"])), 2);

    let cfg = tiny_config(dir.path(), "");
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = ilseg(&["--config", cfg.to_str().unwrap(), "gen-data", "--out", blocker.join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn training_lineage_and_reporting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&ilseg(&["--quiet", "--config", cfg, "gen-data"])), 0);

    let o = ilseg(&["--quiet", "--config", cfg, "train", "--mode", "full", "--stage", "2"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = ilseg(&["--quiet", "--config", cfg, "report", "--runs", out.join("runs").to_str().unwrap(), "--out", dir.path().join("r0").to_str().unwrap()]);
    assert_eq!(code(&o), 5);

    for mode in ["full", "ft", "joint"] {
        let o = ilseg(&["--quiet", "--config", cfg, "train", "--mode", mode]);
        assert_eq!(code(&o), 0, "{mode}: {}", stderr(&o));
    }
    let ckpts = |mode: &str| {
        let mut v: Vec<String> = std::fs::read_dir(out.join("runs").join(mode))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".ckpt"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(ckpts("full"), ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage4.ckpt"]);
    assert_eq!(ckpts("joint"), ["stage4.ckpt"]);

    // interrupted then resumed equals uninterrupted
    let o = ilseg(&["--quiet", "--config", cfg, "--seed", "3", "train", "--mode", "full", "--out", dir.path().join("split").to_str().unwrap(), "--interrupt-after", "3"]);
    assert_eq!(code(&o), 2, "missing data under the new output dir: {}", stderr(&o));
    let split = dir.path().join("split");
    assert_eq!(code(&ilseg(&["--quiet", "--config", cfg, "gen-data", "--out", split.to_str().unwrap()])), 0);
    let o = ilseg(&["--quiet", "--config", cfg, "train", "--mode", "full", "--out", split.to_str().unwrap(), "--interrupt-after", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(split.join("runs/full/stage2.ckpt").exists() && !split.join("runs/full/stage3.ckpt").exists());
    let o = ilseg(&["--quiet", "--config", cfg, "train", "--mode", "full", "--out", split.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(tree(&out.join("runs/full")), tree(&split.join("runs/full")));

    // evaluation
    let val = out.join("data/full/manifest.json");
    let eval = |ckpt: &str, name: &str| {
        let dest = dir.path().join(name);
        let o = ilseg(&["--quiet", "eval", "--checkpoint", out.join("runs/full").join(ckpt).to_str().unwrap(), "--manifest", val.to_str().unwrap(), "--out", dest.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(dest).unwrap()
    };
    let s1 = eval("stage1.ckpt", "e1.csv");
    assert_eq!(s1, eval("stage1.ckpt", "e1b.csv"));
    assert!(s1.lines().any(|l| l.starts_with("1,liver,") && !l.contains("absent")));
    assert_eq!(s1.lines().filter(|l| l.contains("absent")).count(), 4);
    let s3 = eval("stage3.ckpt", "e3.csv");
    assert_eq!(s3.lines().filter(|l| l.contains("absent")).count(), 2);
    assert_eq!(s3, std::fs::read_to_string(out.join("runs/full/eval_stage3.csv")).unwrap());

    let renamed = dir.path().join("renamed");
    std::fs::create_dir_all(&renamed).unwrap();
    let shapes = r#", "shapes": [{"id": 1, "name": "hepar", "center": [0.35, 0.45], "radii": [0.2, 0.16], "angle": 0.3, "intensity": 0.7, "area_range": [0.06, 0.146]}], "stages": [[1]]"#;
    let other = tiny_config(&renamed, shapes);
    assert_eq!(code(&ilseg(&["--quiet", "--config", other.to_str().unwrap(), "gen-data"])), 0);
    let o = ilseg(&["--quiet", "eval", "--checkpoint", out.join("runs/full/stage1.ckpt").to_str().unwrap(), "--manifest", renamed.join("out/data/full/manifest.json").to_str().unwrap(), "--out", dir.path().join("e.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    // report
    let report = dir.path().join("report");
    let o = ilseg(&["--quiet", "report", "--runs", out.join("runs").to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    // full and ft see 1, 2, 3 and 5 categories over the stages; joint sees all 5 once
    assert_eq!(csv.lines().count(), 1 + 2 * (1 + 2 + 3 + 5) + 5);
    let svg = std::fs::read_to_string(report.join("forgetting.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    let again = dir.path().join("report2");
    ilseg(&["--quiet", "report", "--runs", out.join("runs").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(tree(&report), tree(&again));
}
