//! Cross-mode comparison: a combined CSV of every run's validation reports
//! and an SVG forgetting curve for the first stage's category.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::Mode;

pub const COMBINED_HEADER: &str = "mode,stage,category,dc,hd95,degenerate";

/// One non-absent category row of a run's validation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub stage: usize,
    pub category: String,
    pub dc: f64,
    pub hd95: Option<f64>,
    pub degenerate: usize,
}

fn parse_eval_csv(mode: Mode, path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |line: usize, what: &str| Error::Config(format!("{}:{line}: {what}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == crate::metrics::CSV_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        if f[1] == "mean" || f[2] == "absent" {
            continue;
        }
        rows.push(ReportRow {
            mode,
            stage: f[0].parse().map_err(|_| bad(i + 1, "bad stage"))?,
            category: f[1].to_string(),
            dc: f[2].parse().map_err(|_| bad(i + 1, "bad dc"))?,
            hd95: match f[3] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad(i + 1, "bad hd95"))?),
            },
            degenerate: f[4].parse().map_err(|_| bad(i + 1, "bad degenerate count"))?,
        });
    }
    Ok(rows)
}

/// Every `eval_stage{t}.csv` under `<runs>/<mode>/`, in mode then stage order.
pub fn collect(runs: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let dir = runs.join(mode.name());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<(usize, PathBuf)> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let stage = name.strip_prefix("eval_stage")?.strip_suffix(".csv")?.parse().ok()?;
                Some((stage, p))
            })
            .collect();
        files.sort();
        for (_, p) in files {
            rows.extend(parse_eval_csv(mode, &p)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::NoRuns(format!("no evaluation reports under {}", runs.display())));
    }
    Ok(rows)
}

pub fn combined_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{COMBINED_HEADER}\n");
    for r in rows {
        let hd = r.hd95.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(out, "{},{},{},{:.6},{},{}", r.mode, r.stage, r.category, r.dc, hd, r.degenerate);
    }
    out
}

/// Category tracked by the forgetting curve: the first one reported at the earliest stage.
pub fn first_category(rows: &[ReportRow]) -> Option<&str> {
    let stage = rows.iter().map(|r| r.stage).min()?;
    rows.iter().find(|r| r.stage == stage).map(|r| r.category.as_str())
}

fn color(mode: Mode) -> &'static str {
    match mode {
        Mode::Full => "#1f77b4",
        Mode::WoMem => "#2ca02c",
        Mode::Ft => "#d62728",
        Mode::Joint => "#9467bd",
    }
}

/// Line chart of the tracked category's DC against stage, one polyline per mode.
pub fn forgetting_svg(rows: &[ReportRow]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 130.0, 30.0, 50.0);
    let Some(cat) = first_category(rows) else {
        return String::new();
    };
    let max_stage = rows.iter().map(|r| r.stage).max().unwrap_or(1).max(2);
    let x = |stage: usize| left + (stage - 1) as f64 / (max_stage - 1) as f64 * (w - left - right);
    let y = |dc: f64| top + (1.0 - dc.clamp(0.0, 1.0)) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" font-size="14" text-anchor="middle">DC of {cat} by stage</text>"#, w / 2.0);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.2}</text>"##,
            w - right,
            left - 6.0,
            y(v) + 4.0,
            py = y(v)
        );
    }
    for stage in 1..=max_stage {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{stage}</text>"#,
            x(stage),
            h - bottom + 18.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">stage</text>"#, (left + w - right) / 2.0, h - 10.0);
    let mut legend = 0;
    for mode in Mode::ALL {
        let pts: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.mode == mode && r.category == cat)
            .map(|r| (r.stage, r.dc))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let c = color(mode);
        let points: Vec<String> = pts.iter().map(|&(st, dc)| format!("{:.1},{:.1}", x(st), y(dc))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mode-{mode}" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for &(st, dc) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, x(st), y(dc));
        }
        let ly = top + 10.0 + 18.0 * legend as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="12">{mode}</text>"#,
            w - right + 15.0,
            w - right + 35.0,
            w - right + 40.0,
            ly + 4.0
        );
        legend += 1;
    }
    s.push_str("</svg>\n");
    s
}

/// Write `report.csv` and `forgetting.svg` into `out`.
pub fn write_report(runs: &Path, out: &Path) -> Result<Vec<ReportRow>> {
    let rows = collect(runs)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    for (name, body) in [("report.csv", combined_csv(&rows)), ("forgetting.svg", forgetting_svg(&rows))] {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, mode: &str, stage: usize, body: &str) {
        let d = dir.join(mode);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join(format!("eval_stage{stage}.csv")), format!("{}\n{body}", crate::metrics::CSV_HEADER)).unwrap();
    }

    #[test]
    fn combines_runs_and_draws_one_line_per_mode() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "full", 1, "1,liver,0.900000,1.000000,0\n1,spleen,absent,absent,0\n1,mean,0.900000,1.000000,0\n");
        write(dir.path(), "full", 2, "2,liver,0.800000,2.000000,0\n2,spleen,0.700000,-,3\n2,mean,0.750000,2.000000,3\n");
        let rows = collect(dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(first_category(&rows), Some("liver"));
        let csv = combined_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("full,2,spleen,0.700000,-,3\n"));
        assert_eq!(forgetting_svg(&rows).matches("<polyline").count(), 1);

        write(dir.path(), "ft", 1, "1,liver,0.900000,1.000000,0\n1,mean,0.900000,1.000000,0\n");
        write(dir.path(), "ft", 2, "2,liver,0.000000,-,5\n2,spleen,0.900000,1.000000,0\n2,mean,0.450000,1.000000,5\n");
        let out = tempfile::tempdir().unwrap();
        let rows = write_report(dir.path(), out.path()).unwrap();
        assert_eq!(rows.len(), 6);
        let svg = std::fs::read_to_string(out.path().join("forgetting.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let again = tempfile::tempdir().unwrap();
        write_report(dir.path(), again.path()).unwrap();
        for f in ["report.csv", "forgetting.svg"] {
            assert_eq!(std::fs::read(out.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn empty_runs_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(collect(dir.path()), Err(Error::NoRuns(_))));
        std::fs::create_dir_all(dir.path().join("full")).unwrap();
        assert!(matches!(collect(dir.path()), Err(Error::NoRuns(_))));
    }
}
