//! Per-sample metrics, summary statistics and boxplots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const CSV_HEADER: &str = "experiment,model,task,sample_id,dice";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub experiment: String,
    /// `baseline_<task>` or `segviz`.
    pub model: String,
    pub task: String,
    pub sample_id: u64,
    pub dice: f64,
}

pub fn baseline_model_name(task: &str) -> String {
    format!("baseline_{task}")
}

pub const SEGVIZ_MODEL: &str = "segviz";

/// Row label as in a results table: `SegViz spleen`, `Baseline liver`.
pub fn display_label(model: &str, task: &str) -> String {
    if model == SEGVIZ_MODEL {
        format!("SegViz {task}")
    } else if model.starts_with("baseline_") {
        format!("Baseline {task}")
    } else {
        format!("{model} {task}")
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        // `{}` on f64 is the shortest string that parses back to the same value
        writeln!(out, "{},{},{},{},{}", r.experiment, r.model, r.task, r.sample_id, r.dice).expect("string write");
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Report(format!("metrics CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |what: &str| HarnessError::Report(format!("metrics CSV line {}: {what}", i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            Ok(MetricsRecord {
                experiment: f[0].to_string(),
                model: f[1].to_string(),
                task: f[2].to_string(),
                sample_id: f[3].parse().map_err(|_| bad("bad sample_id"))?,
                dice: f[4].parse().map_err(|_| bad("bad dice"))?,
            })
        })
        .collect()
}

/// Summary statistics of one (model, task) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub model: String,
    pub task: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub groups: Vec<GroupSummary>,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn model_rank(model: &str) -> u8 {
    u8::from(model != SEGVIZ_MODEL)
}

/// Records grouped by (task, model), SegViz before baselines.
fn groups(records: &[MetricsRecord]) -> BTreeMap<(String, u8, String), Vec<f64>> {
    let mut g: BTreeMap<(String, u8, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        g.entry((r.task.clone(), model_rank(&r.model), r.model.clone()))
            .or_default()
            .push(r.dice);
    }
    g
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let experiment = records.first().map(|r| r.experiment.clone()).unwrap_or_default();
    let groups = groups(records)
        .into_iter()
        .map(|((task, _, model), mut v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            v.sort_by(f64::total_cmp);
            GroupSummary {
                label: display_label(&model, &task),
                model,
                task,
                n,
                mean,
                std,
                median: quantile(&v, 0.5),
                min: v[0],
                max: v[n - 1],
            }
        })
        .collect();
    Summary { experiment, groups }
}

/// Box statistics with whiskers at the most extreme values within 1.5 IQR.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> BoxStats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x)).collect();
    BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside.first().copied().unwrap_or(q1),
        whisker_hi: inside.last().copied().unwrap_or(q3),
        outliers: v.into_iter().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
    }
}

/// Boxplot of dice (0 to 1) per model for one task.
pub fn boxplot_svg(task: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (120 + 140 * series.len().max(1), 360);
    let (top, bottom, left) = (40.0, 300.0, 60.0);
    let y = |d: f64| bottom - (bottom - top) * d.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Dice, {task}</text>"#, w / 2);
    for i in 0..=5 {
        let d = i as f64 / 5.0;
        let yy = y(d);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{d:.1}</text>"##,
            w - 20,
            left - 6.0,
            yy + 4.0
        );
    }
    for (i, (name, values)) in series.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let b = box_stats(values);
        let cx = left + 70.0 + 140.0 * i as f64;
        let half = 30.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#,
            y(b.whisker_hi),
            y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#,
            y(b.q1),
            y(b.whisker_lo)
        );
        for wv in [b.whisker_lo, b.whisker_hi] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                cx - half / 2.0,
                y(wv),
                cx + half / 2.0,
                y(wv)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.0)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(b.median),
            cx + half,
            y(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{:.1}" r="3" fill="none" stroke="black"/>"#, y(*o));
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
            bottom + 20.0,
            display_label(name, task)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `summary.json` and `boxplot_<task>.svg` into `dir`.
pub fn emit_report(records: &[MetricsRecord], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Report("no records to report".into()));
    }
    if let Some(r) = records.iter().find(|r| !(0.0..=1.0).contains(&r.dice)) {
        return Err(HarnessError::Report(format!(
            "dice {} of {} sample {} is outside [0, 1]",
            r.dice, r.model, r.sample_id
        )));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv = dir.join(METRICS_FILE);
    fs::write(&csv, to_csv(records))?;
    written.push(csv);

    let json = dir.join(SUMMARY_FILE);
    let summary = serde_json::to_string_pretty(&summarize(records)).map_err(|e| HarnessError::Report(e.to_string()))?;
    fs::write(&json, summary + "\n")?;
    written.push(json);

    let mut by_task: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for ((task, _, model), v) in groups(records) {
        by_task.entry(task).or_default().push((model, v));
    }
    for (task, series) in by_task {
        let path = dir.join(format!("boxplot_{task}.svg"));
        fs::write(&path, boxplot_svg(&task, &series))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, task: &str, id: u64, dice: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "t".into(),
            model: model.into(),
            task: task.into(),
            sample_id: id,
            dice,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec("segviz", "liver", 1, 0.1 + 0.2), rec("baseline_liver", "liver", 2, 1.0 / 3.0)];
        assert_eq!(parse_csv(&to_csv(&rs)).unwrap(), rs);
        assert!(parse_csv("a,b\n").is_err());
    }

    #[test]
    fn four_groups_mirror_table_rows() {
        let mut rs = Vec::new();
        for (m, t) in [
            ("segviz", "spleen"),
            ("baseline_spleen", "spleen"),
            ("segviz", "liver"),
            ("baseline_liver", "liver"),
        ] {
            for i in 0..3 {
                rs.push(rec(m, t, i, 0.5 + 0.1 * i as f64));
            }
        }
        let s = summarize(&rs);
        let labels: Vec<&str> = s.groups.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(labels, ["SegViz liver", "Baseline liver", "SegViz spleen", "Baseline spleen"]);
        let g = &s.groups[0];
        assert!((g.mean - 0.6).abs() < 1e-12 && (g.median - 0.6).abs() < 1e-12);
        assert!((g.std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn box_stats_known_values() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]);
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!((b.whisker_lo, b.whisker_hi), (1.0, 4.0));
        assert_eq!(b.outliers, vec![100.0]);
    }

    #[test]
    fn single_record_degenerates() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[rec("segviz", "spleen", 0, 0.7)], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let b = box_stats(&[0.7]);
        assert_eq!((b.q1, b.q3, b.whisker_lo, b.whisker_hi), (0.7, 0.7, 0.7, 0.7));
        let svg = fs::read_to_string(dir.path().join("boxplot_spleen.svg")).unwrap();
        assert!(svg.contains("SegViz spleen") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], dir.path()).is_err());
        assert!(emit_report(&[rec("segviz", "liver", 0, 1.5)], dir.path()).is_err());
    }
}
