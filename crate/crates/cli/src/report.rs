//! Static reports: markdown metric tables and SVG loss/reward curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use rimeforge::grpo::StepReport;
use rimeforge::retrieval::{MetricSet, ModeReport};

use crate::commands::{SweepRow, EVAL_REPORT, RL_LOG, SFT_LOG, SWEEP_JSON};
use crate::config::RunConfig;
use crate::run::{read_json_lines, RunDir};
use crate::train::SftRecord;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        None
    } else if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

/// A plain line chart with axes, min/max tick labels and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xr = finite_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))).unwrap_or((0.0, 1.0));
    let yr = finite_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))).unwrap_or((0.0, 1.0));
    let sx = |x: f64| left + (x - xr.0) / (xr.1 - xr.0) * pw;
    let sy = |y: f64| top + ph - (y - yr.0) / (yr.1 - yr.0) * ph;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(svg, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (v, anchor_y) in [(yr.0, top + ph), (yr.1, top)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, anchor_y + 4.0, fmt_tick(v));
    }
    for (v, anchor_x) in [(xr.0, left), (xr.1, left + pw)] {
        let _ = writeln!(svg, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 18.0, fmt_tick(v));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, w - right + 12.0, w - right + 32.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, w - right + 38.0, ly + 4.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn sft_series(log: &[SftRecord]) -> Vec<Series> {
    let field = |name: &str, f: fn(&SftRecord) -> f64, joint_only: bool| Series {
        name: name.into(),
        points: log
            .iter()
            .filter(|r| !joint_only || r.phase == crate::train::Phase::Joint)
            .map(|r| (r.step as f64, f(r)))
            .collect(),
    };
    vec![
        field("joint", |r| r.joint, true),
        field("disc", |r| r.disc, true),
        field("gen", |r| r.gen, true),
        field("intra", |r| r.intra, true),
        field("rewrite", |r| r.rewrite, false),
    ]
}

pub fn rl_series(log: &[StepReport]) -> Vec<Series> {
    let field = |name: &str, f: fn(&StepReport) -> f64| Series {
        name: name.into(),
        points: log.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    vec![
        field("reward", |r| r.mean_reward),
        field("gap", |r| r.mean_gap),
        field("process", |r| r.mean_process),
        field("format", |r| r.mean_format),
        field("kl", |r| r.kl),
    ]
}

fn metric_row(name: &str, m: &MetricSet, extra: &str) -> String {
    format!(
        "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |{extra}\n",
        m.hit_at_1, m.recall_at_1, m.recall_at_10, m.precision_at_1, m.ndcg_at_5, m.ndcg_at_10
    )
}

pub fn eval_tables(report: &ModeReport) -> String {
    let mut md = String::from("| pathway | Hit@1 | Recall@1 | Recall@10 | Precision@1 | NDCG@5 | NDCG@10 | query tokens |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for p in &report.pathways {
        md.push_str(&metric_row(&p.pathway, &p.metrics, &format!(" {:.2} |", p.query_tokens)));
    }
    md.push_str("\nHit@1 by query modality:\n\n");
    let cats: Vec<&String> = report.pathways.first().map(|p| p.per_category.keys().collect()).unwrap_or_default();
    let _ = writeln!(md, "| pathway | {} |", cats.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" | "));
    let _ = writeln!(md, "|---|{}", "---|".repeat(cats.len()));
    for p in &report.pathways {
        let cells: Vec<String> = cats.iter().map(|c| p.per_category.get(*c).map_or("-".into(), |m| format!("{:.4}", m.hit_at_1))).collect();
        let _ = writeln!(md, "| {} | {} |", p.pathway, cells.join(" | "));
    }
    md
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let pathways: Vec<&String> = rows.first().map(|r| r.hit_at_1.keys().collect()).unwrap_or_default();
    let mut md = String::from("| λ | joint (first epoch) | joint (last epoch) | rewrite (last epoch) |");
    for p in &pathways {
        let _ = write!(md, " {p} Hit@1 |");
    }
    md.push_str(" gen-gen NDCG@10 |\n|---|---|---|---|");
    md.push_str(&"---|".repeat(pathways.len() + 1));
    md.push('\n');
    for r in rows {
        let _ = write!(md, "| {} | {:.4} | {:.4} | {:.4} |", r.lambda, r.first_epoch_joint, r.last_epoch_joint, r.last_epoch_rewrite);
        for p in &pathways {
            let _ = write!(md, " {:.4} |", r.hit_at_1.get(*p).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(md, " {:.4} |", r.ndcg_at_10.get("gen-gen").copied().unwrap_or(f64::NAN));
    }
    md
}

fn label(dir: &Path, index: usize) -> String {
    let base = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let clean: String = base.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect();
    format!("{index:02}-{}", if clean.is_empty() { "run".into() } else { clean })
}

/// Renders every recognised artefact of the run directories `inputs` into
/// `out/report.md` plus one SVG per curve.
pub fn render(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut rd = RunDir::create(out, "report")?;
    let mut md = String::from("# rimeforge report\n");
    for (i, dir) in inputs.iter().enumerate() {
        let name = label(dir, i);
        let _ = writeln!(md, "\n## {name}\n");
        let mut found = false;
        if dir.join(SFT_LOG).exists() {
            let log: Vec<SftRecord> = read_json_lines(&dir.join(SFT_LOG))?;
            rd.input(&format!("{name}/{SFT_LOG}"), &dir.join(SFT_LOG))?;
            let file = format!("{name}-sft.svg");
            rd.write(&file, line_chart("SFT losses", "optimizer step", &sft_series(&log)).as_bytes())?;
            let _ = writeln!(md, "![SFT losses]({file})\n");
            if let Some(last) = log.last() {
                let _ = writeln!(
                    md,
                    "Final step {}: joint {:.4}, disc {:.4}, gen {:.4}, intra {:.4}, rewrite {:.4}\n",
                    last.step, last.joint, last.disc, last.gen, last.intra, last.rewrite
                );
            }
            found = true;
        }
        if dir.join(RL_LOG).exists() {
            let log: Vec<StepReport> = read_json_lines(&dir.join(RL_LOG))?;
            rd.input(&format!("{name}/{RL_LOG}"), &dir.join(RL_LOG))?;
            let file = format!("{name}-rl.svg");
            rd.write(&file, line_chart("Refinement RL", "RL step", &rl_series(&log)).as_bytes())?;
            let _ = writeln!(md, "![RL curves]({file})\n");
            found = true;
        }
        if dir.join(EVAL_REPORT).exists() {
            let report: ModeReport = serde_json::from_str(&std::fs::read_to_string(dir.join(EVAL_REPORT))?)?;
            rd.input(&format!("{name}/{EVAL_REPORT}"), &dir.join(EVAL_REPORT))?;
            md.push_str(&eval_tables(&report));
            found = true;
        }
        if dir.join(SWEEP_JSON).exists() {
            let rows: Vec<SweepRow> = serde_json::from_str(&std::fs::read_to_string(dir.join(SWEEP_JSON))?)?;
            rd.input(&format!("{name}/{SWEEP_JSON}"), &dir.join(SWEEP_JSON))?;
            md.push_str(&sweep_table(&rows));
            found = true;
        }
        if !found {
            bail!("{} contains no log, evaluation or sweep to report", dir.display());
        }
    }
    rd.write("report.md", md.as_bytes())?;
    rd.finish(cfg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let s = vec![
            Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)] },
            Series { name: "flat".into(), points: vec![(0.0, 2.0)] },
        ];
        let svg = line_chart("t", "x", &s);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
    }
}
