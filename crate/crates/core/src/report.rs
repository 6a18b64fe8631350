//! Aggregation of run directories into a CSV table and an SVG chart of the
//! seen/unseen Recall@1 curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{EcamlError, Result};
use crate::experiments::{EvalRecord, RunSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub name: String,
    pub summary: RunSummary,
    pub history: Vec<EvalRecord>,
}

fn parse_opt(field: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some)
    }
}

/// Parse a `history.csv` written by [`crate::experiments::RunHistory::to_csv`].
pub fn parse_history_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EcamlError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| EcamlError::Parse { line, message: m };
        if rec.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")));
        out.push(EvalRecord {
            iteration: rec[0].parse().map_err(|e| bad(format!("iteration: {e}")))?,
            seen_r1: num(1)?,
            unseen_r1: num(2)?,
            nmi: num(3)?,
            f1: num(4)?,
            train_loss: parse_opt(&rec[5]).map_err(|e| bad(format!("train_loss: {e}")))?,
            ec_value: parse_opt(&rec[6]).map_err(|e| bad(format!("ec_value: {e}")))?,
        });
    }
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| EcamlError::io(p, e));
    let summary: RunSummary = serde_json::from_str(&read(dir.join("summary.json"))?)
        .map_err(|e| EcamlError::Input(format!("{}: {e}", dir.join("summary.json").display())))?;
    let history = parse_history_csv(&read(dir.join("history.csv"))?)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun { name, summary, history })
}

/// Runs under `root`: `root` itself if it is a run directory, otherwise its
/// immediate subdirectories holding a `summary.json`, sorted by name.
pub fn discover_runs(root: &Path) -> Result<Vec<LoadedRun>> {
    if root.join("summary.json").is_file() {
        return Ok(vec![load_run(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| EcamlError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_run(d)).collect()
}

pub fn aggregate_csv(runs: &[LoadedRun]) -> String {
    let mut out = String::from(
        "run,seed,loss,lambda,embedding_dim,iterations,seen_r1,unseen_r1,unseen_r2,unseen_r4,unseen_r8,nmi,f1,gap\n",
    );
    for r in runs {
        let s = &r.summary;
        let m = &s.metrics;
        let rk = |k| m.unseen.recall(k).map(|v| format!("{v:.6}")).unwrap_or_default();
        let lambda = s.train.ec.map(|e| e.lambda).unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{},{},{},{:.6},{:.6},{:.6}",
            r.name,
            s.seed,
            s.train.loss.kind,
            lambda,
            s.mlp.embedding_dim,
            s.train.iterations,
            m.seen_r1,
            rk(1),
            rk(2),
            rk(4),
            rk(8),
            m.nmi,
            m.f1,
            m.gap()
        );
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of Recall@1 against iteration: solid lines for the seen split,
/// dashed for unseen, one colour per run.
pub fn recall_chart_svg(runs: &[LoadedRun]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let max_it = runs
        .iter()
        .flat_map(|r| r.history.iter().map(|e| e.iteration))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let px = |it: usize| left + pw * it as f64 / max_it;
    let py = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">Recall@1 during training</text>"#, left + pw / 2.0);
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = py(v);
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
    }
    for t in 0..=4 {
        let it = (max_it * t as f64 / 4.0).round() as usize;
        let x = px(it);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{it}</text>"#, top + ph + 16.0);
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#, left + pw / 2.0, h - 12.0);

    for (i, run) in runs.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for (unseen, dash) in [(false, ""), (true, r#" stroke-dasharray="6 4""#)] {
            let points: Vec<String> = run
                .history
                .iter()
                .map(|e| format!("{:.1},{:.1}", px(e.iteration), py(if unseen { e.unseen_r1 } else { e.seen_r1 })))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.join(" ")
            );
        }
        let ly = top + 14.0 + 30.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="1.5"/>"#, lx + 20.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{colour}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            ly + 12.0,
            lx + 20.0,
            ly + 12.0
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{} seen</text>"#, lx + 26.0, ly + 4.0, escape(&run.name));
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{} unseen</text>"#, lx + 26.0, ly + 16.0, escape(&run.name));
    }
    svg.push_str("</svg>\n");
    svg
}
