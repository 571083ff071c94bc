//! Results tables (CSV + aligned text), validation-BLEU curves (CSV +
//! PNG line plots), and the published-numbers fixture used to verify the
//! table renderer's format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{EcftError, Result};
use crate::pipeline::{Arm, CheckpointRecord, MetricRecord, PipelineSpec, StageConfig};

#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    /// row label → one optional BLEU per column; None renders as missing
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ResultsTable {
    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == col)?;
        self.rows.iter().find(|(r, _)| r == row)?.1[c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(label);
            for cell in cells {
                out.push(',');
                match cell {
                    Some(v) => out.push_str(&format!("{v:.2}")),
                    None => out.push_str("missing"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain(std::iter::once("model".len()))
            .max()
            .unwrap_or(5);
        let col_w = self.columns.iter().map(|c| c.len().max(7)).collect::<Vec<_>>();
        let mut out = format!("{:label_w$}", "model");
        for (c, w) in self.columns.iter().zip(&col_w) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&format!("{label:label_w$}"));
            for (cell, w) in cells.iter().zip(&col_w) {
                match cell {
                    Some(v) => out.push_str(&format!("  {:>w$}", format!("{v:.2}"))),
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Published Table 1 numbers, for renderer format verification only.
pub fn paper_fixture() -> ResultsTable {
    let columns: Vec<String> = [
        "en-zh", "en-de", "en-ne", "en-si", "zh-en", "de-en", "ne-en", "si-en",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = vec![
        (
            "baseline".to_string(),
            vec![17.21, 18.66, 1.77, 1.96, 11.35, 25.83, 4.74, 4.53].into_iter().map(Some).collect(),
        ),
        (
            "i2i".to_string(),
            vec![17.58, 18.85, 0.02, 0.01, 11.35, 25.71, 0.08, 0.06].into_iter().map(Some).collect(),
        ),
        (
            "t2i".to_string(),
            vec![19.44, 18.26, 1.98, 2.05, 12.32, 25.77, 6.20, 5.00].into_iter().map(Some).collect(),
        ),
    ];
    ResultsTable { columns, rows }
}

/// Relative T2I-over-baseline gain per column, e.g. "ne-en: +30.8%".
pub fn gain_annotations(table: &ResultsTable) -> Vec<String> {
    let mut out = Vec::new();
    for col in &table.columns {
        if let (Some(base), Some(t2i)) = (table.cell("baseline", col), table.cell("t2i", col)) {
            if base > 0.0 {
                let gain = 100.0 * (t2i / base - 1.0);
                out.push(format!("{col}: {gain:+.1}%"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    /// cumulative optimizer steps across stages
    pub step: usize,
    pub forward: f64,
    pub backward: f64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub arm: Arm,
    pub seed: u64,
    pub best: Option<CheckpointRecord>,
    pub curve: Vec<CurvePoint>,
}

/// Load one run directory written by `run_pipeline` (tolerates an
/// incomplete run: empty metrics, no best.json).
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let spec: PipelineSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
    // optimizer steps per stage, for cumulative curve positions
    let stage_steps: Vec<usize> = spec
        .stages
        .iter()
        .map(|s| match s.config {
            StageConfig::Backtranslation(_) => 2 * s.steps,
            _ => s.steps,
        })
        .collect();
    let offset = |stage: usize| -> usize { stage_steps[..stage].iter().sum() };
    let mut curve = Vec::new();
    let metrics_path = dir.join("metrics.jsonl");
    if metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let MetricRecord::Eval { record } = serde_json::from_str(line)? {
                curve.push(CurvePoint {
                    step: offset(record.stage) + record.step,
                    forward: record.val_bleu_forward,
                    backward: record.val_bleu_backward,
                    mean: record.mean_bleu,
                });
            }
        }
    }
    let best_path = dir.join("best.json");
    let best = if best_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(best_path)?)?)
    } else {
        None
    };
    Ok(RunSummary { arm: spec.arm, seed: spec.seed, best, curve })
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Arms × directions table from selected checkpoints; multiple seeds of
/// one arm collapse to the per-direction median. Arms whose runs never
/// produced a selection render as missing.
pub fn results_from_runs(runs: &[RunSummary]) -> ResultsTable {
    let columns = vec!["a2b".to_string(), "b2a".to_string(), "mean".to_string()];
    let mut by_arm: BTreeMap<&'static str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_arm.entry(r.arm.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for arm in [Arm::Baseline, Arm::I2i, Arm::T2i] {
        let Some(group) = by_arm.get(arm.as_str()) else { continue };
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        let mut mean = Vec::new();
        for r in group {
            if let Some(b) = &r.best {
                fwd.push(b.val_bleu_forward);
                bwd.push(b.val_bleu_backward);
                mean.push(b.mean_bleu);
            }
        }
        rows.push((
            arm.as_str().to_string(),
            vec![median(&mut fwd), median(&mut bwd), median(&mut mean)],
        ));
    }
    ResultsTable { columns, rows }
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 40;
const SERIES_COLORS: [[u8; 3]; 6] =
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One PNG line chart, one polyline per series; axes only — the paired
/// CSV carries the numbers and labels.
pub fn plot_lines(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (x0, y0) = (MARGIN as f64, (PLOT_H - MARGIN) as f64);
    let (x1, y1) = ((PLOT_W - MARGIN) as f64, MARGIN as f64);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, x0, y0, x1, y0, axis);
    draw_line(&mut img, x0, y0, x0, y1, axis);
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    if !pts.is_empty() {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (0.0f64, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmax <= xmin {
            xmax = xmin + 1.0;
        }
        if ymax <= ymin {
            ymax = ymin + 1.0;
        }
        let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
        let sy = |y: f64| y0 + (y - ymin) / (ymax - ymin) * (y1 - y0);
        for (si, s) in series.iter().enumerate() {
            let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
            for w in s.windows(2) {
                draw_line(&mut img, sx(w[0].0), sy(w[0].1), sx(w[1].0), sy(w[1].1), color);
            }
            for &(x, y) in s {
                draw_line(&mut img, sx(x) - 2.0, sy(y), sx(x) + 2.0, sy(y), color);
                draw_line(&mut img, sx(x), sy(y) - 2.0, sx(x), sy(y) + 2.0, color);
            }
        }
    }
    img.save(path).map_err(|e| EcftError::InvalidConfig(format!("plot write failed: {e}")))?;
    Ok(())
}

fn curve_value(p: &CurvePoint, direction: &str) -> f64 {
    match direction {
        "a2b" => p.forward,
        "b2a" => p.backward,
        _ => p.mean,
    }
}

/// Render `results.csv`, `results.txt`, and `curves/<arm>_<direction>`
/// CSV + PNG files into `out_dir`. With `paper_fixture_mode` the table is
/// the published-numbers fixture and no curves are emitted.
pub fn render_results(run_dirs: &[PathBuf], out_dir: &Path, paper_fixture_mode: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let (table, annotations) = if paper_fixture_mode {
        let t = paper_fixture();
        let a = gain_annotations(&t);
        (t, a)
    } else {
        if run_dirs.is_empty() {
            return Err(EcftError::EmptyInput("run directories"));
        }
        let runs: Vec<RunSummary> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
        let t = results_from_runs(&runs);
        let a = gain_annotations(&t);
        render_curves(&runs, &out_dir.join("curves"))?;
        (t, a)
    };
    fs::write(out_dir.join("results.csv"), table.to_csv())?;
    let mut text = table.to_text();
    if !annotations.is_empty() {
        text.push_str("\nT2I gain over baseline:\n");
        for a in &annotations {
            text.push_str("  ");
            text.push_str(a);
            text.push('\n');
        }
    }
    fs::write(out_dir.join("results.txt"), text)?;
    Ok(())
}

fn render_curves(runs: &[RunSummary], curves_dir: &Path) -> Result<()> {
    fs::create_dir_all(curves_dir)?;
    let mut by_arm: BTreeMap<&'static str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_arm.entry(r.arm.as_str()).or_default().push(r);
    }
    for (arm, group) in by_arm {
        for direction in ["a2b", "b2a", "mean"] {
            let mut csv = String::from("seed,step,bleu\n");
            let mut series = Vec::new();
            for r in group.iter() {
                let mut s = Vec::new();
                for p in &r.curve {
                    csv.push_str(&format!("{},{},{:.6}\n", r.seed, p.step, curve_value(p, direction)));
                    s.push((p.step as f64, curve_value(p, direction)));
                }
                series.push(s);
            }
            fs::write(curves_dir.join(format!("{arm}_{direction}.csv")), csv)?;
            plot_lines(&curves_dir.join(format!("{arm}_{direction}.png")), &series)?;
        }
    }
    Ok(())
}
