//! CSV and SVG writers.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use flashlab_core::checkpoint::MetricRecord;
use flashlab_core::engine::AblationRow;
use flashlab_core::grad::Tensor;

pub const METRICS_HEADER: [&str; 7] = ["iter", "nfe", "metric", "value", "seed", "config_id", "wall_clock"];

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Append-only metrics log. A new file gets the header; an existing one must start with it.
pub struct MetricsLog {
    out: csv::Writer<File>,
    seed: u64,
    config_id: String,
}

impl MetricsLog {
    pub fn open(path: &Path, seed: u64, config_id: &str, append: bool) -> Result<Self> {
        let existing = append && path.exists() && std::fs::metadata(path)?.len() > 0;
        if existing {
            let first = std::fs::read_to_string(path)?.lines().next().unwrap_or_default().to_string();
            anyhow::ensure!(
                first == METRICS_HEADER.join(","),
                "{}: not a metrics log (unexpected header)",
                path.display()
            );
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut out = csv::Writer::from_writer(file);
        if !existing {
            out.write_record(METRICS_HEADER)?;
        }
        Ok(Self {
            out,
            seed,
            config_id: config_id.to_string(),
        })
    }

    pub fn write(&mut self, r: &MetricRecord) -> Result<()> {
        self.out.write_record([
            r.iter.to_string(),
            r.nfe.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            self.seed.to_string(),
            self.config_id.clone(),
            format!("{:.3}", now()),
        ])?;
        self.out.flush()?;
        Ok(())
    }
}

/// `x,y[,…],class` rows.
pub fn write_points(path: &Path, x: &Tensor, labels: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = ["x", "y", "z"].iter().take(x.cols()).map(|s| s.to_string()).collect();
    for c in header.len()..x.cols() {
        header.push(format!("x{c}"));
    }
    header.push("class".into());
    w.write_record(&header)?;
    for (r, c) in labels.iter().enumerate() {
        let mut row: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
        row.push(c.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation(dir: &Path, axis: &str, rows: &[AblationRow]) -> Result<()> {
    let mut runs = csv::Writer::from_path(dir.join(format!("{axis}_runs.csv")))?;
    runs.write_record(["axis", "variant", "config_id", "seed", "nfe", "sw"])?;
    for r in rows {
        for (s, v) in r.seeds.iter().zip(&r.values) {
            runs.write_record([&r.axis, &r.variant, &r.config_id, &s.to_string(), &r.nfe.to_string(), &v.to_string()])?;
        }
    }
    runs.flush()?;
    let mut sum = csv::Writer::from_path(dir.join(format!("{axis}_summary.csv")))?;
    sum.write_record(["axis", "variant", "config_id", "reference", "nfe", "seeds", "mean", "sd", "median"])?;
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        sum.write_record([
            r.axis.clone(),
            r.variant.clone(),
            r.config_id.clone(),
            r.reference.to_string(),
            r.nfe.to_string(),
            seeds.join(";"),
            r.mean.to_string(),
            r.sd.to_string(),
            r.median.to_string(),
        ])?;
    }
    sum.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Scatter plot of the first two coordinates, coloured by class.
pub fn write_scatter(path: &Path, x: &Tensor, labels: &[u32], title: &str) -> Result<()> {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..x.rows() {
        for &v in &x.row(r)[..2.min(x.cols())] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let span = hi - lo;
    let px = |v: f64| PAD + (v - lo) / span * (SIZE - 2.0 * PAD);
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(f, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(f, r#"<text x="{PAD}" y="16" font-family="sans-serif" font-size="12">{}</text>"#, escape(title))?;
    for (r, &c) in labels.iter().enumerate() {
        let row = x.row(r);
        let y = if x.cols() > 1 { row[1] } else { 0.0 };
        writeln!(
            f,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.6"/>"#,
            px(row[0]),
            SIZE - px(y),
            PALETTE[c as usize % PALETTE.len()]
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
