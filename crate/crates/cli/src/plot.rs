//! Figures from metrics streams: training-rate progression per run and
//! validation perplexity against rate across runs. Each figure is written
//! as SVG together with the CSV it was drawn from.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use senvae::config::RunConfig;
use senvae::evaluation::EvalReport;
use senvae::train::{self, MetricsRow};
use senvae::{Error, Result};

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

struct Run {
    label: String,
    target: f64,
    rates: Vec<(f64, f64)>,
    final_point: Option<(f64, f64)>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

fn load_run(dir: &Path) -> Result<Run> {
    let rows = read_metrics(&dir.join(train::METRICS_FILE))?;
    let cfg = RunConfig::load(&dir.join(train::CONFIG_FILE))?;
    let split = if rows.iter().any(|r| r.split == "step") { "step" } else { "train" };
    let rates = rows.iter().filter(|r| r.split == split).map(|r| (r.step as f64, r.rate)).collect();
    let report = dir.join(train::REPORT_FILE);
    let final_point = if report.exists() {
        let rep: EvalReport = serde_json::from_str(&std::fs::read_to_string(report)?)?;
        Some((rep.rate, rep.ppl))
    } else {
        rows.iter().rev().find(|r| r.split == "valid").and_then(|r| Some((r.rate, r.ppl?)))
    };
    Ok(Run {
        label: format!("{} r={}", cfg.objective.technique.name(), cfg.objective.rate),
        target: cfg.objective.rate,
        rates,
        final_point,
    })
}

pub fn cmd_plot(runs: &[PathBuf], out: &Path) -> Result<()> {
    let runs = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;

    let mut csv = String::from("run,step,rate\n");
    let mut chart = Chart::new("Training rate", "step", "rate (nats)");
    for (i, r) in runs.iter().enumerate() {
        for (s, v) in &r.rates {
            let _ = writeln!(csv, "{},{s},{v}", r.label);
        }
        chart.line(&r.label, r.rates.clone(), COLORS[i % COLORS.len()]);
        chart.hline(r.target, COLORS[i % COLORS.len()]);
    }
    std::fs::write(out.join("rate_progression.csv"), csv)?;
    std::fs::write(out.join("rate_progression.svg"), chart.render())?;

    let mut csv = String::from("run,rate,ppl\n");
    let mut chart = Chart::new("Validation PPL against rate", "rate (nats)", "PPL");
    for (i, r) in runs.iter().enumerate() {
        if let Some((x, y)) = r.final_point {
            let _ = writeln!(csv, "{},{x},{y}", r.label);
            chart.points(&r.label, vec![(x, y)], COLORS[i % COLORS.len()]);
        }
    }
    std::fs::write(out.join("ppl_vs_rate.csv"), csv)?;
    std::fs::write(out.join("ppl_vs_rate.svg"), chart.render())?;
    println!("figures written to {}", out.display());
    Ok(())
}

enum Mark {
    Line(Vec<(f64, f64)>),
    Points(Vec<(f64, f64)>),
    HLine(f64),
}

struct Chart {
    title: String,
    xlabel: String,
    ylabel: String,
    series: Vec<(Option<String>, Mark, String)>,
}

impl Chart {
    fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Self { title: title.into(), xlabel: xlabel.into(), ylabel: ylabel.into(), series: Vec::new() }
    }

    fn line(&mut self, label: &str, pts: Vec<(f64, f64)>, color: &str) {
        self.series.push((Some(label.into()), Mark::Line(pts), color.into()));
    }

    fn points(&mut self, label: &str, pts: Vec<(f64, f64)>, color: &str) {
        self.series.push((Some(label.into()), Mark::Points(pts), color.into()));
    }

    fn hline(&mut self, y: f64, color: &str) {
        self.series.push((None, Mark::HLine(y), color.into()));
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (_, m, _) in &self.series {
            match m {
                Mark::Line(p) | Mark::Points(p) => {
                    for &(x, y) in p.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                    }
                }
                Mark::HLine(y) => {
                    y0 = y0.min(*y);
                    y1 = y1.max(*y);
                }
            }
        }
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b + 0.05 * (b - a)) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0.min(0.0), y1);
        (x0, x1, y0, y1)
    }

    fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, self.title);
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(s, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#);
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), b + 16.0, tick(fx));
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 6.0, sy(fy) + 4.0, tick(fy));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, self.xlabel);
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            self.ylabel
        );
        let mut legend = 0;
        for (label, mark, color) in &self.series {
            match mark {
                Mark::Line(p) => {
                    let d: Vec<String> = p
                        .iter()
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, d.join(" "));
                }
                Mark::Points(p) => {
                    for &(x, y) in p {
                        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, sx(x), sy(y));
                    }
                }
                Mark::HLine(y) => {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{l}" x2="{r}" y1="{0:.1}" y2="{0:.1}" stroke="{color}" stroke-dasharray="4 3"/>"#,
                        sy(*y)
                    );
                }
            }
            if let Some(label) = label {
                let y = t + 14.0 * legend as f64;
                let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, r - 150.0, y - 9.0);
                let _ = writeln!(s, r#"<text x="{}" y="{y}">{label}</text>"#, r - 135.0);
                legend += 1;
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
