//! CSV reports and the SVG plots drawn from them.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const REPORT_HEADER: &str = "method,env,metric,mean,stderr,n,seed,config_hash";
pub const ABLATION_HEADER: &str = "parameter,value,method,env,metric,mean,stderr,n,seed,config_hash";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub env: String,
    /// `reward` (n = episodes) or `agreement` (n = held-out rows).
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method, self.env, self.metric, self.mean, self.stderr, self.n, self.seed, self.config_hash
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("report row has {} fields, expected 8: `{line}`", f.len());
        }
        Ok(Self {
            method: f[0].into(),
            env: f[1].into(),
            metric: f[2].into(),
            mean: f[3].parse().context("mean")?,
            stderr: f[4].parse().context("stderr")?,
            n: f[5].parse().context("n")?,
            seed: f[6].parse().context("seed")?,
            config_hash: f[7].into(),
        })
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        bail!("missing report header");
    }
    lines.map(ReportRow::from_csv).collect()
}

/// Write `rows` to `path`, appending below the existing header if the file exists.
pub fn append_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => {
            parse_report(&t).with_context(|| format!("existing report {}", path.display()))?;
            t
        }
        Err(_) => format!("{REPORT_HEADER}\n"),
    };
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPoint {
    pub parameter: String,
    pub value: String,
    pub row: ReportRow,
}

pub fn ablation_csv(points: &[AblationPoint]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.parameter, p.value, p.row.to_csv());
    }
    s
}

pub fn parse_ablation(text: &str) -> Result<Vec<AblationPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        bail!("missing ablation header");
    }
    lines
        .map(|l| {
            let (param, rest) = l.split_once(',').context("parameter")?;
            let (value, rest) = rest.split_once(',').context("value")?;
            Ok(AblationPoint {
                parameter: param.into(),
                value: value.into(),
                row: ReportRow::from_csv(rest)?,
            })
        })
        .collect()
}

/// Direction of `ys` over increasing `xs`: rising, falling, flat, mixed, or single_point.
pub fn trend(xs: &[f64], ys: &[f64]) -> &'static str {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    if idx.len() < 2 {
        return "single_point";
    }
    let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-12);
    let (mut up, mut down) = (false, false);
    for w in idx.windows(2) {
        let d = ys[w[1]] - ys[w[0]];
        if d > 1e-9 * scale {
            up = true;
        } else if d < -1e-9 * scale {
            down = true;
        }
    }
    match (up, down) {
        (true, false) => "rising",
        (false, true) => "falling",
        (false, false) => "flat",
        (true, true) => "mixed",
    }
}

/// Direction reported for each ablated parameter in the original experiments.
pub fn published_trend(parameter: &str) -> &'static str {
    match parameter {
        "m" | "n_beta" => "falling",
        "gamma" | "n_alpha" | "threshold" | "alpha" => "rising",
        "delta" | "eps_margin" => "flat",
        _ => "mixed",
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 20.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 60.0;

fn frame(title: &str, y_label: &str, lo: f64, hi: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>", W / 2.0, esc(title));
    let (x0, y0, y1) = (PAD_L, H - PAD_B, PAD_T);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>", W - PAD_R);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(s, "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>", x0 - 4.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 6.0, y + 4.0, short(v));
    }
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
    s
}

fn short(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn y_range(values: impl Iterator<Item = (f64, f64)>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (m, e) in values {
        lo = lo.min(m - e);
        hi = hi.max(m + e);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = if include_zero { lo.min(0.0) } else { lo };
    if hi - lo < 1e-12 {
        (lo - 0.5, lo + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (if include_zero && lo == 0.0 { lo } else { lo - pad }, hi + pad)
    }
}

/// Bar chart of mean ± stderr per method.
pub fn report_svg(title: &str, rows: &[ReportRow]) -> String {
    let (lo, hi) = y_range(rows.iter().map(|r| (r.mean, r.stderr)), true);
    let metric = rows.first().map_or("value", |r| r.metric.as_str());
    let mut s = frame(title, metric, lo, hi);
    let plot_w = W - PAD_L - PAD_R;
    let slot = plot_w / rows.len().max(1) as f64;
    let y = |v: f64| H - PAD_B - (H - PAD_B - PAD_T) * (v - lo) / (hi - lo);
    for (i, r) in rows.iter().enumerate() {
        let cx = PAD_L + slot * (i as f64 + 0.5);
        let bw = slot * 0.6;
        let (top, base) = (y(r.mean), y(lo.max(0.0).min(hi)));
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"#4c78a8\"/>",
            cx - bw / 2.0,
            top.min(base),
            (base - top).abs()
        );
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            y(r.mean - r.stderr),
            y(r.mean + r.stderr)
        );
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - PAD_B + 18.0, esc(&r.method));
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - PAD_B + 34.0, short(r.mean));
    }
    s.push_str("</svg>\n");
    s
}

/// Metric-vs-value curve with stderr whiskers.
pub fn ablation_svg(parameter: &str, points: &[AblationPoint]) -> Result<String> {
    let xs: Vec<f64> = points
        .iter()
        .map(|p| p.value.parse::<f64>().with_context(|| format!("non-numeric value `{}`", p.value)))
        .collect::<Result<_>>()?;
    let (lo, hi) = y_range(points.iter().map(|p| (p.row.mean, p.row.stderr)), false);
    let metric = points.first().map_or("value", |p| p.row.metric.as_str());
    let mut s = frame(&format!("Ablation: {parameter}"), metric, lo, hi);
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let plot_w = W - PAD_L - PAD_R;
    let px = |x: f64| if xmax > xmin { PAD_L + 20.0 + (plot_w - 40.0) * (x - xmin) / span } else { PAD_L + plot_w / 2.0 };
    let py = |v: f64| H - PAD_B - (H - PAD_B - PAD_T) * (v - lo) / (hi - lo);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let path: Vec<String> = order.iter().map(|&i| format!("{:.1},{:.1}", px(xs[i]), py(points[i].row.mean))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#4c78a8\" stroke-width=\"2\"/>", path.join(" "));
    for &i in &order {
        let (cx, r) = (px(xs[i]), &points[i].row);
        let _ = writeln!(s, "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#4c78a8\"/>", py(r.mean));
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            py(r.mean - r.stderr),
            py(r.mean + r.stderr)
        );
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", H - PAD_B + 18.0, esc(&points[i].value));
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", PAD_L + plot_w / 2.0, H - 12.0, esc(parameter));
    s.push_str("</svg>\n");
    Ok(s)
}
