//! SVG rendering of deferral curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{read_curves_csv, DeferralCurve};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 200.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Affine map from (deferral rate, accuracy) to SVG pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotFrame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl PlotFrame {
    /// Frame for the standard canvas with a y range covering `accuracies`,
    /// widened to multiples of 0.05.
    pub fn for_accuracies(accuracies: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for a in accuracies.filter(|a| a.is_finite()) {
            lo = lo.min(a);
            hi = hi.max(a);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let mut y_min = (lo * 20.0).floor() / 20.0;
        let mut y_max = (hi * 20.0).ceil() / 20.0;
        if y_max - y_min < 0.05 {
            y_min -= 0.05;
            y_max += 0.05;
        }
        PlotFrame {
            x_min: 0.0,
            x_max: 1.0,
            y_min,
            y_max,
            left: MARGIN_LEFT,
            top: MARGIN_TOP,
            width: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            height: HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
        }
    }

    pub fn map(&self, rate: f64, accuracy: f64) -> (f64, f64) {
        let px = self.left + (rate - self.x_min) / (self.x_max - self.x_min) * self.width;
        let py = self.top + (self.y_max - accuracy) / (self.y_max - self.y_min) * self.height;
        (px, py)
    }
}

/// Legend labels; repeated labels get a `#2`, `#3`, ... suffix.
pub fn legend_labels(curves: &[DeferralCurve]) -> Vec<String> {
    let mut keys: Vec<(&str, u64)> = curves.iter().map(|c| (c.scenario.as_str(), c.seed)).collect();
    keys.sort();
    keys.dedup();
    let qualify = keys.len() > 1;
    let mut seen: Vec<String> = Vec::new();
    curves
        .iter()
        .map(|c| {
            let base = if qualify {
                format!("{} ({}, seed {})", c.rule, c.scenario, c.seed)
            } else {
                c.rule.clone()
            };
            let n = seen.iter().filter(|s| **s == base).count();
            seen.push(base.clone());
            if n == 0 {
                base
            } else {
                format!("{base} #{}", n + 1)
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders an accuracy-vs-deferral-rate chart, one polyline per curve.
pub fn render_svg(curves: &[DeferralCurve]) -> Result<String> {
    if curves.is_empty() || curves.iter().all(|c| c.points.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let frame = PlotFrame::for_accuracies(curves.iter().flat_map(|c| c.points.iter().map(|p| p.accuracy)));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let (x0, y0) = frame.map(frame.x_min, frame.y_min);
    let (x1, y1) = frame.map(frame.x_max, frame.y_max);
    let _ = writeln!(
        s,
        r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black"/>"#,
        x0,
        y1,
        x1 - x0,
        y0 - y1
    );
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let (px, _) = frame.map(r, frame.y_min);
        let _ = writeln!(s, r#"<line x1="{px:.3}" y1="{y0:.3}" x2="{px:.3}" y2="{:.3}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.3}" y="{:.3}" text-anchor="middle">{r:.1}</text>"#, y0 + 20.0);
    }
    let steps = ((frame.y_max - frame.y_min) / 0.05).round() as usize;
    let every = steps.div_ceil(10).max(1);
    for i in (0..=steps).step_by(every) {
        let a = frame.y_min + i as f64 * 0.05;
        let (_, py) = frame.map(frame.x_min, a);
        let _ = writeln!(s, r#"<line x1="{:.3}" y1="{py:.3}" x2="{x0:.3}" y2="{py:.3}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{a:.2}</text>"#, x0 - 8.0, py + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">deferral rate</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.3}" text-anchor="middle" transform="rotate(-90 18 {:.3})">accuracy</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let labels = legend_labels(curves);
    for (i, (c, label)) in curves.iter().zip(&labels).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if (i / PALETTE.len()) % 2 == 1 { r#" stroke-dasharray="6 3""# } else { "" };
        let mut pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.deferral_rate, p.accuracy)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts
            .iter()
            .map(|&(r, a)| {
                let (px, py) = frame.map(r, a);
                format!("{px:.3},{py:.3}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(label)
        );
        let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.3}" y1="{ly:.3}" x2="{:.3}" y2="{ly:.3}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads curve CSVs in order and writes the chart.
pub fn emit_plot(csvs: &[PathBuf], out: &Path) -> Result<()> {
    if csvs.is_empty() {
        return Err(Error::Config("plot needs at least one curve CSV".into()));
    }
    let mut curves = Vec::new();
    for p in csvs {
        curves.extend(read_curves_csv(p)?);
    }
    let svg = render_svg(&curves)?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}
