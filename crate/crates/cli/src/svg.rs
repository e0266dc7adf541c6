//! Static SVG density overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attnlimit_core::stats::DensityEstimate;
use thiserror::Error;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;
/// Points per polyline; denser grids are thinned.
const MAX_POINTS: usize = 512;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveStyle {
    /// Finite-width estimates.
    Dashed,
    /// The limit law.
    Solid,
}

#[derive(Debug, Clone)]
pub struct Overlay {
    pub label: String,
    pub density: DensityEstimate,
    pub style: CurveStyle,
}

#[derive(Debug, Error)]
pub enum SvgError {
    #[error("nothing to plot")]
    Empty,
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the overlays as an SVG document.
///
/// The x range is the 0.5%–99.5% span of the union of grids where the curves
/// carry mass, so heavy tails do not squash the plot.
pub fn render_svg(overlays: &[Overlay], title: &str) -> Result<String, SvgError> {
    if overlays.is_empty() {
        return Err(SvgError::Empty);
    }
    let (mut lo, mut hi, mut top) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for o in overlays {
        let (a, b) = visible_range(&o.density);
        lo = lo.min(a);
        hi = hi.max(b);
        top = top.max(o.density.density().iter().copied().fold(0.0, f64::max));
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    if top <= 0.0 {
        top = 1.0;
    }
    top *= 1.05;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - lo) / (hi - lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + plot_h - y / top * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    // Axes with five ticks each.
    let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP + plot_h);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{MARGIN_TOP} V{y0} H{}" fill="none" stroke="black"/>"#,
        x0 + plot_w
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = lo + t * (hi - lo);
        let yv = t * top;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.2}</text>"#,
            sx(xv),
            y0 + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            x0 - 6.0,
            sy(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">value</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">density</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for (k, o) in overlays.iter().enumerate() {
        let color = match o.style {
            CurveStyle::Solid => "black",
            CurveStyle::Dashed => PALETTE[k % PALETTE.len()],
        };
        let dash = match o.style {
            CurveStyle::Solid => String::new(),
            CurveStyle::Dashed => r#" stroke-dasharray="6 4""#.to_string(),
        };
        let grid = o.density.grid();
        let dens = o.density.density();
        let step = grid.len().div_ceil(MAX_POINTS).max(1);
        let points: Vec<String> = (0..grid.len())
            .step_by(step)
            .filter(|&i| grid[i] >= lo && grid[i] <= hi)
            .map(|i| format!("{:.2},{:.2}", sx(grid[i]), sy(dens[i])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN_TOP + 16.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.6"{dash}/>"#,
            lx + 28.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 34.0,
            ly + 4.0,
            escape(&o.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grid span holding the central 99% of the tabulated mass.
fn visible_range(d: &DensityEstimate) -> (f64, f64) {
    let grid = d.grid();
    let dens = d.density();
    let mut cum = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cum[i] = cum[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (dens[i] + dens[i - 1]);
    }
    let total = cum[cum.len() - 1];
    if total <= 0.0 {
        return d.support();
    }
    let lo = cum.partition_point(|&c| c < 0.005 * total);
    let hi = cum.partition_point(|&c| c < 0.995 * total);
    (grid[lo.min(grid.len() - 1)], grid[hi.min(grid.len() - 1)])
}

pub fn emit_svg(overlays: &[Overlay], title: &str, path: &Path) -> Result<(), SvgError> {
    let doc = render_svg(overlays, title)?;
    fs::write(path, doc).map_err(|source| SvgError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}
