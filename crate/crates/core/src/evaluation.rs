//! Error and iteration metrics, singular value spectra, vector field
//! exports and plain SVG renderings of them.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{format_f64, TrajectoryRecord};
use crate::linalg::singular_values;
use crate::network::{NetworkParams, StepMap};

/// Per-state 2-norm of `predicted - reference` over the whole trajectory.
pub fn trajectory_error(reference: &TrajectoryRecord, predicted: &TrajectoryRecord) -> Result<Vec<f64>> {
    if reference.times.len() != predicted.times.len()
        || reference.times.iter().zip(&predicted.times).any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::Argument("trajectories are on different time grids".into()));
    }
    let n = reference.dim();
    if predicted.dim() != n {
        return Err(Error::Dimension { context: "predicted trajectory dimension", expected: n, got: predicted.dim() });
    }
    let mut sums = vec![0.0; n];
    for (a, b) in reference.states.iter().zip(&predicted.states) {
        for i in 0..n {
            sums[i] += (a[i] - b[i]).powi(2);
        }
    }
    Ok(sums.into_iter().map(f64::sqrt).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Newton,
    Constrained,
    Unconstrained,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Newton => "newton",
            Method::Constrained => "constrained",
            Method::Unconstrained => "unconstrained",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Method::Newton, Method::Constrained, Method::Unconstrained].into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Training,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "training" => Some(Split::Training),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Mean, population standard deviation and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("no values to summarize".into()));
        }
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Stats {
            mean,
            sd: var.sqrt(),
            // Rounding can leave the mean a hair above the max.
            max: max.max(mean),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub split: Split,
    /// `mean`, `sd` or `max`, prefixed by `error_` or `iterations_`.
    pub metric: String,
    /// `x1..xn` for errors, `all` for iteration counts.
    pub state: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

pub const METRICS_HEADER: &str = "method,split,metric,state,value";

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, method: Method, split: Split, metric: &str, state: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split && r.metric == metric && r.state == state)
            .map(|r| r.value)
    }

    /// Mean trajectory error averaged over the states.
    pub fn mean_error(&self, method: Method, split: Split) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.split == split && r.metric == "error_mean")
            .map(|r| r.value)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method.as_str(),
                r.split.as_str(),
                r.metric,
                r.state,
                format_f64(r.value)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Argument(format!("metrics CSV must start with {METRICS_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Argument(format!("metrics CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(MetricRow {
                method: Method::parse(f[0]).ok_or_else(bad)?,
                split: Split::parse(f[1]).ok_or_else(bad)?,
                metric: f[2].to_string(),
                state: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(MetricsTable { rows })
    }
}

/// Summarizes per-trajectory errors (one vector per trajectory) and
/// cumulative iteration counts into mean, sd and max rows.
pub fn summarize(method: Method, split: Split, errors: &[Vec<f64>], iterations: &[usize]) -> Result<MetricsTable> {
    if errors.is_empty() || iterations.is_empty() {
        return Err(Error::Argument("summarize needs at least one trajectory".into()));
    }
    let n = errors[0].len();
    if errors.iter().any(|e| e.len() != n) {
        return Err(Error::Argument("error vectors differ in length".into()));
    }
    let mut rows = Vec::with_capacity(3 * (n + 1));
    let mut push = |metric: &str, state: String, value: f64| {
        rows.push(MetricRow { method, split, metric: metric.to_string(), state, value })
    };
    for i in 0..n {
        let col: Vec<f64> = errors.iter().map(|e| e[i]).collect();
        let s = Stats::of(&col)?;
        push("error_mean", format!("x{}", i + 1), s.mean);
        push("error_sd", format!("x{}", i + 1), s.sd);
        push("error_max", format!("x{}", i + 1), s.max);
    }
    let counts: Vec<f64> = iterations.iter().map(|&c| c as f64).collect();
    let s = Stats::of(&counts)?;
    push("iterations_mean", "all".into(), s.mean);
    push("iterations_sd", "all".into(), s.sd);
    push("iterations_max", "all".into(), s.max);
    Ok(MetricsTable { rows })
}

/// Grid over two components of `k2`; the rest are held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: (usize, usize),
    /// Grid center; `None` centers on the held `k2`.
    #[serde(default)]
    pub center: Option<(f64, f64)>,
    pub half_width: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrow {
    pub k2_i: f64,
    pub k2_j: f64,
    pub dx: f64,
    pub dy: f64,
    /// 2-norm of the full displacement vector.
    pub mag: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldGrid {
    pub anchor: Vec<f64>,
    pub axes: (usize, usize),
    /// Values of the held `k2` components.
    pub base_k2: Vec<f64>,
    pub arrows: Vec<Arrow>,
}

pub const VECTOR_FIELD_HEADER: &str = "k2_i,k2_j,dx,dy,mag";

impl VectorFieldGrid {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{VECTOR_FIELD_HEADER}\n");
        for a in &self.arrows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                format_f64(a.k2_i),
                format_f64(a.k2_j),
                format_f64(a.dx),
                format_f64(a.dy),
                format_f64(a.mag)
            );
        }
        out
    }
}

/// Displacement `map(k2, x) - k2` on a square grid in the `axes` plane.
pub fn export_vector_field<M: StepMap + ?Sized>(
    map: &M,
    x: &DVector<f64>,
    base_k2: &DVector<f64>,
    grid: &GridSpec,
) -> Result<VectorFieldGrid> {
    let n = map.dim();
    let (i, j) = grid.axes;
    if i == j || i >= n || j >= n {
        return Err(Error::Argument(format!("axes ({i}, {j}) invalid for dimension {n}")));
    }
    if x.len() != n || base_k2.len() != n {
        return Err(Error::Dimension { context: "vector field anchor", expected: n, got: x.len().min(base_k2.len()) });
    }
    if grid.points < 2 || !(grid.half_width > 0.0) {
        return Err(Error::Argument("grid needs at least 2 points and a positive width".into()));
    }
    let (ci, cj) = grid.center.unwrap_or((base_k2[i], base_k2[j]));
    let coord = |c: f64, k: usize| c - grid.half_width + 2.0 * grid.half_width * k as f64 / (grid.points - 1) as f64;
    let mut arrows = Vec::with_capacity(grid.points * grid.points);
    for a in 0..grid.points {
        for b in 0..grid.points {
            let mut k2 = base_k2.clone();
            k2[i] = coord(ci, a);
            k2[j] = coord(cj, b);
            let d = map.step(&k2, x) - &k2;
            arrows.push(Arrow { k2_i: k2[i], k2_j: k2[j], dx: d[i], dy: d[j], mag: d.norm() });
        }
    }
    Ok(VectorFieldGrid {
        anchor: x.iter().copied().collect(),
        axes: (i, j),
        base_k2: base_k2.iter().copied().collect(),
        arrows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: String,
    /// All singular values, descending.
    pub values: Vec<f64>,
}

/// Full singular value spectrum of every `W_i`.
pub fn export_sv_histogram(p: &NetworkParams) -> Result<Vec<LayerSpectrum>> {
    p.weights()
        .into_iter()
        .enumerate()
        .map(|(k, w)| Ok(LayerSpectrum { layer: format!("W{}", k + 1), values: singular_values(w)? }))
        .collect()
}

pub fn spectra_to_csv(spectra: &[LayerSpectrum]) -> String {
    let mut out = String::from("layer,index,singular_value\n");
    for s in spectra {
        for (k, v) in s.values.iter().enumerate() {
            let _ = writeln!(out, "{},{k},{}", s.layer, format_f64(*v));
        }
    }
    out
}

/// One labeled trajectory in an overlay.
pub struct Series<'a> {
    pub label: &'a str,
    pub record: &'a TrajectoryRecord,
}

/// Long-form CSV `label,t,state,value` of an overlay.
pub fn overlay_csv(series: &[Series<'_>]) -> String {
    let mut out = String::from("label,t,state,value\n");
    for s in series {
        for (t, x) in s.record.times.iter().zip(&s.record.states) {
            for (i, v) in x.iter().enumerate() {
                let _ = writeln!(out, "{},{},x{},{}", s.label, format_f64(*t), i + 1, format_f64(*v));
            }
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 50.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

#[allow(clippy::too_many_arguments)]
fn axis_frame(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64), title: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"none\" stroke=\"#444\"/>"
    );
    let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\">{title}</text>", x0, y0 - 6.0);
    let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>", x0 - 4.0, y0 + 10.0, yr.1);
    let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>", x0 - 4.0, y0 + h, yr.0);
    let _ = writeln!(out, "<text x=\"{x0:.2}\" y=\"{:.2}\">{:.3}</text>", y0 + h + 14.0, xr.0);
    let _ =
        writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>", x0 + w, y0 + h + 14.0, xr.1);
}

/// One panel per state with every series drawn on a shared time axis.
pub fn render_overlay_svg(series: &[Series<'_>]) -> String {
    let n = series.iter().map(|s| s.record.dim()).max().unwrap_or(0);
    let height = MARGIN + n.max(1) as f64 * (PANEL_H + MARGIN);
    let mut out = svg_open(PANEL_W + 2.0 * MARGIN + 120.0, height);
    let tr = bounds(series.iter().flat_map(|s| s.record.times.iter().copied()));
    for i in 0..n {
        let y0 = MARGIN + i as f64 * (PANEL_H + MARGIN);
        let yr = bounds(series.iter().flat_map(|s| s.record.component(i).into_iter()));
        axis_frame(&mut out, MARGIN, y0, PANEL_W, PANEL_H, tr, yr, &format!("x{}", i + 1));
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let mut path = String::new();
            for (t, x) in s.record.times.iter().zip(&s.record.states) {
                let px = MARGIN + (t - tr.0) / (tr.1 - tr.0) * PANEL_W;
                let py = y0 + PANEL_H - (x[i] - yr.0) / (yr.1 - yr.0) * PANEL_H;
                if px.is_finite() && py.is_finite() {
                    let _ = write!(path, "{}{px:.2},{py:.2}", if path.is_empty() { "M" } else { " L" });
                }
            }
            let dash = if k == 0 { "" } else { " stroke-dasharray=\"6,3\"" };
            let _ = writeln!(out, "<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>");
        }
    }
    for (k, s) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let x = MARGIN + PANEL_W + 12.0;
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            x + 16.0
        );
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", x + 20.0, y + 4.0, s.label);
    }
    out.push_str("</svg>\n");
    out
}

/// Quiver plot of a vector field; arrows are drawn at a uniform scale
/// so the longest spans one grid cell.
pub fn render_quiver_svg(grid: &VectorFieldGrid, title: &str) -> String {
    let size = 480.0;
    let mut out = svg_open(size + 2.0 * MARGIN, size + 2.0 * MARGIN);
    let xr = bounds(grid.arrows.iter().map(|a| a.k2_i));
    let yr = bounds(grid.arrows.iter().map(|a| a.k2_j));
    axis_frame(&mut out, MARGIN, MARGIN, size, size, xr, yr, title);
    let cells = (grid.arrows.len() as f64).sqrt().max(2.0) - 1.0;
    let cell = size / cells;
    let longest =
        grid.arrows.iter().map(|a| (a.dx * a.dx + a.dy * a.dy).sqrt()).filter(|m| m.is_finite()).fold(0.0, f64::max);
    let to_px = |x: f64, y: f64| {
        (MARGIN + (x - xr.0) / (xr.1 - xr.0) * size, MARGIN + size - (y - yr.0) / (yr.1 - yr.0) * size)
    };
    let max_mag = grid.arrows.iter().map(|a| a.mag).filter(|m| m.is_finite()).fold(0.0, f64::max);
    for a in &grid.arrows {
        let (px, py) = to_px(a.k2_i, a.k2_j);
        let len = (a.dx * a.dx + a.dy * a.dy).sqrt();
        if !len.is_finite() || longest == 0.0 {
            continue;
        }
        let scale = 0.9 * cell / longest;
        let (qx, qy) = (px + a.dx * scale, py - a.dy * scale);
        let shade = if max_mag > 0.0 { (a.mag / max_mag * 200.0).round() as u8 } else { 0 };
        let _ = writeln!(
            out,
            "<line x1=\"{px:.2}\" y1=\"{py:.2}\" x2=\"{qx:.2}\" y2=\"{qy:.2}\" stroke=\"rgb({shade},40,{})\" stroke-width=\"1.2\"/>",
            200 - shade
        );
        let _ = writeln!(out, "<circle cx=\"{qx:.2}\" cy=\"{qy:.2}\" r=\"1.5\" fill=\"#222\"/>");
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram of all singular values of all layers with a log-scaled count
/// axis and a marker at 1.
pub fn render_histogram_svg(spectra: &[LayerSpectrum], bins: usize, title: &str) -> String {
    let bins = bins.max(1);
    let (w, h) = (PANEL_W, 300.0);
    let mut out = svg_open(w + 2.0 * MARGIN, h + 2.0 * MARGIN);
    let values: Vec<f64> = spectra.iter().flat_map(|s| s.values.iter().copied()).collect();
    let (lo, hi) = bounds(values.iter().copied().chain([0.0, 1.0]));
    let mut counts = vec![0usize; bins];
    for v in &values {
        let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let top = counts.iter().map(|&c| ((c + 1) as f64).log10()).fold(0.0, f64::max).max(1.0);
    axis_frame(&mut out, MARGIN, MARGIN, w, h, (lo, hi), (0.0, top), title);
    let bw = w / bins as f64;
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bh = ((c + 1) as f64).log10() / top * h;
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"#1f77b4\"/>",
            MARGIN + k as f64 * bw,
            MARGIN + h - bh,
            bw * 0.9
        );
    }
    let one = MARGIN + (1.0 - lo) / (hi - lo) * w;
    let _ = writeln!(
        out,
        "<line x1=\"{one:.2}\" y1=\"{MARGIN:.2}\" x2=\"{one:.2}\" y2=\"{:.2}\" stroke=\"#d62728\" stroke-dasharray=\"4,3\"/>",
        MARGIN + h
    );
    out.push_str("</svg>\n");
    out
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
