//! Self-contained SVG plots: 2D latent scatter with boundary features and
//! outlier trajectories, ID/OOD score histograms, and sweep line charts.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("nothing to plot: {0}")]
    Empty(&'static str),
    #[error("cannot plot: {0}")]
    Dimension(String),
}

pub type PlotResult<T> = Result<T, PlotError>;

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Linear map onto two axes; identity-like when the data is already 2D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

impl Projection {
    /// Top two principal components of the rows.
    pub fn pca(rows: &[Vec<f64>]) -> PlotResult<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(PlotError::Empty("latent features"));
        }
        let d = rows[0].len();
        if d < 2 {
            return Err(PlotError::Dimension(format!("latent dimension {d} is below 2")));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(PlotError::Dimension("ragged feature rows".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| -> Vec<f64> {
            let col = eig.eigenvectors.column(order[k]);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| s * v).collect()
        };
        Ok(Projection { mean, axes: [axis(0), axis(1)] })
    }

    pub fn identity2() -> Self {
        Projection { mean: vec![0.0, 0.0], axes: [vec![1.0, 0.0], vec![0.0, 1.0]] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, z: &[f64]) -> PlotResult<(f64, f64)> {
        if z.len() != self.dim() {
            return Err(PlotError::Dimension(format!("expected {} coordinates, got {}", self.dim(), z.len())));
        }
        let c = |a: &[f64]| z.iter().zip(&self.mean).zip(a).map(|((v, m), w)| (v - m) * w).sum::<f64>();
        Ok((c(&self.axes[0]), c(&self.axes[1])))
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = x;
        for (a, b) in points {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        let pad = |r: (f64, f64)| {
            if !(r.0.is_finite() && r.1.is_finite()) {
                (0.0, 1.0)
            } else if r.1 - r.0 < 1e-12 {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                let p = 0.05 * (r.1 - r.0);
                (r.0 - p, r.1 + p)
            }
        };
        Frame { x: pad(x), y: pad(y) }
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let vx = f.x.0 + t * (f.x.1 - f.x.0);
        let vy = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.px(vx),
            y0 + 16.0,
            tick(vx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            f.py(vy) + 4.0,
            tick(vy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e4) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn legend(s: &mut String, entries: &[(String, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = WIDTH - MARGIN - 110.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(label));
    }
}

/// Inputs of the latent scatter, already projected to 2D.
#[derive(Debug, Clone, Default)]
pub struct LatentScene {
    pub class_names: Vec<String>,
    /// `(x, y, class)` per ID feature.
    pub points: Vec<(f64, f64, usize)>,
    pub boundary: Vec<(f64, f64)>,
    pub trajectories: Vec<Vec<(f64, f64)>>,
}

pub fn latent2d_svg(scene: &LatentScene) -> PlotResult<String> {
    if scene.points.is_empty() {
        return Err(PlotError::Empty("latent features"));
    }
    if let Some(&(_, _, c)) = scene.points.iter().find(|p| p.2 >= scene.class_names.len()) {
        return Err(PlotError::Dimension(format!("class {c} has no name")));
    }
    let all = scene
        .points
        .iter()
        .map(|&(x, y, _)| (x, y))
        .chain(scene.boundary.iter().copied())
        .chain(scene.trajectories.iter().flatten().copied());
    let f = Frame::fit(all);
    let mut s = header("Latent features, boundary features and synthesized outliers");
    axes(&mut s, &f, "component 1", "component 2");
    for &(x, y, c) in &scene.points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.5"/>"#,
            f.px(x),
            f.py(y),
            PALETTE[c % PALETTE.len()]
        );
    }
    for t in &scene.trajectories {
        if t.is_empty() {
            continue;
        }
        let pts: Vec<String> = t.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="0.8"/>"#,
            pts.join(" ")
        );
        let &(x, y) = t.last().expect("nonempty");
        let _ = writeln!(
            s,
            r#"<path d="M{0:.2},{1:.2} m-3,-3 l6,6 m0,-6 l-6,6" stroke="black" stroke-width="1.2"/>"#,
            f.px(x),
            f.py(y)
        );
    }
    for &(x, y) in &scene.boundary {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="none" stroke="black" stroke-width="1"/>"#,
            f.px(x),
            f.py(y)
        );
    }
    let entries: Vec<(String, &str)> = scene
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), PALETTE[i % PALETTE.len()]))
        .collect();
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bin counts over `[lo, hi]`, last bin closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

/// Overlaid density histograms of ID and OOD scores.
pub fn score_hist_svg(id: &[f64], ood: &[(String, Vec<f64>)], bins: usize) -> PlotResult<String> {
    if id.is_empty() {
        return Err(PlotError::Empty("ID scores"));
    }
    if ood.is_empty() || ood.iter().all(|(_, v)| v.is_empty()) {
        return Err(PlotError::Empty("OOD scores"));
    }
    if bins == 0 {
        return Err(PlotError::Dimension("zero histogram bins".into()));
    }
    let every = id.iter().chain(ood.iter().flat_map(|(_, v)| v.iter()));
    let (lo, hi) = every.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let series: Vec<(String, Vec<f64>)> = std::iter::once(("ID".to_string(), id.to_vec()))
        .chain(ood.iter().filter(|(_, v)| !v.is_empty()).cloned())
        .map(|(name, v)| {
            let counts = histogram(&v, lo, hi, bins);
            (name, counts.iter().map(|&c| c as f64 / v.len() as f64).collect())
        })
        .collect();
    let top = series.iter().flat_map(|(_, d)| d.iter().copied()).fold(0.0, f64::max);
    let f = Frame { x: (lo, hi), y: (0.0, top * 1.05) };
    let mut s = header("Detector score distribution");
    axes(&mut s, &f, "score", "fraction of samples");
    let bw = (hi - lo) / bins as f64;
    let mut entries = Vec::new();
    for (i, (name, dens)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (b, &d) in dens.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let x0 = f.px(lo + b as f64 * bw);
            let x1 = f.px(lo + (b + 1) as f64 * bw);
            let y = f.py(d);
            let _ = writeln!(
                s,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
                (x1 - x0).max(0.5),
                f.py(0.0) - y
            );
        }
        entries.push((name.clone(), color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

/// One named line of a sweep plot.
#[derive(Debug, Clone)]
pub struct Line {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn sweep_line_svg(title: &str, xlabel: &str, lines: &[Line]) -> PlotResult<String> {
    if lines.iter().all(|l| l.points.is_empty()) {
        return Err(PlotError::Empty("sweep rows"));
    }
    let f = Frame::fit(lines.iter().flat_map(|l| l.points.iter().copied()));
    let mut s = header(title);
    axes(&mut s, &f, xlabel, "metric");
    let mut entries = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = line.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for &(x, y) in &line.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(x), f.py(y));
        }
        entries.push((line.name.clone(), color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_classes_use_three_colors() {
        let scene = LatentScene {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            points: vec![(0.0, 0.0, 0), (1.0, 0.0, 1), (0.0, 1.0, 2)],
            boundary: vec![(0.5, 0.5)],
            trajectories: vec![vec![(0.5, 0.5), (0.6, 0.6)]],
        };
        let svg = latent2d_svg(&scene).unwrap();
        for c in &PALETTE[..3] {
            assert!(svg.contains(c));
        }
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn empty_inputs_error() {
        assert_eq!(score_hist_svg(&[], &[("o".into(), vec![1.0])], 10), Err(PlotError::Empty("ID scores")));
        assert_eq!(score_hist_svg(&[1.0], &[("o".into(), vec![])], 10), Err(PlotError::Empty("OOD scores")));
        assert!(latent2d_svg(&LatentScene::default()).is_err());
        assert!(sweep_line_svg("t", "x", &[]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let v = [0.0, 0.1, 0.5, 0.99, 1.0];
        let h = histogram(&v, 0.0, 1.0, 4);
        assert_eq!(h.iter().sum::<usize>(), 5);
        assert_eq!(h, vec![2, 0, 1, 2]);
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![0.0, i as f64, 0.01 * (i % 3) as f64]).collect();
        let p = Projection::pca(&rows).unwrap();
        assert!((p.axes[0][1] - 1.0).abs() < 1e-9);
        assert!(p.project(&[1.0, 2.0]).is_err());
        assert!(Projection::pca(&[vec![1.0]]).is_err());
    }
}
