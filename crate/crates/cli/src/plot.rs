//! Line figures rendered to SVG (with labels) and PNG (geometry only).
//!
//! All series share one x-axis: the sorted union of their x values. A series
//! with no value at some x leaves a gap there; points are never interpolated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rfssl_core::eval::SweepRow;
use rfssl_core::{Error, EvalReport, InitSource, Result};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// One entry per figure x value.
    pub values: Vec<Option<f64>>,
}

impl Series {
    pub fn num_points(&self) -> usize {
        self.values.iter().flatten().count()
    }

    /// Maximal runs of consecutive present points, as (x index, y) pairs.
    pub fn segments(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            match v {
                Some(y) => cur.push((i, *y)),
                None if !cur.is_empty() => out.push(std::mem::take(&mut cur)),
                None => {}
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub xs: Vec<f64>,
    pub series: Vec<Series>,
}

impl Figure {
    /// Builds a figure from labelled (x, y) point lists.
    pub fn from_points(
        title: &str,
        x_label: &str,
        y_label: &str,
        log_x: bool,
        curves: Vec<(String, Vec<(f64, f64)>)>,
    ) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::Config("nothing to plot".into()));
        }
        let mut xs: Vec<f64> = curves.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)).collect();
        if xs.iter().any(|x| !x.is_finite() || (log_x && *x <= 0.0)) {
            return Err(Error::Config("plot x values must be finite (and positive on a log axis)".into()));
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let series = curves
            .into_iter()
            .map(|(label, points)| {
                let mut values = vec![None; xs.len()];
                for (x, y) in points {
                    let i = xs.iter().position(|&u| u == x).expect("x collected above");
                    values[i] = Some(y);
                }
                Series { label, values }
            })
            .collect();
        Ok(Figure {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x,
            xs,
            series,
        })
    }

    pub fn num_points(&self) -> usize {
        self.series.iter().map(Series::num_points).sum()
    }

    fn x_range(&self) -> (f64, f64) {
        let t = |x: f64| if self.log_x { x.log10() } else { x };
        let lo = t(self.xs[0]);
        let hi = t(*self.xs.last().unwrap());
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    }

    fn y_range(&self) -> (f64, f64) {
        let ys: Vec<f64> = self.series.iter().flat_map(|s| s.values.iter().flatten().copied()).collect();
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(100.0);
        (lo, hi)
    }

    /// Pixel position of (x, y).
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        let tx = if self.log_x { x.log10() } else { x };
        let pw = WIDTH as f64 - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT as f64 - MARGIN_TOP - MARGIN_BOTTOM;
        (
            MARGIN_LEFT + (tx - x0) / (x1 - x0) * pw,
            MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph,
        )
    }

    fn y_ticks(&self) -> Vec<f64> {
        let (lo, hi) = self.y_range();
        let step = if hi - lo > 50.0 { 20.0 } else { 10.0 };
        let mut t = (lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= hi + 1e-9 {
            out.push(t);
            t += step;
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (left, right) = (MARGIN_LEFT, WIDTH as f64 - MARGIN_RIGHT);
        let (top, bottom) = (MARGIN_TOP, HEIGHT as f64 - MARGIN_BOTTOM);
        let _ = writeln!(
            s,
            r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
        );
        for &x in &self.xs {
            let (px, _) = self.project(x, 0.0);
            let _ = writeln!(
                s,
                r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                bottom + 5.0,
                bottom + 18.0,
                fmt_tick(x)
            );
        }
        for y in self.y_ticks() {
            let (_, py) = self.project(self.xs[0], y);
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                left - 5.0,
                left - 8.0,
                py + 4.0,
                fmt_tick(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            (left + right) / 2.0,
            top - 15.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (left + right) / 2.0,
            bottom + 40.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (top + bottom) / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let [r, g, b] = PALETTE[k % PALETTE.len()];
            let color = format!("rgb({r},{g},{b})");
            for seg in series.segments() {
                let pts: Vec<String> = seg
                    .iter()
                    .map(|&(i, y)| {
                        let (px, py) = self.project(self.xs[i], y);
                        format!("{px:.2},{py:.2}")
                    })
                    .collect();
                if pts.len() > 1 {
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        pts.join(" ")
                    );
                }
                for &(i, y) in &seg {
                    let (px, py) = self.project(self.xs[i], y);
                    let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{color}"/>"#);
                }
            }
            let ly = top + 10.0 + 18.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                right + 15.0,
                right + 35.0,
                right + 40.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn to_png(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let black = Rgb([0, 0, 0]);
        let (left, right) = (MARGIN_LEFT, WIDTH as f64 - MARGIN_RIGHT);
        let (top, bottom) = (MARGIN_TOP, HEIGHT as f64 - MARGIN_BOTTOM);
        draw_line(&mut img, (left, top), (left, bottom), black);
        draw_line(&mut img, (left, bottom), (right, bottom), black);
        for &x in &self.xs {
            let (px, _) = self.project(x, 0.0);
            draw_line(&mut img, (px, bottom), (px, bottom + 5.0), black);
        }
        for y in self.y_ticks() {
            let (_, py) = self.project(self.xs[0], y);
            draw_line(&mut img, (left - 5.0, py), (left, py), black);
        }
        for (k, series) in self.series.iter().enumerate() {
            let color = Rgb(PALETTE[k % PALETTE.len()]);
            for seg in series.segments() {
                let pts: Vec<(f64, f64)> = seg.iter().map(|&(i, y)| self.project(self.xs[i], y)).collect();
                for w in pts.windows(2) {
                    draw_line(&mut img, w[0], w[1], color);
                }
                for &p in &pts {
                    draw_marker(&mut img, p, color);
                }
            }
            let ly = top + 10.0 + 18.0 * k as f64;
            draw_line(&mut img, (right + 15.0, ly), (right + 35.0, ly), color);
        }
        img
    }

    /// Writes `<stem>.svg` and `<stem>.png` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        fs::write(&svg, self.to_svg()).map_err(|e| Error::io(&svg, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.to_png()
            .save(&png)
            .map_err(|e| Error::io(&png, std::io::Error::other(e.to_string())))?;
        Ok(vec![svg, png])
    }
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Two-pixel-wide line by uniform sampling along the longer axis.
fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        put(img, x, y, c);
        put(img, x + 1, y, c);
        put(img, x, y + 1, c);
    }
}

fn draw_marker(img: &mut RgbImage, (x, y): (f64, f64), c: Rgb<u8>) {
    let (x, y) = (x.round() as i64, y.round() as i64);
    for dx in -3..=3 {
        for dy in -3..=3 {
            put(img, x + dx, y + dy, c);
        }
    }
}

/// One accuracy-vs-SNR curve per labelled report.
pub fn accuracy_vs_snr(reports: &[(String, EvalReport)]) -> Result<Figure> {
    if reports.is_empty() {
        return Err(Error::Config("accuracy-vs-SNR plot needs at least one report".into()));
    }
    let curves = reports
        .iter()
        .map(|(label, r)| {
            let pts = r.per_snr_accuracy.iter().map(|(&s, &a)| (s as f64, a)).collect();
            (label.clone(), pts)
        })
        .collect();
    Figure::from_points("Accuracy vs. SNR", "SNR (dB)", "Accuracy (%)", false, curves)
}

/// Seed-mean accuracy against label fraction, one curve per initialization,
/// on a logarithmic x-axis.
pub fn sample_efficiency(rows: &[SweepRow]) -> Result<Figure> {
    if rows.is_empty() {
        return Err(Error::Config("sample-efficiency plot needs at least one sweep row".into()));
    }
    let mut groups: Vec<(InitSource, BTreeMap<u64, (f64, usize)>)> = Vec::new();
    for r in rows {
        let idx = match groups.iter().position(|(i, _)| *i == r.init) {
            Some(i) => i,
            None => {
                groups.push((r.init, BTreeMap::new()));
                groups.len() - 1
            }
        };
        let e = groups[idx].1.entry(r.fraction.to_bits()).or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    let curves = groups
        .into_iter()
        .map(|(init, m)| {
            let pts = m.into_iter().map(|(f, (sum, n))| (f64::from_bits(f), sum / n as f64)).collect();
            (init.name().to_string(), pts)
        })
        .collect();
    Figure::from_points("Sample efficiency", "Fraction of labelled pool", "Accuracy (%)", true, curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
        pts.to_vec()
    }

    #[test]
    fn disjoint_grids_share_a_union_axis_with_gaps() {
        let fig = Figure::from_points(
            "t",
            "x",
            "y",
            false,
            vec![
                ("a".into(), points(&[(0.0, 10.0), (2.0, 20.0), (4.0, 30.0)])),
                ("b".into(), points(&[(1.0, 5.0), (3.0, 6.0)])),
            ],
        )
        .unwrap();
        assert_eq!(fig.xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fig.series[0].values, vec![Some(10.0), None, Some(20.0), None, Some(30.0)]);
        // No interpolation: every point stands alone.
        assert_eq!(fig.series[0].segments().len(), 3);
        assert!(fig.series[1].segments().iter().all(|s| s.len() == 1));
        assert_eq!(fig.num_points(), 5);
        assert!(!fig.to_svg().contains("<polyline"));
    }

    #[test]
    fn contiguous_points_form_one_polyline() {
        let fig = Figure::from_points("t", "x", "y", false, vec![("a".into(), points(&[(0.0, 1.0), (1.0, 2.0)]))]).unwrap();
        assert_eq!(fig.to_svg().matches("<polyline").count(), 1);
        assert_eq!(fig.to_svg().matches("<circle").count(), 2);
    }

    #[test]
    fn log_axis_refuses_non_positive_x() {
        assert!(Figure::from_points("t", "x", "y", true, vec![("a".into(), points(&[(0.0, 1.0)]))]).is_err());
    }

    #[test]
    fn png_has_curve_pixels_in_series_colour() {
        let fig = Figure::from_points("t", "x", "y", false, vec![("a".into(), points(&[(0.0, 50.0), (1.0, 50.0)]))]).unwrap();
        let img = fig.to_png();
        let (px, py) = fig.project(0.5, 50.0);
        assert_eq!(*img.get_pixel(px.round() as u32, py.round() as u32), Rgb(PALETTE[0]));
    }

    #[test]
    fn efficiency_plot_has_one_point_per_fraction_and_init() {
        let fractions = [0.005, 0.01, 0.05, 0.10, 0.50, 0.75, 0.90];
        let rows: Vec<SweepRow> = fractions
            .iter()
            .flat_map(|&fraction| {
                [InitSource::SslCheckpoint, InitSource::Xavier].into_iter().flat_map(move |init| {
                    (0..3).map(move |seed| SweepRow { fraction, init, seed, n_train: 1, accuracy: 10.0 * seed as f64 })
                })
            })
            .collect();
        let fig = sample_efficiency(&rows).unwrap();
        assert!(fig.log_x);
        assert_eq!(fig.series.len(), 2);
        assert_eq!(fig.num_points(), 14);
        assert_eq!(fig.series[0].values[0], Some(10.0));
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(accuracy_vs_snr(&[]).is_err());
        assert!(sample_efficiency(&[]).is_err());
    }
}
