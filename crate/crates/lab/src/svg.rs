//! Minimal SVG scatter plots with optional fitted lines.
//!
//! Output depends only on the data, so plots are as reproducible as the CSVs.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// `y = exp(intercept) * x^slope` in data units (log-log axes).
    pub power_fit: Option<(f64, f64)>,
    /// Draw a polyline through the points instead of markers.
    pub as_line: bool,
}

impl Series {
    pub fn points(label: &str, points: Vec<(f64, f64)>) -> Self {
        Series { label: label.to_string(), points, power_fit: None, as_line: false }
    }

    pub fn with_fit(mut self, slope: f64, intercept: f64) -> Self {
        self.power_fit = Some((slope, intercept));
        self
    }
}

#[derive(Debug, Clone)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn tf(v: f64, log: bool) -> Option<f64> {
    if log {
        (v > 0.0 && v.is_finite()).then(|| v.log10())
    } else {
        v.is_finite().then_some(v)
    }
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}

fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let (a, b) = (lo.ceil() as i64, hi.floor() as i64);
        let step = ((b - a) / 6 + 1).max(1);
        (a..=b).step_by(step as usize).map(|v| v as f64).collect()
    } else {
        (0..=5).map(|i| lo + (hi - lo) * i as f64 / 5.0).collect()
    }
}

impl Plot {
    pub fn render(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter_map(|&(x, y)| Some((tf(x, self.log_x)?, tf(y, self.log_y)?)))
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if pts.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).max(1e-12 * (1.0 + lo.abs()));
            *lo -= 0.05 * span;
            *hi += 0.05 * span;
        };
        pad(&mut x0, &mut x1);
        pad(&mut y0, &mut y1);
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(&self.title));
        let (bx, by) = (H - BOTTOM, LEFT);
        let _ = writeln!(
            s,
            r#"<path d="M{by} {TOP} L{by} {bx} L{:.2} {bx}" stroke="black" fill="none"/>"#,
            W - RIGHT
        );
        for t in ticks(x0, x1, self.log_x) {
            let x = px(t);
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bx}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bx + 5.0);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bx + 18.0, tick_label(t, self.log_x));
        }
        for t in ticks(y0, y1, self.log_y) {
            let y = py(t);
            let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{by}" y2="{y:.2}" stroke="black"/>"#, by - 5.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, by - 8.0, y + 4.0, tick_label(t, self.log_y));
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 15.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            esc(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let visible: Vec<(f64, f64)> = series
                .points
                .iter()
                .filter_map(|&(x, y)| Some((px(tf(x, self.log_x)?), py(tf(y, self.log_y)?))))
                .collect();
            if series.as_line {
                let d: Vec<String> = visible
                    .iter()
                    .enumerate()
                    .map(|(k, (x, y))| format!("{}{x:.2} {y:.2}", if k == 0 { "M" } else { "L" }))
                    .collect();
                let _ = writeln!(s, r#"<path d="{}" stroke="{color}" fill="none"/>"#, d.join(" "));
            } else {
                for (x, y) in &visible {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
                }
            }
            if let Some((slope, intercept)) = series.power_fit {
                let xs: Vec<f64> = series.points.iter().map(|p| p.0).filter(|x| *x > 0.0).collect();
                if let (Some(lo), Some(hi)) = (xs.iter().copied().reduce(f64::min), xs.iter().copied().reduce(f64::max)) {
                    let f = |x: f64| (intercept + slope * x.ln()).exp();
                    if let (Some(a), Some(b), Some(c), Some(d)) =
                        (tf(lo, self.log_x), tf(f(lo), self.log_y), tf(hi, self.log_x), tf(f(hi), self.log_y))
                    {
                        let _ = writeln!(
                            s,
                            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                            px(a),
                            py(b),
                            px(c),
                            py(d)
                        );
                    }
                }
            }
            let ly = TOP + 8.0 + 16.0 * i as f64;
            let label = match series.power_fit {
                Some((slope, _)) => format!("{} (slope {slope:.3})", series.label),
                None => series.label.clone(),
            };
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#, W - RIGHT - 220.0, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, W - RIGHT - 205.0, esc(&label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points_and_fit() {
        let p = Plot {
            title: "bias <scaling>".into(),
            x_label: "alpha".into(),
            y_label: "|bias|".into(),
            log_x: true,
            log_y: true,
            series: vec![Series::points("raw", vec![(0.01, 0.02), (0.02, 0.04), (0.04, 0.08)]).with_fit(1.0, 2f64.ln())],
        };
        let svg = p.render();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("&lt;scaling&gt;"));
        assert_eq!(svg, p.render());
    }

    #[test]
    fn skips_non_positive_values_on_log_axes() {
        let p = Plot {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            log_x: false,
            log_y: true,
            series: vec![Series::points("d", vec![(0.0, 1.0), (1.0, 0.0), (2.0, 0.5)])],
        };
        assert_eq!(p.render().matches("<circle").count(), 2);
    }
}
