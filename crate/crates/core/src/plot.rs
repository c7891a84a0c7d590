//! Static SVG figures of study results.

use std::fmt::Write;

use crate::study::{BiasRow, CoverageRow, Method};

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;

fn color(method: Method) -> &'static str {
    match method {
        Method::Asymptotic => "#000000",
        Method::Case => "#1b9e77",
        Method::Par => "#d95f02",
        Method::Np => "#7570b3",
        Method::Cnp => "#e7298a",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    params: Vec<String>,
    methods: Vec<Method>,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, param: usize, method: usize) -> f64 {
        let slot = (WIDTH - LEFT - RIGHT) / self.params.len().max(1) as f64;
        // methods are spread symmetrically around the slot centre
        let spread = 0.6 * slot;
        let offset = if self.methods.len() > 1 { (method as f64 / (self.methods.len() - 1) as f64 - 0.5) * spread } else { 0.0 };
        LEFT + slot * (param as f64 + 0.5) + offset
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        TOP + (1.0 - t.clamp(0.0, 1.0)) * (HEIGHT - TOP - BOTTOM)
    }

    fn open(&self, out: &mut String, title: &str, y_label: &str, ticks: &[f64]) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (WIDTH - RIGHT + LEFT) / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, self.y(self.y_min), self.y(self.y_max));
        let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        for &t in ticks {
            let y = self.y(t);
            let _ = writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, y + 4.0, crate::io::fmt_sig(t));
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate(18,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        for (p, name) in self.params.iter().enumerate() {
            let slot = (x1 - x0) / self.params.len().max(1) as f64;
            let x = x0 + slot * (p as f64 + 0.5);
            let _ = writeln!(
                out,
                r#"<text transform="translate({x:.2},{:.2}) rotate(-30)" text-anchor="end">{}</text>"#,
                y0 + 16.0,
                escape(name)
            );
        }
        for (i, m) in self.methods.iter().enumerate() {
            let y = TOP + 10.0 + 20.0 * i as f64;
            let lx = WIDTH - RIGHT + 20.0;
            let _ = writeln!(out, r#"<circle cx="{lx}" cy="{y}" r="4" fill="{}"/>"#, color(*m));
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 10.0, y + 4.0, m);
        }
    }

    fn hline(&self, out: &mut String, v: f64, dashed: bool) {
        let y = self.y(v);
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#555555"{dash}/>"##, WIDTH - RIGHT);
    }
}

fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Coverage of the `(1 − alpha)` intervals with MC.SE error bars. Dashed
/// lines mark the nominal level ± 5 points, capped at 1.
pub fn coverage_svg(title: &str, rows: &[CoverageRow], alpha: f64) -> String {
    let rows: Vec<&CoverageRow> = rows.iter().filter(|r| r.alpha == alpha).collect();
    let nominal = 1.0 - alpha;
    let lowest = rows.iter().filter_map(|r| r.coverage.map(|c| c - r.mc_se.unwrap_or(0.0))).fold(nominal - 0.1, f64::min);
    let frame = Frame {
        params: ordered(rows.iter().map(|r| r.parameter.clone())),
        methods: ordered(rows.iter().map(|r| r.method)),
        y_min: ((lowest * 10.0).floor() / 10.0).max(0.0),
        y_max: 1.02,
    };
    let ticks: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).filter(|t| *t >= frame.y_min - 1e-12).collect();
    let mut out = String::new();
    frame.open(&mut out, title, &format!("coverage of {}% intervals", crate::io::fmt_sig(100.0 * nominal)), &ticks);
    frame.hline(&mut out, nominal - 0.05, true);
    frame.hline(&mut out, (nominal + 0.05).min(1.0), true);
    for (mi, &method) in frame.methods.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="series" data-method="{method}" fill="{0}" stroke="{0}">"#, color(method));
        for r in rows.iter().filter(|r| r.method == method) {
            let (Some(c), Some(p)) = (r.coverage, frame.params.iter().position(|n| *n == r.parameter)) else { continue };
            let x = frame.x(p, mi);
            let se = r.mc_se.unwrap_or(0.0);
            let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}"/>"#, frame.y(c - se), frame.y(c + se));
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="4"><title>{} {}: {}</title></circle>"#,
                frame.y(c),
                method,
                escape(&r.parameter),
                crate::io::fmt_sig(c)
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Relative bias of the standard errors (percent) per method and parameter.
pub fn bias_svg(title: &str, rows: &[BiasRow]) -> String {
    let values: Vec<f64> = rows.iter().filter_map(|r| r.rb_se_pct).collect();
    let extent = values.iter().fold(50.0f64, |m, v| m.max(v.abs()));
    let step = if extent <= 50.0 { 10.0 } else { (extent / 5.0 / 10.0).ceil() * 10.0 };
    let bound = (extent / step).ceil() * step;
    let frame = Frame {
        params: ordered(rows.iter().map(|r| r.parameter.clone())),
        methods: ordered(rows.iter().map(|r| r.method)),
        y_min: -bound,
        y_max: bound,
    };
    let n_ticks = (2.0 * bound / step).round() as i64;
    let ticks: Vec<f64> = (0..=n_ticks).map(|i| -bound + step * i as f64).collect();
    let mut out = String::new();
    frame.open(&mut out, title, "relative bias of SE (%)", &ticks);
    frame.hline(&mut out, 0.0, false);
    for (mi, &method) in frame.methods.iter().enumerate() {
        let _ = writeln!(out, r#"<g class="series" data-method="{method}" fill="{0}" stroke="{0}">"#, color(method));
        for r in rows.iter().filter(|r| r.method == method) {
            let (Some(v), Some(p)) = (r.rb_se_pct, frame.params.iter().position(|n| *n == r.parameter)) else { continue };
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4"/>"#, frame.x(p, mi), frame.y(v));
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(alpha: f64) -> Vec<CoverageRow> {
        let mut out = Vec::new();
        for method in [Method::Asymptotic, Method::Par] {
            for (i, p) in ["e0", "emax"].iter().enumerate() {
                out.push(CoverageRow {
                    scenario: "s".into(),
                    method,
                    parameter: p.to_string(),
                    alpha,
                    coverage: Some(0.8 + 0.05 * i as f64),
                    mc_se: Some(0.03),
                    contained: 16,
                    k_available: 20,
                });
            }
        }
        out
    }

    #[test]
    fn one_series_per_method() {
        let svg = coverage_svg("t", &rows(0.1), 0.1);
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains(r#"data-method="par""#));
        assert_eq!(svg.matches("<circle").count(), 4 + 2);
    }

    #[test]
    fn nominal_band_lines() {
        for (alpha, lo, hi) in [(0.1, 0.85, 0.95), (0.05, 0.9, 1.0)] {
            let svg = coverage_svg("t", &rows(alpha), alpha);
            let frame_y = |v: f64| {
                let f = Frame { params: vec![], methods: vec![], y_min: 0.7, y_max: 1.02 };
                format!("y1=\"{:.2}\"", f.y(v))
            };
            let dashed: Vec<&str> = svg.lines().filter(|l| l.contains("stroke-dasharray")).collect();
            assert_eq!(dashed.len(), 2);
            assert!(dashed[0].contains(&frame_y(lo)), "{}", dashed[0]);
            assert!(dashed[1].contains(&frame_y(hi)), "{}", dashed[1]);
        }
    }
}
