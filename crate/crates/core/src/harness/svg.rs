//! Static line plots of normalized `z` sequences.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(t, z)` with `t > 0`.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const Y_MAX: f64 = 1.05;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Drops non-positive times, non-finite values and the leading run of
/// zeros. Returns the kept points and the number of zeros dropped.
fn plotted(points: &[(f64, f64)]) -> (Vec<(f64, f64)>, usize) {
    let valid: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(t, z)| *t > 0.0 && t.is_finite() && z.is_finite())
        .collect();
    let skip = valid.iter().take_while(|p| p.1 == 0.0).count();
    (valid[skip..].to_vec(), skip)
}

/// Renders the series on a log-t axis with `z` in `[0, 1.05]`. The output
/// depends only on the input.
pub fn render_svg(series: &[Series]) -> Result<String> {
    let kept: Vec<(Vec<(f64, f64)>, usize)> = series.iter().map(|s| plotted(&s.points)).collect();
    let all_t = kept.iter().flat_map(|(p, _)| p.iter().map(|q| q.0));
    let (t_min, t_max) = all_t.fold((f64::INFINITY, 0.0f64), |(lo, hi), t| (lo.min(t), hi.max(t)));
    if series.is_empty() || !t_min.is_finite() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (l0, mut l1) = (t_min.log10(), t_max.log10());
    if l1 - l0 < 1e-12 {
        l1 = l0 + 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |t: f64| LEFT + (t.log10() - l0) / (l1 - l0) * plot_w;
    let py = |z: f64| TOP + (1.0 - z.clamp(0.0, Y_MAX) / Y_MAX) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let z = 0.25 * k as f64;
        let y = py(z);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{z:.2}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for e in l0.ceil() as i32..=l1.floor() as i32 {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{e}</text>"##,
            TOP + plot_h,
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">t</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">z / max z</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (i, (s, (pts, dropped))) in series.iter().zip(&kept).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        let mut last = String::new();
        for &(t, z) in pts {
            let xy = format!("{:.2},{:.2}", px(t), py(z));
            if xy != last {
                let _ = write!(d, "{}{xy}", if d.is_empty() { "M" } else { " L" });
                last = xy;
            }
        }
        if !d.is_empty() {
            let _ = writeln!(
                out,
                r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1"/>"#
            );
        }
        let mut label = escape(&s.label);
        if *dropped > 0 {
            let _ = write!(label, " ({dropped} leading zero points not drawn)");
        }
        let ly = TOP + 16.0 + 16.0 * i as f64;
        let lx = LEFT + plot_w - 330.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{ly:.2}">{label}</text>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0,
            lx + 26.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_svg(series: &[Series], path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(series)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, f: impl Fn(f64) -> f64) -> Series {
        Series {
            label: label.into(),
            points: (0..100).map(|i| 10f64.powf(i as f64 / 33.0)).map(|t| (t, f(t))).collect(),
        }
    }

    fn paths(svg: &str) -> Vec<&str> {
        svg.lines().filter(|l| l.starts_with("<path")).collect()
    }

    #[test]
    fn constant_series_is_a_horizontal_line() {
        let svg = render_svg(&[series("flat", |_| 1.0)]).unwrap();
        let p = paths(&svg);
        assert_eq!(p.len(), 1);
        let y = format!("{:.2}", TOP + (1.0 - 1.0 / Y_MAX) * (HEIGHT - TOP - BOTTOM));
        let d = p[0].split('"').nth(1).unwrap();
        for pt in d.split(' ') {
            assert!(pt.ends_with(&format!(",{y}")), "{pt}");
        }
    }

    #[test]
    fn two_series_two_paths_and_legend_entries() {
        let svg = render_svg(&[series("a<1>", |_| 0.5), series("b", |t| 1.0 / t)]).unwrap();
        assert_eq!(paths(&svg).len(), 2);
        assert!(svg.contains(">a&lt;1&gt;</text>"));
        assert!(svg.contains(">b</text>"));
    }

    #[test]
    fn zero_prefix_is_dropped_and_noted() {
        let mut s = series("z", |_| 0.7);
        for p in s.points.iter_mut().take(5) {
            p.1 = 0.0;
        }
        let svg = render_svg(&[s]).unwrap();
        assert!(svg.contains("(5 leading zero points not drawn)"));
        let d = paths(&svg)[0].split('"').nth(1).unwrap().to_string();
        assert!(!d.contains(&format!(",{:.2}", TOP + (HEIGHT - TOP - BOTTOM))));
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let s = [series("a", |t| (t.sin() + 1.0) / 2.0)];
        assert_eq!(render_svg(&s).unwrap(), render_svg(&s).unwrap());
        assert!(render_svg(&[]).is_err());
        assert!(render_svg(&[Series { label: "e".into(), points: vec![] }]).is_err());
    }
}
