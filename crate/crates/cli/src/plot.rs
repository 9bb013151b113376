//! Minimal SVG charts: grouped lines and grouped bars.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1e-9);
    (lo - pad, hi + pad)
}

fn frame(out: &mut String, title: &str, y_label: &str, lo: f64, hi: f64) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
    writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - RIGHT).unwrap();
    writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, x0 - 6.0, y + 4.0, v).unwrap();
    }
    writeln!(
        out,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = LEFT + 10.0 + 150.0 * (i % 4) as f64;
        let y = H - 18.0 - 14.0 * (i / 4) as f64;
        writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]).unwrap();
        writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(n)).unwrap();
    }
}

/// Line chart; every series shares the x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (xlo, xhi) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (xlo, xhi) = if xhi > xlo { (xlo, xhi) } else { (xlo - 0.5, xlo + 0.5) };
    let (lo, hi) = y_range(all.map(|p| p.1));
    let mut out = String::new();
    frame(&mut out, title, y_label, lo, hi);
    let px = |x: f64| LEFT + (W - LEFT - RIGHT) * (x - xlo) / (xhi - xlo);
    let py = |y: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (y - lo) / (hi - lo);
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let step = (xs.len() / 10).max(1);
    for x in xs.iter().step_by(step) {
        writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(*x), H - BOTTOM + 16.0).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - BOTTOM + 32.0, escape(x_label)).unwrap();
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(out, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
        for &(x, y) in &s.points {
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, px(x), py(y)).unwrap();
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let (lo, hi) = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(std::iter::once(0.0)));
    let lo = lo.min(0.0);
    let mut out = String::new();
    frame(&mut out, title, y_label, lo, hi);
    let py = |y: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (y - lo) / (hi - lo);
    let group_w = (W - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let gx = LEFT + group_w * g as f64;
        writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w / 2.0, H - BOTTOM + 16.0, escape(cat)).unwrap();
        for (i, s) in series.iter().enumerate() {
            if let Some(&(_, y)) = s.points.iter().find(|p| p.0 as usize == g) {
                let x = gx + group_w * 0.1 + bar_w * i as f64;
                let (top, base) = (py(y), py(0.0f64.max(lo)));
                writeln!(
                    out,
                    r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"><title>{y}</title></rect>"#,
                    top.min(base),
                    (base - top).abs(),
                    COLORS[i % COLORS.len()]
                )
                .unwrap();
            }
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
