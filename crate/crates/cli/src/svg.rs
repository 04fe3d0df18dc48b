//! Minimal static SVG plots: axes, points or lines, and a legend.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 48.0;
const LEGEND: f64 = 110.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#e7ba52",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) =
                v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.04 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = range(&mut xs.clone());
        let (y0, y1) = range(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let total = W + LEGEND;
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{H}" viewBox="0 0 {total} {H}">"#)
        .unwrap();
    writeln!(out, r#"<rect x="0" y="0" width="{total}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#).unwrap();
    for (v, anchor_x) in [(frame.x0, l), (frame.x1, r)] {
        writeln!(
            out,
            r#"<text x="{anchor_x}" y="{}" font-size="10" text-anchor="middle" font-family="sans-serif">{v:.3}</text>"#,
            b + 14.0
        )
        .unwrap();
    }
    for (v, anchor_y) in [(frame.y0, b), (frame.y1, t)] {
        writeln!(
            out,
            r#"<text x="{}" y="{anchor_y}" font-size="10" text-anchor="end" font-family="sans-serif">{v:.3}</text>"#,
            l - 4.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        W / 2.0,
        H - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(out, r#"<text x="14" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 14 {})">{}</text>"#, H / 2.0, H / 2.0, escape(y_label)).unwrap();
}

fn legend(out: &mut String, entries: &[String]) {
    for (i, name) in entries.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W + 4.0, y - 9.0, color(i)).unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{y}" font-size="11" font-family="sans-serif">{}</text>"#,
            W + 18.0,
            escape(name)
        )
        .unwrap();
    }
}

/// Points colored by integer label.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], labels: &[usize]) -> String {
    let frame = Frame::fit(points.iter().map(|p| p.0), points.iter().map(|p| p.1));
    let mut out = String::new();
    open(&mut out, title, &frame, x_label, y_label);
    writeln!(out, "<g>").unwrap();
    for (&(x, y), &l) in points.iter().zip(labels) {
        writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}"/>"#, frame.px(x), frame.py(y), color(l))
            .unwrap();
    }
    writeln!(out, "</g>").unwrap();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    legend(&mut out, &(0..k).map(|c| format!("cluster {c}")).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// One polyline per named series over shared x values.
pub fn lines(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let all = series.iter().flat_map(|(_, p)| p.iter().copied());
    let frame = Frame::fit(all.clone().map(|p| p.0), all.map(|p| p.1));
    let mut out = String::new();
    open(&mut out, title, &frame, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, frame.px(x), frame.py(y)))
            .collect();
        writeln!(out, r#"<path d="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#, d.join(" "), color(i)).unwrap();
        for &(x, y) in pts {
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#, frame.px(x), frame.py(y), color(i))
                .unwrap();
        }
    }
    legend(&mut out, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Balanced tags and a `viewBox` on the root element.
pub fn is_well_formed(svg: &str) -> bool {
    let body = svg.trim_start().strip_prefix(r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap_or(svg).trim_start();
    if !body.starts_with("<svg ") || !body[..body.find('>').unwrap_or(0)].contains("viewBox=") {
        return false;
    }
    let mut stack: Vec<&str> = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find('<') {
        let Some(len) = rest[start..].find('>') else {
            return false;
        };
        let tag = &rest[start + 1..start + len];
        rest = &rest[start + len + 1..];
        if let Some(name) = tag.strip_prefix('/') {
            if stack.pop() != Some(name.trim()) {
                return false;
            }
        } else if !tag.ends_with('/') {
            stack.push(tag.split_whitespace().next().unwrap_or(""));
        }
    }
    stack.is_empty()
}
