//! Minimal SVG charts: grouped bars and line series, y axis in percent.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn y_of(v: f64) -> f64 {
    let plot_h = H - TOP - BOTTOM;
    TOP + plot_h * (1.0 - v.clamp(0.0, 100.0) / 100.0)
}

fn frame(out: &mut String, title: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    for tick in (0..=100).step_by(20) {
        let y = y_of(tick as f64);
        writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}%</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        y_of(0.0),
        W - RIGHT,
        y_of(0.0)
    )
    .unwrap();
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 18.0 * i as f64;
        let x = W - RIGHT + 14.0;
        writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y,
            COLORS[i % COLORS.len()],
            x + 18.0,
            y + 10.0,
            escape(name)
        )
        .unwrap();
    }
}

fn x_label(out: &mut String, x: f64, label: &str) {
    let y = H - BOTTOM + 16.0;
    writeln!(
        out,
        r#"<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-30 {x} {y})">{}</text>"#,
        escape(label)
    )
    .unwrap();
}

/// `groups[g] = (label, values)` with one value per entry of `series`.
pub fn bar_chart(title: &str, series: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    frame(&mut out, title);
    let plot_w = W - LEFT - RIGHT;
    let slot = plot_w / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.1;
        for (s, v) in values.iter().enumerate() {
            let x = x0 + bar * s as f64;
            let y = y_of(*v);
            writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}: {v:.2}%</title></rect>"#,
                bar * 0.92,
                y_of(0.0) - y,
                COLORS[s % COLORS.len()],
                escape(label),
                escape(series.get(s).copied().unwrap_or(""))
            )
            .unwrap();
        }
        x_label(&mut out, x0 + slot * 0.4, label);
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// One polyline per series over the shared x labels.
pub fn line_chart(title: &str, labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    frame(&mut out, title);
    let plot_w = W - LEFT - RIGHT;
    let step = plot_w / labels.len().max(1) as f64;
    let x_of = |i: usize| LEFT + step * (i as f64 + 0.5);
    for (i, label) in labels.iter().enumerate() {
        x_label(&mut out, x_of(i), label);
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let color = COLORS[s % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x_of(i), y_of(*v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        )
        .unwrap();
        for (i, v) in values.iter().enumerate() {
            writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{}: {v:.2}%</title></circle>"#,
                x_of(i),
                y_of(*v),
                escape(name)
            )
            .unwrap();
        }
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}
