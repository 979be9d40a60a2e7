//! Minimal SVG renderings of correlation matrices and score histograms.

use std::fmt::Write;

use crate::analysis::CorrelationMatrix;

const CELL: f64 = 56.0;
const MARGIN: f64 = 110.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Diverging blue-white-red color for a value in `[-1, 1]`.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    let (r, g, b) = if v >= 0.0 {
        (255, fade(v), fade(v))
    } else {
        (fade(-v), fade(-v), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of the full matrix with the lower triangle annotated to two
/// decimals.
pub fn correlation_heatmap(m: &CorrelationMatrix) -> String {
    let n = m.len() as f64;
    let size = MARGIN + n * CELL + 10.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="4" y="16">{}</text>"#, m.stat).unwrap();
    for (i, label) in m.labels.iter().enumerate() {
        let c = MARGIN + (i as f64 + 0.5) * CELL;
        writeln!(
            s,
            r#"<text x="{}" y="{c}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            MARGIN - 6.0,
            escape(label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{c}" y="{}" text-anchor="start" transform="rotate(-45 {c} {})">{}</text>"#,
            MARGIN - 6.0,
            MARGIN - 6.0,
            escape(label)
        )
        .unwrap();
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (x, y) = (MARGIN + j as f64 * CELL, MARGIN + i as f64 * CELL);
            writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff"/>"##,
                diverging(v)
            )
            .unwrap();
            if j <= i {
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="middle">{v:.2}</text>"#,
                    x + CELL / 2.0,
                    y + CELL / 2.0
                )
                .unwrap();
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Overlaid histograms of several score series on shared bins.
pub fn histograms(series: &[(&str, &[f64])], bins: usize) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    if lo.is_finite() && bins > 0 {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let counts: Vec<Vec<usize>> = series
            .iter()
            .map(|(_, vals)| {
                let mut c = vec![0usize; bins];
                for &v in vals.iter().filter(|v| v.is_finite()) {
                    let b = (((v - lo) / span) * bins as f64).floor() as usize;
                    c[b.min(bins - 1)] += 1;
                }
                c
            })
            .collect();
        // normalize each series to its own size so unequal sets compare
        let dens: Vec<Vec<f64>> = counts
            .iter()
            .map(|c| {
                let n = c.iter().sum::<usize>().max(1) as f64;
                c.iter().map(|&k| k as f64 / n).collect()
            })
            .collect();
        let top = dens.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);
        let bw = (w - 2.0 * pad) / bins as f64;
        for (k, d) in dens.iter().enumerate() {
            let color = colors[k % colors.len()];
            for (b, &v) in d.iter().enumerate() {
                let bh = v / top * (h - 2.0 * pad);
                writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{bh:.2}" fill="{color}" fill-opacity="0.4"/>"#,
                    pad + b as f64 * bw,
                    h - pad - bh
                )
                .unwrap();
            }
            writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                pad,
                16.0 + 14.0 * k as f64,
                escape(series[k].0)
            )
            .unwrap();
        }
        writeln!(s, r#"<text x="{pad}" y="{}">{lo:.1}</text>"#, h - 10.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.1}</text>"#, w - pad, h - 10.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Stat;

    #[test]
    fn heatmap_annotates_lower_triangle() {
        let m = CorrelationMatrix {
            labels: vec!["a".into(), "b<c".into()],
            stat: Stat::Spearman,
            values: vec![vec![1.0, 0.456], vec![0.456, 1.0]],
        };
        let svg = correlation_heatmap(&m);
        assert_eq!(svg.matches("<rect").count(), 4);
        // diagonal twice plus one off-diagonal cell
        assert_eq!(svg.matches(">1.00<").count(), 2);
        assert_eq!(svg.matches(">0.46<").count(), 1);
        assert!(svg.contains("b&lt;c"));
    }

    #[test]
    fn colors_span_the_scale() {
        assert_eq!(diverging(1.0), "#ff0000");
        assert_eq!(diverging(0.0), "#ffffff");
        assert_eq!(diverging(-1.0), "#0000ff");
    }

    #[test]
    fn histogram_bars() {
        let a = [0.0, 1.0, 2.0];
        let b = [2.0, 2.0];
        let svg = histograms(&[("a", &a), ("b", &b)], 4);
        assert_eq!(svg.matches("<rect").count(), 8);
        assert!(histograms(&[("empty", &[])], 4).ends_with("</svg>\n"));
    }
}
