//! Minimal hand-rolled SVG output: line charts and heat maps. Everything
//! here consumes plain numeric tables, so plots can always be regenerated
//! from the CSVs alone.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Line chart with an optional legend; series with `dashed` render with a
/// dash pattern (used for analytic overlays).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        r = WIDTH - MARGIN_R,
        t = MARGIN_T,
        b = HEIGHT - MARGIN_B
    ));
    // Ticks.
    for i in 0..=5 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 5.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(fx)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fmt_tick(fy)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        x_label
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        y_label
    ));
    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        if pts.len() > 1 {
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash} points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = MARGIN_T + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
            x = WIDTH - MARGIN_R + 10.0,
            x2 = WIDTH - MARGIN_R + 34.0,
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn ramp(t: f64) -> String {
    // Dark blue -> yellow.
    let t = t.clamp(0.0, 1.0);
    let r = (20.0 + 235.0 * t) as u8;
    let g = (25.0 + 200.0 * t) as u8;
    let b = (90.0 + (60.0 - 90.0) * t) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heat map over a (rows x cols) value grid with explicit axis labels.
/// `values[i][j]` is drawn at row i, column j; None renders hatched grey.
pub fn heatmap(
    title: &str,
    x_label: &str,
    y_label: &str,
    col_labels: &[String],
    row_labels: &[String],
    values: &[Vec<Option<f64>>],
    vmin: f64,
    vmax: f64,
) -> String {
    let n_rows = row_labels.len();
    let n_cols = col_labels.len();
    let cell_w = (WIDTH - MARGIN_L - MARGIN_R) / n_cols as f64;
    let cell_h = (HEIGHT - MARGIN_T - MARGIN_B) / n_rows as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));
    let span = (vmax - vmin).max(1e-12);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let x = MARGIN_L + j as f64 * cell_w;
            let y = MARGIN_T + i as f64 * cell_h;
            let fill = match v {
                Some(v) => ramp((v - vmin) / span),
                None => "#bbbbbb".to_string(),
            };
            out.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell_w:.2}\" height=\"{cell_h:.2}\" fill=\"{fill}\" stroke=\"white\"/>\n"
            ));
            if let Some(v) = v {
                out.push_str(&format!(
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" fill=\"{}\">{:.2}</text>\n",
                    x + cell_w / 2.0,
                    y + cell_h / 2.0 + 3.0,
                    if (v - vmin) / span > 0.6 { "#333333" } else { "#eeeeee" },
                    v
                ));
            }
        }
    }
    for (j, label) in col_labels.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_L + (j as f64 + 0.5) * cell_w,
            HEIGHT - MARGIN_B + 18.0,
            label
        ));
    }
    for (i, label) in row_labels.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            MARGIN_T + (i as f64 + 0.5) * cell_h + 4.0,
            label
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        x_label
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        y_label
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_contains_series_and_labels() {
        let svg = line_chart(
            "demo",
            "x",
            "y",
            &[Series {
                label: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)],
                dashed: false,
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains(">demo<"));
        assert!(svg.contains(">a<"));
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let svg = heatmap(
            "h",
            "v",
            "d",
            &["a".into(), "b".into()],
            &["r1".into(), "r2".into(), "r3".into()],
            &[
                vec![Some(0.1), Some(0.9)],
                vec![None, Some(0.5)],
                vec![Some(1.0), Some(0.0)],
            ],
            0.0,
            1.0,
        );
        // 6 cells + 1 background rect.
        assert_eq!(svg.matches("<rect").count(), 7);
        assert!(svg.contains("#bbbbbb"));
    }

    #[test]
    fn degenerate_ranges_do_not_produce_nan() {
        let svg = line_chart(
            "flat",
            "x",
            "y",
            &[Series {
                label: "c".into(),
                points: vec![(1.0, 5.0), (2.0, 5.0)],
                dashed: true,
            }],
        );
        assert!(!svg.contains("NaN"));
    }
}
