//! Hand-rolled SVG line charts, built strictly from trace CSVs so every
//! figure can be regenerated offline from the traces alone.

use std::io;
use std::path::Path;

use crate::trace::{read_csv, write_atomic};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        let pad = if hi.abs() < 1e-12 { 1.0 } else { hi.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

/// Render a multi-series line chart as an SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));

    // Axes with five ticks each.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_T + plot_h
    ));
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.6}</text>\n",
            sx(fx),
            MARGIN_T + plot_h + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.6}</text>\n",
            MARGIN_L - 6.0,
            sy(fy) + 4.0,
            fy
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            sy(fy),
            MARGIN_L + plot_w,
            sy(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        y_label
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if path.len() >= 2 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
                color,
                path.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
            MARGIN_L + plot_w - 150.0,
            MARGIN_T + 14.0 * (i as f64 + 1.0),
            color,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn column_series(
    header: &[String],
    rows: &[Vec<String>],
    x_col: usize,
    y_col: usize,
) -> Series {
    let points = rows
        .iter()
        .filter_map(|row| {
            let x: f64 = row.get(x_col)?.parse().ok()?;
            let y: f64 = row.get(y_col)?.parse().ok()?;
            Some((x, y))
        })
        .collect();
    Series { label: header[y_col].clone(), points }
}

/// `power.svg`: total generation per slot, from the generation CSV.
pub fn power_plot(dir: &Path, generation_csv: &str, out_name: &str) -> io::Result<()> {
    let (header, rows) = read_csv(&dir.join(generation_csv))?;
    let total_col = header.len() - 1;
    let series = vec![column_series(&header, &rows, 0, total_col)];
    write_atomic(
        &dir.join(out_name),
        &line_chart("Aggregate generation", "slot", "MW", &series),
    )
}

/// `voltage.svg`: per-bus voltage magnitudes over slots.
pub fn voltage_plot(dir: &Path, voltages_csv: &str, out_name: &str) -> io::Result<()> {
    let (header, rows) = read_csv(&dir.join(voltages_csv))?;
    let series: Vec<Series> = (1..header.len())
        .map(|col| column_series(&header, &rows, 0, col))
        .collect();
    write_atomic(
        &dir.join(out_name),
        &line_chart("Bus voltage magnitudes", "slot", "|V| (p.u.)", &series),
    )
}

/// `charging_load.svg`: aggregate charging draw per slot from a trace CSV.
pub fn charging_plot(dir: &Path, trace_csv: &str, out_name: &str) -> io::Result<()> {
    let (header, rows) = read_csv(&dir.join(trace_csv))?;
    let col = header
        .iter()
        .position(|h| h == "aggregate_charge_kw")
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "no aggregate_charge_kw column"))?;
    let numeric_rows: Vec<Vec<String>> = rows
        .into_iter()
        .filter(|r| r.first().map(|s| s.parse::<f64>().is_ok()).unwrap_or(false))
        .collect();
    let series = vec![column_series(&header, &numeric_rows, 0, col)];
    write_atomic(
        &dir.join(out_name),
        &line_chart("Aggregate charging load", "slot", "kW", &series),
    )
}
