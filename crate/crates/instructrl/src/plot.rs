//! Learning-curve rendering to standalone SVG, no plotting dependencies.
//!
//! One metrics file: per-task success curves (thin) plus the mean (bold).
//! Several files (seeds): the per-file mean curves with a shaded band of
//! one standard deviation around the cross-seed mean.

use std::fmt::Write as _;

use crate::metrics::MetricsTable;

const W: f64 = 860.0;
const H: f64 = 480.0;
const ML: f64 = 70.0; // left margin
const MB: f64 = 50.0; // bottom margin
const MT: f64 = 30.0;
const MR: f64 = 20.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

struct Frame {
    x_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        ML + (x / self.x_max.max(1.0)) * (W - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        // y in [0, 1]
        H - MB - y.clamp(0.0, 1.05) * (H - MB - MT)
    }
}

fn polyline(out: &mut String, frame: &Frame, xs: &[f64], ys: &[f64], color: &str, width: f64) {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.1},{:.1}", frame.px(*x), frame.py(*y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
        pts.join(" ")
    );
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    for i in 1..xs.len() {
        if x <= xs[i] {
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            return ys[i - 1] + t * (ys[i] - ys[i - 1]);
        }
    }
    ys[ys.len() - 1]
}

/// Render success-rate curves. `series_name` picks the aggregate column
/// (normally `eval_mean_train`).
pub fn render_curves(tables: &[MetricsTable], series_name: &str) -> String {
    assert!(!tables.is_empty());
    let x_name = "observed_steps";
    let xs_all: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| t.series(x_name).unwrap_or_default())
        .collect();
    let ys_all: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| t.series(series_name).unwrap_or_default())
        .collect();
    let x_max = xs_all
        .iter()
        .flat_map(|v| v.iter().copied())
        .fold(0.0f64, f64::max);
    let frame = Frame { x_max };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);

    // Axes and gridlines.
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let py = frame.py(y);
        let _ = writeln!(
            out,
            r##"<line x1="{ML}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#dddddd"/>"##,
            W - MR
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="end">{y:.1}</text>"#,
            ML - 6.0,
            py + 4.0
        );
    }
    for i in 0..=5 {
        let x = x_max * i as f64 / 5.0;
        let px = frame.px(x);
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            H - MB + 18.0,
            format_steps(x)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">observed steps</text>"#,
        (ML + W - MR) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" font-size="13" transform="rotate(-90 16 {:.1})" text-anchor="middle">success rate</text>"#,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    );

    if tables.len() >= 2 {
        // Shared grid over the union of x points; band of one standard
        // deviation across files.
        let mut grid: Vec<f64> = xs_all.iter().flat_map(|v| v.iter().copied()).collect();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        let per_file: Vec<Vec<f64>> = xs_all
            .iter()
            .zip(&ys_all)
            .map(|(xs, ys)| grid.iter().map(|&x| interpolate(xs, ys, x)).collect())
            .collect();
        let mean: Vec<f64> = (0..grid.len())
            .map(|i| per_file.iter().map(|f| f[i]).sum::<f64>() / per_file.len() as f64)
            .collect();
        let std: Vec<f64> = (0..grid.len())
            .map(|i| {
                let m = mean[i];
                (per_file.iter().map(|f| (f[i] - m).powi(2)).sum::<f64>()
                    / per_file.len() as f64)
                    .sqrt()
            })
            .collect();
        let mut band = String::new();
        for i in 0..grid.len() {
            let _ = write!(
                band,
                "{:.1},{:.1} ",
                frame.px(grid[i]),
                frame.py(mean[i] + std[i])
            );
        }
        for i in (0..grid.len()).rev() {
            let _ = write!(
                band,
                "{:.1},{:.1} ",
                frame.px(grid[i]),
                frame.py(mean[i] - std[i])
            );
        }
        let _ = writeln!(
            out,
            r##"<polygon fill="#1f77b4" fill-opacity="0.2" stroke="none" points="{band}"/>"##
        );
        for (i, (xs, ys)) in xs_all.iter().zip(&ys_all).enumerate() {
            polyline(&mut out, &frame, xs, ys, PALETTE[i % PALETTE.len()], 1.0);
        }
        polyline(&mut out, &frame, &grid, &mean, "#1f77b4", 2.5);
    } else {
        // Single file: per-task curves plus the bold mean.
        let table = &tables[0];
        let xs = &xs_all[0];
        let mut color = 0;
        for name in &table.columns {
            if let Some(task) = name.strip_prefix("eval_") {
                if task == "mean_train" || task == "mean_test" {
                    continue;
                }
                let ys = table.series(name).unwrap();
                polyline(&mut out, &frame, xs, &ys, PALETTE[color % PALETTE.len()], 1.0);
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{}">{}</text>"#,
                    W - MR - 120.0,
                    MT + 14.0 * (color as f64 + 1.0),
                    PALETTE[color % PALETTE.len()],
                    task
                );
                color += 1;
            }
        }
        polyline(&mut out, &frame, xs, &ys_all[0], "#000000", 2.5);
    }
    let _ = writeln!(out, "</svg>");
    out
}

fn format_steps(x: f64) -> String {
    if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.0}k", x / 1e3)
    } else {
        format!("{x:.0}")
    }
}
