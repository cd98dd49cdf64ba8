// SPDX-License-Identifier: Apache-2.0

//! SVG charts of summarized measurements: one marker per variant at its
//! median, with a bar from p25 to p75, on a log axis.

use std::path::Path;

use plotters::prelude::*;

use crate::stats::SummaryRow;
use crate::BenchError;

const SIZE: (u32, u32) = (960, 540);

fn plot_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Plot(e.to_string())
}

/// Draw `rows` of `experiment` (values in `unit`) to an SVG at `out`.
pub fn summary_chart(out: &Path, experiment: &str, unit: &str, rows: &[SummaryRow]) -> Result<(), BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Plot(format!("{experiment}: nothing to plot")));
    }
    let lo = rows.iter().map(|r| r.p25.min(r.median)).fold(f64::MAX, f64::min).max(1e-3);
    let hi = rows.iter().map(|r| r.p75.max(r.median)).fold(f64::MIN, f64::max).max(lo * 10.0);
    let n = rows.len();

    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(experiment, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(120)
        .y_label_area_size(80)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), (lo / 2.0..hi * 2.0).log_scale())
        .map_err(plot_err)?;
    let label = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
            rows[i as usize].variant.clone()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&label)
        .x_label_style(("sans-serif", 12).into_text_style(&root).transform(FontTransform::Rotate90))
        .y_desc(format!("median ({unit})"))
        .disable_x_mesh()
        .draw()
        .map_err(plot_err)?;

    chart
        .draw_series(
            rows.iter()
                .enumerate()
                .map(|(i, r)| PathElement::new(vec![(i as f64, r.p25.max(lo / 2.0)), (i as f64, r.p75)], BLUE.stroke_width(3))),
        )
        .map_err(plot_err)?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, r)| Circle::new((i as f64, r.median), 4, RED.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::summarize;

    #[test]
    fn writes_an_svg() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.svg");
        let rows: Vec<_> = [("a", 10.0), ("b", 1000.0)]
            .iter()
            .map(|&(v, x)| summarize(v, &[x, x * 1.1, x * 0.9]).unwrap())
            .collect();
        summary_chart(&out, "demo", "cycles", &rows).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("demo"));
    }

    #[test]
    fn refuses_empty() {
        assert!(summary_chart(Path::new("/nonexistent/x.svg"), "e", "ns", &[]).is_err());
    }
}
