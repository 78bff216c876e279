//! One-row SVG heat strip of mean test LCC per layer. Colors are scaled to
//! the LCC range of this plot only: the lowest layer is red, the highest
//! green.

use std::fmt::Write as _;
use std::path::Path;

use super::aggregate::SweepAggregate;
use super::SweepError;

pub const RED: (u8, u8, u8) = (215, 25, 28);
pub const GREEN: (u8, u8, u8) = (26, 150, 65);
pub const UNDEFINED: (u8, u8, u8) = (200, 200, 200);

const CELL_W: usize = 56;
const CELL_H: usize = 48;
const MARGIN: usize = 12;
const TITLE_H: usize = 22;

/// `(lcc - min) / (max - min)` clamped to `[0, 1]`; 0.5 when the range is
/// degenerate.
pub fn color_position(lcc: f64, min: f64, max: f64) -> f64 {
    if max <= min {
        return 0.5;
    }
    ((lcc - min) / (max - min)).clamp(0.0, 1.0)
}

/// Linear interpolation from [`RED`] (0) to [`GREEN`] (1).
pub fn cell_color(position: f64) -> (u8, u8, u8) {
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * position).round() as u8;
    (lerp(RED.0, GREEN.0), lerp(RED.1, GREEN.1), lerp(RED.2, GREEN.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_grid_svg(agg: &SweepAggregate) -> Result<String, SweepError> {
    if agg.layers.is_empty() {
        return Err(SweepError::Plan("nothing to plot: aggregate has no layers".into()));
    }
    let values: Vec<Option<f64>> = agg.layers.iter().map(|l| l.test.lcc.map(|s| s.mean)).collect();
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let width = 2 * MARGIN + CELL_W * agg.layers.len();
    let height = 2 * MARGIN + TITLE_H + CELL_H;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let title = match &agg.model_id {
        Some(m) => format!("{} - mean test LCC per layer", escape(m)),
        None => "mean test LCC per layer".to_string(),
    };
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}" font-size="13">{title}</text>"#, MARGIN + 14);
    let y = MARGIN + TITLE_H;
    for (i, (layer, value)) in agg.layers.iter().zip(&values).enumerate() {
        let x = MARGIN + i * CELL_W;
        let (r, g, b) = match value {
            Some(v) => cell_color(color_position(*v, min, max)),
            None => UNDEFINED,
        };
        let label = value.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
        let best = if Some(layer.layer) == agg.best_layer { r#" stroke="black" stroke-width="2""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<rect class="cell" data-layer="{}" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="rgb({r},{g},{b})"{best}/>"#,
            layer.layer
        );
        let cx = x + CELL_W / 2;
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{}" font-size="11" text-anchor="middle">L{}</text>"#,
            y + 18,
            layer.layer
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{}" font-size="11" text-anchor="middle">{label}</text>"#,
            y + 36
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_grid_plot(agg: &SweepAggregate, destination: &Path) -> Result<(), SweepError> {
    let svg = render_grid_svg(agg)?;
    std::fs::write(destination, svg).map_err(|e| SweepError::io(destination, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::aggregate::{LayerAggregate, MetricSummary, Stat};

    pub(crate) fn agg_with(lccs: &[Option<f64>]) -> SweepAggregate {
        let summary = |v: Option<f64>| MetricSummary {
            mse: Some(Stat { mean: 0.1, std: 0.0 }),
            lcc: v.map(|mean| Stat { mean, std: 0.0 }),
            srcc: None,
        };
        SweepAggregate {
            model_id: Some("m<1>".into()),
            seeds: vec![0],
            layers: lccs
                .iter()
                .enumerate()
                .map(|(i, &v)| LayerAggregate {
                    layer: i as u16 + 1,
                    completed: 1,
                    failed: 0,
                    validation: summary(v),
                    test: summary(v),
                })
                .collect(),
            best_layer: Some(1),
            excluded_layers: vec![],
        }
    }

    fn fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| {
                let start = l.find("fill=\"").unwrap() + 6;
                l[start..start + l[start..].find('"').unwrap()].to_string()
            })
            .collect()
    }

    #[test]
    fn endpoints_are_pure() {
        let svg = render_grid_svg(&agg_with(&[Some(0.5), Some(1.0)])).unwrap();
        assert_eq!(
            fills(&svg),
            vec![
                format!("rgb({},{},{})", RED.0, RED.1, RED.2),
                format!("rgb({},{},{})", GREEN.0, GREEN.1, GREEN.2)
            ]
        );
        assert!(svg.contains(">0.500<") && svg.contains(">1.000<"));
        assert!(svg.contains("m&lt;1&gt;"));
    }

    #[test]
    fn degenerate_range_is_midpoint() {
        let svg = render_grid_svg(&agg_with(&[Some(0.7), Some(0.7), Some(0.7)])).unwrap();
        let mid = cell_color(0.5);
        let f = fills(&svg);
        assert!(f.iter().all(|c| *c == format!("rgb({},{},{})", mid.0, mid.1, mid.2)));
    }

    #[test]
    fn color_law() {
        assert_eq!(color_position(0.75, 0.5, 1.0), 0.5);
        assert_eq!(color_position(2.0, 0.5, 1.0), 1.0);
        assert_eq!(color_position(0.0, 0.5, 1.0), 0.0);
        assert_eq!(cell_color(0.0), RED);
        assert_eq!(cell_color(1.0), GREEN);
    }

    #[test]
    fn undefined_cells_are_grey_and_empty_rejected() {
        let svg = render_grid_svg(&agg_with(&[None, Some(0.2)])).unwrap();
        assert!(svg.contains("n/a"));
        assert!(render_grid_svg(&agg_with(&[])).is_err());
    }
}
