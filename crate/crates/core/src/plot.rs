//! Minimal static SVG renderers for run outputs: a loss curve over steps,
//! ablation bars, and the memory-sweep heatmap. Pure string assembly with
//! fixed float formatting, so identical inputs give identical bytes.

use crate::ensure_arg;
use crate::error::Result;
use crate::eval::{AblationReport, SweepCell};
use crate::training::StepRecord;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 52.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        x = W / 2.0
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let y0 = H - MARGIN;
    let x1 = W - MARGIN;
    let y1 = MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{xm}\" y=\"{yb}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{ym}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {ym})\">{y_label}</text>\n",
        xm = (x0 + x1) / 2.0,
        yb = H - 12.0,
        ym = (y0 + y1) / 2.0
    )
}

/// Training-loss curve: total loss against step, linear axes from zero.
pub fn loss_curve_svg(records: &[StepRecord]) -> Result<String> {
    ensure_arg!(!records.is_empty(), "loss curve needs at least one record");
    let max_step = records.iter().map(|r| r.step).max().expect("nonempty") as f64;
    let max_loss = records
        .iter()
        .map(|r| r.loss.total)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-12);
    let sx = |step: u64| MARGIN + (W - 2.0 * MARGIN) * step as f64 / max_step.max(1.0);
    let sy = |loss: f64| (H - MARGIN) - (H - 2.0 * MARGIN) * (loss / max_loss).clamp(0.0, 1.0);

    let mut out = svg_open("training loss");
    out.push_str(&axes("step", "total loss"));
    let points: Vec<String> = records
        .iter()
        .map(|r| format!("{:.2},{:.2}", sx(r.step), sy(r.loss.total)))
        .collect();
    out.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">max {:.4}</text>\n",
        W - MARGIN,
        MARGIN - 8.0,
        max_loss
    ));
    out.push_str("</svg>\n");
    Ok(out)
}

/// One bar per ablation variant, height by median accuracy in [0,1].
pub fn ablation_bars_svg(report: &AblationReport) -> Result<String> {
    ensure_arg!(!report.medians.is_empty(), "ablation plot needs medians");
    let n = report.medians.len() as f64;
    let span = W - 2.0 * MARGIN;
    let slot = span / n;
    let bar_w = slot * 0.6;

    let mut out = svg_open("ablation medians");
    out.push_str(&axes("variant", "median accuracy"));
    for (i, m) in report.medians.iter().enumerate() {
        let a = m.median_accuracy.clamp(0.0, 1.0);
        let x = MARGIN + slot * i as f64 + (slot - bar_w) / 2.0;
        let h = (H - 2.0 * MARGIN) * a;
        let y = (H - MARGIN) - h;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" fill=\"#2e8b57\"/>\n\
             <text x=\"{cx:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\">{name}</text>\n\
             <text x=\"{cx:.2}\" y=\"{vy:.2}\" text-anchor=\"middle\">{a:.3}</text>\n",
            cx = x + bar_w / 2.0,
            ty = H - MARGIN + 16.0,
            vy = y - 4.0,
            name = m.variant
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Accuracy heatmap over the (n_k, d_k) grid; one cell per sweep entry,
/// shaded from white (worst) to blue (best in the grid).
pub fn sweep_heatmap_svg(cells: &[SweepCell]) -> Result<String> {
    ensure_arg!(!cells.is_empty(), "heatmap needs at least one cell");
    let mut n_ks: Vec<usize> = cells.iter().map(|c| c.n_k).collect();
    let mut d_ks: Vec<usize> = cells.iter().map(|c| c.d_k).collect();
    n_ks.sort_unstable();
    n_ks.dedup();
    d_ks.sort_unstable();
    d_ks.dedup();
    let lo = cells.iter().map(|c| c.median_accuracy).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.median_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);

    let cw = (W - 2.0 * MARGIN) / d_ks.len() as f64;
    let ch = (H - 2.0 * MARGIN) / n_ks.len() as f64;
    let mut out = svg_open("memory sweep: median accuracy");
    out.push_str(&axes("d_k", "n_k"));
    for c in cells {
        let col = d_ks.iter().position(|&d| d == c.d_k).expect("own axis") as f64;
        let row = n_ks.iter().position(|&n| n == c.n_k).expect("own axis") as f64;
        let t = (c.median_accuracy - lo) / span;
        let shade = (255.0 - t * 175.0) as u8;
        let x = MARGIN + col * cw;
        let y = MARGIN + row * ch;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cw:.2}\" height=\"{ch:.2}\" \
             fill=\"rgb({shade},{shade},255)\" stroke=\"black\"/>\n\
             <text x=\"{cx:.2}\" y=\"{cy:.2}\" text-anchor=\"middle\">{v:.3}</text>\n",
            cx = x + cw / 2.0,
            cy = y + ch / 2.0 + 4.0,
            v = c.median_accuracy
        ));
    }
    for (i, d) in d_ks.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">d_k={d}</text>\n",
            MARGIN + (i as f64 + 0.5) * cw,
            MARGIN - 8.0
        ));
    }
    for (i, n) in n_ks.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">n_k={n}</text>\n",
            MARGIN - 6.0,
            MARGIN + (i as f64 + 0.5) * ch + 4.0
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::VariantMedian;
    use crate::training::LossBreakdown;

    fn record(step: u64, total: f64) -> StepRecord {
        StepRecord {
            step,
            epoch: 0,
            loss: LossBreakdown { l_img_a: 0.0, l_spch_b: 0.0, l_txt_ab: 0.0, l_t: 0.0, l_c: 0.0, total },
            wall_ms: 0,
        }
    }

    #[test]
    fn loss_curve_plots_one_point_per_record() {
        let recs: Vec<StepRecord> = (0..10).map(|i| record(i, 10.0 - i as f64)).collect();
        let svg = loss_curve_svg(&recs).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 10);
        assert!(loss_curve_svg(&[]).is_err());
    }

    #[test]
    fn ablation_bars_draw_one_rect_per_variant() {
        let report = AblationReport {
            rows: vec![],
            medians: ["full", "no_M", "M_to_FC"]
                .iter()
                .enumerate()
                .map(|(i, v)| VariantMedian {
                    variant: v.to_string(),
                    median_accuracy: 0.2 * (i + 1) as f64,
                    median_token_error_rate: 1.0,
                    median_precision: 0.5,
                })
                .collect(),
        };
        let svg = ablation_bars_svg(&report).unwrap();
        // One background rect plus one bar per variant.
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("no_M"));
    }

    #[test]
    fn heatmap_has_one_cell_per_sweep_entry_and_is_deterministic() {
        let cells: Vec<SweepCell> = [(2, 8, 0.1), (2, 32, 0.3), (8, 8, 0.2), (8, 32, 0.6)]
            .iter()
            .map(|&(n_k, d_k, a)| SweepCell {
                n_k,
                d_k,
                median_accuracy: a,
                mean_token_error_rate: 1.0 - a,
                mean_precision: a,
            })
            .collect();
        let svg = sweep_heatmap_svg(&cells).unwrap();
        assert_eq!(svg.matches("<rect").count(), 5); // background + 4 cells
        assert_eq!(svg, sweep_heatmap_svg(&cells).unwrap());
        assert!(svg.contains("n_k=8") && svg.contains("d_k=32"));
    }
}
