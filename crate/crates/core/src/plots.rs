//! Static SVG rendering of the five result panels.

use std::fmt::Write as _;

use crate::assoc::Comparison;
use crate::pipeline::{BoxSummary, FamilyPanel, FdrScope, PanelSet};

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const GAP: f64 = 30.0;
const HIST_BINS: usize = 20;
const COLOR_POINT: &str = "#4a4a4a";
const COLOR_SELECTED: &str = "#d62728";
const COLOR_WITHIN: &str = "#1f77b4";
const COLOR_CROSS: &str = "#ff7f0e";

struct Frame {
    x0: f64,
    y0: f64,
}

impl Frame {
    fn nth(i: usize) -> Self {
        Self {
            x0: MARGIN + i as f64 * (PANEL_W + GAP),
            y0: MARGIN,
        }
    }

    /// Maps unit coordinates (0..1, 0..1 bottom-up) into the panel.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * PANEL_W, self.y0 + (1.0 - v) * PANEL_H)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, f: &Frame, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        svg,
        r#"<rect x="{:.2}" y="{:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="black"/>"#,
        f.x0, f.y0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        f.x0 + PANEL_W / 2.0,
        f.y0 - 10.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
        f.x0 + PANEL_W / 2.0,
        f.y0 + PANEL_H + 28.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        f.x0 - 28.0,
        f.y0 + PANEL_H / 2.0,
        f.x0 - 28.0,
        f.y0 + PANEL_H / 2.0,
        escape(y_label)
    );
}

fn tick(svg: &mut String, f: &Frame, v: f64, label: &str) {
    let (x, y) = f.at(0.0, v);
    let _ = writeln!(
        svg,
        r#"<line x1="{:.2}" y1="{y:.2}" x2="{x:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" font-size="9" text-anchor="end">{}</text>"#,
        x - 4.0,
        x - 6.0,
        y + 3.0,
        escape(label)
    );
}

fn notice(svg: &mut String, f: &Frame, text: &str) {
    let (x, y) = f.at(0.5, 0.5);
    let _ = writeln!(
        svg,
        r#"<text x="{x:.2}" y="{y:.2}" font-size="11" text-anchor="middle" fill="gray">{}</text>"#,
        escape(text)
    );
}

fn ordered_panel(svg: &mut String, f: &Frame, family: &FamilyPanel, q: f64, scope: FdrScope) {
    let title = match family.comparison {
        Comparison::WithinModes => "Within modes: ordered p-values",
        Comparison::CrossModes => "Across modes: ordered p-values",
        Comparison::Pooled => "Pooled control: ordered p-values",
    };
    axes(svg, f, title, "rank", "p-value");
    for v in [0.0, 0.5, 1.0] {
        tick(svg, f, v, &format!("{v:.1}"));
    }
    let m = family.points.len();
    if m == 0 {
        notice(svg, f, "no tests");
        return;
    }
    let u = |rank: usize| if m == 1 { 0.5 } else { (rank - 1) as f64 / (m - 1) as f64 };
    match scope {
        FdrScope::Pooled => {
            let (x1, y1) = f.at(u(1), q / m as f64);
            let (x2, y2) = f.at(u(m), q);
            let _ = writeln!(
                svg,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{COLOR_WITHIN}"/>"#
            );
        }
        FdrScope::PerRegion => {
            let (x, y) = f.at(0.02, 0.95);
            let _ = writeln!(svg, r#"<text x="{x:.2}" y="{y:.2}" font-size="9">FDR per region</text>"#);
        }
    }
    for p in &family.points {
        let (x, y) = f.at(u(p.rank), p.p_value);
        let color = if p.interesting { COLOR_SELECTED } else { COLOR_POINT };
        let _ = writeln!(svg, r#"<circle class="p" cx="{x:.2}" cy="{y:.2}" r="1.6" fill="{color}"/>"#);
    }
    let (x, y) = f.at(0.98, 0.05);
    let _ = writeln!(
        svg,
        r#"<text x="{x:.2}" y="{y:.2}" font-size="9" text-anchor="end">{} of {m} selected</text>"#,
        family.n_selected
    );
}

fn box_glyph(svg: &mut String, f: &Frame, b: &BoxSummary, centre: f64, range: (f64, f64), color: &str) {
    let v = |x: f64| (x - range.0) / (range.1 - range.0);
    let half = 0.12;
    let (xl, yq3) = f.at(centre - half, v(b.q3));
    let (xr, yq1) = f.at(centre + half, v(b.q1));
    let _ = writeln!(
        svg,
        r#"<rect x="{xl:.2}" y="{yq3:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{color}"/>"#,
        xr - xl,
        (yq1 - yq3).max(0.5)
    );
    let (_, ym) = f.at(0.0, v(b.median));
    let _ = writeln!(
        svg,
        r#"<line x1="{xl:.2}" y1="{ym:.2}" x2="{xr:.2}" y2="{ym:.2}" stroke="{color}" stroke-width="2"/>"#
    );
    let (xc, _) = f.at(centre, 0.0);
    let (_, ylo) = f.at(0.0, v(b.whisker_low));
    let (_, yhi) = f.at(0.0, v(b.whisker_high));
    let _ = writeln!(
        svg,
        r#"<line x1="{xc:.2}" y1="{yq1:.2}" x2="{xc:.2}" y2="{ylo:.2}" stroke="{color}"/><line x1="{xc:.2}" y1="{yq3:.2}" x2="{xc:.2}" y2="{yhi:.2}" stroke="{color}"/>"#
    );
    for o in &b.outliers {
        let (_, y) = f.at(0.0, v(*o));
        let _ = writeln!(
            svg,
            r#"<circle cx="{xc:.2}" cy="{y:.2}" r="2" fill="none" stroke="{color}"/>"#
        );
    }
}

fn log_odds_panel(svg: &mut String, f: &Frame, panel: &PanelSet) {
    axes(svg, f, "Log-odds of selected tests", "within | across", "log-odds ratio");
    let boxes = [
        (&panel.log_odds_within, 0.3, COLOR_WITHIN, "within"),
        (&panel.log_odds_cross, 0.7, COLOR_CROSS, "across"),
    ];
    if boxes.iter().all(|b| b.0.is_none()) {
        notice(svg, f, "no selected tests");
        return;
    }
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for b in boxes.iter().filter_map(|b| b.0.as_ref()) {
        lo = lo.min(b.min);
        hi = hi.max(b.max);
    }
    let pad = ((hi - lo) * 0.05).max(0.1);
    let range = (lo - pad, hi + pad);
    let v = |x: f64| (x - range.0) / (range.1 - range.0);
    let (x1, y0) = f.at(0.0, v(0.0));
    let (x2, _) = f.at(1.0, v(0.0));
    let _ = writeln!(
        svg,
        r#"<line x1="{x1:.2}" y1="{y0:.2}" x2="{x2:.2}" y2="{y0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#
    );
    for t in [range.0, 0.0, range.1] {
        tick(svg, f, v(t), &format!("{t:.2}"));
    }
    for (b, centre, color, name) in boxes {
        let (x, y) = f.at(centre, 0.0);
        match b {
            Some(b) => {
                box_glyph(svg, f, b, centre, range, color);
                let _ = writeln!(
                    svg,
                    r#"<text x="{x:.2}" y="{:.2}" font-size="9" text-anchor="middle">{name} (n={})</text>"#,
                    y + 12.0,
                    b.n
                );
            }
            None => {
                let _ = writeln!(
                    svg,
                    r#"<text x="{x:.2}" y="{:.2}" font-size="9" text-anchor="middle">{name} (none)</text>"#,
                    y + 12.0
                );
            }
        }
    }
}

fn histogram(values: &[f64]) -> [usize; HIST_BINS] {
    let mut counts = [0; HIST_BINS];
    for &v in values {
        let i = ((v * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1);
        counts[i] += 1;
    }
    counts
}

fn percentile_panel(svg: &mut String, f: &Frame, panel: &PanelSet) {
    axes(svg, f, "Permuted log-odds below observed", "proportion", "tests");
    let within: Vec<f64> = panel.selected_within.iter().map(|s| s.log_odds_percentile).collect();
    let cross: Vec<f64> = panel.selected_cross.iter().map(|s| s.log_odds_percentile).collect();
    if within.is_empty() && cross.is_empty() {
        notice(svg, f, "no selected tests");
        return;
    }
    let (hw, hc) = (histogram(&within), histogram(&cross));
    let top = hw.iter().chain(&hc).copied().max().unwrap_or(1).max(1) as f64;
    tick(svg, f, 1.0, &format!("{top}"));
    tick(svg, f, 0.0, "0");
    let bin_w = 1.0 / HIST_BINS as f64;
    for (k, (a, b)) in hw.iter().zip(&hc).enumerate() {
        for (count, offset, color) in [(*a, 0.0, COLOR_WITHIN), (*b, 0.5, COLOR_CROSS)] {
            if count == 0 {
                continue;
            }
            let (x, y) = f.at(k as f64 * bin_w + offset * bin_w, count as f64 / top);
            let (_, base) = f.at(0.0, 0.0);
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                bin_w * PANEL_W / 2.0,
                base - y
            );
        }
    }
    for (u, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let (x, y) = f.at(u, 0.0);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" font-size="9" text-anchor="middle">{label}</text>"#,
            y + 12.0
        );
    }
}

/// Five panels side by side: ordered p for within, across and pooled tests,
/// log-odds box plots and the log-odds percentile histogram.
pub fn render_panels(panel: &PanelSet) -> String {
    let width = 2.0 * MARGIN + 5.0 * PANEL_W + 4.0 * GAP;
    let height = 2.0 * MARGIN + PANEL_H + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN:.2}" y="16" font-size="13">lag {} | {} periods per year | q = {}</text>"#,
        panel.lag, panel.periods_per_year, panel.q
    );
    for (i, family) in panel.ordered.iter().enumerate() {
        ordered_panel(&mut svg, &Frame::nth(i), family, panel.q, panel.fdr_scope);
    }
    log_odds_panel(&mut svg, &Frame::nth(3), panel);
    percentile_panel(&mut svg, &Frame::nth(4), panel);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{OrderedPoint, SelectedTest};

    fn family(comparison: Comparison, n: usize, selected: usize) -> FamilyPanel {
        FamilyPanel {
            comparison,
            m: n,
            n_selected: selected,
            families: vec![],
            points: (0..n)
                .map(|k| OrderedPoint {
                    test_id: format!("t{k}"),
                    rank: k + 1,
                    p_value: (k as f64 + 1.0) / (n as f64 + 1.0),
                    bh_threshold: 0.0,
                    interesting: k < selected,
                })
                .collect(),
        }
    }

    fn panel(n: usize, selected: usize) -> PanelSet {
        let sel = |s: f64| {
            (0..selected)
                .map(|k| SelectedTest {
                    test_id: format!("t{k}"),
                    p_value: 0.0,
                    log_odds: s * (1.0 + k as f64),
                    log_odds_percentile: 0.9,
                })
                .collect::<Vec<_>>()
        };
        let (w, c) = (sel(1.0), sel(-1.0));
        PanelSet {
            lag: 1,
            periods_per_year: 26,
            q: 0.01,
            fdr_scope: FdrScope::Pooled,
            ordered: Comparison::ALL.iter().map(|&c| family(c, n, selected)).collect(),
            log_odds_within: BoxSummary::from_values(&w.iter().map(|s| s.log_odds).collect::<Vec<_>>()),
            log_odds_cross: BoxSummary::from_values(&c.iter().map(|s| s.log_odds).collect::<Vec<_>>()),
            selected_within: w,
            selected_cross: c,
        }
    }

    #[test]
    fn point_count_matches_family_size() {
        let svg = render_panels(&panel(17, 4));
        assert_eq!(svg.matches(r#"<circle class="p""#).count(), 3 * 17);
        assert_eq!(svg.matches(COLOR_SELECTED).count(), 3 * 4);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_panels_carry_notices() {
        let svg = render_panels(&panel(0, 0));
        assert_eq!(svg.matches("no tests").count(), 3);
        assert_eq!(svg.matches("no selected tests").count(), 2);
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_panels(&panel(30, 5)), render_panels(&panel(30, 5)));
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 0.049, 0.05, 1.0]);
        assert_eq!((h[0], h[1], h[HIST_BINS - 1]), (2, 1, 1));
    }
}
