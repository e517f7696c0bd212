//! SVG figures: observed prefix as dots, the true continuation as gray dots,
//! rollouts as polylines colored by their first sampled class.

use cgp_core::data::{Point, CANVAS_MAX};
use svg::node::element::{Circle, Group, Polyline, Rectangle, Text};
use svg::Document;

const PANEL: f64 = 320.0;
const MARGIN: f64 = 24.0;
/// Canvas units shown around `[0, 127]`.
const PAD: f64 = 20.0;

/// Categorical palette indexed by class.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const NO_CLASS: &str = "#5b6b8c";

pub fn class_color(class: Option<usize>) -> &'static str {
    class.map_or(NO_CLASS, |c| PALETTE[c % PALETTE.len()])
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub observed: Vec<Point>,
    pub truth: Vec<Point>,
    /// First sampled class and the predicted points (without the anchor).
    pub rollouts: Vec<(Option<usize>, Vec<Point>)>,
    /// Per-class deterministic mean trajectories.
    pub means: Vec<(usize, Vec<Point>)>,
}

/// Canvas point to panel pixels; y grows upward on the canvas.
fn project(p: Point) -> (f64, f64) {
    let span = CANVAS_MAX + 2.0 * PAD;
    let k = (PANEL - 2.0 * MARGIN) / span;
    (MARGIN + (p[0] + PAD) * k, PANEL - MARGIN - (p[1] + PAD) * k)
}

fn polyline(anchor: Point, points: &[Point]) -> String {
    std::iter::once(anchor)
        .chain(points.iter().copied())
        .map(|p| {
            let (x, y) = project(p);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn dot(p: Point, r: f64, fill: &str) -> Circle {
    let (x, y) = project(p);
    Circle::new()
        .set("cx", format!("{x:.2}"))
        .set("cy", format!("{y:.2}"))
        .set("r", r)
        .set("fill", fill)
}

fn panel(p: &Panel) -> Group {
    let mut g = Group::new()
        .add(
            Rectangle::new()
                .set("width", PANEL)
                .set("height", PANEL)
                .set("fill", "white")
                .set("stroke", "#cccccc"),
        )
        .add(
            Text::new(p.title.clone())
                .set("x", MARGIN)
                .set("y", MARGIN - 8.0)
                .set("font-family", "sans-serif")
                .set("font-size", 12),
        );
    let anchor = *p.observed.last().expect("observed prefix is non-empty");
    for (class, points) in &p.rollouts {
        g = g.add(
            Polyline::new()
                .set("points", polyline(anchor, points))
                .set("fill", "none")
                .set("stroke", class_color(*class))
                .set("stroke-opacity", 0.35)
                .set("stroke-width", 1),
        );
    }
    for (class, points) in &p.means {
        g = g.add(
            Polyline::new()
                .set("points", polyline(anchor, points))
                .set("fill", "none")
                .set("stroke", class_color(Some(*class)))
                .set("stroke-width", 2.5)
                .set("stroke-dasharray", "6 3"),
        );
    }
    for &q in &p.truth {
        g = g.add(dot(q, 2.0, "#9a9a9a"));
    }
    for &q in &p.observed {
        g = g.add(dot(q, 2.0, "#1f3fbf"));
    }
    g.add(dot(anchor, 4.5, "none").set("stroke", "#d62728").set("stroke-width", 2))
}

/// Lays `rows` of panels out as a grid.
pub fn render(rows: &[Vec<Panel>]) -> Document {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let (w, h) = (cols as f64 * PANEL, rows.len().max(1) as f64 * PANEL);
    let mut doc = Document::new()
        .set("viewBox", (0, 0, w, h))
        .set("width", w)
        .set("height", h);
    for (r, row) in rows.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            let offset = format!("translate({},{})", c as f64 * PANEL, r as f64 * PANEL);
            doc = doc.add(panel(p).set("transform", offset));
        }
    }
    doc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_figure_is_one_well_formed_svg_root() {
        let p = Panel {
            title: "t=3 dt=1".into(),
            observed: vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]],
            truth: vec![[4.0, 4.0]],
            rollouts: vec![(Some(1), vec![[4.5, 3.5]])],
            means: vec![],
        };
        let text = render(&[vec![p]]).to_string();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert_eq!(doc.root().children().filter(|n| n.is_element()).count(), 1);
        let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].attribute("points").unwrap().split(' ').count(), 2);
        assert_eq!(lines[0].attribute("stroke"), Some(class_color(Some(1))));
    }

    #[test]
    fn projection_flips_y_and_keeps_canvas_inside() {
        let (x0, y0) = project([0.0, 0.0]);
        let (x1, y1) = project([CANVAS_MAX, CANVAS_MAX]);
        assert!(x0 < x1 && y0 > y1);
        for v in [x0, y0, x1, y1] {
            assert!(v > 0.0 && v < PANEL);
        }
    }
}
