//! Minimal SVG line plots for sweep outputs.

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 420.0;
pub const MARGIN: f64 = 64.0;

const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#7f7f7f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Affine data-to-pixel mapping used by the plot; exposed so consumers can
/// invert rendered coordinates.
#[derive(Debug, Clone, Copy)]
pub struct PlotTransform {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl PlotTransform {
    pub fn from_series(series: &[Series]) -> Self {
        let mut t = Self {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for s in series {
            for &(x, y) in &s.points {
                t.x_min = t.x_min.min(x);
                t.x_max = t.x_max.max(x);
                t.y_min = t.y_min.min(y);
                t.y_max = t.y_max.max(y);
            }
        }
        if !t.x_min.is_finite() {
            return Self {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            };
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).abs();
            let pad = if span < 1e-12 { 0.5 } else { span * 0.05 };
            *lo -= pad;
            *hi += pad;
        };
        pad(&mut t.x_min, &mut t.x_max);
        pad(&mut t.y_min, &mut t.y_max);
        t
    }

    pub fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN);
        let py =
            HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN);
        (px, py)
    }

    pub fn from_px(&self, px: f64, py: f64) -> (f64, f64) {
        let x = self.x_min + (px - MARGIN) / (WIDTH - 2.0 * MARGIN) * (self.x_max - self.x_min);
        let y = self.y_min
            + (HEIGHT - MARGIN - py) / (HEIGHT - 2.0 * MARGIN) * (self.y_max - self.y_min);
        (x, y)
    }
}

/// Render series as an SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let t = PlotTransform::from_series(series);
    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    ));
    svg.push('\n');
    // axes
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    svg.push_str(&format!(
        r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#
    ));
    svg.push('\n');
    // ticks
    for i in 0..=5 {
        let fx = t.x_min + (t.x_max - t.x_min) * i as f64 / 5.0;
        let (px, _) = t.to_px(fx, t.y_min);
        svg.push_str(&format!(
            r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" font-size="12" text-anchor="middle">{fx:.2}</text>"#,
            y0 + 5.0,
            y0 + 20.0
        ));
        let fy = t.y_min + (t.y_max - t.y_min) * i as f64 / 5.0;
        let (_, py) = t.to_px(t.x_min, fy);
        svg.push_str(&format!(
            r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/><text x="{}" y="{}" font-size="12" text-anchor="end">{fy:.3}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        ));
        svg.push('\n');
    }
    // labels and title
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    ));
    svg.push_str(&format!(
        r#"<text x="18" y="{}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    svg.push_str(&format!(
        r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{title}</text>"#,
        WIDTH / 2.0
    ));
    svg.push('\n');
    // series
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = t.to_px(x, y);
                format!("{px:.3},{py:.3}")
            })
            .collect();
        svg.push_str(&format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        ));
        svg.push('\n');
        let ly = MARGIN + 18.0 * si as f64;
        svg.push_str(&format!(
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            WIDTH - MARGIN - 150.0,
            ly,
            WIDTH - MARGIN - 132.0,
            ly + 10.0,
            s.label
        ));
        svg.push('\n');
    }
    svg.push_str("</svg>\n");
    svg
}
