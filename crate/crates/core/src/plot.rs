//! Minimal static SVG line plots rendered straight from metric series.
//! Log-log axes with decade gridlines; no external renderer involved.

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 540.0;
const ML: f64 = 72.0;
const MR: f64 = 24.0;
const MT: f64 = 46.0;
const MB: f64 = 56.0;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    /// (x, y) pairs; only finite, strictly positive points are drawn.
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders series on log-log axes. Series without positive points are
/// listed in the legend but draw nothing.
pub fn log_log_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut pts: Vec<Vec<(f64, f64)>> = Vec::with_capacity(series.len());
    let mut lx = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ly = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        let clean: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && *x > 0.0 && *y > 0.0)
            .map(|&(x, y)| (x.log10(), y.log10()))
            .collect();
        for &(x, y) in &clean {
            lx = (lx.0.min(x), lx.1.max(x));
            ly = (ly.0.min(y), ly.1.max(y));
        }
        pts.push(clean);
    }

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    ));

    if lx.0 > lx.1 {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no positive data</text>\n</svg>\n",
            WIDTH / 2.0,
            HEIGHT / 2.0
        ));
        return out;
    }
    if lx.1 - lx.0 < 1e-9 {
        lx = (lx.0 - 0.5, lx.1 + 0.5);
    }
    if ly.1 - ly.0 < 1e-9 {
        ly = (ly.0 - 0.5, ly.1 + 0.5);
    }

    let px = |x: f64| ML + (x - lx.0) / (lx.1 - lx.0) * (WIDTH - ML - MR);
    let py = |y: f64| HEIGHT - MB - (y - ly.0) / (ly.1 - ly.0) * (HEIGHT - MT - MB);

    for e in (lx.0.ceil() as i64)..=(lx.1.floor() as i64) {
        let x = px(e as f64);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MT}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{e}</text>\n",
            HEIGHT - MB,
            HEIGHT - MB + 18.0
        ));
    }
    for e in (ly.0.ceil() as i64)..=(ly.1.floor() as i64) {
        let y = py(e as f64);
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">1e{e}</text>\n",
            WIDTH - MR,
            ML - 6.0,
            y + 4.0
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>\n",
        WIDTH - ML - MR,
        HEIGHT - MT - MB
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ML + (WIDTH - ML - MR) / 2.0,
        HEIGHT - 12.0,
        esc(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        MT + (HEIGHT - MT - MB) / 2.0,
        MT + (HEIGHT - MT - MB) / 2.0,
        esc(y_label)
    ));

    for (s, clean) in series.iter().zip(&pts) {
        if clean.is_empty() {
            continue;
        }
        let path: Vec<String> =
            clean.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"/>\n",
            path.join(" "),
            s.color
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let y = MT + 16.0 + 18.0 * i as f64;
        let x = WIDTH - MR - 180.0;
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            y - 4.0,
            x + 26.0,
            y - 4.0,
            s.color,
            x + 32.0,
            y,
            esc(s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}
