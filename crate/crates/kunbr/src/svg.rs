//! Self-contained SVG charts for the comparison tables — grouped bars with
//! axis, labels, and a legend, no external plotting stack.

/// One named series of values, one value per category.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart. `categories` label the x axis; every series must
/// supply one value per category. Returns a complete SVG document.
pub fn bar_chart(title: &str, categories: &[String], series: &[Series]) -> String {
    let width = 760.0;
    let height = 420.0;
    let (left, right, top, bottom) = (70.0, 20.0, 50.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for s in series {
        for &v in &s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi == lo {
        hi = lo + 1.0;
    }
    let span = hi - lo;
    let y_of = |v: f64| top + plot_h * (1.0 - (v - lo) / span);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"18\">{}</text>\n",
        width / 2.0,
        esc(title)
    ));

    // Horizontal gridlines and y-axis tick labels.
    for i in 0..=5 {
        let v = lo + span * i as f64 / 5.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{v:.1}</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }
    // Zero line when the range crosses zero.
    if lo < 0.0 && hi > 0.0 {
        let y = y_of(0.0);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#888\"/>\n",
            left + plot_w
        ));
    }

    let n_cat = categories.len().max(1);
    let n_ser = series.len().max(1);
    let group_w = plot_w / n_cat as f64;
    let bar_w = group_w * 0.8 / n_ser as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let group_x = left + group_w * ci as f64 + group_w * 0.1;
        for (si, s) in series.iter().enumerate() {
            let v = s.values.get(ci).copied().unwrap_or(0.0);
            let y0 = y_of(v.max(0.0).max(lo));
            let y1 = y_of(v.min(0.0).min(hi).max(lo));
            let (bar_y, bar_h) = if v >= 0.0 {
                (y0, y_of(lo.max(0.0)) - y0)
            } else {
                (y_of(0.0_f64.min(hi)), y1 - y_of(0.0_f64.min(hi)))
            };
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"{}\"><title>{}: {v:.3}</title></rect>\n",
                group_x + bar_w * si as f64,
                bar_y,
                bar_w,
                bar_h.abs().max(0.5),
                PALETTE[si % PALETTE.len()],
                esc(&s.name)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            group_x + group_w * 0.4,
            top + plot_h + 20.0,
            esc(cat)
        ));
    }

    // Legend along the bottom.
    let mut lx = left;
    let ly = height - 18.0;
    for (si, s) in series.iter().enumerate() {
        svg.push_str(&format!(
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
            ly - 10.0,
            PALETTE[si % PALETTE.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"12\">{}</text>\n",
            lx + 16.0,
            esc(&s.name)
        ));
        lx += 24.0 + 8.0 * s.name.len() as f64;
    }

    svg.push_str("</svg>\n");
    svg
}
