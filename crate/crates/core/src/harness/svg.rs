//! Self-contained static SVG plots.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [40.0, 20.0, 90.0, 60.0]; // top, right, bottom, left
const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>
"#,
        WIDTH / 2.0,
        escape(title)
    );
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self {
            x0: MARGIN[3],
            x1: WIDTH - MARGIN[1],
            y0: HEIGHT - MARGIN[2],
            y1: MARGIN[0],
            lo,
            hi,
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 - (v - self.lo) / (self.hi - self.lo) * (self.y0 - self.y1)
    }

    fn y_axis(&self, out: &mut String, label: &str) {
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#333"/>"##,
            self.y0,
            self.y1,
            x = self.x0
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
                self.x0,
                self.x1,
                self.x0 - 4.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (self.y0 + self.y1) / 2.0,
            escape(label)
        );
    }
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let values = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite());
    let lo = values.clone().fold(f64::INFINITY, f64::min).min(0.5);
    let hi = values.fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9).min(1.0).max(lo + 0.05);
    let frame = Frame::new(lo, hi);
    frame.y_axis(&mut out, y_label);
    let groups = categories.len().max(1) as f64;
    let group_w = (frame.x1 - frame.x0) / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = frame.x0 + group_w * c as f64 + group_w * 0.1;
        for (s, (_, vals)) in series.iter().enumerate() {
            let Some(&v) = vals.get(c) else { continue };
            if !v.is_finite() {
                continue;
            }
            let top = frame.y(v.clamp(frame.lo, frame.hi));
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                gx + bar_w * s as f64,
                bar_w.max(0.5),
                (frame.y0 - top).max(0.0),
                PALETTE[s % PALETTE.len()],
                escape(cat)
            );
        }
        let cx = gx + group_w * 0.4;
        let _ = writeln!(
            out,
            r#"<text transform="translate({cx:.1},{:.1}) rotate(40)" text-anchor="start">{}</text>"#,
            frame.y0 + 12.0,
            escape(cat)
        );
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let x = frame.x0 + 10.0 + 130.0 * (s % 5) as f64;
        let y = HEIGHT - 14.0 - 14.0 * (s / 5) as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[s % PALETTE.len()],
            x + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot with one circle marker per point.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], labels: &[String]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            let pad = ((hi - lo) * 0.05).max(1e-9);
            (lo - pad, hi + pad)
        } else {
            (0.0, 1.0)
        }
    };
    let (xlo, xhi) = range(|p| p.0);
    let (ylo, yhi) = range(|p| p.1);
    let frame = Frame::new(ylo, yhi);
    frame.y_axis(&mut out, y_label);
    let x = |v: f64| frame.x0 + (v - xlo) / (xhi - xlo) * (frame.x1 - frame.x0);
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#333"/>"##,
        frame.x0,
        frame.x1,
        y = frame.y0
    );
    for i in 0..=4 {
        let v = xlo + (xhi - xlo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            x(v),
            frame.y0 + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (frame.x0 + frame.x1) / 2.0,
        frame.y0 + 36.0,
        escape(x_label)
    );
    for (i, p) in points.iter().enumerate() {
        if !(p.0.is_finite() && p.1.is_finite()) {
            continue;
        }
        let label = labels.get(i).map(|s| escape(s)).unwrap_or_default();
        let _ = writeln!(
            out,
            r#"<circle class="marker" cx="{:.1}" cy="{:.1}" r="4" fill="{}" fill-opacity="0.8"><title>{label}</title></circle>"#,
            x(p.0),
            frame.y(p.1),
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}
