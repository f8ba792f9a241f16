use std::fmt::Write as _;
use std::path::Path;

use super::stats::mean_std;
use crate::error::{Error, Result};
use crate::world::write_file_atomic;

/// Values of one metric over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub label: String,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        MetricSeries { label: label.into(), values }
    }
}

/// Aggregated metrics plus optional x/y curves for plotting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub title: String,
    pub config_hash: Option<String>,
    pub metrics: Vec<MetricSeries>,
    pub curves: Vec<(String, Vec<(f64, f64)>)>,
}

fn check_label(label: &str) -> Result<()> {
    if label.contains([',', '\n', ';']) {
        return Err(Error::invalid(format!("label {label:?} contains a CSV separator")));
    }
    Ok(())
}

impl Report {
    /// `label,n,mean,std,values` with `;`-separated raw values in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> Result<String> {
        if self.metrics.is_empty() {
            return Err(Error::invalid("report has no metrics"));
        }
        let mut out = String::new();
        if let Some(h) = &self.config_hash {
            writeln!(out, "# config_hash: {h}").unwrap();
        }
        out.push_str("label,n,mean,std,values\n");
        for m in &self.metrics {
            check_label(&m.label)?;
            let (mean, std) = mean_std(&m.values)?;
            let vals: Vec<String> = m.values.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{},{},{}", m.label, m.values.len(), mean, std, vals.join(";")).unwrap();
        }
        Ok(out)
    }

    /// Parses the metric rows written by [`Report::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Vec<MetricSeries>> {
        let bad = |d: String| Error::format("<report>", d);
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("label,n,mean,std,values") {
            return Err(bad("missing header".into()));
        }
        lines
            .map(|line| {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 5 {
                    return Err(bad(format!("expected 5 columns in {line:?}")));
                }
                let values = cols[4]
                    .split(';')
                    .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let n: usize = cols[1].parse().map_err(|_| bad(format!("bad count {:?}", cols[1])))?;
                if n != values.len() {
                    return Err(bad(format!("count {n} disagrees with {} values", values.len())));
                }
                Ok(MetricSeries::new(cols[0], values))
            })
            .collect()
    }

    /// Bar chart of metric means with +-std whiskers.
    pub fn bar_svg(&self) -> Result<String> {
        let stats = self.metrics.iter().map(|m| mean_std(&m.values)).collect::<Result<Vec<_>>>()?;
        let (w, h, pad) = (640.0, 360.0, 48.0);
        let top = stats.iter().map(|(m, s)| m + s).fold(0.0f64, f64::max).max(1e-12);
        let slot = (w - 2.0 * pad) / stats.len().max(1) as f64;
        let y = |v: f64| h - pad - (v / top) * (h - 2.0 * pad);
        let mut s = svg_open(w, h, &self.title);
        for (i, ((mean, std), m)) in stats.iter().zip(&self.metrics).enumerate() {
            let x = pad + slot * i as f64 + slot * 0.15;
            let bw = slot * 0.7;
            let (yt, y0) = (y(mean.max(0.0)), y(0.0));
            writeln!(s, r##"<rect x="{x:.2}" y="{yt:.2}" width="{bw:.2}" height="{:.2}" fill="#4c78a8"/>"##, y0 - yt).unwrap();
            let cx = x + bw / 2.0;
            writeln!(s, r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#, y(mean + std), y((mean - std).max(0.0))).unwrap();
            writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, h - pad + 16.0, escape(&m.label)).unwrap();
            writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" font-size="10" text-anchor="middle">{mean:.4}</text>"#, yt - 4.0).unwrap();
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    /// Line chart of the curves.
    pub fn line_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 48.0);
        let pts = self.curves.iter().flat_map(|(_, c)| c.iter().copied());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
        const COLORS: [&str; 6] = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2"];
        let mut s = svg_open(w, h, &self.title);
        writeln!(s, r#"<text x="{pad}" y="{:.2}" font-size="10">x: {x0:.3} .. {x1:.3}, y: {y0:.3} .. {y1:.3}</text>"#, h - 8.0).unwrap();
        for (i, (label, curve)) in self.curves.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#, w - pad - 100.0, pad + 14.0 * i as f64, escape(label)).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<stem>.csv`, `<stem>_bars.svg` and, with curves,
    /// `<stem>_curves.svg` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_file_atomic(&dir.join(format!("{stem}_bars.svg")), self.bar_svg()?.as_bytes())?;
        if !self.curves.is_empty() {
            write_file_atomic(&dir.join(format!("{stem}_curves.svg")), self.line_svg().as_bytes())?;
        }
        Ok(())
    }
}

fn svg_open(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
