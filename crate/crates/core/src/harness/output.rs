use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

/// Float formatting used in every CSV: 17 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

/// In-memory CSV table, written once all rows are aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

const PANEL: f64 = 240.0;
const MARGIN: f64 = 20.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Frame {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn map(&self, offset: f64, x: f64, y: f64) -> (f64, f64) {
        let w = PANEL - 2.0 * MARGIN;
        (
            offset + MARGIN + (x - self.x0) / (self.x1 - self.x0) * w,
            PANEL - MARGIN - (y - self.y0) / (self.y1 - self.y0) * w,
        )
    }
}

fn open(width: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{PANEL:.0}\" viewBox=\"0 0 {width:.0} {PANEL:.0}\">\n"
    )
}

fn title(svg: &mut String, offset: f64, text: &str) {
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"14\" font-size=\"11\" font-family=\"sans-serif\">{text}</text>",
        offset + MARGIN
    );
}

/// One scatter panel per title, sharing axes across panels.
pub fn scatter_panels(panels: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(panels.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut svg = open(PANEL * panels.len().max(1) as f64);
    for (i, (name, pts)) in panels.iter().enumerate() {
        let off = i as f64 * PANEL;
        title(&mut svg, off, name);
        for &(x, y) in pts {
            let (px, py) = frame.map(off, x, y);
            let _ = writeln!(svg, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"1\" fill=\"{}\"/>", PALETTE[0]);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Single panel with one polyline per series.
pub fn line_chart(name: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut svg = open(PANEL);
    title(&mut svg, 0.0, name);
    for (i, (label, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| {
                let (px, py) = frame.map(0.0, x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"><title>{label}</title></polyline>",
            coords.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
