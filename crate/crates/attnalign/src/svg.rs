//! Minimal SVG emitters for heatmaps and bar charts.
//!
//! Color scales:
//!
//! * [`ColorScale::Sequential`] maps `[0, 1]` from white to dark blue
//!   (`#08306b`). Used for attention and alignment weights.
//! * [`ColorScale::Diverging`] maps `[-1, 1]` from blue (`#2166ac`) through
//!   white at 0 to red (`#b2182b`). Used for cosine similarities.
//!
//! Values outside the range are clamped; non-finite values are drawn gray.
//! Output depends only on the inputs, so equal inputs give equal bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const CELL: usize = 28;
const CHAR_W: usize = 7;
const PAD: usize = 8;
const TITLE_H: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorScale {
    Sequential,
    Diverging,
}

impl ColorScale {
    pub fn range(self) -> (f64, f64) {
        match self {
            ColorScale::Sequential => (0.0, 1.0),
            ColorScale::Diverging => (-1.0, 1.0),
        }
    }

    pub fn color(self, v: f64) -> String {
        if !v.is_finite() {
            return "#cccccc".into();
        }
        let mix = |to: [f64; 3], t: f64| {
            let c: Vec<u8> = to.iter().map(|&x| (255.0 + (x - 255.0) * t).round() as u8).collect();
            format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
        };
        match self {
            ColorScale::Sequential => mix([8.0, 48.0, 107.0], v.clamp(0.0, 1.0)),
            ColorScale::Diverging => {
                let v = v.clamp(-1.0, 1.0);
                if v < 0.0 { mix([33.0, 102.0, 172.0], -v) } else { mix([178.0, 24.0, 43.0], v) }
            }
        }
    }

    fn describe(self) -> &'static str {
        match self {
            ColorScale::Sequential => "sequential scale: 0 white to 1 #08306b",
            ColorScale::Diverging => "diverging scale: -1 #2166ac, 0 white, 1 #b2182b",
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn widest(labels: &[String]) -> usize {
    labels.iter().map(|l| l.chars().count()).max().unwrap_or(0)
}

fn open(out: &mut String, w: usize, h: usize, title: &str, desc: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, "<desc>{}</desc>", escape(desc));
    let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r#"<text x="{PAD}" y="16" font-size="13">{}</text>"#, escape(title));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub title: String,
    /// Rows of equal length.
    pub values: Vec<Vec<f64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub scale: ColorScale,
}

impl Heatmap {
    pub fn render(&self) -> Result<String> {
        let rows = self.values.len();
        let cols = self.values.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(CliError::data("heatmap needs at least one cell"));
        }
        if self.values.iter().any(|r| r.len() != cols) {
            return Err(CliError::data("heatmap rows differ in length"));
        }
        if self.row_labels.len() != rows || self.col_labels.len() != cols {
            return Err(CliError::data(format!(
                "heatmap is {rows}x{cols} but has {} row and {} column labels",
                self.row_labels.len(),
                self.col_labels.len()
            )));
        }
        let left = PAD + CHAR_W * widest(&self.row_labels) + PAD;
        let top = TITLE_H + CHAR_W * widest(&self.col_labels) + PAD;
        let (w, h) = (left + cols * CELL + PAD, top + rows * CELL + PAD);
        let (lo, hi) = self.scale.range();
        let mut out = String::new();
        open(&mut out, w, h, &self.title, &format!("{}; rows {rows}, columns {cols}", self.scale.describe()));
        for (c, label) in self.col_labels.iter().enumerate() {
            let x = left + c * CELL + CELL / 2 + 4;
            let y = top - 4;
            let _ = writeln!(
                out,
                r#"<text class="col-label" x="{x}" y="{y}" transform="rotate(-90 {x} {y})">{}</text>"#,
                escape(label)
            );
        }
        for (r, label) in self.row_labels.iter().enumerate() {
            let y = top + r * CELL + CELL / 2 + 4;
            let _ = writeln!(
                out,
                r#"<text class="row-label" x="{}" y="{y}" text-anchor="end">{}</text>"#,
                left - 4,
                escape(label)
            );
        }
        for (r, row) in self.values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    r#"<rect class="cell" x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{} / {}: {:.4}</title></rect>"#,
                    left + c * CELL,
                    top + r * CELL,
                    self.scale.color(v),
                    escape(&self.row_labels[r]),
                    escape(&self.col_labels[c]),
                    v
                );
            }
        }
        let _ = writeln!(
            out,
            r##"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="#444444"/>"##,
            cols * CELL,
            rows * CELL
        );
        let _ = writeln!(out, "<!-- range [{lo}, {hi}] -->");
        out.push_str("</svg>\n");
        Ok(out)
    }
}

/// Horizontal bars, one per label; negative values extend left of zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

const BAR_H: usize = 18;
const BAR_SPAN: f64 = 240.0;

impl BarChart {
    pub fn render(&self) -> Result<String> {
        if self.labels.len() != self.values.len() {
            return Err(CliError::data("bar chart labels and values differ in length"));
        }
        if self.values.is_empty() {
            return Err(CliError::data("bar chart needs at least one bar"));
        }
        let finite = self.values.iter().filter(|v| v.is_finite());
        let max_abs = finite.fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max_abs > 0.0 { BAR_SPAN / max_abs } else { 0.0 };
        let any_negative = self.values.iter().any(|&v| v < 0.0);
        let left = PAD + CHAR_W * widest(&self.labels) + PAD;
        let zero = left as f64 + if any_negative { BAR_SPAN } else { 0.0 };
        let w = (zero + BAR_SPAN) as usize + 80;
        let h = TITLE_H + self.values.len() * (BAR_H + 4) + PAD;
        let mut out = String::new();
        open(&mut out, w, h, &self.title, &format!("bars {}; full width = {max_abs:.4}", self.values.len()));
        for (i, (label, &v)) in self.labels.iter().zip(&self.values).enumerate() {
            let y = TITLE_H + i * (BAR_H + 4);
            let len = if v.is_finite() { v.abs() * scale } else { 0.0 };
            let x = if v < 0.0 { zero - len } else { zero };
            let _ = writeln!(
                out,
                r#"<text class="bar-label" x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 4,
                y + BAR_H - 5,
                escape(label)
            );
            let fill = if v < 0.0 { "#b2182b" } else { "#2166ac" };
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{x:.2}" y="{y}" width="{len:.2}" height="{BAR_H}" fill="{fill}"><title>{}: {v:.4}</title></rect>"#,
                escape(label)
            );
            let _ = writeln!(out, r#"<text x="{:.2}" y="{}">{v:.4}</text>"#, zero + BAR_SPAN + 4.0, y + BAR_H - 5);
        }
        let _ = writeln!(
            out,
            r##"<line x1="{zero:.2}" y1="{TITLE_H}" x2="{zero:.2}" y2="{}" stroke="#444444"/>"##,
            h - PAD
        );
        out.push_str("</svg>\n");
        Ok(out)
    }
}
