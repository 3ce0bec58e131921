//! Result tables on disk: CSV rows and SVG bar charts.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{MethodSummary, ResultRow};

pub const CSV_HEADER: [&str; 9] = [
    "method",
    "prompt_id",
    "seed",
    "exact",
    "tok_acc",
    "toks",
    "blks",
    "calls",
    "iters",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected CSV header {0:?}")]
    Header(Vec<String>),
    #[error("row {row}: bad {field} value {value:?}")]
    Field {
        row: usize,
        field: &'static str,
        value: String,
    },
}

pub fn write_csv(rows: &[ResultRow], w: impl Write) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.prompt_id.clone(),
            r.seed.to_string(),
            u8::from(r.exact).to_string(),
            r.tok_acc.to_string(),
            r.toks.to_string(),
            r.blks.to_string(),
            r.calls.to_string(),
            r.iters.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let file = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn read_csv(r: impl Read) -> Result<Vec<ResultRow>, ReportError> {
    let mut input = csv::Reader::from_reader(r);
    let header: Vec<String> = input.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(ReportError::Header(header));
    }
    let mut rows = Vec::new();
    for (row, record) in input.records().enumerate() {
        let record = record?;
        fn parse<T: std::str::FromStr>(record: &csv::StringRecord, row: usize, i: usize) -> Result<T, ReportError> {
            let value = &record[i];
            value.parse().map_err(|_| ReportError::Field {
                row,
                field: CSV_HEADER[i],
                value: value.to_owned(),
            })
        }
        let exact: u8 = parse(&record, row, 3)?;
        if exact > 1 {
            return Err(ReportError::Field {
                row,
                field: "exact",
                value: exact.to_string(),
            });
        }
        rows.push(ResultRow {
            method: record[0].to_owned(),
            prompt_id: record[1].to_owned(),
            seed: parse(&record, row, 2)?,
            exact: exact == 1,
            tok_acc: parse(&record, row, 4)?,
            toks: parse(&record, row, 5)?,
            blks: parse(&record, row, 6)?,
            calls: parse(&record, row, 7)?,
            iters: parse(&record, row, 8)?,
        });
    }
    Ok(rows)
}

pub fn load_csv(path: &Path) -> Result<Vec<ResultRow>, ReportError> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A standalone SVG bar chart, one bar per label.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    const BAR: f64 = 60.0;
    const GAP: f64 = 30.0;
    const PLOT_H: f64 = 220.0;
    const TOP: f64 = 40.0;
    const LEFT: f64 = 50.0;
    let width = LEFT + labels.len() as f64 * (BAR + GAP) + GAP;
    let height = TOP + PLOT_H + 70.0;
    let max = values.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { PLOT_H / max } else { 0.0 };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let base = TOP + PLOT_H;
    let _ = writeln!(
        svg,
        r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - GAP / 2.0
    );
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let h = v * scale;
        let _ = writeln!(
            svg,
            r##"<rect class="bar" x="{x}" y="{}" width="{BAR}" height="{h}" fill="#4a7fb5"/>"##,
            base - h
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{v:.3}</text>"#,
            x + BAR / 2.0,
            base - h - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-30 {} {})">{}</text>"#,
            x + BAR / 2.0,
            base + 14.0,
            x + BAR / 2.0,
            base + 14.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `calls.svg` (mean denoiser calls), `accuracy.svg` (exact match)
/// and `token_accuracy.svg` into `dir`, one bar per method.
pub fn emit_svg_plots(summaries: &[MethodSummary], dir: &Path) -> Result<(), ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(dir)?;
    let labels: Vec<String> = summaries.iter().map(|s| s.method.clone()).collect();
    let calls: Vec<f64> = summaries.iter().map(|s| s.calls.mean).collect();
    let exact: Vec<f64> = summaries.iter().map(|s| s.exact.mean).collect();
    let tok: Vec<f64> = summaries.iter().map(|s| s.tok_acc.mean).collect();
    std::fs::write(
        dir.join("calls.svg"),
        bar_chart("Mean denoiser calls per prompt", &labels, &calls),
    )?;
    std::fs::write(
        dir.join("accuracy.svg"),
        bar_chart("Exact-match accuracy", &labels, &exact),
    )?;
    std::fs::write(
        dir.join("token_accuracy.svg"),
        bar_chart("Token accuracy", &labels, &tok),
    )?;
    Ok(())
}
