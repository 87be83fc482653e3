//! Tabular reports and their CSV, JSON and SVG renderings.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One table cell. Reals are written with 17 significant digits so CSV
/// round trips are bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }

    fn to_csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn from_csv(s: &str) -> Cell {
        if s.is_empty() {
            Cell::Empty
        } else if let Ok(v) = s.parse::<i64>() {
            Cell::Int(v)
        } else if let Ok(v) = s.parse::<f64>() {
            Cell::Num(v)
        } else {
            Cell::Text(s.to_string())
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Empty => f.write_str("-"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<Cell>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].clone()).collect())
    }

    /// Numeric values of a column, skipping non-numeric cells.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        self.column(name)
            .unwrap_or_default()
            .iter()
            .filter_map(Cell::as_f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(&self.columns).map_err(map)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::to_csv)).map_err(map)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Table> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let map = |e: csv::Error| Error::Parse(e.to_string());
        let columns = r.headers().map_err(map)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(map)?.iter().map(Cell::from_csv).collect());
        }
        Ok(Table { columns, rows })
    }
}

/// Output of one experiment: a main table, named side tables and a
/// key/value summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub table: Table,
    pub summary: Vec<(String, Cell)>,
    pub extras: Vec<(String, Table)>,
    /// Invariant audits that failed; a non-empty list maps to exit code 3.
    pub audit_failures: Vec<String>,
    /// Suggested chart of the report.
    pub plot: Option<PlotSpec>,
}

/// Which columns to chart, and from which table (`None` is the main one).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlotSpec {
    pub table: Option<String>,
    pub x: String,
    pub ys: Vec<String>,
    pub log_axes: bool,
}

impl Report {
    pub fn new(experiment: &str, table: Table) -> Self {
        Report {
            experiment: experiment.to_string(),
            table,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Cell>) {
        self.summary.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&Cell> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn extra(&self, name: &str) -> Option<&Table> {
        self.extras.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&["key", "value"]);
        for (k, v) in &self.summary {
            t.push(vec![Cell::Text(k.clone()), v.clone()]);
        }
        t
    }

    pub fn to_json(&self) -> String {
        let mut summary = serde_json::Map::new();
        for (k, v) in &self.summary {
            summary.insert(k.clone(), serde_json::to_value(v).expect("cell serializes"));
        }
        let extras: serde_json::Map<String, serde_json::Value> = self
            .extras
            .iter()
            .map(|(k, t)| (k.clone(), serde_json::to_value(t).expect("table serializes")))
            .collect();
        let v = serde_json::json!({
            "experiment": self.experiment,
            "summary": summary,
            "columns": self.table.columns,
            "rows": self.table.rows,
            "extras": extras,
            "audit_failures": self.audit_failures,
        });
        serde_json::to_string_pretty(&v).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::config(format!("unknown format '{s}', expected csv or json"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the report. CSV puts the main table at `path`, the summary at
/// `stem.summary.csv` and each side table at `stem.<name>.csv`; JSON puts
/// everything in one file. Returns the paths written.
pub fn emit(report: &Report, path: &Path, format: Format) -> Result<Vec<PathBuf>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match format {
        Format::Json => {
            write_file(path, &report.to_json())?;
            Ok(vec![path.to_path_buf()])
        }
        Format::Csv => {
            let mut written = vec![path.to_path_buf()];
            write_file(path, &report.table.to_csv_string())?;
            let s = sibling(path, "summary.csv");
            write_file(&s, &report.summary_table().to_csv_string())?;
            written.push(s);
            for (name, t) in &report.extras {
                let p = sibling(path, &format!("{name}.csv"));
                write_file(&p, &t.to_csv_string())?;
                written.push(p);
            }
            Ok(written)
        }
    }
}

/// Polyline chart of `y_cols` against `x_col`, optionally on log axes.
pub fn svg_plot(table: &Table, x_col: &str, y_cols: &[&str], log_axes: bool, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let tf = |v: f64| if log_axes { v.ln() } else { v };
    let xcol = table.column(x_col).unwrap_or_default();
    let mut series = Vec::new();
    for name in y_cols {
        let ycol = table.column(name).unwrap_or_default();
        let pts: Vec<(f64, f64)> = xcol
            .iter()
            .zip(&ycol)
            .filter_map(|(x, y)| Some((tf(x.as_f64()?), tf(y.as_f64()?))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        series.push((name.to_string(), pts));
    }
    let all: Vec<&(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &&(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, title);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{} H{} M{PAD},{} V{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        PAD
    );
    let lab = |v: f64| if log_axes { format!("{:.3e}", v.exp()) } else { format!("{v:.3e}") };
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{}</text>"#, H - PAD + 16.0, lab(x0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, W - PAD, H - PAD + 16.0, lab(x1));
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, H - PAD, lab(y0));
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, PAD, lab(y1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_col}</text>"#, W / 2.0, H - 10.0);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            d.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - PAD - 150.0,
            PAD + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Renders the report's suggested chart, if any.
pub fn report_svg(report: &Report) -> Option<String> {
    let spec = report.plot.as_ref()?;
    let table = match &spec.table {
        Some(name) => report.extra(name)?,
        None => &report.table,
    };
    let ys: Vec<&str> = spec.ys.iter().map(String::as_str).collect();
    Some(svg_plot(table, &spec.x, &ys, spec.log_axes, &report.experiment))
}

pub fn emit_svg(table: &Table, x_col: &str, y_cols: &[&str], log_axes: bool, title: &str, path: &Path) -> Result<()> {
    write_file(path, &svg_plot(table, x_col, y_cols, log_axes, title))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(&["n", "p", "label", "opt"]);
        t.push(vec![Cell::Int(3), Cell::Num(0.1 + 0.2), "a".into(), Cell::Empty]);
        t.push(vec![Cell::Int(-4), Cell::Num(1e-300 / 3.0), "b".into(), Cell::Num(2.0)]);
        t
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.to_csv_string(), "a,b\n");
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let t = sample();
        assert_eq!(Table::parse_csv(&t.to_csv_string()).unwrap(), t);
    }

    #[test]
    fn json_carries_same_numbers() {
        let t = sample();
        let r = Report::new("x", t.clone());
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows[0][1].as_f64().unwrap(), t.rows[0][1].as_f64().unwrap());
        assert_eq!(rows[1][1].as_f64().unwrap(), t.rows[1][1].as_f64().unwrap());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = svg_plot(&sample(), "n", &["p", "opt"], false, "t");
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
