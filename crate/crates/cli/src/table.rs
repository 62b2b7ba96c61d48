//! Column-oriented result tables shared by every command and exporter.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
    Flag(bool),
    /// Serialized as `null` in JSON and as an empty field in CSV.
    Missing,
}

impl Cell {
    pub fn num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn text(&self) -> String {
        match self {
            // Shortest round-trip form; exponent notation outside [1e-5, 1e16).
            Cell::Num(v) if v.fract() == 0.0 && v.abs() < 1e16 => format!("{v}"),
            Cell::Num(v) if v.abs() < 1e-5 => format!("{v:e}"),
            Cell::Num(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Flag(b) => b.to_string(),
            Cell::Missing => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        if v.is_finite() {
            // Drops the sign of negative zero.
            Cell::Num(v + 0.0)
        } else {
            Cell::Missing
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
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

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: Vec<String>) -> Self {
        Table { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column; non-numeric cells become NaN.
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column(name)?;
        Some(self.rows.iter().map(|r| r[j].num().unwrap_or(f64::NAN)).collect())
    }
}

/// Column names `prefix11, prefix12, …` of a row-major `d × d` matrix.
pub fn matrix_columns(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).flat_map(|i| (1..=d).map(move |j| format!("{prefix}{i}{j}"))).collect()
}

/// Column names `prefix1, …, prefixN`.
pub fn vector_columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_roundtrip_through_json() {
        let row = vec![Cell::from(0.1), Cell::from("grid"), Cell::from(true), Cell::from(f64::NAN)];
        let text = serde_json::to_string(&row).unwrap();
        assert_eq!(text, r#"[0.1,"grid",true,null]"#);
        let back: Vec<Cell> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, row);
    }

    #[test]
    fn csv_text_round_trips() {
        for v in [0.0, 3.0, 0.1, -2.5e-7, 9.860147629103343e-15, 123456.789, 1e20] {
            assert_eq!(Cell::from(v).text().parse::<f64>().unwrap(), v);
        }
        assert_eq!(Cell::from(9.860147629103343e-15).text(), "9.860147629103343e-15");
        assert_eq!(Cell::from(-0.0).text(), "0");
    }

    #[test]
    fn matrix_column_order_is_row_major() {
        assert_eq!(matrix_columns("W", 2), ["W11", "W12", "W21", "W22"]);
    }
}
