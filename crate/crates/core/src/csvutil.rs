use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;

/// A delimited text file loaded into memory with its header row.
pub(crate) struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path, delimiter: u8) -> Result<Table, csv::Error> {
        let file = File::open(path)?;
        Self::from_reader(file, delimiter)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, delimiter: u8) -> Result<Table, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
            .collect();
        let rows = rdr.records().collect::<Result<Vec<_>, _>>()?;
        Ok(Table { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

/// Cell accessor that treats short rows and blank cells as absent.
pub(crate) fn cell(row: &csv::StringRecord, idx: Option<usize>) -> Option<&str> {
    let raw = row.get(idx?)?.trim();
    if raw.is_empty() {
        None
    } else {
        Some(raw)
    }
}

/// Accepts ISO-8601 (`2015-01-31`), registry style `January 2015` (first of
/// the month) and `January 31, 2015`.
pub(crate) fn parse_date(raw: &str) -> Option<NaiveDate> {
    let s = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d);
    }
    let parts: Vec<&str> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|p| !p.is_empty())
        .collect();
    let year_ok = parts
        .last()
        .is_some_and(|y| y.len() == 4 && y.bytes().all(|b| b.is_ascii_digit()));
    if !year_ok {
        return None;
    }
    let joined = match parts.len() {
        3 => parts.join(" "),
        2 => format!("{} 1 {}", parts[0], parts[1]),
        _ => return None,
    };
    ["%B %d %Y", "%b %d %Y"]
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(&joined, fmt).ok())
}

pub(crate) fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "yes" | "y" | "1" => Some(true),
        "false" | "f" | "no" | "n" | "0" => Some(false),
        _ => None,
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
