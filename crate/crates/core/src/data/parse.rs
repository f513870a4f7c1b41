//! Raw check-in file parsing: delimited text with configurable column order,
//! integer-seconds or ISO-8601 timestamps.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::data::types::RawCheckin;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delimiter {
    Auto,
    Tab,
    Comma,
}

/// Zero-based column positions of each field.
#[derive(Clone, Debug)]
pub struct ColumnSpec {
    pub delimiter: Delimiter,
    pub user: usize,
    pub time: usize,
    pub lat: usize,
    pub lon: usize,
    pub poi: usize,
    pub category: Option<usize>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self { delimiter: Delimiter::Auto, user: 0, time: 1, lat: 2, lon: 3, poi: 4, category: Some(5) }
    }
}

impl ColumnSpec {
    fn required_width(&self) -> usize {
        // The category column is optional even when configured.
        [self.user, self.time, self.lat, self.lon, self.poi]
            .into_iter()
            .max()
            .unwrap()
            + 1
    }
}

/// One rejected row with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct RowIssue {
    pub line: usize,
    pub message: String,
}

fn parse_timestamp(text: &str) -> Option<i64> {
    if let Ok(secs) = text.parse::<i64>() {
        return (secs >= 0).then_some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

pub fn parse_checkin_file(
    path: &Path,
    spec: &ColumnSpec,
) -> Result<(Vec<RawCheckin>, Vec<RowIssue>)> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_checkin_text(&content, spec)
}

pub fn parse_checkin_text(content: &str, spec: &ColumnSpec) -> Result<(Vec<RawCheckin>, Vec<RowIssue>)> {
    let mut rows = Vec::new();
    let mut issues = Vec::new();
    let mut missing_column_rows = 0usize;
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let delim = match spec.delimiter {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Auto => {
                if line.contains('\t') {
                    '\t'
                } else {
                    ','
                }
            }
        };
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() < spec.required_width() {
            missing_column_rows += 1;
            issues.push(RowIssue {
                line: line_no,
                message: format!(
                    "expected at least {} columns, found {}",
                    spec.required_width(),
                    fields.len()
                ),
            });
            continue;
        }
        let reject = |msg: String, issues: &mut Vec<RowIssue>| {
            issues.push(RowIssue { line: line_no, message: msg });
        };
        let Some(timestamp) = parse_timestamp(fields[spec.time]) else {
            reject(format!("unparseable timestamp {:?}", fields[spec.time]), &mut issues);
            continue;
        };
        let Ok(lat) = fields[spec.lat].parse::<f64>() else {
            reject(format!("unparseable latitude {:?}", fields[spec.lat]), &mut issues);
            continue;
        };
        let Ok(lon) = fields[spec.lon].parse::<f64>() else {
            reject(format!("unparseable longitude {:?}", fields[spec.lon]), &mut issues);
            continue;
        };
        if !(-90.0..=90.0).contains(&lat) {
            reject(format!("latitude {lat} outside [-90, 90]"), &mut issues);
            continue;
        }
        if !(-180.0..=180.0).contains(&lon) {
            reject(format!("longitude {lon} outside [-180, 180]"), &mut issues);
            continue;
        }
        let category_text = spec
            .category
            .and_then(|c| fields.get(c))
            .map(|s| s.to_string())
            .unwrap_or_default();
        rows.push(RawCheckin {
            user_key: fields[spec.user].to_string(),
            timestamp,
            lat,
            lon,
            poi_key: fields[spec.poi].to_string(),
            category_text,
        });
    }
    // Every row lacking the configured columns means the file itself does not
    // carry a required column.
    if rows.is_empty() && missing_column_rows > 0 && missing_column_rows == issues.len() {
        return Err(Error::Parse("missing required column".into()));
    }
    Ok((rows, issues))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_row() {
        let (rows, issues) =
            parse_checkin_text("u1, 1262304000, 30.0, 120.0, p7, Coffee Shop\n", &ColumnSpec::default())
                .unwrap();
        assert!(issues.is_empty());
        assert_eq!(
            rows,
            vec![RawCheckin {
                user_key: "u1".into(),
                timestamp: 1262304000,
                lat: 30.0,
                lon: 120.0,
                poi_key: "p7".into(),
                category_text: "Coffee Shop".into(),
            }]
        );
    }

    #[test]
    fn rejects_out_of_range_latitude_with_line_number() {
        let text = "u1, 1262304000, 30.0, 120.0, p7, Cafe\nu2, 1262304001, 95.0, 120.0, p8, Cafe\n";
        let (rows, issues) = parse_checkin_text(text, &ColumnSpec::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 2);
    }

    #[test]
    fn empty_file_is_empty_and_clean() {
        let (rows, issues) = parse_checkin_text("", &ColumnSpec::default()).unwrap();
        assert!(rows.is_empty());
        assert!(issues.is_empty());
    }

    #[test]
    fn all_rows_missing_columns_is_fatal() {
        let err = parse_checkin_text("justonefield\nanother\n", &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn tab_delimiter_and_iso_timestamps() {
        let text = "u1\t2010-01-01T00:00:00\t30.0\t120.0\tp7\tCafe\n";
        let (rows, _) = parse_checkin_text(text, &ColumnSpec::default()).unwrap();
        assert_eq!(rows[0].timestamp, 1262304000);
    }

    #[test]
    fn category_column_may_be_absent() {
        let text = "u1,1262304000,30.0,120.0,p7\n";
        let (rows, issues) = parse_checkin_text(text, &ColumnSpec::default()).unwrap();
        assert!(issues.is_empty());
        assert_eq!(rows[0].category_text, "");
    }

    #[test]
    fn rows_keep_file_order() {
        let text = "u1,1262304010,30.0,120.0,p1,\nu1,1262304000,30.0,120.0,p2,\n";
        let (rows, _) = parse_checkin_text(text, &ColumnSpec::default()).unwrap();
        assert_eq!(rows[0].poi_key, "p1");
        assert_eq!(rows[1].poi_key, "p2");
    }
}
