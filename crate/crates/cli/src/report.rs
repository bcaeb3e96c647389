//! Bit-stable JSON and CSV serialization.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv rows must be objects")]
    NotTabular,
}

/// Floats as 17 significant digits in exponent form; integers verbatim.
pub fn format_number(n: &serde_json::Number) -> String {
    if n.is_f64() {
        let v = n.as_f64().unwrap();
        format!("{v:.16e}")
    } else {
        n.to_string()
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, k: usize| {
        for _ in 0..k {
            out.push_str("  ");
        }
    };
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&format_number(n)),
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(a) => {
            if a.is_empty() {
                out.push_str("[]");
                return;
            }
            if a.iter().all(|x| !x.is_array() && !x.is_object()) {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, indent);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, x, indent + 1);
                if i + 1 < a.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(m) => {
            if m.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, indent + 1);
                let _ = write!(out, "{}: ", serde_json::to_string(k).unwrap());
                write_value(out, &m[*k], indent + 1);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

pub fn to_stable_json<T: Serialize + ?Sized>(value: &T) -> Result<String, ReportError> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

fn scalar_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => format_number(n),
        Value::String(s) => s.clone(),
        other => {
            let mut s = String::new();
            write_compact(&mut s, other);
            s
        }
    }
}

fn write_compact(out: &mut String, v: &Value) {
    match v {
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_compact(out, x);
            }
            out.push(']');
        }
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}:", serde_json::to_string(k).unwrap());
                write_compact(out, &m[*k]);
            }
            out.push('}');
        }
        Value::Number(n) => out.push_str(&format_number(n)),
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        other => out.push_str(&other.to_string()),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => out.push((prefix.to_string(), scalar_cell(other))),
    }
}

/// One row per element; nested objects become dotted columns, arrays compact JSON cells.
/// Columns are sorted unless `columns` fixes their order.
pub fn to_stable_csv<T: Serialize>(rows: &[T], columns: Option<&[&str]>) -> Result<String, ReportError> {
    let mut flat = Vec::new();
    let mut keys = std::collections::BTreeSet::new();
    for r in rows {
        let v = serde_json::to_value(r)?;
        if !v.is_object() {
            return Err(ReportError::NotTabular);
        }
        let mut cells = Vec::new();
        flatten("", &v, &mut cells);
        for (k, _) in &cells {
            keys.insert(k.clone());
        }
        flat.push(cells.into_iter().collect::<std::collections::BTreeMap<_, _>>());
    }
    let header: Vec<String> = match columns {
        Some(c) => c.iter().map(|s| s.to_string()).collect(),
        None => keys.into_iter().collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in &flat {
        w.write_record(header.iter().map(|h| row.get(h).map(String::as_str).unwrap_or("")))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Io { path: "<buffer>".into(), source: e.into_error() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_file(path: &Path, text: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| ReportError::Io { path: dir.display().to_string(), source: e })?;
        }
    }
    std::fs::write(path, text).map_err(|e| ReportError::Io { path: path.display().to_string(), source: e })
}

/// Serializes `value` (JSON) or `rows` (CSV) to `path`.
pub fn emit_report<T: Serialize>(rows: &[T], format: Format, path: &Path) -> Result<(), ReportError> {
    let text = match format {
        Format::Json => to_stable_json(rows)?,
        Format::Csv => to_stable_csv(rows, None)?,
    };
    write_file(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        z: f64,
        a: u32,
        nested: Inner,
    }

    #[derive(Serialize)]
    struct Inner {
        v: Vec<f64>,
    }

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let s = to_stable_json(&Row { z: 0.1, a: 3, nested: Inner { v: vec![1.0, 2.5] } }).unwrap();
        assert_eq!(s, "{\n  \"a\": 3,\n  \"nested\": {\n    \"v\": [1.0000000000000000e0, 2.5000000000000000e0]\n  },\n  \"z\": 1.0000000000000001e-1\n}\n");
    }

    #[test]
    fn csv_header_and_rows() {
        let rows = vec![Row { z: 1.5, a: 1, nested: Inner { v: vec![] } }, Row { z: -2.0, a: 2, nested: Inner { v: vec![0.5] } }];
        let s = to_stable_csv(&rows, None).unwrap();
        assert_eq!(s, "a,nested.v,z\n1,[],1.5000000000000000e0\n2,[5.0000000000000000e-1],-2.0000000000000000e0\n");
        assert_eq!(s, to_stable_csv(&rows, None).unwrap());
    }

    #[test]
    fn parses_back_to_same_value() {
        let x: f64 = 0.1 + 0.2;
        let s = to_stable_json(&vec![x]).unwrap();
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0].to_bits(), x.to_bits());
    }
}
