//! CSV artifacts with a schema-version header line, and content hashing.
//!
//! Every artifact starts with `# schema: roadres/<name>/v<version>` followed
//! by an ordinary CSV header and rows. Further lines starting with `#` are
//! comments (used for trailing summaries).

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact `{name}`: missing or wrong schema line (found `{found}`)")]
    Schema { name: String, found: String },
    #[error("artifact `{name}` line {line}: {msg}")]
    Row {
        name: String,
        line: u64,
        msg: String,
    },
    #[error("artifact `{name}`: {source}")]
    Csv {
        name: String,
        #[source]
        source: csv::Error,
    },
}

pub fn schema_line(name: &str) -> String {
    format!("# schema: roadres/{name}/v{SCHEMA_VERSION}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize rows to artifact bytes. `trailer` lines are appended as comments.
///
/// The CSV header comes from the row type, so an empty table has none; use
/// [`to_csv_bytes_with_header`] when that matters.
pub fn to_csv_bytes<T: Serialize>(
    name: &str,
    rows: &[T],
    trailer: &[String],
) -> Result<Vec<u8>, ArtifactError> {
    let mut out = Vec::new();
    out.extend_from_slice(schema_line(name).as_bytes());
    out.push(b'\n');
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(true)
            .from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(|source| ArtifactError::Csv {
                name: name.to_string(),
                source,
            })?;
        }
        w.flush().map_err(|e| ArtifactError::Csv {
            name: name.to_string(),
            source: e.into(),
        })?;
    }
    for line in trailer {
        out.extend_from_slice(b"# ");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Like [`to_csv_bytes`] but always writes the given header, even when empty.
pub fn to_csv_bytes_with_header<T: Serialize>(
    name: &str,
    header: &[&str],
    rows: &[T],
    trailer: &[String],
) -> Result<Vec<u8>, ArtifactError> {
    let mut out = Vec::new();
    out.extend_from_slice(schema_line(name).as_bytes());
    out.push(b'\n');
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(&mut out);
        let err = |source: csv::Error| ArtifactError::Csv {
            name: name.to_string(),
            source,
        };
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))?;
    }
    for line in trailer {
        out.extend_from_slice(b"# ");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Parse artifact bytes, checking the schema line.
pub fn from_csv_bytes<T: DeserializeOwned>(
    name: &str,
    bytes: &[u8],
) -> Result<Vec<T>, ArtifactError> {
    let first_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .unwrap_or(bytes.len());
    let first = String::from_utf8_lossy(&bytes[..first_end])
        .trim_end()
        .to_string();
    if first != schema_line(name) {
        return Err(ArtifactError::Schema {
            name: name.to_string(),
            found: first,
        });
    }
    let body = &bytes[(first_end + 1).min(bytes.len())..];
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(body);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: T = rec.map_err(|e| ArtifactError::Row {
            name: name.to_string(),
            line: e.position().map(|p| p.line() + 1).unwrap_or(0),
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Trailing `# key=value` comment lines of an artifact.
pub fn trailer_lines(bytes: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .skip(1)
        .filter_map(|l| l.strip_prefix("# ").map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: String,
        value: Option<f64>,
    }

    #[test]
    fn round_trip_with_trailer() {
        let rows = vec![
            Row {
                id: "a".into(),
                value: Some(1.5),
            },
            Row {
                id: "b".into(),
                value: None,
            },
        ];
        let bytes = to_csv_bytes("demo", &rows, &["total=2".to_string()]).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# schema: roadres/demo/v1\nid,value\n"));
        let back: Vec<Row> = from_csv_bytes("demo", &bytes).unwrap();
        assert_eq!(back, rows);
        assert_eq!(trailer_lines(&bytes), vec!["total=2".to_string()]);
    }

    #[test]
    fn wrong_schema_rejected() {
        let bytes = to_csv_bytes::<Row>("demo", &[], &[]).unwrap();
        assert!(matches!(
            from_csv_bytes::<Row>("other", &bytes),
            Err(ArtifactError::Schema { .. })
        ));
    }

    #[test]
    fn empty_table_keeps_header() {
        let bytes = to_csv_bytes_with_header::<Row>("demo", &["id", "value"], &[], &[]).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "# schema: roadres/demo/v1\nid,value\n"
        );
    }
}
