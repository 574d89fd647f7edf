use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One measurement of one feature for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub record_id: String,
    /// Hours since admission.
    pub t_hours: f64,
    pub feature: String,
    pub value: f64,
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = open(path)?;
    let mut out = Vec::new();
    let mut first = true;
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        if first {
            first = false;
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected header `{}`, got `{}`", header.join(","), got.join(",")),
                ));
            }
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, got {}", header.len(), rec.len()),
            ));
        }
        out.push((line, rec));
    }
    if first {
        return Err(parse_err(path, 1, "empty file, header missing"));
    }
    Ok(out)
}

/// Reads `record_id,t_hours,feature,value`. Any malformed row aborts with its line number.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut events = Vec::new();
    for (line, rec) in rows(path, &["record_id", "t_hours", "feature", "value"])? {
        let record_id = rec[0].to_string();
        if record_id.is_empty() {
            return Err(parse_err(path, line, "empty record_id"));
        }
        let t_hours: f64 = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad t_hours `{}`", &rec[1])))?;
        if !t_hours.is_finite() || t_hours < 0.0 {
            return Err(parse_err(path, line, format!("t_hours must be finite and >= 0, got {t_hours}")));
        }
        let feature = rec[2].to_string();
        if feature.is_empty() {
            return Err(parse_err(path, line, "empty feature name"));
        }
        let value: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad value `{}`", &rec[3])))?;
        if !value.is_finite() {
            return Err(parse_err(path, line, format!("non-finite value {value}")));
        }
        events.push(EventRecord {
            record_id,
            t_hours,
            feature,
            value,
        });
    }
    Ok(events)
}

/// Reads `record_id,label` with label in {0,1}, preserving file order.
pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut labels = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, rec) in rows(path, &["record_id", "label"])? {
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty record_id"));
        }
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, line, format!("label must be 0 or 1, got `{other}`"))),
        };
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate record_id `{id}`")));
        }
        labels.push((id, label));
    }
    Ok(labels)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "record_id,t_hours,feature,value").map_err(io)?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.record_id, e.t_hours, e.feature, e.value).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_labels(path: &Path, labels: &[(String, u8)]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "record_id,label").map_err(io)?;
    for (id, l) in labels {
        writeln!(w, "{id},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "e.csv",
            "record_id,t_hours,feature,value\na,0.5,hr,80\na,oops,hr,81\n",
        );
        let err = read_events(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "id,y\na,1\n");
        assert!(read_labels(&p).is_err());
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "record_id,label\na,2\n");
        let err = read_labels(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let ev = vec![EventRecord {
            record_id: "r1".into(),
            t_hours: 3.25,
            feature: "hr".into(),
            value: -1.5,
        }];
        write_events(&p, &ev).unwrap();
        assert_eq!(read_events(&p).unwrap(), ev);
    }
}
