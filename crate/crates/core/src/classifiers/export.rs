use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::imputer::{impute, Checkpoint};
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Imputed series flattened step-major: column `t * D + d`.
    Imputed,
    /// Final forward then final backward hidden state.
    Hidden,
}

/// One static feature row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub record_ids: Vec<String>,
    /// `[N, K]`
    pub features: Array,
    /// `[N]`
    pub labels: Array,
}

impl FeatureTable {
    pub fn from_checkpoint(checkpoint: &Checkpoint, batch: &TimeSeriesBatch, kind: FeatureKind) -> Result<Self> {
        let out = impute(&checkpoint.params, &checkpoint.config, batch, 256)?;
        let n = batch.n_records();
        let features = match kind {
            FeatureKind::Imputed => {
                let k = batch.steps() * batch.n_features();
                out.imputed.reshape(vec![n, k])?
            }
            FeatureKind::Hidden => {
                let h = checkpoint.config.hidden;
                let mut data = Vec::with_capacity(n * 2 * h);
                for r in 0..n {
                    data.extend_from_slice(&out.hidden_last_fwd.data()[r * h..(r + 1) * h]);
                    data.extend_from_slice(&out.hidden_last_bwd.data()[r * h..(r + 1) * h]);
                }
                Array::new(vec![n, 2 * h], data)?
            }
        };
        Ok(Self {
            record_ids: batch.record_ids.clone(),
            features,
            labels: batch.labels.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let k = self.features.cols();
            let mut header = vec!["record_id".to_string()];
            header.extend((0..k).map(|j| format!("f{j}")));
            header.push("label".into());
            w.write_record(&header).map_err(io)?;
            for (r, id) in self.record_ids.iter().enumerate() {
                let mut row = vec![id.clone()];
                row.extend(self.features.data()[r * k..(r + 1) * k].iter().map(|v| v.to_string()));
                row.push(format!("{}", self.labels[r] as u8));
                w.write_record(&row).map_err(io)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        crate::store::write_atomic(path, &buf)
    }
}

/// Writes imputed or hidden-state features of every record in `batch` to a
/// CSV with header `record_id,f0..fK,label`.
pub fn export_features(checkpoint: &Checkpoint, batch: &TimeSeriesBatch, kind: FeatureKind, path: &Path) -> Result<FeatureTable> {
    let table = FeatureTable::from_checkpoint(checkpoint, batch, kind)?;
    table.write(path)?;
    Ok(table)
}

pub fn read_feature_table(path: &Path) -> Result<FeatureTable> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let parse = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse(1, e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    let k = header.len().saturating_sub(2);
    let expected = (0..k).all(|j| header.get(j + 1) == Some(format!("f{j}").as_str()));
    if header.len() < 3 || header.get(0) != Some("record_id") || header.get(k + 1) != Some("label") || !expected {
        return Err(parse(1, "expected header record_id,f0..fK,label".into()));
    }
    let (mut ids, mut data, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        ids.push(rec[0].to_string());
        for j in 0..k {
            let v: f32 = rec[j + 1].parse().map_err(|_| parse(line, format!("bad value `{}`", &rec[j + 1])))?;
            data.push(v);
        }
        let label = match &rec[k + 1] {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(parse(line, format!("label must be 0 or 1, got `{other}`"))),
        };
        labels.push(label);
    }
    let n = ids.len();
    if n == 0 {
        return Err(parse(2, "no rows".into()));
    }
    Ok(FeatureTable {
        record_ids: ids,
        features: Array::new(vec![n, k], data)?,
        labels: Array::new(vec![n], labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::{init_params, ImputerConfig};

    #[test]
    fn shapes_and_round_trip() {
        let config = ImputerConfig {
            d_features: 3,
            hidden: 4,
            embed_dim: 2,
            ..Default::default()
        };
        let ck = Checkpoint {
            params: init_params(&config).unwrap(),
            config,
            epoch: 0,
            val_metric: None,
            norm: None,
            features: Vec::new(),
        };
        let shape = [5, 6, 3];
        let mask = Array::from_fn(&shape, |i| (i % 4 != 0) as u8 as f32);
        let values = Array::from_fn(&shape, |i| if mask[i] > 0.0 { (i as f32 * 0.1).sin() } else { 0.0 });
        let ids = (0..5).map(|i| format!("r{i}")).collect();
        let b = TimeSeriesBatch::new(ids, values, mask, Array::from_fn(&[5], |i| (i % 2) as f32)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (kind, cols) in [(FeatureKind::Hidden, 8), (FeatureKind::Imputed, 18)] {
            let path = dir.path().join("f.csv");
            let t = export_features(&ck, &b, kind, &path).unwrap();
            assert_eq!(t.features.shape(), &[5, cols]);
            assert_eq!(read_feature_table(&path).unwrap(), t);
        }
    }
}
