//! FSDS binary datasets and CSV ingestion.
//!
//! FSDS layout (little-endian): magic `FSDS`, `u32` version (1), `u32` n_classes,
//! `u32` rank, `rank` x `u32` extents, `u32` examples_per_class (0 means ragged and is
//! followed by one `u32` count per class), then `f32` examples grouped by class.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::tensor::{numel, Tensor};
use crate::Scalar;

use super::{ClassData, DataError, Dataset};

pub const FSDS_MAGIC: &[u8; 4] = b"FSDS";
pub const FSDS_VERSION: u32 = 1;

pub fn encode_fsds<S: Scalar>(ds: &Dataset<S>) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(FSDS_MAGIC);
    out.extend_from_slice(&FSDS_VERSION.to_le_bytes());
    put(&mut out, ds.n_classes());
    put(&mut out, ds.feature_shape.len());
    for &d in &ds.feature_shape {
        put(&mut out, d);
    }
    let sizes = ds.class_sizes();
    if sizes.iter().all(|&s| s == sizes[0]) {
        put(&mut out, sizes[0]);
    } else {
        put(&mut out, 0);
        for s in sizes {
            put(&mut out, s);
        }
    }
    for e in ds.classes.iter().flat_map(|c| &c.examples) {
        for v in e.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at.checked_add(n).ok_or(DataError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(DataError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_fsds<S: Scalar>(bytes: &[u8]) -> Result<Dataset<S>, DataError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != FSDS_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = r.u32()? as u32;
    if version != FSDS_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n_classes = r.u32()?;
    let rank = r.u32()?;
    let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let per = r.u32()?;
    let sizes = if per == 0 {
        (0..n_classes).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?
    } else {
        vec![per; n_classes]
    };
    let dim = numel(&shape);
    let payload = sizes
        .iter()
        .try_fold(0usize, |a, &s| a.checked_add(s.checked_mul(dim)?))
        .and_then(|t| t.checked_mul(4))
        .ok_or(DataError::Truncated)?;
    let mut values = r
        .take(payload)?
        .chunks_exact(4)
        .map(|b| S::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64));
    if r.at != bytes.len() {
        return Err(DataError::TrailingBytes);
    }
    let classes = sizes
        .iter()
        .enumerate()
        .map(|(id, &n)| ClassData {
            id,
            examples: (0..n)
                .map(|_| {
                    let data = values.by_ref().take(dim).collect();
                    Tensor::new(shape.clone(), data).expect("payload sized by header")
                })
                .collect(),
        })
        .collect();
    Dataset::new(shape, classes)
}

pub fn write_fsds<S: Scalar>(path: &Path, ds: &Dataset<S>) -> Result<(), DataError> {
    std::fs::File::create(path)?.write_all(&encode_fsds(ds))?;
    Ok(())
}

pub fn load_fsds<S: Scalar>(path: &Path) -> Result<Dataset<S>, DataError> {
    decode_fsds(&std::fs::read(path)?)
}

/// Reads a numeric CSV with a header row. Rows are grouped by the value in
/// `label_column` (class ids follow first appearance); the remaining columns are
/// min-max scaled to `[0, 1]`.
pub fn load_csv<S: Scalar>(path: &Path, label_column: &str) -> Result<Dataset<S>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| DataError::MissingColumn(label_column.into()))?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<Tensor<S>>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => DataError::Ragged { line },
            _ => DataError::Csv(e),
        })?;
        let label = record[label_at].trim();
        label.parse::<f64>().map_err(|_| DataError::NonNumeric {
            line,
            column: headers[label_at].to_string(),
        })?;
        let next = ids.len();
        let class = *ids.entry(label.to_string()).or_insert(next);
        if class == rows.len() {
            rows.push(Vec::new());
        }
        let mut data = Vec::with_capacity(record.len() - 1);
        for (j, cell) in record.iter().enumerate().filter(|&(j, _)| j != label_at) {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                line,
                column: headers[j].to_string(),
            })?;
            data.push(S::lit(v));
        }
        rows[class].push(Tensor::vector(data));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = headers.len() - 1;
    let classes = rows
        .into_iter()
        .enumerate()
        .map(|(id, examples)| ClassData { id, examples })
        .collect();
    Ok(Dataset::new(vec![dim], classes)?.normalize_min_max())
}
