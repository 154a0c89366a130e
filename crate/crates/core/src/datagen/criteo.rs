//! Criteo display-advertising records: a label, 13 integer counts and 26
//! hashed categorical tokens per tab-separated line.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;

use crate::dense::Matrix;
use crate::embedding::SparseBatch;
use crate::error::{Error, Result};
use crate::model::Batch;

pub const NUM_DENSE: usize = 13;
pub const NUM_CATEGORICAL: usize = 26;
pub const NUM_FIELDS: usize = 1 + NUM_DENSE + NUM_CATEGORICAL;

#[derive(Clone, Debug, PartialEq)]
pub struct CriteoSample {
    pub label: f64,
    /// `ln(1 + max(x, 0))` of each count.
    pub dense: [f64; NUM_DENSE],
    pub categorical: [usize; NUM_CATEGORICAL],
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn check_vocab(vocab_sizes: &[usize]) -> Result<()> {
    if vocab_sizes.len() != NUM_CATEGORICAL {
        return Err(Error::Config(format!(
            "Criteo data needs {NUM_CATEGORICAL} vocabulary sizes, got {}",
            vocab_sizes.len()
        )));
    }
    if vocab_sizes.contains(&0) {
        return Err(Error::Config("vocabulary sizes must be positive".into()));
    }
    Ok(())
}

fn parse_record(line: &str, vocab_sizes: &[usize]) -> Result<CriteoSample, String> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != NUM_FIELDS {
        return Err(format!("expected {NUM_FIELDS} tab-separated fields, found {}", fields.len()));
    }
    let label = match fields[0].trim() {
        "" | "0" => 0.0,
        "1" => 1.0,
        other => return Err(format!("label must be 0 or 1, got {other:?}")),
    };
    let mut dense = [0.0; NUM_DENSE];
    for (i, (slot, raw)) in dense.iter_mut().zip(&fields[1..=NUM_DENSE]).enumerate() {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let x: f64 = raw
            .parse()
            .map_err(|_| format!("dense field {} is not a number: {raw:?}", i + 1))?;
        if !x.is_finite() {
            return Err(format!("dense field {} is not finite: {raw:?}", i + 1));
        }
        *slot = x.max(0.0).ln_1p();
    }
    let mut categorical = [0usize; NUM_CATEGORICAL];
    for ((slot, raw), &m) in categorical
        .iter_mut()
        .zip(&fields[1 + NUM_DENSE..])
        .zip(vocab_sizes)
    {
        let raw = raw.trim();
        if !raw.is_empty() {
            *slot = (fnv1a64(raw.as_bytes()) % m as u64) as usize;
        }
    }
    Ok(CriteoSample {
        label,
        dense,
        categorical,
    })
}

/// Parses one record. Missing dense values and labels become 0; a missing
/// categorical token maps to index 0; present tokens are hashed with
/// [`fnv1a64`] and reduced modulo the table's vocabulary size.
pub fn parse_criteo(line: &str, vocab_sizes: &[usize]) -> Result<CriteoSample> {
    check_vocab(vocab_sizes)?;
    parse_record(line, vocab_sizes).map_err(|reason| Error::Parse {
        path: PathBuf::from("<input>"),
        line: 1,
        reason,
    })
}

/// Streams mini-batches from a Criteo text file, gzip-compressed when the
/// name ends in `.gz`.
pub struct CriteoReader {
    path: PathBuf,
    lines: Box<dyn BufRead + Send>,
    line_no: usize,
    vocab_sizes: Vec<usize>,
}

impl CriteoReader {
    pub fn open(path: impl AsRef<Path>, vocab_sizes: &[usize]) -> Result<Self> {
        check_vocab(vocab_sizes)?;
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let lines: Box<dyn BufRead + Send> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(BufReader::new(MultiGzDecoder::new(file)))
        } else {
            Box::new(BufReader::new(file))
        };
        Ok(Self {
            path,
            lines,
            line_no: 0,
            vocab_sizes: vocab_sizes.to_vec(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// The next record, skipping blank lines; `None` at end of file.
    pub fn next_sample(&mut self) -> Result<Option<CriteoSample>> {
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = self
                .lines
                .read_line(&mut buf)
                .map_err(|e| Error::io(&self.path, e))?;
            if n == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            if buf.trim().is_empty() {
                continue;
            }
            return parse_record(&buf, &self.vocab_sizes)
                .map(Some)
                .map_err(|reason| Error::Parse {
                    path: self.path.clone(),
                    line: self.line_no,
                    reason,
                });
        }
    }

    /// Up to `batch_size` samples; `None` once the file is exhausted.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<Batch>> {
        let mut samples = Vec::with_capacity(batch_size);
        while samples.len() < batch_size {
            match self.next_sample()? {
                Some(s) => samples.push(s),
                None => break,
            }
        }
        if samples.is_empty() {
            return Ok(None);
        }
        Ok(Some(samples_to_batch(&samples)))
    }
}

/// One-hot lookups per categorical feature.
pub fn samples_to_batch(samples: &[CriteoSample]) -> Batch {
    let n = samples.len();
    let mut dense = Matrix::zeros(n, NUM_DENSE);
    for (i, s) in samples.iter().enumerate() {
        dense.row_mut(i).copy_from_slice(&s.dense);
    }
    let offsets: Vec<usize> = (0..=n).collect();
    let sparse = (0..NUM_CATEGORICAL)
        .map(|f| {
            let indices = samples.iter().map(|s| s.categorical[f]).collect();
            SparseBatch::new(offsets.clone(), indices, None).expect("one index per sample")
        })
        .collect();
    Batch {
        dense,
        sparse,
        labels: samples.iter().map(|s| s.label).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(label: &str, dense: &[&str], cats: &[&str]) -> String {
        let mut f = vec![label.to_string()];
        f.extend((0..NUM_DENSE).map(|i| dense.get(i).unwrap_or(&"").to_string()));
        f.extend((0..NUM_CATEGORICAL).map(|i| cats.get(i).unwrap_or(&"").to_string()));
        f.join("\t")
    }

    fn vocab() -> Vec<usize> {
        vec![1000; NUM_CATEGORICAL]
    }

    #[test]
    fn dense_transform() {
        let e1 = (std::f64::consts::E - 1.0).to_string();
        let s = parse_criteo(&record("1", &["0", "", &e1, "-5", "3"], &[]), &vocab()).unwrap();
        assert_eq!(s.label, 1.0);
        assert_eq!(s.dense[0], 0.0);
        assert_eq!(s.dense[1], 0.0);
        assert!((s.dense[2] - 1.0).abs() < 1e-15);
        assert_eq!(s.dense[3], 0.0);
        assert!((s.dense[4] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_hashing() {
        let s = parse_criteo(&record("", &[], &["68fd1e64", "", "68fd1e64"]), &vocab()).unwrap();
        assert_eq!(s.label, 0.0);
        let h = (fnv1a64(b"68fd1e64") % 1000) as usize;
        assert_eq!(s.categorical[0], h);
        assert_eq!(s.categorical[1], 0);
        assert_eq!(s.categorical[2], h);
        assert!(s.categorical.iter().all(|&c| c < 1000));
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn malformed_records() {
        assert!(parse_criteo("1\t2\t3", &vocab()).is_err());
        assert!(parse_criteo(&record("2", &[], &[]), &vocab()).is_err());
        assert!(parse_criteo(&record("1", &["x"], &[]), &vocab()).is_err());
        assert!(parse_criteo(&record("1", &[], &[]), &[10; 3]).is_err());
    }

    #[test]
    fn reader_batches_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("day.txt");
        let mut f = File::create(&path).unwrap();
        for i in 0..5 {
            writeln!(f, "{}", record(&(i % 2).to_string(), &["1"], &["a"])).unwrap();
        }
        writeln!(f, "broken").unwrap();
        drop(f);

        let mut r = CriteoReader::open(&path, &vocab()).unwrap();
        let b = r.next_batch(3).unwrap().unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.sparse.len(), NUM_CATEGORICAL);
        assert_eq!(b.dense.shape(), (3, NUM_DENSE));
        assert_eq!(b.labels, vec![0.0, 1.0, 0.0]);
        let err = r.next_batch(3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 6, .. }), "{err}");
    }

    #[test]
    fn reader_handles_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("day.txt.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::fast());
        for _ in 0..4 {
            writeln!(enc, "{}", record("1", &["2"], &["b"])).unwrap();
        }
        enc.finish().unwrap();
        let mut r = CriteoReader::open(&path, &vocab()).unwrap();
        assert_eq!(r.next_batch(10).unwrap().unwrap().len(), 4);
        assert!(r.next_batch(10).unwrap().is_none());
    }
}
