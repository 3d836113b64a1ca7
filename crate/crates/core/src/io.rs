//! File formats.
//!
//! Feature files (`NFMT`): magic, version byte `1`, `u32` N, `u32` d, then
//! `N·d` little-endian `f64` values, row-major. Paths ending in `.csv` are
//! read and written as headerless CSV with `d` columns instead.
//!
//! Weight files (`NFWT`): magic, version byte `1`, `u32` layer count, `u32`
//! d, then per layer the little-endian `f64` values of `w_q`, `w_k`, `w_v`,
//! `ff1`, `b1`, `ff2`, `b2` (matrices row-major).
//!
//! Label sidecar: CSV with header `index,label,role,outlier`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::laa::ProjectionSet;
use crate::linalg::Matrix;
use crate::retrieval::Role;
use crate::stack::LayerWeights;

pub const FEATURE_MAGIC: &[u8; 4] = b"NFMT";
pub const WEIGHT_MAGIC: &[u8; 4] = b"NFWT";
pub const FORMAT_VERSION: u8 = 1;

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f64s(rows * cols)?).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 8 * m.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FORMAT_VERSION);
    put_u32(&mut out, m.rows())?;
    put_u32(&mut out, m.cols())?;
    put_f64s(&mut out, m.as_slice());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { buf: bytes };
    r.header(FEATURE_MAGIC)?;
    let (n, d) = (r.u32()?, r.u32()?);
    let m = r.matrix(n, d)?;
    r.finish()?;
    Ok(m)
}

pub fn features_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn features_from_csv(text: &str) -> Result<Matrix> {
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, line)| {
            line.split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    if is_csv(path) {
        features_from_csv(&fs::read_to_string(path)?)
    } else {
        decode_features(&fs::read(path)?)
    }
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    if is_csv(path) {
        fs::write(path, features_to_csv(m))?;
    } else {
        fs::write(path, encode_features(m)?)?;
    }
    Ok(())
}

pub fn encode_weights(layers: &[LayerWeights], d: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.push(FORMAT_VERSION);
    put_u32(&mut out, layers.len())?;
    put_u32(&mut out, d)?;
    for w in layers {
        if w.dim() != d {
            return Err(Error::Shape(format!("layer of dimension {} in a d = {d} file", w.dim())));
        }
        w.validate()?;
        let p = &w.projections;
        for m in [p.w_q(), p.w_k(), p.w_v(), &w.ff1] {
            put_f64s(&mut out, m.as_slice());
        }
        put_f64s(&mut out, &w.b1);
        put_f64s(&mut out, w.ff2.as_slice());
        put_f64s(&mut out, &w.b2);
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<LayerWeights>> {
    let mut r = Reader { buf: bytes };
    r.header(WEIGHT_MAGIC)?;
    let (count, d) = (r.u32()?, r.u32()?);
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let w_q = r.matrix(d, d)?;
        let w_k = r.matrix(d, d)?;
        let w_v = r.matrix(d, d)?;
        let ff1 = r.matrix(d, d)?;
        let b1 = r.f64s(d)?;
        let ff2 = r.matrix(d, d)?;
        let b2 = r.f64s(d)?;
        layers.push(LayerWeights::new(ProjectionSet::provided(w_q, w_k, w_v)?, ff1, b1, ff2, b2)?);
    }
    r.finish()?;
    Ok(layers)
}

pub fn read_weights(path: &Path) -> Result<Vec<LayerWeights>> {
    decode_weights(&fs::read(path)?)
}

pub fn write_weights(path: &Path, layers: &[LayerWeights], d: usize) -> Result<()> {
    fs::write(path, encode_weights(layers, d)?)?;
    Ok(())
}

/// One row of the label sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRecord {
    pub index: usize,
    pub label: u32,
    pub role: Role,
    pub outlier: bool,
}

pub fn write_labels(mut out: impl Write, records: &[LabelRecord]) -> Result<()> {
    writeln!(out, "index,label,role,outlier")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.index, r.label, r.role.as_str(), u8::from(r.outlier))?;
    }
    Ok(())
}

pub fn read_labels(mut input: impl Read) -> Result<Vec<LabelRecord>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "index,label,role,outlier" => {}
        _ => return Err(Error::Format("missing header index,label,role,outlier".into())),
    }
    lines
        .map(|(lineno, line)| {
            let bad = |what: &str| Error::Format(format!("line {}: bad {what}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad("field count"));
            }
            Ok(LabelRecord {
                index: fields[0].parse().map_err(|_| bad("index"))?,
                label: fields[1].parse().map_err(|_| bad("label"))?,
                role: match fields[2] {
                    "query" => Role::Query,
                    "gallery" => Role::Gallery,
                    _ => return Err(bad("role")),
                },
                outlier: match fields[3] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("outlier flag")),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let bytes = encode_features(&m).unwrap();
        assert_eq!(&bytes[..5], b"NFMT\x01");
        assert_eq!(&bytes[5..13], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 16);
    }

    #[test]
    fn feature_decode_errors() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut bytes = encode_features(&m).unwrap();
        assert!(matches!(decode_features(&bytes[..20]), Err(Error::Format(_))));
        bytes.push(0);
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        bytes[4] = 2;
        assert!(matches!(decode_features(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_features(b"XXXX\x01"), Err(Error::Format(_))));
    }

    #[test]
    fn csv_and_binary_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![0.1, 1e-300], vec![-3.0, 7.25]]).unwrap();
        for name in ["f.nfmt", "f.csv", "f.CSV"] {
            let path = dir.path().join(name);
            write_features(&path, &m).unwrap();
            assert_eq!(read_features(&path).unwrap(), m);
        }
        assert!(features_from_csv("1,2\n3\n").is_err());
        assert!(features_from_csv("1,x\n").is_err());
    }

    #[test]
    fn weights_file() {
        let layers = vec![LayerWeights::random(3, 1), LayerWeights::random(3, 2)];
        let bytes = encode_weights(&layers, 3).unwrap();
        assert_eq!(&bytes[..5], b"NFWT\x01");
        assert_eq!(bytes.len(), 13 + 2 * 8 * (5 * 9 + 2 * 3));
        let back = decode_weights(&bytes).unwrap();
        for (a, b) in layers.iter().zip(&back) {
            assert_eq!(a.projections.w_q(), b.projections.w_q());
            assert_eq!((&a.ff1, &a.b1, &a.ff2, &a.b2), (&b.ff1, &b.b1, &b.ff2, &b.b2));
        }
        assert!(encode_weights(&layers, 4).is_err());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn labels_sidecar() {
        let recs = vec![
            LabelRecord { index: 0, label: 3, role: Role::Query, outlier: false },
            LabelRecord { index: 1, label: 3, role: Role::Gallery, outlier: true },
        ];
        let mut buf = Vec::new();
        write_labels(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "index,label,role,outlier\n0,3,query,0\n1,3,gallery,1\n");
        assert_eq!(read_labels(buf.as_slice()).unwrap(), recs);
        assert!(read_labels("0,3,query,0\n".as_bytes()).is_err());
        assert!(read_labels("index,label,role,outlier\n0,3,probe,0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn feature_files_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1e6..1e6));
            prop_assert_eq!(decode_features(&encode_features(&m).unwrap()).unwrap(), m.clone());
            prop_assert_eq!(features_from_csv(&features_to_csv(&m)).unwrap(), m);
        }
    }
}
