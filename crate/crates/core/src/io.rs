//! Instance container and CSV export.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic  b"LRAMPINS"       8 bytes
//! version u32              currently 1
//! header_len u64
//! header  JSON, header_len bytes
//! arrays  f64 LE, concatenated in the order listed in the header
//! ```
//!
//! Values are widened to `f64`, so `f64` and `f32` instances round-trip
//! bit-exactly.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::channels::{Channel, ScoreMatrix};
use crate::error::{Error, Result};
use crate::instances::{GroundTruth, Model, PlantedInstance};
use crate::linalg::Matrix;
use crate::priors::Prior;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"LRAMPINS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + DeserializeOwned"
))]
pub struct Header<T: Scalar> {
    pub model: Model,
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub delta: T,
    pub seed: u64,
    pub channel: Channel<T>,
    pub prior: Prior<T>,
    pub prior_v: Option<Prior<T>>,
    pub score_symmetric: bool,
    pub arrays: Vec<ArrayInfo>,
    /// Free-form record of the configuration that produced the instance.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn arrays_of<T: Scalar>(inst: &PlantedInstance<T>) -> Vec<(&'static str, &Matrix<T>)> {
    let mut out = vec![("y", &inst.observations), ("s", &inst.scores.values)];
    if let Some(k) = &inst.coupling {
        out.push(("k", k));
    }
    if let Some(t) = &inst.truth {
        out.push(("truth_left", &t.left));
        if let Some(r) = &t.right {
            out.push(("truth_right", r));
        }
    }
    out
}

/// Serializes the instance; `config` is embedded verbatim in the header.
pub fn write_instance<T, W>(mut w: W, inst: &PlantedInstance<T>, config: serde_json::Value) -> Result<()>
where
    T: Scalar + Serialize,
    W: Write,
{
    let arrays = arrays_of(inst);
    let header = Header {
        model: inst.model,
        n: inst.n,
        m: inst.m,
        rank: inst.rank,
        delta: inst.delta,
        seed: inst.seed,
        channel: inst.channel,
        prior: inst.prior.clone(),
        prior_v: inst.prior_v.clone(),
        score_symmetric: inst.scores.symmetric,
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayInfo {
                name: (*name).into(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        config,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in arrays {
        buf.clear();
        buf.reserve(m.as_slice().len() * 8);
        for &v in m.as_slice() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {what}"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

/// Reads only the header (cheap inspection of a container).
pub fn read_header<T, R>(r: &mut R) -> Result<Header<T>>
where
    T: Scalar + DeserializeOwned,
    R: Read,
{
    let magic = read_exact_vec(r, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_exact_vec(r, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(read_exact_vec(r, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header too large".into()))?;
    if len > 1 << 30 {
        return Err(Error::Format("header too large".into()));
    }
    let json = read_exact_vec(r, len, "header")?;
    Ok(serde_json::from_slice(&json)?)
}

pub fn read_instance<T, R>(mut r: R) -> Result<(PlantedInstance<T>, Header<T>)>
where
    T: Scalar + DeserializeOwned,
    R: Read,
{
    let header: Header<T> = read_header(&mut r)?;
    let mut arrays = std::collections::HashMap::new();
    for info in &header.arrays {
        let count = info
            .rows
            .checked_mul(info.cols)
            .ok_or_else(|| Error::Format("array size overflows".into()))?;
        let bytes = read_exact_vec(&mut r, count * 8, &info.name)?;
        let data: Vec<T> = bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        arrays.insert(info.name.as_str(), Matrix::from_vec(info.rows, info.cols, data)?);
    }
    let mut take = |name: &str| arrays.remove(name);
    let observations = take("y").ok_or_else(|| Error::Format("missing observations".into()))?;
    let scores = take("s").ok_or_else(|| Error::Format("missing score matrix".into()))?;
    let coupling = take("k");
    let truth = take("truth_left").map(|left| GroundTruth {
        left,
        right: take("truth_right"),
    });
    let expect = (header.n, header.m);
    if observations.shape() != expect || scores.shape() != expect {
        return Err(Error::Format(format!(
            "observation shape {:?} disagrees with header {expect:?}",
            observations.shape()
        )));
    }
    let inst = PlantedInstance {
        model: header.model,
        n: header.n,
        m: header.m,
        rank: header.rank,
        coupling,
        truth,
        observations,
        scores: ScoreMatrix {
            values: scores,
            symmetric: header.score_symmetric,
        },
        delta: header.delta,
        seed: header.seed,
        channel: header.channel,
        prior: header.prior.clone(),
        prior_v: header.prior_v.clone(),
    };
    Ok((inst, header))
}

pub fn save_instance<T: Scalar + Serialize>(
    path: &Path,
    inst: &PlantedInstance<T>,
    config: serde_json::Value,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_instance(std::io::BufWriter::new(f), inst, config)
}

pub fn load_instance<T: Scalar + DeserializeOwned>(path: &Path) -> Result<(PlantedInstance<T>, Header<T>)> {
    let f = std::fs::File::open(path)?;
    read_instance(std::io::BufReader::new(f))
}

/// Writes `row,col,value` triples (all entries, zero-based indices).
pub fn write_triples<T: Scalar, W: Write>(mut w: W, m: &Matrix<T>) -> Result<()> {
    writeln!(w, "row,col,value")?;
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            writeln!(w, "{i},{j},{}", v.as_f64())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `row,col,value` triples into a dense matrix sized by the largest
/// indices seen (or by `shape` when given). Missing entries are zero.
pub fn read_triples<T: Scalar, R: BufRead>(r: R, shape: Option<(usize, usize)>) -> Result<Matrix<T>> {
    let mut entries = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("row")) {
            continue;
        }
        let bad = || Error::Format(format!("line {}: expected row,col,value", lineno + 1));
        let mut parts = line.split(',');
        let i: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let j: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let v: f64 = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        rows = rows.max(i + 1);
        cols = cols.max(j + 1);
        entries.push((i, j, v));
    }
    let (rows, cols) = match shape {
        Some((r, c)) if r >= rows && c >= cols => (r, c),
        Some(s) => {
            return Err(Error::Format(format!(
                "entries exceed declared shape {s:?}"
            )))
        }
        None => (rows, cols),
    };
    let mut m = Matrix::zeros(rows, cols);
    for (i, j, v) in entries {
        m[(i, j)] = T::lit(v);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_uv, generate_xkx};

    #[test]
    fn xkx_round_trip_is_bit_exact() {
        let prior = Prior::community(3).unwrap();
        let ch = Channel::sbm_with_delta(0.4, 0.5).unwrap();
        let inst = generate_xkx(&prior, &ch, &Matrix::identity(3), 30, 11).unwrap();
        let mut buf = Vec::new();
        let cfg = serde_json::json!({"n": 30, "note": "unit"});
        write_instance(&mut buf, &inst, cfg.clone()).unwrap();
        let (back, header) = read_instance::<f64, _>(&buf[..]).unwrap();
        assert_eq!(back, inst);
        assert_eq!(header.config, cfg);
    }

    #[test]
    fn uv_and_blind_round_trip() {
        let g = Prior::<f32>::standard_gaussian(2);
        let ch = Channel::exponential(0.7f32).unwrap();
        let inst = generate_uv(&g, &g, &ch, 12, 1.5, 2).unwrap();
        for i in [inst.clone(), inst.blind()] {
            let mut buf = Vec::new();
            write_instance(&mut buf, &i, serde_json::Value::Null).unwrap();
            let (back, _) = read_instance::<f32, _>(&buf[..]).unwrap();
            assert_eq!(back, i);
        }
    }

    #[test]
    fn rejects_corrupt_containers() {
        let prior = Prior::community(2).unwrap();
        let inst = generate_xkx(&prior, &Channel::gaussian(1.0).unwrap(), &Matrix::identity(2), 5, 1).unwrap();
        let mut buf = Vec::new();
        write_instance(&mut buf, &inst, serde_json::Value::Null).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_instance::<f64, _>(&bad[..]), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_instance::<f64, _>(short), Err(Error::Format(_))));
    }

    #[test]
    fn triples_round_trip() {
        let m = Matrix::from_rows(&[vec![0.1, -2.5], vec![3.0, 1e-300]]).unwrap();
        let mut buf = Vec::new();
        write_triples(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row,col,value\n0,0,0.1\n"));
        let back: Matrix<f64> = read_triples(&buf[..], None).unwrap();
        assert_eq!(back, m);
        assert!(read_triples::<f64, _>(&b"row,col,value\n0,x,1\n"[..], None).is_err());
        let padded: Matrix<f64> = read_triples(&b"0,0,1\n"[..], Some((2, 2))).unwrap();
        assert_eq!(padded.shape(), (2, 2));
    }
}
