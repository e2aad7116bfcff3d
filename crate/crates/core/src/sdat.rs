//! The SDAT1 container: one UTF-8 header line of space-separated `key=value`
//! pairs, then raw little-endian `f32` values in `(t, v, i, j)` order.
//!
//! ```text
//! magic=SDAT1 dims=L,V,H,W vars=a,b dt_hours=1 units=m/s,m/s\n<payload>
//! ```
//!
//! Extra keys are allowed and preserved; coarse observations use them to
//! carry the operator parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::field::{Dims, Field, Trajectory};

pub const MAGIC: &str = "SDAT1";

/// Ordered `key=value` pairs of a header line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    pairs: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing header key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value for {key}: {raw:?}")))
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Format(format!("bad list entry for {key}: {p:?}")))
            })
            .collect()
    }

    pub fn to_line(&self) -> String {
        let mut s = self
            .pairs
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let pairs = line
            .split_whitespace()
            .map(|tok| {
                tok.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("header token without '=': {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }
}

/// Splits a file into its header line and binary payload.
pub fn split_file(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    Ok((Header::parse(line)?, &bytes[nl + 1..]))
}

pub fn f32_payload(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &x in values {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

pub(crate) fn write_bytes(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(wrap)?);
    file.write_all(header.to_line().as_bytes()).map_err(wrap)?;
    file.write_all(payload).map_err(wrap)?;
    file.flush().map_err(wrap)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Standard header for a trajectory; callers may append extra keys.
pub fn trajectory_header(x: &Trajectory) -> Header {
    let mut h = Header::new();
    h.push("magic", MAGIC)
        .push("dims", x.dims())
        .push("vars", x.var_names().join(","))
        .push("dt_hours", x.dt_hours())
        .push("units", x.units().join(","));
    h
}

pub fn write_trajectory(path: impl AsRef<Path>, x: &Trajectory) -> Result<()> {
    write_with_header(path.as_ref(), &trajectory_header(x), x)
}

pub(crate) fn write_with_header(path: &Path, header: &Header, x: &Trajectory) -> Result<()> {
    write_bytes(path, header, &f32_payload(x.field().data()))
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    Ok(read_with_header(path.as_ref())?.0)
}

pub(crate) fn read_with_header(path: &Path) -> Result<(Trajectory, Header)> {
    let bytes = read_bytes(path)?;
    let (x, h) = decode_trajectory(&bytes)?;
    Ok((x, h))
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<(Trajectory, Header)> {
    ensure!(!bytes.is_empty(), Format, "empty file");
    let (header, payload) = split_file(bytes)?;
    ensure!(
        header.get("magic") == Some(MAGIC),
        Format,
        "bad magic {:?}",
        header.get("magic")
    );
    let d: Vec<usize> = header.parse_list("dims")?;
    ensure!(d.len() == 4, Format, "dims needs 4 entries, got {}", d.len());
    let dims = Dims::new(d[0], d[1], d[2], d[3]);
    ensure!(
        payload.len() == dims.len() * 4,
        Format,
        "payload has {} bytes, dims {dims} need {}",
        payload.len(),
        dims.len() * 4
    );
    let vars: Vec<String> = header.parse_list("vars")?;
    let units = match header.get("units") {
        Some(_) => header.parse_list("units")?,
        None => vec!["1".to_string(); dims.v],
    };
    let dt: f64 = header.parse_value("dt_hours")?;
    let field = Field::from_vec(dims, decode_f32(payload))?;
    let x = Trajectory::new(field, vars, units, dt).map_err(|e| match e {
        Error::Format(m) | Error::Shape(m) | Error::Domain(m) | Error::Data(m) => Error::Format(m),
        other => other,
    })?;
    Ok((x, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn single_zero_cell_file() {
        let dir = tmp();
        let p = dir.path().join("z.sdat");
        let x = Trajectory::unnamed(Field::zeros(Dims::new(1, 1, 1, 1))).unwrap();
        write_trajectory(&p, &x).unwrap();
        let bytes = fs::read(&p).unwrap();
        let line = trajectory_header(&x).to_line();
        assert!(line.starts_with("magic=SDAT1 dims=1,1,1,1 vars=var0 dt_hours=1"));
        assert_eq!(bytes.len(), line.len() + 4);
        assert_eq!(&bytes[line.len()..], &[0, 0, 0, 0]);
        assert_eq!(read_trajectory(&p).unwrap(), x);
    }

    #[test]
    fn hand_assembled_fixture() {
        let mut bytes = b"magic=SDAT1 dims=2,1,2,2 vars=tas dt_hours=0.5\n".to_vec();
        for k in 0..8 {
            bytes.extend_from_slice(&(k as f32 * 0.25).to_le_bytes());
        }
        let (x, _) = decode_trajectory(&bytes).unwrap();
        assert_eq!(x.dims(), Dims::new(2, 1, 2, 2));
        assert_eq!(x.field().get(1, 0, 1, 0), 6.0 * 0.25);
        // 2·1·2·2 holds 8 values; a 16-value payload is a size mismatch.
        for k in 8..16 {
            bytes.extend_from_slice(&(k as f32).to_le_bytes());
        }
        assert!(matches!(decode_trajectory(&bytes), Err(Error::Format(_))));
        assert_eq!(x.dt_hours(), 0.5);
        assert_eq!(x.units(), &["1".to_string()]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = b"magic=SDAT1 dims=2,1,2,2 vars=tas dt_hours=1\n".to_vec();
        bytes.extend_from_slice(&[0u8; 60]);
        assert!(matches!(decode_trajectory(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_empty_are_rejected() {
        assert!(matches!(decode_trajectory(b""), Err(Error::Format(_))));
        let bytes = b"magic=NOPE dims=1,1,1,1 vars=a dt_hours=1\n\0\0\0\0";
        assert!(matches!(decode_trajectory(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn write_to_missing_dir_fails() {
        let x = Trajectory::unnamed(Field::zeros(Dims::new(1, 1, 1, 1))).unwrap();
        let err = write_trajectory("/nonexistent/dir/x.sdat", &x).unwrap_err();
        assert!(matches!(err, Error::Write { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn read_after_write_is_bit_exact(
            l in 1usize..4, v in 1usize..3, h in 1usize..4, w in 1usize..4,
            seed in any::<u64>(),
            dt in 0.01f64..48.0,
        ) {
            let dims = Dims::new(l, v, h, w);
            let mut s = seed;
            let field = Field::from_fn(dims, |_, _, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let bits = (s >> 32) as u32;
                let x = f32::from_bits(bits);
                f64::from(if x.is_finite() { x } else { 0.0 })
            });
            let x = Trajectory::unnamed(field).unwrap();
            let x = Trajectory::new(x.field().clone(), x.var_names().to_vec(), x.units().to_vec(), dt).unwrap();
            let dir = tmp();
            let p = dir.path().join("x.sdat");
            write_trajectory(&p, &x).unwrap();
            let y = read_trajectory(&p).unwrap();
            prop_assert_eq!(y.dims(), x.dims());
            for (a, b) in x.field().data().iter().zip(y.field().data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(y.dt_hours(), x.dt_hours());
        }
    }
}
