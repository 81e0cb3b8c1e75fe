//! Dense row-major f64 tensors and the parameter snapshot container.
//!
//! A [`Tensor`] is a plain value. Gradient bookkeeping (the `requires_grad`
//! flag and the gradient accumulator) lives on the nodes of an
//! [`autodiff::Graph`](crate::autodiff::Graph), which wraps tensors while a
//! differentiable computation is being recorded.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents cover `data` exactly and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor", format!("non-finite value {v}")));
        }
        Ok(Self { shape, data })
    }

    /// Same as [`Tensor::new`] without the finiteness scan; callers guarantee
    /// the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Row-major 2-D tensor from a slice of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = self.shape.get(1).copied().unwrap_or(1).max(1);
        self.data.chunks(cols)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

const SNAPSHOT_MAGIC: [u8; 4] = *b"TTAW";
const SNAPSHOT_VERSION: u32 = 1;

/// Writes named tensors in the little-endian `TTAW` container.
pub fn write_snapshot<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Contract("too many tensors for snapshot".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Contract(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn snapshot_bytes(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, tensors).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_format(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a `TTAW` container written by [`write_snapshot`].
pub fn read_snapshot<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact_or_format(&mut r, &mut magic, "magic")?;
    if magic != SNAPSHOT_MAGIC {
        return Err(Error::BadMagic {
            expected: SNAPSHOT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_or_format(&mut r, &mut len, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or_format(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact_or_format(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let e = read_u64(&mut r, "extent")?;
            shape.push(usize::try_from(e).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents of {name} overflow")))?;
        let mut raw = vec![0u8; numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?];
        read_exact_or_format(&mut r, &mut raw, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_extents_and_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let tensors = vec![
            ("a".to_string(), Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, -0.0, 7.0]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let bytes = snapshot_bytes(&tensors);
        assert_eq!(&bytes[..4], b"TTAW");
        let back = read_snapshot(&bytes[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_snapshot_is_a_format_error() {
        let bytes = snapshot_bytes(&[("w".into(), Tensor::zeros(&[4]))]);
        for cut in [3, 9, 12, bytes.len() - 1] {
            assert!(matches!(read_snapshot(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_snapshot(&bad[..]), Err(Error::BadMagic { .. })));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(matches!(read_snapshot(&v2[..]), Err(Error::UnsupportedVersion(9))));
    }
}
