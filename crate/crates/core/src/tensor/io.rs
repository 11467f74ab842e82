//! `.tns` container: `TNSR`, version byte, u32-LE rank, u32-LE extents,
//! dtype byte (1 = f32, 2 = f64), row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

pub fn write_tns_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let width = if T::DTYPE == 1 { 4 } else { 8 };
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE);
    for &x in t.data() {
        if T::DTYPE == 1 {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
    out
}

pub fn read_tns_bytes<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let mut cur = bytes;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        if cur.len() < n {
            return Err("truncated tensor container".into());
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = take(1)?[0];
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    if shape.contains(&0) {
        return Err(format!("zero extent in {shape:?}"));
    }
    let dtype = take(1)?[0];
    let n = numel(&shape);
    let data: Vec<T> = match dtype {
        1 => take(4 * n)?
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        2 => take(8 * n)?
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => return Err(format!("unknown dtype code {other}")),
    };
    if !cur.is_empty() {
        return Err(format!("{} trailing bytes", cur.len()));
    }
    Ok(Tensor::raw(shape, data))
}

pub fn write_tns<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_tns_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tns<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tns_bytes(&bytes).map_err(|d| Error::data(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = write_tns_bytes(&t);
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(b[17], 1);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 26);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tns_bytes::<f32>(b"TNSX").is_err());
        let t = Tensor::<f32>::ones(&[3]);
        let mut b = write_tns_bytes(&t);
        b.pop();
        assert!(read_tns_bytes::<f32>(&b).is_err());
        b.push(0);
        b.push(0);
        assert!(read_tns_bytes::<f32>(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(&shape, 3.0, &mut rng);
            let back: Tensor<f32> = read_tns_bytes(&write_tns_bytes(&t)).unwrap();
            prop_assert!(t.bit_eq(&back));
        }
    }
}
