//! TSR1 tensor container.
//!
//! Layout: magic `TSR1`, one byte dtype code (0 = f32, 1 = f64), one byte
//! rank, `rank` little-endian `u32` extents, then the row-major payload in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{DType, Float, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"TSR1";

pub fn encode<T: Float>(tensor: &Tensor<T>) -> Result<Vec<u8>> {
    if tensor.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} does not fit in a byte", tensor.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * tensor.rank() + tensor.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn write<T: Float>(mut w: impl Write, tensor: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(tensor)?)?;
    Ok(())
}

/// Read one tensor, converting the stored element type to `T`.
pub fn read<T: Float>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * dtype.size()];
    r.read_exact(&mut payload)?;
    let data = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    read(bytes)
}

pub fn save<T: Float>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"TSR1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"TSR2\x00\x00").is_err());
        let mut b = encode(&Tensor::<f64>::ones(vec![3])).unwrap();
        b.pop();
        assert!(decode::<f64>(&b).is_err());
    }

    #[test]
    fn f32_file_reads_as_f64() {
        let t = Tensor::<f32>::from_vec(vec![0.5, 0.25]);
        let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.5, 0.25]);
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let t = Tensor::<f64>::from_fn(shape, |i| ((i as u64 ^ seed) as f64).sin());
            let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
