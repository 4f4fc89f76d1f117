//! Bit-exact feature file: `"PM3F"`, version u32, M u32, d u32, then `M·d`
//! little-endian f32 values row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"PM3F";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(rows: &Tensor) -> Vec<u8> {
    let (m, d) = rows.dims2();
    let mut out = Vec::with_capacity(HEADER_LEN + m * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in rows.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::DimMismatch(format!("truncated header in {}", origin.display())));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (m, d) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[HEADER_LEN..];
    if m == 0 || d == 0 || payload.len() != m * d * 4 {
        return Err(Error::DimMismatch(format!(
            "{}: header says {m}x{d}, payload has {} bytes",
            origin.display(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::matrix(m, d, data)
}

pub fn write_feature_file(rows: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_features(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn single_zero_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pm3f");
        let t = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        write_feature_file(&t, &p).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.shape(), &[1, 1]);
        assert_eq!(back.data()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn random_100x32_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/r.pm3f");
        let t = Tensor::randn(vec![100, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        write_feature_file(&t, &p).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_features(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes, Path::new("f")), Err(Error::BadMagic(_))));
    }

    #[test]
    fn header_payload_mismatch() {
        let mut bytes = encode_features(&Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_features(&bytes, Path::new("f")), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_feature_file(Path::new("/nonexistent/x.pm3f")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_bit_exact(m in 1usize..20, d in 1usize..10, seed in any::<u64>()) {
            let t = Tensor::randn(vec![m, d], 10.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let back = decode_features(&encode_features(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
