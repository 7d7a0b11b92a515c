//! Versioned little-endian parameter checkpoints.
//!
//! Layout: `"BOODCKPT"`, version `u32`, layer count `u32`, `layer count + 1`
//! widths as `u32`, then for each layer its `out × in` row-major weights
//! followed by its biases, all `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use super::mlp::{Activation, Layer, Mlp, MlpParams, MlpSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BOODCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mlp: &Mlp, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let widths = &mlp.spec.widths;
    w.write_all(&((widths.len() - 1) as u32).to_le_bytes())?;
    for &width in widths {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    for v in mlp.params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// The activation is not stored in the file and must be supplied.
pub fn read_checkpoint<R: Read>(mut r: R, activation: Activation) -> Result<Mlp> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a BOODCKPT checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let layers = read_u32(&mut r)? as usize;
    if layers == 0 || layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let widths = (0..=layers)
        .map(|_| read_u32(&mut r).map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths, activation)?;
    let mut params = Vec::with_capacity(layers);
    for w in spec.widths.windows(2) {
        let weights = (0..w[0] * w[1]).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let bias = (0..w[1]).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        params.push(Layer {
            weight: Matrix::from_vec(w[1], w[0], weights)?,
            bias,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Mlp::new(spec, MlpParams { layers: params })
}

pub fn save(mlp: &Mlp, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(mlp, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path, activation: Activation) -> Result<Mlp> {
    read_checkpoint(fs::File::open(path)?, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::new(vec![4, 7, 3], Activation::Relu).unwrap();
        let mlp = Mlp::init(spec, &mut seeded(11)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mlp, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 8 + 4 + 4 + 3 * 4 + 8 * mlp.params.num_params());
        let back = read_checkpoint(buf.as_slice(), Activation::Relu).unwrap();
        assert_eq!(back, mlp);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Tanh).unwrap();
        let mlp = Mlp::init(spec, &mut seeded(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mlp, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice(), Activation::Tanh), Err(Error::Format(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 3], Activation::Tanh).is_err());
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice(), Activation::Tanh).is_err());
    }
}
