//! `.dtf` binary tensor files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"DTF1" | order: u32 | extents: order x u64 | values: prod(extents) x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"DTF1";

pub fn encode(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.order() + 8 * t.len());
    write_to(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn write_to<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.order() as u32).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let order = u32::from_le_bytes(b4) as usize;
    if order == 0 || order > 64 {
        return Err(Error::Format(format!("implausible tensor order {order}")));
    }
    let mut shape = Vec::with_capacity(order);
    let mut b8 = [0u8; 8];
    for _ in 0..order {
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        shape.push(usize::try_from(n).map_err(|_| Error::Format("extent overflows usize".into()))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut bytes = vec![
        0u8;
        len.checked_mul(8)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?
    ];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    DenseTensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<DenseTensor> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            cursor.len()
        )));
    }
    Ok(t)
}

pub fn write_file(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<DenseTensor> {
    decode(&fs::read(path)?)
}
