//! Binary checkpoint format.
//!
//! Layout: magic `DATK`, format version `u16` LE, then one record per entry —
//! name length `u16` LE, name bytes, rank `u8`, dims as `u32` LE each, and the
//! payload as 32-bit little-endian IEEE-754 values — closed by a CRC-32 of
//! every preceding byte. Momentum buffers ride along as separate records named
//! `<name>#velocity`; whether an entry is trainable is recovered from its name
//! (running statistics are not).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 4] = b"DATK";
const VERSION: u16 = 1;
const VELOCITY_SUFFIX: &str = "#velocity";

fn is_trainable_name(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::contract(format!("parameter name too long: {name:?}")));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::contract(format!("rank {} too large", shape.len())));
    }
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(Error::contract(format!("dimension {d} exceeds u32")));
        }
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serialize a parameter set (values at 32-bit precision, including both
/// batch-norm banks and any momentum buffers).
pub fn encode_checkpoint(params: &ParameterSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, param) in params.iter() {
        if name.contains(VELOCITY_SUFFIX) {
            return Err(Error::contract(format!(
                "parameter name {name:?} collides with the velocity suffix"
            )));
        }
        push_record(&mut buf, name, param.value.shape(), param.value.data())?;
        if let Some(vel) = &param.velocity {
            push_record(
                &mut buf,
                &format!("{name}{VELOCITY_SUFFIX}"),
                param.value.shape(),
                vel,
            )?;
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parse checkpoint bytes, verifying magic, version, and checksum before any
/// state is returned.
pub fn decode_checkpoint(data: &[u8], path: &Path) -> Result<ParameterSet> {
    if data.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::format(path, "file too short for header and checksum"));
    }
    let (body, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::format(
            path,
            format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        ));
    }
    let mut r = Reader {
        data: body,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }

    let mut params = ParameterSet::new();
    let mut velocities: Vec<(String, Vec<f64>)> = Vec::new();
    while r.pos < body.len() {
        let name_len =
            u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(path, "parameter name is not valid utf-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(r.take(4, "dimension")?.try_into().expect("4 bytes"));
            shape.push(d as usize);
        }
        let count: usize = shape.iter().product();
        let payload = r.take(count * 4, "payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(base) = name.strip_suffix(VELOCITY_SUFFIX) {
            velocities.push((base.to_string(), values));
        } else {
            let trainable = is_trainable_name(&name);
            params.insert(&name, Tensor::new(shape, values)?, trainable)?;
        }
    }
    for (base, vel) in velocities {
        let param = params.get_mut(&base).map_err(|_| {
            Error::format(path, format!("velocity record for unknown parameter {base:?}"))
        })?;
        if vel.len() != param.value.len() {
            return Err(Error::format(
                path,
                format!("velocity length mismatch for {base:?}"),
            ));
        }
        param.velocity = Some(vel);
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let data = fs::read(path)?;
    decode_checkpoint(&data, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SmallConvNet;

    fn round_trip(params: &ParameterSet) -> ParameterSet {
        let bytes = encode_checkpoint(params).unwrap();
        decode_checkpoint(&bytes, Path::new("test.ckpt")).unwrap()
    }

    /// f32-quantized copy, as saving rounds values to 32-bit.
    fn quantized(params: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, p) in params.iter() {
            let data: Vec<f64> = p.value.data().iter().map(|&v| v as f32 as f64).collect();
            out.insert(name, Tensor::new(p.value.shape().to_vec(), data).unwrap(), p.trainable)
                .unwrap();
            if let Some(vel) = &p.velocity {
                out.get_mut(name).unwrap().velocity =
                    Some(vel.iter().map(|&v| v as f32 as f64).collect());
            }
        }
        out
    }

    #[test]
    fn fresh_net_round_trips_bit_exactly() {
        let net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let loaded = round_trip(&net.params);
        assert!(quantized(&net.params).bitwise_eq(&loaded));
        // both BN banks present
        assert!(loaded.contains("bn1.a.running_mean"));
        assert!(loaded.contains("bn1.b.running_mean"));
        assert!(!loaded.get("bn1.b.running_var").unwrap().trainable);
        assert!(loaded.get("conv1.weight").unwrap().trainable);
    }

    #[test]
    fn velocity_buffers_survive() {
        let mut params = ParameterSet::new();
        params
            .insert("w", Tensor::new(vec![2], vec![1.5, -0.25]).unwrap(), true)
            .unwrap();
        params.get_mut("w").unwrap().velocity = Some(vec![0.125, -2.0]);
        let loaded = round_trip(&params);
        assert_eq!(loaded.get("w").unwrap().velocity.as_deref(), Some(&[0.125, -2.0][..]));
        // second save is byte-identical (load∘save is a fixed point)
        let b1 = encode_checkpoint(&params).unwrap();
        let b2 = encode_checkpoint(&loaded).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn known_payload_bytes() {
        // single [2,2] parameter with values {1.0, 0.5, -0.25, 0.0}
        let mut params = ParameterSet::new();
        params
            .insert(
                "p",
                Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.25, 0.0]).unwrap(),
                true,
            )
            .unwrap();
        let bytes = encode_checkpoint(&params).unwrap();
        assert_eq!(&bytes[0..4], b"DATK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        // record: name_len=1, name="p", rank=2, dims 2,2
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(bytes[8], b'p');
        assert_eq!(bytes[9], 2);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 2);
        let payload = &bytes[18..18 + 16];
        let expect: Vec<u8> = [1.0f32, 0.5, -0.25, 0.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(payload, expect.as_slice());
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let net = SmallConvNet::init(1, 8, 8, 3, 0).unwrap();
        let bytes = encode_checkpoint(&net.params).unwrap();

        let truncated = &bytes[..bytes.len() - 9];
        let err = decode_checkpoint(truncated, Path::new("t.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut corrupted = bytes.clone();
        corrupted[40] ^= 0xff;
        let err = decode_checkpoint(&corrupted, Path::new("c.ckpt")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("checksum"), "{msg}");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        // checksum catches it first unless we re-seal; re-seal to hit the magic check
        let body_len = bad_magic.len() - 4;
        let crc = crc32fast::hash(&bad_magic[..body_len]);
        bad_magic[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_checkpoint(&bad_magic, Path::new("m.ckpt")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("magic"), "{msg}");
    }
}
