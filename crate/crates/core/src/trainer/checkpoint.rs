//! `DCKP` checkpoints.
//!
//! ```text
//! "DCKP"  u16 version (= 1)
//! repeated until end of file:
//!   u32 name_len, name (UTF-8), u32 rank, rank × u32 extents, f32 values
//! ```
//!
//! Linear weights are stored `[in, out]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data_io::{ByteReader, ByteWriter};
use crate::diffmath::{BatchNormState, DenseArray};
use crate::error::{Error, Result};
use crate::projectors::{Linear, ProjectorParams, TRAINABLE_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

const RUNNING_MEAN: &str = "text.bn.running_mean";
const RUNNING_VAR: &str = "text.bn.running_var";

pub fn encode_checkpoint(params: &ProjectorParams) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    let h = params.hidden();
    let running = [
        (RUNNING_MEAN, &params.text_bn.running_mean),
        (RUNNING_VAR, &params.text_bn.running_var),
    ];
    let trainable = params.trainable();
    let tensors = TRAINABLE_NAMES
        .iter()
        .zip(trainable.iter().map(|t| (t.shape().to_vec(), t.values())))
        .map(|(n, (s, v))| (*n, s, v))
        .chain(running.iter().map(|(n, v)| (*n, vec![h], v.as_slice())));
    for (name, shape, values) in tensors {
        w.str_u32(name, "tensor name length")?;
        w.len_u32(shape.len(), "rank")?;
        for e in &shape {
            w.len_u32(*e, "extent")?;
        }
        w.f32s(values);
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProjectorParams> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut tensors: BTreeMap<String, DenseArray> = BTreeMap::new();
    let mut index = 0;
    while !r.is_at_end() {
        r.record = Some(index);
        let name_len = r.len_u32("tensor name length")?;
        let name = r.utf8(name_len, "tensor name")?;
        let known =
            TRAINABLE_NAMES.contains(&name.as_str()) || name == RUNNING_MEAN || name == RUNNING_VAR;
        if !known {
            return Err(r.error(format!("unknown tensor {name:?}")));
        }
        let rank = r.len_u32("rank")?;
        if rank == 0 || rank > 2 {
            return Err(r.error(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.len_u32("extent"))
            .collect::<Result<Vec<_>>>()?;
        let count = r.product(&shape, "tensor")?;
        let values = r.f32s(count, "tensor values")?;
        if tensors
            .insert(name.clone(), DenseArray::new(shape, values)?)
            .is_some()
        {
            return Err(r.error(format!("tensor {name} appears twice")));
        }
        index += 1;
    }
    let at_end = r.offset();
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::format(at_end, None, format!("missing tensor {name}")))
    };
    let linear = |w: DenseArray, b: DenseArray| -> Result<Linear> {
        let (_, out) = w.dims2()?;
        if b.shape() != [out] {
            return Err(Error::dim(format!(
                "bias {:?} for weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
        Ok(Linear { weight: w, bias: b })
    };
    let image = linear(take("image.weight")?, take("image.bias")?)?;
    let fc1 = linear(take("text.fc1.weight")?, take("text.fc1.bias")?)?;
    let gamma = take("text.bn.gamma")?;
    let beta = take("text.bn.beta")?;
    let fc2 = linear(take("text.fc2.weight")?, take("text.fc2.bias")?)?;
    let mean = take(RUNNING_MEAN)?;
    let var = take(RUNNING_VAR)?;
    let (d, h) = fc1.weight.dims2()?;
    let (h2, dp) = fc2.weight.dims2()?;
    let hidden_ok = [&gamma, &beta, &mean, &var]
        .iter()
        .all(|t| t.shape() == [h]);
    if image.weight.shape() != [d, dp] || h2 != h || !hidden_ok {
        return Err(Error::dim("checkpoint tensor shapes are inconsistent"));
    }
    let mut bn = BatchNormState::new(h);
    bn.gamma = gamma.into_values();
    bn.beta = beta.into_values();
    bn.running_mean = mean.into_values();
    bn.running_var = var.into_values();
    Ok(ProjectorParams {
        image,
        text_fc1: fc1,
        text_bn: bn,
        text_fc2: fc2,
    })
}

pub fn save_checkpoint(params: &ProjectorParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProjectorParams> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projectors::init_projectors;

    fn params() -> ProjectorParams {
        let mut p = init_projectors(6, 5, 4, 3).unwrap();
        p.text_bn.running_mean[1] = 0.25;
        p.text_bn.running_var[2] = 3.5;
        p.text_bn.gamma[0] = -1.5;
        p
    }

    fn bits(p: &ProjectorParams) -> Vec<u32> {
        let t = p.trainable();
        t.iter()
            .flat_map(|a| a.values().to_vec())
            .chain(p.text_bn.running_mean.iter().copied())
            .chain(p.text_bn.running_var.iter().copied())
            .map(f32::to_bits)
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(bits(&back), bits(&p));
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&params()).unwrap();
        assert_eq!(&bytes[..6], b"DCKP\x01\x00");
        let name_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(&bytes[10..10 + name_len], b"image.weight");
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_checkpoint(&params()).unwrap();
        bytes[1] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn future_version() {
        let mut bytes = encode_checkpoint(&params()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncated() {
        let bytes = encode_checkpoint(&params()).unwrap();
        for cut in [5, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn missing_tensor() {
        let bytes = encode_checkpoint(&params()).unwrap();
        // The final tensor is the running variance: 4 + 20 + 4 + 4 + 5·4 bytes.
        let tail = 4 + RUNNING_VAR.len() + 4 + 4 + 5 * 4;
        let err = decode_checkpoint(&bytes[..bytes.len() - tail]).unwrap_err();
        assert!(err.to_string().contains(RUNNING_VAR), "{err}");
    }
}
