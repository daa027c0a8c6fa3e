//! `DCF1` feature shards.
//!
//! ```text
//! "DCF1"  u32 count
//! per record:
//!   u32 id_len, id (UTF-8)
//!   u32 H, u32 W, u32 d
//!   H·W·d f32, (h, w, channel) order
//!   u32 N, N bytes of labels ∈ {0, 1}
//! ```

use std::fs;
use std::path::Path;

use super::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::projectors::FeatureGrid;

pub const SHARD_MAGIC: &[u8; 4] = b"DCF1";

pub fn encode_shard(records: &[FeatureGrid]) -> Result<Vec<u8>> {
    if let Some(first) = records.first() {
        for (i, r) in records.iter().enumerate() {
            if r.channels != first.channels || r.labels.len() != first.labels.len() {
                return Err(Error::dim(format!(
                    "record {i} has d={} N={}, first record has d={} N={}",
                    r.channels,
                    r.labels.len(),
                    first.channels,
                    first.labels.len()
                )));
            }
            if r.values.len() != r.height * r.width * r.channels {
                return Err(Error::dim(format!("record {i} value count")));
            }
        }
    }
    let mut w = ByteWriter::default();
    w.bytes(SHARD_MAGIC);
    w.len_u32(records.len(), "record count")?;
    for r in records {
        w.str_u32(&r.image_id, "image id length")?;
        w.len_u32(r.height, "height")?;
        w.len_u32(r.width, "width")?;
        w.len_u32(r.channels, "channels")?;
        w.f32s(&r.values);
        w.len_u32(r.labels.len(), "label count")?;
        w.bytes(&r.labels);
    }
    Ok(w.buf)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    let mut r = ByteReader::new(bytes);
    r.magic(SHARD_MAGIC)?;
    let count = r.len_u32("record count")?;
    // Each record needs at least 20 bytes; reject absurd counts before allocating.
    if count > r.remaining() / 20 {
        return Err(r.error(format!(
            "record count {count} exceeds what {} bytes can hold",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut shape: Option<(usize, usize)> = None;
    for i in 0..count {
        r.record = Some(i);
        let id_len = r.len_u32("image id length")?;
        let image_id = r.utf8(id_len, "image id")?;
        let h = r.len_u32("height")?;
        let w = r.len_u32("width")?;
        let d = r.len_u32("channels")?;
        if h == 0 || w == 0 || d == 0 {
            return Err(r.error(format!("zero extent in {h}×{w}×{d}")));
        }
        let n_vals = r.product(&[h, w, d], "feature grid")?;
        let values = r.f32s(n_vals, "feature values")?;
        let n = r.len_u32("label count")?;
        let labels = r.take(n, "labels")?.to_vec();
        if let Some(pos) = labels.iter().position(|&l| l > 1) {
            return Err(r.error(format!("label {pos} is {}, expected 0 or 1", labels[pos])));
        }
        match shape {
            None => shape = Some((d, n)),
            Some((d0, n0)) if (d0, n0) != (d, n) => {
                return Err(r.error(format!(
                    "record declares d={d} N={n}, shard started with d={d0} N={n0}"
                )));
            }
            _ => {}
        }
        out.push(FeatureGrid {
            image_id,
            height: h,
            width: w,
            channels: d,
            values,
            labels,
        });
    }
    r.record = None;
    if !r.is_at_end() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn write_shard(records: &[FeatureGrid], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_shard(records)?)?;
    Ok(())
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<FeatureGrid>> {
    decode_shard(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<FeatureGrid> {
        vec![
            FeatureGrid::new(
                "a",
                1,
                2,
                3,
                vec![0.5, -1.0, 2.0, 3.0, f32::MIN_POSITIVE, -0.0],
                vec![1, 0],
            )
            .unwrap(),
            FeatureGrid::new("bé", 2, 1, 3, vec![1.0; 6], vec![0, 0]).unwrap(),
        ]
    }

    #[test]
    fn round_trip() {
        let recs = sample();
        let bytes = encode_shard(&recs).unwrap();
        let back = decode_shard(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.labels, b.labels);
            let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_shard(&back).unwrap(), bytes);
    }

    #[test]
    fn exact_layout() {
        let rec = FeatureGrid::new("x", 1, 1, 1, vec![1.0], vec![1]).unwrap();
        let bytes = encode_shard(&[rec]).unwrap();
        let mut expect = b"DCF1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(b'x');
        for v in [1u32, 1, 1] {
            expect.extend(v.to_le_bytes());
        }
        expect.extend(1.0f32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.push(1);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn empty_shard() {
        let bytes = encode_shard(&[]).unwrap();
        assert_eq!(bytes, b"DCF1\0\0\0\0");
        assert!(decode_shard(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = encode_shard(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_shard(cut) {
            Err(Error::Format { record, offset, .. }) => {
                assert_eq!(record, Some(1));
                assert!(offset > 8);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_shard(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_shard(&bytes),
            Err(Error::Format {
                offset: 0,
                record: None,
                ..
            })
        ));
    }

    #[test]
    fn bad_label_and_trailing_bytes() {
        let mut bytes = encode_shard(&sample()[..1]).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(decode_shard(&bytes), Err(Error::Format { .. })));
        let mut bytes = encode_shard(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_shard(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn mixed_widths_rejected() {
        let mut recs = sample();
        recs[1] = FeatureGrid::new("c", 1, 1, 2, vec![0.0; 2], vec![0, 1]).unwrap();
        assert!(encode_shard(&recs).is_err());
    }

    #[test]
    fn huge_count_rejected_without_allocation() {
        let mut bytes = b"DCF1".to_vec();
        bytes.extend(u32::MAX.to_le_bytes());
        assert!(matches!(decode_shard(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn overflowing_extents_rejected() {
        let mut bytes = b"DCF1".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(0u32.to_le_bytes());
        for v in [u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend(v.to_le_bytes());
        }
        bytes.extend([0u8; 16]);
        assert!(matches!(
            decode_shard(&bytes),
            Err(Error::Format {
                record: Some(0),
                ..
            })
        ));
    }
}
