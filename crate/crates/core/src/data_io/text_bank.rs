//! `DTB1` text banks.
//!
//! ```text
//! "DTB1"  u32 N  u32 d
//! N·d f32 positive rows, N·d f32 negative rows
//! u32 json_len, JSON {"class_names": [...], "prompt_templates": {...}}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ByteReader, ByteWriter};
use crate::diffmath::DenseArray;
use crate::error::Result;
use crate::projectors::{PromptTemplates, TextBank};

pub const TEXT_BANK_MAGIC: &[u8; 4] = b"DTB1";

#[derive(Serialize, Deserialize)]
struct Trailer {
    class_names: Vec<String>,
    prompt_templates: PromptTemplates,
}

pub fn encode_text_bank(bank: &TextBank) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(TEXT_BANK_MAGIC);
    w.len_u32(bank.n_classes(), "class count")?;
    w.len_u32(bank.dim(), "feature width")?;
    w.f32s(bank.positive.values());
    w.f32s(bank.negative.values());
    let trailer = serde_json::to_string(&Trailer {
        class_names: bank.class_names.clone(),
        prompt_templates: bank.prompt_templates.clone(),
    })?;
    w.str_u32(&trailer, "trailer length")?;
    Ok(w.buf)
}

pub fn decode_text_bank(bytes: &[u8]) -> Result<TextBank> {
    let mut r = ByteReader::new(bytes);
    r.magic(TEXT_BANK_MAGIC)?;
    let n = r.len_u32("class count")?;
    let d = r.len_u32("feature width")?;
    let count = r.product(&[n, d], "text rows")?;
    let positive = r.f32s(count, "positive rows")?;
    let negative = r.f32s(count, "negative rows")?;
    let json_len = r.len_u32("trailer length")?;
    let trailer_at = r.offset();
    let json = r.utf8(json_len, "trailer")?;
    let trailer: Trailer = serde_json::from_str(&json)
        .map_err(|e| crate::Error::format(trailer_at, None, format!("trailer JSON: {e}")))?;
    if trailer.class_names.len() != n {
        return Err(crate::Error::format(
            trailer_at,
            None,
            format!(
                "trailer lists {} classes, header declares {n}",
                trailer.class_names.len()
            ),
        ));
    }
    if !r.is_at_end() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    if positive.iter().chain(&negative).any(|v| !v.is_finite()) {
        return Err(crate::Error::format(12, None, "non-finite text feature"));
    }
    TextBank::new(
        trailer.class_names,
        DenseArray::new(vec![n, d], positive)?,
        DenseArray::new(vec![n, d], negative)?,
        trailer.prompt_templates,
    )
}

pub fn write_text_bank(bank: &TextBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_text_bank(bank)?)?;
    Ok(())
}

pub fn read_text_bank(path: impl AsRef<Path>) -> Result<TextBank> {
    decode_text_bank(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn bank() -> TextBank {
        TextBank::new(
            vec!["cat".into(), "dog".into()],
            DenseArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            DenseArray::new(vec![2, 3], vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.5]).unwrap(),
            PromptTemplates::default(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let b = bank();
        let bytes = encode_text_bank(&b).unwrap();
        assert_eq!(&bytes[..4], b"DTB1");
        let back = decode_text_bank(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode_text_bank(&back).unwrap(), bytes);
    }

    #[test]
    fn trailer_count_mismatch() {
        let b = bank();
        let mut bytes = encode_text_bank(&b).unwrap();
        // Header claims 2 classes; rewrite the trailer with one name.
        let json_at = 12 + 2 * 2 * 3 * 4;
        bytes.truncate(json_at);
        let json = r#"{"class_names":["cat"],"prompt_templates":{"positive":"p","negative":"n"}}"#;
        bytes.extend((json.len() as u32).to_le_bytes());
        bytes.extend(json.as_bytes());
        assert!(matches!(
            decode_text_bank(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_rows() {
        let bytes = encode_text_bank(&bank()).unwrap();
        assert!(matches!(
            decode_text_bank(&bytes[..30]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_text_bank(&bank()).unwrap();
        bytes[3] = b'2';
        assert!(matches!(
            decode_text_bank(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
