//! Binary interchange formats shared with the feature extractor, dataset
//! manifests, and a synthetic entangled-feature generator.
//!
//! All integers and floats are little-endian.

mod bytes;
mod manifest;
mod shard;
mod synthetic;
mod text_bank;

pub(crate) use bytes::{ByteReader, ByteWriter};
pub use manifest::DatasetManifest;
pub use shard::{decode_shard, encode_shard, read_shard, write_shard, SHARD_MAGIC};
pub use synthetic::{
    entangled_similarity, generate_synthetic, rho_for_similarity, PlantedCell, SyntheticData,
    SyntheticSpec,
};
pub use text_bank::{
    decode_text_bank, encode_text_bank, read_text_bank, write_text_bank, TEXT_BANK_MAGIC,
};
