use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_shard, read_text_bank};
use crate::error::{Error, Result};
use crate::projectors::{FeatureGrid, PromptTemplates, TextBank};

/// JSON description of one dataset split. Shard paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub d: usize,
    pub split: String,
    pub shard_paths: Vec<PathBuf>,
    pub prompt_templates: PromptTemplates,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        d: usize,
        split: impl Into<String>,
        shard_paths: Vec<PathBuf>,
        prompt_templates: PromptTemplates,
    ) -> Self {
        Self {
            name: name.into(),
            class_names,
            d,
            split: split.into(),
            shard_paths,
            prompt_templates,
            base_dir: PathBuf::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn resolved_shards(&self) -> Vec<PathBuf> {
        self.shard_paths
            .iter()
            .map(|p| {
                if p.is_absolute() {
                    p.clone()
                } else {
                    self.base_dir.join(p)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::Config(format!(
                "manifest {:?} needs at least 2 classes",
                self.name
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("manifest d must be positive".into()));
        }
        for p in self.resolved_shards() {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "shard {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Reads every shard, checking each record against the declared `d` and `N`.
    pub fn load_records(&self) -> Result<Vec<FeatureGrid>> {
        let mut out = Vec::new();
        for p in self.resolved_shards() {
            for (i, rec) in read_shard(&p)?.into_iter().enumerate() {
                if rec.channels != self.d || rec.labels.len() != self.n_classes() {
                    return Err(Error::dim(format!(
                        "{} record {i}: d={} N={}, manifest declares d={} N={}",
                        p.display(),
                        rec.channels,
                        rec.labels.len(),
                        self.d,
                        self.n_classes()
                    )));
                }
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Reads a text bank and checks it against this manifest.
    pub fn load_text_bank(&self, path: impl AsRef<Path>) -> Result<TextBank> {
        let bank = read_text_bank(path)?;
        self.check_text_bank(&bank)?;
        Ok(bank)
    }

    pub fn check_text_bank(&self, bank: &TextBank) -> Result<()> {
        if bank.dim() != self.d {
            return Err(Error::dim(format!(
                "text bank width {} but manifest declares d={}",
                bank.dim(),
                self.d
            )));
        }
        if bank.class_names != self.class_names {
            return Err(Error::dim("text bank classes differ from the manifest"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{write_shard, write_text_bank};
    use crate::diffmath::DenseArray;

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn load_resolves_relative_shards() {
        let dir = tempfile::tempdir().unwrap();
        let rec = FeatureGrid::new("r", 1, 1, 3, vec![1.0, 2.0, 3.0], vec![1, 0]).unwrap();
        write_shard(std::slice::from_ref(&rec), dir.path().join("s.dcf")).unwrap();
        let m = DatasetManifest::new(
            "toy",
            names(),
            3,
            "train",
            vec!["s.dcf".into()],
            PromptTemplates::default(),
        );
        m.save(dir.path().join("m.json")).unwrap();
        let back = DatasetManifest::load(dir.path().join("m.json")).unwrap();
        assert_eq!(back.load_records().unwrap(), vec![rec]);
    }

    #[test]
    fn missing_shard_and_too_few_classes() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            "toy",
            names(),
            3,
            "train",
            vec!["nope.dcf".into()],
            PromptTemplates::default(),
        );
        m.save(dir.path().join("m.json")).unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.path().join("m.json")),
            Err(Error::Config(_))
        ));
        let m = DatasetManifest::new(
            "toy",
            vec!["a".into()],
            3,
            "train",
            vec![],
            PromptTemplates::default(),
        );
        assert!(m.validate().is_err());
    }

    #[test]
    fn record_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let rec = FeatureGrid::new("r", 1, 1, 2, vec![1.0, 2.0], vec![1, 0]).unwrap();
        write_shard(&[rec], dir.path().join("s.dcf")).unwrap();
        let m = DatasetManifest::new(
            "toy",
            names(),
            3,
            "train",
            vec!["s.dcf".into()],
            PromptTemplates::default(),
        );
        m.save(dir.path().join("m.json")).unwrap();
        let m = DatasetManifest::load(dir.path().join("m.json")).unwrap();
        assert!(matches!(m.load_records(), Err(Error::Dimension(_))));
    }

    #[test]
    fn text_bank_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let bank = TextBank::new(
            names(),
            DenseArray::new(vec![2, 4], vec![1.0; 8]).unwrap(),
            DenseArray::new(vec![2, 4], vec![1.0; 8]).unwrap(),
            PromptTemplates::default(),
        )
        .unwrap();
        write_text_bank(&bank, dir.path().join("t.dtb")).unwrap();
        let m = DatasetManifest::new(
            "toy",
            names(),
            3,
            "train",
            vec![],
            PromptTemplates::default(),
        );
        assert!(matches!(
            m.load_text_bank(dir.path().join("t.dtb")),
            Err(Error::Dimension(_))
        ));
    }
}
