//! The processed dataset archive: one JSON document holding vocabularies,
//! sequences, and split indices under the `mobllm-ds/1` format tag. All
//! contained collections are ordered, so serialization is byte-deterministic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::types::{CheckinSequence, DatasetSplit, Vocabulary};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "mobllm-ds/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetArchive {
    pub format: String,
    pub vocab: Vocabulary,
    pub sequences: Vec<CheckinSequence>,
    pub split: DatasetSplit,
}

impl DatasetArchive {
    pub fn new(vocab: Vocabulary, sequences: Vec<CheckinSequence>, split: DatasetSplit) -> Self {
        Self { format: FORMAT_TAG.to_string(), vocab, sequences, split }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let archive: DatasetArchive = serde_json::from_slice(&bytes)?;
        if archive.format != FORMAT_TAG {
            return Err(Error::Data(format!(
                "unsupported dataset format {:?}, expected {FORMAT_TAG:?}",
                archive.format
            )));
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::split_dataset;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn round_trips_and_is_byte_deterministic() {
        let (seqs, vocab) = generate_synthetic(&SyntheticSpec::new(5, 20, 30, 1)).unwrap();
        let split = split_dataset(seqs.len(), 1, (6, 2, 2)).unwrap();
        let archive = DatasetArchive::new(vocab, seqs, split);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        archive.save(&path).unwrap();
        let loaded = DatasetArchive::load(&path).unwrap();
        assert_eq!(archive, loaded);
        assert_eq!(archive.to_bytes().unwrap(), loaded.to_bytes().unwrap());
    }

    #[test]
    fn rejects_wrong_format_tag() {
        let (seqs, vocab) = generate_synthetic(&SyntheticSpec::new(5, 20, 30, 1)).unwrap();
        let split = split_dataset(seqs.len(), 1, (6, 2, 2)).unwrap();
        let mut archive = DatasetArchive::new(vocab, seqs, split);
        archive.format = "mobllm-ds/999".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        archive.save(&path).unwrap();
        assert!(matches!(DatasetArchive::load(&path), Err(Error::Data(_))));
    }
}
