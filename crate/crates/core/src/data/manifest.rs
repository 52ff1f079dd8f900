//! Manifest persistence: a `vocabulary.json` header next to JSON-Lines
//! sample files (`train.jsonl` / `val.jsonl` / `test.jsonl`), one sample
//! object per line.

use super::{AnnotatedSample, AttributeVocabulary, DatasetManifest, Split};
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const VOCABULARY_FILE: &str = "vocabulary.json";

pub fn split_file_name(split: Split) -> String {
    format!("{split}.jsonl")
}

pub fn load_vocabulary(path: &Path) -> Result<AttributeVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: AttributeVocabulary = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    vocab.validate()?;
    Ok(vocab)
}

pub fn save_vocabulary(vocab: &AttributeVocabulary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab).expect("vocabulary serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load one split's manifest. The vocabulary header is read from
/// `vocabulary.json` in the same directory; image paths stay relative to it.
pub fn load_manifest(jsonl_path: &Path, split: Split) -> Result<DatasetManifest> {
    let base_dir = jsonl_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let vocabulary = load_vocabulary(&base_dir.join(VOCABULARY_FILE))?;
    let text = fs::read_to_string(jsonl_path).map_err(|e| Error::io(jsonl_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: AnnotatedSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: jsonl_path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    let manifest = DatasetManifest {
        vocabulary,
        samples,
        split,
        base_dir,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest_lines(samples: &[AnnotatedSample], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// The three splits of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl DatasetSplits {
    pub fn total_samples(&self) -> usize {
        self.train.samples.len() + self.val.samples.len() + self.test.samples.len()
    }
}

/// Load `train.jsonl`, `val.jsonl` and `test.jsonl` from a dataset directory.
pub fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: load_manifest(&dir.join(split_file_name(Split::Train)), Split::Train)?,
        val: load_manifest(&dir.join(split_file_name(Split::Val)), Split::Val)?,
        test: load_manifest(&dir.join(split_file_name(Split::Test)), Split::Test)?,
    })
}
