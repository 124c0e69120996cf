//! On-disk formats: feature/embedding files, annotation JSONL, dataset dirs.

pub mod annotations;
pub mod synthetic;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{ConceptVocabulary, PosLexicon, RoleDictionary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use annotations::{load_annotations, save_annotations};
pub use synthetic::{generate_synthetic, SyntheticSpec};

const MAGIC: &[u8; 4] = b"HANF";
const VERSION: u32 = 1;

/// Standard file names inside a dataset directory.
pub const TRAIN_FEATURES: &str = "train_features.hanf";
pub const VAL_FEATURES: &str = "val_features.hanf";
pub const EMBEDDINGS: &str = "embeddings.hanf";
pub const TRAIN_ANNOTATIONS: &str = "annotations_train.jsonl";
pub const VAL_ANNOTATIONS: &str = "annotations_val.jsonl";
pub const VOCAB: &str = "vocab.tsv";
pub const ROLES: &str = "roles.tsv";
pub const POS_LEXICON: &str = "pos_lexicon.tsv";

/// Ordered collection of per-id float matrices sharing one column width.
/// Carries video frame features (one row per frame) and word-embedding
/// tables (one row per word) alike.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    matrices: Vec<Tensor>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        FeatureSet { dim, ids: Vec::new(), index: HashMap::new(), matrices: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: &str, matrix: Tensor) -> Result<()> {
        let (_, cols) = matrix.dims2()?;
        if cols != self.dim {
            return Err(Error::data(format!(
                "feature matrix for {id:?} has {cols} columns, file dim is {}",
                self.dim
            )));
        }
        if self.index.contains_key(id) {
            return Err(Error::data(format!("duplicate feature id {id:?}")));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.matrices.push(matrix);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.index.get(id).map(|&i| &self.matrices[i])
    }

    pub fn get_required(&self, id: &str) -> Result<&Tensor> {
        self.get(id)
            .ok_or_else(|| Error::data(format!("unknown feature id {id:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.ids.iter().map(|id| (id.as_str(), &self.matrices[self.index[id]]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, matrix) in self.iter() {
            let bytes = id.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let (rows, _) = matrix.dims2()?;
            w.write_all(&(rows as u32).to_le_bytes())?;
            for &v in &matrix.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(format!("bad feature-file magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported feature-file version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::data("feature-file dim must be positive".to_string()));
        }
        let mut set = FeatureSet::new(dim);
        for _ in 0..count {
            let id_len = read_u32(&mut r)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            read_exact(&mut r, &mut id_bytes)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| Error::data("feature id is not UTF-8".to_string()))?;
            let rows = read_u32(&mut r)? as usize;
            if rows == 0 {
                return Err(Error::data(format!("feature id {id:?} has zero frames")));
            }
            let mut values = vec![0.0f32; rows * dim];
            for v in values.iter_mut() {
                let mut buf = [0u8; 4];
                read_exact(&mut r, &mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            set.insert(&id, Tensor::matrix(rows, dim, values)?)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::data("trailing bytes after feature payload".to_string()));
        }
        Ok(set)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::data("truncated feature payload".to_string())
        } else {
            Error::Io(e)
        }
    })
}

/// Everything a training or evaluation run reads from a dataset directory.
pub struct LoadedDataset {
    pub train_features: FeatureSet,
    pub val_features: FeatureSet,
    pub embeddings: FeatureSet,
    pub train_annotations: Vec<crate::corpus::CaptionAnnotation>,
    pub val_annotations: Vec<crate::corpus::CaptionAnnotation>,
    pub vocab: ConceptVocabulary,
    pub roles: RoleDictionary,
    pub lexicon: Option<PosLexicon>,
}

pub fn load_dataset_dir(dir: &Path, lenient: bool) -> Result<LoadedDataset> {
    let train_features = FeatureSet::load(&dir.join(TRAIN_FEATURES))?;
    let val_features = FeatureSet::load(&dir.join(VAL_FEATURES))?;
    let embeddings = FeatureSet::load(&dir.join(EMBEDDINGS))?;
    let (train_annotations, warnings) = load_annotations(&dir.join(TRAIN_ANNOTATIONS), lenient)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let (val_annotations, warnings) = load_annotations(&dir.join(VAL_ANNOTATIONS), lenient)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let vocab = ConceptVocabulary::load_tsv(&dir.join(VOCAB))?;
    let roles = RoleDictionary::load(&dir.join(ROLES))?;
    let lexicon_path = dir.join(POS_LEXICON);
    let lexicon = if lexicon_path.exists() {
        Some(PosLexicon::load(&lexicon_path)?)
    } else {
        None
    };
    for ann in train_annotations.iter().chain(&val_annotations) {
        if train_features.get(&ann.video_id).is_none() && val_features.get(&ann.video_id).is_none() {
            return Err(Error::data(format!(
                "caption {} references unknown video {:?}",
                ann.caption_id, ann.video_id
            )));
        }
    }
    Ok(LoadedDataset {
        train_features,
        val_features,
        embeddings,
        train_annotations,
        val_annotations,
        vocab,
        roles,
        lexicon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_file_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hanf");
        let mut set = FeatureSet::new(3);
        set.insert("vid0", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        set.save(&path).unwrap();

        let loaded = FeatureSet::load(&path).unwrap();
        assert_eq!(loaded.get("vid0").unwrap().values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let path2 = dir.path().join("g.hanf");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hanf");
        let mut set = FeatureSet::new(2);
        set.insert("v", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        set.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = FeatureSet::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_duplicate_id_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hanf");
        std::fs::write(&path, b"XXXX0000").unwrap();
        let err = FeatureSet::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut set = FeatureSet::new(2);
        set.insert("v", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let err = set
            .insert("v", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let mut set = FeatureSet::new(4);
        let err = set
            .insert("v", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("columns"), "{err}");
    }
}
