//! Parameter inventory for the full two-branch model.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::FeatureSet;
use crate::tensor::{Init, ParamStore, Tensor};

pub const OOV_TOKEN: &str = "<oov>";

/// Kernel width of the action concept head; entities use a pointwise conv.
pub const ACTION_KERNEL: usize = 5;
pub const ENTITY_KERNEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Incoming frame-feature width.
    pub video_dim: usize,
    /// Word-embedding width.
    pub word_dim: usize,
    /// Shared latent width for both branches.
    pub latent: usize,
    pub k_a: usize,
    pub k_e: usize,
    pub role_types: usize,
    /// Embedding-table rows including the shared OOV row.
    pub vocab_rows: usize,
}

/// Squeeze-excitation bottleneck: ratio 16, clamped to at least 4 and at
/// most the latent width.
pub fn se_bottleneck(latent: usize) -> usize {
    (latent.div_ceil(16)).max(4).min(latent)
}

/// Knows every parameter name plus the word->embedding-row map. The actual
/// tensors stay in a [`ParamStore`].
pub struct HanetModel {
    pub dims: ModelDims,
    word_rows: HashMap<String, usize>,
}

impl HanetModel {
    /// Create all parameters with seeded Glorot initialization. The word
    /// table is seeded from the embedding file (rows in file order) with a
    /// trailing learned OOV row.
    pub fn init(
        store: &mut ParamStore,
        cfg: &TrainConfig,
        video_dim: usize,
        embeddings: &FeatureSet,
        k_a: usize,
        k_e: usize,
    ) -> Result<Self> {
        let dims = ModelDims {
            video_dim,
            word_dim: embeddings.dim(),
            latent: cfg.latent_dim,
            k_a,
            k_e,
            role_types: cfg.role_types,
            vocab_rows: embeddings.len() + 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = dims.latent;
        let dr = se_bottleneck(d);

        for prefix in ["video.fc_a", "video.fc_e", "video.fc_g"] {
            store.create_init(&format!("{prefix}.w"), video_dim, d, Init::Glorot, &mut rng)?;
            store.create_init(&format!("{prefix}.b"), 1, d, Init::Zeros, &mut rng)?;
        }
        store.create_init("video.head_a.conv", ACTION_KERNEL * d, k_a, Init::Glorot, &mut rng)?;
        store.create_init("video.head_a.gamma", 1, k_a, Init::Ones, &mut rng)?;
        store.create_init("video.head_a.beta", 1, k_a, Init::Zeros, &mut rng)?;
        store.ensure_bn_stats("video.head_a", k_a)?;
        store.create_init("video.head_e.conv", ENTITY_KERNEL * d, k_e, Init::Glorot, &mut rng)?;
        store.create_init("video.head_e.gamma", 1, k_e, Init::Ones, &mut rng)?;
        store.create_init("video.head_e.beta", 1, k_e, Init::Zeros, &mut rng)?;
        store.ensure_bn_stats("video.head_e", k_e)?;
        for prefix in ["video.se_a", "video.se_e"] {
            store.create_init(&format!("{prefix}.w1"), d, dr, Init::Glorot, &mut rng)?;
            store.create_init(&format!("{prefix}.b1"), 1, dr, Init::Zeros, &mut rng)?;
            store.create_init(&format!("{prefix}.w2"), dr, d, Init::Glorot, &mut rng)?;
            store.create_init(&format!("{prefix}.b2"), 1, d, Init::Zeros, &mut rng)?;
        }
        store.create_init("video.attn.w", d, 1, Init::Glorot, &mut rng)?;

        let e = dims.word_dim;
        let mut table = Vec::with_capacity(dims.vocab_rows * e);
        let mut word_rows = HashMap::new();
        for (row, (word, vector)) in embeddings.iter().enumerate() {
            word_rows.insert(word.to_string(), row);
            table.extend_from_slice(&vector.values);
        }
        word_rows.insert(OOV_TOKEN.to_string(), embeddings.len());
        {
            // Glorot-scale random OOV row.
            let limit = (6.0 / (dims.vocab_rows + e) as f32).sqrt();
            use rand::Rng;
            table.extend((0..e).map(|_| rng.gen_range(-limit..limit)));
        }
        store.create("text.embed", Tensor::matrix(dims.vocab_rows, e, table)?)?;

        for dir in ["f", "b"] {
            for gate in ["z", "r", "n"] {
                store.create_init(&format!("text.gru.{dir}.w{gate}"), e, d, Init::Glorot, &mut rng)?;
                store.create_init(&format!("text.gru.{dir}.u{gate}"), d, d, Init::Glorot, &mut rng)?;
                store.create_init(&format!("text.gru.{dir}.b{gate}"), 1, d, Init::Zeros, &mut rng)?;
            }
        }
        store.create_init("text.attn.w", d, 1, Init::Glorot, &mut rng)?;
        store.create_init("text.head_a.conv", ENTITY_KERNEL * d, k_a, Init::Glorot, &mut rng)?;
        store.create_init("text.head_a.gamma", 1, k_a, Init::Ones, &mut rng)?;
        store.create_init("text.head_a.beta", 1, k_a, Init::Zeros, &mut rng)?;
        store.ensure_bn_stats("text.head_a", k_a)?;
        store.create_init("text.head_e.conv", ENTITY_KERNEL * d, k_e, Init::Glorot, &mut rng)?;
        store.create_init("text.head_e.gamma", 1, k_e, Init::Ones, &mut rng)?;
        store.create_init("text.head_e.beta", 1, k_e, Init::Zeros, &mut rng)?;
        store.ensure_bn_stats("text.head_e", k_e)?;
        store.create_init("text.gcn.wt", d, d, Init::Glorot, &mut rng)?;
        store.create_init("text.gcn.wr", cfg.role_types, d, Init::Glorot, &mut rng)?;
        store.create_init("text.gcn.wphi", d, d, Init::Glorot, &mut rng)?;
        store.create_init("text.gcn.wpsi", d, d, Init::Glorot, &mut rng)?;

        Ok(HanetModel { dims, word_rows })
    }

    /// Rebuild the model view from a loaded checkpoint; the embedding file
    /// supplies the word order, which must match the one used at init.
    pub fn from_store(store: &ParamStore, embeddings: &FeatureSet) -> Result<Self> {
        let fc = store.trainable("video.fc_a.w")?;
        let head_a = store.trainable("video.head_a.conv")?;
        let head_e = store.trainable("video.head_e.conv")?;
        let wr = store.trainable("text.gcn.wr")?;
        let table = store.trainable("text.embed")?;
        let (video_dim, latent) = fc.dims2()?;
        let (vocab_rows, word_dim) = table.dims2()?;
        if vocab_rows != embeddings.len() + 1 {
            return Err(Error::data(format!(
                "checkpoint embedding table has {vocab_rows} rows, embedding file implies {}",
                embeddings.len() + 1
            )));
        }
        if word_dim != embeddings.dim() {
            return Err(Error::data("checkpoint embedding width differs from embedding file".to_string()));
        }
        let dims = ModelDims {
            video_dim,
            word_dim,
            latent,
            k_a: head_a.dims2()?.1,
            k_e: head_e.dims2()?.1,
            role_types: wr.dims2()?.0,
            vocab_rows,
        };
        let mut word_rows = HashMap::new();
        for (row, (word, _)) in embeddings.iter().enumerate() {
            word_rows.insert(word.to_string(), row);
        }
        word_rows.insert(OOV_TOKEN.to_string(), embeddings.len());
        Ok(HanetModel { dims, word_rows })
    }

    /// Embedding-table row for a token; unknown words share the OOV row.
    pub fn word_row(&self, token: &str) -> usize {
        let lower = token.to_lowercase();
        self.word_rows
            .get(&lower)
            .copied()
            .unwrap_or(self.dims.vocab_rows - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_embeddings() -> FeatureSet {
        let mut set = FeatureSet::new(4);
        set.insert("man", Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        set.insert("sing", Tensor::matrix(1, 4, vec![0.5, 0.6, 0.7, 0.8]).unwrap()).unwrap();
        set
    }

    #[test]
    fn init_creates_consistent_shapes() {
        let mut cfg = TrainConfig::default();
        cfg.latent_dim = 8;
        cfg.role_types = 4;
        let mut store = ParamStore::new();
        let embeddings = tiny_embeddings();
        let model = HanetModel::init(&mut store, &cfg, 6, &embeddings, 3, 5).unwrap();
        assert_eq!(model.dims.video_dim, 6);
        assert_eq!(model.dims.word_dim, 4);
        assert_eq!(store.trainable("video.head_a.conv").unwrap().shape, vec![5 * 8, 3]);
        assert_eq!(store.trainable("text.embed").unwrap().shape, vec![3, 4]);
        assert_eq!(model.word_row("man"), 0);
        assert_eq!(model.word_row("MAN"), 0);
        assert_eq!(model.word_row("zebra"), 2);
    }

    #[test]
    fn reload_reconstructs_dims() {
        let mut cfg = TrainConfig::default();
        cfg.latent_dim = 8;
        cfg.role_types = 4;
        let mut store = ParamStore::new();
        let embeddings = tiny_embeddings();
        let model = HanetModel::init(&mut store, &cfg, 6, &embeddings, 3, 5).unwrap();
        let reloaded = HanetModel::from_store(&store, &embeddings).unwrap();
        assert_eq!(reloaded.dims, model.dims);
        assert_eq!(reloaded.word_row("sing"), model.word_row("sing"));
    }

    #[test]
    fn se_bottleneck_is_clamped() {
        assert_eq!(se_bottleneck(256), 16);
        assert_eq!(se_bottleneck(64), 4);
        assert_eq!(se_bottleneck(8), 4);
        assert_eq!(se_bottleneck(2), 2);
    }
}
