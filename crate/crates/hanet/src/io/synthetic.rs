//! Concept-grounded synthetic dataset generator.
//!
//! Each concept gets a random unit prototype vector. A sample plants a few
//! action and entity concepts, builds frames as noisy means of the
//! prototypes hosted per frame, and writes a templated caption over the
//! concept lemmas so the fallback role parser recovers the structure
//! exactly. Caption i is the planted match of video i.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocabulary, fallback_role_parse, load_stopwords, CaptionAnnotation, PosLexicon, PosTag,
    RoleDictionary,
};
use crate::error::{Error, Result};
use crate::io::{
    save_annotations, FeatureSet, EMBEDDINGS, POS_LEXICON, ROLES, TRAIN_ANNOTATIONS,
    TRAIN_FEATURES, VAL_ANNOTATIONS, VAL_FEATURES, VOCAB,
};
use crate::tensor::Tensor;

// Lemma-stable word pools the generator draws concept names from.
const ACTION_WORDS: &[&str] = &[
    "sing", "dance", "run", "walk", "jump", "eat", "cook", "talk", "swim", "climb", "read",
    "write", "draw", "paint", "throw", "drive",
];
const ENTITY_WORDS: &[&str] = &[
    "man", "dog", "cat", "car", "ball", "song", "road", "tree", "house", "bird", "horse", "cake",
    "book", "girl", "boy", "team", "park", "door", "hand", "phone", "guitar", "piano", "camera",
    "window", "chair", "table", "wall", "floor", "shirt", "hat", "drum", "flag",
];
const GLUE_WORDS: &[&str] = &["a", "and"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k_a: usize,
    pub k_e: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub proto_dim: usize,
    pub noise: f32,
    pub actions_per_sample: (usize, usize),
    pub entities_per_sample: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            k_a: 8,
            k_e: 16,
            train_samples: 200,
            val_samples: 50,
            frames_min: 12,
            frames_max: 24,
            proto_dim: 32,
            noise: 0.05,
            actions_per_sample: (1, 2),
            entities_per_sample: (2, 3),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise < 0.0 {
            return Err(Error::invalid("synthetic noise must be nonnegative".to_string()));
        }
        if self.k_a > ACTION_WORDS.len() || self.k_e > ENTITY_WORDS.len() {
            return Err(Error::invalid(format!(
                "synthetic vocabulary supports at most {} actions and {} entities",
                ACTION_WORDS.len(),
                ENTITY_WORDS.len()
            )));
        }
        if self.actions_per_sample.0 > self.actions_per_sample.1
            || self.entities_per_sample.0 > self.entities_per_sample.1
        {
            return Err(Error::invalid("per-sample concept ranges must be lo <= hi".to_string()));
        }
        if self.k_a < self.actions_per_sample.1 || self.k_e < self.entities_per_sample.1 {
            return Err(Error::invalid("vocab sizes must cover concepts per sample".to_string()));
        }
        if self.entities_per_sample.0 < 1 {
            return Err(Error::invalid("each sample needs at least one entity".to_string()));
        }
        if self.frames_min < 1 || self.frames_min > self.frames_max {
            return Err(Error::invalid("frame range must satisfy 1 <= min <= max".to_string()));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::invalid("both splits need at least one sample".to_string()));
        }
        if self.proto_dim == 0 {
            return Err(Error::invalid("prototype dim must be positive".to_string()));
        }
        Ok(())
    }
}

/// One generated sample and the concepts planted into it.
#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub video_id: String,
    pub caption_id: String,
    pub action_concepts: Vec<usize>,
    pub entity_concepts: Vec<usize>,
}

/// Generator output before it is written to disk.
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub action_lemmas: Vec<String>,
    pub entity_lemmas: Vec<String>,
    pub action_prototypes: Vec<Vec<f32>>,
    pub entity_prototypes: Vec<Vec<f32>>,
    pub train_features: FeatureSet,
    pub val_features: FeatureSet,
    pub embeddings: FeatureSet,
    pub train_annotations: Vec<CaptionAnnotation>,
    pub val_annotations: Vec<CaptionAnnotation>,
    pub train_planted: Vec<PlantedSample>,
    pub val_planted: Vec<PlantedSample>,
    pub lexicon: PosLexicon,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; both uniforms are in (0, 1].
    let u1: f32 = 1.0 - rng.gen::<f32>();
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn unit_prototype(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn pick_distinct(count: usize, pool: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..pool).collect();
    ids.shuffle(rng);
    ids.truncate(count);
    ids
}

/// Interleave "a <noun> <verb> a <noun> ..." and attach leftover nouns with
/// "and"; covers any verb count including zero.
fn caption_tokens(verbs: &[&str], nouns: &[&str]) -> Vec<String> {
    let mut tokens = vec!["a".to_string(), nouns[0].to_string()];
    let mut ni = 1;
    for verb in verbs {
        tokens.push(verb.to_string());
        if ni < nouns.len() {
            tokens.push("a".to_string());
            tokens.push(nouns[ni].to_string());
            ni += 1;
        }
    }
    while ni < nouns.len() {
        tokens.push("and".to_string());
        tokens.push("a".to_string());
        tokens.push(nouns[ni].to_string());
        ni += 1;
    }
    tokens
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let dim = spec.proto_dim;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x70726f74);
    let action_prototypes: Vec<Vec<f32>> = (0..spec.k_a).map(|_| unit_prototype(dim, &mut proto_rng)).collect();
    let entity_prototypes: Vec<Vec<f32>> = (0..spec.k_e).map(|_| unit_prototype(dim, &mut proto_rng)).collect();
    let action_lemmas: Vec<String> = ACTION_WORDS[..spec.k_a].iter().map(|s| s.to_string()).collect();
    let entity_lemmas: Vec<String> = ENTITY_WORDS[..spec.k_e].iter().map(|s| s.to_string()).collect();

    let mut lexicon = PosLexicon::new();
    for w in &action_lemmas {
        lexicon.insert(w, PosTag::Verb);
    }
    for w in &entity_lemmas {
        lexicon.insert(w, PosTag::Noun);
    }
    for w in GLUE_WORDS {
        lexicon.insert(w, PosTag::Other);
    }

    let generate_split = |name: &str, samples: usize, ensure_coverage: bool| -> Result<(FeatureSet, Vec<CaptionAnnotation>, Vec<PlantedSample>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (name.len() as u64) << 32 ^ 0x73706c69);
        // Concept choices first, so coverage can be repaired deterministically.
        let mut choices: Vec<(Vec<usize>, Vec<usize>)> = (0..samples)
            .map(|_| {
                let n_act = rng.gen_range(spec.actions_per_sample.0..=spec.actions_per_sample.1);
                let n_ent = rng.gen_range(spec.entities_per_sample.0..=spec.entities_per_sample.1);
                (pick_distinct(n_act, spec.k_a, &mut rng), pick_distinct(n_ent, spec.k_e, &mut rng))
            })
            .collect();
        if ensure_coverage {
            // The vocabulary is built from training captions; make sure every
            // concept that can occur does occur, so planted labels stay
            // decodable through the vocabulary.
            if spec.actions_per_sample.1 > 0 {
                let used: BTreeSet<usize> = choices.iter().flat_map(|(a, _)| a.iter().copied()).collect();
                let mut slot = 0usize;
                for missing in (0..spec.k_a).filter(|c| !used.contains(c)) {
                    loop {
                        let target = &mut choices[slot % samples].0;
                        slot += 1;
                        if target.contains(&missing) {
                            continue;
                        }
                        if target.is_empty() {
                            target.push(missing);
                        } else {
                            target[0] = missing;
                        }
                        break;
                    }
                }
            }
            let used: BTreeSet<usize> = choices.iter().flat_map(|(_, e)| e.iter().copied()).collect();
            let mut slot = 0usize;
            for missing in (0..spec.k_e).filter(|c| !used.contains(c)) {
                loop {
                    let target = &mut choices[slot % samples].1;
                    slot += 1;
                    if target.contains(&missing) {
                        continue;
                    }
                    target[0] = missing;
                    break;
                }
            }
        }

        let mut features = FeatureSet::new(dim);
        let mut annotations = Vec::with_capacity(samples);
        let mut planted = Vec::with_capacity(samples);
        for (i, (acts, ents)) in choices.iter().enumerate() {
            let video_id = format!("{name}_v{i:04}");
            let caption_id = format!("{name}_c{i:04}");
            let frames = rng.gen_range(spec.frames_min..=spec.frames_max);
            let mut values = Vec::with_capacity(frames * dim);
            let protos: Vec<&[f32]> = acts
                .iter()
                .map(|&c| action_prototypes[c].as_slice())
                .chain(ents.iter().map(|&c| entity_prototypes[c].as_slice()))
                .collect();
            for _ in 0..frames {
                let mut hosted: Vec<&[f32]> = protos.iter().copied().filter(|_| rng.gen::<bool>()).collect();
                if hosted.is_empty() {
                    hosted.push(protos[rng.gen_range(0..protos.len())]);
                }
                for d in 0..dim {
                    let mean = hosted.iter().map(|p| p[d]).sum::<f32>() / hosted.len() as f32;
                    values.push(mean + spec.noise * gaussian(&mut rng));
                }
            }
            features.insert(&video_id, Tensor::matrix(frames, dim, values)?)?;

            let verb_words: Vec<&str> = acts.iter().map(|&c| action_lemmas[c].as_str()).collect();
            let noun_words: Vec<&str> = ents.iter().map(|&c| entity_lemmas[c].as_str()).collect();
            let tokens = caption_tokens(&verb_words, &noun_words);
            let ann = fallback_role_parse(&video_id, &caption_id, &tokens, &lexicon);
            ann.validate()?;
            annotations.push(ann);
            planted.push(PlantedSample {
                video_id,
                caption_id,
                action_concepts: acts.clone(),
                entity_concepts: ents.clone(),
            });
        }
        Ok((features, annotations, planted))
    };

    let (train_features, train_annotations, train_planted) = generate_split("train", spec.train_samples, true)?;
    let (val_features, val_annotations, val_planted) = generate_split("val", spec.val_samples, false)?;

    // Word embeddings share the prototypes; glue words get small random rows.
    let mut embed_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x656d6265);
    let mut embeddings = FeatureSet::new(dim);
    for (lemma, proto) in action_lemmas.iter().zip(&action_prototypes) {
        let row: Vec<f32> = proto.iter().map(|&p| p + spec.noise * gaussian(&mut embed_rng)).collect();
        embeddings.insert(lemma, Tensor::matrix(1, dim, row)?)?;
    }
    for (lemma, proto) in entity_lemmas.iter().zip(&entity_prototypes) {
        let row: Vec<f32> = proto.iter().map(|&p| p + spec.noise * gaussian(&mut embed_rng)).collect();
        embeddings.insert(lemma, Tensor::matrix(1, dim, row)?)?;
    }
    for word in GLUE_WORDS {
        let row: Vec<f32> = (0..dim).map(|_| 0.1 * gaussian(&mut embed_rng)).collect();
        embeddings.insert(word, Tensor::matrix(1, dim, row)?)?;
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        action_lemmas,
        entity_lemmas,
        action_prototypes,
        entity_prototypes,
        train_features,
        val_features,
        embeddings,
        train_annotations,
        val_annotations,
        train_planted,
        val_planted,
        lexicon,
    })
}

impl SyntheticDataset {
    /// Write the standard dataset-directory layout.
    pub fn write(&self, dir: &Path, role_types: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.train_features.save(&dir.join(TRAIN_FEATURES))?;
        self.val_features.save(&dir.join(VAL_FEATURES))?;
        self.embeddings.save(&dir.join(EMBEDDINGS))?;
        save_annotations(&dir.join(TRAIN_ANNOTATIONS), &self.train_annotations)?;
        save_annotations(&dir.join(VAL_ANNOTATIONS), &self.val_annotations)?;
        let stopwords = load_stopwords(None)?;
        let vocab = build_vocabulary(self.train_annotations.iter(), self.spec.k_a, self.spec.k_e, &stopwords)?;
        vocab.save_tsv(&dir.join(VOCAB))?;
        let roles = RoleDictionary::build(self.train_annotations.iter(), role_types)?;
        roles.save(&dir.join(ROLES))?;
        self.lexicon.save(&dir.join(POS_LEXICON))?;
        std::fs::write(
            dir.join("synth_spec.json"),
            serde_json::to_string_pretty(&self.spec).map_err(|e| Error::data(e.to_string()))?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::derive_concept_labels;

    #[test]
    fn zero_noise_single_concept_frames_match_prototypes() {
        let spec = SyntheticSpec {
            k_a: 2,
            k_e: 4,
            train_samples: 6,
            val_samples: 2,
            frames_min: 3,
            frames_max: 5,
            proto_dim: 8,
            noise: 0.0,
            actions_per_sample: (0, 0),
            entities_per_sample: (1, 1),
            seed: 11,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        // With one planted concept and zero noise every frame equals that
        // prototype, so a nearest-prototype oracle classifies all frames.
        for planted in &data.train_planted {
            let concept = planted.entity_concepts[0];
            let matrix = data.train_features.get(&planted.video_id).unwrap();
            let (rows, dim) = matrix.dims2().unwrap();
            for r in 0..rows {
                let frame = &matrix.values[r * dim..(r + 1) * dim];
                let mut best = (f32::NEG_INFINITY, usize::MAX);
                for (i, proto) in data.entity_prototypes.iter().enumerate() {
                    let dot: f32 = frame.iter().zip(proto).map(|(a, b)| a * b).sum();
                    if dot > best.0 {
                        best = (dot, i);
                    }
                }
                assert_eq!(best.1, concept);
            }
        }
    }

    #[test]
    fn fixed_seed_gives_byte_identical_output() {
        let spec = SyntheticSpec {
            train_samples: 10,
            val_samples: 4,
            k_a: 4,
            k_e: 6,
            frames_min: 3,
            frames_max: 6,
            proto_dim: 8,
            ..SyntheticSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&spec).unwrap().write(d1.path(), 8).unwrap();
        generate_synthetic(&spec).unwrap().write(d2.path(), 8).unwrap();
        for name in [TRAIN_FEATURES, VAL_FEATURES, EMBEDDINGS, TRAIN_ANNOTATIONS, VAL_ANNOTATIONS, VOCAB, ROLES] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn sample_counts_match_the_spec() {
        let spec = SyntheticSpec {
            k_a: 8,
            k_e: 16,
            train_samples: 200,
            val_samples: 50,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.train_features.len(), 200);
        assert_eq!(data.val_features.len(), 50);
        assert_eq!(data.train_annotations.len(), 200);
        assert_eq!(data.val_annotations.len(), 50);
    }

    #[test]
    fn derived_labels_equal_planted_concepts() {
        let spec = SyntheticSpec {
            k_a: 6,
            k_e: 10,
            train_samples: 40,
            val_samples: 10,
            proto_dim: 8,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let stopwords = load_stopwords(None).unwrap();
        let vocab = build_vocabulary(data.train_annotations.iter(), spec.k_a, spec.k_e, &stopwords).unwrap();
        assert_eq!(vocab.num_actions(), spec.k_a);
        assert_eq!(vocab.num_entities(), spec.k_e);
        for (ann, planted) in data.train_annotations.iter().zip(&data.train_planted) {
            let labels = derive_concept_labels(ann, &vocab);
            let derived_a: BTreeSet<usize> =
                labels.y_a.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
            let expected_a: BTreeSet<usize> = planted
                .action_concepts
                .iter()
                .map(|&c| vocab.action_of(&data.action_lemmas[c]).unwrap())
                .collect();
            assert_eq!(derived_a, expected_a, "{}", ann.caption_id);
            let derived_e: BTreeSet<usize> =
                labels.y_e.iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
            let expected_e: BTreeSet<usize> = planted
                .entity_concepts
                .iter()
                .map(|&c| vocab.entity_of(&data.entity_lemmas[c]).unwrap())
                .collect();
            assert_eq!(derived_e, expected_e, "{}", ann.caption_id);
        }
    }
}
