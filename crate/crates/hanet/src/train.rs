//! Composite objective, hardest-negative mining, the optimization loop,
//! early stopping and validation scoring.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    pair_similarity, text_align_cache, text_align_cache_values, video_align_cache,
    video_align_cache_values, AlignSettings,
};
use crate::config::TrainConfig;
use crate::corpus::{derive_concept_labels, CaptionAnnotation, ConceptVocabulary, RoleDictionary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ScoreMatrix};
use crate::io::FeatureSet;
use crate::model::HanetModel;
use crate::tensor::{AdamConfig, Graph, ParamStore, TensorId};
use crate::text::{encode_text_batch, TextEncodings};
use crate::video::{encode_video_batch, VideoEncodings};

const P_CLAMP: f32 = 1e-7;

/// Hinge ranking loss with in-batch hardest negatives, applied to a full
/// B x B score matrix of graph scalars (diagonal = positives). The loss
/// averages each positive's caption-negative and video-negative hinges.
pub fn ranking_loss(g: &mut Graph, scores: &[Vec<TensorId>], margin: f32) -> Result<TensorId> {
    let b = scores.len();
    if b < 2 {
        return Err(Error::invalid("ranking_loss: need at least 2 pairs for negatives".to_string()));
    }
    for row in scores {
        if row.len() != b {
            return Err(Error::invalid("ranking_loss: score matrix must be square".to_string()));
        }
    }
    let value = |g: &Graph, id: TensorId| g.values(id)[0];
    let mut hinges = Vec::with_capacity(2 * b);
    for i in 0..b {
        // Hardest caption negative along row i.
        let mut j_neg = usize::MAX;
        for j in 0..b {
            if j != i && (j_neg == usize::MAX || value(g, scores[i][j]) > value(g, scores[i][j_neg])) {
                j_neg = j;
            }
        }
        let diff = g.sub(scores[i][j_neg], scores[i][i])?;
        let shifted = g.add_scalar(diff, margin);
        hinges.push(g.relu(shifted));

        // Hardest video negative along column i.
        let mut i_neg = usize::MAX;
        for k in 0..b {
            if k != i && (i_neg == usize::MAX || value(g, scores[k][i]) > value(g, scores[i_neg][i])) {
                i_neg = k;
            }
        }
        let diff = g.sub(scores[i_neg][i], scores[i][i])?;
        let shifted = g.add_scalar(diff, margin);
        hinges.push(g.relu(shifted));
    }
    let mut total = hinges[0];
    for &h in &hinges[1..] {
        total = g.add(total, h)?;
    }
    Ok(g.mul_scalar(total, 1.0 / b as f32))
}

/// Binary cross-entropy of one confidence vector against multi-hot labels,
/// averaged over concepts. Confidences are clamped away from 0 and 1.
pub fn bce(g: &mut Graph, p: TensorId, y: &[f32]) -> Result<TensorId> {
    let (_, k) = g.dims(p);
    if k != y.len() {
        return Err(Error::Shape { op: "bce", lhs: vec![1, k], rhs: vec![1, y.len()] });
    }
    let clamped = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)?;
    let log_p = g.log(clamped)?;
    let negated = g.mul_scalar(clamped, -1.0);
    let complement = g.add_scalar(negated, 1.0);
    let log_not_p = g.log(complement)?;
    let y_t = g.constant_matrix(1, k, y.to_vec())?;
    let not_y: Vec<f32> = y.iter().map(|&v| 1.0 - v).collect();
    let not_y_t = g.constant_matrix(1, k, not_y)?;
    let pos = g.mul(y_t, log_p)?;
    let neg = g.mul(not_y_t, log_not_p)?;
    let sum = g.add(pos, neg)?;
    let mean = g.mean_all(sum);
    Ok(g.mul_scalar(mean, -1.0))
}

/// Concept loss for one level of one pair: BCE of the video branch plus BCE
/// of the text branch against the caption's labels.
pub fn concept_bce(g: &mut Graph, p_video: TensorId, p_text: TensorId, y: &[f32]) -> Result<TensorId> {
    let v = bce(g, p_video, y)?;
    let t = bce(g, p_text, y)?;
    g.add(v, t)
}

/// Total objective: ranking on latent scores, weighted ranking on concept
/// scores, weighted concept classification.
pub fn total_loss(
    g: &mut Graph,
    loss_latent: TensorId,
    loss_concept_rank: TensorId,
    loss_action: TensorId,
    loss_entity: TensorId,
    eta: f32,
    mu: f32,
) -> Result<TensorId> {
    let weighted_p = g.mul_scalar(loss_concept_rank, eta);
    let bce_sum = g.add(loss_action, loss_entity)?;
    let weighted_bce = g.mul_scalar(bce_sum, mu);
    let partial = g.add(loss_latent, weighted_p)?;
    g.add(partial, weighted_bce)
}

/// Scalar loss components of one batch, for logging.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossValues {
    pub total: f32,
    pub latent_rank: f32,
    pub concept_rank: f32,
    pub bce_action: f32,
    pub bce_entity: f32,
}

/// One training pair.
pub struct TrainSample<'a> {
    pub video: &'a crate::tensor::Tensor,
    pub annotation: &'a CaptionAnnotation,
}

/// Forward pass of one batch: encodes both modalities, builds the B x B
/// latent and concept score matrices, and assembles the total loss.
pub fn batch_losses(
    g: &mut Graph,
    store: &mut ParamStore,
    model: &HanetModel,
    cfg: &TrainConfig,
    vocab: &ConceptVocabulary,
    roles: &RoleDictionary,
    samples: &[TrainSample],
) -> Result<(TensorId, LossValues)> {
    let features: Vec<&crate::tensor::Tensor> = samples.iter().map(|s| s.video).collect();
    let annotations: Vec<&CaptionAnnotation> = samples.iter().map(|s| s.annotation).collect();
    let videos = encode_video_batch(g, store, model, &features, cfg.n_a, cfg.n_e)?;
    let texts = encode_text_batch(g, store, model, &annotations, roles)?;

    let settings = AlignSettings::from(cfg);
    let video_caches = videos
        .iter()
        .map(|v| video_align_cache(g, v))
        .collect::<Result<Vec<_>>>()?;
    let text_caches = texts
        .iter()
        .map(|t| text_align_cache(g, t))
        .collect::<Result<Vec<_>>>()?;

    let b = samples.len();
    let mut latent_scores = vec![Vec::with_capacity(b); b];
    let mut concept_scores = vec![Vec::with_capacity(b); b];
    for (i, vc) in video_caches.iter().enumerate() {
        for tc in &text_caches {
            let pair = pair_similarity(g, vc, tc, &settings)?;
            latent_scores[i].push(pair.c_l);
            concept_scores[i].push(pair.c_p);
        }
    }
    let loss_latent = ranking_loss(g, &latent_scores, cfg.margin)?;
    let loss_concept_rank = ranking_loss(g, &concept_scores, cfg.margin)?;

    // Concept BCE, skipped per sample and level when the caption has no
    // verbs (resp. nouns) to define labels.
    let mut action_terms = Vec::new();
    let mut entity_terms = Vec::new();
    for (i, ann) in annotations.iter().enumerate() {
        let labels = derive_concept_labels(ann, vocab);
        if let Some(p_text) = texts[i].p_a {
            action_terms.push(concept_bce(g, videos[i].p_a, p_text, &labels.y_a)?);
        }
        if let Some(p_text) = texts[i].p_e {
            entity_terms.push(concept_bce(g, videos[i].p_e, p_text, &labels.y_e)?);
        }
    }
    let loss_action = mean_or_zero(g, &action_terms)?;
    let loss_entity = mean_or_zero(g, &entity_terms)?;

    let total = total_loss(g, loss_latent, loss_concept_rank, loss_action, loss_entity, cfg.eta, cfg.mu)?;
    let values = LossValues {
        total: g.values(total)[0],
        latent_rank: g.values(loss_latent)[0],
        concept_rank: g.values(loss_concept_rank)[0],
        bce_action: g.values(loss_action)[0],
        bce_entity: g.values(loss_entity)[0],
    };
    Ok((total, values))
}

fn mean_or_zero(g: &mut Graph, terms: &[TensorId]) -> Result<TensorId> {
    if terms.is_empty() {
        return Ok(g.scalar_constant(0.0));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / terms.len() as f32))
}

// ── validation / inference scoring ───────────────────────────────────────

/// Extracted encodings of one whole split, ready for pair scoring.
pub struct EncodedSplit {
    pub video_ids: Vec<String>,
    pub videos: Vec<VideoEncodings>,
    pub caption_ids: Vec<String>,
    pub texts: Vec<TextEncodings>,
    /// Matrix row of each caption's ground-truth video.
    pub caption_video_row: Vec<usize>,
}

const ENCODE_CHUNK: usize = 32;

/// Encode every video and caption of a split in eval mode.
pub fn encode_split(
    store: &mut ParamStore,
    model: &HanetModel,
    cfg: &TrainConfig,
    features: &FeatureSet,
    annotations: &[CaptionAnnotation],
    roles: &RoleDictionary,
) -> Result<EncodedSplit> {
    if features.is_empty() || annotations.is_empty() {
        return Err(Error::invalid("encode_split: empty split".to_string()));
    }
    let video_ids: Vec<String> = features.ids().to_vec();
    let mut videos = Vec::with_capacity(video_ids.len());
    for chunk in video_ids.chunks(ENCODE_CHUNK) {
        let mut g = Graph::inference();
        let tensors: Vec<&crate::tensor::Tensor> =
            chunk.iter().map(|id| features.get_required(id)).collect::<Result<_>>()?;
        let encoded = encode_video_batch(&mut g, store, model, &tensors, cfg.n_a, cfg.n_e)?;
        videos.extend(encoded.iter().map(|e| VideoEncodings::extract(&g, e)));
    }

    let mut texts = Vec::with_capacity(annotations.len());
    for chunk in annotations.chunks(ENCODE_CHUNK) {
        let mut g = Graph::inference();
        let refs: Vec<&CaptionAnnotation> = chunk.iter().collect();
        let encoded = encode_text_batch(&mut g, store, model, &refs, roles)?;
        texts.extend(encoded.iter().map(|e| TextEncodings::extract(&g, e)));
    }

    let caption_ids: Vec<String> = annotations.iter().map(|a| a.caption_id.clone()).collect();
    let caption_video_row = annotations
        .iter()
        .map(|a| {
            video_ids
                .iter()
                .position(|v| *v == a.video_id)
                .ok_or_else(|| Error::data(format!("caption {} references video {:?} outside the split", a.caption_id, a.video_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSplit { video_ids, videos, caption_ids, texts, caption_video_row })
}

/// Worker count: HANET_THREADS caps the machine's available parallelism.
pub fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("HANET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => available.min(cap),
        _ => available,
    }
}

/// Full inference-score matrix ((c_l + c_p) / 2 per pair), video rows split
/// across workers.
pub fn score_matrix(split: &EncodedSplit, settings: &AlignSettings) -> Result<ScoreMatrix> {
    let videos = split.videos.len();
    let captions = split.texts.len();
    let mut matrix = ScoreMatrix::zeros(videos, captions);
    let threads = worker_threads().min(videos).max(1);
    let rows_per = videos.div_ceil(threads);

    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (chunk_idx, rows) in matrix.values_mut().chunks_mut(rows_per * captions).enumerate() {
            let start = chunk_idx * rows_per;
            handles.push(scope.spawn(move || -> Result<()> {
                for (local, out_row) in rows.chunks_mut(captions).enumerate() {
                    let video = &split.videos[start + local];
                    let mut g = Graph::inference();
                    let vc = video_align_cache_values(&mut g, video)?;
                    for (j, text) in split.texts.iter().enumerate() {
                        let tc = text_align_cache_values(&mut g, text)?;
                        let pair = pair_similarity(&mut g, &vc, &tc, settings)?;
                        out_row[j] = g.values(pair.score)[0];
                    }
                }
                Ok(())
            }));
        }
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    Ok(matrix)
}

/// Encode a split, score it, and compute retrieval metrics.
pub fn evaluate_split(
    store: &mut ParamStore,
    model: &HanetModel,
    cfg: &TrainConfig,
    features: &FeatureSet,
    annotations: &[CaptionAnnotation],
    roles: &RoleDictionary,
) -> Result<EvalReport> {
    let split = encode_split(store, model, cfg, features, annotations, roles)?;
    let matrix = score_matrix(&split, &AlignSettings::from(cfg))?;
    evaluate(&matrix, &split.caption_video_row)
}

// ── the training loop ────────────────────────────────────────────────────

/// One epoch's log record (also the JSONL line format).
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossValues,
    pub val_t2v_r1: f64,
    pub val_t2v_r5: f64,
    pub val_t2v_r10: f64,
    pub val_t2v_mdr: usize,
    pub val_v2t_r1: f64,
    pub val_v2t_r5: f64,
    pub val_v2t_r10: f64,
    pub val_v2t_mdr: usize,
    pub val_sum_r: f64,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best validation SumR.
    pub best_store: ParamStore,
    pub best_epoch: usize,
    pub best_sum_r: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Everything train() reads.
pub struct TrainData<'a> {
    pub train_features: &'a FeatureSet,
    pub train_annotations: &'a [CaptionAnnotation],
    pub val_features: &'a FeatureSet,
    pub val_annotations: &'a [CaptionAnnotation],
    pub vocab: &'a ConceptVocabulary,
    pub roles: &'a RoleDictionary,
}

/// Run the full loop: shuffled mini-batches, Adam, per-epoch validation
/// SumR, best-checkpoint tracking and early stopping. Each epoch appends
/// one JSON line to `log` when given.
pub fn train(
    store: &mut ParamStore,
    model: &HanetModel,
    cfg: &TrainConfig,
    data: &TrainData,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train_annotations.is_empty() {
        return Err(Error::invalid("train: empty training split".to_string()));
    }
    if data.val_annotations.is_empty() {
        return Err(Error::invalid("train: empty validation split".to_string()));
    }
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368756666);

    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut best_sum_r = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train_annotations.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sums = LossValues { total: 0.0, latent_rank: 0.0, concept_rank: 0.0, bce_action: 0.0, bce_entity: 0.0 };
        let mut batches = 0usize;
        for batch_indices in order.chunks(cfg.batch_size) {
            if batch_indices.len() < 2 {
                continue;
            }
            let samples = batch_indices
                .iter()
                .map(|&i| {
                    let ann = &data.train_annotations[i];
                    Ok(TrainSample { video: data.train_features.get_required(&ann.video_id)?, annotation: ann })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::training();
            let (loss, values) = batch_losses(&mut g, store, model, cfg, data.vocab, data.roles, &samples)?;
            if !values.total.is_finite() {
                let ids: Vec<&str> = samples.iter().map(|s| s.annotation.caption_id.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {} in epoch {epoch}, batch [{}]",
                    values.total,
                    ids.join(", ")
                )));
            }
            g.backward(loss)?;
            for (name, grad) in g.param_grads() {
                store.accumulate_grad(name, grad)?;
            }
            store.fill_missing_grads();
            store.adam_step(&adam)?;
            sums.total += values.total;
            sums.latent_rank += values.latent_rank;
            sums.concept_rank += values.concept_rank;
            sums.bce_action += values.bce_action;
            sums.bce_entity += values.bce_entity;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::invalid("train: no batch had at least 2 pairs".to_string()));
        }
        let denom = batches as f32;
        let train_loss = LossValues {
            total: sums.total / denom,
            latent_rank: sums.latent_rank / denom,
            concept_rank: sums.concept_rank / denom,
            bce_action: sums.bce_action / denom,
            bce_entity: sums.bce_entity / denom,
        };

        let report = evaluate_split(store, model, cfg, data.val_features, data.val_annotations, data.roles)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_t2v_r1: report.text_to_video.r1,
            val_t2v_r5: report.text_to_video.r5,
            val_t2v_r10: report.text_to_video.r10,
            val_t2v_mdr: report.text_to_video.mdr,
            val_v2t_r1: report.video_to_text.r1,
            val_v2t_r5: report.video_to_text.r5,
            val_v2t_r10: report.video_to_text.r10,
            val_v2t_mdr: report.video_to_text.mdr,
            val_sum_r: report.sum_r,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(sink) = log.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &record).map_err(|e| Error::data(e.to_string()))?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        epochs.push(record);

        if report.sum_r > best_sum_r {
            best_sum_r = report.sum_r;
            best_epoch = epoch;
            best_store = store.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { best_store, best_epoch, best_sum_r, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score_grid(g: &mut Graph, rows: &[&[f32]]) -> Vec<Vec<TensorId>> {
        rows.iter()
            .map(|row| row.iter().map(|&v| g.scalar_constant(v)).collect())
            .collect()
    }

    #[test]
    fn satisfied_margins_give_zero_loss() {
        let mut g = Graph::training();
        let scores = score_grid(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = ranking_loss(&mut g, &scores, 0.2).unwrap();
        assert_eq!(g.values(loss)[0], 0.0);
    }

    #[test]
    fn hand_evaluated_two_pair_case() {
        let mut g = Graph::training();
        let scores = score_grid(&mut g, &[&[0.5, 0.9], &[0.1, 0.5]]);
        let loss = ranking_loss(&mut g, &scores, 0.2).unwrap();
        assert!((g.values(loss)[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn constant_scores_lose_twice_the_margin() {
        let mut g = Graph::training();
        let scores = score_grid(&mut g, &[&[0.3, 0.3, 0.3], &[0.3, 0.3, 0.3], &[0.3, 0.3, 0.3]]);
        let loss = ranking_loss(&mut g, &scores, 0.2).unwrap();
        assert!((g.values(loss)[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn single_pair_batches_are_rejected() {
        let mut g = Graph::training();
        let scores = score_grid(&mut g, &[&[1.0]]);
        assert!(ranking_loss(&mut g, &scores, 0.2).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::training();
        // Perfect prediction: loss is ~0.
        let eps = 1e-6f32;
        let p = g.constant_matrix(1, 2, vec![1.0 - eps, eps]).unwrap();
        let loss = bce(&mut g, p, &[1.0, 0.0]).unwrap();
        assert!(g.values(loss)[0] < 1e-4, "{}", g.values(loss)[0]);

        // p = 0.5 everywhere: ln 2 per concept per branch.
        let p_v = g.constant_matrix(1, 4, vec![0.5; 4]).unwrap();
        let p_s = g.constant_matrix(1, 4, vec![0.5; 4]).unwrap();
        let pair = concept_bce(&mut g, p_v, p_s, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((g.values(pair)[0] - 2.0 * std::f32::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn total_loss_weighting() {
        let mut g = Graph::training();
        let one = g.scalar_constant(1.0);
        let total = total_loss(&mut g, one, one, one, one, 0.1, 0.01).unwrap();
        assert!((g.values(total)[0] - 1.12).abs() < 1e-6);

        let total = total_loss(&mut g, one, one, one, one, 0.0, 0.0).unwrap();
        assert_eq!(g.values(total)[0], 1.0);

        let zero = g.scalar_constant(0.0);
        let total = total_loss(&mut g, zero, zero, zero, zero, 0.1, 0.01).unwrap();
        assert_eq!(g.values(total)[0], 0.0);
    }
}
