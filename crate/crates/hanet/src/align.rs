//! Cross-modal similarity: stacked attention over component sets, the
//! generalized Jaccard score over concept confidences, global cosine, and
//! the latent/concept aggregates for one (video, caption) pair.

use serde::Serialize;

use crate::config::{LevelToggles, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};
use crate::text::TextEncodingIds;
use crate::video::VideoEncodingIds;

/// Keeps zero-norm rows at exactly zero cosine while staying differentiable.
const NORM_EPS: f32 = 1e-12;

/// Scale rows to unit length; all-zero rows stay zero.
pub fn normalize_rows(g: &mut Graph, x: TensorId) -> Result<TensorId> {
    let (_, cols) = g.dims(x);
    let squared = g.mul(x, x)?;
    let sums = g.sum_axis1(squared);
    let sums = g.add_scalar(sums, NORM_EPS);
    let norms = g.sqrt(sums)?;
    let norms = g.expand_cols(norms, cols)?;
    g.div(x, norms)
}

/// Stacked attention over two already-normalized row sets.
///
/// c = vn sn^T; each row of max(c, 0) is L2-normalized over the text axis,
/// scaled by the temperature and softmaxed over the text axis; the result
/// weights the raw cosines and everything is summed (divided by the video
/// row count when `normalize_sum` is set).
pub fn stacked_attention_normalized(
    g: &mut Graph,
    video_norm: TensorId,
    text_norm: TensorId,
    lambda: f32,
    normalize_sum: bool,
) -> Result<TensorId> {
    let (p, _) = g.dims(video_norm);
    let (q, _) = g.dims(text_norm);
    let text_t = g.transpose(text_norm);
    let cosines = g.matmul(video_norm, text_t)?;
    let positive = g.relu(cosines);
    let squared = g.mul(positive, positive)?;
    let row_sums = g.sum_axis1(squared);
    let row_sums = g.add_scalar(row_sums, NORM_EPS);
    let denom = g.sqrt(row_sums)?;
    let denom = g.expand_cols(denom, q)?;
    let normalized = g.div(positive, denom)?;
    let scaled = g.mul_scalar(normalized, lambda);
    let weights = g.softmax_rows(scaled);
    let weighted = g.mul(weights, cosines)?;
    let total = g.sum_all(weighted);
    Ok(if normalize_sum {
        g.mul_scalar(total, 1.0 / p as f32)
    } else {
        total
    })
}

/// Generalized Jaccard: sum(min) / sum(max) over nonnegative confidence
/// vectors; zero over zero is defined as zero.
pub fn jaccard(g: &mut Graph, p_v: TensorId, p_s: TensorId) -> Result<TensorId> {
    if g.values(p_v).iter().chain(g.values(p_s)).any(|&v| v < 0.0) {
        return Err(Error::invalid("jaccard: confidence entries must be nonnegative".to_string()));
    }
    let mins = g.emin(p_v, p_s)?;
    let maxs = g.emax(p_v, p_s)?;
    let num = g.sum_all(mins);
    let den = g.sum_all(maxs);
    if g.values(den)[0] == 0.0 {
        return Ok(g.scalar_constant(0.0));
    }
    g.div(num, den)
}

/// Cosine of two row vectors via normalization (zero-norm reads as zero).
pub fn cosine_rows(g: &mut Graph, a: TensorId, b: TensorId) -> Result<TensorId> {
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    let bt = g.transpose(bn);
    g.matmul(an, bt)
}

/// Normalized views of one video's encodings, reusable across pairs.
pub struct VideoAlignCache {
    pub ind_a: TensorId,
    pub ind_e: TensorId,
    pub loc_a: TensorId,
    pub loc_e: TensorId,
    pub glo: TensorId,
    pub p_a: TensorId,
    pub p_e: TensorId,
}

pub fn video_align_cache(g: &mut Graph, enc: &VideoEncodingIds) -> Result<VideoAlignCache> {
    Ok(VideoAlignCache {
        ind_a: normalize_rows(g, enc.v_ind_a)?,
        ind_e: normalize_rows(g, enc.v_ind_e)?,
        loc_a: normalize_rows(g, enc.v_loc_a)?,
        loc_e: normalize_rows(g, enc.v_loc_e)?,
        glo: normalize_rows(g, enc.v_glo)?,
        p_a: enc.p_a,
        p_e: enc.p_e,
    })
}

/// Normalized views of one caption's encodings; absent levels stay absent.
pub struct TextAlignCache {
    pub ind_a: Option<TensorId>,
    pub ind_e: Option<TensorId>,
    pub loc_a: Option<TensorId>,
    pub loc_e: Option<TensorId>,
    pub glo: TensorId,
    pub p_a: Option<TensorId>,
    pub p_e: Option<TensorId>,
}

pub fn text_align_cache(g: &mut Graph, enc: &TextEncodingIds) -> Result<TextAlignCache> {
    let norm = |g: &mut Graph, id: Option<TensorId>| -> Result<Option<TensorId>> {
        match id {
            Some(id) => Ok(Some(normalize_rows(g, id)?)),
            None => Ok(None),
        }
    };
    Ok(TextAlignCache {
        ind_a: norm(g, enc.s_ind_a)?,
        ind_e: norm(g, enc.s_ind_e)?,
        loc_a: norm(g, enc.s_loc_a)?,
        loc_e: norm(g, enc.s_loc_e)?,
        glo: normalize_rows(g, enc.s_glo)?,
        p_a: enc.p_a,
        p_e: enc.p_e,
    })
}

/// Rebuild a video's align cache in a fresh graph from extracted values.
pub fn video_align_cache_values(g: &mut Graph, enc: &crate::video::VideoEncodings) -> Result<VideoAlignCache> {
    let mut load_norm = |g: &mut Graph, t: &Tensor| -> Result<TensorId> {
        let id = g.constant(t)?;
        normalize_rows(g, id)
    };
    Ok(VideoAlignCache {
        ind_a: load_norm(g, &enc.v_ind_a)?,
        ind_e: load_norm(g, &enc.v_ind_e)?,
        loc_a: load_norm(g, &enc.v_loc_a)?,
        loc_e: load_norm(g, &enc.v_loc_e)?,
        glo: load_norm(g, &enc.v_glo)?,
        p_a: g.constant(&enc.p_a)?,
        p_e: g.constant(&enc.p_e)?,
    })
}

/// Rebuild a caption's align cache in a fresh graph from extracted values.
pub fn text_align_cache_values(g: &mut Graph, enc: &crate::text::TextEncodings) -> Result<TextAlignCache> {
    let mut load_norm = |g: &mut Graph, t: &Option<Tensor>| -> Result<Option<TensorId>> {
        match t {
            Some(t) => {
                let id = g.constant(t)?;
                Ok(Some(normalize_rows(g, id)?))
            }
            None => Ok(None),
        }
    };
    let glo = g.constant(&enc.s_glo)?;
    Ok(TextAlignCache {
        ind_a: load_norm(g, &enc.s_ind_a)?,
        ind_e: load_norm(g, &enc.s_ind_e)?,
        loc_a: load_norm(g, &enc.s_loc_a)?,
        loc_e: load_norm(g, &enc.s_loc_e)?,
        glo: normalize_rows(g, glo)?,
        p_a: match &enc.p_a {
            Some(t) => Some(g.constant(t)?),
            None => None,
        },
        p_e: match &enc.p_e {
            Some(t) => Some(g.constant(t)?),
            None => None,
        },
    })
}

/// Similarity settings shared by training and inference.
#[derive(Debug, Clone, Copy)]
pub struct AlignSettings {
    pub lambda: f32,
    pub normalize_sum: bool,
    pub levels: LevelToggles,
}

impl From<&TrainConfig> for AlignSettings {
    fn from(cfg: &TrainConfig) -> Self {
        AlignSettings { lambda: cfg.lambda, normalize_sum: cfg.stack_sum_normalize, levels: cfg.levels }
    }
}

/// Graph handles for one pair's similarity components and aggregates.
pub struct PairSimilarityIds {
    pub c_ind_a: Option<TensorId>,
    pub c_ind_e: Option<TensorId>,
    pub c_loc_a: Option<TensorId>,
    pub c_loc_e: Option<TensorId>,
    pub c_glo: Option<TensorId>,
    pub c_p_a: Option<TensorId>,
    pub c_p_e: Option<TensorId>,
    /// Mean of the enabled, present latent components.
    pub c_l: TensorId,
    /// Mean of the two concept components (absent text levels read as 0).
    pub c_p: TensorId,
    /// Inference score (c_l + c_p) / 2.
    pub score: TensorId,
}

/// All seven components plus aggregates for one (video, caption) pair.
/// Latent components whose text side is empty contribute nothing and are
/// excluded from the c_l denominator; disabled levels are excluded too.
pub fn pair_similarity(
    g: &mut Graph,
    video: &VideoAlignCache,
    text: &TextAlignCache,
    settings: &AlignSettings,
) -> Result<PairSimilarityIds> {
    let levels = settings.levels;
    if !levels.individual && !levels.local && !levels.global {
        return Err(Error::invalid("pair_similarity: every alignment level is disabled".to_string()));
    }
    let mut stacked = |g: &mut Graph, v: TensorId, t: Option<TensorId>| -> Result<Option<TensorId>> {
        match t {
            Some(t) => Ok(Some(stacked_attention_normalized(g, v, t, settings.lambda, settings.normalize_sum)?)),
            None => Ok(None),
        }
    };
    let (mut c_ind_a, mut c_ind_e) = (None, None);
    if levels.individual {
        c_ind_a = stacked(g, video.ind_a, text.ind_a)?;
        c_ind_e = stacked(g, video.ind_e, text.ind_e)?;
    }
    let (mut c_loc_a, mut c_loc_e) = (None, None);
    if levels.local {
        c_loc_a = stacked(g, video.loc_a, text.loc_a)?;
        c_loc_e = stacked(g, video.loc_e, text.loc_e)?;
    }
    let c_glo = if levels.global {
        let t = g.transpose(text.glo);
        Some(g.matmul(video.glo, t)?)
    } else {
        None
    };

    let latent_parts: Vec<TensorId> = [c_ind_a, c_ind_e, c_loc_a, c_loc_e, c_glo]
        .into_iter()
        .flatten()
        .collect();
    let c_l = mean_of(g, &latent_parts)?;

    let c_p_a = match text.p_a {
        Some(p_s) => Some(jaccard(g, video.p_a, p_s)?),
        None => None,
    };
    let c_p_e = match text.p_e {
        Some(p_s) => Some(jaccard(g, video.p_e, p_s)?),
        None => None,
    };
    let zero = g.scalar_constant(0.0);
    let pa = c_p_a.unwrap_or(zero);
    let pe = c_p_e.unwrap_or(zero);
    let p_sum = g.add(pa, pe)?;
    let c_p = g.mul_scalar(p_sum, 0.5);

    let sum = g.add(c_l, c_p)?;
    let score = g.mul_scalar(sum, 0.5);
    Ok(PairSimilarityIds { c_ind_a, c_ind_e, c_loc_a, c_loc_e, c_glo, c_p_a, c_p_e, c_l, c_p, score })
}

fn mean_of(g: &mut Graph, parts: &[TensorId]) -> Result<TensorId> {
    if parts.is_empty() {
        return Ok(g.scalar_constant(0.0));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / parts.len() as f32))
}

/// Value-level similarity report for one pair (the `score` command output).
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityBundle {
    pub c_ind_a: f32,
    pub c_ind_e: f32,
    pub c_loc_a: f32,
    pub c_loc_e: f32,
    pub c_glo_g: f32,
    pub c_p_a: f32,
    pub c_p_e: f32,
    pub c_l: f32,
    pub c_p: f32,
    pub score: f32,
}

impl SimilarityBundle {
    pub fn extract(g: &Graph, ids: &PairSimilarityIds) -> Result<Self> {
        let read = |id: Option<TensorId>| -> Result<f32> {
            match id {
                Some(id) => g.scalar(id),
                None => Ok(0.0),
            }
        };
        Ok(SimilarityBundle {
            c_ind_a: read(ids.c_ind_a)?,
            c_ind_e: read(ids.c_ind_e)?,
            c_loc_a: read(ids.c_loc_a)?,
            c_loc_e: read(ids.c_loc_e)?,
            c_glo_g: read(ids.c_glo)?,
            c_p_a: read(ids.c_p_a)?,
            c_p_e: read(ids.c_p_e)?,
            c_l: g.scalar(ids.c_l)?,
            c_p: g.scalar(ids.c_p)?,
            score: g.scalar(ids.score)?,
        })
    }
}

// ── value-level entry points (same graph path, throwaway graph) ─────────

/// Stacked attention over raw row sets.
pub fn stacked_attention_similarity(
    video_rows: &Tensor,
    text_rows: &Tensor,
    lambda: f32,
    normalize_sum: bool,
) -> Result<f32> {
    let mut g = Graph::inference();
    let v = g.constant(video_rows)?;
    let t = g.constant(text_rows)?;
    let vn = normalize_rows(&mut g, v)?;
    let tn = normalize_rows(&mut g, t)?;
    let s = stacked_attention_normalized(&mut g, vn, tn, lambda, normalize_sum)?;
    g.scalar(s)
}

/// Generalized Jaccard over plain vectors.
pub fn jaccard_similarity(p_v: &[f32], p_s: &[f32]) -> Result<f32> {
    if p_v.len() != p_s.len() {
        return Err(Error::Shape { op: "jaccard_similarity", lhs: vec![p_v.len()], rhs: vec![p_s.len()] });
    }
    let mut g = Graph::inference();
    let a = g.constant_matrix(1, p_v.len(), p_v.to_vec())?;
    let b = g.constant_matrix(1, p_s.len(), p_s.to_vec())?;
    let j = jaccard(&mut g, a, b)?;
    g.scalar(j)
}

/// Plain cosine similarity between two vectors (zero-norm reads as zero).
pub fn global_similarity(v: &[f32], s: &[f32]) -> Result<f32> {
    if v.len() != s.len() {
        return Err(Error::Shape { op: "global_similarity", lhs: vec![v.len()], rhs: vec![s.len()] });
    }
    let mut g = Graph::inference();
    let a = g.constant_matrix(1, v.len(), v.to_vec())?;
    let b = g.constant_matrix(1, s.len(), s.to_vec())?;
    let c = cosine_rows(&mut g, a, b)?;
    g.scalar(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_unit_vectors_have_similarity_one() {
        let v = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let s = v.clone();
        let c = stacked_attention_similarity(&v, &s, 4.0, true).unwrap();
        assert!((c - 1.0).abs() < 1e-6, "{c}");
    }

    #[test]
    fn orthogonal_rows_have_similarity_zero() {
        let v = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = Tensor::matrix(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = stacked_attention_similarity(&v, &s, 4.0, true).unwrap();
        assert!(c.abs() < 1e-6, "{c}");
    }

    #[test]
    fn zero_norm_rows_read_as_zero_cosine() {
        let v = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let s = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let c = stacked_attention_similarity(&v, &s, 4.0, true).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(global_similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn jaccard_hand_cases() {
        assert!((jaccard_similarity(&[0.3, 0.6], &[0.3, 0.6]).unwrap() - 1.0).abs() < 1e-6);
        let j = jaccard_similarity(&[0.2, 0.8], &[0.4, 0.4]).unwrap();
        assert!((j - 0.5).abs() < 1e-6, "{j}");
        assert_eq!(jaccard_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(jaccard_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(jaccard_similarity(&[-0.1, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_sign_cases() {
        assert!((global_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!((global_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-6);
    }
}
