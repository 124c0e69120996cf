//! Video branch: individual embeddings, concept heads, SE gating,
//! MIL-pooled concept confidences, concept-guided local clips and the
//! attention-pooled global vector.

use crate::error::{Error, Result};
use crate::model::{HanetModel, ACTION_KERNEL, ENTITY_KERNEL};
use crate::tensor::{Graph, ParamStore, Tensor, TensorId};

/// Half-width of the action clip window (clip size 5).
const ACTION_WINDOW_HALF: usize = 2;
/// Frames merged per entity concept.
const ENTITY_FRAMES: usize = 3;

/// Graph handles for every representation of one encoded video.
pub struct VideoEncodingIds {
    pub v_ind_a: TensorId,
    pub v_ind_e: TensorId,
    pub v_ind_g: TensorId,
    pub l_a: TensorId,
    pub l_e: TensorId,
    pub p_a: TensorId,
    pub p_e: TensorId,
    pub v_se_a: TensorId,
    pub v_se_e: TensorId,
    pub v_loc_a: TensorId,
    pub v_loc_e: TensorId,
    pub v_glo: TensorId,
    pub reliable_a: Vec<usize>,
    pub reliable_e: Vec<usize>,
}

/// x @ w + b with the bias broadcast over rows.
pub fn affine(g: &mut Graph, store: &ParamStore, x: TensorId, prefix: &str) -> Result<TensorId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    let (rows, _) = g.dims(y);
    let b = g.expand_rows(b, rows)?;
    g.add(y, b)
}

/// Three independent frame-wise projections into the shared latent space.
pub fn encode_individual(
    g: &mut Graph,
    store: &ParamStore,
    features: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let a = affine(g, store, features, "video.fc_a")?;
    let e = affine(g, store, features, "video.fc_e")?;
    let gl = affine(g, store, features, "video.fc_g")?;
    Ok((a, e, gl))
}

/// Apply one concept head (conv, shared batch norm, sigmoid) across a batch
/// of per-sample inputs. Batch statistics pool over every row of every
/// sample; outputs are split back per sample.
pub fn concept_head_batch(
    g: &mut Graph,
    store: &mut ParamStore,
    inputs: &[TensorId],
    conv_name: &str,
    bn_key: &str,
    kernel: usize,
) -> Result<Vec<TensorId>> {
    let w = g.param(store, conv_name)?;
    let convs: Vec<TensorId> = inputs
        .iter()
        .map(|&x| g.conv1d_same(x, w, kernel))
        .collect::<Result<_>>()?;
    let gamma = g.param(store, &format!("{bn_key}.gamma"))?;
    let beta = g.param(store, &format!("{bn_key}.beta"))?;
    let stacked = g.concat_rows(&convs)?;
    let normed = g.batch_norm(store, stacked, gamma, beta, bn_key)?;
    let activated = g.sigmoid(normed);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for &x in inputs {
        let (rows, _) = g.dims(x);
        outputs.push(g.slice_rows(activated, offset, rows)?);
        offset += rows;
    }
    Ok(outputs)
}

/// Frame-level action/entity concept confidences for a single video.
pub fn concept_heads(
    g: &mut Graph,
    store: &mut ParamStore,
    v_ind_a: TensorId,
    v_ind_e: TensorId,
) -> Result<(TensorId, TensorId)> {
    let l_a = concept_head_batch(g, store, &[v_ind_a], "video.head_a.conv", "video.head_a", ACTION_KERNEL)?;
    let l_e = concept_head_batch(g, store, &[v_ind_e], "video.head_e.conv", "video.head_e", ENTITY_KERNEL)?;
    Ok((l_a[0], l_e[0]))
}

/// Squeeze-and-excitation: per-channel gate from the frame-mean, applied
/// back over all frames.
pub fn se_block(g: &mut Graph, store: &ParamStore, x: TensorId, prefix: &str) -> Result<TensorId> {
    let (rows, _) = g.dims(x);
    let squeezed = g.mean_axis0(x);
    let hidden = affine_named(g, store, squeezed, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let hidden = g.relu(hidden);
    let gate = affine_named(g, store, hidden, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
    let gate = g.sigmoid(gate);
    let gate = g.expand_rows(gate, rows)?;
    g.mul(x, gate)
}

fn affine_named(g: &mut Graph, store: &ParamStore, x: TensorId, w: &str, b: &str) -> Result<TensorId> {
    let w = g.param(store, w)?;
    let b = g.param(store, b)?;
    let y = g.matmul(x, w)?;
    let (rows, _) = g.dims(y);
    let b = g.expand_rows(b, rows)?;
    g.add(y, b)
}

/// Number of top frame confidences pooled per concept.
pub fn mil_tau(rows: usize) -> usize {
    (rows / 8).max(1)
}

/// Mean of the tau largest per-concept confidences over rows: l is
/// [rows, K], the result is [1, K].
pub fn mil_pool(g: &mut Graph, l: TensorId) -> Result<TensorId> {
    let (rows, _) = g.dims(l);
    let top = g.topk_cols(l, mil_tau(rows))?;
    Ok(g.mean_axis0(top))
}

/// Indices of the n highest confidences, descending, ties to lower index.
/// n is truncated to the number of concepts.
pub fn select_reliable_concepts(p: &[f32], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(n.min(p.len()));
    order
}

/// One clip row per reliable action concept: the 5-frame window (clamped at
/// the edges) around the highest-confidence frame, mean-pooled.
pub fn build_local_action(
    g: &mut Graph,
    v_se_a: TensorId,
    l_a: TensorId,
    reliable: &[usize],
) -> Result<TensorId> {
    let (rows, _) = g.dims(v_se_a);
    let mut clip_rows = Vec::with_capacity(reliable.len());
    for &concept in reliable {
        let center = argmax_col(g.values(l_a), g.dims(l_a).1, concept);
        let lo = center.saturating_sub(ACTION_WINDOW_HALF);
        let hi = (center + ACTION_WINDOW_HALF).min(rows - 1);
        let window = g.slice_rows(v_se_a, lo, hi - lo + 1)?;
        clip_rows.push(g.mean_axis0(window));
    }
    g.concat_rows(&clip_rows)
}

/// One row per reliable entity concept: the 3 highest-confidence frames
/// (possibly non-contiguous; all frames when fewer exist), mean-pooled.
pub fn build_local_entity(
    g: &mut Graph,
    v_se_e: TensorId,
    l_e: TensorId,
    reliable: &[usize],
) -> Result<TensorId> {
    let (rows, cols) = {
        let (r, _) = g.dims(v_se_e);
        let (_, k) = g.dims(l_e);
        (r, k)
    };
    let mut merged = Vec::with_capacity(reliable.len());
    for &concept in reliable {
        let mut frames = top_frames_for_col(g.values(l_e), cols, concept, ENTITY_FRAMES.min(rows));
        frames.sort_unstable();
        let picked = g.gather_rows(v_se_e, &frames)?;
        merged.push(g.mean_axis0(picked));
    }
    g.concat_rows(&merged)
}

fn argmax_col(values: &[f32], cols: usize, col: usize) -> usize {
    let rows = values.len() / cols;
    let mut best = 0;
    for r in 1..rows {
        if values[r * cols + col] > values[best * cols + col] {
            best = r;
        }
    }
    best
}

fn top_frames_for_col(values: &[f32], cols: usize, col: usize, count: usize) -> Vec<usize> {
    let rows = values.len() / cols;
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| values[b * cols + col].total_cmp(&values[a * cols + col]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Attention-weighted frame average: alpha = softmax(x W), out = alpha^T x.
pub fn global_attention(g: &mut Graph, store: &ParamStore, x: TensorId, weight_name: &str) -> Result<TensorId> {
    let w = g.param(store, weight_name)?;
    let logits = g.matmul(x, w)?;
    let logits_row = g.transpose(logits);
    let alpha = g.softmax_rows(logits_row);
    g.matmul(alpha, x)
}

/// Encode a batch of videos in one graph. Concept-head batch norm pools
/// statistics over all frames of all batch members.
pub fn encode_video_batch(
    g: &mut Graph,
    store: &mut ParamStore,
    model: &HanetModel,
    features: &[&Tensor],
    n_a: usize,
    n_e: usize,
) -> Result<Vec<VideoEncodingIds>> {
    if features.is_empty() {
        return Err(Error::invalid("encode_video_batch: empty batch".to_string()));
    }
    let mut ind = Vec::with_capacity(features.len());
    for &f in features {
        let (_, cols) = f.dims2()?;
        if cols != model.dims.video_dim {
            return Err(Error::Shape {
                op: "encode_video_batch",
                lhs: f.shape.clone(),
                rhs: vec![model.dims.video_dim],
            });
        }
        let x = g.constant(f)?;
        ind.push(encode_individual(g, store, x)?);
    }
    let ind_a: Vec<TensorId> = ind.iter().map(|t| t.0).collect();
    let ind_e: Vec<TensorId> = ind.iter().map(|t| t.1).collect();
    let l_a_all = concept_head_batch(g, store, &ind_a, "video.head_a.conv", "video.head_a", ACTION_KERNEL)?;
    let l_e_all = concept_head_batch(g, store, &ind_e, "video.head_e.conv", "video.head_e", ENTITY_KERNEL)?;

    let mut encodings = Vec::with_capacity(features.len());
    for (i, &(v_ind_a, v_ind_e, v_ind_g)) in ind.iter().enumerate() {
        let l_a = l_a_all[i];
        let l_e = l_e_all[i];
        let v_se_a = se_block(g, store, v_ind_a, "video.se_a")?;
        let v_se_e = se_block(g, store, v_ind_e, "video.se_e")?;
        let p_a = mil_pool(g, l_a)?;
        let p_e = mil_pool(g, l_e)?;
        let reliable_a = select_reliable_concepts(g.values(p_a), n_a);
        let reliable_e = select_reliable_concepts(g.values(p_e), n_e);
        let v_loc_a = build_local_action(g, v_se_a, l_a, &reliable_a)?;
        let v_loc_e = build_local_entity(g, v_se_e, l_e, &reliable_e)?;
        let v_glo = global_attention(g, store, v_ind_g, "video.attn.w")?;
        encodings.push(VideoEncodingIds {
            v_ind_a,
            v_ind_e,
            v_ind_g,
            l_a,
            l_e,
            p_a,
            p_e,
            v_se_a,
            v_se_e,
            v_loc_a,
            v_loc_e,
            v_glo,
            reliable_a,
            reliable_e,
        });
    }
    Ok(encodings)
}

/// Extracted (value-level) encodings of one video.
#[derive(Debug, Clone)]
pub struct VideoEncodings {
    pub v_ind_a: Tensor,
    pub v_ind_e: Tensor,
    pub v_ind_g: Tensor,
    pub l_a: Tensor,
    pub l_e: Tensor,
    pub p_a: Tensor,
    pub p_e: Tensor,
    pub v_se_a: Tensor,
    pub v_se_e: Tensor,
    pub v_loc_a: Tensor,
    pub v_loc_e: Tensor,
    pub v_glo: Tensor,
    pub reliable_a: Vec<usize>,
    pub reliable_e: Vec<usize>,
}

impl VideoEncodings {
    pub fn extract(g: &Graph, ids: &VideoEncodingIds) -> Self {
        VideoEncodings {
            v_ind_a: g.to_tensor(ids.v_ind_a),
            v_ind_e: g.to_tensor(ids.v_ind_e),
            v_ind_g: g.to_tensor(ids.v_ind_g),
            l_a: g.to_tensor(ids.l_a),
            l_e: g.to_tensor(ids.l_e),
            p_a: g.to_tensor(ids.p_a),
            p_e: g.to_tensor(ids.p_e),
            v_se_a: g.to_tensor(ids.v_se_a),
            v_se_e: g.to_tensor(ids.v_se_e),
            v_loc_a: g.to_tensor(ids.v_loc_a),
            v_loc_e: g.to_tensor(ids.v_loc_e),
            v_glo: g.to_tensor(ids.v_glo),
            reliable_a: ids.reliable_a.clone(),
            reliable_e: ids.reliable_e.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::io::FeatureSet;

    fn tiny_model(latent: usize, video_dim: usize, k_a: usize, k_e: usize) -> (ParamStore, HanetModel) {
        let mut cfg = TrainConfig::default();
        cfg.latent_dim = latent;
        cfg.role_types = 4;
        cfg.seed = 5;
        let mut embeddings = FeatureSet::new(video_dim);
        embeddings
            .insert("man", Tensor::matrix(1, video_dim, vec![0.1; video_dim]).unwrap())
            .unwrap();
        let mut store = ParamStore::new();
        let model = HanetModel::init(&mut store, &cfg, video_dim, &embeddings, k_a, k_e).unwrap();
        (store, model)
    }

    fn random_features(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encode_individual_shapes_and_zero_input() {
        let (store, _model) = tiny_model(8, 16, 3, 4);
        let mut g = Graph::training();
        let zeros = Tensor::zeros(vec![4, 16]);
        let x = g.constant(&zeros).unwrap();
        let (a, e, gl) = encode_individual(&mut g, &store, x).unwrap();
        assert_eq!(g.dims(a), (4, 8));
        assert_eq!(g.dims(e), (4, 8));
        assert_eq!(g.dims(gl), (4, 8));
        // Zero input with zero bias gives zero output.
        assert!(g.values(a).iter().all(|&v| v == 0.0));

        // The three projections use distinct parameters, so a nonzero input
        // yields three different outputs.
        let feats = random_features(4, 16, 3);
        let x = g.constant(&feats).unwrap();
        let (a, e, gl) = encode_individual(&mut g, &store, x).unwrap();
        assert_ne!(g.values(a), g.values(e));
        assert_ne!(g.values(a), g.values(gl));
    }

    #[test]
    fn concept_head_outputs_stay_in_unit_interval() {
        let (mut store, _model) = tiny_model(8, 16, 3, 4);
        let mut g = Graph::training();
        let feats = random_features(1, 16, 9);
        let x = g.constant(&feats).unwrap();
        let (a, e, _) = encode_individual(&mut g, &store, x).unwrap();
        let (l_a, l_e) = concept_heads(&mut g, &mut store, a, e).unwrap();
        assert_eq!(g.dims(l_a), (1, 3));
        assert_eq!(g.dims(l_e), (1, 4));
        for &v in g.values(l_a).iter().chain(g.values(l_e)) {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn se_block_shrinks_and_keeps_shape() {
        let (store, _model) = tiny_model(8, 16, 3, 4);
        let mut g = Graph::training();
        let feats = random_features(4, 16, 11);
        let x = g.constant(&feats).unwrap();
        let (a, _, _) = encode_individual(&mut g, &store, x).unwrap();
        let se = se_block(&mut g, &store, a, "video.se_a").unwrap();
        assert_eq!(g.dims(se), g.dims(a));
        for (&y, &x) in g.values(se).iter().zip(g.values(a)) {
            assert!(y.abs() <= x.abs() + 1e-7, "gate must shrink: {y} vs {x}");
        }
    }

    #[test]
    fn se_block_is_frame_permutation_equivariant() {
        let (store, _model) = tiny_model(8, 16, 3, 4);
        let feats = random_features(4, 16, 13);
        let perm = [2usize, 0, 3, 1];
        let mut permuted_values = vec![0.0; 4 * 16];
        for (dst, &src) in perm.iter().enumerate() {
            permuted_values[dst * 16..(dst + 1) * 16].copy_from_slice(&feats.values[src * 16..(src + 1) * 16]);
        }
        let permuted = Tensor::matrix(4, 16, permuted_values).unwrap();

        let mut g = Graph::training();
        let x = g.constant(&feats).unwrap();
        let (a, _, _) = encode_individual(&mut g, &store, x).unwrap();
        let se = se_block(&mut g, &store, a, "video.se_a").unwrap();
        let base = g.values(se).to_vec();

        let xp = g.constant(&permuted).unwrap();
        let (ap, _, _) = encode_individual(&mut g, &store, xp).unwrap();
        let sep = se_block(&mut g, &store, ap, "video.se_a").unwrap();
        let permuted_out = g.values(sep).to_vec();

        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = permuted_out[dst * 8 + c];
                let b = base[src * 8 + c];
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mil_pool_matches_hand_counts() {
        let mut g = Graph::training();
        // N=4 => tau=1: column max.
        let l = g.constant_matrix(4, 1, vec![0.9, 0.1, 0.5, 0.7]).unwrap();
        let p = mil_pool(&mut g, l).unwrap();
        assert!((g.values(p)[0] - 0.9).abs() < 1e-7);

        // N=16 => tau=2: mean of the top two.
        let mut col = vec![0.1f32; 16];
        col[3] = 0.8;
        col[11] = 0.6;
        let l = g.constant_matrix(16, 1, col).unwrap();
        let p = mil_pool(&mut g, l).unwrap();
        assert!((g.values(p)[0] - 0.7).abs() < 1e-7);

        // Constant column pools to the constant for any tau.
        let l = g.constant_matrix(9, 1, vec![0.42; 9]).unwrap();
        let p = mil_pool(&mut g, l).unwrap();
        assert!((g.values(p)[0] - 0.42).abs() < 1e-7);
    }

    #[test]
    fn reliable_concept_selection_rules() {
        assert_eq!(select_reliable_concepts(&[0.2, 0.9, 0.5], 2), vec![1, 2]);
        let all = select_reliable_concepts(&[0.1, 0.4, 0.3, 0.2], 4);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(select_reliable_concepts(&[0.5, 0.5], 1), vec![0]);
        // n beyond K truncates.
        assert_eq!(select_reliable_concepts(&[0.5, 0.6], 5).len(), 2);
    }

    #[test]
    fn local_action_window_clamps_and_centers() {
        let mut g = Graph::training();
        // N=3: the window always clamps to all frames.
        let se = g.constant_matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let l = g.constant_matrix(3, 1, vec![0.1, 0.9, 0.2]).unwrap();
        let loc = build_local_action(&mut g, se, l, &[0]).unwrap();
        assert_eq!(g.values(loc), &[3.0, 4.0]);

        // One-hot confidence at frame 5 of N=11 selects frames 3..=7.
        let se_vals: Vec<f32> = (0..11).map(|r| r as f32).collect();
        let se = g.constant_matrix(11, 1, se_vals).unwrap();
        let mut conf = vec![0.01f32; 11];
        conf[5] = 0.99;
        let l = g.constant_matrix(11, 1, conf).unwrap();
        let loc = build_local_action(&mut g, se, l, &[0]).unwrap();
        assert_eq!(g.values(loc), &[5.0]);
    }

    #[test]
    fn local_entity_picks_top_three_frames() {
        let mut g = Graph::training();
        let se_vals: Vec<f32> = (0..4).map(|r| r as f32 * 10.0).collect();
        let se = g.constant_matrix(4, 1, se_vals).unwrap();
        let l = g.constant_matrix(4, 1, vec![0.9, 0.1, 0.8, 0.7]).unwrap();
        let loc = build_local_entity(&mut g, se, l, &[0]).unwrap();
        // Frames {0, 2, 3} -> mean of 0, 20, 30.
        assert!((g.values(loc)[0] - 50.0 / 3.0).abs() < 1e-5);

        // N=2 < 3 uses every frame.
        let se = g.constant_matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let l = g.constant_matrix(2, 1, vec![0.5, 0.6]).unwrap();
        let loc = build_local_entity(&mut g, se, l, &[0]).unwrap();
        assert!((g.values(loc)[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn global_attention_is_convex_over_frames() {
        let (store, _model) = tiny_model(8, 16, 3, 4);
        let mut g = Graph::training();

        // Single frame: output equals it.
        let feats = random_features(1, 16, 21);
        let x = g.constant(&feats).unwrap();
        let (_, _, gl) = encode_individual(&mut g, &store, x).unwrap();
        let pooled = global_attention(&mut g, &store, gl, "video.attn.w").unwrap();
        assert_eq!(g.values(pooled), g.values(gl));

        // Pooled coordinates lie inside the per-column min/max envelope.
        let feats = random_features(5, 16, 22);
        let x = g.constant(&feats).unwrap();
        let (_, _, gl) = encode_individual(&mut g, &store, x).unwrap();
        let pooled = global_attention(&mut g, &store, gl, "video.attn.w").unwrap();
        let rows = g.values(gl).to_vec();
        let out = g.values(pooled).to_vec();
        for c in 0..8 {
            let col: Vec<f32> = (0..5).map(|r| rows[r * 8 + c]).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(out[c] >= lo - 1e-5 && out[c] <= hi + 1e-5);
        }
    }

    #[test]
    fn full_encoding_satisfies_the_shape_contract() {
        let (mut store, model) = tiny_model(8, 16, 3, 4);
        for n in [1usize, 2, 7, 19] {
            let feats = random_features(n, 16, 100 + n as u64);
            let mut g = Graph::training();
            let enc = encode_video_batch(&mut g, &mut store, &model, &[&feats], 2, 3).unwrap();
            let enc = &enc[0];
            assert_eq!(g.dims(enc.v_ind_a), (n, 8));
            assert_eq!(g.dims(enc.l_a), (n, 3));
            assert_eq!(g.dims(enc.l_e), (n, 4));
            assert_eq!(g.dims(enc.p_a), (1, 3));
            assert_eq!(g.dims(enc.v_loc_a), (2, 8));
            assert_eq!(g.dims(enc.v_loc_e), (3, 8));
            assert_eq!(g.dims(enc.v_glo), (1, 8));
            assert!(g.values(enc.p_a).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
