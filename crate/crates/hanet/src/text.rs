//! Text branch: trainable word embeddings, a bidirectional GRU, verb/noun
//! concept heads, and a one-layer relational GCN over the semantic-role
//! graph that yields local and global sentence representations.

use crate::corpus::{CaptionAnnotation, RoleDictionary, EVENT_EDGE_TYPE};
use crate::error::{Error, Result};
use crate::model::{HanetModel, ENTITY_KERNEL};
use crate::tensor::{Graph, ParamStore, Tensor, TensorId};
use crate::video::{concept_head_batch, global_attention, mil_pool};

/// Graph handles for every representation of one encoded caption. Levels
/// with no verbs (or nouns) are absent rather than zero-row tensors.
pub struct TextEncodingIds {
    pub s_ind: TensorId,
    pub s_ind_a: Option<TensorId>,
    pub s_ind_e: Option<TensorId>,
    pub s_ind_g: TensorId,
    pub l_a: Option<TensorId>,
    pub l_e: Option<TensorId>,
    pub p_a: Option<TensorId>,
    pub p_e: Option<TensorId>,
    pub s_loc_a: Option<TensorId>,
    pub s_loc_e: Option<TensorId>,
    pub s_glo: TensorId,
}

/// Look up (trainable) embedding rows for each token; unknown words share
/// the learned OOV row.
pub fn embed_tokens(g: &mut Graph, store: &ParamStore, model: &HanetModel, tokens: &[String]) -> Result<TensorId> {
    if tokens.is_empty() {
        return Err(Error::invalid("embed_tokens: empty caption".to_string()));
    }
    let table = g.param(store, "text.embed")?;
    let rows: Vec<usize> = tokens.iter().map(|t| model.word_row(t)).collect();
    g.gather_rows(table, &rows)
}

fn gru_gate(
    g: &mut Graph,
    store: &ParamStore,
    x: TensorId,
    h: TensorId,
    prefix: &str,
    gate: &str,
) -> Result<TensorId> {
    let w = g.param(store, &format!("{prefix}.w{gate}"))?;
    let u = g.param(store, &format!("{prefix}.u{gate}"))?;
    let b = g.param(store, &format!("{prefix}.b{gate}"))?;
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add(s, b)
}

/// One GRU direction over the token embeddings; returns [M, D] hidden
/// states in token order. `reverse` walks the sequence back to front.
fn gru_direction(
    g: &mut Graph,
    store: &ParamStore,
    embeddings: TensorId,
    prefix: &str,
    reverse: bool,
) -> Result<TensorId> {
    let (m, _) = g.dims(embeddings);
    let d = store.trainable(&format!("{prefix}.uz"))?.shape[0];
    let mut h = g.constant_matrix(1, d, vec![0.0; d])?;
    let mut states: Vec<Option<TensorId>> = vec![None; m];
    let steps: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for t in steps {
        let x = g.slice_rows(embeddings, t, 1)?;
        let z_pre = gru_gate(g, store, x, h, prefix, "z")?;
        let z = g.sigmoid(z_pre);
        let r_pre = gru_gate(g, store, x, h, prefix, "r")?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let wn = g.param(store, &format!("{prefix}.wn"))?;
        let un = g.param(store, &format!("{prefix}.un"))?;
        let bn = g.param(store, &format!("{prefix}.bn"))?;
        let xw = g.matmul(x, wn)?;
        let hu = g.matmul(rh, un)?;
        let n_pre = g.add(xw, hu)?;
        let n_pre = g.add(n_pre, bn)?;
        let n = g.tanh(n_pre);
        // h' = z*h + (1-z)*n: a convex blend, so |h| stays below 1.
        let zh = g.mul(z, h)?;
        let neg_z = g.mul_scalar(z, -1.0);
        let one_minus_z = g.add_scalar(neg_z, 1.0);
        let zn = g.mul(one_minus_z, n)?;
        h = g.add(zh, zn)?;
        states[t] = Some(h);
    }
    let ordered: Vec<TensorId> = states.into_iter().map(|s| s.unwrap()).collect();
    g.concat_rows(&ordered)
}

/// Mean of the forward and backward GRU passes, both from zero states.
pub fn bigru_encode(g: &mut Graph, store: &ParamStore, embeddings: TensorId) -> Result<TensorId> {
    let fwd = gru_direction(g, store, embeddings, "text.gru.f", false)?;
    let bwd = gru_direction(g, store, embeddings, "text.gru.b", true)?;
    let sum = g.add(fwd, bwd)?;
    Ok(g.mul_scalar(sum, 0.5))
}

/// Typed directed edge (dst receives a message from src).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleEdge {
    pub dst: usize,
    pub src: usize,
    pub edge_type: usize,
}

/// Node layout and typed edges of one caption's semantic-role graph.
/// Node 0 is the event node, verb nodes follow in position order, then noun
/// nodes in record order.
#[derive(Debug, Clone)]
pub struct RoleGraph {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub edges: Vec<RoleEdge>,
    /// Token position per node (None for the event node); fixes a canonical
    /// neighbor order that does not depend on record order.
    pub token_pos: Vec<Option<usize>>,
}

impl RoleGraph {
    pub fn num_nodes(&self) -> usize {
        1 + self.num_verbs + self.num_nouns
    }

    /// Neighbors of `node` as (src, edge_type), sorted by source token
    /// position (event node first).
    pub fn neighbors(&self, node: usize) -> Vec<(usize, usize)> {
        let mut nbrs: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|e| e.dst == node)
            .map(|e| (e.src, e.edge_type))
            .collect();
        nbrs.sort_by_key(|&(src, _)| match self.token_pos[src] {
            None => (0usize, 0usize),
            Some(pos) => (1, pos),
        });
        nbrs
    }
}

/// Build the role graph: event<->verb edges carry the reserved type, noun
/// edges carry their role's dictionary type, and governorless nouns attach
/// to the event node with the reserved type.
pub fn build_role_graph(ann: &CaptionAnnotation, roles: &RoleDictionary) -> RoleGraph {
    let num_verbs = ann.verbs.len();
    let num_nouns = ann.nouns.len();
    let mut token_pos = vec![None];
    token_pos.extend(ann.verbs.iter().map(|&v| Some(v)));
    token_pos.extend(ann.nouns.iter().map(|r| Some(r.idx)));

    let mut edges = Vec::new();
    for vi in 0..num_verbs {
        let node = 1 + vi;
        edges.push(RoleEdge { dst: 0, src: node, edge_type: EVENT_EDGE_TYPE });
        edges.push(RoleEdge { dst: node, src: 0, edge_type: EVENT_EDGE_TYPE });
    }
    for (ni, rec) in ann.nouns.iter().enumerate() {
        let node = 1 + num_verbs + ni;
        match rec.verb_idx {
            Some(gov) => {
                let verb_node = 1 + ann.verbs.iter().position(|&v| v == gov).expect("validated governor");
                let ty = roles.edge_type(&rec.role);
                edges.push(RoleEdge { dst: verb_node, src: node, edge_type: ty });
                edges.push(RoleEdge { dst: node, src: verb_node, edge_type: ty });
            }
            None => {
                edges.push(RoleEdge { dst: 0, src: node, edge_type: EVENT_EDGE_TYPE });
                edges.push(RoleEdge { dst: node, src: 0, edge_type: EVENT_EDGE_TYPE });
            }
        }
    }
    RoleGraph { num_verbs, num_nouns, edges, token_pos }
}

/// One modified relational-GCN layer with residual connections.
///
/// For node i: g1_i = g0_i + sum_j beta_ij * (role_emb(type_ij) ⊙ (g0_j W_t))
/// where beta is a scaled dot-product softmax over the neighborhood.
/// Returns (s_glo, s_loc_a, s_loc_e); the local parts are None when the
/// caption has no verbs or no nouns.
pub fn relational_gcn(
    g: &mut Graph,
    store: &ParamStore,
    graph_def: &RoleGraph,
    node_embeddings: TensorId,
) -> Result<(TensorId, Option<TensorId>, Option<TensorId>)> {
    let (num_nodes, d) = g.dims(node_embeddings);
    debug_assert_eq!(num_nodes, graph_def.num_nodes());
    let wt = g.param(store, "text.gcn.wt")?;
    let wr = g.param(store, "text.gcn.wr")?;
    let wphi = g.param(store, "text.gcn.wphi")?;
    let wpsi = g.param(store, "text.gcn.wpsi")?;
    let transformed = g.matmul(node_embeddings, wt)?;
    let phi = g.matmul(node_embeddings, wphi)?;
    let psi = g.matmul(node_embeddings, wpsi)?;
    let scale = 1.0 / (d as f32).sqrt();

    let mut updated = Vec::with_capacity(num_nodes);
    for i in 0..num_nodes {
        let residual = g.slice_rows(node_embeddings, i, 1)?;
        let nbrs = graph_def.neighbors(i);
        if nbrs.is_empty() {
            updated.push(residual);
            continue;
        }
        let srcs: Vec<usize> = nbrs.iter().map(|&(s, _)| s).collect();
        let phi_i = g.slice_rows(phi, i, 1)?;
        let psi_nbr = g.gather_rows(psi, &srcs)?;
        let psi_t = g.transpose(psi_nbr);
        let scores = g.matmul(phi_i, psi_t)?;
        let scores = g.mul_scalar(scores, scale);
        let beta = g.softmax_rows(scores);

        let mut messages = Vec::with_capacity(nbrs.len());
        for &(src, edge_type) in &nbrs {
            let t_src = g.slice_rows(transformed, src, 1)?;
            let role_emb = g.gather_rows(wr, &[edge_type])?;
            messages.push(g.mul(t_src, role_emb)?);
        }
        let stacked = g.concat_rows(&messages)?;
        let agg = g.matmul(beta, stacked)?;
        updated.push(g.add(residual, agg)?);
    }
    let all = g.concat_rows(&updated)?;
    let s_glo = g.slice_rows(all, 0, 1)?;
    let s_loc_a = if graph_def.num_verbs > 0 {
        Some(g.slice_rows(all, 1, graph_def.num_verbs)?)
    } else {
        None
    };
    let s_loc_e = if graph_def.num_nouns > 0 {
        Some(g.slice_rows(all, 1 + graph_def.num_verbs, graph_def.num_nouns)?)
    } else {
        None
    };
    Ok((s_glo, s_loc_a, s_loc_e))
}

/// Encode a batch of captions in one graph. Concept-head batch norm pools
/// over the verb (resp. noun) rows of every caption in the batch.
pub fn encode_text_batch(
    g: &mut Graph,
    store: &mut ParamStore,
    model: &HanetModel,
    annotations: &[&CaptionAnnotation],
    roles: &RoleDictionary,
) -> Result<Vec<TextEncodingIds>> {
    if annotations.is_empty() {
        return Err(Error::invalid("encode_text_batch: empty batch".to_string()));
    }
    struct Partial {
        s_ind: TensorId,
        s_ind_a: Option<TensorId>,
        s_ind_e: Option<TensorId>,
        s_ind_g: TensorId,
    }
    let mut partials = Vec::with_capacity(annotations.len());
    for &ann in annotations {
        ann.validate()?;
        let embeddings = embed_tokens(g, store, model, &ann.tokens)?;
        let s_ind = bigru_encode(g, store, embeddings)?;
        let s_ind_a = if ann.verbs.is_empty() {
            None
        } else {
            Some(g.gather_rows(s_ind, &ann.verbs)?)
        };
        let noun_positions: Vec<usize> = ann.nouns.iter().map(|r| r.idx).collect();
        let s_ind_e = if noun_positions.is_empty() {
            None
        } else {
            Some(g.gather_rows(s_ind, &noun_positions)?)
        };
        let s_ind_g = global_attention(g, store, s_ind, "text.attn.w")?;
        partials.push(Partial { s_ind, s_ind_a, s_ind_e, s_ind_g });
    }

    // Shared batch norm across every caption's verb rows (then noun rows).
    let verb_inputs: Vec<TensorId> = partials.iter().filter_map(|p| p.s_ind_a).collect();
    let mut verb_heads = if verb_inputs.is_empty() {
        Vec::new()
    } else {
        concept_head_batch(g, store, &verb_inputs, "text.head_a.conv", "text.head_a", ENTITY_KERNEL)?
    }
    .into_iter();
    let noun_inputs: Vec<TensorId> = partials.iter().filter_map(|p| p.s_ind_e).collect();
    let mut noun_heads = if noun_inputs.is_empty() {
        Vec::new()
    } else {
        concept_head_batch(g, store, &noun_inputs, "text.head_e.conv", "text.head_e", ENTITY_KERNEL)?
    }
    .into_iter();

    let mut encodings = Vec::with_capacity(annotations.len());
    for (ann, partial) in annotations.iter().zip(partials) {
        let l_a = partial.s_ind_a.map(|_| verb_heads.next().expect("head per verb input"));
        let l_e = partial.s_ind_e.map(|_| noun_heads.next().expect("head per noun input"));
        let p_a = match l_a {
            Some(l) => Some(mil_pool(g, l)?),
            None => None,
        };
        let p_e = match l_e {
            Some(l) => Some(mil_pool(g, l)?),
            None => None,
        };

        let graph_def = build_role_graph(ann, roles);
        let mut node_rows = vec![partial.s_ind_g];
        if let Some(a) = partial.s_ind_a {
            node_rows.push(a);
        }
        if let Some(e) = partial.s_ind_e {
            node_rows.push(e);
        }
        let nodes = g.concat_rows(&node_rows)?;
        let (s_glo, s_loc_a, s_loc_e) = relational_gcn(g, store, &graph_def, nodes)?;

        encodings.push(TextEncodingIds {
            s_ind: partial.s_ind,
            s_ind_a: partial.s_ind_a,
            s_ind_e: partial.s_ind_e,
            s_ind_g: partial.s_ind_g,
            l_a,
            l_e,
            p_a,
            p_e,
            s_loc_a,
            s_loc_e,
            s_glo,
        });
    }
    Ok(encodings)
}

/// Extracted (value-level) encodings of one caption.
#[derive(Debug, Clone)]
pub struct TextEncodings {
    pub s_ind: Tensor,
    pub s_ind_a: Option<Tensor>,
    pub s_ind_e: Option<Tensor>,
    pub s_ind_g: Tensor,
    pub l_a: Option<Tensor>,
    pub l_e: Option<Tensor>,
    pub p_a: Option<Tensor>,
    pub p_e: Option<Tensor>,
    pub s_loc_a: Option<Tensor>,
    pub s_loc_e: Option<Tensor>,
    pub s_glo: Tensor,
}

impl TextEncodings {
    pub fn extract(g: &Graph, ids: &TextEncodingIds) -> Self {
        let take = |id: Option<TensorId>| id.map(|id| g.to_tensor(id));
        TextEncodings {
            s_ind: g.to_tensor(ids.s_ind),
            s_ind_a: take(ids.s_ind_a),
            s_ind_e: take(ids.s_ind_e),
            s_ind_g: g.to_tensor(ids.s_ind_g),
            l_a: take(ids.l_a),
            l_e: take(ids.l_e),
            p_a: take(ids.p_a),
            p_e: take(ids.p_e),
            s_loc_a: take(ids.s_loc_a),
            s_loc_e: take(ids.s_loc_e),
            s_glo: g.to_tensor(ids.s_glo),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::corpus::{fallback_role_parse, NounRecord, PosLexicon, DEFAULT_POS_LEXICON};
    use crate::io::FeatureSet;

    fn setup(latent: usize) -> (ParamStore, HanetModel, RoleDictionary) {
        let mut cfg = TrainConfig::default();
        cfg.latent_dim = latent;
        cfg.role_types = 4;
        cfg.seed = 17;
        let mut embeddings = FeatureSet::new(6);
        for (i, w) in ["a", "man", "sings", "song", "red", "car"].iter().enumerate() {
            let vals: Vec<f32> = (0..6).map(|j| ((i * 6 + j) as f32).sin() * 0.3).collect();
            embeddings.insert(w, Tensor::matrix(1, 6, vals).unwrap()).unwrap();
        }
        let mut store = ParamStore::new();
        let model = HanetModel::init(&mut store, &cfg, 6, &embeddings, 3, 4).unwrap();
        let lex = PosLexicon::parse(DEFAULT_POS_LEXICON).unwrap();
        let ann = fallback_role_parse("v", "c", &tok("man sings song"), &lex);
        let roles = RoleDictionary::build([&ann], 4).unwrap();
        (store, model, roles)
    }

    fn tok(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn parse(s: &str) -> CaptionAnnotation {
        let lex = PosLexicon::parse(DEFAULT_POS_LEXICON).unwrap();
        fallback_role_parse("v", "c", &tok(s), &lex)
    }

    #[test]
    fn embeddings_share_rows_per_word_and_oov() {
        let (store, model, _) = setup(8);
        let mut g = Graph::training();
        let tokens = tok("man zebra man qqq");
        let emb = embed_tokens(&mut g, &store, &model, &tokens).unwrap();
        assert_eq!(g.dims(emb), (4, 6));
        let v = g.values(emb);
        // Two "man" rows identical; two OOV rows identical.
        assert_eq!(v[0..6], v[12..18]);
        assert_eq!(v[6..12], v[18..24]);
    }

    #[test]
    fn empty_caption_is_rejected() {
        let (store, model, _) = setup(8);
        let mut g = Graph::training();
        assert!(embed_tokens(&mut g, &store, &model, &[]).is_err());
    }

    #[test]
    fn bigru_hidden_coordinates_stay_in_unit_ball() {
        let (store, model, _) = setup(8);
        let mut g = Graph::training();
        let emb = embed_tokens(&mut g, &store, &model, &tok("a man sings song red car")).unwrap();
        let s = bigru_encode(&mut g, &store, emb).unwrap();
        assert_eq!(g.dims(s), (6, 8));
        for &v in g.values(s) {
            assert!(v > -1.0 && v < 1.0, "{v}");
        }

        // Single token still produces one row.
        let emb = embed_tokens(&mut g, &store, &model, &tok("man")).unwrap();
        let s = bigru_encode(&mut g, &store, emb).unwrap();
        assert_eq!(g.dims(s), (1, 8));
    }

    #[test]
    fn role_graph_counts_match_construction() {
        let ann = parse("man sings song");
        let dict = RoleDictionary::build([&ann], 4).unwrap();
        let graph = build_role_graph(&ann, &dict);
        assert_eq!(graph.num_nodes(), 4);
        let event_verb = graph.edges.iter().filter(|e| e.edge_type == EVENT_EDGE_TYPE).count();
        assert_eq!(event_verb, 2);
        let typed = graph.edges.iter().filter(|e| e.edge_type != EVENT_EDGE_TYPE).count();
        assert_eq!(typed, 4);
    }

    #[test]
    fn verbless_nouns_attach_to_the_event_node() {
        let ann = parse("a red car");
        let dict = RoleDictionary::build([&ann], 4).unwrap();
        let graph = build_role_graph(&ann, &dict);
        assert_eq!(graph.num_nodes(), 2);
        assert!(graph
            .edges
            .iter()
            .all(|e| e.edge_type == EVENT_EDGE_TYPE && (e.src == 0 || e.dst == 0)));
        assert_eq!(graph.edges.len(), 2);
    }

    #[test]
    fn unknown_role_maps_to_catch_all() {
        let ann = CaptionAnnotation {
            video_id: "v".into(),
            caption_id: "c".into(),
            tokens: tok("man sings"),
            verbs: vec![1],
            nouns: vec![NounRecord { idx: 0, verb_idx: Some(1), role: "exotic".into() }],
        };
        let base = parse("man sings song");
        let dict = RoleDictionary::build([&base], 4).unwrap();
        let graph = build_role_graph(&ann, &dict);
        let noun_edge = graph.edges.iter().find(|e| e.src == 2).unwrap();
        assert_eq!(noun_edge.edge_type, dict.catch_all());
    }

    #[test]
    fn gcn_keeps_isolated_nodes_and_shapes() {
        let (store, _, _) = setup(8);
        let mut g = Graph::training();
        // Two isolated nodes: output must equal input exactly.
        let graph_def = RoleGraph { num_verbs: 0, num_nouns: 1, edges: vec![], token_pos: vec![None, Some(0)] };
        let nodes = g.constant_matrix(2, 8, (0..16).map(|v| v as f32 * 0.1).collect()).unwrap();
        let (s_glo, s_loc_a, s_loc_e) = relational_gcn(&mut g, &store, &graph_def, nodes).unwrap();
        assert!(s_loc_a.is_none());
        let s_loc_e = s_loc_e.unwrap();
        assert_eq!(g.values(s_glo), &g.values(nodes)[0..8]);
        assert_eq!(g.values(s_loc_e), &g.values(nodes)[8..16]);
    }

    #[test]
    fn full_text_encoding_contract() {
        let (mut store, model, roles) = setup(8);
        let ann = parse("a man sings song");
        let mut g = Graph::training();
        let enc = encode_text_batch(&mut g, &mut store, &model, &[&ann], &roles).unwrap();
        let enc = &enc[0];
        assert_eq!(g.dims(enc.s_ind), (4, 8));
        assert_eq!(g.dims(enc.s_ind_a.unwrap()), (1, 8));
        assert_eq!(g.dims(enc.s_ind_e.unwrap()), (2, 8));
        assert_eq!(g.dims(enc.l_a.unwrap()), (1, 3));
        assert_eq!(g.dims(enc.p_e.unwrap()), (1, 4));
        assert_eq!(g.dims(enc.s_loc_a.unwrap()), (1, 8));
        assert_eq!(g.dims(enc.s_loc_e.unwrap()), (2, 8));
        assert_eq!(g.dims(enc.s_glo), (1, 8));

        // Individual rows are exact row subsets of s_ind.
        let s_ind = g.values(enc.s_ind).to_vec();
        let s_a = g.values(enc.s_ind_a.unwrap());
        assert_eq!(s_a, &s_ind[2 * 8..3 * 8]);

        // One verb => p_s_a equals that verb's confidence row (tau = 1).
        let l_a = g.values(enc.l_a.unwrap()).to_vec();
        assert_eq!(g.values(enc.p_a.unwrap()), &l_a[..]);
    }

    #[test]
    fn verbless_caption_has_no_action_level() {
        let (mut store, model, roles) = setup(8);
        let ann = parse("a red car");
        let mut g = Graph::training();
        let enc = encode_text_batch(&mut g, &mut store, &model, &[&ann], &roles).unwrap();
        let enc = &enc[0];
        assert!(enc.s_ind_a.is_none());
        assert!(enc.l_a.is_none());
        assert!(enc.p_a.is_none());
        assert!(enc.s_loc_a.is_none());
        assert!(enc.s_loc_e.is_some());
    }
}
