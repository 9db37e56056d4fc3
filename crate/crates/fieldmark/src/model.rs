//! The labeling model: prototype aggregation, two attention heads, and
//! fixed-step belief propagation.
//!
//! Given a labeled support graph and an unlabeled query graph with aligned
//! landmarks, the model scores each query field against each label. The
//! landmark-to-field head compares query LF features against per-label
//! prototype features (one prototype per label per landmark) and averages
//! MLP scores over landmarks. The field-to-field head turns each directed
//! query edge into a `K x K` table by scoring its feature against per-label-
//! pair prototypes. Belief propagation then runs a fixed number of
//! synchronous message-passing steps over those tables, in the log domain,
//! starting from the unary distribution (softmax of the LF scores, or
//! uniform for the ablation that isolates the pairwise head).
//!
//! The whole computation is recorded on a [`Tape`], so one backward pass
//! yields gradients for both MLPs through the unrolled propagation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PAIR_FEATURE_DIM;
use crate::graph::{
    build_graph, ff_feature_tensor, lf_feature_tensor, match_landmarks, Document, DocumentGraph,
    LabelSpace, LandmarkMatch, MatchSide, RayConfig,
};
use crate::tensor::{mlp_apply, Grads, MlpIds, MlpParams, NodeId, Tape, Tensor};

/// Raw score substituted for a label (or label pair) never observed on the
/// support side. Softmax turns it into effectively-zero probability without
/// connecting it to the gradient.
pub const ABSENT_SCORE: f64 = -30.0;

/// Probability floor applied to messages before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

/// Where the initial per-field label distribution comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnarySource {
    /// Softmax of the landmark-to-field attention scores.
    LfAttn,
    /// Uniform over labels — isolates the pairwise head.
    Uniform,
}

/// Architecture and propagation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths shared by both scoring MLPs.
    pub hidden: Vec<usize>,
    /// Number of message-passing steps; 0 disables the pairwise head.
    pub bp_steps: usize,
    /// Move the landmark average in front of the MLP (the weaker ablation).
    pub avg_before_attention: bool,
    pub unary_source: UnarySource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            bp_steps: 2,
            avg_before_attention: false,
            unary_source: UnarySource::LfAttn,
        }
    }
}

/// Both scoring MLPs plus the switches that shape the forward pass. Each MLP
/// maps a 16-dim concatenated feature pair to one raw score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lf_mlp: MlpParams,
    pub ff_mlp: MlpParams,
    pub config: ModelConfig,
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![2 * PAIR_FEATURE_DIM];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let lf_mlp = MlpParams::init(&dims, rng);
        let ff_mlp = MlpParams::init(&dims, rng);
        ModelParams { lf_mlp, ff_mlp, config }
    }

    /// All parameter tensors in a stable order (LF layers, then FF layers;
    /// weight before bias within a layer). Gradient vectors, optimizer
    /// state, and checkpoints all align with this order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.lf_mlp.tensors();
        v.extend(self.ff_mlp.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.lf_mlp.tensors_mut();
        v.extend(self.ff_mlp.tensors_mut());
        v
    }
}

/// Per-label mean LF features of the support document.
///
/// `c` has shape `[K, L, 8]`: entry `(k, j)` is the mean feature of support
/// fields labeled `k` relative to landmark `j`. Labels with `count == 0`
/// have no prototype and score [`ABSENT_SCORE`].
#[derive(Clone, Debug, PartialEq)]
pub struct LfPrototypes {
    pub c: Tensor,
    pub count: Vec<usize>,
}

impl LfPrototypes {
    /// Labels that actually occur among support fields, ascending.
    pub fn present_labels(&self) -> Vec<usize> {
        (0..self.count.len()).filter(|&k| self.count[k] > 0).collect()
    }
}

/// Mean FF feature per ordered label pair observed on support edges
/// (self-loop pairs `(k, k)` included). Unobserved pairs have no entry.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FfPrototypes {
    pub entries: BTreeMap<(usize, usize), PairProto>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairProto {
    pub mean: [f64; PAIR_FEATURE_DIM],
    pub count: usize,
}

/// Mean LF feature per `(label, landmark)` over the support's labeled
/// fields. A field type split across several regions contributes every
/// region's feature to its label's mean.
pub fn lf_prototypes(support: &DocumentGraph) -> Result<LfPrototypes> {
    let labels = support
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("support graph carries no labels"))?;
    let (l, k) = (support.n_landmarks(), support.label_space.len());
    let feats = lf_feature_tensor(support)?; // [L, F, 8]
    let f = support.n_fields();

    let mut c = Tensor::zeros(vec![k, l, PAIR_FEATURE_DIM]);
    let mut count = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        count[y] += 1;
        for j in 0..l {
            let src = &feats.data()[(j * f + i) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
            let dst = &mut c.data_mut()[(y * l + j) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for y in 0..k {
        if count[y] > 0 {
            let inv = 1.0 / count[y] as f64;
            for v in &mut c.data_mut()[y * l * PAIR_FEATURE_DIM..(y + 1) * l * PAIR_FEATURE_DIM] {
                *v *= inv;
            }
        }
    }
    Ok(LfPrototypes { c, count })
}

/// Mean FF feature per ordered label pair over the support's edges.
pub fn ff_prototypes(support: &DocumentGraph) -> Result<FfPrototypes> {
    let labels = support
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("support graph carries no labels"))?;
    let feats = ff_feature_tensor(support); // [E, 8]
    let mut sums: BTreeMap<(usize, usize), ([f64; PAIR_FEATURE_DIM], usize)> = BTreeMap::new();
    for (e, &(src, dst)) in support.ff_edges.iter().enumerate() {
        let pair = (labels[src], labels[dst]);
        let row = &feats.data()[e * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
        let entry = sums.entry(pair).or_insert(([0.0; PAIR_FEATURE_DIM], 0));
        for (a, b) in entry.0.iter_mut().zip(row) {
            *a += b;
        }
        entry.1 += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(pair, (sum, n))| {
            let mut mean = sum;
            for v in &mut mean {
                *v /= n as f64;
            }
            (pair, PairProto { mean, count: n })
        })
        .collect();
    Ok(FfPrototypes { entries })
}

/// Landmark-to-field attention scores `S` of shape `[F, K]`.
///
/// For each landmark `j`, field `i`, and present label `k`, the LF MLP
/// scores `concat(feature(j, i), prototype(k, j))`; scores are averaged
/// over the landmark axis. Absent labels score [`ABSENT_SCORE`].
pub fn lfattn_scores(
    tape: &mut Tape,
    q_lf: &Tensor,
    protos: &LfPrototypes,
    lf_ids: &MlpIds,
) -> Result<NodeId> {
    let (l, f) = (q_lf.shape()[0], q_lf.shape()[1]);
    if l == 0 {
        return Err(Error::invalid("landmark-to-field attention needs at least one landmark"));
    }
    let k = protos.count.len();
    let present = protos.present_labels();
    let kp = present.len();

    let mut rows = Vec::with_capacity(l * f * kp * 2 * PAIR_FEATURE_DIM);
    for j in 0..l {
        for i in 0..f {
            let feat = &q_lf.data()[(j * f + i) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
            for &lab in &present {
                let proto =
                    &protos.c.data()[(lab * l + j) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
                rows.extend_from_slice(feat);
                rows.extend_from_slice(proto);
            }
        }
    }
    let input = Tensor::new(vec![l * f * kp, 2 * PAIR_FEATURE_DIM], rows)?;
    let x = tape.leaf(&input);
    let scored = mlp_apply(tape, x, lf_ids); // [L*F*Kp, 1]
    let per_landmark = tape.reshape(scored, vec![l, f * kp]);
    let averaged = tape.mean_axis0(per_landmark); // [F*Kp]
    let grid = tape.reshape(averaged, vec![f, kp]);
    Ok(tape.place_cols(grid, &present, k, ABSENT_SCORE))
}

/// The averaging ablation: LF features and prototypes are each averaged
/// over the landmark axis *first*, then the MLP scores one pooled pair per
/// `(field, label)`. Opposing landmark directions cancel in the pooled
/// feature, which is exactly the information the full head preserves.
pub fn avgattn_scores(
    tape: &mut Tape,
    q_lf: &Tensor,
    protos: &LfPrototypes,
    lf_ids: &MlpIds,
) -> Result<NodeId> {
    let (l, f) = (q_lf.shape()[0], q_lf.shape()[1]);
    if l == 0 {
        return Err(Error::invalid("landmark-to-field attention needs at least one landmark"));
    }
    let k = protos.count.len();
    let present = protos.present_labels();
    let kp = present.len();

    // Pooled query features: mean over landmarks, per field.
    let mut q_bar = vec![0.0; f * PAIR_FEATURE_DIM];
    for j in 0..l {
        for i in 0..f {
            let feat = &q_lf.data()[(j * f + i) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
            for (d, s) in q_bar[i * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM].iter_mut().zip(feat) {
                *d += s / l as f64;
            }
        }
    }
    // Pooled prototypes: mean over landmarks, per label.
    let mut c_bar = vec![0.0; k * PAIR_FEATURE_DIM];
    for &lab in &present {
        for j in 0..l {
            let proto = &protos.c.data()[(lab * l + j) * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
            for (d, s) in
                c_bar[lab * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM].iter_mut().zip(proto)
            {
                *d += s / l as f64;
            }
        }
    }

    let mut rows = Vec::with_capacity(f * kp * 2 * PAIR_FEATURE_DIM);
    for i in 0..f {
        for &lab in &present {
            rows.extend_from_slice(&q_bar[i * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM]);
            rows.extend_from_slice(&c_bar[lab * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM]);
        }
    }
    let input = Tensor::new(vec![f * kp, 2 * PAIR_FEATURE_DIM], rows)?;
    let x = tape.leaf(&input);
    let scored = mlp_apply(tape, x, lf_ids);
    let grid = tape.reshape(scored, vec![f, kp]);
    Ok(tape.place_cols(grid, &present, k, ABSENT_SCORE))
}

/// Pairwise tables in the log domain: shape `[E, K*K]`, row `e` holding
/// `log Q_e` flattened as `src_label * K + dst_label`, normalized so each
/// row exponentiates to a distribution over the `K^2` cells.
///
/// For each edge the FF MLP scores `concat(prototype(k1, k2), feature(e))`
/// for every observed label pair; unobserved pairs get [`ABSENT_SCORE`].
pub fn ffattn_tables(
    tape: &mut Tape,
    q_ff: &Tensor,
    protos: &FfPrototypes,
    ff_ids: &MlpIds,
    k: usize,
) -> Result<NodeId> {
    let e = q_ff.shape()[0];
    let pairs: Vec<&(usize, usize)> = protos.entries.keys().collect();
    let pp = pairs.len();
    if pp == 0 {
        return Err(Error::invalid("no field-pair prototypes on the support side"));
    }
    let col_map: Vec<usize> = pairs.iter().map(|&&(k1, k2)| k1 * k + k2).collect();

    let mut rows = Vec::with_capacity(e * pp * 2 * PAIR_FEATURE_DIM);
    for ei in 0..e {
        let feat = &q_ff.data()[ei * PAIR_FEATURE_DIM..][..PAIR_FEATURE_DIM];
        for &&pair in &pairs {
            rows.extend_from_slice(&protos.entries[&pair].mean);
            rows.extend_from_slice(feat);
        }
    }
    let input = Tensor::new(vec![e * pp, 2 * PAIR_FEATURE_DIM], rows)?;
    let x = tape.leaf(&input);
    let scored = mlp_apply(tape, x, ff_ids); // [E*Pp, 1]
    let grid = tape.reshape(scored, vec![e, pp]);
    let placed = tape.place_cols(grid, &col_map, k * k, ABSENT_SCORE);
    Ok(tape.log_softmax(placed))
}

/// Fixed-step synchronous belief propagation in the log domain.
///
/// Per step, every directed edge `(j -> i)` sends the message
/// `m(c) = sum_l P_j(l) * Q_e(l, c)` computed from the *previous* step's
/// beliefs, and each field folds the incoming messages into its current
/// belief: `P_i <- normalize(P_i * prod m)`. Carrying the belief through
/// the product (rather than rebuilding each row from messages alone) keeps
/// uniform tables a no-op: messages from uniform `Q` are uniform vectors,
/// so `P` never moves — and with `steps = 0` the output *is* the input.
///
/// `q` holds per-edge tables `[E, K*K]` (probabilities, not logs), aligned
/// with `edges`. Every field must have a self-loop edge.
pub fn belief_propagation(
    tape: &mut Tape,
    log_p0: NodeId,
    edges: &[(usize, usize)],
    q: NodeId,
    steps: usize,
) -> NodeId {
    let f = tape.shape(log_p0)[0];
    for i in 0..f {
        assert!(
            edges.contains(&(i, i)),
            "field {i} is missing its self-loop edge; belief propagation requires one per field"
        );
    }
    let src: Vec<usize> = edges.iter().map(|&(s, _)| s).collect();
    let dst: Vec<usize> = edges.iter().map(|&(_, d)| d).collect();

    let mut log_p = log_p0;
    for _ in 0..steps {
        let p = tape.exp(log_p);
        let p_src = tape.gather_rows(p, &src);
        let messages = tape.batch_vecmat(p_src, q); // [E, K]
        let floored = tape.clamp_min(messages, PROB_FLOOR);
        let log_m = tape.ln(floored);
        let folded = tape.scatter_add_rows(log_m, &dst, f);
        let combined = tape.add(log_p, folded);
        log_p = tape.log_softmax(combined);
    }
    log_p
}

/// Everything derived from a support/query document pair before any
/// parameters are involved: aligned graphs, prototypes, query features.
#[derive(Clone, Debug)]
pub struct PairInstance {
    pub support_graph: DocumentGraph,
    pub query_graph: DocumentGraph,
    pub label_space: LabelSpace,
    pub lf_protos: LfPrototypes,
    pub ff_protos: FfPrototypes,
    /// Query LF features, `[L, F, 8]`.
    pub q_lf: Tensor,
    /// Query FF features, `[E, 8]`, aligned with `query_graph.ff_edges`.
    pub q_ff: Tensor,
}

/// Match landmarks, then build both graphs and all model inputs.
pub fn prepare_pair(support: &Document, query: &Document, ray: &RayConfig) -> Result<PairInstance> {
    let m = match_landmarks(support, query)?;
    prepare_with_match(support, query, &m, ray)
}

/// [`prepare_pair`] with an externally supplied (possibly reduced) match.
pub fn prepare_with_match(
    support: &Document,
    query: &Document,
    m: &LandmarkMatch,
    ray: &RayConfig,
) -> Result<PairInstance> {
    let label_space = LabelSpace::from_document(support);
    let support_graph = build_graph(support, Some((m, MatchSide::Support)), &label_space, ray)?;
    let query_graph = build_graph(query, Some((m, MatchSide::Query)), &label_space, ray)?;
    let lf_protos = lf_prototypes(&support_graph)?;
    let ff_protos = ff_prototypes(&support_graph)?;
    let q_lf = lf_feature_tensor(&query_graph)?;
    let q_ff = ff_feature_tensor(&query_graph);
    Ok(PairInstance {
        support_graph,
        query_graph,
        label_space,
        lf_protos,
        ff_protos,
        q_lf,
        q_ff,
    })
}

/// Tape handles produced by one [`forward`] pass.
pub struct ForwardPass {
    pub lf_ids: Option<MlpIds>,
    pub ff_ids: Option<MlpIds>,
    /// Raw LF scores `S`, absent when the unary is uniform.
    pub scores: Option<NodeId>,
    pub log_p0: NodeId,
    /// Log pairwise tables, absent when `bp_steps == 0`.
    pub log_q: Option<NodeId>,
    pub log_p_final: NodeId,
}

/// Run the model on a prepared pair, recording every step on `tape`.
///
/// Heads that a configuration disables (the LF head under a uniform unary,
/// the FF head at zero steps) are never inserted into the tape; their
/// parameters simply receive zero gradient.
pub fn forward(tape: &mut Tape, inst: &PairInstance, params: &ModelParams) -> Result<ForwardPass> {
    let k = inst.label_space.len();
    let f = inst.query_graph.n_fields();
    let cfg = &params.config;

    let (lf_ids, scores, log_p0) = match cfg.unary_source {
        UnarySource::LfAttn => {
            let ids = params.lf_mlp.insert(tape);
            let s = if cfg.avg_before_attention {
                avgattn_scores(tape, &inst.q_lf, &inst.lf_protos, &ids)?
            } else {
                lfattn_scores(tape, &inst.q_lf, &inst.lf_protos, &ids)?
            };
            let log_p0 = tape.log_softmax(s);
            (Some(ids), Some(s), log_p0)
        }
        UnarySource::Uniform => {
            let uniform = Tensor::full(vec![f, k], -(k as f64).ln());
            let log_p0 = tape.leaf(&uniform);
            (None, None, log_p0)
        }
    };

    let (ff_ids, log_q, log_p_final) = if cfg.bp_steps > 0 {
        let ids = params.ff_mlp.insert(tape);
        let log_q = ffattn_tables(tape, &inst.q_ff, &inst.ff_protos, &ids, k)?;
        let q = tape.exp(log_q);
        let log_p_final =
            belief_propagation(tape, log_p0, &inst.query_graph.ff_edges, q, cfg.bp_steps);
        (Some(ids), Some(log_q), log_p_final)
    } else {
        (None, None, log_p0)
    };

    Ok(ForwardPass { lf_ids, ff_ids, scores, log_p0, log_q, log_p_final })
}

/// Mean negative log final belief at the true labels.
pub fn pair_loss(tape: &mut Tape, pass: &ForwardPass, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.shape(pass.log_p_final);
    let (f, k) = (shape[0], shape[1]);
    if labels.len() != f {
        return Err(Error::invalid(format!(
            "{} labels for {f} fields",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label index {bad} out of range for {k} labels")));
    }
    Ok(tape.nll_rows(pass.log_p_final, labels))
}

/// Gradients for every tensor of `params` (zeros for heads the pass never
/// used), aligned with [`ModelParams::tensors`].
pub fn collect_grads(pass: &ForwardPass, params: &ModelParams, grads: &Grads) -> Vec<Tensor> {
    let head = |ids: &Option<MlpIds>, mlp: &MlpParams| -> Vec<Tensor> {
        match ids {
            Some(ids) => ids.grads(grads),
            None => mlp.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    };
    let mut out = head(&pass.lf_ids, &params.lf_mlp);
    out.extend(head(&pass.ff_ids, &params.ff_mlp));
    out
}

/// Final per-field label probabilities `[F, K]` for one pair.
pub fn pair_probabilities(inst: &PairInstance, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pass = forward(&mut tape, inst, params)?;
    if let Some(op) = tape.poisoned() {
        return Err(Error::NonFinite(op));
    }
    let p = tape.exp(pass.log_p_final);
    Ok(tape.value(p))
}

/// One training observation: loss and parameter gradients for a labeled
/// query. Requires the query graph to carry labels.
pub fn pair_loss_and_grads(inst: &PairInstance, params: &ModelParams) -> Result<(f64, Vec<Tensor>)> {
    let labels = inst
        .query_graph
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("query graph carries no labels to train against"))?;
    let mut tape = Tape::new();
    let pass = forward(&mut tape, inst, params)?;
    let loss = pair_loss(&mut tape, &pass, labels)?;
    if let Some(op) = tape.poisoned() {
        return Err(Error::NonFinite(op));
    }
    let grads = tape.backward(loss);
    Ok((tape.data(loss)[0], collect_grads(&pass, params, &grads)))
}

/// A labeling of query regions: parallel region ids, label indices, and the
/// per-region probability rows they were read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub region_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub probs: Tensor,
    pub label_space: LabelSpace,
}

impl Prediction {
    pub fn label_names(&self) -> Vec<&str> {
        self.labels.iter().map(|&y| self.label_space.name(y)).collect()
    }

    /// Predicted label index for a region id, if the region was a candidate.
    pub fn label_of(&self, region_id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == region_id).map(|i| self.labels[i])
    }
}

/// Argmax with ties broken toward the lowest label index.
fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Label every candidate field region of `query` from one support document.
pub fn predict(
    support: &Document,
    query: &Document,
    params: &ModelParams,
    ray: &RayConfig,
) -> Result<Prediction> {
    let inst = prepare_pair(support, query, ray)?;
    let probs = pair_probabilities(&inst, params)?;
    let k = inst.label_space.len();
    let labels = (0..inst.query_graph.n_fields())
        .map(|i| argmax_row(&probs.data()[i * k..(i + 1) * k]))
        .collect();
    Ok(Prediction {
        region_ids: inst.query_graph.field_ids.clone(),
        labels,
        probs,
        label_space: inst.label_space,
    })
}

/// Add one support's probability rows into the union-space accumulator.
///
/// Rows are re-indexed from the support's label space into the union space
/// (zero mass on labels this support never saw), so rows from different
/// supports average cell-by-cell. Returns one `(sum, count)` slot per
/// region.
fn accumulate_probs(
    acc: &mut BTreeMap<String, (Vec<f64>, usize)>,
    region_ids: &[String],
    probs: &Tensor,
    from: &LabelSpace,
    union: &LabelSpace,
) {
    let k_from = from.len();
    let k_union = union.len();
    let col_map: Vec<usize> = (0..k_from)
        .map(|k| union.index_of(from.name(k)).expect("union space covers every support label"))
        .collect();
    for (i, rid) in region_ids.iter().enumerate() {
        let slot = acc.entry(rid.clone()).or_insert_with(|| (vec![0.0; k_union], 0));
        for (k, &col) in col_map.iter().enumerate() {
            slot.0[col] += probs.at(i, k);
        }
        slot.1 += 1;
    }
}

/// Label a query by averaging per-pair probabilities over several supports
/// whose landmark matches were computed (and possibly reduced) by the
/// caller. All supplied pairs are used; errors propagate.
pub fn predict_with_matches(
    pairs: &[(&Document, &LandmarkMatch)],
    query: &Document,
    params: &ModelParams,
    ray: &RayConfig,
) -> Result<Prediction> {
    if pairs.is_empty() {
        return Err(Error::invalid("prediction needs at least one support"));
    }
    let supports: Vec<&Document> = pairs.iter().map(|(s, _)| *s).collect();
    let union = LabelSpace::union_of(&supports);
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (support, m) in pairs {
        let inst = prepare_with_match(support, query, m, ray)?;
        let probs = pair_probabilities(&inst, params)?;
        accumulate_probs(&mut acc, &inst.query_graph.field_ids, &probs, &inst.label_space, &union);
    }

    let k = union.len();
    let mut region_ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    // Report regions in query document order.
    for r in &query.regions {
        if let Some((sum, n)) = acc.get(&r.id) {
            let row: Vec<f64> = sum.iter().map(|v| v / *n as f64).collect();
            labels.push(argmax_row(&row));
            rows.extend_from_slice(&row);
            region_ids.push(r.id.clone());
        }
    }
    let probs = Tensor::new(vec![region_ids.len(), k], rows)?;
    Ok(Prediction { region_ids, labels, probs, label_space: union })
}

/// Label a query by averaging the per-pair probabilities over several
/// supports, aligned on the union of their label spaces.
///
/// Supports that fail to match the query are skipped; it is an error only
/// when every support fails. A region's average runs over the supports that
/// treated it as a field candidate.
pub fn fewshot_predict(
    supports: &[&Document],
    query: &Document,
    params: &ModelParams,
    ray: &RayConfig,
) -> Result<Prediction> {
    if supports.is_empty() {
        return Err(Error::invalid("few-shot prediction needs at least one support"));
    }
    let mut matched = Vec::new();
    let mut last_err = None;
    for support in supports {
        match match_landmarks(support, query) {
            Ok(m) => matched.push((*support, m)),
            Err(e) => last_err = Some(e),
        }
    }
    if matched.is_empty() {
        return Err(last_err.unwrap_or(Error::NoCorrespondence));
    }
    let pairs: Vec<(&Document, &LandmarkMatch)> =
        matched.iter().map(|(s, m)| (*s, m)).collect();
    predict_with_matches(&pairs, query, params, ray)
}
