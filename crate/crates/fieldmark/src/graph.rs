//! Documents, landmark matching, and the document graph.
//!
//! A document is a bag of text regions. Regions whose text is fixed by the
//! template (headers, captions) act as *landmarks*; the variable regions are
//! *fields* to be labeled. Matching a support document to a query document by
//! normalized landmark text yields an aligned landmark list; the graph then
//! pairs every landmark with every field (LF edges, implicit) and connects
//! fields to their ray-cast visible neighbors plus themselves (FF edges,
//! explicit and sparse).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::geometry::{pair_feature, visibility_edges, BBox, PAIR_FEATURE_DIM};
use crate::tensor::Tensor;

/// Label name reserved for regions that belong to no field type.
pub const BACKGROUND: &str = "background";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Landmark,
    Field,
}

/// One OCR text line: a box, its transcript, and (when known) its role and
/// field label. Multi-region fields appear as several regions sharing a
/// label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRegion {
    pub id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Optional source quadrilateral `[x0, y0, ..., x3, y3]`; when present,
    /// `bbox` must equal its bounding box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quad: Option<[f64; 8]>,
    pub text: String,
    pub role: Role,
    /// Field-type name; absent on landmarks and on raw (unlabeled) queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub type_id: String,
    pub width: f64,
    pub height: f64,
    pub regions: Vec<TextRegion>,
}

impl Document {
    pub fn landmark_regions(&self) -> impl Iterator<Item = &TextRegion> {
        self.regions.iter().filter(|r| r.role == Role::Landmark)
    }

    pub fn field_regions(&self) -> impl Iterator<Item = &TextRegion> {
        self.regions.iter().filter(|r| r.role == Role::Field)
    }

    pub fn region(&self, id: &str) -> Option<&TextRegion> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Structural equality ignoring `doc_id` — true for byte-level copies of
    /// the same page content under different names.
    pub fn same_content(&self, other: &Document) -> bool {
        self.type_id == other.type_id
            && self.width == other.width
            && self.height == other.height
            && self.regions == other.regions
    }
}

/// Ordered label names; index 0 is always [`BACKGROUND`]. Indices are stable
/// for a given support document, which is what makes prototype and belief
/// columns comparable across a support/query pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    /// Background plus the document's field labels in order of first
    /// appearance.
    pub fn from_document(doc: &Document) -> Self {
        let mut labels = vec![BACKGROUND.to_string()];
        for r in &doc.regions {
            if let Some(l) = &r.label {
                if !labels.iter().any(|x| x == l) {
                    labels.push(l.clone());
                }
            }
        }
        LabelSpace { labels }
    }

    /// Background plus labels of several documents, in document-then-region
    /// order of first appearance.
    pub fn union_of(docs: &[&Document]) -> Self {
        let mut labels = vec![BACKGROUND.to_string()];
        for doc in docs {
            for r in &doc.regions {
                if let Some(l) = &r.label {
                    if !labels.iter().any(|x| x == l) {
                        labels.push(l.clone());
                    }
                }
            }
        }
        LabelSpace { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds background
    }

    pub fn background_index(&self) -> usize {
        0
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

/// Outcome of content-matching support landmarks against query regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkMatch {
    /// `(support landmark id, query region id)`, in support document order.
    pub pairs: Vec<(String, String)>,
    /// Support landmarks with no unique counterpart.
    pub dropped: Vec<String>,
}

impl LandmarkMatch {
    pub fn support_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|(_, q)| q.clone()).collect()
    }
}

/// Canonical form used for text comparison: Unicode NFKC, trimmed, internal
/// whitespace collapsed to single spaces, lowercased.
pub fn normalize_text(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Match support landmarks to query regions by normalized text content.
///
/// A pair forms only when the text is unique on both sides: a landmark text
/// occurring twice among support landmarks, or matching zero or several
/// query regions, is dropped. Zero surviving pairs is an error — prediction
/// is impossible without at least one anchor.
pub fn match_landmarks(support: &Document, query: &Document) -> Result<LandmarkMatch> {
    let landmarks: Vec<&TextRegion> = support.landmark_regions().collect();
    if landmarks.is_empty() {
        return Err(Error::invalid(format!(
            "support document `{}` has no landmark regions",
            support.doc_id
        )));
    }

    let mut support_counts: HashMap<String, usize> = HashMap::new();
    for lm in &landmarks {
        *support_counts.entry(normalize_text(&lm.text)).or_insert(0) += 1;
    }
    let mut query_hits: HashMap<String, Vec<&TextRegion>> = HashMap::new();
    for r in &query.regions {
        query_hits.entry(normalize_text(&r.text)).or_default().push(r);
    }

    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for lm in &landmarks {
        let key = normalize_text(&lm.text);
        let unique_on_support = support_counts[&key] == 1;
        let query_side = query_hits.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        if unique_on_support && query_side.len() == 1 {
            pairs.push((lm.id.clone(), query_side[0].id.clone()));
        } else {
            dropped.push(lm.id.clone());
        }
    }

    if pairs.is_empty() {
        return Err(Error::NoCorrespondence);
    }
    Ok(LandmarkMatch { pairs, dropped })
}

/// Fan of rays cast from each field center to find visible neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayConfig {
    pub ray_count: usize,
    pub ray_step_deg: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        RayConfig { ray_count: 72, ray_step_deg: 5.0 }
    }
}

/// Which end of a [`LandmarkMatch`] a document sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchSide {
    Support,
    Query,
}

/// The document graph: aligned landmarks, candidate fields, sparse directed
/// field-to-field edges (always including one self-loop per field), and
/// labels when the document is supervised. LF edges are implicit — every
/// landmark pairs with every field.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentGraph {
    pub landmark_ids: Vec<String>,
    pub landmark_boxes: Vec<BBox>,
    pub field_ids: Vec<String>,
    pub field_boxes: Vec<BBox>,
    /// Directed `(src, dst)` field pairs: self-loops first (in field order),
    /// then deduplicated visibility edges sorted by `(src, dst)`.
    pub ff_edges: Vec<(usize, usize)>,
    /// Per-field label indices into `label_space`, when supervised.
    pub labels: Option<Vec<usize>>,
    pub label_space: LabelSpace,
}

/// Sizes and memory economy of one graph's pairwise machinery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_fields: usize,
    pub n_landmarks: usize,
    pub n_ff_edges: usize,
    /// Mean out-degree `E / |F|`; bounded by `ray_count + 1`.
    pub beta: f64,
    pub mem_sparse_units: usize,
    pub mem_full_units: usize,
    /// `1 - E / |F|^2` — fraction of pairwise-table memory saved by sparse
    /// edges relative to a dense field-pair table.
    pub reduction: f64,
}

/// Build the graph for one side of a support/query pairing.
///
/// With a match supplied, landmarks are that side's matched regions in
/// support-pair order, so landmark index `j` refers to the same physical
/// landmark in both graphs. Without a match (a standalone support document),
/// all landmark-role regions are used in document order.
///
/// Field selection differs by side: a support document contributes its
/// field-role regions; on a query, every region not matched as a landmark is
/// a candidate field (its true role is unknown at prediction time). Labels
/// are taken from the regions when any field region carries one; labeled
/// regions with a name missing from `label_space`, and unlabeled regions on
/// an otherwise labeled document, fall back to background.
pub fn build_graph(
    doc: &Document,
    matched: Option<(&LandmarkMatch, MatchSide)>,
    label_space: &LabelSpace,
    ray: &RayConfig,
) -> Result<DocumentGraph> {
    let landmark_ids: Vec<String> = match matched {
        Some((m, MatchSide::Support)) => m.support_ids(),
        Some((m, MatchSide::Query)) => m.query_ids(),
        None => doc.landmark_regions().map(|r| r.id.clone()).collect(),
    };
    let mut landmark_boxes = Vec::with_capacity(landmark_ids.len());
    for id in &landmark_ids {
        let r = doc.region(id).ok_or_else(|| {
            Error::invalid(format!("matched landmark `{id}` not found in `{}`", doc.doc_id))
        })?;
        landmark_boxes.push(r.bbox);
    }

    let query_side = matches!(matched, Some((_, MatchSide::Query)));
    let field_regions: Vec<&TextRegion> = doc
        .regions
        .iter()
        .filter(|r| {
            if landmark_ids.iter().any(|id| *id == r.id) {
                false
            } else if query_side {
                true
            } else {
                r.role == Role::Field
            }
        })
        .collect();
    if field_regions.is_empty() {
        return Err(Error::invalid(format!(
            "document `{}` has no field regions (empty F)",
            doc.doc_id
        )));
    }

    let field_ids: Vec<String> = field_regions.iter().map(|r| r.id.clone()).collect();
    let field_boxes: Vec<BBox> = field_regions.iter().map(|r| r.bbox).collect();

    let mut ff_edges: Vec<(usize, usize)> = (0..field_boxes.len()).map(|i| (i, i)).collect();
    ff_edges.extend(visibility_edges(&field_boxes, ray.ray_count, ray.ray_step_deg));

    let supervised = field_regions.iter().any(|r| r.label.is_some());
    let labels = supervised.then(|| {
        field_regions
            .iter()
            .map(|r| {
                r.label
                    .as_deref()
                    .and_then(|l| label_space.index_of(l))
                    .unwrap_or_else(|| label_space.background_index())
            })
            .collect()
    });

    Ok(DocumentGraph {
        landmark_ids,
        landmark_boxes,
        field_ids,
        field_boxes,
        ff_edges,
        labels,
        label_space: label_space.clone(),
    })
}

impl DocumentGraph {
    pub fn n_landmarks(&self) -> usize {
        self.landmark_boxes.len()
    }

    pub fn n_fields(&self) -> usize {
        self.field_boxes.len()
    }
}

/// Landmark-to-field pair features, shape `[|L|, |F|, 8]`: entry `(j, i)`
/// encodes landmark `j` against field `i`.
pub fn lf_feature_tensor(g: &DocumentGraph) -> Result<Tensor> {
    let (l, f) = (g.n_landmarks(), g.n_fields());
    if l == 0 {
        return Err(Error::invalid("graph has no landmarks"));
    }
    let mut data = Vec::with_capacity(l * f * PAIR_FEATURE_DIM);
    for lb in &g.landmark_boxes {
        for fb in &g.field_boxes {
            data.extend_from_slice(&pair_feature(lb, fb));
        }
    }
    Tensor::new(vec![l, f, PAIR_FEATURE_DIM], data)
}

/// Field-to-field pair features, shape `[E, 8]`, row-aligned with
/// `g.ff_edges`. A self-loop row is `(0, 0, 1, 1, 0, 0, 1, 1)`.
pub fn ff_feature_tensor(g: &DocumentGraph) -> Tensor {
    let mut data = Vec::with_capacity(g.ff_edges.len() * PAIR_FEATURE_DIM);
    for &(src, dst) in &g.ff_edges {
        data.extend_from_slice(&pair_feature(&g.field_boxes[src], &g.field_boxes[dst]));
    }
    Tensor::new(vec![g.ff_edges.len(), PAIR_FEATURE_DIM], data).unwrap()
}

/// Size statistics for a graph against a `k`-label space.
pub fn graph_stats(g: &DocumentGraph, k: usize) -> GraphStats {
    let f = g.n_fields();
    let e = g.ff_edges.len();
    GraphStats {
        n_fields: f,
        n_landmarks: g.n_landmarks(),
        n_ff_edges: e,
        beta: e as f64 / f as f64,
        mem_sparse_units: e * k * k,
        mem_full_units: f * f * k * k,
        reduction: 1.0 - e as f64 / (f * f) as f64,
    }
}
