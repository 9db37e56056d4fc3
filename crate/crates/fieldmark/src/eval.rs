//! Evaluation protocols: per-pair accuracy, 1-shot and 5-shot reports,
//! seeded landmark-removal stress tests, and background ablations.
//!
//! Accuracy is measured over the query's field-role regions; regions the
//! matcher consumed as landmarks are out of scope by construction. Ground
//! truth and predictions are compared in the type's canonical label space
//! (the union over all its documents), so confusion tables from different
//! supports merge cleanly. Supports whose content is identical to the
//! query are never used — duplicating a document in a dataset therefore
//! cannot change any existing per-query result.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{child_seed, TypeDocs};
use crate::error::{Error, Result};
use crate::graph::{match_landmarks, Document, LabelSpace, LandmarkMatch, RayConfig, Role};
use crate::model::{predict_with_matches, ModelParams, Prediction};
use crate::par;

/// Sentinel for "the model produced no prediction for this region". It can
/// never equal a real label index, so such regions always count as wrong.
const NO_PREDICTION: usize = usize::MAX;

/// Protocol knobs for one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Supports per prediction: 1 or 5.
    pub shots: usize,
    /// Score only regions whose ground truth is a real field label.
    pub drop_background: bool,
    /// Matched landmark pairs to remove per support/query pair (seeded;
    /// always leaves at least one).
    pub landmark_drop: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { shots: 1, drop_background: false, landmark_drop: 0, seed: 0 }
    }
}

/// Fraction of regions labeled correctly. Both maps go from region id to a
/// label index and must cover exactly the same regions.
pub fn pair_accuracy(pred: &BTreeMap<String, usize>, gt: &BTreeMap<String, usize>) -> Result<f64> {
    if pred.len() != gt.len() || !pred.keys().eq(gt.keys()) {
        return Err(Error::invalid(format!(
            "region sets differ: {} predicted vs {} ground-truth regions",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("accuracy over zero regions is undefined"));
    }
    let hits = gt.iter().filter(|(id, y)| pred[*id] == **y).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// One query document's aggregate result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub doc_id: String,
    /// Mean accuracy over this query's evaluations.
    pub accuracy: f64,
    /// Evaluations that contributed (support pairs for 1-shot, support
    /// subsets for 5-shot).
    pub evaluations: usize,
    /// Scored regions per evaluation.
    pub regions: usize,
}

/// One template type's aggregate result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub type_id: String,
    /// Unweighted mean over query accuracies.
    pub accuracy: f64,
    /// Canonical label order for `confusion` rows and columns.
    pub labels: Vec<String>,
    /// `confusion[gt][pred]` region counts, aggregated over evaluations.
    pub confusion: Vec<Vec<u64>>,
    pub queries: Vec<QueryReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    /// Unweighted mean over type accuracies.
    pub overall: f64,
    pub types: Vec<TypeReport>,
}

/// Remove up to `drop` random matched pairs, always keeping at least one.
fn reduce_match(m: &LandmarkMatch, drop: usize, rng: &mut ChaCha8Rng) -> LandmarkMatch {
    let n = m.pairs.len();
    let d = drop.min(n.saturating_sub(1));
    if d == 0 {
        return m.clone();
    }
    let removed: std::collections::BTreeSet<usize> =
        rand::seq::index::sample(rng, n, d).into_iter().collect();
    let mut pairs = Vec::with_capacity(n - d);
    let mut dropped = m.dropped.clone();
    for (i, p) in m.pairs.iter().enumerate() {
        if removed.contains(&i) {
            dropped.push(p.0.clone());
        } else {
            pairs.push(p.clone());
        }
    }
    LandmarkMatch { pairs, dropped }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// All k-subsets of `0..n` in lexicographic order.
fn all_combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // Find the rightmost index that can still advance.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// One prediction task: a query and the support documents to use for it.
struct Unit {
    qi: usize,
    supports: Vec<usize>,
}

struct UnitOutcome {
    qi: usize,
    accuracy: f64,
    regions: usize,
    /// `(gt, pred)` per scored region; `pred` is `None` when the model had
    /// no candidate row for the region.
    cells: Vec<(usize, Option<usize>)>,
}

fn evaluate_type(
    ti: usize,
    t: &TypeDocs,
    params: &ModelParams,
    settings: &EvalSettings,
    ray: &RayConfig,
) -> Result<TypeReport> {
    let n = t.docs.len();
    if n <= settings.shots {
        return Err(Error::Dataset(format!(
            "type `{}` has {n} documents; {}-shot evaluation needs more than {}",
            t.type_id, settings.shots, settings.shots
        )));
    }
    let doc_refs: Vec<&Document> = t.docs.iter().collect();
    let space = LabelSpace::union_of(&doc_refs);

    // Build the evaluation units up front so that work can be farmed out
    // while aggregation stays in this fixed order.
    let mut units: Vec<Unit> = Vec::new();
    for qi in 0..n {
        let eligible: Vec<usize> = (0..n)
            .filter(|&si| si != qi && !t.docs[si].same_content(&t.docs[qi]))
            .collect();
        if eligible.is_empty() {
            return Err(Error::Dataset(format!(
                "query `{}` has no usable supports: every other document of `{}` is content-identical",
                t.docs[qi].doc_id, t.type_id
            )));
        }
        if settings.shots == 1 {
            units.extend(eligible.into_iter().map(|si| Unit { qi, supports: vec![si] }));
        } else {
            if eligible.len() < settings.shots {
                return Err(Error::Dataset(format!(
                    "query `{}` has only {} usable supports; {}-shot needs {}",
                    t.docs[qi].doc_id,
                    eligible.len(),
                    settings.shots,
                    settings.shots
                )));
            }
            let count = binomial(eligible.len(), settings.shots);
            if count <= 20 {
                for combo in all_combinations(eligible.len(), settings.shots) {
                    units.push(Unit { qi, supports: combo.iter().map(|&e| eligible[e]).collect() });
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
                    settings.seed,
                    2 * ti as u64 + 1,
                    qi as u64,
                ));
                for _ in 0..20 {
                    let mut combo =
                        rand::seq::index::sample(&mut rng, eligible.len(), settings.shots)
                            .into_vec();
                    combo.sort_unstable();
                    units.push(Unit { qi, supports: combo.into_iter().map(|e| eligible[e]).collect() });
                }
            }
        }
    }

    let outcomes = par::map_ordered(&units, |unit| -> Result<Option<UnitOutcome>> {
        let query = &t.docs[unit.qi];

        // Match every support; landmark removal draws from a seed derived
        // from (type, query, support) so runs reproduce exactly.
        let mut matches: Vec<(usize, LandmarkMatch)> = Vec::new();
        for &si in &unit.supports {
            let m = match match_landmarks(&t.docs[si], query) {
                Ok(m) => m,
                Err(Error::NoCorrespondence) => continue,
                Err(e) => return Err(e),
            };
            let m = if settings.landmark_drop > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
                    settings.seed,
                    2 * ti as u64,
                    (unit.qi * n + si) as u64,
                ));
                reduce_match(&m, settings.landmark_drop, &mut rng)
            } else {
                m
            };
            matches.push((si, m));
        }
        if matches.is_empty() {
            return Ok(None);
        }
        let pairs: Vec<(&Document, &LandmarkMatch)> =
            matches.iter().map(|(si, m)| (&t.docs[*si], m)).collect();
        let prediction = predict_with_matches(&pairs, query, params, ray)?;

        let Some((gt, pred, cells)) = score_maps(query, &prediction, &space, settings) else {
            return Ok(None);
        };
        let accuracy = pair_accuracy(&pred, &gt)?;
        Ok(Some(UnitOutcome { qi: unit.qi, accuracy, regions: gt.len(), cells }))
    });

    let k = space.len();
    let mut confusion = vec![vec![0u64; k]; k];
    let mut per_query: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); n];
    for r in outcomes {
        let Some(o) = r? else { continue };
        let q = &mut per_query[o.qi];
        q.0 += o.accuracy;
        q.1 += 1;
        q.2 = o.regions;
        for (gt, pred) in o.cells {
            if let Some(p) = pred {
                confusion[gt][p] += 1;
            }
        }
    }

    let mut queries = Vec::with_capacity(n);
    let mut acc_sum = 0.0;
    for (qi, (sum, used, regions)) in per_query.into_iter().enumerate() {
        if used == 0 {
            return Err(Error::Dataset(format!(
                "query `{}` could not be evaluated: no support pair produced a scoreable prediction",
                t.docs[qi].doc_id
            )));
        }
        let accuracy = sum / used as f64;
        acc_sum += accuracy;
        queries.push(QueryReport {
            doc_id: t.docs[qi].doc_id.clone(),
            accuracy,
            evaluations: used,
            regions,
        });
    }

    Ok(TypeReport {
        type_id: t.type_id.clone(),
        accuracy: acc_sum / queries.len() as f64,
        labels: space.names().to_vec(),
        confusion,
        queries,
    })
}

/// Ground-truth and prediction maps over the query's field-role regions,
/// in the canonical space. Returns None when filtering leaves nothing.
#[allow(clippy::type_complexity)]
fn score_maps(
    query: &Document,
    prediction: &Prediction,
    space: &LabelSpace,
    settings: &EvalSettings,
) -> Option<(BTreeMap<String, usize>, BTreeMap<String, usize>, Vec<(usize, Option<usize>)>)> {
    let mut gt = BTreeMap::new();
    let mut pred = BTreeMap::new();
    let mut cells = Vec::new();
    for r in &query.regions {
        if r.role != Role::Field {
            continue;
        }
        let y = r
            .label
            .as_deref()
            .and_then(|l| space.index_of(l))
            .unwrap_or(0);
        if settings.drop_background && y == 0 {
            continue;
        }
        let p = prediction.label_of(&r.id).map(|idx| {
            let name = prediction.label_space.name(idx);
            space
                .index_of(name)
                .expect("prediction spaces are subsets of the type's canonical space")
        });
        gt.insert(r.id.clone(), y);
        pred.insert(r.id.clone(), p.unwrap_or(NO_PREDICTION));
        cells.push((y, p));
    }
    if gt.is_empty() {
        return None;
    }
    Some((gt, pred, cells))
}

/// Run the full protocol over `types` (typically a dataset's test split).
pub fn evaluate(
    types: &[&TypeDocs],
    params: &ModelParams,
    settings: &EvalSettings,
    ray: &RayConfig,
) -> Result<EvalReport> {
    if settings.shots != 1 && settings.shots != 5 {
        return Err(Error::invalid(format!("shots must be 1 or 5, got {}", settings.shots)));
    }
    if types.is_empty() {
        return Err(Error::Dataset("no types to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(types.len());
    for (ti, t) in types.iter().enumerate() {
        reports.push(evaluate_type(ti, t, params, settings, ray)?);
    }
    let overall = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
    Ok(EvalReport { settings: *settings, overall, types: reports })
}

/// How much scoring background regions moves the overall number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundImpact {
    /// Overall accuracy with background regions scored.
    pub with_background: f64,
    /// Overall accuracy with background regions excluded.
    pub without_background: f64,
    /// `without_background - with_background`.
    pub incre: f64,
}

pub fn background_impact(
    types: &[&TypeDocs],
    params: &ModelParams,
    settings: &EvalSettings,
    ray: &RayConfig,
) -> Result<BackgroundImpact> {
    let with = evaluate(types, params, &EvalSettings { drop_background: false, ..*settings }, ray)?;
    let without =
        evaluate(types, params, &EvalSettings { drop_background: true, ..*settings }, ray)?;
    Ok(BackgroundImpact {
        with_background: with.overall,
        without_background: without.overall,
        incre: without.overall - with.overall,
    })
}

/// Fixed-width text rendering of a report.
pub fn render_table(report: &EvalReport) -> String {
    let s = &report.settings;
    let mut out = format!(
        "shots={} drop_background={} landmark_drop={} seed={}\n\n",
        s.shots, s.drop_background, s.landmark_drop, s.seed
    );
    let name_w = report
        .types
        .iter()
        .map(|t| t.type_id.len())
        .chain(["type".len(), "overall".len()].into_iter())
        .max()
        .unwrap_or(7);
    out.push_str(&format!("{:<name_w$}  {:>7}  {:>11}  {:>8}\n", "type", "queries", "evaluations", "accuracy"));
    for t in &report.types {
        let evals: usize = t.queries.iter().map(|q| q.evaluations).sum();
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>11}  {:>8.4}\n",
            t.type_id,
            t.queries.len(),
            evals,
            t.accuracy
        ));
    }
    out.push_str(&format!("{:<name_w$}  {:>7}  {:>11}  {:>8.4}\n", "overall", "", "", report.overall));
    out
}

/// Confusion counts as CSV: one row per ground-truth label.
pub fn confusion_csv(t: &TypeReport) -> String {
    let mut out = String::from("gt\\pred");
    for l in &t.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (gi, row) in t.confusion.iter().enumerate() {
        out.push_str(&t.labels[gi]);
        for c in row {
            out.push(',');
            out.push_str(&c.to_string());
        }
        out.push('\n');
    }
    out
}
