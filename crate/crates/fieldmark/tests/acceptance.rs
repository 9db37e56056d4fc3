//! Release gate for the whole pipeline. Each criterion prints one
//! `ACCEPTANCE NN <name>: PASS/FAIL` line with its measured numbers; the
//! binary exits non-zero if any criterion fails. Run a subset by passing
//! criterion numbers or name fragments as arguments.
//!
//! The heavyweight criteria share trained fixtures: the default synthetic
//! family backs 05/07/08 and the crowded family backs 06, each trained once.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fieldmark::data::{
    crowded_suite, default_suite, dense_suite, load_dataset, synth_generate, write_dataset,
    GeneratorEcho, Split, TypeDocs,
};
use fieldmark::eval::{evaluate, EvalReport, EvalSettings};
use fieldmark::geometry::{visibility_edges, BBox};
use fieldmark::graph::{build_graph, graph_stats, Document, LabelSpace, RayConfig, Role, TextRegion};
use fieldmark::model::{
    belief_propagation, pair_loss_and_grads, predict, prepare_pair, ModelConfig, ModelParams,
    UnarySource,
};
use fieldmark::tensor::{Tape, Tensor};
use fieldmark::train::{checkpoint_bytes, Trainer, TrainConfig};

// Tolerances and budgets, one constant per criterion clause.
const GRAD_INSTANCES: usize = 25;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_H: f64 = 1e-5;
const GRAD_TINY: f64 = 1e-7;
const GRAD_TINY_ABS: f64 = 1e-8;
const GRAD_BUDGET_SECS: f64 = 30.0;
const VIS_LAYOUTS: usize = 200;
const VIS_BUDGET_SECS: f64 = 10.0;
const BP_HAND_TOL: f64 = 1e-12;
const BP_ROW_TOL: f64 = 1e-9;
const INV_PROB_TOL: f64 = 1e-9;
const PERM_PROB_TOL: f64 = 1e-12;
const E2E_BUDGET_SECS: f64 = 900.0;
const E2E_LF_MIN: f64 = 0.90;
const ABLATION_GAP: f64 = 0.05;
const ATTNBP_ALONE_MIN: f64 = 0.80;
const FIVESHOT_SLACK: f64 = 0.005;
const REDUCTION_MIN: f64 = 0.60;

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 10] = [
        (1, "gradient-fidelity", c01_gradient_fidelity),
        (2, "visibility-oracle", c02_visibility_oracle),
        (3, "bp-fixed-points", c03_bp_fixed_points),
        (4, "geometric-invariance", c04_geometric_invariance),
        (5, "end-to-end-accuracy", c05_end_to_end_accuracy),
        (6, "ablation-ordering", c06_ablation_ordering),
        (7, "landmark-dropout", c07_landmark_dropout),
        (8, "five-shot", c08_five_shot),
        (9, "sparse-economy", c09_sparse_economy),
        (10, "determinism", c10_determinism),
    ];

    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<_> = criteria
        .iter()
        .filter(|(n, name, _)| {
            filters.is_empty()
                || filters
                    .iter()
                    .any(|f| f.parse::<u8>().map_or_else(|_| name.contains(f.as_str()), |v| v == *n))
        })
        .collect();

    let mut failures = 0usize;
    for (n, name, run) in &selected {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(detail)) => println!("ACCEPTANCE {n:02} {name}: PASS ({detail})"),
            Ok(Err(detail)) => {
                failures += 1;
                println!("ACCEPTANCE {n:02} {name}: FAIL ({detail})");
            }
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "non-string panic".into());
                println!("ACCEPTANCE {n:02} {name}: FAIL (panicked: {msg})");
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} of {} criteria failed", selected.len());
        std::process::exit(101);
    }
    println!("acceptance: all {} criteria passed", selected.len());
}

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------
// 01 — analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

fn region(id: &str, b: BBox, text: &str, role: Role, label: Option<&str>) -> TextRegion {
    TextRegion { id: id.into(), bbox: b, quad: None, text: text.into(), role, label: label.map(Into::into) }
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0.0..340.0);
    let y = rng.gen_range(0.0..260.0);
    let w = rng.gen_range(12.0..60.0);
    let h = rng.gen_range(8.0..30.0);
    BBox::new(x, y, x + w, y + h)
}

/// A random labeled support/query pair with 3 landmarks, 4 fields, and the
/// 3-label space {background, alpha, beta}.
fn random_small_pair(rng: &mut ChaCha8Rng) -> (Document, Document) {
    let texts = ["Ref:", "Date:", "Total:"];
    let make = |doc_id: &str, labels: [Option<&str>; 4], rng: &mut ChaCha8Rng| {
        let mut regions = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            regions.push(region(&format!("lm{i}"), rand_box(rng), t, Role::Landmark, None));
        }
        for (i, l) in labels.iter().enumerate() {
            regions.push(region(&format!("f{i}"), rand_box(rng), &format!("v{i}"), Role::Field, *l));
        }
        Document { doc_id: doc_id.into(), type_id: "fd".into(), width: 400.0, height: 300.0, regions }
    };
    let pool = [Some("alpha"), Some("beta"), None];
    let mut support_labels = [Some("alpha"), Some("beta"), None, None];
    for slot in support_labels.iter_mut().skip(2) {
        *slot = pool[rng.gen_range(0..pool.len())];
    }
    let mut query_labels = [None; 4];
    for slot in query_labels.iter_mut() {
        *slot = pool[rng.gen_range(0..pool.len())];
    }
    // At least one labeled query region so the document counts as supervised.
    query_labels[0] = Some("alpha");
    let support = make("s", support_labels, rng);
    let query = make("q", query_labels, rng);
    (support, query)
}

fn c01_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let ray = RayConfig::default();
    let config = ModelConfig {
        hidden: vec![4],
        bp_steps: 2,
        avg_before_attention: false,
        unary_source: UnarySource::LfAttn,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD01);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for i in 0..GRAD_INSTANCES {
        let (support, query) = random_small_pair(&mut rng);
        let inst = prepare_pair(&support, &query, &ray).map_err(e)?;
        check(
            inst.label_space.len() == 3,
            format!("instance {i} label space should have 3 labels, got {}", inst.label_space.len()),
        )?;
        check(
            inst.support_graph.n_landmarks() == 3 && inst.query_graph.n_fields() == 4,
            format!(
                "instance {i} should keep |L|=3, |F|=4; got {}, {}",
                inst.support_graph.n_landmarks(),
                inst.query_graph.n_fields()
            ),
        )?;
        let params = ModelParams::init(config.clone(), &mut rng);
        let (_, grads) = pair_loss_and_grads(&inst, &params).map_err(e)?;

        for ti in 0..grads.len() {
            for j in 0..grads[ti].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[j] += GRAD_FD_H;
                let lp = pair_loss_and_grads(&inst, &plus).map_err(e)?.0;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= GRAD_FD_H;
                let lm = pair_loss_and_grads(&inst, &minus).map_err(e)?.0;
                let fd = (lp - lm) / (2.0 * GRAD_FD_H);
                let g = grads[ti].data()[j];
                let denom = g.abs().max(fd.abs());
                if denom > GRAD_TINY {
                    let rel = (g - fd).abs() / denom;
                    max_rel = max_rel.max(rel);
                    check(
                        rel < GRAD_REL_TOL,
                        format!(
                            "instance {i} tensor {ti} param {j}: analytic {g:.3e} vs fd {fd:.3e}, rel {rel:.3e}"
                        ),
                    )?;
                } else {
                    check(
                        (g - fd).abs() < GRAD_TINY_ABS,
                        format!(
                            "instance {i} tensor {ti} param {j}: near-zero gradient mismatch {g:.3e} vs {fd:.3e}"
                        ),
                    )?;
                }
                checked += 1;
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    check(secs < GRAD_BUDGET_SECS, format!("took {secs:.1}s, budget {GRAD_BUDGET_SECS}s"))?;
    Ok(format!(
        "{checked} parameters over {GRAD_INSTANCES} instances, max rel err {max_rel:.2e}, {secs:.1}s < {GRAD_BUDGET_SECS}s"
    ))
}

// ---------------------------------------------------------------------------
// 02 — ray casting vs a dense marching oracle
// ---------------------------------------------------------------------------

const VIS_PAGE: (f64, f64) = (240.0, 160.0);
const VIS_STEP: f64 = 0.05;

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x_max + gap <= b.x_min
        || b.x_max + gap <= a.x_min
        || a.y_max + gap <= b.y_min
        || b.y_max + gap <= a.y_min
}

/// Entry/exit parameters of the forward ray through `b`, or None on a miss.
fn ray_interval(origin: (f64, f64), angle_deg: f64, b: &BBox) -> Option<(f64, f64)> {
    let rad = angle_deg.to_radians();
    let (dx, dy) = (rad.cos(), rad.sin());
    let axis = |o: f64, d: f64, lo: f64, hi: f64| -> Option<(f64, f64)> {
        if d == 0.0 {
            return (o >= lo && o <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
        }
        let (a, b) = ((lo - o) / d, (hi - o) / d);
        Some(if a <= b { (a, b) } else { (b, a) })
    };
    let (ex0, ex1) = axis(origin.0, dx, b.x_min, b.x_max)?;
    let (ey0, ey1) = axis(origin.1, dy, b.y_min, b.y_max)?;
    let enter = ex0.max(ey0);
    let exit = ex1.min(ey1);
    (enter <= exit && exit >= 0.0).then_some((enter.max(0.0), exit))
}

/// True when some ray's crossing of some box is shorter than `band` — such
/// a crossing could fall between two marching samples, so the layout is
/// regenerated rather than compared.
fn has_grazing_crossing(boxes: &[BBox], ray: &RayConfig, band: f64) -> bool {
    for (src, sb) in boxes.iter().enumerate() {
        let origin = sb.center();
        for k in 0..ray.ray_count {
            let angle = k as f64 * ray.ray_step_deg;
            for (dst, db) in boxes.iter().enumerate() {
                if dst == src {
                    continue;
                }
                if let Some((enter, exit)) = ray_interval(origin, angle, db) {
                    if exit - enter <= band {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn random_layout(rng: &mut ChaCha8Rng) -> Option<Vec<BBox>> {
    let n = rng.gen_range(4..=12);
    let mut boxes: Vec<BBox> = Vec::new();
    'boxes: for _ in 0..n {
        for _ in 0..60 {
            let w = rng.gen_range(6.0..22.0);
            let h = rng.gen_range(6.0..18.0);
            let x = rng.gen_range(1.0..(VIS_PAGE.0 - w - 1.0));
            let y = rng.gen_range(1.0..(VIS_PAGE.1 - h - 1.0));
            let b = BBox::new(x, y, x + w, y + h);
            if boxes.iter().all(|o| separated(o, &b, 1.0)) {
                boxes.push(b);
                continue 'boxes;
            }
        }
        return None;
    }
    Some(boxes)
}

/// The brute-force oracle: walk every ray in fixed steps and report the box
/// containing the first sampled point. No slab math on the decision path.
fn marching_edges(boxes: &[BBox], ray: &RayConfig, step: f64) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (src, sb) in boxes.iter().enumerate() {
        let (ox, oy) = sb.center();
        for k in 0..ray.ray_count {
            let rad = (k as f64 * ray.ray_step_deg).to_radians();
            let (dx, dy) = (rad.cos(), rad.sin());
            let mut t = step;
            'march: loop {
                let (x, y) = (ox + t * dx, oy + t * dy);
                if x < 0.0 || x > VIS_PAGE.0 || y < 0.0 || y > VIS_PAGE.1 {
                    break;
                }
                for (dst, db) in boxes.iter().enumerate() {
                    if dst != src && x >= db.x_min && x <= db.x_max && y >= db.y_min && y <= db.y_max
                    {
                        edges.insert((src, dst));
                        break 'march;
                    }
                }
                t += step;
            }
        }
    }
    edges
}

fn c02_visibility_oracle() -> Outcome {
    let start = Instant::now();
    let ray = RayConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x02AC);
    let mut total_edges = 0usize;
    let mut generated = 0usize;

    for layout in 0..VIS_LAYOUTS {
        let boxes = loop {
            generated += 1;
            if generated > 200_000 {
                return Err("layout generation failed to converge".into());
            }
            if let Some(b) = random_layout(&mut rng) {
                if !has_grazing_crossing(&b, &ray, 2.0 * VIS_STEP) {
                    break b;
                }
            }
        };
        let got = visibility_edges(&boxes, ray.ray_count, ray.ray_step_deg);
        let want: Vec<(usize, usize)> = marching_edges(&boxes, &ray, VIS_STEP).into_iter().collect();
        check(
            got == want,
            format!(
                "layout {layout} ({} boxes): ray casting found {:?}, marching oracle {:?}",
                boxes.len(),
                got,
                want
            ),
        )?;
        total_edges += got.len();
    }

    let secs = start.elapsed().as_secs_f64();
    check(secs < VIS_BUDGET_SECS, format!("took {secs:.1}s, budget {VIS_BUDGET_SECS}s"))?;
    Ok(format!(
        "{VIS_LAYOUTS} layouts ({generated} generated), {total_edges} edges all matched, {secs:.1}s < {VIS_BUDGET_SECS}s"
    ))
}

// ---------------------------------------------------------------------------
// 03 — message passing against hand arithmetic
// ---------------------------------------------------------------------------

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("well-formed test tensor")
}

fn c03_bp_fixed_points() -> Outcome {
    // Two fields, one directed edge 0 -> 1 whose table rewards agreement,
    // identity self-loop tables. After one step:
    //   message into 1: (0.9*0.8 + 0.1*0.2, 0.9*0.2 + 0.1*0.8) = (0.74, 0.26)
    //   field 1 (uniform before): exactly that message;
    //   field 0 squares through its identity self-loop: (0.81, 0.01)/0.82.
    let p0 = vec![0.9f64.ln(), 0.1f64.ln(), 0.5f64.ln(), 0.5f64.ln()];
    let edges = [(0, 0), (1, 1), (0, 1)];
    let q_data = vec![
        1.0, 0.0, 0.0, 1.0, //
        1.0, 0.0, 0.0, 1.0, //
        0.8, 0.2, 0.2, 0.8,
    ];
    let mut tape = Tape::new();
    let log_p0 = tape.leaf(&tensor(vec![2, 2], p0.clone()));
    let q = tape.leaf(&tensor(vec![3, 4], q_data.clone()));
    let out = belief_propagation(&mut tape, log_p0, &edges, q, 1);
    let out_exp = tape.exp(out);
    let p = tape.value(out_exp);
    let expect = [0.81 / 0.82, 0.01 / 0.82, 0.74, 0.26];
    let mut max_err = 0.0f64;
    for (idx, want) in expect.iter().enumerate() {
        let dev = (p.data()[idx] - want).abs();
        max_err = max_err.max(dev);
        check(
            dev <= BP_HAND_TOL,
            format!("hand example cell {idx}: got {}, want {want} (err {dev:.2e})", p.data()[idx]),
        )?;
    }

    // Zero steps must return the prior untouched.
    let mut tape0 = Tape::new();
    let lp = tape0.leaf(&tensor(vec![2, 2], p0.clone()));
    let q0 = tape0.leaf(&tensor(vec![3, 4], q_data));
    let same = belief_propagation(&mut tape0, lp, &edges, q0, 0);
    let same_exp = tape0.exp(same);
    for (got, want) in tape0.value(same_exp).data().iter().zip([0.9, 0.1, 0.5, 0.5]) {
        check(
            (got - want).abs() <= BP_HAND_TOL,
            format!("zero steps moved a belief: {got} vs {want}"),
        )?;
    }

    // Uniform tables are a fixed point: messages carry no information.
    let prior: [f64; 9] = [0.7, 0.2, 0.1, 0.05, 0.15, 0.8, 0.25, 0.35, 0.4];
    let mut tape_u = Tape::new();
    let lp_u = tape_u.leaf(&tensor(vec![3, 3], prior.iter().map(|v| v.ln()).collect()));
    let edges_u = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0)];
    let q_u = tape_u.leaf(&tensor(vec![6, 9], vec![1.0 / 9.0; 54]));
    let fixed = belief_propagation(&mut tape_u, lp_u, &edges_u, q_u, 3);
    let fixed_exp = tape_u.exp(fixed);
    for (got, want) in tape_u.value(fixed_exp).data().iter().zip(prior) {
        check(
            (got - want).abs() <= BP_HAND_TOL,
            format!("uniform tables moved a belief: {got} vs {want}"),
        )?;
    }

    // Rows stay stochastic at every step count on a messy random graph.
    let mut rng = ChaCha8Rng::seed_from_u64(0xB9);
    let (f, k) = (5usize, 4usize);
    let mut edges_r: Vec<(usize, usize)> = (0..f).map(|i| (i, i)).collect();
    edges_r.extend([(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 4), (3, 0)]);
    let scores: Vec<f64> = (0..f * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let tables: Vec<f64> = (0..edges_r.len() * k * k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let mut worst_row_dev = 0.0f64;
    for steps in 1..=6 {
        let mut t = Tape::new();
        let raw = t.leaf(&tensor(vec![f, k], scores.clone()));
        let lp = t.log_softmax(raw);
        let qt = t.leaf(&tensor(vec![edges_r.len(), k * k], tables.clone()));
        let out = belief_propagation(&mut t, lp, &edges_r, qt, steps);
        let out_exp = t.exp(out);
        let p = t.value(out_exp);
        for r in 0..f {
            let sum: f64 = (0..k).map(|c| p.at(r, c)).sum();
            let dev = (sum - 1.0).abs();
            worst_row_dev = worst_row_dev.max(dev);
            check(
                dev <= BP_ROW_TOL,
                format!("after {steps} steps, row {r} sums to {sum} (dev {dev:.2e})"),
            )?;
        }
    }

    Ok(format!(
        "hand example max err {max_err:.1e} <= {BP_HAND_TOL:.0e}, identity at 0 steps and under uniform tables, row sums within {worst_row_dev:.1e} <= {BP_ROW_TOL:.0e} through 6 steps"
    ))
}

// ---------------------------------------------------------------------------
// 04 — similarity-transform invariance and permutation equivariance
// ---------------------------------------------------------------------------

fn transform_doc(doc: &Document, s: f64, tx: f64, ty: f64) -> Document {
    let mut out = doc.clone();
    out.width = out.width * s + tx;
    out.height = out.height * s + ty;
    for r in &mut out.regions {
        r.bbox = BBox::new(
            s * r.bbox.x_min + tx,
            s * r.bbox.y_min + ty,
            s * r.bbox.x_max + tx,
            s * r.bbox.y_max + ty,
        );
        if let Some(quad) = &mut r.quad {
            for (i, v) in quad.iter_mut().enumerate() {
                *v = if i % 2 == 0 { s * *v + tx } else { s * *v + ty };
            }
        }
    }
    out
}

fn c04_geometric_invariance() -> Outcome {
    let ray = RayConfig::default();
    let types = synth_generate(&default_suite(), 2, 77).map_err(e)?;
    let t0 = types.iter().find(|t| t.split == Split::Train).expect("train type exists");
    let (support, query) = (&t0.docs[0], &t0.docs[1]);
    let config = ModelConfig {
        hidden: vec![8, 8],
        bp_steps: 2,
        avg_before_attention: false,
        unary_source: UnarySource::LfAttn,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = ModelParams::init(config, &mut rng);

    let base = predict(support, query, &params, &ray).map_err(e)?;

    // Uniform scale + translation of the whole query page.
    let moved_doc = transform_doc(query, 2.0, 137.5, -41.25);
    let moved = predict(support, &moved_doc, &params, &ray).map_err(e)?;
    check(moved.labels == base.labels, "labels changed under scale + translation".into())?;
    let mut max_dev = 0.0f64;
    for (a, b) in moved.probs.data().iter().zip(base.probs.data()) {
        max_dev = max_dev.max((a - b).abs());
    }
    check(
        max_dev <= INV_PROB_TOL,
        format!("probabilities moved by {max_dev:.2e} under scale + translation (tol {INV_PROB_TOL:.0e})"),
    )?;

    // Reversing the region list permutes the candidate fields; predictions
    // must follow the permutation.
    let mut reversed_doc = query.clone();
    reversed_doc.regions.reverse();
    let perm = predict(support, &reversed_doc, &params, &ray).map_err(e)?;
    check(
        perm.region_ids.len() == base.region_ids.len(),
        format!("field count changed: {} vs {}", perm.region_ids.len(), base.region_ids.len()),
    )?;
    let k = base.label_space.len();
    let mut max_perm_dev = 0.0f64;
    for (i, rid) in base.region_ids.iter().enumerate() {
        let j = perm
            .region_ids
            .iter()
            .position(|r| r == rid)
            .ok_or_else(|| format!("region `{rid}` missing after permutation"))?;
        check(
            perm.labels[j] == base.labels[i],
            format!("region `{rid}` relabeled under permutation"),
        )?;
        for c in 0..k {
            max_perm_dev = max_perm_dev.max((perm.probs.at(j, c) - base.probs.at(i, c)).abs());
        }
    }
    check(
        max_perm_dev <= PERM_PROB_TOL,
        format!("probabilities moved by {max_perm_dev:.2e} under permutation (tol {PERM_PROB_TOL:.0e})"),
    )?;

    Ok(format!(
        "labels stable, probs within {max_dev:.1e} under scale+translation and {max_perm_dev:.1e} under permutation"
    ))
}

// ---------------------------------------------------------------------------
// 05/07/08 — the default synthetic family, trained once
// ---------------------------------------------------------------------------

const DEFAULT_PER_TYPE: usize = 30;
const DEFAULT_SYNTH_SEED: u64 = 41;
const DEFAULT_TRAIN_SEED: u64 = 23;
const DEFAULT_EVAL_SEED: u64 = 5;
const TRAIN_ITERATIONS: usize = 2000;

struct DefaultRun {
    types: Vec<TypeDocs>,
    lf: ModelParams,
    bp: ModelParams,
    lf_one: EvalReport,
    bp_one: EvalReport,
    pipeline_secs: f64,
}

fn train_config(model: ModelConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: TRAIN_ITERATIONS,
        batch_size: 8,
        base_lr: 0.01,
        lr_decay: 0.1,
        lr_period: 5000,
        momentum: 0.9,
        seed,
        checkpoint_every: 0,
        model,
    }
}

fn lf_config(bp_steps: usize) -> ModelConfig {
    ModelConfig {
        hidden: vec![16, 16],
        bp_steps,
        avg_before_attention: false,
        unary_source: UnarySource::LfAttn,
    }
}

fn train_model(
    label: &str,
    types: &[TypeDocs],
    config: TrainConfig,
    ray: &RayConfig,
) -> Result<ModelParams, String> {
    let refs: Vec<&TypeDocs> = types.iter().filter(|t| t.split == Split::Train).collect();
    eprintln!("acceptance: training {label} ({} iterations)...", config.iterations);
    let mut trainer = Trainer::new(config);
    trainer.run(&refs, ray, |_| Ok(())).map_err(e)?;
    Ok(trainer.params().clone())
}

fn eval_test_split(
    types: &[TypeDocs],
    params: &ModelParams,
    settings: &EvalSettings,
    ray: &RayConfig,
) -> Result<EvalReport, String> {
    let refs: Vec<&TypeDocs> = types.iter().filter(|t| t.split == Split::Test).collect();
    evaluate(&refs, params, settings, ray).map_err(e)
}

fn one_shot_settings() -> EvalSettings {
    EvalSettings { shots: 1, drop_background: false, landmark_drop: 0, seed: DEFAULT_EVAL_SEED }
}

static DEFAULT_RUN: OnceLock<Result<DefaultRun, String>> = OnceLock::new();

fn default_run() -> Result<&'static DefaultRun, String> {
    DEFAULT_RUN
        .get_or_init(|| {
            let start = Instant::now();
            let ray = RayConfig::default();
            let types =
                synth_generate(&default_suite(), DEFAULT_PER_TYPE, DEFAULT_SYNTH_SEED).map_err(e)?;
            let lf = train_model(
                "landmark-attention model",
                &types,
                train_config(lf_config(0), DEFAULT_TRAIN_SEED),
                &ray,
            )?;
            let bp = train_model(
                "landmark-attention + message-passing model",
                &types,
                train_config(lf_config(2), DEFAULT_TRAIN_SEED),
                &ray,
            )?;
            let settings = one_shot_settings();
            let lf_one = eval_test_split(&types, &lf, &settings, &ray)?;
            let bp_one = eval_test_split(&types, &bp, &settings, &ray)?;
            Ok(DefaultRun {
                types,
                lf,
                bp,
                lf_one,
                bp_one,
                pipeline_secs: start.elapsed().as_secs_f64(),
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn c05_end_to_end_accuracy() -> Outcome {
    let run = default_run()?;
    check(
        run.pipeline_secs < E2E_BUDGET_SECS,
        format!("pipeline took {:.0}s, budget {E2E_BUDGET_SECS:.0}s", run.pipeline_secs),
    )?;
    let (lf, bp) = (run.lf_one.overall, run.bp_one.overall);
    check(
        lf >= E2E_LF_MIN,
        format!("held-out one-shot accuracy {lf:.4} below {E2E_LF_MIN} for the attention-only model"),
    )?;
    check(
        bp >= lf,
        format!("message passing must not hurt: {bp:.4} vs attention-only {lf:.4}"),
    )?;
    Ok(format!(
        "held-out one-shot: attention-only {lf:.4} >= {E2E_LF_MIN}, with message passing {bp:.4} >= {lf:.4}, pipeline {:.0}s < {E2E_BUDGET_SECS:.0}s",
        run.pipeline_secs
    ))
}

fn c07_landmark_dropout() -> Outcome {
    let run = default_run()?;
    let ray = RayConfig::default();
    let settings = EvalSettings { landmark_drop: 2, ..one_shot_settings() };
    let lf_drop = eval_test_split(&run.types, &run.lf, &settings, &ray)?;
    let bp_drop = eval_test_split(&run.types, &run.bp, &settings, &ray)?;
    let deg_lf = run.lf_one.overall - lf_drop.overall;
    let deg_bp = run.bp_one.overall - bp_drop.overall;
    check(
        deg_bp <= deg_lf,
        format!(
            "dropping 2 landmarks degrades message passing more: {deg_bp:.4} (to {:.4}) vs attention-only {deg_lf:.4} (to {:.4})",
            bp_drop.overall, lf_drop.overall
        ),
    )?;
    Ok(format!(
        "2 dropped landmarks: degradation {deg_bp:.4} (to {:.4}) with message passing <= {deg_lf:.4} (to {:.4}) attention-only",
        bp_drop.overall, lf_drop.overall
    ))
}

fn c08_five_shot() -> Outcome {
    let run = default_run()?;
    let ray = RayConfig::default();
    let settings = EvalSettings { shots: 5, ..one_shot_settings() };
    let five = eval_test_split(&run.types, &run.bp, &settings, &ray)?;
    let one = run.bp_one.overall;
    check(
        five.overall >= one - FIVESHOT_SLACK,
        format!("five-shot {:.4} fell more than {FIVESHOT_SLACK} below one-shot {one:.4}", five.overall),
    )?;
    Ok(format!(
        "five-shot {:.4} >= one-shot {one:.4} - {FIVESHOT_SLACK}",
        five.overall
    ))
}

// ---------------------------------------------------------------------------
// 06 — attention ablations on the crowded family
// ---------------------------------------------------------------------------

const CROWDED_PER_TYPE: usize = 30;
const CROWDED_SYNTH_SEED: u64 = 42;

struct CrowdedRun {
    avg: EvalReport,
    lf: EvalReport,
    attnbp: EvalReport,
}

static CROWDED_RUN: OnceLock<Result<CrowdedRun, String>> = OnceLock::new();

fn crowded_run() -> Result<&'static CrowdedRun, String> {
    CROWDED_RUN
        .get_or_init(|| {
            let ray = RayConfig::default();
            let types =
                synth_generate(&crowded_suite(), CROWDED_PER_TYPE, CROWDED_SYNTH_SEED).map_err(e)?;
            let avg_cfg = ModelConfig { avg_before_attention: true, ..lf_config(0) };
            let uniform_cfg = ModelConfig { unary_source: UnarySource::Uniform, ..lf_config(2) };
            let avg = train_model(
                "averaged-attention ablation",
                &types,
                train_config(avg_cfg, DEFAULT_TRAIN_SEED),
                &ray,
            )?;
            let lf = train_model(
                "landmark-attention model (crowded)",
                &types,
                train_config(lf_config(0), DEFAULT_TRAIN_SEED),
                &ray,
            )?;
            let attnbp = train_model(
                "message-passing-only model",
                &types,
                train_config(uniform_cfg, DEFAULT_TRAIN_SEED),
                &ray,
            )?;
            let settings = one_shot_settings();
            Ok(CrowdedRun {
                avg: eval_test_split(&types, &avg, &settings, &ray)?,
                lf: eval_test_split(&types, &lf, &settings, &ray)?,
                attnbp: eval_test_split(&types, &attnbp, &settings, &ray)?,
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn c06_ablation_ordering() -> Outcome {
    let run = crowded_run()?;
    let (avg, lf, attnbp) = (run.avg.overall, run.lf.overall, run.attnbp.overall);
    check(
        avg <= lf - ABLATION_GAP,
        format!("averaging before attention should cost >= {ABLATION_GAP}: {avg:.4} vs {lf:.4}"),
    )?;
    check(
        attnbp >= ATTNBP_ALONE_MIN,
        format!("message passing alone reached only {attnbp:.4}, needs {ATTNBP_ALONE_MIN}"),
    )?;
    Ok(format!(
        "crowded one-shot: averaged {avg:.4} <= {lf:.4} - {ABLATION_GAP}, message-passing-only {attnbp:.4} >= {ATTNBP_ALONE_MIN}"
    ))
}

// ---------------------------------------------------------------------------
// 09 — sparse edge economy on wide documents
// ---------------------------------------------------------------------------

fn c09_sparse_economy() -> Outcome {
    let ray = RayConfig::default();
    let types = synth_generate(&dense_suite(), 3, 43).map_err(e)?;
    let beta_cap = (ray.ray_count + 1) as f64;
    let mut min_fields = usize::MAX;
    let mut min_reduction = f64::INFINITY;
    let mut max_beta = 0.0f64;
    let mut docs = 0usize;
    for t in &types {
        for doc in &t.docs {
            let space = LabelSpace::from_document(doc);
            let g = build_graph(doc, None, &space, &ray).map_err(e)?;
            let st = graph_stats(&g, space.len());
            check(
                st.n_fields >= 26,
                format!("`{}` has only {} fields; the regime needs >= 26", doc.doc_id, st.n_fields),
            )?;
            check(
                st.reduction >= REDUCTION_MIN,
                format!(
                    "`{}`: reduction {:.3} below {REDUCTION_MIN} ({} edges over {} fields)",
                    doc.doc_id, st.reduction, st.n_ff_edges, st.n_fields
                ),
            )?;
            check(
                st.beta <= beta_cap,
                format!("`{}`: beta {:.2} exceeds ray_count+1 = {beta_cap}", doc.doc_id, st.beta),
            )?;
            check(
                st.mem_sparse_units < st.mem_full_units,
                format!("`{}`: sparse tables not smaller than dense", doc.doc_id),
            )?;
            min_fields = min_fields.min(st.n_fields);
            min_reduction = min_reduction.min(st.reduction);
            max_beta = max_beta.max(st.beta);
            docs += 1;
        }
    }
    Ok(format!(
        "{docs} documents, |F| >= {min_fields}, reduction >= {min_reduction:.3} (min), beta <= {max_beta:.2} <= {beta_cap}"
    ))
}

// ---------------------------------------------------------------------------
// 10 — bit-identical reruns of the full pipeline
// ---------------------------------------------------------------------------

fn pipeline_artifacts(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>), String> {
    let ray = RayConfig::default();
    let types = synth_generate(&crowded_suite(), 4, 99).map_err(e)?;
    let echo = GeneratorEcho {
        preset: "crowded".into(),
        templates: types.len(),
        per_type: 4,
        seed: 99,
    };
    write_dataset(&types, Some(echo), dir).map_err(e)?;
    let dataset = load_dataset(dir).map_err(e)?;

    let config = TrainConfig {
        iterations: 60,
        batch_size: 4,
        base_lr: 0.01,
        lr_decay: 0.1,
        lr_period: 5000,
        momentum: 0.9,
        seed: 3,
        checkpoint_every: 20,
        model: ModelConfig {
            hidden: vec![8, 8],
            bp_steps: 2,
            avg_before_attention: false,
            unary_source: UnarySource::LfAttn,
        },
    };
    let mut trainer = Trainer::new(config);
    let mut sink_calls = 0usize;
    trainer
        .run(&dataset.train_types(), &ray, |_| {
            sink_calls += 1;
            Ok(())
        })
        .map_err(e)?;
    check(sink_calls == 3, format!("checkpoint sink fired {sink_calls} times, expected 3"))?;
    let ck = checkpoint_bytes(&trainer.checkpoint());

    let report = evaluate(&dataset.test_types(), trainer.params(), &one_shot_settings(), &ray)
        .map_err(e)?;
    let report_bytes = serde_json::to_vec_pretty(&report).map_err(e)?;
    let manifest = std::fs::read(dir.join("manifest.json")).map_err(e)?;
    Ok((manifest, ck, report_bytes))
}

fn c10_determinism() -> Outcome {
    let dir_a = tempfile::tempdir().map_err(e)?;
    let dir_b = tempfile::tempdir().map_err(e)?;
    let (man_a, ck_a, rep_a) = pipeline_artifacts(dir_a.path())?;
    let (man_b, ck_b, rep_b) = pipeline_artifacts(dir_b.path())?;
    check(man_a == man_b, "generated datasets differ between runs".into())?;
    check(ck_a == ck_b, "checkpoints differ between runs".into())?;
    check(rep_a == rep_b, "evaluation reports differ between runs".into())?;
    Ok(format!(
        "two pipeline runs: dataset ({} bytes), checkpoint ({} bytes), report ({} bytes) all bit-identical",
        man_a.len(),
        ck_a.len(),
        rep_a.len()
    ))
}
