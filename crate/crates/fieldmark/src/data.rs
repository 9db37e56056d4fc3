//! Dataset schema, loader, and the synthetic template generator.
//!
//! A dataset on disk is a directory of one JSON file per document plus a
//! `manifest.json` naming every file, its template type, and the type's
//! split (train or test). The synthetic generator turns [`TemplateSpec`]s
//! into such datasets deterministically: each instance applies one global
//! similarity jitter (scale about the page center plus translation), then
//! small per-region noise, landmark dropout, and a per-instance choice of
//! anchored background regions. A brute-force nearest-slot oracle runs
//! during generation so that every emitted dataset provably admits a
//! perfect labeling from geometry alone.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_box, BBox};
use crate::graph::{Document, Role, TextRegion};

/// Which half of the template split a type belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One `manifest.json` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub type_id: String,
    pub split: Split,
}

/// Echo of the generator invocation, stored for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    pub preset: String,
    pub templates: usize,
    pub per_type: usize,
    pub seed: u64,
}

/// The `manifest.json` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub documents: Vec<ManifestEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorEcho>,
}

/// All documents of one template type.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeDocs {
    pub type_id: String,
    pub split: Split,
    pub docs: Vec<Document>,
}

/// A loaded dataset: types sorted by id, each holding its documents in
/// manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub types: Vec<TypeDocs>,
}

impl Dataset {
    pub fn train_types(&self) -> Vec<&TypeDocs> {
        self.types.iter().filter(|t| t.split == Split::Train).collect()
    }

    pub fn test_types(&self) -> Vec<&TypeDocs> {
        self.types.iter().filter(|t| t.split == Split::Test).collect()
    }

    pub fn n_documents(&self) -> usize {
        self.types.iter().map(|t| t.docs.len()).sum()
    }
}

/// Validate one document's internal consistency (ids, boxes, quads, roles).
/// Does not clamp; the loader clamps after validation.
pub fn validate_document(doc: &Document) -> Result<()> {
    let fail = |reason: String| {
        Err(Error::InvalidDocument { doc_id: doc.doc_id.clone(), reason })
    };
    if !(doc.width.is_finite() && doc.height.is_finite() && doc.width > 0.0 && doc.height > 0.0) {
        return fail(format!("bad page size {}x{}", doc.width, doc.height));
    }
    if doc.regions.is_empty() {
        return fail("empty F: document has no regions".to_string());
    }
    let mut seen = BTreeSet::new();
    for r in &doc.regions {
        if !seen.insert(r.id.as_str()) {
            return fail(format!("duplicate region id `{}`", r.id));
        }
        if !r.bbox.is_valid() {
            return fail(format!(
                "region `{}` has an invalid box [{}, {}, {}, {}]",
                r.id, r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max
            ));
        }
        if let Some(quad) = &r.quad {
            let hull = bounding_box(quad).map_err(|_| Error::InvalidDocument {
                doc_id: doc.doc_id.clone(),
                reason: format!("region `{}` has a non-finite quad", r.id),
            })?;
            let close = (hull.x_min - r.bbox.x_min).abs() <= 1e-6
                && (hull.y_min - r.bbox.y_min).abs() <= 1e-6
                && (hull.x_max - r.bbox.x_max).abs() <= 1e-6
                && (hull.y_max - r.bbox.y_max).abs() <= 1e-6;
            if !close {
                return fail(format!("region `{}`: box does not bound its quad", r.id));
            }
        }
        if r.role == Role::Landmark && r.label.is_some() {
            return fail(format!("region `{}` is a landmark but carries a label", r.id));
        }
    }
    Ok(())
}

/// Read and validate a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(format!("malformed manifest.json: {e}")))?;

    let mut types: Vec<TypeDocs> = Vec::new();
    for entry in &manifest.documents {
        let path = root.join(&entry.file);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let mut doc: Document = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", entry.file)))?;
        if doc.type_id != entry.type_id {
            return Err(Error::Dataset(format!(
                "{}: document type `{}` disagrees with manifest type `{}`",
                entry.file, doc.type_id, entry.type_id
            )));
        }
        validate_document(&doc)?;
        for r in &mut doc.regions {
            r.bbox = r.bbox.clamped(doc.width, doc.height);
        }
        match types.iter_mut().find(|t| t.type_id == entry.type_id) {
            Some(t) => {
                if t.split != entry.split {
                    return Err(Error::Dataset(format!(
                        "type `{}` appears in both splits",
                        entry.type_id
                    )));
                }
                t.docs.push(doc);
            }
            None => types.push(TypeDocs {
                type_id: entry.type_id.clone(),
                split: entry.split,
                docs: vec![doc],
            }),
        }
    }

    for t in &types {
        if t.docs.len() < 2 {
            return Err(Error::Dataset(format!(
                "type `{}` has {} document(s); every type needs at least 2",
                t.type_id,
                t.docs.len()
            )));
        }
    }
    types.sort_by(|a, b| a.type_id.cmp(&b.type_id));
    Ok(Dataset { root: root.to_path_buf(), types })
}

/// Read, validate, and clamp a single document JSON file.
pub fn load_document(path: &Path) -> Result<Document> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Document = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    validate_document(&doc)?;
    for r in &mut doc.regions {
        r.bbox = r.bbox.clamped(doc.width, doc.height);
    }
    Ok(doc)
}

/// Write documents and a manifest into `dir` (created if missing). Output
/// bytes are a pure function of the input.
pub fn write_dataset(types: &[TypeDocs], generator: Option<GeneratorEcho>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for t in types {
        for doc in &t.docs {
            let file = format!("{}.json", doc.doc_id);
            let mut bytes = serde_json::to_vec(doc)?;
            bytes.push(b'\n');
            std::fs::write(dir.join(&file), bytes)?;
            entries.push(ManifestEntry { file, type_id: t.type_id.clone(), split: t.split });
        }
    }
    let manifest = Manifest { documents: entries, generator };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

/// One logical field of a template: a label and one or more sub-boxes
/// (several sub-boxes model a field whose value spans separate regions).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSlot {
    pub label: String,
    pub boxes: Vec<BBox>,
}

/// Instance-to-instance variation knobs. Standard deviations are in page
/// units; scale is uniform about the page center.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterModel {
    pub translation_sigma: (f64, f64),
    pub scale_range: (f64, f64),
    pub region_sigma: (f64, f64),
    pub landmark_dropout: f64,
    /// Inclusive range for how many anchored background slots materialize.
    pub background_range: (usize, usize),
}

impl JitterModel {
    pub fn frozen() -> Self {
        JitterModel {
            translation_sigma: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            region_sigma: (0.0, 0.0),
            landmark_dropout: 0.0,
            background_range: (0, 0),
        }
    }
}

/// A layout family: fixed landmark texts and nominal boxes, labeled field
/// slots, anchored background slots, and a jitter model.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSpec {
    pub type_id: String,
    pub split: Split,
    pub page: (f64, f64),
    /// `(fixed text, nominal box)` per landmark.
    pub landmarks: Vec<(String, BBox)>,
    pub slots: Vec<FieldSlot>,
    /// Anchored positions background regions may occupy.
    pub background_slots: Vec<BBox>,
    /// Landmarks with fixed text but no fixed home: each instance places
    /// the landmark at one of the listed anchor boxes, chosen at random.
    /// They match across documents by text like any landmark, yet carry no
    /// stable geometry, and they never enter the slot-placement frame.
    pub roaming_landmarks: Vec<(String, Vec<BBox>)>,
    pub jitter: JitterModel,
}

impl TemplateSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Synthesis(format!("template `{}`: {m}", self.type_id)));
        if self.landmarks.is_empty() {
            return err("needs at least one landmark".into());
        }
        let mut texts = BTreeSet::new();
        for (t, b) in &self.landmarks {
            if !texts.insert(t.as_str()) {
                return err(format!("duplicate landmark text `{t}`"));
            }
            if !within_page(b, self.page) {
                return err(format!("landmark `{t}` off page"));
            }
        }
        for (t, anchors) in &self.roaming_landmarks {
            if !texts.insert(t.as_str()) {
                return err(format!("duplicate landmark text `{t}`"));
            }
            if anchors.is_empty() {
                return err(format!("roaming landmark `{t}` has no anchors"));
            }
            for b in anchors {
                if !within_page(b, self.page) {
                    return err(format!("roaming landmark `{t}` anchor off page"));
                }
            }
        }
        let mut labels = BTreeSet::new();
        for s in &self.slots {
            if !labels.insert(s.label.as_str()) {
                return err(format!("duplicate slot label `{}`", s.label));
            }
            if s.boxes.is_empty() {
                return err(format!("slot `{}` has no boxes", s.label));
            }
            for b in &s.boxes {
                if !within_page(b, self.page) {
                    return err(format!("slot `{}` off page", s.label));
                }
            }
        }
        for b in &self.background_slots {
            if !within_page(b, self.page) {
                return err("background slot off page".into());
            }
        }
        let (lo, hi) = self.jitter.background_range;
        if lo > hi || hi > self.background_slots.len() {
            return err("background count range exceeds anchored slots".into());
        }
        Ok(())
    }
}

fn within_page(b: &BBox, page: (f64, f64)) -> bool {
    b.is_valid() && b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= page.0 && b.y_max <= page.1
}

/// One step of the splitmix64 sequence — used to derive independent child
/// seeds from (seed, index...) paths.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for a (seed, a, b) path.
pub fn child_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

const PLACEMENT_ATTEMPTS: usize = 100;


struct PlacedRegion {
    id: String,
    bbox: BBox,
    text: String,
    role: Role,
    label: Option<String>,
}

/// Generate one instance of a template.
///
/// The instance applies: landmark dropout (never all), a background-slot
/// choice, one global scale+translation accepted only when every nominal
/// box (roaming anchors included) stays on page, then per-region noise
/// accepted only when the region
/// stays on page *and* remains nearest to its own nominal slot once slots
/// are mapped through the transform the kept landmarks imply. Each
/// rejection resamples, up to 100 times.
pub fn synth_instance(spec: &TemplateSpec, index: usize, seed: u64) -> Result<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let page = spec.page;
    let (cx, cy) = (page.0 / 2.0, page.1 / 2.0);
    let j = &spec.jitter;
    let fail = |m: String| Error::Synthesis(format!("template `{}`: {m}", spec.type_id));

    // Landmark dropout.
    let mut kept: Vec<usize> = (0..spec.landmarks.len())
        .filter(|_| !rng.gen_bool(j.landmark_dropout))
        .collect();
    if kept.is_empty() {
        kept.push(0);
    }

    // Background choice: how many, then which anchored slots.
    let n_bg = if j.background_range.1 > j.background_range.0 {
        rng.gen_range(j.background_range.0..=j.background_range.1)
    } else {
        j.background_range.0
    };
    let mut bg_idx =
        rand::seq::index::sample(&mut rng, spec.background_slots.len(), n_bg).into_vec();
    bg_idx.sort_unstable();

    // Global transform, rejected while any nominal box leaves the page.
    let mut all_nominal: Vec<BBox> = Vec::new();
    for &li in &kept {
        all_nominal.push(spec.landmarks[li].1);
    }
    for s in &spec.slots {
        all_nominal.extend_from_slice(&s.boxes);
    }
    for &bi in &bg_idx {
        all_nominal.push(spec.background_slots[bi]);
    }
    for (_, anchors) in &spec.roaming_landmarks {
        all_nominal.extend_from_slice(anchors);
    }
    let t_norm = Normal::new(0.0, 1.0).expect("unit normal");
    let mut transform = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let s = if j.scale_range.1 > j.scale_range.0 {
            rng.gen_range(j.scale_range.0..j.scale_range.1)
        } else {
            j.scale_range.0
        };
        let tx = t_norm.sample(&mut rng) * j.translation_sigma.0;
        let ty = t_norm.sample(&mut rng) * j.translation_sigma.1;
        let apply = move |b: &BBox| {
            BBox::new(
                cx + s * (b.x_min - cx) + tx,
                cy + s * (b.y_min - cy) + ty,
                cx + s * (b.x_max - cx) + tx,
                cy + s * (b.y_max - cy) + ty,
            )
        };
        if all_nominal.iter().all(|b| within_page(&apply(b), page)) {
            transform = Some(apply);
            break;
        }
    }
    let transform =
        transform.ok_or_else(|| fail("global jitter kept pushing boxes off page".to_string()))?;

    // Landmarks: transformed plus noise; they define the instance frame.
    let mut regions: Vec<PlacedRegion> = Vec::new();
    for &li in &kept {
        let (text, nominal) = &spec.landmarks[li];
        let placed = place_with_noise(&transform(nominal), page, j, &mut rng, &t_norm)
            .ok_or_else(|| fail(format!("landmark `{text}` kept landing off page")))?;
        regions.push(PlacedRegion {
            id: format!("lm{li}"),
            bbox: placed,
            text: text.clone(),
            role: Role::Landmark,
            label: None,
        });
    }

    // Oracle frame: recover the instance's global similarity transform from
    // the kept landmarks. Region noise only translates boxes, so landmark
    // sizes recover the scale exactly; centering averages the noise down.
    let mut size_inst = 0.0;
    let mut size_nom = 0.0;
    let mut ci = (0.0, 0.0);
    let mut cn = (0.0, 0.0);
    for (&li, placed) in kept.iter().zip(&regions) {
        let nom = &spec.landmarks[li].1;
        size_inst += placed.bbox.width() + placed.bbox.height();
        size_nom += nom.width() + nom.height();
        let (x, y) = placed.bbox.center();
        ci = (ci.0 + x, ci.1 + y);
        let (x, y) = nom.center();
        cn = (cn.0 + x, cn.1 + y);
    }
    let n = kept.len() as f64;
    let s_star = if size_nom > 1e-9 { size_inst / size_nom } else { 1.0 };
    let t_star = (ci.0 / n - s_star * cn.0 / n, ci.1 / n - s_star * cn.1 / n);
    let slot_center = move |b: &BBox| {
        let (x, y) = b.center();
        (s_star * x + t_star.0, s_star * y + t_star.1)
    };

    // All slots the oracle may attribute a region to.
    let mut oracle_slots: Vec<(&str, BBox)> = Vec::new();
    for s in &spec.slots {
        for b in &s.boxes {
            oracle_slots.push((s.label.as_str(), *b));
        }
    }
    for &bi in &bg_idx {
        oracle_slots.push(("background", spec.background_slots[bi]));
    }

    let place_field = |nominal: &BBox,
                           label: &str,
                           id: String,
                           text: String,
                           rng: &mut ChaCha8Rng|
     -> Result<PlacedRegion> {
        let target = transform(nominal);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some(candidate) = noisy_box(&target, j, rng, &t_norm) else { continue };
            if !within_page(&candidate, page) {
                continue;
            }
            // Nearest-slot oracle: after mapping nominal slots through the
            // landmark-estimated transform, the region must stay closest to
            // its own slot.
            let (u, v) = candidate.center();
            let mut best: Option<(&str, f64)> = None;
            for (slot_label, slot_box) in &oracle_slots {
                let (su, sv) = slot_center(slot_box);
                let d = (u - su).powi(2) + (v - sv).powi(2);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((slot_label, d));
                }
            }
            if best.map(|(l, _)| l) == Some(label) {
                return Ok(PlacedRegion {
                    id,
                    bbox: candidate,
                    text,
                    role: Role::Field,
                    label: Some(label.to_string()),
                });
            }
        }
        Err(fail(format!("region `{id}` kept violating the nearest-slot oracle")))
    };

    for (si, slot) in spec.slots.iter().enumerate() {
        for (bi, b) in slot.boxes.iter().enumerate() {
            let id =
                if slot.boxes.len() == 1 { format!("f{si}") } else { format!("f{si}_{bi}") };
            let text = format!("val {:05}", rng.gen_range(0..100_000));
            let r = place_field(b, &slot.label, id, text, &mut rng)?;
            regions.push(r);
        }
    }
    for &bi in &bg_idx {
        let text = format!("misc {:04}", rng.gen_range(0..10_000));
        let r = place_field(
            &spec.background_slots[bi],
            "background",
            format!("bg{bi}"),
            text,
            &mut rng,
        )?;
        regions.push(r);
    }

    // Roaming landmarks draw last so templates without any keep the exact
    // same stream as before the draw existed.
    for (ri, (text, anchors)) in spec.roaming_landmarks.iter().enumerate() {
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let placed = place_with_noise(&transform(&anchor), page, j, &mut rng, &t_norm)
            .ok_or_else(|| fail(format!("roaming landmark `{text}` kept landing off page")))?;
        regions.push(PlacedRegion {
            id: format!("rm{ri}"),
            bbox: placed,
            text: text.clone(),
            role: Role::Landmark,
            label: None,
        });
    }

    let doc = Document {
        doc_id: format!("{}-{index:02}", spec.type_id),
        type_id: spec.type_id.clone(),
        width: page.0,
        height: page.1,
        regions: regions
            .into_iter()
            .map(|r| TextRegion {
                id: r.id,
                bbox: r.bbox,
                quad: None,
                text: r.text,
                role: r.role,
                label: r.label,
            })
            .collect(),
    };
    validate_document(&doc)?;
    Ok(doc)
}

fn noisy_box(
    b: &BBox,
    j: &JitterModel,
    rng: &mut ChaCha8Rng,
    norm: &Normal<f64>,
) -> Option<BBox> {
    let nx = norm.sample(rng) * j.region_sigma.0;
    let ny = norm.sample(rng) * j.region_sigma.1;
    let out = BBox::new(b.x_min + nx, b.y_min + ny, b.x_max + nx, b.y_max + ny);
    out.is_valid().then_some(out)
}

fn place_with_noise(
    target: &BBox,
    page: (f64, f64),
    j: &JitterModel,
    rng: &mut ChaCha8Rng,
    norm: &Normal<f64>,
) -> Option<BBox> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        if let Some(b) = noisy_box(target, j, rng, norm) {
            if within_page(&b, page) {
                return Some(b);
            }
        }
    }
    None
}

/// Generate `per_type` instances of every template. Fully deterministic:
/// instance `(t, i)` draws from a child seed of `(seed, t, i)`.
pub fn synth_generate(specs: &[TemplateSpec], per_type: usize, seed: u64) -> Result<Vec<TypeDocs>> {
    if per_type < 2 {
        return Err(Error::Synthesis(format!(
            "per_type = {per_type}, but every type needs at least 2 documents for pairing"
        )));
    }
    let mut out = Vec::with_capacity(specs.len());
    for (t, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let mut docs = Vec::with_capacity(per_type);
        for i in 0..per_type {
            docs.push(synth_instance(spec, i, child_seed(seed, t as u64, i as u64))?);
        }
        out.push(TypeDocs { type_id: spec.type_id.clone(), split: spec.split, docs });
    }
    Ok(out)
}

use rand::SeedableRng;

const LANDMARK_WORDS: [&str; 12] = [
    "Name:", "Date:", "Total:", "Ref:", "Address:", "Phone:", "Item:", "Code:", "Note:", "Tax:",
    "Origin:", "Status:",
];

/// The standard page used by the regular synthetic families.
const PAGE: (f64, f64) = (800.0, 600.0);

fn standard_jitter() -> JitterModel {
    JitterModel {
        translation_sigma: (0.05 * PAGE.0, 0.05 * PAGE.1),
        scale_range: (0.9, 1.1),
        region_sigma: (0.01 * PAGE.0, 0.01 * PAGE.1),
        landmark_dropout: 0.04,
        background_range: (2, 4),
    }
}

/// Build one grid-layout template. The layout itself is randomized from
/// `layout_seed` (cell choice, landmark count, multi-region slots) so that
/// templates differ, but the function is deterministic.
fn grid_template(
    type_id: &str,
    split: Split,
    layout_seed: u64,
    n_slots: usize,
    jitter: JitterModel,
) -> TemplateSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
    let n_landmarks = rng.gen_range(4..=6);

    // Landmarks along the top edge and left margin.
    let mut landmarks = Vec::new();
    let word_order = rand::seq::index::sample(&mut rng, LANDMARK_WORDS.len(), n_landmarks);
    for (li, wi) in word_order.iter().enumerate() {
        let b = if li < 3 {
            // top row
            let x = 60.0 + li as f64 * 240.0 + rng.gen_range(-20.0..20.0);
            BBox::new(x, 30.0, x + 110.0, 56.0)
        } else {
            // left margin
            let y = 140.0 + (li - 3) as f64 * 150.0 + rng.gen_range(-20.0..20.0);
            BBox::new(40.0, y, 150.0, y + 26.0)
        };
        landmarks.push((LANDMARK_WORDS[wi].to_string(), b));
    }

    // Field slots on a 4x4 content grid; each template uses its own subset
    // of cells and its own within-cell offsets.
    let (cols, rows) = (4usize, 4usize);
    let (x0, y0) = (210.0, 110.0);
    let (dx, dy) = ((PAGE.0 - x0 - 40.0) / cols as f64, (PAGE.1 - y0 - 40.0) / rows as f64);
    let n_cells = cols * rows;
    let used = rand::seq::index::sample(&mut rng, n_cells, n_slots + 4);
    let mut slots = Vec::new();
    for (si, cell) in used.iter().take(n_slots).enumerate() {
        let (r, c) = (cell / cols, cell % cols);
        let jx = rng.gen_range(0.0..30.0);
        let jy = rng.gen_range(0.0..14.0);
        let bx = x0 + c as f64 * dx + jx;
        let by = y0 + r as f64 * dy + jy;
        let w = rng.gen_range(90.0..130.0);
        let main = BBox::new(bx, by, bx + w, by + 24.0);
        // Roughly one slot in ten spans two stacked regions.
        let boxes = if rng.gen_bool(0.1) {
            vec![main, BBox::new(bx, by + 30.0, bx + w * 0.8, by + 54.0)]
        } else {
            vec![main]
        };
        slots.push(FieldSlot { label: format!("field{si:02}"), boxes });
    }
    // Remaining sampled cells anchor background slots.
    let background_slots: Vec<BBox> = used
        .iter()
        .skip(n_slots)
        .map(|cell| {
            let (r, c) = (cell / cols, cell % cols);
            let bx = x0 + c as f64 * dx + rng.gen_range(0.0..30.0) + 8.0;
            let by = y0 + r as f64 * dy + rng.gen_range(0.0..14.0) + 28.0;
            BBox::new(bx, by, bx + 80.0, by + 22.0)
        })
        .collect();

    TemplateSpec {
        type_id: type_id.to_string(),
        split,
        page: PAGE,
        landmarks,
        slots,
        background_slots,
        roaming_landmarks: vec![],
        jitter,
    }
}

/// A receipt-like interleaved template: a tall narrow page, two landmarks,
/// and a dense `cols x rows` grid of per-cell labels. With landmarks this
/// sparse, label identity hinges on direction-sensitive geometry.
fn crowded_template(
    type_id: &str,
    split: Split,
    layout_seed: u64,
    cols: usize,
    rows: usize,
) -> TemplateSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
    let page = (400.0, 700.0);
    let landmarks = vec![
        (
            "Receipt No:".to_string(),
            BBox::new(30.0 + rng.gen_range(0.0..20.0), 24.0, 190.0, 48.0),
        ),
        (
            "Thank you".to_string(),
            BBox::new(120.0 + rng.gen_range(0.0..20.0), 650.0, 280.0, 672.0),
        ),
    ];
    let (x0, y0) = (30.0, 90.0);
    let dx = (page.0 - 2.0 * x0) / cols as f64;
    let dyy = (560.0 - y0) / rows as f64;
    let mut slots = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let bx = x0 + c as f64 * dx + rng.gen_range(0.0..8.0);
            let by = y0 + r as f64 * dyy + rng.gen_range(0.0..6.0);
            slots.push(FieldSlot {
                label: format!("cell_r{r}c{c}"),
                boxes: vec![BBox::new(bx, by, bx + dx - 18.0, by + 20.0)],
            });
        }
    }
    let background_slots = vec![
        BBox::new(40.0, 580.0, 170.0, 600.0),
        BBox::new(210.0, 580.0, 340.0, 600.0),
        BBox::new(40.0, 612.0, 170.0, 632.0),
    ];
    TemplateSpec {
        type_id: type_id.to_string(),
        split,
        page,
        landmarks,
        slots,
        background_slots,
        roaming_landmarks: vec![],
        jitter: JitterModel {
            translation_sigma: (0.04 * page.0, 0.04 * page.1),
            scale_range: (0.92, 1.08),
            region_sigma: (0.006 * page.0, 0.006 * page.1),
            landmark_dropout: 0.0,
            background_range: (1, 3),
        },
    }
}

/// The default synthetic suite: 12 training templates (one of them
/// receipt-like with only two landmarks) and 4 held-out templates.
pub fn default_suite() -> Vec<TemplateSpec> {
    let mut specs = Vec::new();
    for t in 0..11 {
        let n_slots = 8 + (t % 4);
        specs.push(grid_template(
            &format!("tmpl{t:02}"),
            Split::Train,
            0x5EED_0000 + t as u64,
            n_slots,
            standard_jitter(),
        ));
    }
    specs.push(crowded_template("tmpl11", Split::Train, 0x5EED_0100, 3, 5));
    for t in 0..4 {
        specs.push(grid_template(
            &format!("held{t:02}"),
            Split::Test,
            0x7E57_0000 + t as u64,
            9 + t,
            standard_jitter(),
        ));
    }
    specs
}

/// The crowded family: every template is receipt-like with two anchored
/// landmarks, interleaved per-cell labels, and a "Customer Copy" stamp that
/// roams between the four page corners. The stamp matches across documents
/// like any landmark but its geometry is uninformative, so pooling landmark
/// features indiscriminately mixes it in while selective scoring can learn
/// to discount it. Train and test layouts differ.
pub fn crowded_suite() -> Vec<TemplateSpec> {
    let stamp_corners = |spec: &mut TemplateSpec| {
        spec.roaming_landmarks = vec![(
            "Customer Copy".to_string(),
            vec![
                BBox::new(30.0, 56.0, 110.0, 78.0),
                BBox::new(288.0, 56.0, 368.0, 78.0),
                BBox::new(30.0, 648.0, 110.0, 670.0),
                BBox::new(288.0, 648.0, 368.0, 670.0),
            ],
        )];
    };
    let mut specs = Vec::new();
    for t in 0..6 {
        let rows = 4 + (t % 2);
        specs.push(crowded_template(
            &format!("crowd{t:02}"),
            Split::Train,
            0xC0FFEE_00 + t as u64,
            3,
            rows,
        ));
    }
    for t in 0..3 {
        specs.push(crowded_template(
            &format!("crowdheld{t}"),
            Split::Test,
            0xC0FFEE_80 + t as u64,
            3,
            4 + t % 2,
        ));
    }
    for spec in &mut specs {
        stamp_corners(spec);
    }
    specs
}

/// A single wide template whose instances carry at least 26 field regions —
/// the memory-economy regime where sparse edge tables pay off.
pub fn dense_suite() -> Vec<TemplateSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0_5EED);
    let page = (900.0, 900.0);
    let landmarks: Vec<(String, BBox)> = (0..4)
        .map(|li| {
            let x = 60.0 + li as f64 * 210.0;
            (LANDMARK_WORDS[li].to_string(), BBox::new(x, 24.0, x + 120.0, 48.0))
        })
        .collect();
    let (cols, rows) = (6usize, 6usize);
    let (x0, y0) = (40.0, 90.0);
    let dx = (page.0 - 2.0 * x0) / cols as f64;
    let dy = (820.0 - y0) / rows as f64;
    let mut slots = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let si = r * cols + c;
            if si >= 34 {
                break;
            }
            let bx = x0 + c as f64 * dx + rng.gen_range(0.0..10.0);
            let by = y0 + r as f64 * dy + rng.gen_range(0.0..8.0);
            // Tall blocks close the horizontal aisles, so most rays stop at
            // an immediate neighbor instead of crossing the page.
            slots.push(FieldSlot {
                label: format!("dense{si:02}"),
                boxes: vec![BBox::new(bx, by, bx + dx - 24.0, by + 42.0)],
            });
        }
    }
    vec![TemplateSpec {
        type_id: "dense0".to_string(),
        split: Split::Train,
        page,
        landmarks,
        slots,
        background_slots: vec![BBox::new(60.0, 840.0, 200.0, 862.0)],
        roaming_landmarks: vec![],
        jitter: JitterModel {
            translation_sigma: (0.02 * page.0, 0.02 * page.1),
            scale_range: (0.95, 1.05),
            region_sigma: (0.005 * page.0, 0.005 * page.1),
            landmark_dropout: 0.0,
            background_range: (1, 1),
        },
    }]
}
