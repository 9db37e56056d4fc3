//! Episodic training: batch sampling over template types, SGD with
//! momentum and stepwise learning-rate decay, and binary checkpoints that
//! resume bit-exactly.
//!
//! Every run owns a single seeded RNG. Parameter initialization draws
//! first, batch sampling draws after, and a checkpoint records the RNG's
//! seed and stream position, so a resumed run replays the exact draw
//! sequence an uninterrupted run would have made.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TypeDocs;
use crate::error::{Error, Result};
use crate::graph::RayConfig;
use crate::model::{self, ModelConfig, ModelParams};
use crate::par;
use crate::tensor::{lr_at, SgdMomentum, Tensor};

/// Everything a training run needs beyond the data itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplier applied to the learning rate every `lr_period` iterations.
    pub lr_decay: f64,
    pub lr_period: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Invoke the checkpoint sink every this many iterations (0 = never).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 8,
            base_lr: 0.01,
            lr_decay: 0.1,
            lr_period: 5_000,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

/// One support/query episode inside a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPick {
    pub type_idx: usize,
    pub support: usize,
    pub query: usize,
}

/// Draw a batch: up to `batch_size` *distinct* types, and for each an
/// ordered pair of distinct documents (first is the support).
pub fn sample_batch(
    types: &[&TypeDocs],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchPick>> {
    if types.is_empty() {
        return Err(Error::Dataset("cannot sample a batch from zero types".into()));
    }
    let n_types = batch_size.min(types.len());
    let chosen = rand::seq::index::sample(rng, types.len(), n_types);
    let mut picks = Vec::with_capacity(n_types);
    for type_idx in chosen {
        let n_docs = types[type_idx].docs.len();
        if n_docs < 2 {
            return Err(Error::Dataset(format!(
                "type `{}` has fewer than 2 documents",
                types[type_idx].type_id
            )));
        }
        let pair = rand::seq::index::sample(rng, n_docs, 2);
        picks.push(BatchPick { type_idx, support: pair.index(0), query: pair.index(1) });
    }
    Ok(picks)
}

/// Loss and learning rate at one completed iteration (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// A paused training run: everything needed to continue it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

/// Owns the evolving state of one training run.
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    opt: SgdMomentum,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(config.model.clone(), &mut rng);
        let opt = SgdMomentum::new(config.momentum, &params.tensors());
        Trainer { config, params, opt, rng, iteration: 0 }
    }

    /// Rebuild the trainer a checkpoint describes, mid-stream RNG included.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let expected: Vec<Vec<usize>> =
            ck.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let got: Vec<Vec<usize>> = ck.velocity.iter().map(|t| t.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos);
        Ok(Trainer {
            opt: SgdMomentum { momentum: ck.config.momentum, velocity: ck.velocity },
            config: ck.config,
            params: ck.params,
            rng,
            iteration: ck.iteration,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed iterations so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            params: self.params.clone(),
            velocity: self.opt.velocity.clone(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// One batch: sample episodes, average loss and gradients over the
    /// pairs whose landmarks matched, and apply one SGD step.
    ///
    /// Pairs with no landmark correspondence are skipped; a batch where
    /// *every* pair fails is an error. Non-finite numbers anywhere surface
    /// as [`Error::Diverged`].
    pub fn step(&mut self, types: &[&TypeDocs], ray: &RayConfig) -> Result<TraceRow> {
        let picks = sample_batch(types, self.config.batch_size, &mut self.rng)?;
        let episodes: Vec<(&crate::graph::Document, &crate::graph::Document)> = picks
            .iter()
            .map(|p| (&types[p.type_idx].docs[p.support], &types[p.type_idx].docs[p.query]))
            .collect();

        let params = &self.params;
        let results = par::map_ordered(&episodes, |&(support, query)| {
            let inst = match model::prepare_pair(support, query, ray) {
                Ok(inst) => inst,
                Err(Error::NoCorrespondence) => return Ok(None),
                Err(e) => return Err(e),
            };
            model::pair_loss_and_grads(&inst, params).map(Some)
        });

        // Fixed-order reduction: the sum visits pairs in sample order no
        // matter how many threads computed them.
        let mut n_ok = 0usize;
        let mut loss_sum = 0.0;
        let mut grad_sum: Option<Vec<Tensor>> = None;
        for r in results {
            let Some((loss, grads)) = r.map_err(|e| self.divergence(e))? else { continue };
            n_ok += 1;
            loss_sum += loss;
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv;
                        }
                    }
                }
            }
        }
        if n_ok == 0 {
            return Err(Error::Dataset(
                "every pair in the batch failed landmark matching".into(),
            ));
        }
        let loss = loss_sum / n_ok as f64;
        let mut grads = grad_sum.expect("n_ok > 0 implies gradients");
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= n_ok as f64;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(self.iteration + 1));
        }

        let lr = lr_at(self.config.base_lr, self.config.lr_decay, self.config.lr_period, self.iteration);
        let mut tensors = self.params.tensors_mut();
        self.opt.step(&mut tensors, &grads, lr);
        self.iteration += 1;
        Ok(TraceRow { iteration: self.iteration, lr, loss })
    }

    fn divergence(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(_) => Error::Diverged(self.iteration + 1),
            other => other,
        }
    }

    /// Run until `config.iterations`, invoking `sink` after every
    /// `checkpoint_every`-th iteration (and never for 0).
    pub fn run<F>(&mut self, types: &[&TypeDocs], ray: &RayConfig, mut sink: F) -> Result<Vec<TraceRow>>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        let mut trace = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step(types, ray)?;
            trace.push(row);
            if self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0
            {
                sink(self)?;
            }
        }
        Ok(trace)
    }
}

const MAGIC: &[u8; 4] = b"FMCK";
const VERSION: u32 = 1;

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn tensors(&mut self, ts: &[&Tensor]) {
        self.u64(ts.len() as u64);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("absurd length {v}")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.usize()?;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("absurd tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.usize()?);
        }
        let n: usize = shape.iter().product();
        if n > 100_000_000 {
            return Err(Error::Checkpoint(format!("absurd tensor volume {n}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn tensor_list(&mut self) -> Result<Vec<Tensor>> {
        let n = self.usize()?;
        if n > 10_000 {
            return Err(Error::Checkpoint(format!("absurd tensor count {n}")));
        }
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Serialize a checkpoint: magic, format version, fixed-width
/// little-endian payload, CRC32 trailer over everything before it.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let c = &ck.config;
    w.u64(c.iterations as u64);
    w.u64(c.batch_size as u64);
    w.f64(c.base_lr);
    w.f64(c.lr_decay);
    w.u64(c.lr_period as u64);
    w.f64(c.momentum);
    w.u64(c.seed);
    w.u64(c.checkpoint_every as u64);
    let m = &c.model;
    w.u64(m.hidden.len() as u64);
    for &h in &m.hidden {
        w.u64(h as u64);
    }
    w.u64(m.bp_steps as u64);
    w.u8(m.avg_before_attention as u8);
    w.u8(match m.unary_source {
        crate::model::UnarySource::LfAttn => 0,
        crate::model::UnarySource::Uniform => 1,
    });

    w.u64(ck.iteration as u64);
    w.tensors(&ck.params.tensors());
    let vel: Vec<&Tensor> = ck.velocity.iter().collect();
    w.tensors(&vel);
    w.buf.extend_from_slice(&ck.rng_seed);
    w.u128(ck.rng_word_pos);

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Parse [`checkpoint_bytes`] output, verifying magic, version, and CRC.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + 4 {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch (stored {stored:08x}, computed {computed:08x}): file is corrupt or truncated"
        )));
    }

    let mut r = ByteReader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }

    let iterations = r.usize()?;
    let batch_size = r.usize()?;
    let base_lr = r.f64()?;
    let lr_decay = r.f64()?;
    let lr_period = r.usize()?;
    let momentum = r.f64()?;
    let seed = r.u64()?;
    let checkpoint_every = r.usize()?;
    let n_hidden = r.usize()?;
    if n_hidden > 64 {
        return Err(Error::Checkpoint(format!("absurd hidden layer count {n_hidden}")));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.usize()?);
    }
    let bp_steps = r.usize()?;
    let avg_before_attention = r.u8()? != 0;
    let unary_source = match r.u8()? {
        0 => crate::model::UnarySource::LfAttn,
        1 => crate::model::UnarySource::Uniform,
        v => return Err(Error::Checkpoint(format!("unknown unary source tag {v}"))),
    };
    let model = ModelConfig { hidden, bp_steps, avg_before_attention, unary_source };
    let config = TrainConfig {
        iterations,
        batch_size,
        base_lr,
        lr_decay,
        lr_period,
        momentum,
        seed,
        checkpoint_every,
        model: model.clone(),
    };

    let iteration = r.usize()?;
    let tensors = r.tensor_list()?;
    let velocity = r.tensor_list()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing garbage after payload".into()));
    }

    // Pour the flat tensor list into a freshly-shaped parameter set; any
    // disagreement with the stored model config is corruption.
    let mut shaping_rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(model, &mut shaping_rng);
    {
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model config (want {})",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match model config (want {:?})",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
    }

    Ok(Checkpoint { config, iteration, params, velocity, rng_seed, rng_word_pos })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}
