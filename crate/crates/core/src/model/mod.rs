//! Desk-scale pre-norm transformer with representation hooks and a
//! hand-written backward pass restricted to adapter parameters.
//!
//! Activations are `(batch * seq_len) x d_model`, one row per token, samples
//! stacked in order. The output head is tied to the token embedding.

mod adapted;
mod task;
mod train;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Architecture, ArchitectureSpec, Role};
use crate::error::{Error, Result};
use crate::importance::{token_rule_for, RepresentationSet};
use crate::lora::AdaptedWeight;
use crate::similarity::RepresentationMatrix;

pub use adapted::{apply_plan, AdaptedModel, LoraConfig};
pub use task::{Example, SyntheticTask, TaskData, TaskKind, CLS_TOKEN};
pub use train::{
    grad_check, grad_check_with, train, Hyperparameters, TrainReport, GRAD_CHECK_STEP,
};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub spec: ArchitectureSpec,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.head_dim * self.spec.n_heads != self.spec.d_model
            || self.spec.n_kv_heads != self.spec.n_heads
        {
            return Err(Error::Invalid(
                "toy models use plain multi-head attention (head_dim * n_heads = d_model)".into(),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Invalid("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Identifies one adapted matrix: 1-based layer and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdapterKey {
    pub layer: usize,
    pub role: Role,
}

/// One transformer block: attention and feed-forward sublayers, each behind
/// an RMS norm and a skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: DVector<f64>,
    pub wq: AdaptedWeight,
    pub wk: AdaptedWeight,
    pub wv: AdaptedWeight,
    pub wo: AdaptedWeight,
    pub ffn_norm: DVector<f64>,
    /// Present only in decoder blocks (gated feed-forward).
    pub wgate: Option<AdaptedWeight>,
    pub wup: AdaptedWeight,
    pub wdown: AdaptedWeight,
}

impl Block {
    pub fn weight(&self, role: Role) -> Option<&AdaptedWeight> {
        match role {
            Role::Wq => Some(&self.wq),
            Role::Wk => Some(&self.wk),
            Role::Wv => Some(&self.wv),
            Role::Wo => Some(&self.wo),
            Role::Wgate => self.wgate.as_ref(),
            Role::Wup => Some(&self.wup),
            Role::Wdown => Some(&self.wdown),
        }
    }

    pub fn weight_mut(&mut self, role: Role) -> Option<&mut AdaptedWeight> {
        match role {
            Role::Wq => Some(&mut self.wq),
            Role::Wk => Some(&mut self.wk),
            Role::Wv => Some(&mut self.wv),
            Role::Wo => Some(&mut self.wo),
            Role::Wgate => self.wgate.as_mut(),
            Role::Wup => Some(&mut self.wup),
            Role::Wdown => Some(&mut self.wdown),
        }
    }

    fn has_adapter(&self) -> bool {
        Role::ALL
            .iter()
            .any(|&r| self.weight(r).is_some_and(|w| w.adapter.is_some()))
    }
}

/// A batch of equal-length token sequences with one label per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `batch_size x seq_len`.
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let seq_len = first.tokens.len();
        if examples.iter().any(|e| e.tokens.len() != seq_len) {
            return Err(Error::DimensionMismatch("ragged batch".into()));
        }
        Ok(Self {
            tokens: examples
                .iter()
                .flat_map(|e| e.tokens.iter().copied())
                .collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            batch_size: examples.len(),
            seq_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    pub token_embedding: DMatrix<f64>,
    pub position_embedding: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: DVector<f64>,
}

/// Outputs of [`ToyModel::forward_with_hooks`].
#[derive(Debug, Clone, PartialEq)]
pub struct HookedOutput {
    /// `batch_size x vocab_size`, read at the CLS or final position.
    pub logits: DMatrix<f64>,
    /// `R_0..R_M`, each `batch_size x d_model`.
    pub representations: Vec<DMatrix<f64>>,
}

struct LayerCache {
    attn_in: DMatrix<f64>,
    attn_normed: DMatrix<f64>,
    attn_inv_rms: Vec<f64>,
    q_lr: Option<DMatrix<f64>>,
    k_lr: Option<DMatrix<f64>>,
    v_lr: Option<DMatrix<f64>>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Attention probabilities per `(sample, head)`.
    probs: Vec<DMatrix<f64>>,
    att: DMatrix<f64>,
    o_lr: Option<DMatrix<f64>>,
    ffn_in: DMatrix<f64>,
    ffn_normed: DMatrix<f64>,
    ffn_inv_rms: Vec<f64>,
    gate_pre: Option<DMatrix<f64>>,
    gate_lr: Option<DMatrix<f64>>,
    up_pre: DMatrix<f64>,
    up_lr: Option<DMatrix<f64>>,
    hidden: DMatrix<f64>,
    down_lr: Option<DMatrix<f64>>,
}

struct Tape {
    layers: Vec<LayerCache>,
    final_normed: DMatrix<f64>,
    final_inv_rms: Vec<f64>,
    probs: DMatrix<f64>,
}

/// Gradients of the loss with respect to adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

pub type Gradients = BTreeMap<AdapterKey, AdapterGrad>;

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.spec;
        let d = spec.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            DMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };

        let emb_std = 1.0 / (d as f64).sqrt();
        let token_embedding = normal(spec.vocab_size, d, emb_std);
        let position_embedding = normal(config.max_seq_len, d, 0.5 * emb_std);
        let residual_std = |fan_in: usize| 1.0 / ((fan_in * 2 * spec.n_layers) as f64).sqrt();
        let proj_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let mut blocks = Vec::with_capacity(spec.n_layers);
        for _ in 0..spec.n_layers {
            let decoder = spec.architecture == Architecture::DecoderOnly;
            let wq = AdaptedWeight::frozen(normal(d, d, proj_std(d)));
            let wk = AdaptedWeight::frozen(normal(d, d, proj_std(d)));
            let wv = AdaptedWeight::frozen(normal(d, d, proj_std(d)));
            let wo = AdaptedWeight::frozen(normal(d, d, residual_std(d)));
            let wgate = decoder.then(|| AdaptedWeight::frozen(normal(spec.d_ff, d, proj_std(d))));
            let wup = AdaptedWeight::frozen(normal(spec.d_ff, d, proj_std(d)));
            let wdown = AdaptedWeight::frozen(normal(d, spec.d_ff, residual_std(spec.d_ff)));
            blocks.push(Block {
                attn_norm: DVector::from_element(d, 1.0),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: DVector::from_element(d, 1.0),
                wgate,
                wup,
                wdown,
            });
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm: DVector::from_element(d, 1.0),
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.config.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.config.spec.architecture
    }

    /// Block for 1-based layer index.
    pub fn layer(&self, layer: usize) -> Option<&Block> {
        layer.checked_sub(1).and_then(|i| self.blocks.get(i))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<&mut Block> {
        layer
            .checked_sub(1)
            .and_then(move |i| self.blocks.get_mut(i))
    }

    /// Keys of every weight that currently carries an adapter, in
    /// (layer, role) order.
    pub fn adapter_keys(&self) -> Vec<AdapterKey> {
        let mut keys = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for role in Role::ALL {
                if block.weight(role).is_some_and(|w| w.adapter.is_some()) {
                    keys.push(AdapterKey { layer: i + 1, role });
                }
            }
        }
        keys
    }

    pub fn weight(&self, key: AdapterKey) -> Option<&AdaptedWeight> {
        self.layer(key.layer).and_then(|b| b.weight(key.role))
    }

    pub fn weight_mut(&mut self, key: AdapterKey) -> Option<&mut AdaptedWeight> {
        self.layer_mut(key.layer)
            .and_then(|b| b.weight_mut(key.role))
    }

    /// Token position read by the head and the hooks.
    fn pick_position(&self, seq_len: usize) -> usize {
        match self.architecture() {
            Architecture::EncoderOnly => 0,
            Architecture::DecoderOnly => seq_len - 1,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let spec = self.spec();
        if batch.batch_size == 0 || batch.seq_len == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if batch.tokens.len() != batch.batch_size * batch.seq_len {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens for a {}x{} batch",
                batch.tokens.len(),
                batch.batch_size,
                batch.seq_len
            )));
        }
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(t) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= spec.vocab_size)
        {
            return Err(Error::Invalid(format!(
                "token {t} is outside the vocabulary of size {}",
                spec.vocab_size
            )));
        }
        Ok(())
    }

    fn check_labels(&self, batch: &Batch) -> Result<()> {
        if batch.labels.len() != batch.batch_size {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} samples",
                batch.labels.len(),
                batch.batch_size
            )));
        }
        if let Some(l) = batch
            .labels
            .iter()
            .find(|&&l| l as usize >= self.spec().vocab_size)
        {
            return Err(Error::Invalid(format!(
                "label {l} is outside the vocabulary"
            )));
        }
        Ok(())
    }

    /// Logits at the CLS (encoder) or final (decoder) position.
    pub fn forward(&self, batch: &Batch) -> Result<DMatrix<f64>> {
        self.check_batch(batch)?;
        Ok(self.run(batch, false, None).0)
    }

    /// Logits plus `R_0..R_M` captured at the same position the head reads.
    pub fn forward_with_hooks(&self, batch: &Batch) -> Result<HookedOutput> {
        self.check_batch(batch)?;
        let mut reps = Vec::with_capacity(self.blocks.len() + 1);
        let (logits, _) = self.run(batch, false, Some(&mut reps));
        Ok(HookedOutput {
            logits,
            representations: reps,
        })
    }

    /// Captures `R_0..R_M` over `batch` as a validated representation set.
    pub fn extract_representations(
        &self,
        batch: &Batch,
        model_id: &str,
    ) -> Result<RepresentationSet> {
        let out = self.forward_with_hooks(batch)?;
        let rule = token_rule_for(self.architecture());
        let matrices = out
            .representations
            .into_iter()
            .enumerate()
            .map(|(i, m)| RepresentationMatrix::new(m, i, rule))
            .collect::<Result<Vec<_>>>()?;
        RepresentationSet::new(matrices, self.architecture(), model_id)
    }

    /// Mean cross-entropy of the labels at the read position.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        self.check_labels(batch)?;
        let logits = self.run(batch, false, None).0;
        Ok(cross_entropy(&logits, &batch.labels).0)
    }

    /// Loss and gradients with respect to every adapter factor.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        self.check_labels(batch)?;
        let (logits, tape) = self.run(batch, true, None);
        let tape = tape.expect("tape requested");
        let (loss, probs) = cross_entropy(&logits, &batch.labels);
        let tape = Tape { probs, ..tape };
        Ok((loss, self.backward(batch, &tape)))
    }

    /// Argmax accuracy of the labels.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        self.check_labels(batch)?;
        let logits = self.forward(batch)?;
        let correct = (0..batch.batch_size)
            .filter(|&i| argmax(logits.row(i).iter().copied()) == batch.labels[i] as usize)
            .count();
        Ok(correct as f64 / batch.batch_size as f64)
    }

    fn embed(&self, batch: &Batch) -> DMatrix<f64> {
        let d = self.spec().d_model;
        let mut x = DMatrix::zeros(batch.batch_size * batch.seq_len, d);
        for (row, &tok) in batch.tokens.iter().enumerate() {
            let pos = row % batch.seq_len;
            let e = self.token_embedding.row(tok as usize) + self.position_embedding.row(pos);
            x.set_row(row, &e);
        }
        x
    }

    fn gather_rows(&self, x: &DMatrix<f64>, batch: &Batch) -> DMatrix<f64> {
        let pos = self.pick_position(batch.seq_len);
        DMatrix::from_fn(batch.batch_size, x.ncols(), |b, j| {
            x[(b * batch.seq_len + pos, j)]
        })
    }

    fn run(
        &self,
        batch: &Batch,
        record: bool,
        mut hooks: Option<&mut Vec<DMatrix<f64>>>,
    ) -> (DMatrix<f64>, Option<Tape>) {
        let spec = self.spec();
        let decoder = spec.architecture == Architecture::DecoderOnly;
        let mut x = self.embed(batch);
        if let Some(h) = hooks.as_deref_mut() {
            h.push(self.gather_rows(&x, batch));
        }
        let mut caches = Vec::new();

        for block in &self.blocks {
            let (attn_in, attn_normed, attn_inv_rms) = rms_norm(&x, &block.attn_norm);
            let (q, q_lr) = block.wq.forward_unchecked(&attn_in);
            let (k, k_lr) = block.wk.forward_unchecked(&attn_in);
            let (v, v_lr) = block.wv.forward_unchecked(&attn_in);
            let (att, probs) = attention(&q, &k, &v, batch, spec.n_heads, decoder);
            let (o, o_lr) = block.wo.forward_unchecked(&att);
            x += &o;

            let (ffn_in, ffn_normed, ffn_inv_rms) = rms_norm(&x, &block.ffn_norm);
            let (up_pre, up_lr) = block.wup.forward_unchecked(&ffn_in);
            let (hidden, gate) = match &block.wgate {
                Some(wgate) => {
                    let (g, g_lr) = wgate.forward_unchecked(&ffn_in);
                    let h = g.zip_map(&up_pre, |g, u| silu(g) * u);
                    (h, Some((g, g_lr)))
                }
                None => (up_pre.map(gelu), None),
            };
            let (f, down_lr) = block.wdown.forward_unchecked(&hidden);
            x += &f;

            if let Some(h) = hooks.as_deref_mut() {
                h.push(self.gather_rows(&x, batch));
            }
            if record {
                let (gate_pre, gate_lr) = match gate {
                    Some((g, lr)) => (Some(g), lr),
                    None => (None, None),
                };
                caches.push(LayerCache {
                    attn_in,
                    attn_normed,
                    attn_inv_rms,
                    q_lr,
                    k_lr,
                    v_lr,
                    q,
                    k,
                    v,
                    probs,
                    att,
                    o_lr,
                    ffn_in,
                    ffn_normed,
                    ffn_inv_rms,
                    gate_pre,
                    gate_lr,
                    up_pre,
                    up_lr,
                    hidden,
                    down_lr,
                });
            }
        }

        let last = self.gather_rows(&x, batch);
        let (final_in, final_normed, final_inv_rms) = rms_norm(&last, &self.final_norm);
        let logits = &final_in * self.token_embedding.transpose();
        let tape = record.then(|| Tape {
            layers: caches,
            final_normed,
            final_inv_rms,
            probs: DMatrix::zeros(0, 0),
        });
        (logits, tape)
    }

    fn backward(&self, batch: &Batch, tape: &Tape) -> Gradients {
        let spec = self.spec();
        let n = batch.batch_size as f64;
        let mut grads = Gradients::new();
        let Some(lowest) = self.blocks.iter().position(Block::has_adapter) else {
            return grads;
        };

        let mut dlogits = tape.probs.clone();
        for (i, &label) in batch.labels.iter().enumerate() {
            dlogits[(i, label as usize)] -= 1.0;
        }
        dlogits /= n;
        let dfinal = &dlogits * &self.token_embedding;
        let dlast = rms_norm_backward(
            &dfinal,
            &tape.final_normed,
            &tape.final_inv_rms,
            &self.final_norm,
        );

        let pos = self.pick_position(batch.seq_len);
        let mut dx = DMatrix::zeros(batch.batch_size * batch.seq_len, spec.d_model);
        for b in 0..batch.batch_size {
            dx.set_row(b * batch.seq_len + pos, &dlast.row(b));
        }

        for li in (lowest..self.blocks.len()).rev() {
            let block = &self.blocks[li];
            let c = &tape.layers[li];
            let layer = li + 1;

            let key = |role| AdapterKey { layer, role };
            let dhidden = linear_backward(
                &block.wdown,
                &c.hidden,
                &c.down_lr,
                &dx,
                key(Role::Wdown),
                &mut grads,
            );
            let dffn_in = match (&block.wgate, &c.gate_pre) {
                (Some(wgate), Some(g)) => {
                    let dg = DMatrix::from_fn(dhidden.nrows(), dhidden.ncols(), |i, j| {
                        dhidden[(i, j)] * c.up_pre[(i, j)] * silu_grad(g[(i, j)])
                    });
                    let du = dhidden.zip_map(g, |dh, g| dh * silu(g));
                    let mut d = linear_backward(
                        wgate,
                        &c.ffn_in,
                        &c.gate_lr,
                        &dg,
                        key(Role::Wgate),
                        &mut grads,
                    );
                    d += linear_backward(
                        &block.wup,
                        &c.ffn_in,
                        &c.up_lr,
                        &du,
                        key(Role::Wup),
                        &mut grads,
                    );
                    d
                }
                _ => {
                    let du = dhidden.zip_map(&c.up_pre, |dh, u| dh * gelu_grad(u));
                    linear_backward(
                        &block.wup,
                        &c.ffn_in,
                        &c.up_lr,
                        &du,
                        key(Role::Wup),
                        &mut grads,
                    )
                }
            };
            dx += rms_norm_backward(&dffn_in, &c.ffn_normed, &c.ffn_inv_rms, &block.ffn_norm);

            let datt = linear_backward(&block.wo, &c.att, &c.o_lr, &dx, key(Role::Wo), &mut grads);
            let (dq, dk, dv) = attention_backward(&datt, c, batch, spec.n_heads);
            let mut dattn_in = linear_backward(
                &block.wq,
                &c.attn_in,
                &c.q_lr,
                &dq,
                key(Role::Wq),
                &mut grads,
            );
            dattn_in += linear_backward(
                &block.wk,
                &c.attn_in,
                &c.k_lr,
                &dk,
                key(Role::Wk),
                &mut grads,
            );
            dattn_in += linear_backward(
                &block.wv,
                &c.attn_in,
                &c.v_lr,
                &dv,
                key(Role::Wv),
                &mut grads,
            );
            dx += rms_norm_backward(&dattn_in, &c.attn_normed, &c.attn_inv_rms, &block.attn_norm);
        }
        grads
    }
}

/// Propagates `dy` through `y = x W^T + s (x A^T) B^T`, recording adapter
/// gradients. Returns `dx`.
fn linear_backward(
    w: &AdaptedWeight,
    input: &DMatrix<f64>,
    low_rank: &Option<DMatrix<f64>>,
    dy: &DMatrix<f64>,
    key: AdapterKey,
    grads: &mut Gradients,
) -> DMatrix<f64> {
    let mut dx = dy * w.base();
    if let (Some(ad), Some(u)) = (&w.adapter, low_rank) {
        let s = ad.scale();
        let dy_b = dy * &ad.b;
        let gb = (dy.transpose() * u) * s;
        let ga = (dy_b.transpose() * input) * s;
        dx.gemm(s, &dy_b, &ad.a, 1.0);
        grads.insert(key, AdapterGrad { b: gb, a: ga });
    }
    dx
}

fn rms_norm(x: &DMatrix<f64>, gain: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let inv_rms: Vec<f64> = x
        .row_iter()
        .map(|r| 1.0 / (r.norm_squared() / d + NORM_EPS).sqrt())
        .collect();
    let normed = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * inv_rms[i]);
    let out = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| normed[(i, j)] * gain[j]);
    (out, normed, inv_rms)
}

fn rms_norm_backward(
    dy: &DMatrix<f64>,
    normed: &DMatrix<f64>,
    inv_rms: &[f64],
    gain: &DVector<f64>,
) -> DMatrix<f64> {
    let d = dy.ncols();
    let mut dx = DMatrix::zeros(dy.nrows(), d);
    for i in 0..dy.nrows() {
        let mut dot = 0.0;
        for j in 0..d {
            dot += dy[(i, j)] * gain[j] * normed[(i, j)];
        }
        let mean = dot / d as f64;
        for j in 0..d {
            dx[(i, j)] = inv_rms[i] * (dy[(i, j)] * gain[j] - normed[(i, j)] * mean);
        }
    }
    dx
}

fn attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    batch: &Batch,
    n_heads: usize,
    causal: bool,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let t = batch.seq_len;
    let dh = q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = DMatrix::zeros(q.nrows(), q.ncols());
    let mut all_probs = Vec::with_capacity(batch.batch_size * n_heads);
    for b in 0..batch.batch_size {
        for h in 0..n_heads {
            let qs = q.view((b * t, h * dh), (t, dh));
            let ks = k.view((b * t, h * dh), (t, dh));
            let vs = v.view((b * t, h * dh), (t, dh));
            let mut scores = (qs * ks.transpose()) * scale;
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let max = (0..visible)
                    .map(|j| scores[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..t {
                    let p = if j < visible {
                        (scores[(i, j)] - max).exp()
                    } else {
                        0.0
                    };
                    scores[(i, j)] = p;
                    sum += p;
                }
                for j in 0..t {
                    scores[(i, j)] /= sum;
                }
            }
            let o = &scores * vs;
            out.view_mut((b * t, h * dh), (t, dh)).copy_from(&o);
            all_probs.push(scores);
        }
    }
    (out, all_probs)
}

fn attention_backward(
    datt: &DMatrix<f64>,
    c: &LayerCache,
    batch: &Batch,
    n_heads: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let t = batch.seq_len;
    let dh = c.q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = DMatrix::zeros(c.q.nrows(), c.q.ncols());
    let mut dk = DMatrix::zeros(c.k.nrows(), c.k.ncols());
    let mut dv = DMatrix::zeros(c.v.nrows(), c.v.ncols());
    for b in 0..batch.batch_size {
        for h in 0..n_heads {
            let p = &c.probs[b * n_heads + h];
            let d_o = datt.view((b * t, h * dh), (t, dh));
            let qs = c.q.view((b * t, h * dh), (t, dh));
            let ks = c.k.view((b * t, h * dh), (t, dh));
            let vs = c.v.view((b * t, h * dh), (t, dh));

            let dp = d_o * vs.transpose();
            let dvs = p.transpose() * d_o;
            let mut ds = DMatrix::zeros(t, t);
            for i in 0..t {
                let row_dot: f64 = (0..t).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                for j in 0..t {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - row_dot) * scale;
                }
            }
            dq.view_mut((b * t, h * dh), (t, dh)).copy_from(&(&ds * ks));
            dk.view_mut((b * t, h * dh), (t, dh))
                .copy_from(&(ds.transpose() * qs));
            dv.view_mut((b * t, h * dh), (t, dh)).copy_from(&dvs);
        }
    }
    (dq, dk, dv)
}

/// Mean cross-entropy and row-wise softmax probabilities.
fn cross_entropy(logits: &DMatrix<f64>, labels: &[u32]) -> (f64, DMatrix<f64>) {
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let max = logits.row(i).max();
        let mut sum = 0.0;
        for j in 0..logits.ncols() {
            let e = (logits[(i, j)] - max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..logits.ncols() {
            probs[(i, j)] /= sum;
        }
        total += sum.ln() + max - logits[(i, label as usize)];
    }
    (total / labels.len() as f64, probs)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::preset;
    use crate::similarity::cka;

    fn tiny(arch: Architecture, layers: usize) -> ToyModel {
        let spec = ArchitectureSpec::new(layers, 8, 2, 16, 16, arch, [Role::Wq, Role::Wv]).unwrap();
        ToyModel::new(ToyModelConfig {
            spec,
            max_seq_len: 6,
            seed: 7,
        })
        .unwrap()
    }

    fn batch(b: usize, t: usize, vocab: u32, cls: bool) -> Batch {
        let tokens = (0..b * t)
            .map(|i| {
                if cls && i % t == 0 {
                    CLS_TOKEN
                } else {
                    1 + (i as u32 * 7 + 3) % (vocab - 1)
                }
            })
            .collect();
        Batch {
            tokens,
            labels: (0..b as u32).map(|i| i % vocab).collect(),
            batch_size: b,
            seq_len: t,
        }
    }

    #[test]
    fn hooks_shapes_and_consistency() {
        for arch in [Architecture::EncoderOnly, Architecture::DecoderOnly] {
            let m = tiny(arch, 3);
            let bt = batch(5, 4, 16, arch == Architecture::EncoderOnly);
            let out = m.forward_with_hooks(&bt).unwrap();
            assert_eq!(out.representations.len(), 4);
            for r in &out.representations {
                assert_eq!(r.shape(), (5, 8));
            }
            assert_eq!(out.logits, m.forward(&bt).unwrap());
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut m = tiny(Architecture::DecoderOnly, 1);
        for role in Role::ALL {
            if let Some(w) = m.blocks[0].weight_mut(role) {
                w.base_mut().fill(0.0);
            }
        }
        let bt = batch(6, 4, 16, false);
        let set = m.extract_representations(&bt, "zeroed").unwrap();
        let r = cka(&set.matrices()[0], &set.matrices()[1]).unwrap();
        assert!((r.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encoder_cls_representation_is_degenerate() {
        let m = tiny(Architecture::EncoderOnly, 2);
        let set = m
            .extract_representations(&batch(6, 5, 16, true), "enc")
            .unwrap();
        let r0 = set.matrices()[0].data();
        for i in 1..r0.nrows() {
            assert_eq!(r0.row(i), r0.row(0));
        }
        let iv = crate::importance::layer_importance(&set).unwrap();
        assert!(iv.degenerate_layers.contains(&1));
    }

    #[test]
    fn rejects_out_of_vocab_and_long_sequences() {
        let m = tiny(Architecture::DecoderOnly, 1);
        let mut bt = batch(2, 3, 16, false);
        bt.tokens[1] = 16;
        assert!(m.forward(&bt).is_err());
        assert!(m.forward(&batch(2, 7, 16, false)).is_err());
    }

    #[test]
    fn deterministic_construction() {
        let p = preset("toy-decoder").unwrap();
        let cfg = ToyModelConfig {
            spec: p.spec,
            max_seq_len: 8,
            seed: 11,
        };
        assert_eq!(
            ToyModel::new(cfg.clone()).unwrap(),
            ToyModel::new(cfg).unwrap()
        );
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            assert!(((silu(x + h) - silu(x - h)) / (2.0 * h) - silu_grad(x)).abs() < 1e-8);
            assert!(((gelu(x + h) - gelu(x - h)) / (2.0 * h) - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
