//! Tiny frozen transformer classifier.
//!
//! Pre-layer-norm blocks with single-head attention (no mask) and a GELU
//! feed-forward network. The class head reads the last token's final hidden
//! state. Linear weights are stored `out × in`, so a row-major activation
//! batch `X` maps to `X · Wᵀ`.
//!
//! Edited layers are feed-forward output projections. The routing query is
//! the last-token residual state entering the feed-forward sublayer of the
//! master (first edited) block, which no adapter can influence.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraFactors, LoraModule, LoraPool};
use crate::error::{Result, SolaError};
use crate::numerics::{argmax, cross_entropy, gaussian_init, softmax, Mat, SeededRng};
use crate::routing::{Decision, KeyMemory};

const LN_EPS: f64 = 1e-5;

/// Feed-forward output projection of one block, the unit LoRA attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerId(pub usize);

impl LayerId {
    pub fn block(self) -> usize {
        self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.ffn.out", self.0)
    }
}

impl From<LayerId> for String {
    fn from(id: LayerId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for LayerId {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.strip_prefix("blocks.")
            .and_then(|rest| rest.strip_suffix(".ffn.out"))
            .and_then(|n| n.parse().ok())
            .map(LayerId)
            .ok_or_else(|| format!("bad layer id {s:?}, expected blocks.N.ffn.out"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub n_classes: usize,
    pub edited_layers: Vec<LayerId>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            seq_len: 16,
            d_model: 32,
            n_blocks: 4,
            ffn_hidden: 64,
            n_classes: 8,
            edited_layers: vec![LayerId(2), LayerId(3)],
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn master_layer(&self) -> LayerId {
        self.edited_layers[0]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("ffn_hidden", self.ffn_hidden),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(SolaError::Param(format!("{name} must be >= 1")));
            }
        }
        if self.edited_layers.is_empty() {
            return Err(SolaError::Param("edited_layers must be nonempty".into()));
        }
        for pair in self.edited_layers.windows(2) {
            if pair[0] >= pair[1] {
                return Err(SolaError::Param(
                    "edited_layers must be strictly increasing by block".into(),
                ));
            }
        }
        if let Some(last) = self.edited_layers.last() {
            if last.block() >= self.n_blocks {
                return Err(SolaError::Index {
                    what: "edited layer block",
                    index: last.block(),
                    limit: self.n_blocks,
                });
            }
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(SolaError::Param("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn is_edited(&self, block: usize) -> bool {
        self.edited_layers.iter().any(|l| l.block() == block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<BlockWeights>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub head: Mat,
    pub head_b: Mat,
}

impl BlockWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_hidden;
        BlockWeights {
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
            w1: Mat::zeros(f, d),
            b1: Mat::zeros(1, f),
            w2: Mat::zeros(d, f),
            b2: Mat::zeros(1, d),
        }
    }

    fn fields(&self) -> [(&'static str, &Mat); 12] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.q", &self.wq),
            ("attn.k", &self.wk),
            ("attn.v", &self.wv),
            ("attn.o", &self.wo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("ffn.in.w", &self.w1),
            ("ffn.in.b", &self.b1),
            ("ffn.out.w", &self.w2),
            ("ffn.out.b", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Mat); 12] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.q", &mut self.wq),
            ("attn.k", &mut self.wk),
            ("attn.v", &mut self.wv),
            ("attn.o", &mut self.wo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("ffn.in.w", &mut self.w1),
            ("ffn.in.b", &mut self.b1),
            ("ffn.out.w", &mut self.w2),
            ("ffn.out.b", &mut self.b2),
        ]
    }
}

impl Weights {
    /// All-zero weights with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Weights {
            tok_emb: Mat::zeros(cfg.vocab, d),
            pos_emb: Mat::zeros(cfg.seq_len, d),
            blocks: (0..cfg.n_blocks).map(|_| BlockWeights::zeros(cfg)).collect(),
            lnf_g: Mat::zeros(1, d),
            lnf_b: Mat::zeros(1, d),
            head: Mat::zeros(cfg.n_classes, d),
            head_b: Mat::zeros(1, cfg.n_classes),
        }
    }

    /// Parameters in a fixed canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.fields() {
                out.push((format!("blocks.{i}.{name}"), m));
            }
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out.push(("head.w".into(), &self.head));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in b.fields_mut() {
                out.push((format!("blocks.{i}.{name}"), m));
            }
        }
        out.push(("lnf.g".into(), &mut self.lnf_g));
        out.push(("lnf.b".into(), &mut self.lnf_b));
        out.push(("head.w".into(), &mut self.head));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

/// Frozen base model `f_base`. Weights are never mutated in place; training
/// consumes a model and returns a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    config: ModelConfig,
    weights: Weights,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    weights: BTreeMap<String, Mat>,
}

impl BaseModel {
    /// Random init: Gaussian(0, init_std) matrices, layer-norm gains 1,
    /// all biases 0. Draw order follows [`Weights::named`].
    pub fn build(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        for (name, m) in weights.named_mut() {
            if name.ends_with(".g") {
                m.data.iter_mut().for_each(|v| *v = 1.0);
            } else if name.ends_with(".b") {
                // zero bias
            } else {
                *m = gaussian_init(rng, m.rows, m.cols, config.init_std)?;
            }
        }
        Ok(BaseModel { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let reference = Weights::zeros(&config);
        for ((name, want), (_, got)) in reference.named().iter().zip(weights.named()) {
            if want.shape() != got.shape() {
                return Err(SolaError::Param(format!(
                    "weight {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if reference.blocks.len() != weights.blocks.len() {
            return Err(SolaError::Param("block count mismatch".into()));
        }
        if !weights.is_finite() {
            return Err(SolaError::Numeric("non-finite weights".into()));
        }
        Ok(BaseModel { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn to_json(&self) -> Result<String> {
        let weights = self.weights.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
        let ck = Checkpoint {
            config: self.config.clone(),
            weights,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(s)?;
        ck.config.validate()?;
        let mut weights = Weights::zeros(&ck.config);
        for (name, slot) in weights.named_mut() {
            let m = ck
                .weights
                .remove(&name)
                .ok_or_else(|| SolaError::Param(format!("checkpoint missing weight {name}")))?;
            if m.shape() != slot.shape() {
                return Err(SolaError::Param(format!("checkpoint weight {name} has wrong shape")));
            }
            *slot = m;
        }
        if let Some(extra) = ck.weights.keys().next() {
            return Err(SolaError::Param(format!("checkpoint has unknown weight {extra}")));
        }
        BaseModel::from_weights(ck.config, weights)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.config.seq_len {
            return Err(SolaError::Param(format!(
                "sequence length {} != seq_len {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(SolaError::Index {
                what: "token id",
                index: t,
                limit: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Forward pass. With `AdapterCtx::None` this is the pure base model.
    pub fn forward(&self, tokens: &[usize], ctx: AdapterCtx<'_>) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let w = &self.weights;
        let d = cfg.d_model;
        let last = cfg.seq_len - 1;
        let master = cfg.master_layer().block();

        let mut h = Mat::zeros(cfg.seq_len, d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = h.row_mut(i);
            for ((o, e), p) in row.iter_mut().zip(w.tok_emb.row(t)).zip(w.pos_emb.row(i)) {
                *o = e + p;
            }
        }

        let mut hidden = Vec::with_capacity(cfg.n_blocks + 1);
        let mut caches = Vec::with_capacity(cfg.n_blocks);
        let mut query = Vec::new();
        let mut decision = None;
        let mut active: Option<&LoraModule> = None;
        let mut active_id = None;
        if let AdapterCtx::Fixed(m) = ctx {
            active = Some(m);
            active_id = Some(m.lora_id());
        }

        for (bi, bw) in w.blocks.iter().enumerate() {
            hidden.push(h.clone());
            let (h1, mut cache) = attention_sublayer(bw, &h, d)?;
            if bi == master {
                query = h1.row(last).to_vec();
                if let AdapterCtx::Routed { memory, pool } = ctx {
                    let dec = memory.master_decide(&query);
                    if let Some(id) = dec.lora_id() {
                        let m = pool
                            .get(id)
                            .ok_or_else(|| SolaError::State(format!("routed to unknown LoRA module {id}")))?;
                        active = Some(m);
                        active_id = Some(id);
                    }
                    decision = Some(dec);
                }
            }
            let lora = active.and_then(|m| m.factors(LayerId(bi)));
            let out = ffn_sublayer(bw, &h1, lora, &mut cache)?;
            caches.push(cache);
            h = out;
        }
        hidden.push(h.clone());

        let (lnf_out, lnf_cache) = layer_norm(&row_mat(h.row(last)), &w.lnf_g, &w.lnf_b);
        let mut logits = lnf_out.matmul_t(&w.head)?;
        logits.add_row_broadcast(&w.head_b.data);
        let logits = logits.data;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(SolaError::Numeric("non-finite logits".into()));
        }

        Ok(ForwardTrace {
            hidden,
            query,
            logits,
            decision,
            active_lora: active_id,
            tokens: tokens.to_vec(),
            caches,
            lnf_cache,
            lnf_out,
        })
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.forward(tokens, AdapterCtx::None)?.logits))
    }

    /// Reverse-mode gradients of cross-entropy with respect to the factors
    /// of the module that was active in `trace`. Base weights get nothing.
    pub fn backward_lora(&self, trace: &ForwardTrace, label: usize, module: &LoraModule) -> Result<LoraGrads> {
        if trace.active_lora != Some(module.lora_id()) {
            return Err(SolaError::State(format!(
                "trace was produced with module {:?}, gradients requested for {}",
                trace.active_lora,
                module.lora_id()
            )));
        }
        let (_, lora) = self.backward(trace, label, Some(module), false)?;
        Ok(lora)
    }

    /// Full-parameter gradients for base training (no adapter involved).
    pub fn backward_full(&self, trace: &ForwardTrace, label: usize) -> Result<Weights> {
        if trace.active_lora.is_some() {
            return Err(SolaError::State("full backward expects an adapter-free trace".into()));
        }
        let (grads, _) = self.backward(trace, label, None, true)?;
        grads.ok_or_else(|| SolaError::State("no weight gradients produced".into()))
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        label: usize,
        module: Option<&LoraModule>,
        weight_grads: bool,
    ) -> Result<(Option<Weights>, LoraGrads)> {
        let cfg = &self.config;
        if label >= cfg.n_classes {
            return Err(SolaError::Index {
                what: "class label",
                index: label,
                limit: cfg.n_classes,
            });
        }
        if trace.caches.len() != cfg.n_blocks || trace.tokens.len() != cfg.seq_len {
            return Err(SolaError::State("trace does not belong to this model".into()));
        }
        let w = &self.weights;
        let last = cfg.seq_len - 1;
        let mut grads = weight_grads.then(|| Weights::zeros(cfg));
        let mut lora_grads = LoraGrads::default();

        let mut dlogits = softmax(&trace.logits);
        dlogits[label] -= 1.0;
        let dlogits = row_mat(&dlogits);
        if let Some(g) = grads.as_mut() {
            g.head = dlogits.t_matmul(&trace.lnf_out)?;
            g.head_b = dlogits.clone();
        }
        let dlnf = dlogits.matmul(&w.head)?;
        let (dlast, dg, db) = layer_norm_backward(&dlnf, &trace.lnf_cache, &w.lnf_g);
        if let Some(g) = grads.as_mut() {
            g.lnf_g = dg;
            g.lnf_b = db;
        }
        let mut dh = Mat::zeros(cfg.seq_len, cfg.d_model);
        dh.row_mut(last).copy_from_slice(&dlast.data);

        // LoRA-only gradients need nothing below the shallowest edited block.
        let lowest = if weight_grads { 0 } else { cfg.master_layer().block() };
        for bi in (lowest..cfg.n_blocks).rev() {
            let lora = module.and_then(|m| m.factors(LayerId(bi)));
            let bg = grads.as_mut().map(|g| &mut g.blocks[bi]);
            let (dx, lg) = block_backward(&w.blocks[bi], &trace.caches[bi], &dh, lora, bg)?;
            if let Some(lg) = lg {
                lora_grads.per_layer.insert(LayerId(bi), lg);
            }
            dh = dx;
        }

        if let Some(g) = grads.as_mut() {
            for (i, &t) in trace.tokens.iter().enumerate() {
                let src = dh.row(i).to_vec();
                for (o, v) in g.tok_emb.row_mut(t).iter_mut().zip(&src) {
                    *o += v;
                }
                for (o, v) in g.pos_emb.row_mut(i).iter_mut().zip(&src) {
                    *o += v;
                }
            }
        }
        Ok((grads, lora_grads))
    }

    pub fn loss(&self, tokens: &[usize], label: usize, ctx: AdapterCtx<'_>) -> Result<f64> {
        cross_entropy(&self.forward(tokens, ctx)?.logits, label)
    }
}

/// Which adapters participate in a forward pass.
#[derive(Clone, Copy)]
pub enum AdapterCtx<'a> {
    /// Pure base forward.
    None,
    /// One module forced active at every edited layer (used while editing).
    Fixed(&'a LoraModule),
    /// Master-layer routing through the key memory; the decision is made
    /// once and reused by every downstream edited layer.
    Routed { memory: &'a KeyMemory, pool: &'a LoraPool },
}

/// Gradients for the factor pairs of one module, keyed by edited layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraGrads {
    pub per_layer: BTreeMap<LayerId, LoraFactors>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    att: Mat,
    ctx: Mat,
    ln2: Option<LnCache>,
    f: Mat,
    u: Mat,
    g: Mat,
    lora_z: Option<Mat>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream entering each block, followed by the final state.
    pub hidden: Vec<Mat>,
    /// Last-token residual state entering the master block's FFN sublayer.
    pub query: Vec<f64>,
    pub logits: Vec<f64>,
    /// Routing outcome; `None` when no routing took place.
    pub decision: Option<Decision>,
    pub active_lora: Option<usize>,
    tokens: Vec<usize>,
    caches: Vec<BlockCache>,
    lnf_cache: LnCache,
    lnf_out: Mat,
}

impl ForwardTrace {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

fn row_mat(v: &[f64]) -> Mat {
    Mat {
        rows: 1,
        cols: v.len(),
        data: v.to_vec(),
    }
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let n = x.cols as f64;
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for (c, v) in row.iter().enumerate() {
            let xh = (v - mean) * inv;
            xhat.data[r * x.cols + c] = xh;
            out.data[r * x.cols + c] = xh * g.data[c] + b.data[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns (dx, dgain, dbias).
fn layer_norm_backward(dy: &Mat, cache: &LnCache, g: &Mat) -> (Mat, Mat, Mat) {
    let cols = dy.cols;
    let n = cols as f64;
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dg = Mat::zeros(1, cols);
    let mut db = Mat::zeros(1, cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..cols {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            let dxh = dyr[c] * g.data[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
        }
        let inv = cache.inv_std[r];
        for c in 0..cols {
            let dxh = dyr[c] * g.data[c];
            dx.data[r * cols + c] = inv / n * (n * dxh - sum_dxh - xh[c] * sum_dxh_xh);
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn attention_sublayer(bw: &BlockWeights, x: &Mat, d: usize) -> Result<(Mat, BlockCache)> {
    let (a, ln1) = layer_norm(x, &bw.ln1_g, &bw.ln1_b);
    let q = a.matmul_t(&bw.wq)?;
    let k = a.matmul_t(&bw.wk)?;
    let v = a.matmul_t(&bw.wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut att = q.matmul_t(&k)?;
    for r in 0..att.rows {
        let scaled: Vec<f64> = att.row(r).iter().map(|s| s * scale).collect();
        att.row_mut(r).copy_from_slice(&softmax(&scaled));
    }
    let ctx = att.matmul(&v)?;
    let mut h1 = ctx.matmul_t(&bw.wo)?;
    for (o, xi) in h1.data.iter_mut().zip(&x.data) {
        *o += xi;
    }
    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        att,
        ctx,
        ln2: None,
        f: Mat::zeros(0, 0),
        u: Mat::zeros(0, 0),
        g: Mat::zeros(0, 0),
        lora_z: None,
    };
    Ok((h1, cache))
}

fn ffn_sublayer(bw: &BlockWeights, h1: &Mat, lora: Option<&LoraFactors>, cache: &mut BlockCache) -> Result<Mat> {
    let (f, ln2) = layer_norm(h1, &bw.ln2_g, &bw.ln2_b);
    let mut u = f.matmul_t(&bw.w1)?;
    u.add_row_broadcast(&bw.b1.data);
    let g = Mat {
        rows: u.rows,
        cols: u.cols,
        data: u.data.iter().map(|&x| gelu(x)).collect(),
    };
    let mut y = g.matmul_t(&bw.w2)?;
    y.add_row_broadcast(&bw.b2.data);
    if let Some(fac) = lora {
        let z = g.matmul_t(&fac.a)?;
        let delta = z.matmul_t(&fac.b)?;
        y.add_assign(&delta)?;
        cache.lora_z = Some(z);
    }
    let mut out = y;
    for (o, hi) in out.data.iter_mut().zip(&h1.data) {
        *o += hi;
    }
    cache.ln2 = Some(ln2);
    cache.f = f;
    cache.u = u;
    cache.g = g;
    Ok(out)
}

fn block_backward(
    bw: &BlockWeights,
    cache: &BlockCache,
    dout: &Mat,
    lora: Option<&LoraFactors>,
    mut wgrads: Option<&mut BlockWeights>,
) -> Result<(Mat, Option<LoraFactors>)> {
    let d = dout.cols;
    // FFN: out = h1 + gelu(LN2(h1) W1ᵀ + b1) W2ᵀ + b2 [+ (g Aᵀ) Bᵀ]
    let dy = dout;
    let mut dg = dy.matmul(&bw.w2)?;
    let mut lora_grad = None;
    if let Some(fac) = lora {
        let z = cache
            .lora_z
            .as_ref()
            .ok_or_else(|| SolaError::State("trace has no LoRA activations for this layer".into()))?;
        let db = dy.t_matmul(z)?;
        let dz = dy.matmul(&fac.b)?;
        let da = dz.t_matmul(&cache.g)?;
        dg.add_assign(&dz.matmul(&fac.a)?)?;
        lora_grad = Some(LoraFactors { a: da, b: db });
    }
    let mut du = dg;
    for (v, &x) in du.data.iter_mut().zip(&cache.u.data) {
        *v *= gelu_grad(x);
    }
    let df = du.matmul(&bw.w1)?;
    let ln2 = cache
        .ln2
        .as_ref()
        .ok_or_else(|| SolaError::State("incomplete block cache".into()))?;
    let (dh1_ln, dg2, db2) = layer_norm_backward(&df, ln2, &bw.ln2_g);
    let mut dh1 = dy.clone();
    dh1.add_assign(&dh1_ln)?;
    if let Some(g) = wgrads.as_deref_mut() {
        g.w2 = dy.t_matmul(&cache.g)?;
        g.b2 = row_mat(&dy.col_sums());
        g.w1 = du.t_matmul(&cache.f)?;
        g.b1 = row_mat(&du.col_sums());
        g.ln2_g = dg2;
        g.ln2_b = db2;
    }

    // Attention: h1 = x + (softmax(q kᵀ/√d) v) Woᵀ
    let dctx = dh1.matmul(&bw.wo)?;
    let datt = dctx.matmul_t(&cache.v)?;
    let dv = cache.att.t_matmul(&dctx)?;
    let mut ds = Mat::zeros(datt.rows, datt.cols);
    let scale = 1.0 / (d as f64).sqrt();
    for r in 0..datt.rows {
        let p = cache.att.row(r);
        let dp = datt.row(r);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for c in 0..datt.cols {
            ds.data[r * datt.cols + c] = p[c] * (dp[c] - inner) * scale;
        }
    }
    let dq = ds.matmul(&cache.k)?;
    let dk = ds.t_matmul(&cache.q)?;
    let mut da = dq.matmul(&bw.wq)?;
    da.add_assign(&dk.matmul(&bw.wk)?)?;
    da.add_assign(&dv.matmul(&bw.wv)?)?;
    let (dx_ln, dg1, db1) = layer_norm_backward(&da, &cache.ln1, &bw.ln1_g);
    let mut dx = dh1.clone();
    dx.add_assign(&dx_ln)?;
    if let Some(g) = wgrads {
        g.wo = dh1.t_matmul(&cache.ctx)?;
        g.wq = dq.t_matmul(&cache.a)?;
        g.wk = dk.t_matmul(&cache.a)?;
        g.wv = dv.t_matmul(&cache.a)?;
        g.ln1_g = dg1;
        g.ln1_b = db1;
    }
    Ok((dx, lora_grad))
}

/// A labeled token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs: 30,
            lr: 0.1,
            batch_size: 16,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

pub fn accuracy(model: &BaseModel, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(1.0);
    }
    let mut correct = 0usize;
    for ex in data {
        if model.predict(&ex.tokens)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Full-parameter minibatch SGD (with optional heavy-ball momentum) on
/// cross-entropy. Batches visit a per-epoch shuffle drawn from
/// `train.seed`; gradients are averaged in dataset order.
pub fn train_base(model: BaseModel, data: &[Example], train: &BaseTrainConfig) -> Result<(BaseModel, BaseTrainReport)> {
    if data.is_empty() {
        return Err(SolaError::Param("empty training set".into()));
    }
    if train.batch_size == 0 {
        return Err(SolaError::Param("batch_size must be >= 1".into()));
    }
    for ex in data {
        if ex.label >= model.config.n_classes {
            return Err(SolaError::Index {
                what: "class label",
                index: ex.label,
                limit: model.config.n_classes,
            });
        }
        model.check_tokens(&ex.tokens)?;
    }
    let BaseModel { config, mut weights } = model;
    let mut velocity = Weights::zeros(&config);
    let mut rng = SeededRng::derive(train.seed, 0xBA5E);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;

    if train.epochs > 0 && train.lr != 0.0 {
        for _ in 0..train.epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(train.batch_size) {
                let current = BaseModel {
                    config: config.clone(),
                    weights,
                };
                let mut acc = Weights::zeros(&config);
                for &i in batch {
                    let ex = &data[i];
                    let trace = current.forward(&ex.tokens, AdapterCtx::None)?;
                    epoch_loss += cross_entropy(&trace.logits, ex.label)?;
                    let g = current.backward_full(&trace, ex.label)?;
                    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
                        a.add_assign(b)?;
                    }
                }
                weights = current.weights;
                let inv = 1.0 / batch.len() as f64;
                for (((_, p), (_, v)), (_, g)) in weights
                    .named_mut()
                    .into_iter()
                    .zip(velocity.named_mut())
                    .zip(acc.named())
                {
                    for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                        *vv = train.momentum * *vv + gv * inv;
                        *pv -= train.lr * *vv;
                    }
                }
            }
            last_loss = epoch_loss / data.len() as f64;
            if !last_loss.is_finite() || !weights.is_finite() {
                return Err(SolaError::Numeric("base training diverged".into()));
            }
        }
    }
    let trained = BaseModel { config, weights };
    let train_accuracy = accuracy(&trained, data)?;
    Ok((
        trained,
        BaseTrainReport {
            epochs: train.epochs,
            final_loss: last_loss,
            train_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            seq_len: 5,
            d_model: 6,
            n_blocks: 3,
            ffn_hidden: 8,
            n_classes: 4,
            edited_layers: vec![LayerId(1), LayerId(2)],
            init_std: 0.3,
            seed: 0,
        }
    }

    fn tokens(rng: &mut SeededRng, cfg: &ModelConfig) -> Vec<usize> {
        (0..cfg.seq_len).map(|_| rng.below(cfg.vocab)).collect()
    }

    /// Parameter count from the configuration alone.
    fn shape_walk(cfg: &ModelConfig) -> usize {
        let d = cfg.d_model;
        let f = cfg.ffn_hidden;
        let per_block = 2 * d + 4 * d * d + 2 * d + (f * d + f) + (d * f + d);
        cfg.vocab * d + cfg.seq_len * d + cfg.n_blocks * per_block + 2 * d + cfg.n_classes * d + cfg.n_classes
    }

    #[test]
    fn layer_id_string_form() {
        assert_eq!(LayerId(2).to_string(), "blocks.2.ffn.out");
        assert_eq!(LayerId::try_from("blocks.3.ffn.out".to_string()).unwrap(), LayerId(3));
        assert!(LayerId::try_from("blocks.x.ffn.out".to_string()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.master_layer(), LayerId(2));
        c.edited_layers = vec![];
        assert!(c.validate().is_err());
        c.edited_layers = vec![LayerId(3), LayerId(2)];
        assert!(c.validate().is_err());
        c.edited_layers = vec![LayerId(4)];
        assert!(c.validate().is_err());
        let c = ModelConfig {
            d_model: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = BaseModel::build(ModelConfig::default(), &mut SeededRng::new(1)).unwrap();
        let b = BaseModel::build(ModelConfig::default(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        let c = BaseModel::build(ModelConfig::default(), &mut SeededRng::new(2)).unwrap();
        assert_ne!(a.weights().tok_emb, c.weights().tok_emb);
        assert_eq!(a.weights().blocks[0].ln1_g.data, vec![1.0; 32]);
        assert_eq!(a.weights().blocks[0].b1.data, vec![0.0; 64]);
    }

    #[test]
    fn default_param_count_matches_shape_walk() {
        let cfg = ModelConfig::default();
        let m = BaseModel::build(cfg.clone(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.param_count(), shape_walk(&cfg));
        assert_eq!(shape_walk(&cfg), 36552);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = BaseModel::build(small_config(), &mut SeededRng::new(5)).unwrap();
        let s = m.to_json().unwrap();
        let back = BaseModel::from_json(&s).unwrap();
        assert_eq!(back.to_json().unwrap(), s);
        for ((_, a), (_, b)) in m.weights().named().iter().zip(back.weights().named()) {
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = BaseModel::build(small_config(), &mut SeededRng::new(5)).unwrap();
        assert!(matches!(
            m.forward(&[0, 1, 2, 3, 7], AdapterCtx::None),
            Err(SolaError::Index { .. })
        ));
        assert!(m.forward(&[0, 1], AdapterCtx::None).is_err());
    }

    /// One block, one token, d_model = 2; logits worked out scalar by scalar.
    #[test]
    fn toy_forward_matches_hand_computation() {
        let cfg = ModelConfig {
            vocab: 2,
            seq_len: 1,
            d_model: 2,
            n_blocks: 1,
            ffn_hidden: 2,
            n_classes: 2,
            edited_layers: vec![LayerId(0)],
            init_std: 0.02,
            seed: 0,
        };
        let mut w = Weights::zeros(&cfg);
        w.tok_emb = Mat::from_rows(&[&[1.0, 3.0], &[0.0, 0.0]]);
        w.pos_emb = Mat::from_rows(&[&[0.0, 1.0]]);
        let b = &mut w.blocks[0];
        b.ln1_g = Mat::from_rows(&[&[1.0, 1.0]]);
        b.ln2_g = Mat::from_rows(&[&[2.0, 1.0]]);
        b.ln2_b = Mat::from_rows(&[&[0.5, 0.0]]);
        b.wq = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        b.wk = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        b.wv = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        b.wo = Mat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        b.w1 = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        b.b1 = Mat::from_rows(&[&[0.0, 1.0]]);
        b.w2 = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 2.0]]);
        w.lnf_g = Mat::from_rows(&[&[1.0, 1.0]]);
        w.head = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        w.head_b = Mat::from_rows(&[&[0.0, 0.25]]);
        let m = BaseModel::from_weights(cfg, w).unwrap();

        // x = emb[0] + pos[0] = (1, 4). Two-element layer norm: mean 2.5,
        // var 2.25, so xhat = (-1.5, 1.5) / sqrt(2.25 + eps).
        let s = 1.5 / (2.25f64 + 1e-5).sqrt();
        // a = (-s, s); single key, attention weight 1; v = (-s, 0); ctx = v;
        // Woᵀ swaps coordinates: attn out (0, -s).
        let h1 = (1.0, 4.0 - s);
        // LN2 on h1.
        let mean = (h1.0 + h1.1) / 2.0;
        let half = (h1.0 - h1.1) / 2.0;
        let xh = half / (half * half + 1e-5f64).sqrt(); // first coord; second is -xh
        let f = (2.0 * xh + 0.5, -xh);
        let _ = mean;
        let u = (f.0, f.1 + 1.0);
        let g = (gelu(u.0), gelu(u.1));
        let y = (g.0 + g.1, 2.0 * g.1);
        let h2 = (h1.0 + y.0, h1.1 + y.1);
        let half = (h2.0 - h2.1) / 2.0;
        let xh = half / (half * half + 1e-5f64).sqrt();
        let expected = [xh, -xh + 0.25];

        let logits = m.forward(&[0], AdapterCtx::None).unwrap().logits;
        assert!((logits[0] - expected[0]).abs() < 1e-12, "{logits:?} vs {expected:?}");
        assert!((logits[1] - expected[1]).abs() < 1e-12, "{logits:?} vs {expected:?}");
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh-approx GELU(1) = 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + (GELU_C * 1.044715f64).tanh());
        assert!((gelu(1.0) - expected).abs() < 1e-15);
        let fd = (gelu(0.7 + 1e-6) - gelu(0.7 - 1e-6)) / 2e-6;
        assert!((gelu_grad(0.7) - fd).abs() < 1e-8);
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let cfg = small_config();
        let m = BaseModel::build(cfg.clone(), &mut SeededRng::new(9)).unwrap();
        let mut rng = SeededRng::new(10);
        let toks = tokens(&mut rng, &cfg);
        let label = 2;
        let trace = m.forward(&toks, AdapterCtx::None).unwrap();
        let grads = m.backward_full(&trace, label).unwrap();
        let names: Vec<String> = m.weights().named().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let at = m.weights().named()[idx].1.clone();
            let fd = finite_diff_grad(
                |probe| {
                    let mut w = m.weights().clone();
                    *w.named_mut().into_iter().nth(idx).unwrap().1 = probe.clone();
                    let mm = BaseModel::from_weights(cfg.clone(), w).unwrap();
                    mm.loss(&toks, label, AdapterCtx::None).unwrap()
                },
                &at,
                1e-5,
            )
            .unwrap();
            let analytic = grads.named()[idx].1;
            let scale = fd.max_abs().max(1e-6);
            for (a, b) in analytic.data.iter().zip(&fd.data) {
                assert!((a - b).abs() / scale < 1e-5, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lora_backward_matches_finite_differences() {
        use crate::adapters::LoraModule;
        let cfg = small_config();
        for seed in 0..5u64 {
            let m = BaseModel::build(cfg.clone(), &mut SeededRng::new(20 + seed)).unwrap();
            let mut rng = SeededRng::new(40 + seed);
            let mut module = LoraModule::new(0, &cfg, 2, 0.5, &mut rng).unwrap();
            for layer in cfg.edited_layers.clone() {
                let f = module.factors_mut(layer).unwrap();
                f.b = crate::numerics::gaussian_init(&mut rng, f.b.rows, f.b.cols, 0.5).unwrap();
            }
            let toks = tokens(&mut rng, &cfg);
            let label = rng.below(cfg.n_classes);
            let trace = m.forward(&toks, AdapterCtx::Fixed(&module)).unwrap();
            let grads = m.backward_lora(&trace, label, &module).unwrap();
            for layer in cfg.edited_layers.clone() {
                for which in 0..2 {
                    let base = module.factors(layer).unwrap();
                    let at = if which == 0 { base.a.clone() } else { base.b.clone() };
                    let fd = finite_diff_grad(
                        |probe| {
                            let mut mm = module.clone();
                            let f = mm.factors_mut(layer).unwrap();
                            if which == 0 {
                                f.a = probe.clone();
                            } else {
                                f.b = probe.clone();
                            }
                            m.loss(&toks, label, AdapterCtx::Fixed(&mm)).unwrap()
                        },
                        &at,
                        1e-5,
                    )
                    .unwrap();
                    let g = &grads.per_layer[&layer];
                    let analytic = if which == 0 { &g.a } else { &g.b };
                    let scale = fd.max_abs().max(1e-6);
                    for (a, b) in analytic.data.iter().zip(&fd.data) {
                        assert!((a - b).abs() / scale < 1e-4, "seed {seed} {layer} {which}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn training_with_zero_epochs_or_zero_lr_is_identity() {
        let cfg = small_config();
        let m = BaseModel::build(cfg.clone(), &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(4);
        let data: Vec<Example> = (0..8)
            .map(|_| Example {
                tokens: tokens(&mut rng, &cfg),
                label: rng.below(cfg.n_classes),
            })
            .collect();
        let t0 = BaseTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (m0, _) = train_base(m.clone(), &data, &t0).unwrap();
        assert_eq!(m0, m);
        let t1 = BaseTrainConfig {
            epochs: 3,
            lr: 0.0,
            ..Default::default()
        };
        let (m1, _) = train_base(m.clone(), &data, &t1).unwrap();
        assert_eq!(m1, m);
        assert!(matches!(train_base(m, &[], &t1), Err(SolaError::Param(_))));
    }

    #[test]
    fn training_reduces_loss_on_tiny_set() {
        let cfg = small_config();
        let m = BaseModel::build(cfg.clone(), &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(4);
        let data: Vec<Example> = (0..16)
            .map(|_| Example {
                tokens: tokens(&mut rng, &cfg),
                label: rng.below(cfg.n_classes),
            })
            .collect();
        let mean_loss = |m: &BaseModel| {
            data.iter()
                .map(|e| m.loss(&e.tokens, e.label, AdapterCtx::None).unwrap())
                .sum::<f64>()
                / data.len() as f64
        };
        let before = mean_loss(&m);
        let t = BaseTrainConfig {
            epochs: 60,
            lr: 0.1,
            batch_size: 4,
            ..Default::default()
        };
        let (trained, report) = train_base(m, &data, &t).unwrap();
        assert!(mean_loss(&trained) < before);
        assert!(report.train_accuracy > 0.5);
    }
}
