//! Forward pass: embeddings, post-LN encoder layers, pooler, task head.
//!
//! Per encoder layer, with `x` the layer input:
//!
//! ```text
//! Q, K, V = x·Wqᵀ + bq, x·Wkᵀ + bk, x·Wvᵀ + bv
//! H1 = MultiHead(Q, K, V)              scores scaled by 1/sqrt(d/heads)
//! H2 = Dropout(H1)
//! H3 = LayerNorm(H2·W3ᵀ + b3 + x)
//! H4 = Dropout(H3)
//! H5 = GELU(H4·W5ᵀ + b5)
//! H6 = LayerNorm(H5·W6ᵀ + b6 + H4)
//! H7 = Dropout(H6)
//! ```
//!
//! Any dense weight with an attached LoRA pair adds `(α/r)·(x·Aᵀ)·Bᵀ` to its output.

use indexmap::IndexMap;
use rand::Rng;

use super::{layer_path, ModelError, ParamStore, LAYER_NORM_EPS};
use crate::tensor::{Graph, Mode, NodeId, Tensor};

const MASK_BIAS: f64 = -1e9;

/// A padded minibatch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(
        token_ids: Vec<usize>,
        type_ids: Vec<usize>,
        mask: Option<Vec<bool>>,
        batch: usize,
        seq: usize,
    ) -> Result<Self, ModelError> {
        let n = batch * seq;
        let mask = mask.unwrap_or_else(|| vec![true; n]);
        if token_ids.len() != n || type_ids.len() != n || mask.len() != n {
            return Err(ModelError::Input(format!(
                "batch {batch}×{seq} expects {n} ids, got tokens={} types={} mask={}",
                token_ids.len(),
                type_ids.len(),
                mask.len()
            )));
        }
        Ok(Batch {
            token_ids,
            type_ids,
            mask,
            batch,
            seq,
        })
    }

    fn key_bias(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_BIAS })
            .collect()
    }
}

/// Maps store tensors into a graph as leaves, once per name.
#[derive(Debug, Default)]
pub struct ParamBinder {
    track_grads: bool,
    leaves: IndexMap<String, NodeId>,
}

impl ParamBinder {
    /// `track_grads` makes trainable tensors gradient-carrying leaves.
    pub fn new(track_grads: bool) -> Self {
        ParamBinder {
            track_grads,
            leaves: IndexMap::new(),
        }
    }

    pub fn get(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        name: &str,
    ) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t = store
            .tensor(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        let id = g.leaf(t.clone(), self.track_grads && store.is_trainable(name));
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Copy graph gradients into the grad slots of every bound trainable tensor.
    pub fn write_grads(&self, g: &Graph, store: &mut ParamStore) {
        for (name, &id) in &self.leaves {
            if !g.requires_grad(id) {
                continue;
            }
            if let (Some(grad), Some(t)) = (g.grad(id), store.tensor_mut(name)) {
                t.grad = Some(grad.to_vec());
            }
        }
    }
}

/// `x·Wᵀ + b` for `<module>.weight`/`<module>.bias`, plus the LoRA branch if attached.
fn dense(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    x: NodeId,
    module: &str,
) -> Result<NodeId, ModelError> {
    let weight = format!("{module}.weight");
    let w = binder.get(g, store, &weight)?;
    let b = binder.get(g, store, &format!("{module}.bias"))?;
    let y = g.linear(x, w, Some(b))?;
    let Some(pair) = store.lora_pair(&weight) else {
        return Ok(y);
    };
    let a = binder.get(g, store, &pair.a_name())?;
    let bb = binder.get(g, store, &pair.b_name())?;
    let down = g.linear(x, a, None)?;
    let up = g.linear(down, bb, None)?;
    let scaled = g.scale(up, pair.scale());
    Ok(g.add(y, scaled)?)
}

fn layer_norm(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    x: NodeId,
    module: &str,
) -> Result<NodeId, ModelError> {
    let gamma = binder.get(g, store, &format!("{module}.weight"))?;
    let beta = binder.get(g, store, &format!("{module}.bias"))?;
    Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
}

/// One encoder layer (1-based `layer`) on `x[batch×seq×d]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    layer: usize,
    x: NodeId,
    key_bias: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    let cfg = store.config();
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.hidden {
        return Err(ModelError::Input(format!(
            "encoder layer expects [batch, seq, {}], got {shape:?}",
            cfg.hidden
        )));
    }
    let p = cfg.dropout_p;
    let path = |rest: &str| layer_path(layer, rest);

    let q = dense(g, binder, store, x, &path("attention.self.query"))?;
    let k = dense(g, binder, store, x, &path("attention.self.key"))?;
    let v = dense(g, binder, store, x, &path("attention.self.value"))?;
    let q = g.split_heads(q, cfg.num_heads)?;
    let k = g.split_heads(k, cfg.num_heads)?;
    let v = g.split_heads(v, cfg.num_heads)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (cfg.head_dim() as f64).sqrt());
    let scores = g.add_key_mask(scores, key_bias)?;
    let probs = g.softmax(scores)?;
    let ctx = g.batch_matmul(probs, v, false)?;
    let h1 = g.merge_heads(ctx)?;
    let h2 = g.dropout(h1, p, mode, rng)?;

    let proj = dense(g, binder, store, h2, &path("attention.output.dense"))?;
    let res = g.add(proj, x)?;
    let h3 = layer_norm(g, binder, store, res, &path("attention.output.LayerNorm"))?;
    let h4 = g.dropout(h3, p, mode, rng)?;

    let inter = dense(g, binder, store, h4, &path("intermediate.dense"))?;
    let h5 = g.gelu(inter);
    let out = dense(g, binder, store, h5, &path("output.dense"))?;
    let res = g.add(out, h4)?;
    let h6 = layer_norm(g, binder, store, res, &path("output.LayerNorm"))?;
    Ok(g.dropout(h6, p, mode, rng)?)
}

/// Full model: embeddings → encoder stack → tanh pooler on the first token → head.
/// Returns logits `[batch × num_labels]` (a single score column for regression).
pub fn model_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    binder: &mut ParamBinder,
    store: &ParamStore,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId, ModelError> {
    let cfg = store.config();
    if batch.seq == 0 || batch.batch == 0 {
        return Err(ModelError::Input("empty batch".into()));
    }
    if batch.seq > cfg.max_positions {
        return Err(ModelError::Input(format!(
            "sequence length {} exceeds max_positions {}",
            batch.seq, cfg.max_positions
        )));
    }
    if let Some(&t) = batch.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Input(format!(
            "token id {t} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    if let Some(&t) = batch.type_ids.iter().find(|&&t| t >= cfg.type_vocab) {
        return Err(ModelError::Input(format!(
            "token type id {t} out of range for type_vocab {}",
            cfg.type_vocab
        )));
    }
    let dims = [batch.batch, batch.seq];
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();

    let word = binder.get(g, store, "embeddings.word_embeddings.weight")?;
    let pos = binder.get(g, store, "embeddings.position_embeddings.weight")?;
    let typ = binder.get(g, store, "embeddings.token_type_embeddings.weight")?;
    let e_word = g.embedding(word, &batch.token_ids, &dims)?;
    let e_pos = g.embedding(pos, &positions, &dims)?;
    let e_typ = g.embedding(typ, &batch.type_ids, &dims)?;
    let e = g.add(e_word, e_pos)?;
    let e = g.add(e, e_typ)?;
    let e = layer_norm(g, binder, store, e, "embeddings.LayerNorm")?;
    let mut h = g.dropout(e, cfg.dropout_p, mode, rng)?;

    let key_bias = batch.key_bias();
    for layer in 1..=cfg.num_layers {
        h = encoder_layer_forward(g, binder, store, layer, h, &key_bias, mode, rng)?;
    }

    let first = g.select_first(h)?;
    let pooled = dense(g, binder, store, first, "pooler.dense")?;
    let pooled = g.tanh(pooled);
    dense(g, binder, store, pooled, "classifier")
}

/// Eval-mode logits without gradient tracking.
pub fn predict(store: &ParamStore, batch: &Batch) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut binder = ParamBinder::new(false);
    // Eval mode never draws from the generator.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = model_forward(&mut g, &mut binder, store, batch, Mode::Eval, &mut rng)?;
    Ok(g.value(out).clone())
}
