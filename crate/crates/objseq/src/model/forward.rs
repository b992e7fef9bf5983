//! Encoder-decoder forward pass with the activation caches backprop needs.
//!
//! Conventions: activations are `[positions, d_model]` row matrices; linear
//! layers compute `y = x W + b` with `W: [d_in, d_out]`; attention splits
//! heads over columns. Pre-norm residual blocks with a final LayerNorm on
//! each stack. The feed-forward activation is tanh-approximated GELU (smooth
//! everywhere, which keeps finite-difference gradient checks clean).

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{view, AttnRefs, FfnRefs, LnRefs, ModelError, ModelParams};
use crate::builder::TokenSeq;
use crate::decoding::StepLogits;
use crate::features::FeatureGrid;
use crate::vocab::{Token, BOS};

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) struct AttnCache {
    /// Post-norm input that fed the query projection.
    pub xq: Array2<f64>,
    /// Post-norm input that fed key/value (equal to `xq` for self-attention).
    pub xkv: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention weights `[t_q, t_k]`.
    pub attn: Vec<Array2<f64>>,
    /// Head outputs concatenated, before the output projection.
    pub concat: Array2<f64>,
}

pub(crate) struct FfnCache {
    pub x_in: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

pub(crate) struct EncLayerCache {
    pub ln1: LnCache,
    pub attn: AttnCache,
    pub ln2: LnCache,
    pub ffn: FfnCache,
}

pub(crate) struct DecLayerCache {
    pub ln1: LnCache,
    pub self_attn: AttnCache,
    pub ln2: LnCache,
    pub cross_attn: AttnCache,
    pub ln3: LnCache,
    pub ffn: FfnCache,
}

pub(crate) struct EncCache {
    pub layers: Vec<EncLayerCache>,
    pub final_ln: LnCache,
    pub memory: Array2<f64>,
    pub n_cells: usize,
    pub text_ids: Vec<u32>,
}

pub(crate) struct DecCache {
    pub input_tokens: Vec<Token>,
    pub layers: Vec<DecLayerCache>,
    pub final_ln: LnCache,
    pub h: Array2<f64>,
}

/// Everything backward needs, including the image features for the visual
/// projection gradient.
pub struct ForwardCache {
    pub(crate) enc: EncCache,
    pub(crate) dec: DecCache,
    pub(crate) image: FeatureGrid,
}

pub(crate) fn layer_norm(x: &Array2<f64>, refs: LnRefs, data: &[f64]) -> (Array2<f64>, LnCache) {
    let g = view(data, refs.g);
    let b = view(data, refs.b);
    let (t, d) = x.dim();
    let mut x_hat = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            x_hat[[i, j]] = xh;
            out[[i, j]] = g[[0, j]] * xh + b[[0, j]];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

fn add_bias(mut x: Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    x += &b.row(0);
    x
}

fn softmax_rows_masked(scores: &mut Array2<f64>, causal: bool) {
    let (t, _) = scores.dim();
    if causal {
        for i in 0..t {
            for j in i + 1..scores.ncols() {
                scores[[i, j]] = f64::NEG_INFINITY;
            }
        }
    }
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.mapv_inplace(|v| v / z);
    }
}

pub(crate) fn attention(
    data: &[f64],
    refs: &AttnRefs,
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    n_heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let d = xq.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = add_bias(xq.dot(&view(data, refs.wq)), view(data, refs.bq));
    let k = add_bias(xkv.dot(&view(data, refs.wk)), view(data, refs.bk));
    let v = add_bias(xkv.dot(&view(data, refs.wv)), view(data, refs.bv));
    let (tq, tk) = (q.nrows(), k.nrows());
    let mut concat = Array2::zeros((tq, d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        debug_assert_eq!(scores.dim(), (tq, tk));
        softmax_rows_masked(&mut scores, causal);
        let ctx = scores.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&ctx);
        attn.push(scores);
    }
    let out = add_bias(concat.dot(&view(data, refs.wo)), view(data, refs.bo));
    (out, AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, attn, concat })
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

pub(crate) fn ffn(data: &[f64], refs: &FfnRefs, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = add_bias(x.dot(&view(data, refs.w1)), view(data, refs.b1));
    let act = pre.mapv(gelu);
    let out = add_bias(act.dot(&view(data, refs.w2)), view(data, refs.b2));
    (out, FfnCache { x_in: x.clone(), pre, act })
}

fn embed_encoder_input(
    params: &ModelParams,
    image: &FeatureGrid,
    input_text: &[u32],
) -> Result<Array2<f64>, ModelError> {
    let cfg = &params.cfg;
    if image.dim() != cfg.feat_dim {
        return Err(ModelError::Shape(format!(
            "feature dim {} does not match model feat_dim {}",
            image.dim(),
            cfg.feat_dim
        )));
    }
    let n_cells = image.n_cells();
    let t = n_cells + input_text.len();
    if t > cfg.max_enc_len {
        return Err(ModelError::TooLong { len: t, max: cfg.max_enc_len });
    }
    let d = cfg.d_model;
    let data = &params.data;
    let vis_w = view(data, params.layout.vis_w);
    let vis_b = view(data, params.layout.vis_b);
    let tok = view(data, params.layout.tok_emb);
    let pos = view(data, params.layout.enc_pos);
    let mut x = Array2::zeros((t, d));
    for (p, cell) in image.rows().enumerate() {
        for j in 0..d {
            let mut acc = vis_b[[0, j]];
            for (f, &cv) in cell.iter().enumerate() {
                acc += cv * vis_w[[f, j]];
            }
            x[[p, j]] = acc + pos[[p, j]];
        }
    }
    for (i, &id) in input_text.iter().enumerate() {
        if id >= cfg.n_text {
            return Err(ModelError::IdOutOfRange(id));
        }
        let p = n_cells + i;
        for j in 0..d {
            x[[p, j]] = tok[[id as usize, j]] + pos[[p, j]];
        }
    }
    Ok(x)
}

pub(crate) fn encode(
    params: &ModelParams,
    image: &FeatureGrid,
    input_text: &[u32],
) -> Result<EncCache, ModelError> {
    let data = &params.data;
    let mut x = embed_encoder_input(params, image, input_text)?;
    let mut layers = Vec::with_capacity(params.layout.enc.len());
    for layer in &params.layout.enc {
        let x0 = x;
        let (normed, ln1) = layer_norm(&x0, layer.ln1, data);
        let (attn_out, attn) = attention(data, &layer.attn, &normed, &normed, params.cfg.n_heads, false);
        let x1 = &x0 + &attn_out;
        let (normed2, ln2) = layer_norm(&x1, layer.ln2, data);
        let (ffn_out, ffn_cache) = ffn(data, &layer.ffn, &normed2);
        x = &x1 + &ffn_out;
        layers.push(EncLayerCache { ln1, attn, ln2, ffn: ffn_cache });
    }
    let (memory, final_ln) = layer_norm(&x, params.layout.enc_ln, data);
    Ok(EncCache {
        layers,
        final_ln,
        memory,
        n_cells: image.n_cells(),
        text_ids: input_text.to_vec(),
    })
}

fn embed_decoder_input(params: &ModelParams, tokens: &[Token]) -> Result<Array2<f64>, ModelError> {
    let cfg = &params.cfg;
    if tokens.len() > cfg.max_dec_len {
        return Err(ModelError::TooLong { len: tokens.len(), max: cfg.max_dec_len });
    }
    let d = cfg.d_model;
    let vocab = cfg.vocab();
    let data = &params.data;
    let tok = view(data, params.layout.tok_emb);
    let pos = view(data, params.layout.dec_pos);
    let mut x = Array2::zeros((tokens.len(), d));
    for (p, &t) in tokens.iter().enumerate() {
        let id = vocab.token_to_id(t) as usize;
        for j in 0..d {
            x[[p, j]] = tok[[id, j]] + pos[[p, j]];
        }
        if let Some(te) = params.layout.type_emb {
            let ty = cfg.type_embedding.type_of(t);
            let te = view(data, te);
            for j in 0..d {
                x[[p, j]] += te[[ty, j]];
            }
        }
    }
    Ok(x)
}

pub(crate) fn decode_stack(
    params: &ModelParams,
    memory: &Array2<f64>,
    input_tokens: &[Token],
) -> Result<DecCache, ModelError> {
    let data = &params.data;
    let mut x = embed_decoder_input(params, input_tokens)?;
    let mut layers = Vec::with_capacity(params.layout.dec.len());
    for layer in &params.layout.dec {
        let x0 = x;
        let (normed, ln1) = layer_norm(&x0, layer.ln1, data);
        let (self_out, self_attn) = attention(data, &layer.self_attn, &normed, &normed, params.cfg.n_heads, true);
        let x1 = &x0 + &self_out;
        let (normed2, ln2) = layer_norm(&x1, layer.ln2, data);
        let (cross_out, cross_attn) =
            attention(data, &layer.cross_attn, &normed2, memory, params.cfg.n_heads, false);
        let x2 = &x1 + &cross_out;
        let (normed3, ln3) = layer_norm(&x2, layer.ln3, data);
        let (ffn_out, ffn_cache) = ffn(data, &layer.ffn, &normed3);
        x = &x2 + &ffn_out;
        layers.push(DecLayerCache { ln1, self_attn, ln2, cross_attn, ln3, ffn: ffn_cache });
    }
    let (h, final_ln) = layer_norm(&x, params.layout.dec_ln, data);
    Ok(DecCache { input_tokens: input_tokens.to_vec(), layers, final_ln, h })
}

fn logits_from_hidden(params: &ModelParams, h: &Array2<f64>) -> Array2<f64> {
    add_bias(h.dot(&view(&params.data, params.layout.out_w)), view(&params.data, params.layout.out_b))
}

/// Teacher-forced decoder input for a target: BOS followed by all but the
/// last target token.
pub(crate) fn shift_right(target: &[Token]) -> Vec<Token> {
    let mut input = Vec::with_capacity(target.len());
    input.push(Token::Text(BOS));
    input.extend_from_slice(&target[..target.len() - 1]);
    input
}

/// Full teacher-forced pass: one logit row per target step.
pub fn forward_full(
    params: &ModelParams,
    image: &FeatureGrid,
    input_text: &[u32],
    target: &[Token],
) -> Result<(Array2<f64>, ForwardCache), ModelError> {
    if target.is_empty() {
        return Err(ModelError::Shape("target must contain at least the EOS step".into()));
    }
    let enc = encode(params, image, input_text)?;
    let dec = decode_stack(params, &enc.memory, &shift_right(target))?;
    let logits = logits_from_hidden(params, &dec.h);
    Ok((logits, ForwardCache { enc, dec, image: image.clone() }))
}

/// Like [`forward_full`] but returning only the logits.
pub fn forward(
    params: &ModelParams,
    image: &FeatureGrid,
    input_text: &[u32],
    target: &[Token],
) -> Result<Array2<f64>, ModelError> {
    forward_full(params, image, input_text, target).map(|(logits, _)| logits)
}

/// Mean over unmasked steps of the negative log-likelihood of each target
/// token under the softmax of its logit row.
pub fn lm_loss(logits: &Array2<f64>, targets: &[u32], mask: &[bool]) -> Result<f64, ModelError> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(ModelError::Shape(format!(
            "logits rows {} vs targets {} vs mask {}",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(ModelError::AllMasked);
    }
    let v = logits.ncols();
    let mut total = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t as usize >= v {
            return Err(ModelError::IdOutOfRange(t));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    Ok(total / active as f64)
}

/// A model conditioned on one (image, input text) pair: the encoder runs
/// once, then each step re-runs the decoder on the emitted prefix.
pub struct ConditionedModel<'a> {
    params: &'a ModelParams,
    memory: Array2<f64>,
}

impl ModelParams {
    pub fn condition(&self, image: &FeatureGrid, input_text: &[u32]) -> Result<ConditionedModel<'_>, ModelError> {
        let enc = encode(self, image, input_text)?;
        Ok(ConditionedModel { params: self, memory: enc.memory })
    }

    /// Autoregressive generation under the given sampler.
    ///
    /// `max_steps` is silently capped at the decoder's positional table, the
    /// hard limit on how long a prefix the model can condition on.
    pub fn generate<R: rand::Rng>(
        &self,
        image: &FeatureGrid,
        input_text: &[u32],
        cfg: &crate::decoding::SamplerConfig,
        rng: &mut R,
    ) -> Result<TokenSeq, ModelError> {
        let mut session = self
            .condition(image, input_text)
            .map_err(|e| ModelError::Shape(format!("conditioning failed: {e}")))?;
        let mut cfg = *cfg;
        cfg.max_steps = cfg.max_steps.min(self.cfg.max_dec_len - 1);
        crate::decoding::decode(&mut session, &self.vocab(), &cfg, rng)
            .map_err(|e| ModelError::Shape(format!("decode failed: {e}")))
    }
}

impl StepLogits for ConditionedModel<'_> {
    fn next_logits(&mut self, prefix: &[Token]) -> Vec<f64> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(Token::Text(BOS));
        input.extend_from_slice(prefix);
        let dec = decode_stack(self.params, &self.memory, &input).expect("prefix within decoder cap");
        let h_last = dec.h.row(dec.h.nrows() - 1).insert_axis(Axis(0)).to_owned();
        logits_from_hidden(self.params, &h_last).row(0).to_vec()
    }
}
