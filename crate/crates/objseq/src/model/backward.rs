//! Reverse-mode gradients for the forward pass, accumulated into a flat
//! buffer mirroring the parameter layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};

use super::forward::{gelu_grad, AttnCache, FfnCache, ForwardCache, LnCache};
use super::{view, view_mut, AttnRefs, FfnRefs, LnRefs, ModelError, ModelParams, TRef};
use crate::builder::TaskSample;

/// dC += A^T B
fn acc_atb(grads: &mut [f64], t: TRef, a: &Array2<f64>, b: &Array2<f64>) {
    let mut c = view_mut(grads, t);
    general_mat_mul(1.0, &a.t(), &b.view(), 1.0, &mut c);
}

/// db += column sums of `d`
fn acc_colsum(grads: &mut [f64], t: TRef, d: &Array2<f64>) {
    let mut b = view_mut(grads, t);
    for row in d.axis_iter(Axis(0)) {
        for (j, &v) in row.iter().enumerate() {
            b[[0, j]] += v;
        }
    }
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    refs: LnRefs,
    data: &[f64],
    grads: &mut [f64],
) -> Array2<f64> {
    let g = view(data, refs.g);
    let (t, d) = dy.dim();
    {
        let mut dg = view_mut(grads, refs.g);
        for i in 0..t {
            for j in 0..d {
                dg[[0, j]] += dy[[i, j]] * cache.x_hat[[i, j]];
            }
        }
    }
    {
        let mut db = view_mut(grads, refs.b);
        for i in 0..t {
            for j in 0..d {
                db[[0, j]] += dy[[i, j]];
            }
        }
    }
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[[0, j]];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.x_hat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            let dxh = dy[[i, j]] * g[[0, j]];
            dx[[i, j]] = is * (dxh - mean_dxhat - cache.x_hat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Returns (d_xq, d_xkv). For self-attention the caller sums them.
fn attention_backward(
    d_out: &Array2<f64>,
    cache: &AttnCache,
    refs: &AttnRefs,
    n_heads: usize,
    data: &[f64],
    grads: &mut [f64],
) -> (Array2<f64>, Array2<f64>) {
    let d = d_out.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (tq, tk) = (cache.q.nrows(), cache.k.nrows());

    let d_concat = d_out.dot(&view(data, refs.wo).t());
    acc_atb(grads, refs.wo, &cache.concat, d_out);
    acc_colsum(grads, refs.bo, d_out);

    let mut d_q = Array2::zeros((tq, d));
    let mut d_k = Array2::zeros((tk, d));
    let mut d_v = Array2::zeros((tk, d));
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let d_ctx = d_concat.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
        let attn = &cache.attn[h];

        let d_attn = d_ctx.dot(&vh.t());
        d_v.slice_mut(ndarray::s![.., cols.clone()]).assign(&attn.t().dot(&d_ctx));

        // Softmax backward per row; masked cells carry zero weight and so
        // zero gradient.
        let mut ds = Array2::zeros((tq, tk));
        for i in 0..tq {
            let mut dot = 0.0;
            for j in 0..tk {
                dot += d_attn[[i, j]] * attn[[i, j]];
            }
            for j in 0..tk {
                ds[[i, j]] = attn[[i, j]] * (d_attn[[i, j]] - dot);
            }
        }
        let mut dqh = ds.dot(&kh);
        dqh *= scale;
        d_q.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
        let mut dkh = ds.t().dot(&qh);
        dkh *= scale;
        d_k.slice_mut(ndarray::s![.., cols]).assign(&dkh);
    }

    acc_atb(grads, refs.wq, &cache.xq, &d_q);
    acc_colsum(grads, refs.bq, &d_q);
    acc_atb(grads, refs.wk, &cache.xkv, &d_k);
    acc_colsum(grads, refs.bk, &d_k);
    acc_atb(grads, refs.wv, &cache.xkv, &d_v);
    acc_colsum(grads, refs.bv, &d_v);

    let d_xq = d_q.dot(&view(data, refs.wq).t());
    let mut d_xkv = d_k.dot(&view(data, refs.wk).t());
    d_xkv += &d_v.dot(&view(data, refs.wv).t());
    (d_xq, d_xkv)
}

fn ffn_backward(
    d_out: &Array2<f64>,
    cache: &FfnCache,
    refs: &FfnRefs,
    data: &[f64],
    grads: &mut [f64],
) -> Array2<f64> {
    acc_atb(grads, refs.w2, &cache.act, d_out);
    acc_colsum(grads, refs.b2, d_out);
    let mut d_pre = d_out.dot(&view(data, refs.w2).t());
    for (dp, &p) in d_pre.iter_mut().zip(cache.pre.iter()) {
        *dp *= gelu_grad(p);
    }
    acc_atb(grads, refs.w1, &cache.x_in, &d_pre);
    acc_colsum(grads, refs.b1, &d_pre);
    d_pre.dot(&view(data, refs.w1).t())
}

/// Backward through the whole model. Returns the loss and the gradient
/// buffer; `d_logits` is derived from softmax cross-entropy over the
/// unmasked steps.
pub fn backward(
    params: &ModelParams,
    logits: &Array2<f64>,
    cache: &ForwardCache,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Vec<f64>), ModelError> {
    let loss = super::forward::lm_loss(logits, targets, mask)?;
    let data = &params.data;
    let layout = &params.layout;
    let mut grads = vec![0.0; layout.total];

    let active = mask.iter().filter(|&&m| m).count() as f64;
    let (t_dec, v) = logits.dim();
    let mut d_logits = Array2::zeros((t_dec, v));
    for i in 0..t_dec {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        for j in 0..v {
            d_logits[[i, j]] = ((row[j] - max).exp() / z) / active;
        }
        d_logits[[i, targets[i] as usize]] -= 1.0 / active;
    }

    // Output projection.
    acc_atb(&mut grads, layout.out_w, &cache.dec.h, &d_logits);
    acc_colsum(&mut grads, layout.out_b, &d_logits);
    let dh = d_logits.dot(&view(data, layout.out_w).t());

    // Decoder stack.
    let mut dx = ln_backward(&dh, &cache.dec.final_ln, layout.dec_ln, data, &mut grads);
    let n_cells = cache.enc.n_cells;
    let enc_t = cache.enc.memory.nrows();
    let mut d_memory = Array2::zeros((enc_t, params.cfg.d_model));
    for (layer, lcache) in layout.dec.iter().zip(&cache.dec.layers).rev() {
        let d_ffn_out = &dx;
        let d_norm3 = ffn_backward(d_ffn_out, &lcache.ffn, &layer.ffn, data, &mut grads);
        let dx2 = &dx + &ln_backward(&d_norm3, &lcache.ln3, layer.ln3, data, &mut grads);

        let (d_norm2, d_mem) =
            attention_backward(&dx2, &lcache.cross_attn, &layer.cross_attn, params.cfg.n_heads, data, &mut grads);
        d_memory += &d_mem;
        let dx1 = &dx2 + &ln_backward(&d_norm2, &lcache.ln2, layer.ln2, data, &mut grads);

        let (d_q_in, d_kv_in) =
            attention_backward(&dx1, &lcache.self_attn, &layer.self_attn, params.cfg.n_heads, data, &mut grads);
        let d_norm1 = d_q_in + d_kv_in;
        dx = &dx1 + &ln_backward(&d_norm1, &lcache.ln1, layer.ln1, data, &mut grads);
    }

    // Decoder input embeddings.
    {
        let vocab = params.cfg.vocab();
        let d = params.cfg.d_model;
        for (p, &tok) in cache.dec.input_tokens.iter().enumerate() {
            let id = vocab.token_to_id(tok) as usize;
            let tok_row = layout.tok_emb.offset + id * d;
            let pos_row = layout.dec_pos.offset + p * d;
            for j in 0..d {
                grads[tok_row + j] += dx[[p, j]];
                grads[pos_row + j] += dx[[p, j]];
            }
            if let Some(te) = layout.type_emb {
                let ty = params.cfg.type_embedding.type_of(tok);
                let ty_row = te.offset + ty * d;
                for j in 0..d {
                    grads[ty_row + j] += dx[[p, j]];
                }
            }
        }
    }

    // Encoder stack.
    let mut dx = ln_backward(&d_memory, &cache.enc.final_ln, layout.enc_ln, data, &mut grads);
    for (layer, lcache) in layout.enc.iter().zip(&cache.enc.layers).rev() {
        let d_norm2 = ffn_backward(&dx, &lcache.ffn, &layer.ffn, data, &mut grads);
        let dx1 = &dx + &ln_backward(&d_norm2, &lcache.ln2, layer.ln2, data, &mut grads);
        let (d_q_in, d_kv_in) =
            attention_backward(&dx1, &lcache.attn, &layer.attn, params.cfg.n_heads, data, &mut grads);
        let d_norm1 = d_q_in + d_kv_in;
        dx = &dx1 + &ln_backward(&d_norm1, &lcache.ln1, layer.ln1, data, &mut grads);
    }

    // Encoder input embeddings: visual projection rows then text rows.
    {
        let d = params.cfg.d_model;
        for (p, cell) in cache.image.rows().enumerate() {
            let vis_w = layout.vis_w.offset;
            let vis_b = layout.vis_b.offset;
            for j in 0..d {
                let g = dx[[p, j]];
                grads[vis_b + j] += g;
                for (f, &cv) in cell.iter().enumerate() {
                    grads[vis_w + f * d + j] += cv * g;
                }
            }
            let pos_row = layout.enc_pos.offset + p * d;
            for j in 0..d {
                grads[pos_row + j] += dx[[p, j]];
            }
        }
        for (i, &id) in cache.enc.text_ids.iter().enumerate() {
            let p = n_cells + i;
            let tok_row = layout.tok_emb.offset + id as usize * d;
            let pos_row = layout.enc_pos.offset + p * d;
            for j in 0..d {
                grads[tok_row + j] += dx[[p, j]];
                grads[pos_row + j] += dx[[p, j]];
            }
        }
    }

    Ok((loss, grads))
}

/// Forward + backward for one training sample; the loss mask covers every
/// target step.
pub fn loss_and_grad(params: &ModelParams, sample: &TaskSample) -> Result<(f64, Vec<f64>), ModelError> {
    let vocab = params.cfg.vocab();
    let target_ids = sample.target.to_ids(&vocab);
    let (logits, cache) = super::forward::forward_full(params, &sample.image, &sample.input_text, &sample.target)?;
    let mask = vec![true; target_ids.len()];
    backward(params, &logits, &cache, &target_ids, &mask)
}
