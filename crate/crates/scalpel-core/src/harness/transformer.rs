//! Manual forward/backward for the single-head pre-layernorm transformer
//! block, including hand-written layernorm and causal softmax-attention
//! gradients.

use ndarray::{s, Array2};

use super::mlp::softmax_xent_rows;
use super::model::{check_tokens, ForwardBackward, LayerTape, ModelCheckpoint};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;

const LN_EPS: f64 = 1e-5;

const L_EMBED: usize = 0;
const L_Q: usize = 1;
const L_K: usize = 2;
const L_V: usize = 3;
const L_O: usize = 4;
const L_UP: usize = 5;
const L_DOWN: usize = 6;
const L_UNEMBED: usize = 7;

struct LayerNormed {
    y: Mat,
    inv_std: Vec<f64>,
}

fn layernorm(x: &Mat) -> LayerNormed {
    let (rows, cols) = (x.nrows(), x.ncols());
    let mut y = Mat::zeros((rows, cols));
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let mean = x.row(r).sum() / cols as f64;
        let var = x
            .row(r)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / cols as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            y[[r, c]] = (x[[r, c]] - mean) * istd;
        }
    }
    LayerNormed { y, inv_std }
}

fn layernorm_backward(dy: &Mat, cache: &LayerNormed) -> Mat {
    let (rows, cols) = (dy.nrows(), dy.ncols());
    let mut dx = Mat::zeros((rows, cols));
    for r in 0..rows {
        let mean_dy = dy.row(r).sum() / cols as f64;
        let mean_dyy = dy
            .row(r)
            .iter()
            .zip(cache.y.row(r).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / cols as f64;
        for c in 0..cols {
            dx[[r, c]] = (dy[[r, c]] - mean_dy - cache.y[[r, c]] * mean_dyy) * cache.inv_std[r];
        }
    }
    dx
}

/// Row-wise causal softmax: row i is a distribution over columns 0..=i.
fn causal_softmax(scores: &Mat) -> Mat {
    let n = scores.nrows();
    let mut p = Mat::zeros((n, n));
    for i in 0..n {
        let mut maxv = f64::NEG_INFINITY;
        for j in 0..=i {
            maxv = maxv.max(scores[[i, j]]);
        }
        let mut denom = 0.0;
        for j in 0..=i {
            denom += (scores[[i, j]] - maxv).exp();
        }
        for j in 0..=i {
            p[[i, j]] = (scores[[i, j]] - maxv).exp() / denom;
        }
    }
    p
}

fn causal_softmax_backward(dp: &Mat, p: &Mat) -> Mat {
    let n = dp.nrows();
    let mut ds = Mat::zeros((n, n));
    for i in 0..n {
        let mut inner = 0.0;
        for k in 0..=i {
            inner += p[[i, k]] * dp[[i, k]];
        }
        for j in 0..=i {
            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - inner);
        }
    }
    ds
}

struct SeqForward {
    onehot: Mat,
    ln1: LayerNormed,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    ctx: Mat,
    ln2: LayerNormed,
    h: Mat,
    x2: Mat,
    logits: Mat,
}

fn seq_forward(model: &ModelCheckpoint, tokens: &[u32]) -> SeqForward {
    let vocab = model.meta.vocab_size;
    let d = model.layers[L_Q].weight.nrows();
    let s_len = tokens.len();

    let mut onehot = Mat::zeros((s_len, vocab));
    for (r, &t) in tokens.iter().enumerate() {
        onehot[[r, t as usize]] = 1.0;
    }
    let x0 = onehot.dot(&model.layers[L_EMBED].weight.t());

    let ln1 = layernorm(&x0);
    let q = ln1.y.dot(&model.layers[L_Q].weight.t());
    let k = ln1.y.dot(&model.layers[L_K].weight.t());
    let v = ln1.y.dot(&model.layers[L_V].weight.t());
    let scale = 1.0 / (d as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let probs = causal_softmax(&scores);
    let ctx = probs.dot(&v);
    let ao = ctx.dot(&model.layers[L_O].weight.t());
    let x1 = &x0 + &ao;

    let ln2 = layernorm(&x1);
    let hpre = ln2.y.dot(&model.layers[L_UP].weight.t());
    let h = hpre.mapv(f64::tanh);
    let f = h.dot(&model.layers[L_DOWN].weight.t());
    let x2 = &x1 + &f;

    let logits = x2.dot(&model.layers[L_UNEMBED].weight.t());
    SeqForward {
        onehot,
        ln1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        h,
        x2,
        logits,
    }
}

pub(super) fn block_loss(
    model: &ModelCheckpoint,
    inputs: &Array2<u32>,
    targets: &Array2<u32>,
) -> Result<(f64, usize)> {
    check_tokens(model, inputs)?;
    check_tokens(model, targets)?;
    let (b, s_len) = inputs.dim();
    let mut total = 0.0;
    for row in 0..b {
        let toks: Vec<u32> = inputs.slice(s![row, ..]).iter().copied().collect();
        let tgts: Vec<u32> = targets.slice(s![row, ..]).iter().copied().collect();
        let fwd = seq_forward(model, &toks);
        let (loss, _) = softmax_xent_rows(&fwd.logits, &tgts);
        total += loss * s_len as f64;
    }
    Ok((total / (b * s_len) as f64, b * s_len))
}

pub(super) fn block_pass(
    model: &ModelCheckpoint,
    inputs: &Array2<u32>,
    targets: &Array2<u32>,
) -> Result<ForwardBackward> {
    check_tokens(model, inputs)?;
    check_tokens(model, targets)?;
    if inputs.dim() != targets.dim() {
        return Err(CoreError::shape("inputs/targets shape mismatch"));
    }
    let (b, s_len) = inputs.dim();
    let n = b * s_len;
    let d = model.layers[L_Q].weight.nrows();
    let vocab = model.meta.vocab_size;
    let ff = model.layers[L_UP].weight.nrows();
    let scale = 1.0 / (d as f64).sqrt();

    // (activations, out_grads) row blocks per layer, in sequence order.
    let act_cols = [vocab, d, d, d, d, d, ff, d];
    let grad_cols = [d, d, d, d, d, ff, d, vocab];
    let mut acts: Vec<Mat> = act_cols.iter().map(|&c| Mat::zeros((n, c))).collect();
    let mut grads_rows: Vec<Mat> = grad_cols.iter().map(|&c| Mat::zeros((n, c))).collect();

    let mut total_loss = 0.0;
    for row in 0..b {
        let toks: Vec<u32> = inputs.slice(s![row, ..]).iter().copied().collect();
        let tgts: Vec<u32> = targets.slice(s![row, ..]).iter().copied().collect();
        let fwd = seq_forward(model, &toks);
        let (loss, dlogits) = softmax_xent_rows(&fwd.logits, &tgts);
        total_loss += loss * s_len as f64;

        // Unembed.
        let dx2 = dlogits.dot(&model.layers[L_UNEMBED].weight);

        // Feed-forward sublayer.
        let df = dx2.clone();
        let dh = df.dot(&model.layers[L_DOWN].weight);
        let dhpre = &dh * &fwd.h.mapv(|x| 1.0 - x * x);
        let dxn2 = dhpre.dot(&model.layers[L_UP].weight);
        let dx1 = &dx2 + &layernorm_backward(&dxn2, &fwd.ln2);

        // Attention sublayer.
        let dao = dx1.clone();
        let dctx = dao.dot(&model.layers[L_O].weight);
        let dp = dctx.dot(&fwd.v.t());
        let dv = fwd.probs.t().dot(&dctx);
        let ds = causal_softmax_backward(&dp, &fwd.probs);
        let dq = ds.dot(&fwd.k) * scale;
        let dk = ds.t().dot(&fwd.q) * scale;
        let dxn1 = dq.dot(&model.layers[L_Q].weight)
            + dk.dot(&model.layers[L_K].weight)
            + dv.dot(&model.layers[L_V].weight);
        let dx0 = &dx1 + &layernorm_backward(&dxn1, &fwd.ln1);

        let base = row * s_len;
        let mut store = |idx: usize, act: &Mat, grad: &Mat| {
            acts[idx].slice_mut(s![base..base + s_len, ..]).assign(act);
            grads_rows[idx]
                .slice_mut(s![base..base + s_len, ..])
                .assign(grad);
        };
        store(L_EMBED, &fwd.onehot, &dx0);
        store(L_Q, &fwd.ln1.y, &dq);
        store(L_K, &fwd.ln1.y, &dk);
        store(L_V, &fwd.ln1.y, &dv);
        store(L_O, &fwd.ctx, &dao);
        store(L_UP, &fwd.ln2.y, &dhpre);
        store(L_DOWN, &fwd.h, &df);
        store(L_UNEMBED, &fwd.x2, &dlogits);
    }

    let inv_n = 1.0 / n as f64;
    let mut tapes = Vec::with_capacity(model.layers.len());
    let mut weight_grads = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        let g = &grads_rows[idx];
        let a = &acts[idx];
        weight_grads.push((layer.name.clone(), g.t().dot(a) * inv_n));
        tapes.push(LayerTape {
            layer_name: layer.name.clone(),
            activations: std::mem::replace(&mut acts[idx], Mat::zeros((0, 0))),
            out_grads: std::mem::replace(&mut grads_rows[idx], Mat::zeros((0, 0))),
            sample_count: n,
        });
    }

    Ok(ForwardBackward {
        loss: total_loss / n as f64,
        tapes,
        weight_grads,
    })
}
