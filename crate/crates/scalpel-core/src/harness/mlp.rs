//! Manual forward/backward for the linear-regression toy and the MLP
//! character language model.

use ndarray::Array2;

use super::model::{check_tokens, ForwardBackward, LayerTape, ModelCheckpoint};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;

fn one_hot(tokens: &[u32], vocab: usize) -> Mat {
    let n = tokens.len();
    let mut out = Mat::zeros((n, vocab));
    for (row, &t) in tokens.iter().enumerate() {
        out[[row, t as usize]] = 1.0;
    }
    out
}

/// Row-wise softmax cross-entropy. Returns (mean loss, probs − one-hot).
pub(super) fn softmax_xent(logits: &Mat, targets: &[u32]) -> (f64, Mat) {
    let n = logits.nrows();
    let v = logits.ncols();
    let mut dlogits = Mat::zeros((n, v));
    let mut total = 0.0f64;
    for row in 0..n {
        let mut maxv = f64::NEG_INFINITY;
        for c in 0..v {
            maxv = maxv.max(logits[[row, c]]);
        }
        let mut denom = 0.0f64;
        for c in 0..v {
            denom += (logits[[row, c]] - maxv).exp();
        }
        let log_denom = denom.ln();
        let t = targets[row] as usize;
        total += -(logits[[row, t]] - maxv - log_denom);
        for c in 0..v {
            let p = (logits[[row, c]] - maxv).exp() / denom;
            dlogits[[row, c]] = p - if c == t { 1.0 } else { 0.0 };
        }
    }
    (total / n as f64, dlogits)
}

fn flatten_tokens(tokens: &Array2<u32>) -> Vec<u32> {
    tokens.iter().copied().collect()
}

pub(super) fn linear_regression_pass(
    model: &ModelCheckpoint,
    features: &Mat,
    targets: &Mat,
) -> Result<ForwardBackward> {
    let w = &model.layers[0].weight;
    if features.ncols() != w.ncols() || targets.ncols() != w.nrows() {
        return Err(CoreError::shape(
            "regression batch incompatible with linear model",
        ));
    }
    if features.nrows() != targets.nrows() {
        return Err(CoreError::shape("features/targets sample mismatch"));
    }
    let n = features.nrows();
    let pred = features.dot(&w.t());
    let resid = &pred - targets;
    let loss = 0.5 * resid.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let grad = resid.t().dot(features) / n as f64;
    let tape = LayerTape {
        layer_name: model.layers[0].name.clone(),
        activations: features.clone(),
        out_grads: resid,
        sample_count: n,
    };
    Ok(ForwardBackward {
        loss,
        tapes: vec![tape],
        weight_grads: vec![(model.layers[0].name.clone(), grad)],
    })
}

pub(super) fn linear_regression_loss(
    model: &ModelCheckpoint,
    features: &Mat,
    targets: &Mat,
) -> Result<(f64, usize)> {
    let w = &model.layers[0].weight;
    let n = features.nrows();
    let pred = features.dot(&w.t());
    let resid = &pred - targets;
    Ok((0.5 * resid.iter().map(|x| x * x).sum::<f64>() / n as f64, n))
}

struct MlpForward {
    onehot: Mat,
    /// Hidden activations: h[0] is the embedding output, h[i] the output of
    /// hidden layer i (post-tanh).
    hidden: Vec<Mat>,
    logits: Mat,
}

fn mlp_forward(model: &ModelCheckpoint, tokens: &[u32]) -> MlpForward {
    let vocab = model.meta.vocab_size;
    let onehot = one_hot(tokens, vocab);
    let embed = &model.layers[0].weight;
    let mut hidden = Vec::with_capacity(model.layers.len() - 1);
    hidden.push(onehot.dot(&embed.t()));
    for layer in &model.layers[1..model.layers.len() - 1] {
        let z = hidden.last().unwrap().dot(&layer.weight.t());
        hidden.push(z.mapv(f64::tanh));
    }
    let out = &model.layers[model.layers.len() - 1].weight;
    let logits = hidden.last().unwrap().dot(&out.t());
    MlpForward {
        onehot,
        hidden,
        logits,
    }
}

pub(super) fn mlp_loss(
    model: &ModelCheckpoint,
    inputs: &Array2<u32>,
    targets: &Array2<u32>,
) -> Result<(f64, usize)> {
    check_tokens(model, inputs)?;
    check_tokens(model, targets)?;
    let toks = flatten_tokens(inputs);
    let tgts = flatten_tokens(targets);
    let fwd = mlp_forward(model, &toks);
    let (loss, _) = softmax_xent(&fwd.logits, &tgts);
    Ok((loss, toks.len()))
}

pub(super) fn mlp_pass(
    model: &ModelCheckpoint,
    inputs: &Array2<u32>,
    targets: &Array2<u32>,
) -> Result<ForwardBackward> {
    check_tokens(model, inputs)?;
    check_tokens(model, targets)?;
    if inputs.dim() != targets.dim() {
        return Err(CoreError::shape("inputs/targets shape mismatch"));
    }
    let toks = flatten_tokens(inputs);
    let tgts = flatten_tokens(targets);
    let n = toks.len();
    let fwd = mlp_forward(model, &toks);
    let (loss, dlogits) = softmax_xent(&fwd.logits, &tgts);

    let n_layers = model.layers.len();
    let mut tapes = vec![None; n_layers];
    let mut grads = vec![None; n_layers];
    let scale = 1.0 / n as f64;

    // Output layer.
    let out_idx = n_layers - 1;
    let h_last = &fwd.hidden[out_idx - 1];
    grads[out_idx] = Some(dlogits.t().dot(h_last) * scale);
    tapes[out_idx] = Some(LayerTape {
        layer_name: model.layers[out_idx].name.clone(),
        activations: h_last.clone(),
        out_grads: dlogits.clone(),
        sample_count: n,
    });

    // Hidden stack, in reverse.
    let mut dh = dlogits.dot(&model.layers[out_idx].weight);
    for i in (1..out_idx).rev() {
        let h = &fwd.hidden[i];
        let dz = &dh * &h.mapv(|x| 1.0 - x * x);
        let act = &fwd.hidden[i - 1];
        grads[i] = Some(dz.t().dot(act) * scale);
        tapes[i] = Some(LayerTape {
            layer_name: model.layers[i].name.clone(),
            activations: act.clone(),
            out_grads: dz.clone(),
            sample_count: n,
        });
        dh = dz.dot(&model.layers[i].weight);
    }

    // Embedding: acts are one-hot rows, grads are d(embedding output).
    grads[0] = Some(dh.t().dot(&fwd.onehot) * scale);
    tapes[0] = Some(LayerTape {
        layer_name: model.layers[0].name.clone(),
        activations: fwd.onehot,
        out_grads: dh,
        sample_count: n,
    });

    Ok(ForwardBackward {
        loss,
        tapes: tapes.into_iter().map(Option::unwrap).collect(),
        weight_grads: model
            .layers
            .iter()
            .zip(grads)
            .map(|(l, g)| (l.name.clone(), g.unwrap()))
            .collect(),
    })
}

pub(super) use softmax_xent as softmax_xent_rows;
