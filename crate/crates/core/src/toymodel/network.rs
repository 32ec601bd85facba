use crate::error::{Error, Result};

use super::params::*;
use super::vocab::{EXAMPLE_SEP, FIRST_LABEL};

/// Which positions belong to which demonstration segment, and where the
/// query segment starts.
#[derive(Debug, Clone)]
struct Layout {
    seg_of: Vec<usize>,
    seg_labels: Vec<Vec<u32>>,
    q_start: usize,
}

fn layout(ids: &[u32], n_labels: usize) -> Layout {
    let label_end = FIRST_LABEL + n_labels as u32;
    let mut seg_of = Vec::with_capacity(ids.len());
    let mut seg_labels = vec![Vec::new()];
    let mut q_start = 0;
    for (j, &id) in ids.iter().enumerate() {
        let s = seg_labels.len() - 1;
        seg_of.push(s);
        if id == EXAMPLE_SEP {
            seg_labels.push(Vec::new());
            q_start = j + 1;
        } else if (FIRST_LABEL..label_end).contains(&id) {
            seg_labels[s].push(id);
        }
    }
    if q_start >= ids.len() {
        q_start = 0;
    }
    Layout {
        seg_of,
        seg_labels,
        q_start,
    }
}

/// Multiplier on the match gain inside the attention score.
#[inline]
pub fn match_scale(d: usize) -> f64 {
    d as f64
}

/// Exact-match indicator between two positions: same content token.
#[inline]
fn matches(a: u32, b: u32, content_start: u32) -> bool {
    a == b && a >= content_start
}

#[derive(Debug, Clone)]
struct Cache {
    layout: Layout,
    /// L x d encoder inputs.
    x: Vec<f64>,
    /// Per query row: `q_i = x_i W_q` and `W_k q_i`.
    q: Vec<f64>,
    qk: Vec<f64>,
    /// Lq x L attention weights.
    attn: Vec<f64>,
    xbar: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    pooled: Vec<f64>,
}

fn check(params: &ModelParams, ids: &[u32]) -> Result<()> {
    let dims = params.dims;
    if ids.is_empty() {
        return Err(Error::ShapeError("empty token sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= dims.vocab_size) {
        return Err(Error::ShapeError(format!(
            "token id {bad} outside vocabulary of {}",
            dims.vocab_size
        )));
    }
    for (i, shape) in dims.shapes().iter().enumerate() {
        if params.tensors[i].len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeError(format!("tensor {} has wrong size", TENSOR_NAMES[i])));
        }
    }
    Ok(())
}

fn encode(params: &ModelParams, ids: &[u32]) -> Cache {
    let Dims {
        d_model: d,
        d_ff: ff,
        n_labels,
        ..
    } = params.dims;
    let emb = params.t(EMBEDDING);
    let lay = layout(ids, n_labels);
    let l = ids.len();
    let lq = l - lay.q_start;
    let content_start = FIRST_LABEL + n_labels as u32;
    let sqrt_d = (d as f64).sqrt();
    let gain = params.t(MATCH_GAIN)[0];

    let mut lm = vec![0.0; lay.seg_labels.len() * d];
    for (s, labels) in lay.seg_labels.iter().enumerate() {
        if labels.is_empty() {
            continue;
        }
        let inv = 1.0 / labels.len() as f64;
        for &lab in labels {
            let row = &emb[lab as usize * d..][..d];
            for c in 0..d {
                lm[s * d + c] += row[c] * inv;
            }
        }
    }
    let mut x = vec![0.0; l * d];
    for (j, &id) in ids.iter().enumerate() {
        let row = &emb[id as usize * d..][..d];
        let s = lay.seg_of[j];
        for c in 0..d {
            x[j * d + c] = row[c] + lm[s * d + c];
        }
    }

    let wq = params.t(W_Q);
    let wk = params.t(W_K);
    let wv = params.t(W_V);
    let mut q = vec![0.0; lq * d];
    let mut qk = vec![0.0; lq * d];
    let mut attn = vec![0.0; lq * l];
    let mut xbar = vec![0.0; lq * d];
    let mut h = vec![0.0; lq * d];
    for qi in 0..lq {
        let i = lay.q_start + qi;
        let xi = &x[i * d..][..d];
        let qrow = &mut q[qi * d..][..d];
        for (r, &xr) in xi.iter().enumerate() {
            let wrow = &wq[r * d..][..d];
            for c in 0..d {
                qrow[c] += xr * wrow[c];
            }
        }
        let qkrow = &mut qk[qi * d..][..d];
        for r in 0..d {
            let wrow = &wk[r * d..][..d];
            qkrow[r] = (0..d).map(|c| wrow[c] * qrow[c]).sum();
        }
        let arow = &mut attn[qi * l..][..l];
        for j in 0..l {
            let xj = &x[j * d..][..d];
            let dot: f64 = (0..d).map(|c| xj[c] * qkrow[c]).sum();
            let bias = if matches(ids[i], ids[j], content_start) {
                gain * match_scale(d)
            } else {
                0.0
            };
            arow[j] = dot / sqrt_d + bias;
        }
        softmax_in_place(arow);
        let xb = &mut xbar[qi * d..][..d];
        for j in 0..l {
            let a = arow[j];
            let xj = &x[j * d..][..d];
            for c in 0..d {
                xb[c] += a * xj[c];
            }
        }
        let hrow = &mut h[qi * d..][..d];
        hrow.copy_from_slice(xi);
        for r in 0..d {
            let wrow = &wv[r * d..][..d];
            let xr = xb[r];
            for c in 0..d {
                hrow[c] += xr * wrow[c];
            }
        }
    }

    let w1 = params.t(FF_W1);
    let b1 = params.t(FF_B1);
    let w2 = params.t(FF_W2);
    let b2 = params.t(FF_B2);
    let mut g = vec![0.0; lq * ff];
    let mut pooled = vec![0.0; d];
    let inv_lq = 1.0 / lq as f64;
    for qi in 0..lq {
        let hrow = &h[qi * d..][..d];
        let grow = &mut g[qi * ff..][..ff];
        grow.copy_from_slice(b1);
        for (r, &hr) in hrow.iter().enumerate() {
            let wrow = &w1[r * ff..][..ff];
            for k in 0..ff {
                grow[k] += hr * wrow[k];
            }
        }
        grow.iter_mut().for_each(|u| *u = u.tanh());
        let mut frow: Vec<f64> = (0..d).map(|c| hrow[c] + b2[c]).collect();
        for (k, &gk) in grow.iter().enumerate() {
            let wrow = &w2[k * d..][..d];
            for c in 0..d {
                frow[c] += gk * wrow[c];
            }
        }
        for c in 0..d {
            pooled[c] += frow[c] * inv_lq;
        }
    }

    Cache {
        layout: lay,
        x,
        q,
        qk,
        attn,
        xbar,
        h,
        g,
        pooled,
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn head_logits(params: &ModelParams, z: &[f64]) -> Vec<f64> {
    let c = params.dims.n_classes();
    let hw = params.t(HEAD_W);
    let mut out = params.t(HEAD_B).to_vec();
    for (r, &zr) in z.iter().enumerate() {
        let wrow = &hw[r * c..][..c];
        for k in 0..c {
            out[k] += zr * wrow[k];
        }
    }
    out
}

fn add_label_embedding(params: &ModelParams, z: &mut [f64], label: usize) {
    let d = params.dims.d_model;
    let row = &params.t(EMBEDDING)[(FIRST_LABEL as usize + label) * d..][..d];
    for c in 0..d {
        z[c] += row[c];
    }
}

/// Decoder logits at every step, teacher-forced on `prefix` (label indices).
/// Returns `prefix.len() + 1` rows of `n_labels + 1` logits; the last
/// column is EOS.
pub fn forward(params: &ModelParams, ids: &[u32], prefix: &[usize]) -> Result<Vec<Vec<f64>>> {
    check(params, ids)?;
    if let Some(&bad) = prefix.iter().find(|&&l| l >= params.dims.n_labels) {
        return Err(Error::ShapeError(format!("label index {bad} out of range")));
    }
    let cache = encode(params, ids);
    let mut z = cache.pooled;
    let mut rows = Vec::with_capacity(prefix.len() + 1);
    rows.push(head_logits(params, &z));
    for &lab in prefix {
        add_label_embedding(params, &mut z, lab);
        rows.push(head_logits(params, &z));
    }
    Ok(rows)
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Greedy label decoding. The EOS class ends generation and is not returned.
pub fn generate_greedy(params: &ModelParams, ids: &[u32], max_steps: usize) -> Result<Vec<usize>> {
    check(params, ids)?;
    let eos = params.dims.n_labels;
    let cache = encode(params, ids);
    let mut z = cache.pooled;
    let mut out = Vec::new();
    while out.len() < max_steps {
        let k = argmax(&head_logits(params, &z));
        if k == eos {
            break;
        }
        out.push(k);
        add_label_embedding(params, &mut z, k);
    }
    Ok(out)
}

/// Mean token cross-entropy of `target` (label indices ending in EOS) and
/// its gradient with respect to every tensor.
pub fn loss_and_grad(params: &ModelParams, ids: &[u32], target: &[usize]) -> Result<(f64, ModelParams)> {
    let mut grad = ModelParams::zeros(params.dims);
    let loss = accumulate_grad(params, ids, target, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Adds `scale * d(loss)/d(params)` into `grad` and returns the unscaled loss.
pub fn accumulate_grad(
    params: &ModelParams,
    ids: &[u32],
    target: &[usize],
    scale: f64,
    grad: &mut ModelParams,
) -> Result<f64> {
    check(params, ids)?;
    let Dims {
        d_model: d,
        d_ff: ff,
        n_labels,
        ..
    } = params.dims;
    let n_cls = n_labels + 1;
    match target.split_last() {
        Some((&last, body)) if last == n_labels && body.iter().all(|&l| l < n_labels) => {}
        _ => {
            return Err(Error::ShapeError(
                "target must be label indices terminated by EOS".into(),
            ))
        }
    }
    let cache = encode(params, ids);
    let t_len = target.len();
    let inv_t = 1.0 / t_len as f64;
    let hw = params.t(HEAD_W);

    // Decoder.
    let mut z = cache.pooled.clone();
    let mut loss = 0.0;
    let mut dz_all = vec![0.0; t_len * d];
    for (t, &y) in target.iter().enumerate() {
        if t > 0 {
            add_label_embedding(params, &mut z, target[t - 1]);
        }
        let mut p = head_logits(params, &z);
        softmax_in_place(&mut p);
        loss -= p[y].ln() * inv_t;
        let mut dl = p;
        dl[y] -= 1.0;
        dl.iter_mut().for_each(|v| *v *= inv_t * scale);
        let ghw = grad.t_mut(HEAD_W);
        for r in 0..d {
            let zr = z[r];
            let row = &mut ghw[r * n_cls..][..n_cls];
            for k in 0..n_cls {
                row[k] += zr * dl[k];
            }
        }
        let ghb = grad.t_mut(HEAD_B);
        for k in 0..n_cls {
            ghb[k] += dl[k];
        }
        let dz = &mut dz_all[t * d..][..d];
        for r in 0..d {
            let row = &hw[r * n_cls..][..n_cls];
            dz[r] = (0..n_cls).map(|k| row[k] * dl[k]).sum();
        }
    }
    if !loss.is_finite() {
        return Ok(loss);
    }
    let mut dpooled = vec![0.0; d];
    let mut suffix = vec![0.0; d];
    for t in (0..t_len).rev() {
        let dz = &dz_all[t * d..][..d];
        for c in 0..d {
            dpooled[c] += dz[c];
        }
        if t + 1 < t_len {
            // label target[t] is added to z from step t+1 on
            let next = &dz_all[(t + 1) * d..][..d];
            for c in 0..d {
                suffix[c] += next[c];
            }
            let row = (FIRST_LABEL as usize + target[t]) * d;
            let ge = grad.t_mut(EMBEDDING);
            for c in 0..d {
                ge[row + c] += suffix[c];
            }
        }
    }

    // Encoder, query rows only.
    let lay = &cache.layout;
    let l = ids.len();
    let lq = l - lay.q_start;
    let inv_lq = 1.0 / lq as f64;
    let sqrt_d = (d as f64).sqrt();
    let content_start = FIRST_LABEL + n_labels as u32;
    let (w1, w2, wq, wk, wv) = (
        params.t(FF_W1),
        params.t(FF_W2),
        params.t(W_Q),
        params.t(W_K),
        params.t(W_V),
    );
    let df: Vec<f64> = dpooled.iter().map(|v| v * inv_lq).collect();
    let mut dx = vec![0.0; l * d];
    let mut dgain = 0.0;
    let mut dg = vec![0.0; ff];
    let mut dh = vec![0.0; d];
    let mut dxbar = vec![0.0; d];
    let mut da = vec![0.0; l];
    let mut dqk = vec![0.0; d];
    let mut dq = vec![0.0; d];
    for qi in 0..lq {
        let i = lay.q_start + qi;
        let grow = &cache.g[qi * ff..][..ff];
        let hrow = &cache.h[qi * d..][..d];
        // f = h + tanh(h W1 + b1) W2 + b2
        {
            let gb2 = grad.t_mut(FF_B2);
            for c in 0..d {
                gb2[c] += df[c];
            }
        }
        {
            let gw2 = grad.t_mut(FF_W2);
            for k in 0..ff {
                let row = &mut gw2[k * d..][..d];
                let gk = grow[k];
                for c in 0..d {
                    row[c] += gk * df[c];
                }
            }
        }
        for k in 0..ff {
            let row = &w2[k * d..][..d];
            let s: f64 = (0..d).map(|c| row[c] * df[c]).sum();
            dg[k] = s * (1.0 - grow[k] * grow[k]);
        }
        {
            let gb1 = grad.t_mut(FF_B1);
            for k in 0..ff {
                gb1[k] += dg[k];
            }
        }
        {
            let gw1 = grad.t_mut(FF_W1);
            for r in 0..d {
                let row = &mut gw1[r * ff..][..ff];
                let hr = hrow[r];
                for k in 0..ff {
                    row[k] += hr * dg[k];
                }
            }
        }
        for r in 0..d {
            let row = &w1[r * ff..][..ff];
            dh[r] = df[r] + (0..ff).map(|k| row[k] * dg[k]).sum::<f64>();
        }
        // h = x_i + xbar W_v
        for c in 0..d {
            dx[i * d + c] += dh[c];
        }
        let xb = &cache.xbar[qi * d..][..d];
        {
            let gwv = grad.t_mut(W_V);
            for r in 0..d {
                let row = &mut gwv[r * d..][..d];
                let xr = xb[r];
                for c in 0..d {
                    row[c] += xr * dh[c];
                }
            }
        }
        for r in 0..d {
            let row = &wv[r * d..][..d];
            dxbar[r] = (0..d).map(|c| row[c] * dh[c]).sum();
        }
        // xbar = sum_j a_ij x_j
        let arow = &cache.attn[qi * l..][..l];
        let mut weighted = 0.0;
        for j in 0..l {
            let xj = &cache.x[j * d..][..d];
            da[j] = (0..d).map(|c| dxbar[c] * xj[c]).sum();
            weighted += arow[j] * da[j];
            let a = arow[j];
            let dxj = &mut dx[j * d..][..d];
            for c in 0..d {
                dxj[c] += a * dxbar[c];
            }
        }
        // softmax and scores
        let qkrow = &cache.qk[qi * d..][..d];
        dqk.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..l {
            let ds = arow[j] * (da[j] - weighted);
            if ds == 0.0 {
                continue;
            }
            if matches(ids[i], ids[j], content_start) {
                dgain += match_scale(d) * ds;
            }
            let s = ds / sqrt_d;
            let xj = &cache.x[j * d..][..d];
            let dxj = &mut dx[j * d..][..d];
            for c in 0..d {
                dxj[c] += s * qkrow[c];
                dqk[c] += s * xj[c];
            }
        }
        // qk = W_k q
        let qrow = &cache.q[qi * d..][..d];
        {
            let gwk = grad.t_mut(W_K);
            for r in 0..d {
                let row = &mut gwk[r * d..][..d];
                let g = dqk[r];
                for c in 0..d {
                    row[c] += g * qrow[c];
                }
            }
        }
        dq.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..d {
            let row = &wk[r * d..][..d];
            let g = dqk[r];
            for c in 0..d {
                dq[c] += row[c] * g;
            }
        }
        // q = x_i W_q
        let xi = &cache.x[i * d..][..d];
        {
            let gwq = grad.t_mut(W_Q);
            for r in 0..d {
                let row = &mut gwq[r * d..][..d];
                let xr = xi[r];
                for c in 0..d {
                    row[c] += xr * dq[c];
                }
            }
        }
        for r in 0..d {
            let row = &wq[r * d..][..d];
            dx[i * d + r] += (0..d).map(|c| row[c] * dq[c]).sum::<f64>();
        }
    }
    grad.t_mut(MATCH_GAIN)[0] += dgain;

    // x_j = emb[id_j] + mean label embedding of segment(j)
    let mut dlm = vec![0.0; lay.seg_labels.len() * d];
    {
        let ge = grad.t_mut(EMBEDDING);
        for (j, &id) in ids.iter().enumerate() {
            let s = lay.seg_of[j];
            let src = &dx[j * d..][..d];
            let row = id as usize * d;
            for c in 0..d {
                ge[row + c] += src[c];
                dlm[s * d + c] += src[c];
            }
        }
        for (s, labels) in lay.seg_labels.iter().enumerate() {
            if labels.is_empty() {
                continue;
            }
            let inv = 1.0 / labels.len() as f64;
            for &lab in labels {
                let row = lab as usize * d;
                for c in 0..d {
                    ge[row + c] += dlm[s * d + c] * inv;
                }
            }
        }
    }
    Ok(loss)
}
