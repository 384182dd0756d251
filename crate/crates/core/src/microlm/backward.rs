//! Reverse-mode pass over a cached [`HiddenTrace`].

use super::forward::HiddenTrace;
use super::math::{self, gelu_grad, layer_norm_backward, matvec_t_acc, outer_acc};
use super::params::ModelParams;

/// Gradient of the objective with respect to the logits at one head position.
#[derive(Debug, Clone)]
pub(crate) struct HeadSeed {
    pub position: usize,
    pub dlogits: Vec<f64>,
}

/// Where to stop the reverse sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    /// Run all the way to the embeddings.
    Embeddings,
    /// Stop once the gradient of the MLP output of this layer is known.
    /// Weight gradients (if requested) are accumulated for this layer too.
    Layer(usize),
}

/// Backpropagates `seeds` through `trace`.
///
/// Returns `d objective / d m` at the stop layer (row-major `seq_len ×
/// d_model`; empty for [`Stop::Embeddings`]). When the trace carries a patch
/// at that layer, the returned row at the patch position is the gradient with
/// respect to the patch vector.
///
/// When `grads` is given, parameter gradients of every layer at or above the
/// stop layer are accumulated into it, along with the tied embedding, the
/// final layer norm and (for a full sweep) position embeddings.
pub(crate) fn backward(
    params: &ModelParams,
    trace: &HiddenTrace,
    seeds: &[HeadSeed],
    stop: Stop,
    mut grads: Option<&mut ModelParams>,
) -> Vec<f64> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff;
    let t_len = trace.seq_len();

    let mut dh = vec![0.0; t_len * d];
    for seed in seeds {
        let t = seed.position;
        let row = t * d..(t + 1) * d;
        let mut dfinal = vec![0.0; d];
        matvec_t_acc(&params.tok_emb.data, cfg.vocab_size, d, &seed.dlogits, &mut dfinal);
        if let Some(g) = grads.as_deref_mut() {
            outer_acc(&mut g.tok_emb.data, &seed.dlogits, &trace.final_out[row.clone()]);
        }
        let dparams = grads
            .as_deref_mut()
            .map(|g| (&mut g.ln_final.gain[..], &mut g.ln_final.bias[..]));
        layer_norm_backward(
            &dfinal,
            &trace.final_hat[row.clone()],
            trace.final_rstd[t],
            &params.ln_final.gain,
            &mut dh[row],
            dparams,
        );
    }

    let lowest = match stop {
        Stop::Embeddings => 0,
        Stop::Layer(l) => l,
    };

    for l in (lowest..cfg.n_layers).rev() {
        let lt = &trace.layers[l];
        let lp = &params.layers[l];
        let mut dm = dh.clone();
        let at_stop = stop == Stop::Layer(l);
        if at_stop && grads.is_none() {
            return dm;
        }
        let captured = if at_stop { dm.clone() } else { Vec::new() };
        if let Some(site) = trace.patch.filter(|s| s.layer == l) {
            dm[site.position * d..(site.position + 1) * d].fill(0.0);
        }

        // MLP: output = mid + W_proj gelu(W_fc ln(mid)).
        let mut dmid = dh;
        for t in 0..t_len {
            let row = t * d..(t + 1) * d;
            let frow = t * d_ff..(t + 1) * d_ff;
            let dm_t = &dm[row.clone()];
            if dm_t.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut dkey = vec![0.0; d_ff];
            matvec_t_acc(&lp.w_proj.data, d, d_ff, dm_t, &mut dkey);
            if let Some(g) = grads.as_deref_mut() {
                outer_acc(&mut g.layers[l].w_proj.data, dm_t, &lt.key[frow.clone()]);
            }
            for (j, dk) in dkey.iter_mut().enumerate() {
                *dk *= gelu_grad(lt.pre_act[t * d_ff + j]);
            }
            let mut dln = vec![0.0; d];
            matvec_t_acc(&lp.w_fc.data, d_ff, d, &dkey, &mut dln);
            if let Some(g) = grads.as_deref_mut() {
                outer_acc(&mut g.layers[l].w_fc.data, &dkey, &lt.mlp_in[row.clone()]);
            }
            let dparams = grads.as_deref_mut().map(|g| {
                let ln = &mut g.layers[l].ln_mlp;
                (&mut ln.gain[..], &mut ln.bias[..])
            });
            layer_norm_backward(
                &dln,
                &lt.ln_mlp_hat[row.clone()],
                lt.ln_mlp_rstd[t],
                &lp.ln_mlp.gain,
                &mut dmid[row],
                dparams,
            );
        }

        // Attention: mid = input + W_o attn(ln(input)).
        let mut dinput = dmid.clone();
        let mut dmix = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = t * d..(t + 1) * d;
            matvec_t_acc(&lp.w_o.data, d, d, &dmid[row.clone()], &mut dmix[row.clone()]);
            if let Some(g) = grads.as_deref_mut() {
                outer_acc(&mut g.layers[l].w_o.data, &dmid[row.clone()], &lt.mix[row]);
            }
        }
        let (dq, dk, dv) = attention_backward(cfg.n_heads, cfg.head_dim(), t_len, d, lt, &dmix);
        for t in 0..t_len {
            let row = t * d..(t + 1) * d;
            let mut dln = vec![0.0; d];
            matvec_t_acc(&lp.w_q.data, d, d, &dq[row.clone()], &mut dln);
            matvec_t_acc(&lp.w_k.data, d, d, &dk[row.clone()], &mut dln);
            matvec_t_acc(&lp.w_v.data, d, d, &dv[row.clone()], &mut dln);
            if let Some(g) = grads.as_deref_mut() {
                let x = &lt.ln_attn_out[row.clone()];
                let gl = &mut g.layers[l];
                outer_acc(&mut gl.w_q.data, &dq[row.clone()], x);
                outer_acc(&mut gl.w_k.data, &dk[row.clone()], x);
                outer_acc(&mut gl.w_v.data, &dv[row.clone()], x);
            }
            let dparams = grads.as_deref_mut().map(|g| {
                let ln = &mut g.layers[l].ln_attn;
                (&mut ln.gain[..], &mut ln.bias[..])
            });
            layer_norm_backward(
                &dln,
                &lt.ln_attn_hat[row.clone()],
                lt.ln_attn_rstd[t],
                &lp.ln_attn.gain,
                &mut dinput[row],
                dparams,
            );
        }
        dh = dinput;
        if at_stop {
            return captured;
        }
    }

    if let Some(g) = grads {
        for (t, &tok) in trace.tokens.iter().enumerate() {
            let row = &dh[t * d..(t + 1) * d];
            let e = tok as usize;
            for j in 0..d {
                g.tok_emb.data[e * d + j] += row[j];
                g.pos_emb.data[t * d + j] += row[j];
            }
        }
    }
    Vec::new()
}

type QkvGrads = (Vec<f64>, Vec<f64>, Vec<f64>);

fn attention_backward(
    n_heads: usize,
    hd: usize,
    t_len: usize,
    d: usize,
    lt: &super::forward::LayerTrace,
    dmix: &[f64],
) -> QkvGrads {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dp = vec![0.0; t_len];
    for h in 0..n_heads {
        let c0 = h * hd;
        for t in 0..t_len {
            let base = (h * t_len + t) * t_len;
            let dmix_t = &dmix[t * d + c0..t * d + c0 + hd];
            let mut weighted = 0.0;
            for u in 0..=t {
                let p = lt.att[base + u];
                dp[u] = math::dot(dmix_t, &lt.v[u * d + c0..u * d + c0 + hd]);
                weighted += p * dp[u];
                for j in 0..hd {
                    dv[u * d + c0 + j] += p * dmix_t[j];
                }
            }
            for u in 0..=t {
                let ds = lt.att[base + u] * (dp[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for j in 0..hd {
                    dq[t * d + c0 + j] += ds * lt.k[u * d + c0 + j];
                    dk[u * d + c0 + j] += ds * lt.q[t * d + c0 + j];
                }
            }
        }
    }
    (dq, dk, dv)
}
