//! Forward pass with cached intermediates and the matching backward pass.

use crate::matrix::{axpy, dot, outer_acc, softmax_inplace, vecmat_acc, vecmat_transpose_acc, Mat};

use super::activation::ActivationRecord;
use super::grads::FullGradients;
use super::{MicroTransformer, TokenId};

const LN_EPS: f64 = 1e-5;

pub(super) struct SeqTrace {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTrace>,
    final_normed: Mat,
    final_inv_std: Vec<f64>,
    pub logits: Mat,
}

struct LayerTrace {
    ln1_normed: Mat,
    ln1_inv_std: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head: row-stochastic attention over positions s ≤ t.
    attn_probs: Vec<Mat>,
    ctx: Mat,
    /// Low-rank mode: cached input·A for q, k, v, o projections.
    adapter_mid: Option<[Mat; 4]>,
    ln2_normed: Mat,
    ln2_inv_std: Vec<f64>,
    gate_pre: Mat,
    up: Mat,
    act: Mat,
}

/// Affine-free layer norm per row; returns the normalized rows and 1/std.
fn layer_norm(x: &Mat) -> (Mat, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut normed = Mat::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f64;
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        let out = normed.row_mut(r);
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (normed, inv_std)
}

/// dx for the affine-free layer norm, expressed via the normalized output.
fn layer_norm_backward(dy: &Mat, normed: &Mat, inv_std: &[f64]) -> Mat {
    let (rows, cols) = dy.shape();
    let mut dx = Mat::zeros(rows, cols);
    let n = cols as f64;
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = normed.row(r);
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dy_xh = dot(dyr, xh) / n;
        let is = inv_std[r];
        let out = dx.row_mut(r);
        for ((o, &g), &x) in out.iter_mut().zip(dyr).zip(xh) {
            *o = is * (g - mean_dy - x * mean_dy_xh);
        }
    }
    dx
}

/// out[t] = input[t]·base (+ (input[t]·A)·B when adapters are present).
/// Returns the cached mid = input·A when adapters are used.
fn project(input: &Mat, base: &Mat, adapter: Option<(&Mat, &Mat)>) -> (Mat, Option<Mat>) {
    let rows = input.rows();
    let mut out = Mat::zeros(rows, base.cols());
    for t in 0..rows {
        vecmat_acc(out.row_mut(t), input.row(t), base);
    }
    let mid = adapter.map(|(a, b)| {
        let mut mid = Mat::zeros(rows, a.cols());
        for t in 0..rows {
            vecmat_acc(mid.row_mut(t), input.row(t), a);
        }
        for t in 0..rows {
            vecmat_acc(out.row_mut(t), mid.row(t), b);
        }
        mid
    });
    (out, mid)
}

/// Backward through `project`. Accumulates into `d_input`, the base weight
/// gradient, and (when present) the adapter factor gradients.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    d_out: &Mat,
    input: &Mat,
    base: &Mat,
    adapter: Option<(&Mat, &Mat)>,
    mid: Option<&Mat>,
    d_input: &mut Mat,
    d_base: &mut Mat,
    d_adapter: Option<(&mut Mat, &mut Mat)>,
) {
    let rows = input.rows();
    for t in 0..rows {
        vecmat_transpose_acc(d_input.row_mut(t), d_out.row(t), base);
        outer_acc(d_base, input.row(t), d_out.row(t));
    }
    if let (Some((a, b)), Some(mid), Some((da, db))) = (adapter, mid, d_adapter) {
        let rank = a.cols();
        let mut d_mid = vec![0.0; rank];
        for t in 0..rows {
            d_mid.iter_mut().for_each(|v| *v = 0.0);
            vecmat_transpose_acc(&mut d_mid, d_out.row(t), b);
            outer_acc(db, mid.row(t), d_out.row(t));
            outer_acc(da, input.row(t), &d_mid);
            vecmat_transpose_acc(d_input.row_mut(t), &d_mid, a);
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MicroTransformer {
    pub(super) fn forward_trace(
        &self,
        tokens: &[TokenId],
        mut record: Option<&mut ActivationRecord>,
    ) -> SeqTrace {
        let cfg = &self.cfg;
        let seq = tokens.len();
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = Mat::zeros(seq, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            row.copy_from_slice(self.embedding.row(tok as usize));
            axpy(row, 1.0, self.positional.row(t));
        }

        let mut layer_traces = Vec::with_capacity(cfg.num_layers);
        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let (ln1_normed, ln1_inv_std) = layer_norm(&x);

            let adapters = layer.adapters.as_ref();
            let ad = |i: usize| adapters.map(|a| (&a.a[i], &a.b[i]));
            let (q, mid_q) = project(&ln1_normed, &layer.wq, ad(0));
            let (k, mid_k) = project(&ln1_normed, &layer.wk, ad(1));
            let (v, mid_v) = project(&ln1_normed, &layer.wv, ad(2));

            // causal multi-head attention
            let mut attn_probs = Vec::with_capacity(heads);
            let mut ctx = Mat::zeros(seq, d);
            for h in 0..heads {
                let off = h * hd;
                let mut probs = Mat::zeros(seq, seq);
                for t in 0..seq {
                    let qh = &q.row(t)[off..off + hd];
                    let row = probs.row_mut(t);
                    for (s, slot) in row.iter_mut().enumerate().take(t + 1) {
                        *slot = dot(qh, &k.row(s)[off..off + hd]) * scale;
                    }
                    softmax_inplace(&mut row[..t + 1]);
                    let ctx_slice = &mut ctx.row_mut(t)[off..off + hd];
                    for s in 0..=t {
                        let p = probs.get(t, s);
                        axpy(ctx_slice, p, &v.row(s)[off..off + hd]);
                    }
                }
                attn_probs.push(probs);
            }

            let (attn_out, mid_o) = project(&ctx, &layer.wo, ad(3));
            for t in 0..seq {
                axpy(x.row_mut(t), 1.0, attn_out.row(t));
            }

            let adapter_mid = adapters.map(|_| {
                [mid_q.unwrap(), mid_k.unwrap(), mid_v.unwrap(), mid_o.unwrap()]
            });

            // gated feed-forward
            let (ln2_normed, ln2_inv_std) = layer_norm(&x);
            let (gate_pre, _) = project(&ln2_normed, &layer.w1_gate, None);
            if let Some(rec) = record.as_deref_mut() {
                for t in 0..seq {
                    rec.observe(layer_idx, gate_pre.row(t));
                }
            }
            let (up, _) = project(&ln2_normed, &layer.v_up, None);
            let mut act = Mat::zeros(seq, cfg.ffn_dim);
            for t in 0..seq {
                let g = gate_pre.row(t);
                let u = up.row(t);
                let a = act.row_mut(t);
                for i in 0..cfg.ffn_dim {
                    let z = g[i];
                    a[i] = z * sigmoid(z) * u[i];
                }
            }
            for t in 0..seq {
                vecmat_acc(x.row_mut(t), act.row(t), &layer.w2_down);
            }

            layer_traces.push(LayerTrace {
                ln1_normed,
                ln1_inv_std,
                q,
                k,
                v,
                attn_probs,
                ctx,
                adapter_mid,
                ln2_normed,
                ln2_inv_std,
                gate_pre,
                up,
                act,
            });
        }

        let (final_normed, final_inv_std) = layer_norm(&x);
        let mut logits = Mat::zeros(seq, cfg.vocab_size);
        for t in 0..seq {
            vecmat_acc(logits.row_mut(t), final_normed.row(t), &self.head);
        }

        SeqTrace { tokens: tokens.to_vec(), layers: layer_traces, final_normed, final_inv_std, logits }
    }

    /// Accumulate gradients of the (unnormalized) loss whose logit gradient is
    /// `d_logits` into `grads`.
    pub(super) fn backward_trace(&self, trace: &SeqTrace, d_logits: &Mat, grads: &mut FullGradients) {
        let cfg = &self.cfg;
        let seq = trace.tokens.len();
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        // output head
        let mut d_final = Mat::zeros(seq, d);
        for t in 0..seq {
            vecmat_transpose_acc(d_final.row_mut(t), d_logits.row(t), &self.head);
            outer_acc(&mut grads.head, trace.final_normed.row(t), d_logits.row(t));
        }
        let mut dx = layer_norm_backward(&d_final, &trace.final_normed, &trace.final_inv_std);

        for (layer_idx, layer) in self.layers.iter().enumerate().rev() {
            let tr = &trace.layers[layer_idx];
            let block = &mut grads.blocks[layer_idx];
            let adapters = layer.adapters.as_ref();

            // feed-forward block: x_out = x_in + act·W2, act = swish(ln2·W1) ⊗ (ln2·V)
            let mut d_act = Mat::zeros(seq, cfg.ffn_dim);
            for t in 0..seq {
                vecmat_transpose_acc(d_act.row_mut(t), dx.row(t), &layer.w2_down);
                outer_acc(&mut block.w2_down, tr.act.row(t), dx.row(t));
            }
            let mut d_gate = Mat::zeros(seq, cfg.ffn_dim);
            let mut d_up = Mat::zeros(seq, cfg.ffn_dim);
            for t in 0..seq {
                let g = tr.gate_pre.row(t);
                let u = tr.up.row(t);
                let da = d_act.row(t);
                let dg = d_gate.row_mut(t);
                for i in 0..cfg.ffn_dim {
                    let z = g[i];
                    let s = sigmoid(z);
                    let swish = z * s;
                    dg[i] = da[i] * u[i] * (s + swish * (1.0 - s));
                }
                let du = d_up.row_mut(t);
                for i in 0..cfg.ffn_dim {
                    let z = g[i];
                    du[i] = da[i] * z * sigmoid(z);
                }
            }
            let mut d_ln2 = Mat::zeros(seq, d);
            for t in 0..seq {
                vecmat_transpose_acc(d_ln2.row_mut(t), d_gate.row(t), &layer.w1_gate);
                outer_acc(&mut block.w1_gate, tr.ln2_normed.row(t), d_gate.row(t));
                vecmat_transpose_acc(d_ln2.row_mut(t), d_up.row(t), &layer.v_up);
                outer_acc(&mut block.v_up, tr.ln2_normed.row(t), d_up.row(t));
            }
            let d_ffn_in = layer_norm_backward(&d_ln2, &tr.ln2_normed, &tr.ln2_inv_std);
            dx.add_assign(&d_ffn_in);

            // attention block: x_out = x_in + ctx·Wo
            let mut d_ctx = Mat::zeros(seq, d);
            {
                let ad_o = adapters.map(|a| (&a.a[3], &a.b[3]));
                let mid_o = tr.adapter_mid.as_ref().map(|m| &m[3]);
                let d_ad_o = grads.adapters[layer_idx]
                    .as_mut()
                    .map(|g| (&mut g.a[3], &mut g.b[3]));
                project_backward(&dx, &tr.ctx, &layer.wo, ad_o, mid_o, &mut d_ctx, &mut block.wo, d_ad_o);
            }

            let mut d_q = Mat::zeros(seq, d);
            let mut d_k = Mat::zeros(seq, d);
            let mut d_v = Mat::zeros(seq, d);
            let mut d_scores = vec![0.0; seq];
            for h in 0..heads {
                let off = h * hd;
                let probs = &tr.attn_probs[h];
                for t in 0..seq {
                    let d_ctx_h = &d_ctx.row(t)[off..off + hd];
                    let p_row = probs.row(t);
                    // value gradient and attention-weight gradient
                    for s in 0..=t {
                        d_scores[s] = dot(d_ctx_h, &tr.v.row(s)[off..off + hd]);
                        axpy(&mut d_v.row_mut(s)[off..off + hd], p_row[s], d_ctx_h);
                    }
                    // softmax backward within the causal window
                    let inner = dot(&p_row[..t + 1], &d_scores[..t + 1]);
                    for s in 0..=t {
                        d_scores[s] = p_row[s] * (d_scores[s] - inner);
                    }
                    let qh = &tr.q.row(t)[off..off + hd];
                    let d_qh = &mut d_q.row_mut(t)[off..off + hd];
                    for s in 0..=t {
                        let w = d_scores[s] * scale;
                        axpy(d_qh, w, &tr.k.row(s)[off..off + hd]);
                        axpy(&mut d_k.row_mut(s)[off..off + hd], w, qh);
                    }
                }
            }

            let mut d_ln1 = Mat::zeros(seq, d);
            for (i, (d_out, base, d_base)) in [
                (&d_q, &layer.wq, &mut block.wq),
                (&d_k, &layer.wk, &mut block.wk),
                (&d_v, &layer.wv, &mut block.wv),
            ]
            .into_iter()
            .enumerate()
            {
                let ad = adapters.map(|a| (&a.a[i], &a.b[i]));
                let mid = tr.adapter_mid.as_ref().map(|m| &m[i]);
                let d_ad = grads.adapters[layer_idx].as_mut().map(|g| (&mut g.a[i], &mut g.b[i]));
                project_backward(d_out, &tr.ln1_normed, base, ad, mid, &mut d_ln1, d_base, d_ad);
            }
            let d_attn_in = layer_norm_backward(&d_ln1, &tr.ln1_normed, &tr.ln1_inv_std);
            dx.add_assign(&d_attn_in);
        }

        // embeddings
        for (t, &tok) in trace.tokens.iter().enumerate() {
            axpy(grads.embedding.row_mut(tok as usize), 1.0, dx.row(t));
            axpy(grads.positional.row_mut(t), 1.0, dx.row(t));
        }
    }
}

/// Cross-entropy over the answer span, summed (not averaged), plus the raw
/// logit gradient when requested. Position `t-1` predicts token `t`.
pub(super) fn loss_terms(
    logits: &Mat,
    tokens: &[TokenId],
    answer_start: usize,
    want_grad: bool,
) -> (f64, u64, Option<Mat>) {
    let vocab = logits.cols();
    let mut d_logits = want_grad.then(|| Mat::zeros(logits.rows(), vocab));
    let mut ce = 0.0;
    let mut count = 0u64;
    let mut probs = vec![0.0; vocab];
    for t in answer_start..tokens.len() {
        let row = logits.row(t - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &l) in probs.iter_mut().zip(row) {
            *p = (l - max).exp();
            sum += *p;
        }
        let target = tokens[t] as usize;
        // log-sum-exp minus target logit
        ce += max + sum.ln() - row[target];
        count += 1;
        if let Some(dl) = d_logits.as_mut() {
            let out = dl.row_mut(t - 1);
            for (o, &p) in out.iter_mut().zip(&probs) {
                *o = p / sum;
            }
            out[target] -= 1.0;
        }
    }
    (ce, count, d_logits)
}
