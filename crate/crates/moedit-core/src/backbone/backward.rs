//! Hand-written reverse-mode passes for the backbone.
//!
//! Two consumers: pretraining needs parameter gradients for every tensor,
//! while editing only needs the activation gradient at the host layer's
//! FFN output (the backbone stays frozen). Both share the same per-layer
//! backward with parameter accumulation made optional, and both are
//! validated against the central-finite-difference oracle in tests.

use alloc::vec::Vec;

use super::model::{
    attention_forward, ffn_forward, layer_norm_cached, AttentionCache, FfnRef, Layer,
};
use super::{BackboneError, BackboneModel};
use crate::numerics::{silu_grad, softmax_row_backward, Matrix};

/// Per-layer activations retained for backward.
pub struct LayerTrace {
    a: Matrix,
    xhat1: Matrix,
    inv1: Vec<f64>,
    att: AttentionCache,
    xhat2: Matrix,
    inv2: Vec<f64>,
    u: Matrix,
    z: Matrix,
    sz: Matrix,
}

/// Trace of the blocks above the host layer plus final norm and head.
pub struct UpperTrace {
    host: usize,
    layers: Vec<LayerTrace>,
    xhat_f: Matrix,
    inv_f: Vec<f64>,
}

/// Trace of a full forward pass (pretraining).
pub struct FullTrace {
    ids: Vec<u32>,
    layers: Vec<LayerTrace>,
    xhat_f: Matrix,
    inv_f: Vec<f64>,
    xn: Matrix,
}

/// Gradient buffers for one block.
pub struct LayerGrads {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
}

/// Gradient buffers mirroring every backbone tensor.
pub struct ModelGrads {
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerGrads>,
    pub final_gamma: Matrix,
    pub final_beta: Matrix,
    pub lm_head: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(model: &BackboneModel) -> ModelGrads {
        let d = model.config.d_model;
        let layers = model
            .layers
            .iter()
            .map(|_| LayerGrads {
                ln1_gamma: Matrix::zeros(1, d),
                ln1_beta: Matrix::zeros(1, d),
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ln2_gamma: Matrix::zeros(1, d),
                ln2_beta: Matrix::zeros(1, d),
                ffn_in: Matrix::zeros(d, model.config.d_ff),
                ffn_out: Matrix::zeros(model.config.d_ff, d),
            })
            .collect();
        ModelGrads {
            embed: Matrix::zeros(model.config.vocab_size, d),
            pos: Matrix::zeros(model.config.max_seq_len, d),
            layers,
            final_gamma: Matrix::zeros(1, d),
            final_beta: Matrix::zeros(1, d),
            lm_head: Matrix::zeros(d, model.config.vocab_size),
        }
    }

    pub fn zero(&mut self) {
        self.embed.fill(0.0);
        self.pos.fill(0.0);
        for l in &mut self.layers {
            l.ln1_gamma.fill(0.0);
            l.ln1_beta.fill(0.0);
            l.wq.fill(0.0);
            l.wk.fill(0.0);
            l.wv.fill(0.0);
            l.wo.fill(0.0);
            l.ln2_gamma.fill(0.0);
            l.ln2_beta.fill(0.0);
            l.ffn_in.fill(0.0);
            l.ffn_out.fill(0.0);
        }
        self.final_gamma.fill(0.0);
        self.final_beta.fill(0.0);
        self.lm_head.fill(0.0);
    }
}

fn layer_forward_traced(
    model: &BackboneModel,
    layer: &Layer,
    x: &Matrix,
) -> Result<(Matrix, LayerTrace), BackboneError> {
    let (a, xhat1, inv1) = layer_norm_cached(&layer.ln1, x);
    let (att_out, att) = attention_forward(model, layer, &a)?;
    let mut x1 = x.clone();
    x1.add_scaled(&att_out, 1.0)?;
    let (u, xhat2, inv2) = layer_norm_cached(&layer.ln2, &x1);
    let z = u.matmul(&layer.ffn_in)?;
    let mut sz = z.clone();
    for v in sz.as_mut_slice() {
        *v *= crate::numerics::sigmoid(*v);
    }
    let f = sz.matmul(&layer.ffn_out)?;
    let mut x_next = x1;
    x_next.add_scaled(&f, 1.0)?;
    let trace = LayerTrace {
        a,
        xhat1,
        inv1,
        att,
        xhat2,
        inv2,
        u,
        z,
        sz,
    };
    Ok((x_next, trace))
}

/// Forward from the post-host residual `x2` through the remaining blocks,
/// capturing a trace for `backward_to_host`.
pub(crate) fn upper_forward_traced(
    model: &BackboneModel,
    host: usize,
    x2: Matrix,
) -> Result<(Matrix, UpperTrace), BackboneError> {
    let mut x = x2;
    let mut layers = Vec::with_capacity(model.layers.len() - host - 1);
    for layer in &model.layers[host + 1..] {
        let (x_next, trace) = layer_forward_traced(model, layer, &x)?;
        layers.push(trace);
        x = x_next;
    }
    let (xn, xhat_f, inv_f) = layer_norm_cached(&model.final_norm, &x);
    let logits = xn.matmul(&model.lm_head)?;
    Ok((
        logits,
        UpperTrace {
            host,
            layers,
            xhat_f,
            inv_f,
        },
    ))
}

fn layer_norm_backward(
    dy: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gamma: &Matrix,
    mut grads: Option<(&mut Matrix, &mut Matrix)>,
) -> Matrix {
    let rows = dy.rows();
    let d = dy.cols();
    let g = gamma.row(0);
    let mut dx = Matrix::zeros(rows, d);
    for r in 0..rows {
        let dy_r = dy.row(r);
        let xh_r = xhat.row(r);
        if let Some((dgamma, dbeta)) = grads.as_mut() {
            let dg = dgamma.row_mut(0);
            let db = dbeta.row_mut(0);
            for c in 0..d {
                dg[c] += dy_r[c] * xh_r[c];
                db[c] += dy_r[c];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dxh = dy_r[c] * g[c];
            m1 += dxh;
            m2 += dxh * xh_r[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = inv_std[r];
        let dx_r = dx.row_mut(r);
        for c in 0..d {
            let dxh = dy_r[c] * g[c];
            dx_r[c] = inv * (dxh - m1 - xh_r[c] * m2);
        }
    }
    dx
}

fn take_cols(m: &Matrix, c0: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |r, c| m.get(r, c0 + c))
}

fn add_cols(dst: &mut Matrix, src: &Matrix, c0: usize) {
    for r in 0..src.rows() {
        let s = src.row(r);
        let d = dst.row_mut(r);
        for (c, &v) in s.iter().enumerate() {
            d[c0 + c] += v;
        }
    }
}

fn attention_backward(
    model: &BackboneModel,
    layer: &Layer,
    trace: &LayerTrace,
    datt: &Matrix,
    mut grads: Option<&mut LayerGrads>,
) -> Result<Matrix, BackboneError> {
    let t_len = datt.rows();
    let d = model.config.d_model;
    let heads = model.config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / crate::math::sqrt(dh as f64);
    let att = &trace.att;

    if let Some(g) = grads.as_mut() {
        g.wo.add_scaled(&att.o.matmul_transpose_a(datt)?, 1.0)?;
    }
    let d_o = datt.matmul_transpose_b(&layer.wo)?;

    let mut dq = Matrix::zeros(t_len, d);
    let mut dk = Matrix::zeros(t_len, d);
    let mut dv = Matrix::zeros(t_len, d);
    let mut ds = Matrix::zeros(t_len, t_len);
    for h in 0..heads {
        let c0 = h * dh;
        let p = &att.probs[h];
        let do_h = take_cols(&d_o, c0, dh);
        let v_h = take_cols(&att.v, c0, dh);
        let k_h = take_cols(&att.k, c0, dh);
        let q_h = take_cols(&att.q, c0, dh);

        // dv_h = p^T * do_h (zeros above the diagonal enforce causality)
        add_cols(&mut dv, &p.matmul_transpose_a(&do_h)?, c0);

        // dp = do_h * v_h^T, then softmax backward row by row
        let dp = do_h.matmul_transpose_b(&v_h)?;
        ds.fill(0.0);
        for i in 0..t_len {
            softmax_row_backward(&p.row(i)[..=i], &dp.row(i)[..=i], &mut ds.row_mut(i)[..=i]);
        }
        let mut dq_h = ds.matmul(&k_h)?;
        for v in dq_h.as_mut_slice() {
            *v *= scale;
        }
        add_cols(&mut dq, &dq_h, c0);
        let mut dk_h = ds.matmul_transpose_a(&q_h)?;
        for v in dk_h.as_mut_slice() {
            *v *= scale;
        }
        add_cols(&mut dk, &dk_h, c0);
    }

    if let Some(g) = grads.as_mut() {
        g.wq.add_scaled(&trace.a.matmul_transpose_a(&dq)?, 1.0)?;
        g.wk.add_scaled(&trace.a.matmul_transpose_a(&dk)?, 1.0)?;
        g.wv.add_scaled(&trace.a.matmul_transpose_a(&dv)?, 1.0)?;
    }
    let mut da = dq.matmul_transpose_b(&layer.wq)?;
    da.add_scaled(&dk.matmul_transpose_b(&layer.wk)?, 1.0)?;
    da.add_scaled(&dv.matmul_transpose_b(&layer.wv)?, 1.0)?;
    Ok(da)
}

/// Backward through one block. Returns the gradient at the block input;
/// with `grads` set, also accumulates parameter gradients.
fn layer_backward(
    model: &BackboneModel,
    layer: &Layer,
    trace: &LayerTrace,
    dx_next: &Matrix,
    mut grads: Option<&mut LayerGrads>,
) -> Result<Matrix, BackboneError> {
    // FFN sublayer: x_next = x1 + silu(u * W1) * W2
    let df = dx_next;
    if let Some(g) = grads.as_mut() {
        g.ffn_out
            .add_scaled(&trace.sz.matmul_transpose_a(df)?, 1.0)?;
    }
    let mut dz = df.matmul_transpose_b(&layer.ffn_out)?;
    for (dzv, &zv) in dz.as_mut_slice().iter_mut().zip(trace.z.as_slice()) {
        *dzv *= silu_grad(zv);
    }
    if let Some(g) = grads.as_mut() {
        g.ffn_in
            .add_scaled(&trace.u.matmul_transpose_a(&dz)?, 1.0)?;
    }
    let du = dz.matmul_transpose_b(&layer.ffn_in)?;
    let ln2_grads = grads.as_mut().map(|g| (&mut g.ln2_gamma, &mut g.ln2_beta));
    let mut dx1 = layer_norm_backward(&du, &trace.xhat2, &trace.inv2, &layer.ln2.gamma, ln2_grads);
    dx1.add_scaled(dx_next, 1.0)?;

    // Attention sublayer: x1 = x + Wo(attn(LN1(x)))
    let da = attention_backward(model, layer, trace, &dx1, grads.as_deref_mut())?;
    let ln1_grads = grads.as_mut().map(|g| (&mut g.ln1_gamma, &mut g.ln1_beta));
    let mut dx = layer_norm_backward(&da, &trace.xhat1, &trace.inv1, &layer.ln1.gamma, ln1_grads);
    dx.add_scaled(&dx1, 1.0)?;
    Ok(dx)
}

impl BackboneModel {
    /// Full traced forward for pretraining (no adaptor hook).
    pub fn forward_train(&self, ids: &[u32]) -> Result<(Matrix, FullTrace), BackboneError> {
        self.check_ids(ids)?;
        let mut x = Matrix::from_fn(ids.len(), self.config.d_model, |t, c| {
            self.embed.get(ids[t] as usize, c) + self.pos.get(t, c)
        });
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (x_next, trace) = layer_forward_traced(self, layer, &x)?;
            layers.push(trace);
            x = x_next;
        }
        let (xn, xhat_f, inv_f) = layer_norm_cached(&self.final_norm, &x);
        let logits = xn.matmul(&self.lm_head)?;
        Ok((
            logits,
            FullTrace {
                ids: ids.to_vec(),
                layers,
                xhat_f,
                inv_f,
                xn,
            },
        ))
    }

    /// Full backward with parameter gradients accumulated into `grads`.
    pub fn backward_full(
        &self,
        trace: &FullTrace,
        dlogits: &Matrix,
        grads: &mut ModelGrads,
    ) -> Result<(), BackboneError> {
        grads
            .lm_head
            .add_scaled(&trace.xn.matmul_transpose_a(dlogits)?, 1.0)?;
        let dxn = dlogits.matmul_transpose_b(&self.lm_head)?;
        let mut dx = layer_norm_backward(
            &dxn,
            &trace.xhat_f,
            &trace.inv_f,
            &self.final_norm.gamma,
            Some((&mut grads.final_gamma, &mut grads.final_beta)),
        );
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            dx = layer_backward(
                self,
                layer,
                &trace.layers[idx],
                &dx,
                Some(&mut grads.layers[idx]),
            )?;
        }
        for (t, &id) in trace.ids.iter().enumerate() {
            let src = dx.row(t);
            let e = grads.embed.row_mut(id as usize);
            for (ev, &sv) in e.iter_mut().zip(src) {
                *ev += sv;
            }
            let p = grads.pos.row_mut(t);
            for (pv, &sv) in p.iter_mut().zip(src) {
                *pv += sv;
            }
        }
        Ok(())
    }

    /// Activation-only backward from the logits to the host layer's
    /// FFN-sublayer output. The backbone receives no parameter updates;
    /// this is how loss gradients reach the adaptor through the frozen
    /// blocks above it.
    pub fn backward_to_host(
        &self,
        trace: &UpperTrace,
        dlogits: &Matrix,
    ) -> Result<Matrix, BackboneError> {
        let dxn = dlogits.matmul_transpose_b(&self.lm_head)?;
        let mut dx = layer_norm_backward(
            &dxn,
            &trace.xhat_f,
            &trace.inv_f,
            &self.final_norm.gamma,
            None,
        );
        for (offset, layer) in self.layers[trace.host + 1..].iter().enumerate().rev() {
            dx = layer_backward(self, layer, &trace.layers[offset], &dx, None)?;
        }
        // x2 = x1 + h, so dL/dh is exactly the gradient at the block input.
        Ok(dx)
    }
}

/// FFN activation backward used by tests and by the adaptor's frozen
/// `W_0` path: given `dL/d ffn_out`, returns `dL/d x`.
pub fn ffn_backward_input(w: FfnRef<'_>, x: &Matrix, df: &Matrix) -> Result<Matrix, BackboneError> {
    let z = x.matmul(w.w_in)?;
    let mut dz = df.matmul_transpose_b(w.w_out)?;
    for (dzv, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *dzv *= silu_grad(zv);
    }
    Ok(dz.matmul_transpose_b(w.w_in)?)
}

/// Forward + activation backward sanity helper for the host FFN, exposed
/// for the adaptor module.
pub fn host_ffn_forward(model: &BackboneModel, x: &Matrix) -> Result<Matrix, BackboneError> {
    ffn_forward(model.host_ffn(), x)
}
