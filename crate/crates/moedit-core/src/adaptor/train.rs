//! Cached training forward and exact backward for the adaptor.
//!
//! The gradient path follows the forward exactly: upstream per-token
//! gradients split between the selected experts (scaled by lambda and
//! the gate weight) and the gate itself; gate gradients flow through the
//! top-k mask into the softmax, then into keys and the shared projection
//! (KV modes) or the MLP router (conventional mode). Masked weights
//! contribute zero, but unselected scores still receive gradient through
//! the softmax normalizer. Frozen experts and keys have no gradient
//! buffers at all.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{kv_score, kv_score_backward, AdaptorError, AdaptorState, GateDecision, RouterMode};
use crate::numerics::{dot, sigmoid, silu_grad, softmax, Matrix};

/// Gradients for the trainable pieces of an adaptor.
pub struct AdaptorGrads {
    pub expert_w_in: Vec<Option<Matrix>>,
    pub expert_w_out: Vec<Option<Matrix>>,
    pub keys: Vec<Option<Vec<f64>>>,
    pub w_down: Matrix,
    pub w_up: Matrix,
    pub router: Option<Matrix>,
}

impl AdaptorGrads {
    pub fn zeros_like(state: &AdaptorState) -> AdaptorGrads {
        let expert_w_in = state
            .experts
            .iter()
            .map(|e| (!e.frozen).then(|| Matrix::zeros(e.w_in.rows(), e.w_in.cols())))
            .collect();
        let expert_w_out = state
            .experts
            .iter()
            .map(|e| (!e.frozen).then(|| Matrix::zeros(e.w_out.rows(), e.w_out.cols())))
            .collect();
        let keys = state
            .keys
            .iter()
            .map(|k| (!k.frozen).then(|| vec![0.0; k.v.len()]))
            .collect();
        AdaptorGrads {
            expert_w_in,
            expert_w_out,
            keys,
            w_down: Matrix::zeros(state.w_down.rows(), state.w_down.cols()),
            w_up: Matrix::zeros(state.w_up.rows(), state.w_up.cols()),
            router: state
                .mlp_router
                .as_ref()
                .map(|r| Matrix::zeros(r.rows(), r.cols())),
        }
    }
}

/// Cache of one projection evaluation.
pub(super) struct ProjCache {
    input: Vec<f64>,
    down_pre: Vec<f64>,
    silu_down: Vec<f64>,
    pub(super) value: Vec<f64>,
}

/// Cached forward of the instance-level KV path for one record.
pub struct KvInstanceForward {
    pub gate: GateDecision,
    probs: Vec<f64>,
    proj: ProjCache,
    /// (expert index, f_i(u)) for selected experts.
    expert_outs: Vec<(usize, Matrix)>,
    /// Hidden pre-activation of the trainable expert, if selected.
    trainable_pre: Option<Matrix>,
    pub h: Matrix,
}

/// Per-token cached forward for the token-level modes.
pub struct TokenForward {
    pub gates: Vec<GateDecision>,
    probs: Vec<Vec<f64>>,
    projs: Option<Vec<ProjCache>>,
    expert_outs: Vec<Matrix>,
    expert_pre: Vec<Option<Matrix>>,
    pub h: Matrix,
}

impl AdaptorState {
    fn project_cached(&self, e: &[f64]) -> Result<ProjCache, AdaptorError> {
        let down_pre = crate::numerics::matvec(&self.w_down, e)?;
        let silu_down: Vec<f64> = down_pre.iter().map(|&x| x * sigmoid(x)).collect();
        let value = crate::numerics::matvec(&self.w_up, &silu_down)?;
        Ok(ProjCache {
            input: e.to_vec(),
            down_pre,
            silu_down,
            value,
        })
    }

    /// Backward through the projection given `dL/d value`.
    fn project_backward(&self, cache: &ProjCache, dv: &[f64], grads: &mut AdaptorGrads) {
        // dW_up[r][c] += dv[r] * silu_down[c]
        for (r, &dvr) in dv.iter().enumerate() {
            let row = grads.w_up.row_mut(r);
            for (g, &s) in row.iter_mut().zip(&cache.silu_down) {
                *g += dvr * s;
            }
        }
        // ds = W_up^T dv ; dc = ds .* silu'(down_pre)
        let mut dc = vec![0.0; self.config.d_proj];
        for (r, &dvr) in dv.iter().enumerate() {
            let row = self.w_up.row(r);
            for (acc, &w) in dc.iter_mut().zip(row) {
                *acc += dvr * w;
            }
        }
        for (acc, &pre) in dc.iter_mut().zip(&cache.down_pre) {
            *acc *= silu_grad(pre);
        }
        // dW_down[r][c] += dc[r] * e[c]
        for (r, &dcr) in dc.iter().enumerate() {
            let row = grads.w_down.row_mut(r);
            for (g, &e) in row.iter_mut().zip(&cache.input) {
                *g += dcr * e;
            }
        }
    }

    /// Training forward, instance-level KV routing: one gate decision per
    /// record applied to every token of `u`. `w0_out` is the precomputed
    /// frozen FFN output for these tokens (constant during editing).
    pub fn forward_instance(
        &self,
        instance_embedding: &[f64],
        u: &Matrix,
        w0_out: &Matrix,
    ) -> Result<KvInstanceForward, AdaptorError> {
        if self.config.router_mode != RouterMode::KvAnchor {
            return Err(AdaptorError::State(String::from(
                "forward_instance requires kv_anchor routing",
            )));
        }
        if self.experts.is_empty() {
            return Err(AdaptorError::State(String::from("routing with no experts")));
        }
        let proj = self.project_cached(instance_embedding)?;
        let tau = self.config.score_temperature;
        let scores: Vec<f64> = self
            .keys
            .iter()
            .map(|k| kv_score(&k.v, &proj.value, tau))
            .collect();
        let probs = softmax(&scores)?;
        let gate = self.gate_from_scores(scores)?;

        let mut h = w0_out.clone();
        let trainable = self.trainable_index();
        let mut expert_outs = Vec::with_capacity(gate.selected.len());
        let mut trainable_pre = None;
        for &i in &gate.selected {
            let pre = u.matmul(&self.experts[i].w_in)?;
            let mut s = pre.clone();
            for v in s.as_mut_slice() {
                *v *= sigmoid(*v);
            }
            let f = s.matmul(&self.experts[i].w_out)?;
            h.add_scaled(&f, self.config.lambda * gate.weights[i])?;
            if Some(i) == trainable {
                trainable_pre = Some(pre);
            }
            expert_outs.push((i, f));
        }
        Ok(KvInstanceForward {
            gate,
            probs,
            proj,
            expert_outs,
            trainable_pre,
            h,
        })
    }

    /// Exact backward of `forward_instance`. `dh` is `dL/dh` per token.
    pub fn backward_instance(
        &self,
        fwd: &KvInstanceForward,
        u: &Matrix,
        dh: &Matrix,
        grads: &mut AdaptorGrads,
    ) -> Result<(), AdaptorError> {
        let trainable = self.trainable_index().ok_or_else(|| {
            AdaptorError::State(String::from("backward with no trainable expert"))
        })?;
        let lambda = self.config.lambda;

        // dL/dg_i for selected experts.
        let mut dgate = vec![0.0; self.experts.len()];
        for (i, f) in &fwd.expert_outs {
            dgate[*i] = lambda * frob_dot(dh, f);
        }

        // Trainable expert parameters (only when it was selected).
        if let Some(pre) = &fwd.trainable_pre {
            let g = fwd.gate.weights[trainable];
            let mut df = dh.clone();
            for v in df.as_mut_slice() {
                *v *= lambda * g;
            }
            expert_backward(
                pre,
                &self.experts[trainable].w_out,
                u,
                &df,
                grads.expert_w_in[trainable].as_mut(),
                grads.expert_w_out[trainable].as_mut(),
            )?;
        }

        // Gate backward to scores, then keys / value / projection.
        let dscores = self.gate_backward(&fwd.gate, &fwd.probs, &dgate);
        let tau = self.config.score_temperature;
        let mut dv = vec![0.0; self.d_model];
        for (i, (key, &ds)) in self.keys.iter().zip(&dscores).enumerate() {
            if ds != 0.0 {
                let dk = if i == trainable {
                    grads.keys[trainable].as_deref_mut()
                } else {
                    None
                };
                kv_score_backward(&key.v, &fwd.proj.value, tau, ds, dk, &mut dv);
            }
        }
        self.project_backward(&fwd.proj, &dv, grads);
        Ok(())
    }

    /// `dL/dscores` from `dL/dg` through top-k masking and softmax.
    fn gate_backward(&self, gate: &GateDecision, probs: &[f64], dgate: &[f64]) -> Vec<f64> {
        let n = probs.len();
        let mut dp = vec![0.0; n];
        if self.config.renormalize_gate {
            let z: f64 = gate.selected.iter().map(|&i| probs[i]).sum();
            let mut inner = 0.0;
            for &i in &gate.selected {
                inner += dgate[i] * gate.weights[i];
            }
            for &i in &gate.selected {
                dp[i] = (dgate[i] - inner) / z;
            }
        } else {
            for &i in &gate.selected {
                dp[i] = dgate[i];
            }
        }
        let mut inner = 0.0;
        for (d, &p) in dp.iter().zip(probs) {
            inner += d * p;
        }
        let mut dscores = vec![0.0; n];
        for i in 0..n {
            dscores[i] = probs[i] * (dp[i] - inner);
        }
        dscores
    }

    /// Training forward for the token-level modes. `routing` carries one
    /// routing input per token: token embeddings for kv_token_level, the
    /// host activations themselves for conventional.
    pub fn forward_tokens(
        &self,
        routing: &Matrix,
        u: &Matrix,
        w0_out: &Matrix,
    ) -> Result<TokenForward, AdaptorError> {
        if self.experts.is_empty() {
            return Err(AdaptorError::State(String::from("routing with no experts")));
        }
        if routing.rows() != u.rows() {
            return Err(AdaptorError::Argument(format!(
                "routing rows {} != token rows {}",
                routing.rows(),
                u.rows()
            )));
        }
        let kv = self.config.router_mode == RouterMode::KvTokenLevel;
        let trainable = self.trainable_index();

        let mut expert_outs = Vec::with_capacity(self.experts.len());
        let mut expert_pre = Vec::with_capacity(self.experts.len());
        for (i, e) in self.experts.iter().enumerate() {
            let pre = u.matmul(&e.w_in)?;
            let mut s = pre.clone();
            for v in s.as_mut_slice() {
                *v *= sigmoid(*v);
            }
            expert_outs.push(s.matmul(&e.w_out)?);
            let needs_pre = if kv { Some(i) == trainable } else { !e.frozen };
            expert_pre.push(needs_pre.then_some(pre));
        }

        let mut h = w0_out.clone();
        let mut gates = Vec::with_capacity(u.rows());
        let mut probs_all = Vec::with_capacity(u.rows());
        let mut projs = kv.then(Vec::new);
        for t in 0..u.rows() {
            let scores = if kv {
                let proj = self.project_cached(routing.row(t))?;
                let tau = self.config.score_temperature;
                let s: Vec<f64> = self
                    .keys
                    .iter()
                    .map(|k| kv_score(&k.v, &proj.value, tau))
                    .collect();
                projs.as_mut().unwrap().push(proj);
                s
            } else {
                let router = self.mlp_router.as_ref().ok_or_else(|| {
                    AdaptorError::State(String::from("conventional mode without router weights"))
                })?;
                crate::numerics::vecmat(routing.row(t), router)?
            };
            let probs = softmax(&scores)?;
            let gate = self.gate_from_scores(scores)?;
            for &i in &gate.selected {
                let w = self.config.lambda * gate.weights[i];
                let h_row = h.row_mut(t);
                for (hv, &fv) in h_row.iter_mut().zip(expert_outs[i].row(t)) {
                    *hv += w * fv;
                }
            }
            gates.push(gate);
            probs_all.push(probs);
        }
        Ok(TokenForward {
            gates,
            probs: probs_all,
            projs,
            expert_outs,
            expert_pre,
            h,
        })
    }

    /// Backward of `forward_tokens`. Returns the auxiliary balancing loss
    /// value (conventional mode with a nonzero coefficient; 0 otherwise);
    /// its gradient is already folded into the router gradient.
    pub fn backward_tokens(
        &self,
        fwd: &TokenForward,
        routing: &Matrix,
        u: &Matrix,
        dh: &Matrix,
        grads: &mut AdaptorGrads,
    ) -> Result<f64, AdaptorError> {
        let lambda = self.config.lambda;
        let n = self.experts.len();
        let t_len = u.rows();
        let kv = self.config.router_mode == RouterMode::KvTokenLevel;

        // Auxiliary load-balancing loss: dispatch fraction times mean
        // routing probability, summed over experts.
        let mut aux_loss = 0.0;
        let mut aux_dp = vec![0.0; n];
        if !kv && self.config.aux_balance_coeff > 0.0 {
            let coeff = self.config.aux_balance_coeff;
            let mut dispatch = vec![0.0; n];
            let mut mean_p = vec![0.0; n];
            for t in 0..t_len {
                dispatch[fwd.gates[t].argmax()] += 1.0 / t_len as f64;
                for (acc, &p) in mean_p.iter_mut().zip(&fwd.probs[t]) {
                    *acc += p / t_len as f64;
                }
            }
            for i in 0..n {
                aux_loss += coeff * n as f64 * dispatch[i] * mean_p[i];
                aux_dp[i] = coeff * n as f64 * dispatch[i] / t_len as f64;
            }
        }

        let mut dfs: Vec<Option<Matrix>> = (0..n)
            .map(|i| {
                fwd.expert_pre[i]
                    .is_some()
                    .then(|| Matrix::zeros(t_len, self.d_model))
            })
            .collect();
        let mut drouter_scores = Matrix::zeros(t_len, n);
        for t in 0..t_len {
            let gate = &fwd.gates[t];
            let mut dgate = vec![0.0; n];
            for &i in &gate.selected {
                dgate[i] = lambda * dot(dh.row(t), fwd.expert_outs[i].row(t));
                if let Some(df) = &mut dfs[i] {
                    let w = lambda * gate.weights[i];
                    for (dv, &hv) in df.row_mut(t).iter_mut().zip(dh.row(t)) {
                        *dv = w * hv;
                    }
                }
            }
            let mut dscores = self.gate_backward(gate, &fwd.probs[t], &dgate);
            if !kv && self.config.aux_balance_coeff > 0.0 {
                let mut inner = 0.0;
                for (d, &p) in aux_dp.iter().zip(&fwd.probs[t]) {
                    inner += d * p;
                }
                for i in 0..n {
                    dscores[i] += fwd.probs[t][i] * (aux_dp[i] - inner);
                }
            }
            if kv {
                let projs = fwd.projs.as_ref().unwrap();
                let tau = self.config.score_temperature;
                let trainable = self.trainable_index().ok_or_else(|| {
                    AdaptorError::State(String::from("backward with no trainable expert"))
                })?;
                let mut dv = vec![0.0; self.d_model];
                for (i, (key, &ds)) in self.keys.iter().zip(&dscores).enumerate() {
                    if ds != 0.0 {
                        let dk = if i == trainable {
                            grads.keys[trainable].as_deref_mut()
                        } else {
                            None
                        };
                        kv_score_backward(&key.v, &projs[t].value, tau, ds, dk, &mut dv);
                    }
                }
                self.project_backward(&projs[t], &dv, grads);
            } else {
                drouter_scores.row_mut(t).copy_from_slice(&dscores);
            }
        }
        if !kv {
            if let Some(gr) = &mut grads.router {
                gr.add_scaled(&routing.matmul_transpose_a(&drouter_scores)?, 1.0)?;
            }
        }

        for i in 0..n {
            let (Some(df), Some(pre)) = (&dfs[i], &fwd.expert_pre[i]) else {
                continue;
            };
            expert_backward(
                pre,
                &self.experts[i].w_out,
                u,
                df,
                grads.expert_w_in[i].as_mut(),
                grads.expert_w_out[i].as_mut(),
            )?;
        }
        Ok(aux_loss)
    }
}

impl AdaptorState {
    /// Auxiliary balancing loss value for a cached token forward
    /// (conventional mode; 0 when disabled). Mirrors the quantity whose
    /// gradient `backward_tokens` folds into the router.
    pub fn token_aux_loss(&self, fwd: &TokenForward) -> f64 {
        if self.config.router_mode == RouterMode::KvTokenLevel
            || self.config.aux_balance_coeff <= 0.0
        {
            return 0.0;
        }
        let n = self.experts.len();
        let t_len = fwd.gates.len();
        let mut dispatch = vec![0.0; n];
        let mut mean_p = vec![0.0; n];
        for t in 0..t_len {
            dispatch[fwd.gates[t].argmax()] += 1.0 / t_len as f64;
            for (acc, &p) in mean_p.iter_mut().zip(&fwd.probs[t]) {
                *acc += p / t_len as f64;
            }
        }
        let mut aux = 0.0;
        for i in 0..n {
            aux += self.config.aux_balance_coeff * n as f64 * dispatch[i] * mean_p[i];
        }
        aux
    }
}

/// FFN backward for one expert given `dL/df` and the cached hidden
/// pre-activation.
fn expert_backward(
    pre: &Matrix,
    w_out: &Matrix,
    u: &Matrix,
    df: &Matrix,
    gw_in: Option<&mut Matrix>,
    gw_out: Option<&mut Matrix>,
) -> Result<(), AdaptorError> {
    let mut s = pre.clone();
    for v in s.as_mut_slice() {
        *v *= sigmoid(*v);
    }
    if let Some(gw) = gw_out {
        gw.add_scaled(&s.matmul_transpose_a(df)?, 1.0)?;
    }
    let mut dpre = df.matmul_transpose_b(w_out)?;
    for (dv, &pv) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *dv *= silu_grad(pv);
    }
    if let Some(gw) = gw_in {
        gw.add_scaled(&u.matmul_transpose_a(&dpre)?, 1.0)?;
    }
    Ok(())
}

fn frob_dot(a: &Matrix, b: &Matrix) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        acc += x * y;
    }
    acc
}
