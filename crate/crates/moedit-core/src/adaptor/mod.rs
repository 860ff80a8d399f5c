//! The bypass mixture-of-experts adaptor.
//!
//! Ordered expert FFNs sit in parallel with the host layer's frozen FFN.
//! In the default routing mode every expert carries a key vector; an
//! input instance is mean-pooled to an embedding, projected through a
//! shared down/up sub-network into a value, and key-value scores drive a
//! top-k softmax gate. One expert is inserted per edit batch and all
//! previous experts and keys freeze, so earlier edits cannot be
//! overwritten. Ablation modes: a conventional MLP router over token
//! activations (all experts trainable) and token-level KV routing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{checksum_tensors, ffn_forward, FfnRef};
use crate::numerics::{matvec, sigmoid, softmax, Matrix, NumericsError, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RouterMode {
    /// Instance-level key/value anchor routing (the default).
    KvAnchor,
    /// Single linear layer over the token activation, token-level gates,
    /// all experts trainable throughout; the baseline adaptor.
    ConventionalMlp,
    /// KV anchor scoring applied per token embedding instead of the
    /// mean-pooled instance embedding.
    KvTokenLevel,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AdaptorConfig {
    /// Hidden width of each expert FFN.
    pub d_expert: usize,
    /// Width of the projection bottleneck (d_model / 4 by default).
    pub d_proj: usize,
    /// Weight of the expert mixture against the frozen path.
    pub lambda: f64,
    pub top_k: usize,
    pub router_mode: RouterMode,
    /// Softmax temperature on the normalized key-value scores. Routing
    /// scores are cosine similarities divided by this value: raw dot
    /// products scale with corpus-dependent embedding norms, which
    /// either saturates the gate softmax or collapses it to uniform and
    /// lets long-trained keys crowd out fresh anchors; normalizing keeps
    /// the gate trainable at any scale.
    pub score_temperature: f64,
    /// Renormalize the retained top-k softmax weights to sum to 1.
    /// Off by default: the retained weight is the raw softmax value.
    pub renormalize_gate: bool,
    /// Expert count for the conventional baseline.
    pub n_fixed_experts: usize,
    /// Load-balancing auxiliary loss coefficient (conventional mode only;
    /// 0 disables).
    pub aux_balance_coeff: f64,
    pub expert_init_sigma: f64,
    pub key_noise_sigma: f64,
}

impl AdaptorConfig {
    pub fn for_d_model(d_model: usize) -> AdaptorConfig {
        AdaptorConfig {
            d_expert: 256,
            d_proj: (d_model / 4).max(1),
            lambda: 1.0,
            top_k: 1,
            router_mode: RouterMode::KvAnchor,
            score_temperature: 0.125,
            renormalize_gate: false,
            n_fixed_experts: 4,
            aux_balance_coeff: 0.01,
            expert_init_sigma: 0.02,
            key_noise_sigma: 0.01,
        }
    }
}

/// Errors from the adaptor.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdaptorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
}

/// One expert: a two-matrix silu FFN shaped like the host FFN bypass.
/// `w_out` starts at zero so a freshly inserted expert leaves the model's
/// behavior untouched.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertFfn {
    pub w_in: Matrix,  // d_model x d_expert
    pub w_out: Matrix, // d_expert x d_model
    pub frozen: bool,
}

impl ExpertFfn {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, AdaptorError> {
        ffn_forward(
            FfnRef {
                w_in: &self.w_in,
                w_out: &self.w_out,
            },
            x,
        )
        .map_err(|e| AdaptorError::Argument(format!("expert forward: {e}")))
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors([self.w_in.as_slice(), self.w_out.as_slice()])
    }
}

/// Routing key allocated to one expert.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeyVector {
    pub v: Vec<f64>,
    pub frozen: bool,
}

/// Gate output for one routing decision: raw scores, softmax weights
/// masked to the selected set (no renormalization unless configured),
/// and the selected expert indices in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

impl GateDecision {
    /// Expert with the highest score (ties already broken to the lowest
    /// index during selection).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.scores.len() {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// The adaptor: ordered experts and keys, the shared value projection,
/// and (in conventional mode) the MLP router.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptorState {
    pub config: AdaptorConfig,
    pub d_model: usize,
    pub experts: Vec<ExpertFfn>,
    /// One key per expert in KV modes; empty in conventional mode.
    pub keys: Vec<KeyVector>,
    pub w_down: Matrix, // d_proj x d_model
    pub w_up: Matrix,   // d_model x d_proj
    /// d_model x n_experts, present only in conventional mode.
    pub mlp_router: Option<Matrix>,
}

impl AdaptorState {
    /// Empty adaptor for the lifelong / batch KV modes. Experts arrive
    /// via `add_expert`.
    pub fn new(
        d_model: usize,
        config: AdaptorConfig,
        rng: &mut Rng,
    ) -> Result<AdaptorState, AdaptorError> {
        validate_config(d_model, &config)?;
        // The projection must produce values of useful magnitude from the
        // start (keys are anchored to projected batch means), so it gets
        // 1/sqrt(fan_in) init rather than the experts' small sigma.
        let sd = 1.0 / crate::math::sqrt(d_model as f64);
        let su = 1.0 / crate::math::sqrt(config.d_proj as f64);
        let w_down = Matrix::from_fn(config.d_proj, d_model, |_, _| rng.gauss() * sd);
        let w_up = Matrix::from_fn(d_model, config.d_proj, |_, _| rng.gauss() * su);
        Ok(AdaptorState {
            config,
            d_model,
            experts: Vec::new(),
            keys: Vec::new(),
            w_down,
            w_up,
            mlp_router: None,
        })
    }

    /// Conventional baseline: a fixed set of trainable experts and a
    /// linear router, no keys, no insertion.
    pub fn new_conventional(
        d_model: usize,
        mut config: AdaptorConfig,
        rng: &mut Rng,
    ) -> Result<AdaptorState, AdaptorError> {
        config.router_mode = RouterMode::ConventionalMlp;
        let mut state = AdaptorState::new(d_model, config, rng)?;
        let n = state.config.n_fixed_experts;
        if n == 0 {
            return Err(AdaptorError::Argument(String::from(
                "conventional mode needs at least one expert",
            )));
        }
        for _ in 0..n {
            state.experts.push(new_expert(
                d_model,
                state.config.d_expert,
                state.config.expert_init_sigma,
                rng,
            ));
        }
        state.mlp_router = Some(Matrix::from_fn(d_model, n, |_, _| rng.gauss() * 0.02));
        Ok(state)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Index of the single trainable expert in KV modes.
    pub fn trainable_index(&self) -> Option<usize> {
        self.experts.iter().rposition(|e| !e.frozen)
    }

    /// Freeze everything trained so far and append a fresh trainable
    /// expert plus its key. The key is anchored at the projected value of
    /// the incoming batch's mean embedding plus small seeded noise, so
    /// routing separates batches from step 0.
    pub fn add_expert(
        &mut self,
        mean_embedding: &[f64],
        rng: &mut Rng,
    ) -> Result<(), AdaptorError> {
        if self.config.router_mode == RouterMode::ConventionalMlp {
            return Err(AdaptorError::State(String::from(
                "conventional mode has a fixed expert set",
            )));
        }
        if mean_embedding.len() != self.d_model {
            return Err(AdaptorError::Argument(format!(
                "mean embedding length {} != d_model {}",
                mean_embedding.len(),
                self.d_model
            )));
        }
        for e in &mut self.experts {
            e.frozen = true;
        }
        for k in &mut self.keys {
            k.frozen = true;
        }
        self.experts.push(new_expert(
            self.d_model,
            self.config.d_expert,
            self.config.expert_init_sigma,
            rng,
        ));
        let mut key = self.project_value(mean_embedding)?;
        // noise is relative to the anchor norm so the perturbation is a
        // small rotation regardless of corpus embedding scale
        let norm = crate::math::sqrt(key.iter().map(|x| x * x).sum::<f64>());
        let scale = self.config.key_noise_sigma * if norm > 0.0 { norm } else { 1.0 };
        for v in &mut key {
            *v += rng.gauss() * scale;
        }
        self.keys.push(KeyVector {
            v: key,
            frozen: false,
        });
        Ok(())
    }

    /// `v = W_up * silu(W_down * e)`.
    pub fn project_value(&self, e: &[f64]) -> Result<Vec<f64>, AdaptorError> {
        let down = matvec(&self.w_down, e)?;
        let silu_down: Vec<f64> = down.iter().map(|&x| x * sigmoid(x)).collect();
        Ok(matvec(&self.w_up, &silu_down)?)
    }

    /// Route one input vector to a gate decision.
    ///
    /// KV modes score every key against the projected value of the input
    /// (the instance embedding, or a single token embedding in the
    /// token-level ablation); conventional mode applies the linear router
    /// to the token activation. Ties select the lowest expert index.
    pub fn route(&self, input: &[f64]) -> Result<GateDecision, AdaptorError> {
        if self.experts.is_empty() {
            return Err(AdaptorError::State(String::from("routing with no experts")));
        }
        let scores = self.gate_scores(input)?;
        self.gate_from_scores(scores)
    }

    fn gate_scores(&self, input: &[f64]) -> Result<Vec<f64>, AdaptorError> {
        match self.config.router_mode {
            RouterMode::KvAnchor | RouterMode::KvTokenLevel => {
                let v = self.project_value(input)?;
                let tau = self.config.score_temperature;
                Ok(self.keys.iter().map(|k| kv_score(&k.v, &v, tau)).collect())
            }
            RouterMode::ConventionalMlp => {
                let router = self.mlp_router.as_ref().ok_or_else(|| {
                    AdaptorError::State(String::from("conventional mode without router weights"))
                })?;
                Ok(crate::numerics::vecmat(input, router)?)
            }
        }
    }

    fn gate_from_scores(&self, scores: Vec<f64>) -> Result<GateDecision, AdaptorError> {
        let n = scores.len();
        let k = self.config.top_k.min(n);
        let probs = softmax(&scores)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
            Some(o) => o.then(a.cmp(&b)),
            None => a.cmp(&b),
        });
        let mut selected: Vec<usize> = order[..k].to_vec();
        selected.sort_unstable();
        let mut weights = vec![0.0; n];
        for &i in &selected {
            weights[i] = probs[i];
        }
        if self.config.renormalize_gate {
            let z: f64 = selected.iter().map(|&i| probs[i]).sum();
            for &i in &selected {
                weights[i] /= z;
            }
        }
        Ok(GateDecision {
            scores,
            weights,
            selected,
        })
    }

    /// Output for one token: `h = W_0 x + lambda * sum_i g_i f_i(x)`.
    /// The same instance-level gate applies to every token of an
    /// instance; callers pass it per token.
    pub fn adaptor_output(
        &self,
        gate: &GateDecision,
        x: &[f64],
        w0: FfnRef<'_>,
    ) -> Result<Vec<f64>, AdaptorError> {
        if x.len() != self.d_model {
            return Err(AdaptorError::Argument(format!(
                "token activation length {} != d_model {}",
                x.len(),
                self.d_model
            )));
        }
        if gate.weights.len() != self.experts.len() {
            return Err(AdaptorError::Argument(format!(
                "gate over {} experts applied to state with {}",
                gate.weights.len(),
                self.experts.len()
            )));
        }
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let mut h =
            ffn_forward(w0, &xm).map_err(|e| AdaptorError::Argument(format!("frozen ffn: {e}")))?;
        if self.config.lambda != 0.0 {
            for &i in &gate.selected {
                let f = self.experts[i].forward(&xm)?;
                h.add_scaled(&f, self.config.lambda * gate.weights[i])?;
            }
        }
        Ok(h.row(0).to_vec())
    }

    /// Adaptor output for a whole sequence at evaluation time (no
    /// caches). `token_inputs` carries the per-token routing inputs for
    /// the token-level KV mode; instance mode uses `instance_embedding`
    /// once and conventional mode routes on `u` itself.
    ///
    /// With no experts or `lambda = 0` this is exactly the frozen FFN
    /// path, bit for bit.
    pub fn apply(
        &self,
        instance_embedding: &[f64],
        token_inputs: &Matrix,
        u: &Matrix,
        w0: FfnRef<'_>,
    ) -> Result<Matrix, AdaptorError> {
        let mut h =
            ffn_forward(w0, u).map_err(|e| AdaptorError::Argument(format!("frozen ffn: {e}")))?;
        if self.experts.is_empty() || self.config.lambda == 0.0 {
            return Ok(h);
        }
        match self.config.router_mode {
            RouterMode::KvAnchor => {
                let gate = self.route(instance_embedding)?;
                for &i in &gate.selected {
                    let f = self.experts[i].forward(u)?;
                    h.add_scaled(&f, self.config.lambda * gate.weights[i])?;
                }
            }
            RouterMode::KvTokenLevel | RouterMode::ConventionalMlp => {
                let routing = if self.config.router_mode == RouterMode::KvTokenLevel {
                    token_inputs
                } else {
                    u
                };
                // Expert outputs are shared across tokens; gates vary.
                let outs: Vec<Matrix> = self
                    .experts
                    .iter()
                    .map(|e| e.forward(u))
                    .collect::<Result<_, _>>()?;
                for t in 0..u.rows() {
                    let gate = self.route(routing.row(t))?;
                    for &i in &gate.selected {
                        let w = self.config.lambda * gate.weights[i];
                        let h_row = h.row_mut(t);
                        for (hv, &fv) in h_row.iter_mut().zip(outs[i].row(t)) {
                            *hv += w * fv;
                        }
                    }
                }
            }
        }
        Ok(h)
    }

    /// Instance-level routing decision used by evaluation bookkeeping
    /// (consistency study). Token-level modes aggregate per-token gate
    /// weights over the sequence and argmax the sum.
    pub fn route_record(
        &self,
        instance_embedding: &[f64],
        token_inputs: &Matrix,
        u: &Matrix,
    ) -> Result<usize, AdaptorError> {
        match self.config.router_mode {
            RouterMode::KvAnchor => Ok(self.route(instance_embedding)?.argmax()),
            RouterMode::KvTokenLevel | RouterMode::ConventionalMlp => {
                let routing = if self.config.router_mode == RouterMode::KvTokenLevel {
                    token_inputs
                } else {
                    u
                };
                let mut totals = vec![0.0; self.experts.len()];
                for t in 0..routing.rows() {
                    let gate = self.route(routing.row(t))?;
                    for (acc, w) in totals.iter_mut().zip(&gate.weights) {
                        *acc += w;
                    }
                }
                let mut best = 0;
                for i in 1..totals.len() {
                    if totals[i] > totals[best] {
                        best = i;
                    }
                }
                Ok(best)
            }
        }
    }

    /// Checksum over all expert/key/projection/router tensors.
    pub fn checksum(&self) -> u64 {
        let mut parts: Vec<&[f64]> = Vec::new();
        for e in &self.experts {
            parts.push(e.w_in.as_slice());
            parts.push(e.w_out.as_slice());
        }
        for k in &self.keys {
            parts.push(&k.v);
        }
        parts.push(self.w_down.as_slice());
        parts.push(self.w_up.as_slice());
        if let Some(r) = &self.mlp_router {
            parts.push(r.as_slice());
        }
        checksum_tensors(parts)
    }

    pub fn expert_checksum(&self, i: usize) -> u64 {
        self.experts[i].checksum()
    }

    pub fn key_checksum(&self, i: usize) -> u64 {
        checksum_tensors([self.keys[i].v.as_slice()])
    }
}

fn validate_config(d_model: usize, config: &AdaptorConfig) -> Result<(), AdaptorError> {
    if d_model == 0 || config.d_expert == 0 || config.d_proj == 0 {
        return Err(AdaptorError::Argument(String::from(
            "adaptor dimensions must be positive",
        )));
    }
    if config.lambda < 0.0 {
        return Err(AdaptorError::Argument(format!(
            "lambda must be non-negative, got {}",
            config.lambda
        )));
    }
    if config.top_k == 0 {
        return Err(AdaptorError::Argument(String::from("top_k must be >= 1")));
    }
    if !(config.score_temperature > 0.0) {
        return Err(AdaptorError::Argument(format!(
            "score_temperature must be positive, got {}",
            config.score_temperature
        )));
    }
    Ok(())
}

/// Normalized key-value routing score: `cos(k, v) / tau`.
pub(crate) fn kv_score(k: &[f64], v: &[f64], tau: f64) -> f64 {
    let mut kk = 0.0;
    let mut vv = 0.0;
    let mut kv = 0.0;
    for (&a, &b) in k.iter().zip(v) {
        kk += a * a;
        vv += b * b;
        kv += a * b;
    }
    kv / (crate::math::sqrt(kk).max(1e-12) * crate::math::sqrt(vv).max(1e-12)) / tau
}

/// Backward of `kv_score`: `dk` receives the key gradient when given,
/// `dv` accumulates the value gradient.
pub(crate) fn kv_score_backward(
    k: &[f64],
    v: &[f64],
    tau: f64,
    dscore: f64,
    dk: Option<&mut [f64]>,
    dv: &mut [f64],
) {
    let mut kk = 0.0;
    let mut vv = 0.0;
    let mut kv = 0.0;
    for (&a, &b) in k.iter().zip(v) {
        kk += a * a;
        vv += b * b;
        kv += a * b;
    }
    let nk = crate::math::sqrt(kk).max(1e-12);
    let nv = crate::math::sqrt(vv).max(1e-12);
    let cos = kv / (nk * nv);
    let g = dscore / tau;
    if let Some(dk) = dk {
        for i in 0..k.len() {
            dk[i] += g * (v[i] / (nk * nv) - cos * k[i] / (nk * nk));
        }
    }
    for i in 0..v.len() {
        dv[i] += g * (k[i] / (nk * nv) - cos * v[i] / (nv * nv));
    }
}

fn new_expert(d_model: usize, d_expert: usize, sigma: f64, rng: &mut Rng) -> ExpertFfn {
    ExpertFfn {
        w_in: Matrix::from_fn(d_model, d_expert, |_, _| rng.gauss() * sigma),
        w_out: Matrix::zeros(d_expert, d_model),
        frozen: false,
    }
}

mod train;
pub use train::{AdaptorGrads, KvInstanceForward, TokenForward};
