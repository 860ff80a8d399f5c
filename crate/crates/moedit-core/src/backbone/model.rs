use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::BackboneError;
use crate::numerics::{checksum_f64s, Matrix, Rng};

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_SIGMA: f64 = 0.02;

/// Architecture of the toy decoder-only backbone.
///
/// `host_layer` names the block whose FFN sublayer the editing adaptor
/// bypasses; the default sits a little past mid-depth.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub host_layer: usize,
}

impl BackboneConfig {
    pub fn with_vocab(vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 64,
            host_layer: 2,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(BackboneError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.host_layer >= self.n_layers {
            return Err(BackboneError::Config(format!(
                "host_layer {} out of range for {} layers",
                self.host_layer, self.n_layers
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(BackboneError::Config(String::from(
                "vocab_size and max_seq_len must be positive",
            )));
        }
        Ok(())
    }
}

/// Layer-norm parameters, stored as 1 x d matrices so the optimizer
/// treats every tensor uniformly.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Norm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl Norm {
    fn identity(d: usize) -> Norm {
        let mut gamma = Matrix::zeros(1, d);
        gamma.fill(1.0);
        Norm {
            gamma,
            beta: Matrix::zeros(1, d),
        }
    }
}

/// One pre-norm transformer block: attention then FFN, both residual.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layer {
    pub ln1: Norm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: Norm,
    pub ffn_in: Matrix,  // d x d_ff
    pub ffn_out: Matrix, // d_ff x d
}

/// Borrowed view of one FFN sublayer's weights (the frozen original path
/// the adaptor always adds to its expert mixture).
#[derive(Clone, Copy)]
pub struct FfnRef<'a> {
    pub w_in: &'a Matrix,
    pub w_out: &'a Matrix,
}

/// Apply a two-matrix silu FFN to row-activations: `silu(x * w_in) * w_out`.
pub fn ffn_forward(w: FfnRef<'_>, x: &Matrix) -> Result<Matrix, BackboneError> {
    let z = x.matmul(w.w_in)?;
    let mut sz = z;
    for v in sz.as_mut_slice() {
        *v *= crate::numerics::sigmoid(*v);
    }
    Ok(sz.matmul(w.w_out)?)
}

/// The tiny frozen decoder-only language model.
///
/// Learned token and position embeddings, `n_layers` pre-norm blocks,
/// a final norm, and an untied LM head. After `freeze()` the parameter
/// bytes never change again; `checksum()` lets callers verify that.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub embed: Matrix, // vocab x d
    pub pos: Matrix,   // max_seq_len x d
    pub layers: Vec<Layer>,
    pub final_norm: Norm,
    pub lm_head: Matrix, // d x vocab
    frozen: bool,
}

/// Result of an inference forward pass.
pub struct ForwardPass {
    pub logits: Matrix,
    /// The host layer's FFN-sublayer input (what a hook receives).
    pub host_input: Matrix,
}

/// Frozen-path activations of the host layer for one sequence. Everything
/// below the adaptor bypass is constant during editing, so this is
/// computed once per record and reused for every training step.
#[derive(Debug, Clone)]
pub struct LowerState {
    /// Post-attention residual stream at the host layer.
    pub x1: Matrix,
    /// Normed FFN input at the host layer (the bypass sees this).
    pub u: Matrix,
}

impl BackboneModel {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<BackboneModel, BackboneError> {
        config.validate()?;
        let d = config.d_model;
        let gauss = |rows: usize, cols: usize, rng: &mut Rng| {
            Matrix::from_fn(rows, cols, |_, _| rng.gauss() * INIT_SIGMA)
        };
        let embed = gauss(config.vocab_size, d, rng);
        let pos = gauss(config.max_seq_len, d, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1: Norm::identity(d),
                wq: gauss(d, d, rng),
                wk: gauss(d, d, rng),
                wv: gauss(d, d, rng),
                wo: gauss(d, d, rng),
                ln2: Norm::identity(d),
                ffn_in: gauss(d, config.d_ff, rng),
                ffn_out: gauss(config.d_ff, d, rng),
            });
        }
        let final_norm = Norm::identity(d);
        let lm_head = gauss(d, config.vocab_size, rng);
        Ok(BackboneModel {
            config,
            embed,
            pos,
            layers,
            final_norm,
            lm_head,
            frozen: false,
        })
    }

    /// Reassemble a model from checkpointed tensors. Shapes are
    /// validated against the config.
    pub fn from_parts(
        config: BackboneConfig,
        embed: Matrix,
        pos: Matrix,
        layers: Vec<Layer>,
        final_norm: Norm,
        lm_head: Matrix,
        frozen: bool,
    ) -> Result<BackboneModel, BackboneError> {
        config.validate()?;
        let d = config.d_model;
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| {
            if m.rows() != rows || m.cols() != cols {
                return Err(BackboneError::Config(format!(
                    "tensor {name}: expected {rows}x{cols}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        check("embed", &embed, config.vocab_size, d)?;
        check("pos", &pos, config.max_seq_len, d)?;
        if layers.len() != config.n_layers {
            return Err(BackboneError::Config(format!(
                "expected {} layers, got {}",
                config.n_layers,
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            check(&format!("layer{i}.wq"), &l.wq, d, d)?;
            check(&format!("layer{i}.wk"), &l.wk, d, d)?;
            check(&format!("layer{i}.wv"), &l.wv, d, d)?;
            check(&format!("layer{i}.wo"), &l.wo, d, d)?;
            check(&format!("layer{i}.ffn_in"), &l.ffn_in, d, config.d_ff)?;
            check(&format!("layer{i}.ffn_out"), &l.ffn_out, config.d_ff, d)?;
            check(&format!("layer{i}.ln1.gamma"), &l.ln1.gamma, 1, d)?;
            check(&format!("layer{i}.ln2.gamma"), &l.ln2.gamma, 1, d)?;
        }
        check("final_norm.gamma", &final_norm.gamma, 1, d)?;
        check("lm_head", &lm_head, d, config.vocab_size)?;
        Ok(BackboneModel {
            config,
            embed,
            pos,
            layers,
            final_norm,
            lm_head,
            frozen,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze all parameters for the remainder of the process.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Move the adaptor host to a different block. This changes routing
    /// configuration only, never parameter bytes, so it is permitted on
    /// frozen models (the layer-sweep study relies on it).
    pub fn set_host_layer(&mut self, host_layer: usize) -> Result<(), BackboneError> {
        if host_layer >= self.config.n_layers {
            return Err(BackboneError::Config(format!(
                "host_layer {} out of range for {} layers",
                host_layer, self.config.n_layers
            )));
        }
        self.config.host_layer = host_layer;
        Ok(())
    }

    pub fn host_ffn(&self) -> FfnRef<'_> {
        let l = &self.layers[self.config.host_layer];
        FfnRef {
            w_in: &l.ffn_in,
            w_out: &l.ffn_out,
        }
    }

    /// Checksum over every parameter tensor's bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        let mut mix = |m: &Matrix| {
            acc = acc.rotate_left(1) ^ m.checksum();
        };
        mix(&self.embed);
        mix(&self.pos);
        for l in &self.layers {
            mix(&l.ln1.gamma);
            mix(&l.ln1.beta);
            mix(&l.wq);
            mix(&l.wk);
            mix(&l.wv);
            mix(&l.wo);
            mix(&l.ln2.gamma);
            mix(&l.ln2.beta);
            mix(&l.ffn_in);
            mix(&l.ffn_out);
        }
        mix(&self.final_norm.gamma);
        mix(&self.final_norm.beta);
        mix(&self.lm_head);
        acc
    }

    pub(super) fn check_ids(&self, ids: &[u32]) -> Result<(), BackboneError> {
        if ids.is_empty() {
            return Err(BackboneError::Argument(String::from(
                "empty token sequence",
            )));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(BackboneError::Argument(format!(
                "sequence length {} exceeds max {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(BackboneError::Argument(format!(
                    "token id {id} out of vocab {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Token + position embeddings for a sequence.
    fn input_embeddings(&self, ids: &[u32]) -> Matrix {
        let d = self.config.d_model;
        Matrix::from_fn(ids.len(), d, |t, c| {
            self.embed.get(ids[t] as usize, c) + self.pos.get(t, c)
        })
    }

    /// Mean over token positions of the token-embedding rows.
    ///
    /// Deliberately excludes position embeddings so the result is
    /// order-invariant; this is the instance-level vector used for
    /// routing and for order planning.
    pub fn embed_instance(&self, ids: &[u32]) -> Result<Vec<f64>, BackboneError> {
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let mut e = vec![0.0; d];
        for &id in ids {
            for (acc, &v) in e.iter_mut().zip(self.embed.row(id as usize)) {
                *acc += v;
            }
        }
        let n = ids.len() as f64;
        for v in &mut e {
            *v /= n;
        }
        Ok(e)
    }

    /// Run layers `0..=host_layer`'s attention sublayer, producing the
    /// frozen activations the adaptor bypass consumes.
    pub fn forward_lower(&self, ids: &[u32]) -> Result<LowerState, BackboneError> {
        self.check_ids(ids)?;
        let host = self.config.host_layer;
        let mut x = self.input_embeddings(ids);
        for layer in &self.layers[..host] {
            let x1 = attention_sublayer(self, layer, &x)?;
            let u = layer_norm(&layer.ln2, &x1).0;
            let f = ffn_forward(
                FfnRef {
                    w_in: &layer.ffn_in,
                    w_out: &layer.ffn_out,
                },
                &u,
            )?;
            let mut x_next = x1;
            x_next.add_scaled(&f, 1.0)?;
            x = x_next;
        }
        let layer = &self.layers[host];
        let x1 = attention_sublayer(self, layer, &x)?;
        let u = layer_norm(&layer.ln2, &x1).0;
        Ok(LowerState { x1, u })
    }

    /// Complete a forward pass from the host layer's FFN output `h`:
    /// `x2 = x1 + h`, then the remaining blocks, final norm, LM head.
    /// With `train` set, returns the trace `backward_to_host` needs.
    pub fn forward_upper(
        &self,
        lower: &LowerState,
        h: &Matrix,
        train: bool,
    ) -> Result<(Matrix, Option<super::UpperTrace>), BackboneError> {
        let host = self.config.host_layer;
        let mut x2 = lower.x1.clone();
        x2.add_scaled(h, 1.0)?;
        if train {
            let (logits, trace) = super::backward::upper_forward_traced(self, host, x2)?;
            Ok((logits, Some(trace)))
        } else {
            let mut x = x2;
            for layer in &self.layers[host + 1..] {
                let x1 = attention_sublayer(self, layer, &x)?;
                let u = layer_norm(&layer.ln2, &x1).0;
                let f = ffn_forward(
                    FfnRef {
                        w_in: &layer.ffn_in,
                        w_out: &layer.ffn_out,
                    },
                    &u,
                )?;
                let mut x_next = x1;
                x_next.add_scaled(&f, 1.0)?;
                x = x_next;
            }
            let xn = layer_norm(&self.final_norm, &x).0;
            let logits = xn.matmul(&self.lm_head)?;
            Ok((logits, None))
        }
    }

    /// Causal decoder forward. `hook`, when given, replaces the host
    /// layer's FFN sublayer output (receiving its normed input); the
    /// hook is expected to include the original `W_0` path itself.
    pub fn forward(
        &self,
        ids: &[u32],
        hook: Option<&mut dyn FnMut(&Matrix) -> Result<Matrix, BackboneError>>,
    ) -> Result<ForwardPass, BackboneError> {
        let lower = self.forward_lower(ids)?;
        let h = match hook {
            Some(f) => f(&lower.u)?,
            None => ffn_forward(self.host_ffn(), &lower.u)?,
        };
        if h.rows() != lower.u.rows() || h.cols() != lower.u.cols() {
            return Err(BackboneError::Argument(format!(
                "hook output {}x{} does not match host activations {}x{}",
                h.rows(),
                h.cols(),
                lower.u.rows(),
                lower.u.cols()
            )));
        }
        let (logits, _) = self.forward_upper(&lower, &h, false)?;
        Ok(ForwardPass {
            logits,
            host_input: lower.u,
        })
    }
}

/// `x1 = x + Wo(attention(LN1(x)))` for one block. Shared by the plain
/// forward and the traced forward so both are bit-identical.
pub(crate) fn attention_sublayer(
    model: &BackboneModel,
    layer: &Layer,
    x: &Matrix,
) -> Result<Matrix, BackboneError> {
    let (a, _, _) = layer_norm_cached(&layer.ln1, x);
    let att = attention_forward(model, layer, &a)?.0;
    let mut x1 = x.clone();
    x1.add_scaled(&att, 1.0)?;
    Ok(x1)
}

/// Multi-head causal self-attention over pre-normed activations `a`.
/// Returns the post-`Wo` output plus the tensors backward needs.
pub(crate) fn attention_forward(
    model: &BackboneModel,
    layer: &Layer,
    a: &Matrix,
) -> Result<(Matrix, AttentionCache), BackboneError> {
    let t_len = a.rows();
    let d = model.config.d_model;
    let heads = model.config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / crate::math::sqrt(dh as f64);

    let q = a.matmul(&layer.wq)?;
    let k = a.matmul(&layer.wk)?;
    let v = a.matmul(&layer.wv)?;

    let mut o = Matrix::zeros(t_len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * dh;
        let mut p = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let qi = &q.row(i)[c0..c0 + dh];
            let row = p.row_mut(i);
            for j in 0..=i {
                let kj = &k.row(j)[c0..c0 + dh];
                row[j] = crate::numerics::dot(qi, kj) * scale;
            }
            crate::numerics::softmax_row_in_place(&mut row[..=i]);
        }
        for i in 0..t_len {
            let p_row = p.row(i);
            for j in 0..=i {
                let w = p_row[j];
                let vj = &v.row(j)[c0..c0 + dh];
                let oi = &mut o.row_mut(i)[c0..c0 + dh];
                for (ov, &vv) in oi.iter_mut().zip(vj) {
                    *ov += w * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = o.matmul(&layer.wo)?;
    Ok((out, AttentionCache { q, k, v, probs, o }))
}

/// Activations attention backward needs.
pub(crate) struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub o: Matrix,
}

/// Layer norm over feature rows; returns output only.
pub(crate) fn layer_norm(norm: &Norm, x: &Matrix) -> (Matrix,) {
    (layer_norm_cached(norm, x).0,)
}

/// Layer norm returning output, normalized activations, and inverse
/// standard deviations (the backward-pass cache).
pub(crate) fn layer_norm_cached(norm: &Norm, x: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let rows = x.rows();
    let d = x.cols();
    let gamma = norm.gamma.row(0);
    let beta = norm.beta.row(0);
    let mut out = Matrix::zeros(rows, d);
    let mut xhat = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let inv = 1.0 / crate::math::sqrt(var + LN_EPS);
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for c in 0..d {
            let n = (row[c] - mean) * inv;
            xh[c] = n;
            o[c] = gamma[c] * n + beta[c];
        }
    }
    (out, xhat, inv_std)
}

/// Checksum of a set of tensors in a fixed order (helper for adaptor and
/// session state).
pub fn checksum_tensors<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    for t in tensors {
        acc = acc.rotate_left(1) ^ checksum_f64s(t);
    }
    acc
}
