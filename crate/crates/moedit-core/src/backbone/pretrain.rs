use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::backward::ModelGrads;
use super::{BackboneError, BackboneModel};
use crate::numerics::{cross_entropy_grad, AdamW, AdamWParams, Rng};

/// Pretraining hyperparameters, tuned so the default corpus reaches the
/// held-in exact-match target; both knobs live in the run config.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PretrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> PretrainSpec {
        PretrainSpec {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<(usize, f64)>,
}

struct LayerOpt {
    ln1_gamma: AdamW,
    ln1_beta: AdamW,
    wq: AdamW,
    wk: AdamW,
    wv: AdamW,
    wo: AdamW,
    ln2_gamma: AdamW,
    ln2_beta: AdamW,
    ffn_in: AdamW,
    ffn_out: AdamW,
}

struct ModelOpt {
    embed: AdamW,
    pos: AdamW,
    layers: Vec<LayerOpt>,
    final_gamma: AdamW,
    final_beta: AdamW,
    lm_head: AdamW,
}

impl ModelOpt {
    fn new(model: &BackboneModel, params: AdamWParams) -> ModelOpt {
        let d = model.config.d_model;
        let f = model.config.d_ff;
        let layers = model
            .layers
            .iter()
            .map(|_| LayerOpt {
                ln1_gamma: AdamW::new(d, params),
                ln1_beta: AdamW::new(d, params),
                wq: AdamW::new(d * d, params),
                wk: AdamW::new(d * d, params),
                wv: AdamW::new(d * d, params),
                wo: AdamW::new(d * d, params),
                ln2_gamma: AdamW::new(d, params),
                ln2_beta: AdamW::new(d, params),
                ffn_in: AdamW::new(d * f, params),
                ffn_out: AdamW::new(f * d, params),
            })
            .collect();
        ModelOpt {
            embed: AdamW::new(model.config.vocab_size * d, params),
            pos: AdamW::new(model.config.max_seq_len * d, params),
            layers,
            final_gamma: AdamW::new(d, params),
            final_beta: AdamW::new(d, params),
            lm_head: AdamW::new(d * model.config.vocab_size, params),
        }
    }

    fn step(&mut self, model: &mut BackboneModel, grads: &ModelGrads) -> Result<(), BackboneError> {
        self.embed.update_matrix(&mut model.embed, &grads.embed)?;
        self.pos.update_matrix(&mut model.pos, &grads.pos)?;
        for ((layer, opt), g) in model
            .layers
            .iter_mut()
            .zip(&mut self.layers)
            .zip(&grads.layers)
        {
            opt.ln1_gamma
                .update_matrix(&mut layer.ln1.gamma, &g.ln1_gamma)?;
            opt.ln1_beta
                .update_matrix(&mut layer.ln1.beta, &g.ln1_beta)?;
            opt.wq.update_matrix(&mut layer.wq, &g.wq)?;
            opt.wk.update_matrix(&mut layer.wk, &g.wk)?;
            opt.wv.update_matrix(&mut layer.wv, &g.wv)?;
            opt.wo.update_matrix(&mut layer.wo, &g.wo)?;
            opt.ln2_gamma
                .update_matrix(&mut layer.ln2.gamma, &g.ln2_gamma)?;
            opt.ln2_beta
                .update_matrix(&mut layer.ln2.beta, &g.ln2_beta)?;
            opt.ffn_in.update_matrix(&mut layer.ffn_in, &g.ffn_in)?;
            opt.ffn_out.update_matrix(&mut layer.ffn_out, &g.ffn_out)?;
        }
        self.final_gamma
            .update_matrix(&mut model.final_norm.gamma, &grads.final_gamma)?;
        self.final_beta
            .update_matrix(&mut model.final_norm.beta, &grads.final_beta)?;
        self.lm_head
            .update_matrix(&mut model.lm_head, &grads.lm_head)?;
        Ok(())
    }
}

/// Next-token cross-entropy training over the corpus, then freeze.
///
/// Each corpus entry is a complete token sequence (bos ... eos). Batches
/// are drawn in seeded shuffled epochs; the whole run is bit-reproducible
/// from `spec.seed`.
pub fn pretrain(
    model: &mut BackboneModel,
    corpus: &[Vec<u32>],
    spec: &PretrainSpec,
) -> Result<PretrainReport, BackboneError> {
    if model.frozen() {
        return Err(BackboneError::State(String::from(
            "cannot pretrain a frozen model",
        )));
    }
    if spec.steps > 0 {
        if corpus.is_empty() {
            return Err(BackboneError::Argument(String::from(
                "empty pretraining corpus",
            )));
        }
        if spec.batch_size == 0 {
            return Err(BackboneError::Argument(String::from(
                "batch_size must be >= 1",
            )));
        }
        for (i, seq) in corpus.iter().enumerate() {
            if seq.len() < 2 {
                return Err(BackboneError::Argument(format!(
                    "corpus sequence {i} too short for next-token training"
                )));
            }
        }
    }

    let mut rng = Rng::new(spec.seed);
    let mut grads = ModelGrads::zeros_like(model);
    let mut opt = ModelOpt::new(model, AdamWParams::with_lr(spec.lr));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut loss_curve = Vec::new();
    let mut last_loss = f64::NAN;

    for step in 0..spec.steps {
        grads.zero();
        let mut batch_loss = 0.0;
        for _ in 0..spec.batch_size {
            if cursor >= order.len() {
                order = (0..corpus.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            let input = &seq[..seq.len() - 1];
            let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
            let (logits, trace) = model.forward_train(input)?;
            let (loss, mut dlogits) = cross_entropy_grad(&logits, &targets)?;
            batch_loss += loss;
            // Mean over the batch: each sequence contributes its
            // per-position mean, scaled by 1/batch.
            for v in dlogits.as_mut_slice() {
                *v /= spec.batch_size as f64;
            }
            model.backward_full(&trace, &dlogits, &mut grads)?;
        }
        batch_loss /= spec.batch_size as f64;
        last_loss = batch_loss;
        if step % 50 == 0 || step + 1 == spec.steps {
            loss_curve.push((step, batch_loss));
        }
        opt.step(model, &grads)?;
    }

    model.freeze();
    Ok(PretrainReport {
        steps_run: spec.steps,
        final_loss: last_loss,
        loss_curve,
    })
}
