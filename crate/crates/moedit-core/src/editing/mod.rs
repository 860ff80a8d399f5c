//! Lifelong and batch editing loops.
//!
//! An editing session pairs a frozen backbone with a growing adaptor and
//! the record set under edit. Each batch inserts one trainable expert
//! (KV modes), minimizes the target-token cross entropy over the batch
//! with AdamW, and freezes the expert afterwards; the model is never
//! rolled back between batches. The conventional baseline instead keeps
//! a fixed expert set and keeps everything trainable.
//!
//! All frozen activations below the adaptor bypass are computed once per
//! record per batch and reused every optimization step.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::adaptor::{AdaptorConfig, AdaptorError, AdaptorGrads, AdaptorState, RouterMode};
use crate::backbone::{BackboneError, BackboneModel, LowerState, Tokenizer, BOS, EOS};
use crate::numerics::{
    cross_entropy_grad, softmax, AdamW, AdamWParams, Matrix, NumericsError, Rng,
};
use crate::planner::EditPlan;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EditError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Adaptor(#[from] AdaptorError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
}

/// One editing instance. `locality_expected` is captured from the
/// pre-edit model when a session starts.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditRecord {
    pub edit_prompt: String,
    pub edit_target: String,
    pub paraphrase_prompt: String,
    pub locality_prompt: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub locality_expected: Vec<u32>,
}

/// One batch of record indices within a session.
#[derive(Debug, Clone)]
pub struct EditBatch {
    pub record_ids: Vec<usize>,
    pub batch_index: usize,
}

/// Editing-loop hyperparameters.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainSpec {
    pub lr: f64,
    pub max_steps_per_batch: usize,
    /// Check immediate reliability every this many steps and stop the
    /// batch once it reaches 1.0.
    pub early_stop_interval: usize,
    /// Learning-rate multiplier for the shared value projection.
    /// Retraining the projection every batch drags every record's value
    /// toward the newest key and destroys old routing at this scale, so
    /// the default anchors it after initialization; set to 1.0 for the
    /// fully trainable variant.
    pub proj_lr_scale: f64,
    /// Learning-rate multiplier for the current key vector. Keys start
    /// anchored at their batch's value centroid, which already routes
    /// correctly; a full-rate key can rotate itself out of its own
    /// basin late in a batch (gate collapse with no recovery gradient),
    /// so the key only fine-tunes.
    pub key_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> TrainSpec {
        TrainSpec {
            lr: 5e-4,
            max_steps_per_batch: 500,
            early_stop_interval: 25,
            proj_lr_scale: 0.0,
            key_lr_scale: 0.1,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EditMode {
    Lifelong,
    Batch,
    ConventionalLifelong,
}

/// Outcome of one `edit_batch` call.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub batch_index: usize,
    pub steps_run: usize,
    pub early_stopped: bool,
    /// Task loss per step (auxiliary balancing loss excluded).
    pub loss_curve: Vec<f64>,
    /// Teacher-forced reliability on this batch right after its edit.
    pub immediate_reliability: f64,
}

/// Cached per-record encodings, shared across the session.
struct RecordTokens {
    prompt: Vec<u32>,
    target: Vec<u32>,
    paraphrase: Vec<u32>,
    locality: Vec<u32>,
    /// Mean token embedding of the edit prompt (the routing input).
    instance: Vec<f64>,
}

/// A lifelong editing session: frozen backbone, adaptor, records, and
/// the training-time routing log.
pub struct EditingSession {
    pub backbone: Arc<BackboneModel>,
    pub tokenizer: Arc<Tokenizer>,
    pub adaptor: AdaptorState,
    pub mode: EditMode,
    pub records: Vec<EditRecord>,
    rec_tokens: Vec<RecordTokens>,
    /// Expert that processed each record when its batch was trained.
    pub route_log: Vec<Option<usize>>,
    pub batches_done: usize,
    backbone_checksum: u64,
    rng: Rng,
}

/// How many tokens the locality probe decodes greedily (object plus eos
/// headroom for the phrase-target variant).
pub const LOCALITY_DECODE_LEN: usize = 6;

pub fn start_session(
    backbone: Arc<BackboneModel>,
    tokenizer: Arc<Tokenizer>,
    mut records: Vec<EditRecord>,
    mode: EditMode,
    adaptor_config: AdaptorConfig,
    seed: u64,
) -> Result<EditingSession, EditError> {
    if !backbone.frozen() {
        return Err(EditError::State(String::from(
            "editing requires a frozen backbone",
        )));
    }
    if records.is_empty() {
        return Err(EditError::Argument(String::from("no records to edit")));
    }
    let mut rng = Rng::new(seed);
    let adaptor = match mode {
        EditMode::Lifelong | EditMode::Batch => {
            AdaptorState::new(backbone.config.d_model, adaptor_config, &mut rng)?
        }
        EditMode::ConventionalLifelong => {
            AdaptorState::new_conventional(backbone.config.d_model, adaptor_config, &mut rng)?
        }
    };

    let mut rec_tokens = Vec::with_capacity(records.len());
    for r in &records {
        let prompt = tokenizer.encode(&r.edit_prompt);
        if prompt.is_empty() {
            return Err(EditError::Argument(format!(
                "edit prompt encodes to nothing: {:?}",
                r.edit_prompt
            )));
        }
        let target = tokenizer.encode(&r.edit_target);
        if target.is_empty() {
            return Err(EditError::Argument(format!(
                "edit target encodes to nothing: {:?}",
                r.edit_target
            )));
        }
        let instance = backbone.embed_instance(&prompt)?;
        rec_tokens.push(RecordTokens {
            prompt,
            target,
            paraphrase: tokenizer.encode(&r.paraphrase_prompt),
            locality: tokenizer.encode(&r.locality_prompt),
            instance,
        });
    }

    let route_log = vec![None; records.len()];
    let backbone_checksum = backbone.checksum();
    let mut session = EditingSession {
        backbone,
        tokenizer,
        adaptor,
        mode,
        records: Vec::new(),
        rec_tokens,
        route_log,
        batches_done: 0,
        backbone_checksum,
        rng,
    };
    // Capture pre-edit locality outputs before any edit.
    for (i, r) in records.iter_mut().enumerate() {
        if r.locality_expected.is_empty() {
            r.locality_expected = session
                .greedy_decode_plain(&session.rec_tokens[i].locality, LOCALITY_DECODE_LEN)?;
        }
    }
    session.records = records;
    Ok(session)
}

impl EditingSession {
    /// Internal RNG state; checkpoint it to resume a session exactly.
    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    /// Rebuild a session from checkpointed parts. `records` must carry
    /// their pre-edit locality captures; `rng_state` continues the
    /// session's random stream where it left off.
    pub fn resume(
        backbone: Arc<BackboneModel>,
        tokenizer: Arc<Tokenizer>,
        records: Vec<EditRecord>,
        adaptor: AdaptorState,
        mode: EditMode,
        route_log: Vec<Option<usize>>,
        batches_done: usize,
        rng_state: u64,
    ) -> Result<EditingSession, EditError> {
        if !backbone.frozen() {
            return Err(EditError::State(String::from(
                "editing requires a frozen backbone",
            )));
        }
        if records.is_empty() {
            return Err(EditError::Argument(String::from("no records to edit")));
        }
        if route_log.len() != records.len() {
            return Err(EditError::Argument(format!(
                "route log length {} != record count {}",
                route_log.len(),
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            if r.locality_expected.is_empty() {
                return Err(EditError::State(format!(
                    "record {i} has no pre-edit locality capture"
                )));
            }
        }
        let mut rec_tokens = Vec::with_capacity(records.len());
        for r in &records {
            let prompt = tokenizer.encode(&r.edit_prompt);
            let target = tokenizer.encode(&r.edit_target);
            if prompt.is_empty() || target.is_empty() {
                return Err(EditError::Argument(format!(
                    "record fails to encode: {:?}",
                    r.edit_prompt
                )));
            }
            let instance = backbone.embed_instance(&prompt)?;
            rec_tokens.push(RecordTokens {
                prompt,
                target,
                paraphrase: tokenizer.encode(&r.paraphrase_prompt),
                locality: tokenizer.encode(&r.locality_prompt),
                instance,
            });
        }
        let backbone_checksum = backbone.checksum();
        Ok(EditingSession {
            backbone,
            tokenizer,
            adaptor,
            mode,
            records,
            rec_tokens,
            route_log,
            batches_done,
            backbone_checksum,
            rng: Rng::new(rng_state),
        })
    }

    pub fn backbone_intact(&self) -> bool {
        self.backbone.checksum() == self.backbone_checksum
    }

    pub fn n_experts(&self) -> usize {
        self.adaptor.n_experts()
    }

    fn tokens(&self, rid: usize) -> &RecordTokens {
        &self.rec_tokens[rid]
    }

    /// Token-embedding rows for a sequence (token-level routing input).
    fn token_embeddings(&self, ids: &[u32]) -> Matrix {
        let d = self.backbone.config.d_model;
        Matrix::from_fn(ids.len(), d, |t, c| {
            self.backbone.embed.get(ids[t] as usize, c)
        })
    }

    /// Forward through the backbone with the adaptor bypass installed at
    /// the host layer. Routing inputs derive from `routing_prompt`
    /// (instance mode) or the sequence's own token embeddings.
    pub fn hooked_logits(
        &self,
        input_ids: &[u32],
        routing_prompt: &[u32],
    ) -> Result<Matrix, EditError> {
        if self.adaptor.n_experts() == 0 || self.adaptor.config.lambda == 0.0 {
            return Ok(self.backbone.forward(input_ids, None)?.logits);
        }
        let e = self.backbone.embed_instance(routing_prompt)?;
        let lower = self.backbone.forward_lower(input_ids)?;
        let tok_emb = if self.adaptor.config.router_mode == RouterMode::KvTokenLevel {
            self.token_embeddings(input_ids)
        } else {
            Matrix::zeros(0, 0)
        };
        let h = self
            .adaptor
            .apply(&e, &tok_emb, &lower.u, self.backbone.host_ffn())?;
        let (logits, _) = self.backbone.forward_upper(&lower, &h, false)?;
        Ok(logits)
    }

    /// Greedy decode with the plain backbone (pre-edit view).
    fn greedy_decode_plain(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, EditError> {
        let mut ids = Vec::with_capacity(1 + prompt.len() + max_new);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.backbone.forward(&ids, None)?.logits;
            let next = argmax_row(logits.row(logits.rows() - 1));
            out.push(next);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    /// Greedy decode through the edited model.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, EditError> {
        let mut ids = Vec::with_capacity(1 + prompt.len() + max_new);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.hooked_logits(&ids, prompt)?;
            let next = argmax_row(logits.row(logits.rows() - 1));
            out.push(next);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced exact match: every target token must be the argmax
    /// at its position given the prompt and the preceding target tokens.
    pub fn teacher_forced_match(&self, prompt: &[u32], target: &[u32]) -> Result<bool, EditError> {
        if prompt.is_empty() || target.is_empty() {
            return Ok(false);
        }
        let ids = teacher_input(prompt, target);
        let logits = self.hooked_logits(&ids, prompt)?;
        let p = prompt.len();
        for (k, &t) in target.iter().enumerate() {
            if argmax_row(logits.row(p + k)) != t {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Mean per-token negative log likelihood of the target under
    /// teacher forcing.
    pub fn target_nll(&self, prompt: &[u32], target: &[u32]) -> Result<f64, EditError> {
        if prompt.is_empty() || target.is_empty() {
            return Err(EditError::Argument(String::from("empty prompt or target")));
        }
        let ids = teacher_input(prompt, target);
        let logits = self.hooked_logits(&ids, prompt)?;
        let p = prompt.len();
        let mut nll = 0.0;
        for (k, &t) in target.iter().enumerate() {
            let probs = softmax(logits.row(p + k))?;
            nll -= crate::math::ln(probs[t as usize].max(f64::MIN_POSITIVE));
        }
        Ok(nll / target.len() as f64)
    }

    /// Reliability flag for one record.
    pub fn edit_success(&self, rid: usize) -> Result<bool, EditError> {
        let t = self.tokens(rid);
        self.teacher_forced_match(&t.prompt, &t.target)
    }

    /// Generality flag: the paraphrase prompt must yield the edit target.
    pub fn paraphrase_success(&self, rid: usize) -> Result<bool, EditError> {
        let t = self.tokens(rid);
        self.teacher_forced_match(&t.paraphrase, &t.target)
    }

    /// Locality flag: greedy decode of the locality prompt matches the
    /// captured pre-edit decode exactly.
    pub fn locality_unchanged(&self, rid: usize) -> Result<bool, EditError> {
        let expected = &self.records[rid].locality_expected;
        if expected.is_empty() {
            return Err(EditError::State(format!(
                "record {rid} has no pre-edit locality capture"
            )));
        }
        let t = self.tokens(rid);
        let got = self.greedy_decode(&t.locality, LOCALITY_DECODE_LEN)?;
        Ok(&got == expected)
    }

    /// Mean NLL-based perplexity over records' edit targets.
    pub fn target_perplexity(&self, record_ids: &[usize]) -> Result<f64, EditError> {
        let mut total = 0.0;
        for &rid in record_ids {
            let t = self.tokens(rid);
            total += self.target_nll(&t.prompt, &t.target)?;
        }
        Ok(crate::math::exp(total / record_ids.len() as f64))
    }

    /// Inference-time routing decision for a record (argmax expert).
    pub fn inference_route(&self, rid: usize) -> Result<usize, EditError> {
        let t = self.tokens(rid);
        let mut input = Vec::with_capacity(1 + t.prompt.len());
        input.push(BOS);
        input.extend_from_slice(&t.prompt);
        let input = &input[..];
        match self.adaptor.config.router_mode {
            RouterMode::KvAnchor => Ok(self.adaptor.route(&t.instance)?.argmax()),
            RouterMode::KvTokenLevel => {
                let tok = self.token_embeddings(input);
                let lower = self.backbone.forward_lower(input)?;
                Ok(self.adaptor.route_record(&t.instance, &tok, &lower.u)?)
            }
            RouterMode::ConventionalMlp => {
                let lower = self.backbone.forward_lower(input)?;
                let tok = Matrix::zeros(0, 0);
                Ok(self.adaptor.route_record(&t.instance, &tok, &lower.u)?)
            }
        }
    }

    /// Edit one batch: insert an expert (KV modes), train to criterion or
    /// budget, freeze by construction at the next insertion, log routes.
    pub fn edit_batch(
        &mut self,
        batch: &EditBatch,
        spec: &TrainSpec,
    ) -> Result<BatchReport, EditError> {
        if batch.record_ids.is_empty() {
            return Err(EditError::Argument(String::from("empty edit batch")));
        }
        if spec.max_steps_per_batch == 0 {
            return Err(EditError::Argument(String::from(
                "max_steps_per_batch must be >= 1",
            )));
        }
        for &rid in &batch.record_ids {
            if rid >= self.records.len() {
                return Err(EditError::Argument(format!("record id {rid} out of range")));
            }
        }

        let kv_mode = self.mode != EditMode::ConventionalLifelong;
        if kv_mode {
            // Mean routing embedding of the incoming batch anchors the key.
            let d = self.backbone.config.d_model;
            let mut mean = vec![0.0; d];
            for &rid in &batch.record_ids {
                for (m, &v) in mean.iter_mut().zip(&self.rec_tokens[rid].instance) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= batch.record_ids.len() as f64;
            }
            self.adaptor.add_expert(&mean, &mut self.rng)?;
        }

        // Frozen activations per record, computed once.
        struct Prep {
            rid: usize,
            lower: LowerState,
            w0_out: Matrix,
            tok_emb: Option<Matrix>,
            span_start: usize,
            span_targets: Vec<usize>,
        }
        let mut preps = Vec::with_capacity(batch.record_ids.len());
        let mut total_positions = 0usize;
        for &rid in &batch.record_ids {
            let t = &self.rec_tokens[rid];
            // bos + prompt + target + eos, minus the final position
            let mut full = Vec::with_capacity(2 + t.prompt.len() + t.target.len());
            full.push(BOS);
            full.extend_from_slice(&t.prompt);
            full.extend_from_slice(&t.target);
            full.push(EOS);
            let input = &full[..full.len() - 1];
            // rows P .. P+T predict the target tokens then eos
            let span_start = t.prompt.len();
            let mut span_targets: Vec<usize> = t.target.iter().map(|&x| x as usize).collect();
            span_targets.push(EOS as usize);
            total_positions += span_targets.len();
            let lower = self.backbone.forward_lower(input)?;
            let w0_out = crate::backbone::ffn_forward(self.backbone.host_ffn(), &lower.u)?;
            let tok_emb = (self.adaptor.config.router_mode == RouterMode::KvTokenLevel)
                .then(|| self.token_embeddings(input));
            preps.push(Prep {
                rid,
                lower,
                w0_out,
                tok_emb,
                span_start,
                span_targets,
            });
        }

        let mut opt = BatchOptimizer::new(&self.adaptor, spec);
        let vocab = self.backbone.config.vocab_size;
        let mut loss_curve = Vec::with_capacity(spec.max_steps_per_batch);
        let mut early_stopped = false;
        // Training to criterion with a cap: at every reliability check,
        // remember the best-scoring adaptor so a late gate collapse
        // cannot destroy an already-successful batch.
        let mut best: Option<(f64, AdaptorState)> = None;

        for step in 1..=spec.max_steps_per_batch {
            let mut grads = AdaptorGrads::zeros_like(&self.adaptor);
            let mut task_loss = 0.0;
            for prep in &preps {
                let t = &self.rec_tokens[prep.rid];
                let weight = prep.span_targets.len() as f64 / total_positions as f64;
                match self.adaptor.config.router_mode {
                    RouterMode::KvAnchor => {
                        let fwd = self.adaptor.forward_instance(
                            &t.instance,
                            &prep.lower.u,
                            &prep.w0_out,
                        )?;
                        let (loss, dh) = self.span_loss(
                            &prep.lower,
                            &fwd.h,
                            prep.span_start,
                            &prep.span_targets,
                            vocab,
                            weight,
                        )?;
                        task_loss += loss * weight;
                        self.adaptor
                            .backward_instance(&fwd, &prep.lower.u, &dh, &mut grads)?;
                    }
                    RouterMode::KvTokenLevel | RouterMode::ConventionalMlp => {
                        let routing: &Matrix = match &prep.tok_emb {
                            Some(m) => m,
                            None => &prep.lower.u,
                        };
                        let fwd =
                            self.adaptor
                                .forward_tokens(routing, &prep.lower.u, &prep.w0_out)?;
                        let (loss, dh) = self.span_loss(
                            &prep.lower,
                            &fwd.h,
                            prep.span_start,
                            &prep.span_targets,
                            vocab,
                            weight,
                        )?;
                        task_loss += loss * weight;
                        self.adaptor.backward_tokens(
                            &fwd,
                            routing,
                            &prep.lower.u,
                            &dh,
                            &mut grads,
                        )?;
                    }
                }
            }
            opt.step(&mut self.adaptor, &grads)?;
            loss_curve.push(task_loss);

            if step % spec.early_stop_interval == 0 || step == spec.max_steps_per_batch {
                let rel = self.batch_reliability(&batch.record_ids)?;
                if best.as_ref().is_none_or(|(b, _)| rel >= *b) {
                    best = Some((rel, self.adaptor.clone()));
                }
                if rel == 1.0 {
                    early_stopped = step < spec.max_steps_per_batch;
                    break;
                }
            }
        }
        if let Some((best_rel, state)) = best {
            if self.batch_reliability(&batch.record_ids)? < best_rel {
                self.adaptor = state;
            }
        }

        // Log the training-time route for each record of this batch.
        for &rid in &batch.record_ids {
            self.route_log[rid] = Some(self.inference_route(rid)?);
        }
        self.batches_done += 1;

        let immediate_reliability = self.batch_reliability(&batch.record_ids)?;
        Ok(BatchReport {
            batch_index: batch.batch_index,
            steps_run: loss_curve.len(),
            early_stopped,
            loss_curve,
            immediate_reliability,
        })
    }

    /// Cross entropy over the target span given the adaptor output `h`,
    /// returning the weighted loss and `dL/dh`.
    fn span_loss(
        &self,
        lower: &LowerState,
        h: &Matrix,
        span_start: usize,
        span_targets: &[usize],
        vocab: usize,
        weight: f64,
    ) -> Result<(f64, Matrix), EditError> {
        let (logits, trace) = self.backbone.forward_upper(lower, h, true)?;
        let span_len = span_targets.len();
        let span = Matrix::from_fn(span_len, vocab, |r, c| logits.get(span_start + r, c));
        let (loss, span_grad) = cross_entropy_grad(&span, span_targets)?;
        let mut dlogits = Matrix::zeros(logits.rows(), vocab);
        for r in 0..span_len {
            let dst = dlogits.row_mut(span_start + r);
            for (d, &g) in dst.iter_mut().zip(span_grad.row(r)) {
                *d = g * weight;
            }
        }
        let dh = self.backbone.backward_to_host(&trace.unwrap(), &dlogits)?;
        Ok((loss, dh))
    }

    /// Teacher-forced reliability over a set of records.
    pub fn batch_reliability(&self, record_ids: &[usize]) -> Result<f64, EditError> {
        let mut hits = 0usize;
        for &rid in record_ids {
            if self.edit_success(rid)? {
                hits += 1;
            }
        }
        Ok(hits as f64 / record_ids.len() as f64)
    }

    /// Run a whole plan in order without rollback.
    pub fn run_lifelong(
        &mut self,
        plan: &EditPlan,
        spec: &TrainSpec,
    ) -> Result<Vec<BatchReport>, EditError> {
        if plan.batches.is_empty() {
            return Err(EditError::Argument(String::from("empty plan")));
        }
        let mut reports = Vec::with_capacity(plan.batches.len());
        for (i, ids) in plan.batches.iter().enumerate() {
            let batch = EditBatch {
                record_ids: ids.clone(),
                batch_index: i,
            };
            reports.push(self.edit_batch(&batch, spec)?);
        }
        Ok(reports)
    }

    /// Encoded prompt/target/paraphrase/locality for a record.
    pub fn encoded(&self, rid: usize) -> (&[u32], &[u32], &[u32], &[u32]) {
        let t = self.tokens(rid);
        (&t.prompt, &t.target, &t.paraphrase, &t.locality)
    }

    /// The record's routing embedding (mean prompt token embedding).
    pub fn instance_embedding(&self, rid: usize) -> &[f64] {
        &self.rec_tokens[rid].instance
    }
}

/// bos + prompt + target minus the final token: one input row per
/// predicted position. Callers guarantee a non-empty target.
fn teacher_input(prompt: &[u32], target: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(1 + prompt.len() + target.len());
    ids.push(BOS);
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(target);
    ids.pop();
    ids
}

fn argmax_row(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-batch optimizer over the adaptor's trainable tensors. Fresh
/// moments per batch: each batch is its own optimization run.
struct BatchOptimizer {
    expert_w_in: Vec<Option<AdamW>>,
    expert_w_out: Vec<Option<AdamW>>,
    keys: Vec<Option<AdamW>>,
    w_down: AdamW,
    w_up: AdamW,
    router: Option<AdamW>,
}

impl BatchOptimizer {
    fn new(adaptor: &AdaptorState, spec: &TrainSpec) -> BatchOptimizer {
        let params = AdamWParams::with_lr(spec.lr);
        let proj_params = AdamWParams::with_lr(spec.lr * spec.proj_lr_scale);
        let key_params = AdamWParams::with_lr(spec.lr * spec.key_lr_scale);
        let expert_w_in = adaptor
            .experts
            .iter()
            .map(|e| (!e.frozen).then(|| AdamW::new(e.w_in.rows() * e.w_in.cols(), params)))
            .collect();
        let expert_w_out = adaptor
            .experts
            .iter()
            .map(|e| (!e.frozen).then(|| AdamW::new(e.w_out.rows() * e.w_out.cols(), params)))
            .collect();
        let keys = adaptor
            .keys
            .iter()
            .map(|k| (!k.frozen).then(|| AdamW::new(k.v.len(), key_params)))
            .collect();
        BatchOptimizer {
            expert_w_in,
            expert_w_out,
            keys,
            w_down: AdamW::new(adaptor.w_down.rows() * adaptor.w_down.cols(), proj_params),
            w_up: AdamW::new(adaptor.w_up.rows() * adaptor.w_up.cols(), proj_params),
            router: adaptor
                .mlp_router
                .as_ref()
                .map(|r| AdamW::new(r.rows() * r.cols(), params)),
        }
    }

    fn step(&mut self, adaptor: &mut AdaptorState, grads: &AdaptorGrads) -> Result<(), EditError> {
        for (i, opt) in self.expert_w_in.iter_mut().enumerate() {
            if let (Some(opt), Some(g)) = (opt, &grads.expert_w_in[i]) {
                opt.update_matrix(&mut adaptor.experts[i].w_in, g)?;
            }
        }
        for (i, opt) in self.expert_w_out.iter_mut().enumerate() {
            if let (Some(opt), Some(g)) = (opt, &grads.expert_w_out[i]) {
                opt.update_matrix(&mut adaptor.experts[i].w_out, g)?;
            }
        }
        for (i, opt) in self.keys.iter_mut().enumerate() {
            if let (Some(opt), Some(g)) = (opt, &grads.keys[i]) {
                opt.update(&mut adaptor.keys[i].v, g)?;
            }
        }
        self.w_down
            .update_matrix(&mut adaptor.w_down, &grads.w_down)?;
        self.w_up.update_matrix(&mut adaptor.w_up, &grads.w_up)?;
        if let (Some(opt), Some(g), Some(r)) =
            (&mut self.router, &grads.router, &mut adaptor.mlp_router)
        {
            opt.update_matrix(r, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
