//! Metric suite and diagnostic studies.
//!
//! Reliability, generality, locality and perplexity over an editing
//! session, plus the three analyses: immediate-versus-final forgetting
//! curves, the train/test routing-consistency matrix, and order
//! sensitivity with within/between-batch similarity statistics.
//!
//! Evaluation is read-only over a session; every study is deterministic
//! given its seeds.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::adaptor::AdaptorConfig;
use crate::backbone::{BackboneModel, Tokenizer, BOS};
use crate::editing::{start_session, EditError, EditMode, EditRecord, EditingSession, TrainSpec};
use crate::planner::{plan_clustered, plan_random, similarity_stats, EditPlan, PlanProvenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    Immediate,
    Final,
}

/// Per-record flags and aggregate metrics for one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub stage: Stage,
    pub batch_index: Option<usize>,
    pub record_ids: Vec<usize>,
    pub reliable: Vec<bool>,
    pub general: Vec<bool>,
    pub local: Vec<bool>,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub avg: f64,
    pub ppl: Option<f64>,
}

fn mean_flags(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Reliability: teacher-forced argmax match on every edit-target token.
pub fn reliability(
    session: &EditingSession,
    record_ids: &[usize],
) -> Result<(Vec<bool>, f64), EditError> {
    let mut flags = Vec::with_capacity(record_ids.len());
    for &rid in record_ids {
        flags.push(session.edit_success(rid)?);
    }
    let agg = mean_flags(&flags);
    Ok((flags, agg))
}

/// Generality: the paraphrase prompt must produce the edit target.
pub fn generality(
    session: &EditingSession,
    record_ids: &[usize],
) -> Result<(Vec<bool>, f64), EditError> {
    let mut flags = Vec::with_capacity(record_ids.len());
    for &rid in record_ids {
        flags.push(session.paraphrase_success(rid)?);
    }
    let agg = mean_flags(&flags);
    Ok((flags, agg))
}

/// Locality: greedy decode of the locality prompt must equal the
/// captured pre-edit decode exactly.
pub fn locality(
    session: &EditingSession,
    record_ids: &[usize],
) -> Result<(Vec<bool>, f64), EditError> {
    let mut flags = Vec::with_capacity(record_ids.len());
    for &rid in record_ids {
        flags.push(session.locality_unchanged(rid)?);
    }
    let agg = mean_flags(&flags);
    Ok((flags, agg))
}

/// exp(mean token NLL) over the records' edit targets.
pub fn perplexity(session: &EditingSession, record_ids: &[usize]) -> Result<f64, EditError> {
    session.target_perplexity(record_ids)
}

/// All metrics over a record set.
pub fn evaluate(
    session: &EditingSession,
    record_ids: &[usize],
    stage: Stage,
    batch_index: Option<usize>,
) -> Result<EvalReport, EditError> {
    if record_ids.is_empty() {
        return Err(EditError::Argument(String::from(
            "evaluate over no records",
        )));
    }
    let (reliable, rel) = reliability(session, record_ids)?;
    let (general, gen) = generality(session, record_ids)?;
    let (local, loc) = locality(session, record_ids)?;
    let ppl = perplexity(session, record_ids)?;
    Ok(EvalReport {
        stage,
        batch_index,
        record_ids: record_ids.to_vec(),
        reliable,
        general,
        local,
        rel,
        gen,
        loc,
        avg: (rel + gen + loc) / 3.0,
        ppl: Some(ppl),
    })
}

/// Exact-match of a plain (adaptor-free) backbone over prompt/answer
/// pairs; the pretraining acceptance gate.
pub fn backbone_exact_match(
    model: &BackboneModel,
    tokenizer: &Tokenizer,
    probes: &[(alloc::string::String, alloc::string::String)],
) -> Result<f64, EditError> {
    let mut hits = 0usize;
    for (prompt, answer) in probes {
        let p = tokenizer.encode(prompt);
        let t = tokenizer.encode(answer);
        if p.is_empty() || t.is_empty() {
            continue;
        }
        let mut ids = Vec::with_capacity(1 + p.len() + t.len());
        ids.push(BOS);
        ids.extend_from_slice(&p);
        ids.extend_from_slice(&t);
        ids.pop();
        let logits = model.forward(&ids, None)?.logits;
        let base = p.len();
        let ok = t.iter().enumerate().all(|(k, &tok)| {
            let row = logits.row(base + k);
            let mut best = 0usize;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best as u32 == tok
        });
        if ok {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Routing consistency between training and inference: `counts[i][j]`
/// tallies records trained under expert `i` that route to expert `j` at
/// inference; `c` holds row-normalized proportions.
#[derive(Debug, Clone)]
pub struct ConsistencyMatrix {
    pub counts: Vec<Vec<usize>>,
    pub c: Vec<Vec<f64>>,
    pub diag_mass: f64,
}

pub fn consistency_study(session: &EditingSession) -> Result<ConsistencyMatrix, EditError> {
    let n = session.n_experts();
    if n == 0 {
        return Err(EditError::State(String::from("no experts to analyze")));
    }
    let mut counts = vec![vec![0usize; n]; n];
    let mut total = 0usize;
    let mut diag = 0usize;
    for rid in 0..session.records.len() {
        let Some(train_expert) = session.route_log[rid] else {
            continue;
        };
        let test_expert = session.inference_route(rid)?;
        counts[train_expert][test_expert] += 1;
        total += 1;
        if train_expert == test_expert {
            diag += 1;
        }
    }
    if total == 0 {
        return Err(EditError::State(String::from("empty training route log")));
    }
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        let row_total: usize = counts[i].iter().sum();
        if row_total > 0 {
            for j in 0..n {
                c[i][j] = counts[i][j] as f64 / row_total as f64;
            }
        }
    }
    Ok(ConsistencyMatrix {
        counts,
        c,
        diag_mass: diag as f64 / total as f64,
    })
}

/// Everything a study needs to spin up sessions.
#[derive(Clone)]
pub struct StudySetup {
    pub backbone: Arc<BackboneModel>,
    pub tokenizer: Arc<Tokenizer>,
    pub records: Vec<EditRecord>,
    pub adaptor_config: AdaptorConfig,
    pub spec: TrainSpec,
    pub session_seed: u64,
}

impl StudySetup {
    fn session(&self, mode: EditMode, seed: u64) -> Result<EditingSession, EditError> {
        start_session(
            Arc::clone(&self.backbone),
            Arc::clone(&self.tokenizer),
            self.records.clone(),
            mode,
            self.adaptor_config.clone(),
            seed,
        )
    }
}

/// Immediate and final reliability per batch plus the forgetting score
/// (mean immediate minus final).
#[derive(Debug, Clone)]
pub struct ForgettingStudy {
    pub immediate: Vec<EvalReport>,
    pub final_: Vec<EvalReport>,
    pub forgetting: f64,
}

/// Run a lifelong session over `plan`, evaluating each batch immediately
/// after its edit and once more after the whole sequence.
pub fn forgetting_study(
    setup: &StudySetup,
    plan: &EditPlan,
    mode: EditMode,
) -> Result<(ForgettingStudy, EditingSession), EditError> {
    let mut session = setup.session(mode, setup.session_seed)?;
    let mut immediate = Vec::with_capacity(plan.batches.len());
    for (i, ids) in plan.batches.iter().enumerate() {
        session.edit_batch(
            &crate::editing::EditBatch {
                record_ids: ids.clone(),
                batch_index: i,
            },
            &setup.spec,
        )?;
        immediate.push(evaluate(&session, ids, Stage::Immediate, Some(i))?);
    }
    let mut final_ = Vec::with_capacity(plan.batches.len());
    for (i, ids) in plan.batches.iter().enumerate() {
        final_.push(evaluate(&session, ids, Stage::Final, Some(i))?);
    }
    let forgetting = immediate
        .iter()
        .zip(&final_)
        .map(|(im, fin)| im.rel - fin.rel)
        .sum::<f64>()
        / immediate.len() as f64;
    Ok((
        ForgettingStudy {
            immediate,
            final_,
            forgetting,
        },
        session,
    ))
}

/// `e_i = concat(mean prompt embedding, mean target embedding)` for each
/// record; the similarity vector behind the order statistics and the
/// clustered planner.
pub fn instance_vectors(
    backbone: &BackboneModel,
    tokenizer: &Tokenizer,
    records: &[EditRecord],
) -> Result<Vec<Vec<f64>>, EditError> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let p = tokenizer.encode(&r.edit_prompt);
        let t = tokenizer.encode(&r.edit_target);
        let mut e = backbone.embed_instance(&p)?;
        e.extend(backbone.embed_instance(&t)?);
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OrderTrial {
    pub seed: u64,
    pub provenance: PlanProvenance,
    pub score: f64,
    pub rel: f64,
    pub wbs_mean: f64,
    pub bbs: f64,
}

#[derive(Debug, Clone)]
pub struct OrderSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone)]
pub struct OrderStudyResult {
    pub trials: Vec<OrderTrial>,
    /// Spread statistics over the random-order trials only.
    pub summary: OrderSummary,
}

/// Run one full lifelong pipeline for a given plan and report the final
/// average score plus the plan's similarity statistics.
pub fn run_plan_trial(
    setup: &StudySetup,
    plan: &EditPlan,
    mode: EditMode,
    seed: u64,
) -> Result<OrderTrial, EditError> {
    let mut session = setup.session(mode, setup.session_seed ^ seed)?;
    session.run_lifelong(plan, &setup.spec)?;
    let all: Vec<usize> = (0..setup.records.len()).collect();
    let report = evaluate(&session, &all, Stage::Final, None)?;
    let vectors = instance_vectors(&setup.backbone, &setup.tokenizer, &setup.records)?;
    let stats = similarity_stats(&vectors, plan)
        .map_err(|e| EditError::Argument(format!("similarity stats: {e}")))?;
    Ok(OrderTrial {
        seed,
        provenance: plan.provenance.clone(),
        score: report.avg,
        rel: report.rel,
        wbs_mean: stats.wbs_mean,
        bbs: stats.bbs,
    })
}

/// Random-shuffle trials plus one clustered-plan trial for comparison.
pub fn order_sensitivity_study(
    setup: &StudySetup,
    s: usize,
    n: usize,
    trials: usize,
    mode: EditMode,
    base_seed: u64,
) -> Result<OrderStudyResult, EditError> {
    if trials < 2 {
        return Err(EditError::Argument(String::from(
            "order study needs at least 2 trials",
        )));
    }
    let n_records = setup.records.len();
    let mut out = Vec::with_capacity(trials + 1);
    for t in 0..trials {
        let seed = base_seed + t as u64;
        let plan = plan_random(n_records, s, n, seed)
            .map_err(|e| EditError::Argument(format!("plan: {e}")))?;
        out.push(run_plan_trial(setup, &plan, mode, seed)?);
    }
    let scores: Vec<f64> = out.iter().map(|t| t.score).collect();
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / scores.len() as f64;
    let summary = OrderSummary {
        min,
        max,
        mean,
        stddev: crate::math::sqrt(var),
    };

    let vectors = instance_vectors(&setup.backbone, &setup.tokenizer, &setup.records)?;
    let plan = plan_clustered(&vectors, s, n, base_seed)
        .map_err(|e| EditError::Argument(format!("clustered plan: {e}")))?;
    out.push(run_plan_trial(setup, &plan, mode, base_seed)?);

    Ok(OrderStudyResult {
        trials: out,
        summary,
    })
}

/// Final metrics with the adaptor hosted at each layer in turn.
pub fn layer_sweep(
    setup: &StudySetup,
    plan: &EditPlan,
    mode: EditMode,
) -> Result<Vec<(usize, EvalReport)>, EditError> {
    let mut out = Vec::new();
    for layer in 0..setup.backbone.config.n_layers {
        let mut model = (*setup.backbone).clone();
        model.set_host_layer(layer)?;
        let swept = StudySetup {
            backbone: Arc::new(model),
            ..setup.clone()
        };
        let mut session = swept.session(mode, swept.session_seed)?;
        session.run_lifelong(plan, &swept.spec)?;
        let all: Vec<usize> = (0..swept.records.len()).collect();
        out.push((layer, evaluate(&session, &all, Stage::Final, None)?));
    }
    Ok(out)
}

/// Centered moving average used for the smoothed forgetting curves
/// (window w, trailing).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.is_empty() {
        return xs.to_vec();
    }
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let start = i.saturating_sub(window - 1);
        let slice = &xs[start..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

#[cfg(test)]
mod tests;
