//! Subcommand implementations. Each command is fully reproducible from
//! its config and seeds and stores the resolved config beside its
//! outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};

use moedit_core::backbone::{pretrain, BackboneModel, Tokenizer};
use moedit_core::dataset::generate_world;
use moedit_core::editing::{start_session, EditBatch, EditMode, EditRecord};
use moedit_core::eval::{
    backbone_exact_match, consistency_study, evaluate, forgetting_study, instance_vectors,
    layer_sweep, order_sensitivity_study, run_plan_trial, EvalReport, OrderTrial, Stage,
    StudySetup,
};
use moedit_core::numerics::Rng;
use moedit_core::planner::{plan_clustered, plan_random, similarity_stats, EditPlan};

use crate::config::RunConfig;
use crate::{checkpoint, csvout, jsonl, svg};

/// Errors that should exit with status 2 (bad config/arguments) rather
/// than 3 (runtime failure).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn store_resolved_config(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        std::fs::write(self.path("config.resolved.toml"), self.config.to_toml())?;
        Ok(())
    }

    fn load_backbone(&self) -> anyhow::Result<(Arc<BackboneModel>, Arc<Tokenizer>)> {
        let path = self.path("backbone.json");
        if !path.exists() {
            return Err(usage_error(format!(
                "no backbone checkpoint at {} (run `moedit pretrain` first)",
                path.display()
            )));
        }
        let (model, tokenizer) = checkpoint::load_backbone(&path)?;
        if !model.frozen() {
            bail!("backbone checkpoint is not frozen");
        }
        Ok((Arc::new(model), Arc::new(tokenizer)))
    }

    fn load_records(&self, override_path: Option<&Path>) -> anyhow::Result<Vec<EditRecord>> {
        let path = override_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.path("edits.jsonl"));
        if !path.exists() {
            return Err(usage_error(format!(
                "no edit records at {} (run `moedit gen` first)",
                path.display()
            )));
        }
        let records = jsonl::read_records(&path)?;
        if records.is_empty() {
            return Err(usage_error(format!("{} holds no records", path.display())));
        }
        Ok(records)
    }
}

/// `moedit gen`: synthesize the fact world, edit records, and vocabulary.
pub fn cmd_gen(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.store_resolved_config()?;
    let world = generate_world(&ctx.config.corpus).map_err(|e| usage_error(e.to_string()))?;
    let records = world.to_edit_records();
    let phrase_records = world.to_phrase_records();
    let tokenizer = world.tokenizer();

    std::fs::write(ctx.path("world.json"), serde_json::to_string(&world)?)?;
    jsonl::write_records(&ctx.path("edits.jsonl"), &records)?;
    jsonl::write_records(&ctx.path("edits_phrase.jsonl"), &phrase_records)?;
    std::fs::write(ctx.path("vocab.txt"), tokenizer.words().join("\n") + "\n")?;

    println!(
        "world: {} entities, {} relations ({} edit + locality-only), {} topics",
        world.entities.len(),
        world.relations.len(),
        ctx.config.corpus.n_relations,
        ctx.config.corpus.n_topics
    );
    println!(
        "records: {} edits, {} locality probes, {} pretrain facts, vocab {}",
        records.len(),
        world.locality_probe.len(),
        world.pretrain_known.len(),
        tokenizer.vocab_size()
    );
    println!("wrote world.json, edits.jsonl, edits_phrase.jsonl, vocab.txt");
    Ok(())
}

/// `moedit pretrain`: train the backbone on the world's fact corpus,
/// freeze it, verify the held-in exact-match gate, and checkpoint.
pub fn cmd_pretrain(ctx: &Ctx) -> anyhow::Result<()> {
    ctx.store_resolved_config()?;
    let world_path = ctx.path("world.json");
    if !world_path.exists() {
        return Err(usage_error(format!(
            "no world at {} (run `moedit gen` first)",
            world_path.display()
        )));
    }
    let world: moedit_core::dataset::FactWorld =
        serde_json::from_str(&std::fs::read_to_string(&world_path)?)
            .with_context(|| format!("parsing {}", world_path.display()))?;
    let tokenizer = world.tokenizer();
    let corpus = world.pretrain_sequences(&tokenizer);
    let config = ctx.config.backbone.to_core(tokenizer.vocab_size());
    config.validate().map_err(|e| usage_error(e.to_string()))?;

    let spec = ctx.config.pretrain.to_core();
    let mut model = BackboneModel::new(config, &mut Rng::new(spec.seed))?;
    println!(
        "pretraining {} steps (batch {}, lr {}) on {} sequences ...",
        spec.steps,
        spec.batch_size,
        spec.lr,
        corpus.len()
    );
    let report = pretrain(&mut model, &corpus, &spec)?;
    let accuracy = backbone_exact_match(&model, &tokenizer, &world.held_in_probes())?;
    println!(
        "final loss {:.4}, held-in fact exact-match {accuracy:.3}",
        report.final_loss
    );
    csvout::write_pretrain_loss(&ctx.path("pretrain_loss.csv"), &report.loss_curve)?;
    checkpoint::save_backbone(&ctx.path("backbone.json"), &model, &tokenizer)?;
    println!("wrote backbone.json (checksum {:016x})", model.checksum());
    if accuracy < ctx.config.pretrain.target_exact_match {
        bail!(
            "held-in exact-match {accuracy:.3} is below the configured target {}; increase [pretrain] steps",
            ctx.config.pretrain.target_exact_match
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Lifelong,
    Batch,
    Conventional,
}

impl ModeArg {
    pub fn to_core(self) -> EditMode {
        match self {
            ModeArg::Lifelong => EditMode::Lifelong,
            ModeArg::Batch => EditMode::Batch,
            ModeArg::Conventional => EditMode::ConventionalLifelong,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanArg {
    Random,
    Clustered,
    File,
}

fn build_plan(
    ctx: &Ctx,
    plan: PlanArg,
    plan_file: Option<&Path>,
    mode: ModeArg,
    backbone: &BackboneModel,
    tokenizer: &Tokenizer,
    records: &[EditRecord],
) -> anyhow::Result<EditPlan> {
    if mode == ModeArg::Batch {
        // batch editing is lifelong with a single batch holding everything
        return Ok(EditPlan {
            batches: vec![(0..records.len()).collect()],
            provenance: moedit_core::planner::PlanProvenance::Given,
        });
    }
    let s = ctx.config.edit.n_batches;
    let n = ctx.config.edit.batch_size;
    match plan {
        PlanArg::Random => plan_random(records.len(), s, n, ctx.config.edit.seed)
            .map_err(|e| usage_error(e.to_string())),
        PlanArg::Clustered => {
            let vectors = instance_vectors(backbone, tokenizer, records)?;
            plan_clustered(&vectors, s, n, ctx.config.edit.seed)
                .map_err(|e| usage_error(e.to_string()))
        }
        PlanArg::File => {
            let path =
                plan_file.ok_or_else(|| usage_error("--plan file requires --plan-file <PATH>"))?;
            let plan: EditPlan = serde_json::from_str(
                &std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            )
            .with_context(|| format!("parsing {}", path.display()))?;
            if plan.n_records() != records.len() {
                return Err(usage_error(format!(
                    "plan covers {} records but {} were loaded",
                    plan.n_records(),
                    records.len()
                )));
            }
            Ok(plan)
        }
    }
}

/// `moedit edit`: run a lifelong/batch/conventional editing session over
/// a plan, checkpointing after every batch.
pub fn cmd_edit(
    ctx: &Ctx,
    mode: ModeArg,
    plan_arg: PlanArg,
    plan_file: Option<&Path>,
    records_file: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    ctx.store_resolved_config()?;
    let (backbone, tokenizer) = ctx.load_backbone()?;
    let spec = ctx.config.edit.to_core();

    let (mut session, plan, start_batch) = if let Some(resume_path) = resume {
        let (session, plan) =
            checkpoint::load_session(resume_path, Arc::clone(&backbone), Arc::clone(&tokenizer))?;
        let done = session.batches_done;
        println!(
            "resuming session from {} at batch {done}/{}",
            resume_path.display(),
            plan.batches.len()
        );
        (session, plan, done)
    } else {
        let records = ctx.load_records(records_file)?;
        let plan = build_plan(
            ctx, plan_arg, plan_file, mode, &backbone, &tokenizer, &records,
        )?;
        let session = start_session(
            Arc::clone(&backbone),
            Arc::clone(&tokenizer),
            records,
            mode.to_core(),
            ctx.config.adaptor.to_core(),
            ctx.config.adaptor.seed,
        )?;
        (session, plan, 0)
    };

    std::fs::write(ctx.path("plan.json"), serde_json::to_string(&plan)?)?;
    let mut immediate_reports: Vec<EvalReport> = Vec::new();
    let mut loss_curves: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, ids) in plan.batches.iter().enumerate().skip(start_batch) {
        let report = session.edit_batch(
            &EditBatch {
                record_ids: ids.clone(),
                batch_index: i,
            },
            &spec,
        )?;
        checkpoint::save_session(&ctx.path("session.json"), &session, &plan)?;
        let immediate = evaluate(&session, ids, Stage::Immediate, Some(i))?;
        println!(
            "batch {i}: {} steps{}, immediate rel {:.2} gen {:.2} loc {:.2}",
            report.steps_run,
            if report.early_stopped {
                " (early stop)"
            } else {
                ""
            },
            immediate.rel,
            immediate.gen,
            immediate.loc
        );
        loss_curves.push((i, report.loss_curve.clone()));
        immediate_reports.push(immediate);
    }

    // Final evaluation: per batch, then the whole record set.
    let mut reports = immediate_reports;
    for (i, ids) in plan.batches.iter().enumerate() {
        reports.push(evaluate(&session, ids, Stage::Final, Some(i))?);
    }
    let all: Vec<usize> = (0..session.records.len()).collect();
    let overall = evaluate(&session, &all, Stage::Final, None)?;
    println!(
        "final: rel {:.3} gen {:.3} loc {:.3} avg {:.3} ppl {:.2} ({} experts)",
        overall.rel,
        overall.gen,
        overall.loc,
        overall.avg,
        overall.ppl.unwrap_or(f64::NAN),
        session.n_experts()
    );
    reports.push(overall);
    csvout::write_metrics(&ctx.path("metrics.csv"), &reports)?;
    csvout::write_loss(&ctx.path("loss.csv"), &loss_curves)?;
    if plan.batches.iter().all(|b| b.len() >= 2) && plan.batches.len() >= 2 {
        let vectors = instance_vectors(&backbone, &tokenizer, &session.records)?;
        let stats = similarity_stats(&vectors, &plan)
            .map_err(|e| anyhow::anyhow!("similarity stats: {e}"))?;
        csvout::write_similarity(&ctx.path("similarity.csv"), &stats)?;
    }
    checkpoint::save_adaptor(&ctx.path("adaptor.json"), &session.adaptor)?;
    if !session.backbone_intact() {
        bail!("frozen backbone changed during the session");
    }
    println!("wrote session.json, adaptor.json, plan.json, metrics.csv, loss.csv");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StudyArg {
    Forgetting,
    Consistency,
    Order,
    LayerSweep,
}

fn study_setup(ctx: &Ctx) -> anyhow::Result<StudySetup> {
    let (backbone, tokenizer) = ctx.load_backbone()?;
    let records = ctx.load_records(None)?;
    Ok(StudySetup {
        backbone,
        tokenizer,
        records,
        adaptor_config: ctx.config.adaptor.to_core(),
        spec: ctx.config.edit.to_core(),
        session_seed: ctx.config.adaptor.seed,
    })
}

fn study_plan(ctx: &Ctx, setup: &StudySetup, plan_arg: PlanArg) -> anyhow::Result<EditPlan> {
    let s = ctx.config.edit.n_batches;
    let n = ctx.config.edit.batch_size;
    match plan_arg {
        PlanArg::Random => plan_random(setup.records.len(), s, n, ctx.config.edit.seed)
            .map_err(|e| usage_error(e.to_string())),
        PlanArg::Clustered | PlanArg::File => {
            let vectors = instance_vectors(&setup.backbone, &setup.tokenizer, &setup.records)?;
            plan_clustered(&vectors, s, n, ctx.config.edit.seed)
                .map_err(|e| usage_error(e.to_string()))
        }
    }
}

/// `moedit study`: the diagnostic reproductions.
pub fn cmd_study(
    ctx: &Ctx,
    study: StudyArg,
    mode: ModeArg,
    plan_arg: PlanArg,
    trials: Option<usize>,
    parallel: Option<usize>,
    emit_svg: bool,
) -> anyhow::Result<()> {
    ctx.store_resolved_config()?;
    let setup = study_setup(ctx)?;
    match study {
        StudyArg::Forgetting => {
            let plan = study_plan(ctx, &setup, plan_arg)?;
            let (result, session) = forgetting_study(&setup, &plan, mode.to_core())?;
            csvout::write_forgetting(
                &ctx.path("forgetting.csv"),
                &result.immediate,
                &result.final_,
            )?;
            // the same run yields the routing-consistency matrix
            let matrix = consistency_study(&session)?;
            csvout::write_consistency(&ctx.path("consistency.csv"), &matrix)?;
            println!(
                "forgetting score (mean immediate - final reliability): {:.3}",
                result.forgetting
            );
            println!("routing diagonal mass: {:.3}", matrix.diag_mass);
            if emit_svg {
                let imm: Vec<f64> = result.immediate.iter().map(|r| r.rel).collect();
                let fin: Vec<f64> = result.final_.iter().map(|r| r.rel).collect();
                std::fs::write(
                    ctx.path("forgetting.svg"),
                    svg::line_chart(
                        "reliability per batch: immediate vs final",
                        "batch index",
                        &[("immediate".to_string(), imm), ("final".to_string(), fin)],
                    ),
                )?;
            }
            println!("wrote forgetting.csv, consistency.csv");
        }
        StudyArg::Consistency => {
            let plan = study_plan(ctx, &setup, plan_arg)?;
            let mut session = start_session(
                Arc::clone(&setup.backbone),
                Arc::clone(&setup.tokenizer),
                setup.records.clone(),
                mode.to_core(),
                setup.adaptor_config.clone(),
                setup.session_seed,
            )?;
            session.run_lifelong(&plan, &setup.spec)?;
            let matrix = consistency_study(&session)?;
            csvout::write_consistency(&ctx.path("consistency.csv"), &matrix)?;
            println!("routing diagonal mass: {:.3}", matrix.diag_mass);
            if emit_svg {
                std::fs::write(
                    ctx.path("consistency.svg"),
                    svg::heatmap("train/test routing consistency", &matrix.c),
                )?;
            }
            println!("wrote consistency.csv");
        }
        StudyArg::Order => {
            let trials = trials.unwrap_or(ctx.config.study.trials);
            let workers = parallel.unwrap_or(ctx.config.study.parallel).max(1);
            let result = if workers <= 1 {
                order_sensitivity_study(
                    &setup,
                    ctx.config.edit.n_batches,
                    ctx.config.edit.batch_size,
                    trials,
                    mode.to_core(),
                    ctx.config.study.base_seed,
                )?
            } else {
                parallel_order_study(ctx, &setup, trials, workers, mode.to_core())?
            };
            csvout::write_order_study(&ctx.path("order_study.csv"), &result.trials)?;
            println!(
                "final avg over {} random orders: min {:.3} max {:.3} mean {:.3} stddev {:.3} (spread {:.3})",
                trials,
                result.summary.min,
                result.summary.max,
                result.summary.mean,
                result.summary.stddev,
                result.summary.max - result.summary.min
            );
            let clustered = result.trials.last().unwrap();
            println!(
                "clustered plan scores {:.3} (wbs {:.3}, bbs {:.3})",
                clustered.score, clustered.wbs_mean, clustered.bbs
            );
            if emit_svg {
                let scores: Vec<f64> = result.trials.iter().map(|t| t.score).collect();
                std::fs::write(
                    ctx.path("order_study.svg"),
                    svg::line_chart(
                        "final avg score per trial (last = clustered)",
                        "trial",
                        &[("avg score".to_string(), scores)],
                    ),
                )?;
            }
            println!("wrote order_study.csv");
        }
        StudyArg::LayerSweep => {
            let plan = study_plan(ctx, &setup, plan_arg)?;
            let rows = layer_sweep(&setup, &plan, mode.to_core())?;
            csvout::write_layer_sweep(&ctx.path("layer_sweep.csv"), &rows)?;
            for (layer, r) in &rows {
                println!(
                    "layer {layer}: rel {:.3} gen {:.3} loc {:.3} avg {:.3}",
                    r.rel, r.gen, r.loc, r.avg
                );
            }
            if emit_svg {
                let series = [
                    ("rel".to_string(), rows.iter().map(|(_, r)| r.rel).collect()),
                    ("gen".to_string(), rows.iter().map(|(_, r)| r.gen).collect()),
                    ("loc".to_string(), rows.iter().map(|(_, r)| r.loc).collect()),
                    ("avg".to_string(), rows.iter().map(|(_, r)| r.avg).collect()),
                ];
                std::fs::write(
                    ctx.path("layer_sweep.svg"),
                    svg::line_chart("metrics by host layer", "host layer", &series),
                )?;
            }
            println!("wrote layer_sweep.csv");
        }
    }
    Ok(())
}

/// Random-order trials fanned out over threads; trial outputs are
/// ordered by seed, so the result matches the sequential run exactly.
fn parallel_order_study(
    ctx: &Ctx,
    setup: &StudySetup,
    trials: usize,
    workers: usize,
    mode: EditMode,
) -> anyhow::Result<moedit_core::eval::OrderStudyResult> {
    let s = ctx.config.edit.n_batches;
    let n = ctx.config.edit.batch_size;
    let base_seed = ctx.config.study.base_seed;
    let n_records = setup.records.len();
    let mut slots: Vec<Option<OrderTrial>> = vec![None; trials];
    let mut errors: Vec<String> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk_start in (0..trials).step_by(trials.div_ceil(workers).max(1)) {
            let chunk_end = (chunk_start + trials.div_ceil(workers).max(1)).min(trials);
            let setup_ref = &setup;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for t in chunk_start..chunk_end {
                    let seed = base_seed + t as u64;
                    let result = plan_random(n_records, s, n, seed)
                        .map_err(|e| format!("plan: {e}"))
                        .and_then(|plan| {
                            run_plan_trial(setup_ref, &plan, mode, seed)
                                .map_err(|e| format!("trial {t}: {e}"))
                        });
                    out.push((t, result));
                }
                out
            }));
        }
        for handle in handles {
            for (t, result) in handle.join().expect("study worker panicked") {
                match result {
                    Ok(trial) => slots[t] = Some(trial),
                    Err(e) => errors.push(e),
                }
            }
        }
    });
    if let Some(e) = errors.first() {
        bail!("{e}");
    }
    let trials_vec: Vec<OrderTrial> = slots.into_iter().map(|t| t.unwrap()).collect();
    let scores: Vec<f64> = trials_vec.iter().map(|t| t.score).collect();
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / scores.len() as f64;

    // the clustered comparison trial, as in the sequential path
    let vectors = instance_vectors(&setup.backbone, &setup.tokenizer, &setup.records)?;
    let plan = plan_clustered(&vectors, s, n, base_seed)
        .map_err(|e| anyhow::anyhow!("clustered plan: {e}"))?;
    let clustered = run_plan_trial(setup, &plan, mode, base_seed)?;
    let mut all = trials_vec;
    all.push(clustered);
    Ok(moedit_core::eval::OrderStudyResult {
        trials: all,
        summary: moedit_core::eval::OrderSummary {
            min,
            max,
            mean,
            stddev: var.sqrt(),
        },
    })
}

/// `moedit config dump`: the fully-resolved configuration.
pub fn cmd_config_dump(config: &RunConfig) -> String {
    config.to_toml()
}

/// Resolve the output directory: --out flag beats MOEDIT_OUT_DIR beats
/// the config's out_dir.
pub fn resolve_out_dir(config: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("MOEDIT_OUT_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(&config.out_dir)
}
