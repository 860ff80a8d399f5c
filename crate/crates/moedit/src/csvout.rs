//! CSV report emitters.
//!
//! Floats are written with Rust's shortest-round-trip formatting, so a
//! rerun from the same config produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;

use moedit_core::eval::{ConsistencyMatrix, EvalReport, OrderTrial, Stage};
use moedit_core::planner::{PlanProvenance, SimilarityStats};

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Immediate => "immediate",
        Stage::Final => "final",
    }
}

pub fn provenance_name(p: &PlanProvenance) -> String {
    match p {
        PlanProvenance::Random { seed } => format!("random(seed={seed})"),
        PlanProvenance::Clustered { k, seed } => format!("clustered(k={k},seed={seed})"),
        PlanProvenance::Given => "given".to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// metrics.csv: stage,batch_index,rel,gen,loc,avg,ppl
pub fn write_metrics(path: &Path, reports: &[EvalReport]) -> anyhow::Result<()> {
    let mut out = String::from("stage,batch_index,rel,gen,loc,avg,ppl\n");
    for r in reports {
        let batch = r.batch_index.map(|b| b.to_string()).unwrap_or_default();
        let ppl = r.ppl.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            stage_name(r.stage),
            batch,
            r.rel,
            r.gen,
            r.loc,
            r.avg,
            ppl
        )?;
    }
    write_file(path, &out)
}

/// loss.csv: step,batch_index,loss
pub fn write_loss(path: &Path, curves: &[(usize, Vec<f64>)]) -> anyhow::Result<()> {
    let mut out = String::from("step,batch_index,loss\n");
    for (batch_index, curve) in curves {
        for (step, loss) in curve.iter().enumerate() {
            writeln!(out, "{},{},{}", step + 1, batch_index, loss)?;
        }
    }
    write_file(path, &out)
}

/// similarity.csv: batch_index,wbs rows plus a final bbs row
pub fn write_similarity(path: &Path, stats: &SimilarityStats) -> anyhow::Result<()> {
    let mut out = String::from("batch_index,wbs\n");
    for (i, w) in stats.wbs.iter().enumerate() {
        writeln!(out, "{i},{w}")?;
    }
    writeln!(out, "bbs,{}", stats.bbs)?;
    write_file(path, &out)
}

/// consistency.csv: i,j,count,proportion
pub fn write_consistency(path: &Path, m: &ConsistencyMatrix) -> anyhow::Result<()> {
    let mut out = String::from("i,j,count,proportion\n");
    for (i, row) in m.counts.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            writeln!(out, "{i},{j},{count},{}", m.c[i][j])?;
        }
    }
    write_file(path, &out)
}

/// order_study.csv: seed,provenance,score,wbs_mean,bbs
pub fn write_order_study(path: &Path, trials: &[OrderTrial]) -> anyhow::Result<()> {
    let mut out = String::from("seed,provenance,score,wbs_mean,bbs\n");
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{}",
            t.seed,
            provenance_name(&t.provenance),
            t.score,
            t.wbs_mean,
            t.bbs
        )?;
    }
    write_file(path, &out)
}

/// forgetting.csv: per-batch immediate/final metrics plus 4-step moving
/// averages of the reliability curves.
pub fn write_forgetting(
    path: &Path,
    immediate: &[EvalReport],
    final_: &[EvalReport],
) -> anyhow::Result<()> {
    let imm_rel: Vec<f64> = immediate.iter().map(|r| r.rel).collect();
    let fin_rel: Vec<f64> = final_.iter().map(|r| r.rel).collect();
    let imm_ma = moedit_core::eval::moving_average(&imm_rel, 4);
    let fin_ma = moedit_core::eval::moving_average(&fin_rel, 4);
    let mut out = String::from(
        "batch_index,immediate_rel,final_rel,immediate_gen,final_gen,immediate_loc,final_loc,immediate_rel_ma4,final_rel_ma4\n",
    );
    for i in 0..immediate.len() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{}",
            immediate[i].rel,
            final_[i].rel,
            immediate[i].gen,
            final_[i].gen,
            immediate[i].loc,
            final_[i].loc,
            imm_ma[i],
            fin_ma[i]
        )?;
    }
    write_file(path, &out)
}

/// layer_sweep.csv: layer,rel,gen,loc,avg
pub fn write_layer_sweep(path: &Path, rows: &[(usize, EvalReport)]) -> anyhow::Result<()> {
    let mut out = String::from("layer,rel,gen,loc,avg\n");
    for (layer, r) in rows {
        writeln!(out, "{layer},{},{},{},{}", r.rel, r.gen, r.loc, r.avg)?;
    }
    write_file(path, &out)
}

/// pretrain_loss.csv: step,loss
pub fn write_pretrain_loss(path: &Path, curve: &[(usize, f64)]) -> anyhow::Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        writeln!(out, "{step},{loss}")?;
    }
    write_file(path, &out)
}
