use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::adaptor::AdaptorConfig;
use crate::backbone::{pretrain, BackboneConfig, PretrainSpec};
use crate::editing::EditBatch;
use crate::numerics::Rng;

fn tokenizer() -> Tokenizer {
    Tokenizer::from_words([
        "the", "hue", "of", "ka", "lo", "mi", "vo", "ru", "pa", "is", "red", "blue", "green",
        "gold", "pink", "gray",
    ])
}

fn pretrained_backbone(tok: &Tokenizer) -> BackboneModel {
    let config = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: tok.vocab_size(),
        max_seq_len: 16,
        host_layer: 1,
    };
    let mut model = BackboneModel::new(config, &mut Rng::new(17)).unwrap();
    let corpus: Vec<Vec<u32>> = [
        "the hue of ka is red",
        "the hue of lo is blue",
        "the hue of mi is green",
        "the hue of vo is gold",
        "the hue of ru is pink",
        "the hue of pa is gray",
    ]
    .iter()
    .map(|s| {
        let mut ids = vec![crate::backbone::BOS];
        ids.extend(tok.encode(s));
        ids.push(crate::backbone::EOS);
        ids
    })
    .collect();
    pretrain(
        &mut model,
        &corpus,
        &PretrainSpec {
            steps: 250,
            batch_size: 6,
            lr: 1e-2,
            seed: 23,
        },
    )
    .unwrap();
    model
}

fn record(prompt: &str, target: &str, para: &str, loc: &str) -> EditRecord {
    EditRecord {
        edit_prompt: prompt.to_string(),
        edit_target: target.to_string(),
        paraphrase_prompt: para.to_string(),
        locality_prompt: loc.to_string(),
        locality_expected: Vec::new(),
    }
}

fn records() -> Vec<EditRecord> {
    vec![
        record("the hue of ka is", "blue", "ka hue is", "the hue of ru is"),
        record("the hue of lo is", "gold", "lo hue is", "the hue of pa is"),
        record("the hue of mi is", "red", "mi hue is", "the hue of ru is"),
        record("the hue of vo is", "green", "vo hue is", "the hue of pa is"),
    ]
}

fn setup() -> StudySetup {
    let tok = Arc::new(tokenizer());
    let backbone = Arc::new(pretrained_backbone(&tok));
    let mut adaptor_config = AdaptorConfig::for_d_model(16);
    adaptor_config.d_expert = 16;
    adaptor_config.n_fixed_experts = 2;
    StudySetup {
        backbone,
        tokenizer: tok,
        records: records(),
        adaptor_config,
        spec: TrainSpec {
            lr: 1e-2,
            max_steps_per_batch: 300,
            early_stop_interval: 10,
            proj_lr_scale: 0.0,
            key_lr_scale: 0.1,
            seed: 5,
        },
        session_seed: 31,
    }
}

#[test]
fn aggregate_is_mean_of_flags() {
    assert_eq!(mean_flags(&[true, true, false, true]), 0.75);
    assert_eq!(mean_flags(&[false]), 0.0);
    assert_eq!(mean_flags(&[true, true]), 1.0);
}

#[test]
fn pretrained_backbone_answers_held_in_probes() {
    let tok = tokenizer();
    let model = pretrained_backbone(&tok);
    let probes: Vec<(alloc::string::String, alloc::string::String)> = vec![
        (String::from("the hue of ka is"), String::from("red")),
        (String::from("the hue of lo is"), String::from("blue")),
        (String::from("the hue of ru is"), String::from("pink")),
    ];
    let acc = backbone_exact_match(&model, &tok, &probes).unwrap();
    assert_eq!(acc, 1.0, "tiny backbone failed to memorize its corpus");
}

#[test]
fn pre_edit_reliability_is_zero_on_corrections() {
    // every edit target differs from the pretrained object
    let s = setup();
    let session = s.session_for_test(EditMode::Lifelong);
    let all: Vec<usize> = (0..4).collect();
    let (_, rel) = reliability(&session, &all).unwrap();
    assert_eq!(rel, 0.0);
    let (_, loc) = locality(&session, &all).unwrap();
    assert_eq!(loc, 1.0);
}

#[test]
fn evaluate_aggregates_and_ranges() {
    let s = setup();
    let mut session = s.session_for_test(EditMode::Lifelong);
    session
        .edit_batch(
            &EditBatch {
                record_ids: vec![0, 1],
                batch_index: 0,
            },
            &s.spec,
        )
        .unwrap();
    let report = evaluate(&session, &[0, 1], Stage::Immediate, Some(0)).unwrap();
    assert_eq!(report.rel, mean_flags(&report.reliable));
    assert_eq!(report.gen, mean_flags(&report.general));
    assert_eq!(report.loc, mean_flags(&report.local));
    let avg = (report.rel + report.gen + report.loc) / 3.0;
    assert!((report.avg - avg).abs() < 1e-15);
    for v in [report.rel, report.gen, report.loc, report.avg] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(report.ppl.unwrap() > 0.0);
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let tok = tokenizer();
    let mut model = pretrained_backbone(&tok);
    // zero LM head -> exactly uniform predictive distribution
    model.lm_head = crate::numerics::Matrix::zeros(16, tok.vocab_size());
    let v = tok.vocab_size() as f64;
    let session = crate::editing::start_session(
        Arc::new(model),
        Arc::new(tok),
        records(),
        EditMode::Lifelong,
        AdaptorConfig::for_d_model(16),
        1,
    )
    .unwrap();
    let ppl = perplexity(&session, &[0, 1, 2, 3]).unwrap();
    assert!((ppl - v).abs() < 1e-9, "uniform ppl {ppl} != vocab {v}");
}

#[test]
fn lambda_zero_locality_is_exactly_one() {
    let s = setup();
    let mut session = s.session_for_test(EditMode::Lifelong);
    session
        .edit_batch(
            &EditBatch {
                record_ids: vec![0, 1, 2, 3],
                batch_index: 0,
            },
            &s.spec,
        )
        .unwrap();
    session.adaptor.config.lambda = 0.0;
    let (_, loc) = locality(&session, &[0, 1, 2, 3]).unwrap();
    assert_eq!(loc, 1.0);
    let report = evaluate(&session, &[0, 1, 2, 3], Stage::Final, None).unwrap();
    assert_eq!(report.loc, 1.0);
}

#[test]
fn consistency_identity_after_single_batch() {
    let s = setup();
    let mut session = s.session_for_test(EditMode::Lifelong);
    session
        .edit_batch(
            &EditBatch {
                record_ids: vec![0, 1, 2, 3],
                batch_index: 0,
            },
            &s.spec,
        )
        .unwrap();
    let m = consistency_study(&session).unwrap();
    assert_eq!(m.diag_mass, 1.0);
    assert_eq!(m.counts[0][0], 4);
}

#[test]
fn consistency_rows_sum_to_one() {
    let s = setup();
    let (_, session) = forgetting_study(
        &s,
        &EditPlan {
            batches: vec![vec![0, 1], vec![2, 3]],
            provenance: PlanProvenance::Given,
        },
        EditMode::Lifelong,
    )
    .unwrap();
    let m = consistency_study(&session).unwrap();
    for (i, row) in m.c.iter().enumerate() {
        let total: f64 = row.iter().sum();
        let count: usize = m.counts[i].iter().sum();
        if count > 0 {
            assert!((total - 1.0).abs() < 1e-12, "row {i} sums to {total}");
        }
    }
    assert!(m.diag_mass >= 0.0 && m.diag_mass <= 1.0);
}

#[test]
fn forgetting_single_batch_is_zero() {
    let s = setup();
    let plan = EditPlan {
        batches: vec![vec![0, 1, 2, 3]],
        provenance: PlanProvenance::Given,
    };
    let (study, _) = forgetting_study(&s, &plan, EditMode::Lifelong).unwrap();
    assert_eq!(study.immediate.len(), 1);
    assert_eq!(study.immediate[0].rel, study.final_[0].rel);
    assert_eq!(study.forgetting, 0.0);
}

#[test]
fn forgetting_study_is_deterministic() {
    let s = setup();
    let plan = EditPlan {
        batches: vec![vec![0, 1], vec![2, 3]],
        provenance: PlanProvenance::Given,
    };
    let run = || {
        let (study, session) = forgetting_study(&s, &plan, EditMode::Lifelong).unwrap();
        (
            study
                .immediate
                .iter()
                .map(|r| (r.rel, r.gen, r.loc))
                .collect::<Vec<_>>(),
            study.final_.iter().map(|r| r.rel).collect::<Vec<_>>(),
            session.adaptor.checksum(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn order_study_shapes_and_determinism() {
    let s = setup();
    let run = || order_sensitivity_study(&s, 2, 2, 2, EditMode::Lifelong, 100).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.trials.len(), 3, "2 random trials + 1 clustered");
    assert!(matches!(
        a.trials[2].provenance,
        PlanProvenance::Clustered { .. }
    ));
    for (x, y) in a.trials.iter().zip(&b.trials) {
        assert_eq!(x.score, y.score);
        assert_eq!(x.wbs_mean, y.wbs_mean);
        assert_eq!(x.bbs, y.bbs);
    }
    assert!(a.summary.min <= a.summary.mean && a.summary.mean <= a.summary.max);
    assert!(a.summary.stddev >= 0.0);
}

#[test]
fn layer_sweep_covers_every_layer() {
    let s = setup();
    let plan = EditPlan {
        batches: vec![vec![0, 1, 2, 3]],
        provenance: PlanProvenance::Given,
    };
    let rows = layer_sweep(&s, &plan, EditMode::Lifelong).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, 0);
    assert_eq!(rows[1].0, 1);
    for (_, r) in &rows {
        assert!((0.0..=1.0).contains(&r.avg));
    }
}

#[test]
fn moving_average_trailing_window() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ma = moving_average(&xs, 2);
    assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    assert_eq!(moving_average(&xs, 1), xs.to_vec());
}

#[test]
fn instance_vectors_concat_prompt_and_target() {
    let s = setup();
    let vs = instance_vectors(&s.backbone, &s.tokenizer, &s.records).unwrap();
    assert_eq!(vs.len(), 4);
    for v in &vs {
        assert_eq!(v.len(), 2 * s.backbone.config.d_model);
    }
}

impl StudySetup {
    fn session_for_test(&self, mode: EditMode) -> EditingSession {
        start_session(
            Arc::clone(&self.backbone),
            Arc::clone(&self.tokenizer),
            self.records.clone(),
            mode,
            self.adaptor_config.clone(),
            self.session_seed,
        )
        .unwrap()
    }
}
