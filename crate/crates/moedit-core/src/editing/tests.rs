use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::adaptor::AdaptorConfig;
use crate::backbone::{pretrain, BackboneConfig, PretrainSpec};

fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::from_words([
        "the", "color", "of", "ka", "lo", "mi", "is", "red", "blue", "green", "gold",
    ])
}

fn tiny_backbone(tok: &Tokenizer, pretrained: bool) -> BackboneModel {
    let config = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: tok.vocab_size(),
        max_seq_len: 16,
        host_layer: 1,
    };
    let mut model = BackboneModel::new(config, &mut Rng::new(7)).unwrap();
    if pretrained {
        // teach it "the color of ka is red" style facts
        let corpus: Vec<Vec<u32>> = ["the color of ka is red", "the color of lo is blue"]
            .iter()
            .map(|s| {
                let mut ids = vec![BOS];
                ids.extend(tok.encode(s));
                ids.push(EOS);
                ids
            })
            .collect();
        pretrain(
            &mut model,
            &corpus,
            &PretrainSpec {
                steps: 150,
                batch_size: 2,
                lr: 1e-2,
                seed: 3,
            },
        )
        .unwrap();
    } else {
        model.freeze();
    }
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

fn two_records() -> Vec<EditRecord> {
    vec![
        record(
            "the color of ka is",
            "green",
            "ka color is",
            "the color of lo is",
        ),
        record(
            "the color of mi is",
            "gold",
            "mi color is",
            "the color of lo is",
        ),
    ]
}

fn adaptor_config() -> AdaptorConfig {
    let mut c = AdaptorConfig::for_d_model(16);
    c.d_expert = 16;
    c.n_fixed_experts = 3;
    c
}

fn fast_spec() -> TrainSpec {
    TrainSpec {
        lr: 1e-2,
        max_steps_per_batch: 300,
        early_stop_interval: 10,
        proj_lr_scale: 0.0,
        key_lr_scale: 0.1,
        seed: 5,
    }
}

fn make_session(mode: EditMode, seed: u64) -> EditingSession {
    let tok = Arc::new(tiny_tokenizer());
    let model = Arc::new(tiny_backbone(&tok, true));
    start_session(model, tok, two_records(), mode, adaptor_config(), seed).unwrap()
}

#[test]
fn start_session_modes_and_determinism() {
    let s = make_session(EditMode::Lifelong, 1);
    assert_eq!(s.n_experts(), 0);
    let c = make_session(EditMode::ConventionalLifelong, 1);
    assert_eq!(c.n_experts(), 3);
    assert!(c.adaptor.experts.iter().all(|e| !e.frozen));

    let a = make_session(EditMode::Lifelong, 9);
    let b = make_session(EditMode::Lifelong, 9);
    assert_eq!(a.adaptor.checksum(), b.adaptor.checksum());
}

#[test]
fn start_session_requires_frozen_backbone() {
    let tok = Arc::new(tiny_tokenizer());
    let model = BackboneModel::new(
        BackboneConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 16,
            vocab_size: tok.vocab_size(),
            max_seq_len: 16,
            host_layer: 0,
        },
        &mut Rng::new(1),
    )
    .unwrap();
    let err = start_session(
        Arc::new(model),
        tok,
        two_records(),
        EditMode::Lifelong,
        adaptor_config(),
        1,
    );
    assert!(matches!(err, Err(EditError::State(_))));
}

#[test]
fn locality_capture_fills_expected_tokens() {
    let s = make_session(EditMode::Lifelong, 2);
    for r in &s.records {
        assert!(!r.locality_expected.is_empty());
    }
    // pre-edit locality trivially holds
    for rid in 0..s.records.len() {
        assert!(s.locality_unchanged(rid).unwrap());
    }
}

#[test]
fn empty_batch_is_an_error() {
    let mut s = make_session(EditMode::Lifelong, 3);
    let err = s.edit_batch(
        &EditBatch {
            record_ids: vec![],
            batch_index: 0,
        },
        &fast_spec(),
    );
    assert!(matches!(err, Err(EditError::Argument(_))));
}

#[test]
fn edit_batch_reaches_full_reliability_and_freezes_previous() {
    let mut s = make_session(EditMode::Lifelong, 4);
    let r0 = s
        .edit_batch(
            &EditBatch {
                record_ids: vec![0],
                batch_index: 0,
            },
            &fast_spec(),
        )
        .unwrap();
    assert_eq!(
        r0.immediate_reliability, 1.0,
        "first batch did not converge"
    );
    assert_eq!(s.n_experts(), 1);
    let e0 = s.adaptor.expert_checksum(0);
    let k0 = s.adaptor.key_checksum(0);

    let r1 = s
        .edit_batch(
            &EditBatch {
                record_ids: vec![1],
                batch_index: 1,
            },
            &fast_spec(),
        )
        .unwrap();
    assert_eq!(r1.immediate_reliability, 1.0);
    assert_eq!(s.n_experts(), 2);
    // previous expert and key are byte-identical after further training
    assert_eq!(s.adaptor.expert_checksum(0), e0);
    assert_eq!(s.adaptor.key_checksum(0), k0);
    assert!(s.adaptor.experts[0].frozen);
    assert!(s.backbone_intact());

    // loss went down within each batch
    assert!(r0.loss_curve.last().unwrap() <= r0.loss_curve.first().unwrap());
    assert!(r1.loss_curve.last().unwrap() <= r1.loss_curve.first().unwrap());
}

#[test]
fn run_lifelong_inserts_one_expert_per_batch() {
    let mut s = make_session(EditMode::Lifelong, 5);
    let plan = EditPlan {
        batches: vec![vec![0], vec![1]],
        provenance: crate::planner::PlanProvenance::Given,
    };
    let reports = s.run_lifelong(&plan, &fast_spec()).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(s.n_experts(), 2);
    assert_eq!(s.adaptor.experts.iter().filter(|e| e.frozen).count(), 1);
    assert!(s.route_log.iter().all(|r| r.is_some()));
}

#[test]
fn sessions_are_deterministic_end_to_end() {
    let run = |seed| {
        let mut s = make_session(EditMode::Lifelong, seed);
        let plan = EditPlan {
            batches: vec![vec![0], vec![1]],
            provenance: crate::planner::PlanProvenance::Given,
        };
        s.run_lifelong(&plan, &fast_spec()).unwrap();
        (s.adaptor.checksum(), s.route_log.clone())
    };
    assert_eq!(run(11), run(11));
}

#[test]
fn early_stop_on_already_satisfied_batch() {
    // Edit the model toward what it already predicts: reliability is 1.0
    // at the first check, so the batch stops at the interval boundary.
    let tok = Arc::new(tiny_tokenizer());
    let model = Arc::new(tiny_backbone(&tok, true));
    let known = vec![record(
        "the color of ka is",
        "red",
        "ka color is",
        "the color of lo is",
    )];
    let mut s = start_session(model, tok, known, EditMode::Lifelong, adaptor_config(), 6).unwrap();
    let spec = fast_spec();
    let report = s
        .edit_batch(
            &EditBatch {
                record_ids: vec![0],
                batch_index: 0,
            },
            &spec,
        )
        .unwrap();
    assert!(report.early_stopped);
    assert!(report.steps_run <= spec.early_stop_interval);
    assert_eq!(report.immediate_reliability, 1.0);
}

#[test]
fn conventional_mode_trains_router_without_insertion() {
    let mut s = make_session(EditMode::ConventionalLifelong, 7);
    let router_before = s.adaptor.mlp_router.as_ref().unwrap().checksum();
    let report = s
        .edit_batch(
            &EditBatch {
                record_ids: vec![0, 1],
                batch_index: 0,
            },
            &fast_spec(),
        )
        .unwrap();
    assert_eq!(s.n_experts(), 3, "no insertion in conventional mode");
    assert_ne!(
        s.adaptor.mlp_router.as_ref().unwrap().checksum(),
        router_before
    );
    assert!(report.immediate_reliability > 0.0);
}

#[test]
fn zero_output_expert_leaves_model_unchanged_at_step_zero() {
    let mut s = make_session(EditMode::Lifelong, 8);
    let (prompt, _, _, _) = s.encoded(0);
    let prompt = prompt.to_vec();
    let mut ids = vec![BOS];
    ids.extend_from_slice(&prompt);
    let before = s.backbone.forward(&ids, None).unwrap().logits;
    // insert an expert but do not train
    let mean = s.instance_embedding(0).to_vec();
    s.adaptor.add_expert(&mean, &mut Rng::new(0)).unwrap();
    let after = s.hooked_logits(&ids, &prompt).unwrap();
    assert_eq!(before.as_slice(), after.as_slice());
}

#[test]
fn lambda_zero_bypasses_adaptor_exactly() {
    let mut s = make_session(EditMode::Lifelong, 9);
    s.edit_batch(
        &EditBatch {
            record_ids: vec![0, 1],
            batch_index: 0,
        },
        &fast_spec(),
    )
    .unwrap();
    let (prompt, _, _, _) = s.encoded(0);
    let prompt = prompt.to_vec();
    let mut ids = vec![BOS];
    ids.extend_from_slice(&prompt);
    let plain = s.backbone.forward(&ids, None).unwrap().logits;
    s.adaptor.config.lambda = 0.0;
    let bypassed = s.hooked_logits(&ids, &prompt).unwrap();
    assert_eq!(plain.as_slice(), bypassed.as_slice());
}

#[test]
fn eval_does_not_mutate_session() {
    let mut s = make_session(EditMode::Lifelong, 10);
    s.edit_batch(
        &EditBatch {
            record_ids: vec![0, 1],
            batch_index: 0,
        },
        &fast_spec(),
    )
    .unwrap();
    let adaptor_sum = s.adaptor.checksum();
    for rid in 0..2 {
        let _ = s.edit_success(rid).unwrap();
        let _ = s.paraphrase_success(rid).unwrap();
        let _ = s.locality_unchanged(rid).unwrap();
        let _ = s.inference_route(rid).unwrap();
    }
    let _ = s.target_perplexity(&[0, 1]).unwrap();
    assert_eq!(s.adaptor.checksum(), adaptor_sum);
    assert!(s.backbone_intact());
}

#[test]
fn kv_token_level_mode_trains() {
    let tok = Arc::new(tiny_tokenizer());
    let model = Arc::new(tiny_backbone(&tok, true));
    let mut cfg = adaptor_config();
    cfg.router_mode = crate::adaptor::RouterMode::KvTokenLevel;
    let mut s = start_session(model, tok, two_records(), EditMode::Lifelong, cfg, 12).unwrap();
    let report = s
        .edit_batch(
            &EditBatch {
                record_ids: vec![0],
                batch_index: 0,
            },
            &fast_spec(),
        )
        .unwrap();
    assert_eq!(report.immediate_reliability, 1.0);
}

#[test]
fn perplexity_drops_after_editing_targets() {
    let mut s = make_session(EditMode::Lifelong, 13);
    let before = s.target_perplexity(&[0, 1]).unwrap();
    s.edit_batch(
        &EditBatch {
            record_ids: vec![0, 1],
            batch_index: 0,
        },
        &fast_spec(),
    )
    .unwrap();
    let after = s.target_perplexity(&[0, 1]).unwrap();
    assert!(after < before, "ppl did not drop: {before} -> {after}");
}
