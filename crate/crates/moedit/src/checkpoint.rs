//! Versioned JSON checkpoints with per-tensor checksums.
//!
//! Three kinds: the frozen backbone, the adaptor (loadable on its own,
//! validated by d_model), and a full editing session (backbone reference
//! plus adaptor, records with locality captures, route log, plan, and
//! RNG state, enough to resume after any batch). JSON stores `f64`s
//! with shortest-round-trip formatting, so reload is bit-exact; the
//! checksums verify that.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use moedit_core::adaptor::{AdaptorConfig, AdaptorState, ExpertFfn, KeyVector};
use moedit_core::backbone::{
    checksum_tensors, BackboneConfig, BackboneModel, Layer, Norm, Tokenizer,
};
use moedit_core::editing::{EditMode, EditRecord, EditingSession};
use moedit_core::numerics::{checksum_f64s, Matrix};
use moedit_core::planner::EditPlan;

const BACKBONE_FORMAT: &str = "moedit-backbone";
const ADAPTOR_FORMAT: &str = "moedit-adaptor";
const SESSION_FORMAT: &str = "moedit-session";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    rows: usize,
    cols: usize,
    checksum: String,
    data: Vec<f64>,
}

impl TensorBlob {
    fn of(name: &str, m: &Matrix) -> TensorBlob {
        TensorBlob {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            checksum: format!("{:016x}", m.checksum()),
            data: m.as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> anyhow::Result<Matrix> {
        let got = format!("{:016x}", checksum_f64s(&self.data));
        if got != self.checksum {
            bail!(
                "tensor {}: checksum mismatch (stored {}, computed {got})",
                self.name,
                self.checksum
            );
        }
        Matrix::from_vec(self.rows, self.cols, self.data)
            .map_err(|e| anyhow::anyhow!("tensor {}: {e}", self.name))
    }
}

#[derive(Serialize, Deserialize)]
pub struct BackboneCheckpoint {
    format: String,
    version: u32,
    pub config: BackboneConfig,
    frozen: bool,
    /// Vocabulary in id order, so the tokenizer reloads with the model.
    vocab: Vec<String>,
    tensors: Vec<TensorBlob>,
    model_checksum: String,
}

fn backbone_tensor_names(config: &BackboneConfig) -> Vec<String> {
    let mut names = vec!["embed".to_string(), "pos".to_string()];
    for i in 0..config.n_layers {
        for suffix in [
            "ln1.gamma",
            "ln1.beta",
            "wq",
            "wk",
            "wv",
            "wo",
            "ln2.gamma",
            "ln2.beta",
            "ffn_in",
            "ffn_out",
        ] {
            names.push(format!("layer{i}.{suffix}"));
        }
    }
    names.push("final_norm.gamma".to_string());
    names.push("final_norm.beta".to_string());
    names.push("lm_head".to_string());
    names
}

pub fn save_backbone(
    path: &Path,
    model: &BackboneModel,
    tokenizer: &Tokenizer,
) -> anyhow::Result<()> {
    let mut tensors = Vec::new();
    tensors.push(TensorBlob::of("embed", &model.embed));
    tensors.push(TensorBlob::of("pos", &model.pos));
    for (i, l) in model.layers.iter().enumerate() {
        tensors.push(TensorBlob::of(&format!("layer{i}.ln1.gamma"), &l.ln1.gamma));
        tensors.push(TensorBlob::of(&format!("layer{i}.ln1.beta"), &l.ln1.beta));
        tensors.push(TensorBlob::of(&format!("layer{i}.wq"), &l.wq));
        tensors.push(TensorBlob::of(&format!("layer{i}.wk"), &l.wk));
        tensors.push(TensorBlob::of(&format!("layer{i}.wv"), &l.wv));
        tensors.push(TensorBlob::of(&format!("layer{i}.wo"), &l.wo));
        tensors.push(TensorBlob::of(&format!("layer{i}.ln2.gamma"), &l.ln2.gamma));
        tensors.push(TensorBlob::of(&format!("layer{i}.ln2.beta"), &l.ln2.beta));
        tensors.push(TensorBlob::of(&format!("layer{i}.ffn_in"), &l.ffn_in));
        tensors.push(TensorBlob::of(&format!("layer{i}.ffn_out"), &l.ffn_out));
    }
    tensors.push(TensorBlob::of("final_norm.gamma", &model.final_norm.gamma));
    tensors.push(TensorBlob::of("final_norm.beta", &model.final_norm.beta));
    tensors.push(TensorBlob::of("lm_head", &model.lm_head));

    let ckpt = BackboneCheckpoint {
        format: BACKBONE_FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        frozen: model.frozen(),
        vocab: tokenizer.words().to_vec(),
        tensors,
        model_checksum: format!("{:016x}", model.checksum()),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> anyhow::Result<(BackboneModel, Tokenizer)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt: BackboneCheckpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ckpt.format != BACKBONE_FORMAT {
        bail!("{} is not a backbone checkpoint", path.display());
    }
    if ckpt.version != VERSION {
        bail!("unsupported backbone checkpoint version {}", ckpt.version);
    }
    let expected = backbone_tensor_names(&ckpt.config);
    if ckpt.tensors.len() != expected.len() {
        bail!(
            "expected {} tensors, found {}",
            expected.len(),
            ckpt.tensors.len()
        );
    }
    let mut mats = Vec::with_capacity(ckpt.tensors.len());
    for (blob, name) in ckpt.tensors.into_iter().zip(&expected) {
        if &blob.name != name {
            bail!(
                "tensor order mismatch: expected {name}, found {}",
                blob.name
            );
        }
        mats.push(blob.into_matrix()?);
    }
    let mut it = mats.into_iter();
    let embed = it.next().unwrap();
    let pos = it.next().unwrap();
    let mut layers = Vec::with_capacity(ckpt.config.n_layers);
    for _ in 0..ckpt.config.n_layers {
        let ln1_gamma = it.next().unwrap();
        let ln1_beta = it.next().unwrap();
        let wq = it.next().unwrap();
        let wk = it.next().unwrap();
        let wv = it.next().unwrap();
        let wo = it.next().unwrap();
        let ln2_gamma = it.next().unwrap();
        let ln2_beta = it.next().unwrap();
        let ffn_in = it.next().unwrap();
        let ffn_out = it.next().unwrap();
        layers.push(Layer {
            ln1: Norm {
                gamma: ln1_gamma,
                beta: ln1_beta,
            },
            wq,
            wk,
            wv,
            wo,
            ln2: Norm {
                gamma: ln2_gamma,
                beta: ln2_beta,
            },
            ffn_in,
            ffn_out,
        });
    }
    let final_gamma = it.next().unwrap();
    let final_beta = it.next().unwrap();
    let lm_head = it.next().unwrap();
    let model = BackboneModel::from_parts(
        ckpt.config,
        embed,
        pos,
        layers,
        Norm {
            gamma: final_gamma,
            beta: final_beta,
        },
        lm_head,
        ckpt.frozen,
    )?;
    let got = format!("{:016x}", model.checksum());
    if got != ckpt.model_checksum {
        bail!(
            "model checksum mismatch: stored {}, computed {got}",
            ckpt.model_checksum
        );
    }
    let tokenizer = Tokenizer::from_words(ckpt.vocab);
    if tokenizer.vocab_size() != model.config.vocab_size {
        bail!(
            "vocabulary size {} does not match model vocab {}",
            tokenizer.vocab_size(),
            model.config.vocab_size
        );
    }
    Ok((model, tokenizer))
}

#[derive(Serialize, Deserialize)]
struct KeyBlob {
    data: Vec<f64>,
    frozen: bool,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
struct ExpertBlob {
    w_in: TensorBlob,
    w_out: TensorBlob,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
pub struct AdaptorCheckpoint {
    format: String,
    version: u32,
    d_model: usize,
    config: AdaptorConfig,
    experts: Vec<ExpertBlob>,
    keys: Vec<KeyBlob>,
    w_down: TensorBlob,
    w_up: TensorBlob,
    mlp_router: Option<TensorBlob>,
    checksum: String,
}

pub fn adaptor_checkpoint(state: &AdaptorState) -> AdaptorCheckpoint {
    AdaptorCheckpoint {
        format: ADAPTOR_FORMAT.to_string(),
        version: VERSION,
        d_model: state.d_model,
        config: state.config.clone(),
        experts: state
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| ExpertBlob {
                w_in: TensorBlob::of(&format!("expert{i}.w_in"), &e.w_in),
                w_out: TensorBlob::of(&format!("expert{i}.w_out"), &e.w_out),
                frozen: e.frozen,
            })
            .collect(),
        keys: state
            .keys
            .iter()
            .map(|k| KeyBlob {
                data: k.v.clone(),
                frozen: k.frozen,
                checksum: format!("{:016x}", checksum_tensors([k.v.as_slice()])),
            })
            .collect(),
        w_down: TensorBlob::of("w_down", &state.w_down),
        w_up: TensorBlob::of("w_up", &state.w_up),
        mlp_router: state
            .mlp_router
            .as_ref()
            .map(|r| TensorBlob::of("mlp_router", r)),
        checksum: format!("{:016x}", state.checksum()),
    }
}

pub fn restore_adaptor(
    ckpt: AdaptorCheckpoint,
    expected_d_model: usize,
) -> anyhow::Result<AdaptorState> {
    if ckpt.format != ADAPTOR_FORMAT {
        bail!("not an adaptor checkpoint");
    }
    if ckpt.version != VERSION {
        bail!("unsupported adaptor checkpoint version {}", ckpt.version);
    }
    if ckpt.d_model != expected_d_model {
        bail!(
            "adaptor d_model {} does not match backbone d_model {expected_d_model}",
            ckpt.d_model
        );
    }
    let mut experts = Vec::with_capacity(ckpt.experts.len());
    for e in ckpt.experts {
        experts.push(ExpertFfn {
            w_in: e.w_in.into_matrix()?,
            w_out: e.w_out.into_matrix()?,
            frozen: e.frozen,
        });
    }
    let mut keys = Vec::with_capacity(ckpt.keys.len());
    for k in ckpt.keys {
        let got = format!("{:016x}", checksum_tensors([k.data.as_slice()]));
        if got != k.checksum {
            bail!("key checksum mismatch");
        }
        keys.push(KeyVector {
            v: k.data,
            frozen: k.frozen,
        });
    }
    let state = AdaptorState {
        config: ckpt.config,
        d_model: ckpt.d_model,
        experts,
        keys,
        w_down: ckpt.w_down.into_matrix()?,
        w_up: ckpt.w_up.into_matrix()?,
        mlp_router: ckpt.mlp_router.map(|r| r.into_matrix()).transpose()?,
    };
    let got = format!("{:016x}", state.checksum());
    if got != ckpt.checksum {
        bail!(
            "adaptor checksum mismatch: stored {}, computed {got}",
            ckpt.checksum
        );
    }
    Ok(state)
}

pub fn save_adaptor(path: &Path, state: &AdaptorState) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string(&adaptor_checkpoint(state))?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_adaptor(path: &Path, expected_d_model: usize) -> anyhow::Result<AdaptorState> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt: AdaptorCheckpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    restore_adaptor(ckpt, expected_d_model)
}

#[derive(Serialize, Deserialize)]
pub struct SessionCheckpoint {
    format: String,
    version: u32,
    pub mode: EditMode,
    backbone_checksum: String,
    adaptor: AdaptorCheckpoint,
    records: Vec<EditRecord>,
    route_log: Vec<Option<usize>>,
    pub batches_done: usize,
    rng_state: u64,
    pub plan: EditPlan,
}

pub fn save_session(path: &Path, session: &EditingSession, plan: &EditPlan) -> anyhow::Result<()> {
    let ckpt = SessionCheckpoint {
        format: SESSION_FORMAT.to_string(),
        version: VERSION,
        mode: session.mode,
        backbone_checksum: format!("{:016x}", session.backbone.checksum()),
        adaptor: adaptor_checkpoint(&session.adaptor),
        records: session.records.clone(),
        route_log: session.route_log.clone(),
        batches_done: session.batches_done,
        rng_state: session.rng_state(),
        plan: plan.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_session(
    path: &Path,
    backbone: Arc<BackboneModel>,
    tokenizer: Arc<Tokenizer>,
) -> anyhow::Result<(EditingSession, EditPlan)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt: SessionCheckpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ckpt.format != SESSION_FORMAT {
        bail!("{} is not a session checkpoint", path.display());
    }
    if ckpt.version != VERSION {
        bail!("unsupported session checkpoint version {}", ckpt.version);
    }
    let got = format!("{:016x}", backbone.checksum());
    if got != ckpt.backbone_checksum {
        bail!(
            "session was built on a different backbone (stored {}, loaded {got})",
            ckpt.backbone_checksum
        );
    }
    let adaptor = restore_adaptor(ckpt.adaptor, backbone.config.d_model)?;
    let session = EditingSession::resume(
        backbone,
        tokenizer,
        ckpt.records,
        adaptor,
        ckpt.mode,
        ckpt.route_log,
        ckpt.batches_done,
        ckpt.rng_state,
    )?;
    Ok((session, ckpt.plan))
}
