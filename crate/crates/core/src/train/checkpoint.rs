//! Checkpoint container: a directory holding `manifest.json` plus one
//! MTNS tensor file per parameter and optimizer accumulator. Writes go to
//! a temporary sibling directory that is renamed into place.
//!
//! Parameter keys mirror the model naming (`stream{m}/layer{k}/weight`,
//! `disc{m}/...`, `joint/...`, `discJ/...`); a key maps onto the relative
//! file path `<key>.mtns`. Optimizer accumulators live under
//! `optim/<group>/<key>.{m,v}.mtns`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, JointTrainState, StreamTrainState, StreamsTrainState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{FusionConfig, MultiStreamModel};
use crate::nn::GeneratorSpec;
use crate::tensor::{read_mtns, write_mtns, Element, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Topology {
    pub k: usize,
    pub generator: GeneratorSpec,
    pub sources: Vec<String>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_i: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimGroup {
    pub t: u64,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// "streams" after phase 1, "mustgan" for a full model.
    pub kind: String,
    pub dtype: String,
    pub topology: Topology,
    /// Completed epochs of the phase this checkpoint belongs to.
    pub epoch: usize,
    pub config: TrainConfig,
    pub rng_state: RngState,
    pub tensors: Vec<String>,
    pub optim: BTreeMap<String, OptimGroup>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&path, format!("invalid manifest: {e}")))
    }
}

fn tensor_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.mtns"))
}

fn collect_params<E: Element>(
    model: &MultiStreamModel<E>,
    include_joint: bool,
) -> Vec<(String, Tensor<E>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, t| {
        let is_joint = name.starts_with("joint/") || name.starts_with("discJ/");
        if include_joint || !is_joint {
            out.push((name, t.clone()));
        }
    });
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn write_optim_group<E: Element>(dir: &Path, group: &str, opt: &Adam<E>) -> Result<OptimGroup> {
    let mut params = Vec::new();
    for (name, m, v) in opt.export_state() {
        write_mtns(dir.join(format!("optim/{group}/{name}.m.mtns")), &m)?;
        write_mtns(dir.join(format!("optim/{group}/{name}.v.mtns")), &v)?;
        params.push(name);
    }
    Ok(OptimGroup {
        t: opt.step_count(),
        params,
    })
}

fn read_optim_group<E: Element>(dir: &Path, group: &str, meta: &OptimGroup, opt: &mut Adam<E>) -> Result<()> {
    let mut entries = Vec::new();
    for name in &meta.params {
        let m = read_mtns(dir.join(format!("optim/{group}/{name}.m.mtns")))?;
        let v = read_mtns(dir.join(format!("optim/{group}/{name}.v.mtns")))?;
        entries.push((name.clone(), m, v));
    }
    opt.import_state(meta.t, entries);
    Ok(())
}

/// Replaces `final_dir` with `tmp_dir` atomically-by-rename.
fn swap_into_place(tmp_dir: &Path, final_dir: &Path) -> Result<()> {
    if final_dir.exists() {
        fs::remove_dir_all(final_dir).map_err(|e| Error::io(final_dir, e))?;
    }
    if let Some(parent) = final_dir.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::rename(tmp_dir, final_dir).map_err(|e| Error::io(final_dir, e))?;
    Ok(())
}

fn tmp_dir_for(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "ckpt".into());
    dir.with_file_name(format!(".{name}.tmp"))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(&path, format!("manifest serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Saves the K+1 streams (phase-1 output) with their optimizer state.
pub fn save_streams<E: Element>(
    dir: impl AsRef<Path>,
    model: &MultiStreamModel<E>,
    state: &StreamsTrainState<E>,
    cfg: &TrainConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = tmp_dir_for(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let params = collect_params(model, false);
    let mut keys = Vec::with_capacity(params.len());
    for (key, t) in &params {
        write_mtns(tensor_path(&tmp, key), t)?;
        keys.push(key.clone());
    }

    let mut optim = BTreeMap::new();
    for (idx, st) in state.per_stream.iter().enumerate() {
        optim.insert(
            format!("stream{}_gen", idx + 1),
            write_optim_group(&tmp, &format!("stream{}_gen", idx + 1), &st.gen_opt)?,
        );
        optim.insert(
            format!("stream{}_disc", idx + 1),
            write_optim_group(&tmp, &format!("stream{}_disc", idx + 1), &st.disc_opt)?,
        );
    }

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: "streams".into(),
        dtype: E::DTYPE.to_string(),
        topology: Topology {
            k: model.k(),
            generator: model.gen_spec,
            sources: model.sources.clone(),
            target: model.target.clone(),
            fusion_i: None,
        },
        epoch: state.next_epoch - 1,
        config: *cfg,
        rng_state: RngState {
            seed: cfg.seed,
            next_epoch: state.next_epoch,
        },
        tensors: keys,
        optim,
    };
    write_manifest(&tmp, &manifest)?;
    swap_into_place(&tmp, dir)
}

/// Saves the full model (streams + joint network) with phase-2 state.
pub fn save_model<E: Element>(
    dir: impl AsRef<Path>,
    model: &MultiStreamModel<E>,
    state: &JointTrainState<E>,
    cfg: &TrainConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    let tmp = tmp_dir_for(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let params = collect_params(model, true);
    let mut keys = Vec::with_capacity(params.len());
    for (key, t) in &params {
        write_mtns(tensor_path(&tmp, key), t)?;
        keys.push(key.clone());
    }

    let mut optim = BTreeMap::new();
    optim.insert(
        "joint_gen".to_string(),
        write_optim_group(&tmp, "joint_gen", &state.gen_opt)?,
    );
    optim.insert(
        "joint_disc".to_string(),
        write_optim_group(&tmp, "joint_disc", &state.disc_opt)?,
    );

    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: "mustgan".into(),
        dtype: E::DTYPE.to_string(),
        topology: Topology {
            k: model.k(),
            generator: model.gen_spec,
            sources: model.sources.clone(),
            target: model.target.clone(),
            fusion_i: Some(model.fusion.i),
        },
        epoch: state.next_epoch - 1,
        config: *cfg,
        rng_state: RngState {
            seed: cfg.seed,
            next_epoch: state.next_epoch,
        },
        tensors: keys,
        optim,
    };
    write_manifest(&tmp, &manifest)?;
    swap_into_place(&tmp, dir)
}

fn validate_manifest(dir: &Path, manifest: &Manifest, expect_kind: &str) -> Result<()> {
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.kind != expect_kind {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!("checkpoint kind is '{}', expected '{expect_kind}'", manifest.kind),
        ));
    }
    Ok(())
}

/// Overwrites model parameters from the checkpoint's tensor files.
/// Missing files, shape mismatches, and unmatched keys name the offender.
fn load_params_into<E: Element>(
    dir: &Path,
    keys: &[String],
    model: &mut MultiStreamModel<E>,
    include_joint: bool,
) -> Result<()> {
    use std::collections::HashMap;
    let mut loaded: HashMap<String, Tensor<E>> = HashMap::new();
    for key in keys {
        let path = tensor_path(dir, key);
        let t = read_mtns(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::Format {
                path: path.display().to_string(),
                detail: format!("missing tensor '{key}': {source}"),
            },
            Error::Format { detail, .. } => Error::Format {
                path: path.display().to_string(),
                detail: format!("corrupt tensor '{key}': {detail}"),
            },
            other => other,
        })?;
        loaded.insert(key.clone(), t);
    }
    let mut failure: Option<Error> = None;
    model.visit_params_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let is_joint = name.starts_with("joint/") || name.starts_with("discJ/");
        if is_joint && !include_joint {
            return;
        }
        match loaded.remove(&name) {
            Some(t) => {
                if t.shape() != p.shape() {
                    failure = Some(Error::Format {
                        path: tensor_path(dir, &name).display().to_string(),
                        detail: format!(
                            "tensor '{name}' has shape {:?} but the model expects {:?}",
                            t.shape(),
                            p.shape()
                        ),
                    });
                } else {
                    *p = t;
                }
            }
            None => {
                failure = Some(Error::Format {
                    path: dir.join("manifest.json").display().to_string(),
                    detail: format!("checkpoint is missing tensor '{name}'"),
                });
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Format {
            path: dir.join("manifest.json").display().to_string(),
            detail: format!("checkpoint tensor '{extra}' does not match any model parameter"),
        });
    }
    Ok(())
}

/// Loads a phase-1 streams checkpoint and assembles a model around it for
/// the given fusion position. The joint network is freshly initialized
/// from `(seed, fusion.i)`; stream parameters come from the files.
pub fn load_streams<E: Element>(
    dir: impl AsRef<Path>,
    fusion: FusionConfig,
) -> Result<(MultiStreamModel<E>, StreamsTrainState<E>, TrainConfig)> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    validate_manifest(dir, &manifest, "streams")?;
    if fusion.k != manifest.topology.k {
        return Err(Error::Config(format!(
            "checkpoint was trained with K={} but fusion config says K={}",
            manifest.topology.k, fusion.k
        )));
    }
    let mut model = MultiStreamModel::assemble(
        manifest.topology.k,
        manifest.topology.generator,
        fusion,
        manifest.rng_state.seed,
    )?
    .with_roles(manifest.topology.sources.clone(), manifest.topology.target.clone())?;
    load_params_into(dir, &manifest.tensors, &mut model, false)?;

    let mut state = StreamsTrainState::fresh(manifest.topology.k + 1, &manifest.config);
    state.next_epoch = manifest.rng_state.next_epoch;
    for (idx, st) in state.per_stream.iter_mut().enumerate() {
        restore_stream_optim(dir, &manifest, idx, st)?;
    }
    Ok((model, state, manifest.config))
}

fn restore_stream_optim<E: Element>(
    dir: &Path,
    manifest: &Manifest,
    idx: usize,
    st: &mut StreamTrainState<E>,
) -> Result<()> {
    if let Some(meta) = manifest.optim.get(&format!("stream{}_gen", idx + 1)) {
        read_optim_group(dir, &format!("stream{}_gen", idx + 1), meta, &mut st.gen_opt)?;
    }
    if let Some(meta) = manifest.optim.get(&format!("stream{}_disc", idx + 1)) {
        read_optim_group(dir, &format!("stream{}_disc", idx + 1), meta, &mut st.disc_opt)?;
    }
    Ok(())
}

/// Loads a full model checkpoint, restoring phase-2 optimizer state.
pub fn load_model<E: Element>(
    dir: impl AsRef<Path>,
) -> Result<(MultiStreamModel<E>, JointTrainState<E>, TrainConfig)> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    validate_manifest(dir, &manifest, "mustgan")?;
    let fusion_i = manifest.topology.fusion_i.ok_or_else(|| {
        Error::format(dir.join("manifest.json"), "full checkpoint lacks fusion_i")
    })?;
    let fusion = FusionConfig::new(fusion_i, manifest.topology.k);
    let mut model = MultiStreamModel::assemble(
        manifest.topology.k,
        manifest.topology.generator,
        fusion,
        manifest.rng_state.seed,
    )?
    .with_roles(manifest.topology.sources.clone(), manifest.topology.target.clone())?;
    load_params_into(dir, &manifest.tensors, &mut model, true)?;

    let mut state = JointTrainState::fresh(&manifest.config);
    state.next_epoch = manifest.rng_state.next_epoch;
    if let Some(meta) = manifest.optim.get("joint_gen") {
        read_optim_group(dir, "joint_gen", meta, &mut state.gen_opt)?;
    }
    if let Some(meta) = manifest.optim.get("joint_disc") {
        read_optim_group(dir, "joint_disc", meta, &mut state.disc_opt)?;
    }
    Ok((model, state, manifest.config))
}
