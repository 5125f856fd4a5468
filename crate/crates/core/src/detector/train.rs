use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use super::loss::{match_instances, set_loss, targets_for, FrozenMatch, GtTarget, LossParts};
use super::model::{derived_rng, stream, Detector};
use crate::decoder::AttentionMask;
use crate::error::{Error, Result};
use crate::geometry::Instance;
use crate::metrics::{evaluate, EvalReport, MetricConfig};
use crate::numcore::{adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, ParamStore, Tensor2};
use crate::synthgen::{BevRaster, Scene};

pub const CHECKPOINT_FILE: &str = "checkpoint.imck";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "metrics.jsonl";

const HASH_TENSOR: &str = "meta.config_hash";
const EPOCH_TENSOR: &str = "train.epoch";
const ADAM_T_TENSOR: &str = "adam.t";

/// A scene with its training targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: u64,
    pub raster: BevRaster,
    pub gts: Vec<Instance>,
    pub targets: Vec<GtTarget>,
}

pub fn prepare(scenes: &[Scene], cfg: &DetectorConfig) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            if s.instances.len() > cfg.num_instances {
                return Err(Error::InvalidArgument(format!(
                    "scene {} has {} instances but num_instances is {}",
                    s.scene_id,
                    s.instances.len(),
                    cfg.num_instances
                )));
            }
            Ok(PreparedScene {
                scene_id: s.scene_id,
                raster: s.raster.clone(),
                gts: s.instances.clone(),
                targets: targets_for(&s.instances, cfg.points_per_instance, cfg.x_range, cfg.y_range)?,
            })
        })
        .collect()
}

/// Per-layer matches; `None` for layers that carry no loss.
pub type LayerMatches = Vec<Option<FrozenMatch>>;

/// Forward, matching and loss on one scene; accumulates gradients into
/// `store` when `backward` is set. With `frozen` the given matches are
/// reused instead of re-running the assignment. Returns the loss summed
/// over the layers that carry one, and the matches used.
pub fn scene_loss(
    det: &Detector,
    store: &mut ParamStore,
    scene: &PreparedScene,
    masks: &[AttentionMask],
    frozen: Option<&[Option<FrozenMatch>]>,
    backward: bool,
) -> Result<(LossParts, LayerMatches)> {
    let pass = det.forward(store, &scene.raster, masks)?;
    let cfg = &det.cfg;
    let n_layers = pass.heads.len();
    let mut total = LossParts::default();
    let mut grads = Vec::with_capacity(n_layers);
    let mut matches = Vec::with_capacity(n_layers);
    for (l, head) in pass.heads.iter().enumerate() {
        if !(cfg.aux_loss || l + 1 == n_layers) {
            grads.push(None);
            matches.push(None);
            continue;
        }
        let m = match frozen.and_then(|f| f.get(l).cloned().flatten()) {
            Some(m) => m,
            None => match_instances(&head.probs, &head.points, &scene.targets, cfg.lambda_cls, cfg.lambda_pts)?,
        };
        let (parts, dl, dp) = set_loss(&head.inst_logits, &head.points, &scene.targets, &m, cfg.lambda_cls, cfg.lambda_pts)?;
        total.cls += parts.cls;
        total.pts += parts.pts;
        grads.push(Some((dl, dp)));
        matches.push(Some(m));
    }
    if backward {
        det.backward(store, &pass, &grads)?;
    }
    Ok((total, matches))
}

/// Optimizer state, parameters and progress; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

fn hash_tensor(cfg: &DetectorConfig) -> Tensor2 {
    let bytes = cfg.hash_bytes();
    let words: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor2::from_vec(1, words.len(), words).expect("8 words")
}

pub fn save_checkpoint(path: &Path, cfg: &DetectorConfig, state: &TrainState) -> Result<()> {
    let mut owned: Vec<(String, Tensor2)> = Vec::new();
    for (name, m) in &state.adam.m {
        owned.push((format!("adam.m/{name}"), m.clone()));
    }
    for (name, v) in &state.adam.v {
        owned.push((format!("adam.v/{name}"), v.clone()));
    }
    owned.push((ADAM_T_TENSOR.into(), Tensor2::full(1, 1, state.adam.t as f64)));
    owned.push((EPOCH_TENSOR.into(), Tensor2::full(1, 1, state.epoch as f64)));
    owned.push((HASH_TENSOR.into(), hash_tensor(cfg)));
    let tensors = state
        .store
        .iter()
        .map(|(n, p)| (n, &p.value))
        .chain(owned.iter().map(|(n, t)| (n.as_str(), t)));
    write_checkpoint(path, tensors)
}

/// Loads a checkpoint into a freshly initialized model layout, verifying
/// the config hash and every parameter shape.
pub fn load_checkpoint(path: &Path, det: &Detector, fresh: &ParamStore) -> Result<TrainState> {
    let tensors = read_checkpoint(path)?;
    let mut store = fresh.clone();
    let mut adam = AdamState::default();
    let mut epoch = None;
    let mut hash = None;
    let mut seen = 0;
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("adam.m/") {
            adam.m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam.v/") {
            adam.v.insert(p.to_string(), t);
        } else if name == ADAM_T_TENSOR {
            adam.t = t.get(0, 0) as u64;
        } else if name == EPOCH_TENSOR {
            epoch = Some(t.get(0, 0) as usize);
        } else if name == HASH_TENSOR {
            hash = Some(t);
        } else if store.contains(&name) {
            if store.value(&name).shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    store.value(&name).shape()
                )));
            }
            *store.value_mut(&name) = t;
            seen += 1;
        } else {
            return Err(Error::CheckpointMismatch(format!("unexpected parameter {name}")));
        }
    }
    if hash.as_ref() != Some(&hash_tensor(&det.cfg)) {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written under a different configuration (config hash {} expected)",
            path.display(),
            det.cfg.hash_hex()
        )));
    }
    if seen != store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {seen} of {} model parameters",
            store.len()
        )));
    }
    for (name, m) in adam.m.iter().chain(adam.v.iter()) {
        if !store.contains(name) || store.value(name).shape() != m.shape() {
            return Err(Error::CheckpointMismatch(format!("optimizer state for {name} does not fit the model")));
        }
    }
    Ok(TrainState {
        store,
        adam,
        epoch: epoch.ok_or_else(|| Error::CheckpointMismatch("missing train.epoch".into()))?,
    })
}

pub fn metric_config(cfg: &DetectorConfig) -> MetricConfig {
    MetricConfig {
        topo_centerline_only: cfg.topo_centerline_only,
        ..Default::default()
    }
}

/// Predicts every scene and scores the predictions.
pub fn evaluate_model(det: &Detector, store: &ParamStore, scenes: &[PreparedScene]) -> Result<EvalReport> {
    let evals = scenes
        .iter()
        .map(|s| Ok(det.predict(store, &s.raster)?.to_scene_eval(&s.gts)))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&evals, &metric_config(&det.cfg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config_hash: String,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "TOPO")]
    pub topo: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub final_report: Option<EvalReport>,
}

/// Splits a dataset into training scenes and the held-out tail.
pub fn split(scenes: &[Scene], cfg: &DetectorConfig) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    if scenes.len() <= cfg.eval_scenes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} scenes; need more than eval_scenes = {}",
            scenes.len(),
            cfg.eval_scenes
        )));
    }
    let cut = scenes.len() - cfg.eval_scenes;
    Ok((prepare(&scenes[..cut], cfg)?, prepare(&scenes[cut..], cfg)?))
}

/// Trains on `scenes` and writes checkpoint, canonical config and log to `out_dir`.
///
/// All randomness is keyed by `(seed, epoch, position)`, so a run resumed
/// from an epoch checkpoint continues bit for bit.
pub fn train(
    scenes: &[Scene],
    cfg: &DetectorConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_set, eval_set) = split(scenes, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut fresh = ParamStore::new();
    let det = Detector::init(cfg, &mut fresh)?;
    let mut state = match &cfg.resume {
        Some(path) => load_checkpoint(path, &det, &fresh)?,
        None => TrainState {
            store: fresh.clone(),
            adam: AdamState::default(),
            epoch: 0,
        },
    };

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let cfg_path = out_dir.join(CONFIG_FILE);
    let mut canonical = cfg.clone();
    canonical.resume = None;
    fs::write(&cfg_path, canonical.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))?;

    let header = LogHeader {
        config_hash: cfg.hash_hex(),
        train_scenes: train_set.len(),
        eval_scenes: eval_set.len(),
    };
    let mut log_lines = vec![serde_json::to_string(&header).expect("header serializes")];
    let mut epochs = Vec::new();
    if state.epoch > 0 {
        // keep the earlier epochs of a resumed run so the log matches an uninterrupted one
        if let Ok(text) = fs::read_to_string(&log_path) {
            let mut lines = text.lines();
            if lines.next() == Some(log_lines[0].as_str()) {
                for line in lines {
                    match serde_json::from_str::<EpochLog>(line) {
                        Ok(e) if e.epoch <= state.epoch => {
                            log_lines.push(line.to_string());
                            epochs.push(e);
                        }
                        _ => break,
                    }
                }
            }
        }
    }
    write_lines(&log_path, &log_lines)?;

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut final_report = None;
    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, stream::SHUFFLE, epoch as u64, 0));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            state.store.zero_grads();
            for (k, &i) in batch.iter().enumerate() {
                let scene = &train_set[i];
                let pos = (b * cfg.batch_size + k) as u64;
                let masks = det.draw_masks(&mut derived_rng(cfg.seed, stream::MASK, epoch as u64, pos), true);
                let (parts, _) = scene_loss(&det, &mut state.store, scene, &masks, None, true).map_err(|e| {
                    Error::NonFinite(format!("training diverged at step {step} (scene {}): {e}", scene.scene_id))
                })?;
                loss_sum += parts.total();
            }
            state.store.scale_grads(1.0 / batch.len() as f64);
            adam_step(&mut state.store, &mut state.adam, &adam_cfg);
        }
        state.epoch = epoch + 1;
        let evaluate_now = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        let report = if evaluate_now && !eval_set.is_empty() {
            Some(evaluate_model(&det, &state.store, &eval_set)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: state.epoch,
            loss: loss_sum / train_set.len() as f64,
            map: report.as_ref().map(|r| r.map),
            topo: report.as_ref().map(|r| r.topo.f1),
        };
        save_checkpoint(&ckpt, cfg, &state)?;
        log_lines.push(serde_json::to_string(&entry).expect("log entry serializes"));
        write_lines(&log_path, &log_lines)?;
        on_epoch(&entry);
        epochs.push(entry);
        final_report = report;
    }
    if state.epoch == 0 || !ckpt.exists() {
        save_checkpoint(&ckpt, cfg, &state)?;
    }
    Ok(TrainSummary {
        checkpoint: ckpt,
        log: log_path,
        epochs,
        final_report,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads `config.txt` next to a checkpoint and loads the model weights.
pub fn load_trained(checkpoint: &Path) -> Result<(Detector, ParamStore)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = DetectorConfig::parse(&text)?;
    let mut fresh = ParamStore::new();
    let det = Detector::init(&cfg, &mut fresh)?;
    let state = load_checkpoint(checkpoint, &det, &fresh)?;
    Ok((det, state.store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, RasterSpec, SceneConfig};

    pub(crate) fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            num_instances: 12,
            points_per_instance: 4,
            dim: 8,
            layers: 1,
            patch: 10,
            raster_height: 60,
            raster_width: 30,
            epochs: 2,
            batch_size: 2,
            eval_scenes: 2,
            lr: 3e-3,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_scenes(n: usize) -> Vec<Scene> {
        let spec = RasterSpec {
            resolution: 1.0,
            ..Default::default()
        };
        generate_dataset(&SceneConfig::default(), n, &spec).unwrap().0
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let s = train(&tiny_scenes(10), &tiny_cfg(), dir.path(), |_| {}).unwrap();
        assert_eq!(s.epochs.len(), 2);
        assert!(s.epochs[1].loss < s.epochs[0].loss, "{:?}", s.epochs);
        assert!(s.epochs[1].map.is_some());
    }

    #[test]
    fn identical_runs_write_identical_files() {
        let scenes = tiny_scenes(6);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&scenes, &tiny_cfg(), a.path(), |_| {}).unwrap();
        train(&scenes, &tiny_cfg(), b.path(), |_| {}).unwrap();
        for f in [CHECKPOINT_FILE, LOG_FILE, CONFIG_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let log = fs::read_to_string(a.path().join(LOG_FILE)).unwrap();
        let header: LogHeader = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(header.config_hash, tiny_cfg().hash_hex());
    }

    #[test]
    fn resume_continues_bit_for_bit() {
        let scenes = tiny_scenes(6);
        let full = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 3;
        train(&scenes, &cfg, full.path(), |_| {}).unwrap();

        let part = tempfile::tempdir().unwrap();
        let mut first = cfg.clone();
        first.epochs = 1;
        train(&scenes, &first, part.path(), |_| {}).unwrap();
        let mut rest = cfg.clone();
        let saved = part.path().join("epoch1.imck");
        fs::copy(part.path().join(CHECKPOINT_FILE), &saved).unwrap();
        rest.resume = Some(saved);
        train(&scenes, &rest, part.path(), |_| {}).unwrap();

        for f in [CHECKPOINT_FILE, LOG_FILE] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_under_other_config_is_rejected() {
        let scenes = tiny_scenes(5);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        train(&scenes, &cfg, dir.path(), |_| {}).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        other.resume = Some(dir.path().join(CHECKPOINT_FILE));
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(train(&scenes, &other, out.path(), |_| {}), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn trained_model_reloads() {
        let scenes = tiny_scenes(5);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let s = train(&scenes, &cfg, dir.path(), |_| {}).unwrap();
        let (det, store) = load_trained(&s.checkpoint).unwrap();
        let p = prepare(&scenes, &cfg).unwrap();
        let r = evaluate_model(&det, &store, &p[3..]).unwrap();
        assert_eq!(Some(r.map), s.epochs[0].map);
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&tiny_scenes(2), &tiny_cfg(), dir.path(), |_| {}).is_err());
    }
}
