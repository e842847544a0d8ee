//! Self-supervised training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::error::{BpregError, Result};
use crate::eval::{lmse, predict_landmark_scores, LmseAggregation, LmseResult, ReferenceTable};
use crate::landmarks::Annotations;
use crate::loss::{combined_loss, LossKind, ScoreBatch};
use crate::model::{build_model, hex, ModelConfig, SliceScoreModel};
use crate::optim::Adam;
use crate::par::Exec;
use crate::sampling::{sample_training_item, StepSampling, TrainingItem};
use crate::volume::PreprocessedVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Both counts must divide evenly by m.
    #[default]
    Strict,
    /// Integer division, remainders dropped.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub m: usize,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub step_sampling: StepSampling,
    pub learning_rate: f64,
    pub slices_per_batch: usize,
    pub total_slices_per_volume: usize,
    pub schedule_mode: ScheduleMode,
    pub seed: u64,
    pub model: ModelConfig,
    pub augmentation: AugmentationConfig,
    /// Annotated training volumes used for the reference table during validation.
    pub reference_volumes: usize,
    pub inference_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 4,
            loss_kind: LossKind::Heuristic,
            alpha: 0.0,
            beta: 0.01,
            step_sampling: StepSampling::default(),
            learning_rate: 1e-4,
            slices_per_batch: 256,
            total_slices_per_volume: 1920,
            schedule_mode: ScheduleMode::Strict,
            seed: 0,
            model: ModelConfig::vgg16(),
            augmentation: AugmentationConfig::default(),
            reference_volumes: 50,
            inference_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BpregError::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| BpregError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(BpregError::Config(format!("m = {} must be at least 2", self.m)));
        }
        if !(self.alpha >= 0.0) {
            return Err(BpregError::Config(format!("alpha = {} must be >= 0", self.alpha)));
        }
        if self.alpha > 0.0 && self.m < 3 {
            return Err(BpregError::Config("alpha > 0 requires m >= 3".into()));
        }
        if self.loss_kind == LossKind::None && self.alpha == 0.0 {
            return Err(BpregError::Config("loss kind none with alpha 0 has nothing to optimize".into()));
        }
        if !(self.beta > 0.0) {
            return Err(BpregError::Config(format!("beta = {} must be > 0", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(BpregError::Config("learning rate must be > 0".into()));
        }
        self.step_sampling.validate()?;
        self.augmentation.validate()?;
        self.model.validate()?;
        derive_schedule(self)?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub batch_size: usize,
    pub epochs: usize,
}

/// Volumes per batch and number of epochs implied by the slice budgets.
pub fn derive_schedule(cfg: &TrainConfig) -> Result<Schedule> {
    let m = cfg.m;
    if m == 0 {
        return Err(BpregError::Config("m must be positive".into()));
    }
    if cfg.schedule_mode == ScheduleMode::Strict {
        for (name, v) in [
            ("slices_per_batch", cfg.slices_per_batch),
            ("total_slices_per_volume", cfg.total_slices_per_volume),
        ] {
            if v % m != 0 {
                return Err(BpregError::Config(format!("{name} = {v} is not divisible by m = {m}")));
            }
        }
    }
    let s = Schedule {
        batch_size: cfg.slices_per_batch / m,
        epochs: cfg.total_slices_per_volume / m,
    };
    if s.batch_size == 0 || s.epochs == 0 {
        return Err(BpregError::Config(format!("schedule {s:?} is empty for m = {m}")));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_lmse: Option<f64>,
    pub val_lmse_se: Option<f64>,
    pub empty_batches: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `model.ckpt`, `last.ckpt`, `history.json` and `train_state.bin`.
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many epochs in total (for interrupted runs).
    pub stop_after: Option<usize>,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: SliceScoreModel,
    pub best_epoch: Option<usize>,
    pub last: SliceScoreModel,
    pub history: Vec<EpochRecord>,
}

/// Annotated training volumes forming the validation reference pool.
pub fn reference_pool<'a>(
    train: &'a [PreprocessedVolume],
    ann: &Annotations,
    limit: usize,
) -> Vec<&'a PreprocessedVolume> {
    train.iter().filter(|v| ann.get(&v.source_id).is_some()).take(limit).collect()
}

/// LMSE of `model` on `val`, with the reference table built from `reference`.
pub fn validation_lmse(
    model: &SliceScoreModel,
    reference: &[PreprocessedVolume],
    val: &[PreprocessedVolume],
    ann: &Annotations,
    exec: Exec,
) -> Result<LmseResult> {
    let table = ReferenceTable::build(&predict_landmark_scores(model, reference, ann, exec)?)?;
    lmse(&predict_landmark_scores(model, val, ann, exec)?, &table, LmseAggregation::VolumeFirst)
}

const STATE_MAGIC: &[u8; 8] = b"BPRGSTAT";

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    config_hash: String,
    next_epoch: usize,
    best_epoch: Option<usize>,
    best_lmse: Option<f64>,
    adam: Adam,
    history: Vec<EpochRecord>,
    n_params: usize,
}

struct State {
    header: StateHeader,
    params: Vec<f64>,
    best_params: Vec<f64>,
}

fn write_state(path: &Path, st: &State, adam: &Adam) -> Result<()> {
    let json = serde_json::to_vec(&st.header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for arr in [&st.params, &adam.m, &adam.v, &st.best_params] {
        for x in arr.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).and_then(|_| fs::rename(&tmp, path)).map_err(|e| BpregError::io(path, e))
}

fn read_state(path: &Path) -> Result<State> {
    let bytes = fs::read(path).map_err(|e| BpregError::io(path, e))?;
    let bad = |r: &str| BpregError::Checkpoint {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != STATE_MAGIC {
        return Err(bad("not a training state file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mut header: StateHeader = serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated"))?)
        .map_err(|e| bad(&e.to_string()))?;
    let n = header.n_params;
    let body = &bytes[16 + hlen..];
    if body.len() != 4 * 8 * n {
        return Err(bad("payload length mismatch"));
    }
    let arr = |k: usize| -> Vec<f64> {
        body[k * 8 * n..(k + 1) * 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    header.adam.m = arr(1);
    header.adam.v = arr(2);
    Ok(State {
        params: arr(0),
        best_params: arr(3),
        header,
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn sample_items(
    vols: &[&PreprocessedVolume],
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<TrainingItem>> {
    let jobs: Vec<(&PreprocessedVolume, u64)> = vols.iter().copied().zip(seeds.iter().copied()).collect();
    exec.try_map(&jobs, |(v, s)| {
        sample_training_item(v, cfg.m, &cfg.step_sampling, aug, &mut ChaCha8Rng::seed_from_u64(*s))
    })
}

/// Loss on one fixed, unaugmented item per validation volume.
fn validation_loss(model: &SliceScoreModel, val: &[PreprocessedVolume], cfg: &TrainConfig, exec: Exec) -> Result<Option<f64>> {
    let usable: Vec<&PreprocessedVolume> = val.iter().filter(|v| v.len() >= cfg.m).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let mut rng = epoch_rng(cfg.seed, usize::MAX - 1);
    let seeds: Vec<u64> = usable.iter().map(|_| rng.gen()).collect();
    let items = sample_items(&usable, cfg, &AugmentationConfig::disabled(), &seeds, exec)?;
    let slices: Vec<&Vec<f64>> = items.iter().flat_map(|it| it.slices.iter()).collect();
    let scores = exec.map(&slices, |s| model.score_slice(s));
    let batch = ScoreBatch::new(scores, cfg.m, items.iter().map(|it| it.delta_h).collect())?;
    Ok(Some(combined_loss(&batch, cfg.loss_kind, cfg.alpha, cfg.beta)?.value))
}

pub fn train(
    train_vols: &[PreprocessedVolume],
    val_vols: &[PreprocessedVolume],
    ann: &Annotations,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = derive_schedule(cfg)?;
    if train_vols.is_empty() {
        return Err(BpregError::Config("no training volumes".into()));
    }
    let exec = opts.exec;
    let mut model = build_model(&cfg.model, cfg.seed)?;
    let n = model.param_count();
    let mut adam = Adam::new(cfg.learning_rate, n);
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_lmse: Option<f64> = None;
    let mut best_epoch = None;
    let mut start_epoch = 0;

    let state_path = opts.out_dir.as_ref().map(|d| d.join("train_state.bin"));
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|e| BpregError::io(d, e))?;
    }
    if opts.resume {
        let path = state_path.as_ref().ok_or_else(|| BpregError::Config("resume needs an output directory".into()))?;
        let st = read_state(path)?;
        if st.header.config_hash != cfg.hash() {
            return Err(BpregError::Config("training state was written with a different config".into()));
        }
        if st.header.n_params != n {
            return Err(BpregError::Config("training state parameter count mismatch".into()));
        }
        model.params = st.params;
        best_params = st.best_params;
        best_lmse = st.header.best_lmse;
        best_epoch = st.header.best_epoch;
        start_epoch = st.header.next_epoch;
        history = st.header.history;
        adam = st.header.adam;
        log::info!("resuming at epoch {start_epoch}");
    }

    let reference: Vec<PreprocessedVolume> = reference_pool(train_vols, ann, cfg.reference_volumes).into_iter().cloned().collect();
    let have_val = !val_vols.is_empty() && !reference.is_empty();
    let end_epoch = opts.stop_after.map_or(schedule.epochs, |s| s.min(schedule.epochs));

    for epoch in start_epoch..end_epoch {
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_vols.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.gen()).collect();
        let mut losses = Vec::new();
        let mut empty = 0;
        for (chunk, chunk_seeds) in order.chunks(schedule.batch_size).zip(seeds.chunks(schedule.batch_size)) {
            let vols: Vec<&PreprocessedVolume> = chunk.iter().map(|&i| &train_vols[i]).collect();
            let items = sample_items(&vols, cfg, &cfg.augmentation, chunk_seeds, exec)?;
            let step = model.step_gradient(&items, cfg.loss_kind, cfg.alpha, cfg.beta, exec)?;
            if !step.loss.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
                return Err(BpregError::Divergence {
                    epoch,
                    detail: format!("loss {} after {} batches", step.loss, losses.len()),
                });
            }
            if step.empty_warning {
                empty += 1;
            }
            losses.push(step.loss);
            adam.update(&mut model.params, &step.grad);
        }
        let train_loss = crate::stats::mean(&losses);
        let val_loss = if val_vols.is_empty() { None } else { validation_loss(&model, val_vols, cfg, exec)? };
        let val = if have_val {
            match validation_lmse(&model, &reference, val_vols, ann, exec) {
                Ok(r) => Some(r),
                Err(BpregError::Reference(msg)) => {
                    log::warn!("epoch {epoch}: validation LMSE unavailable: {msg}");
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_lmse: val.as_ref().map(|r| r.mean),
            val_lmse_se: val.as_ref().map(|r| r.se),
            empty_batches: empty,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val LMSE {}",
            rec.train_loss,
            rec.val_lmse.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        let improved = match (rec.val_lmse, best_lmse) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => !have_val,
        };
        if improved {
            best_lmse = rec.val_lmse.or(best_lmse);
            best_epoch = Some(epoch);
            best_params.clone_from(&model.params);
            if let Some(d) = &opts.out_dir {
                with_params(&model, best_params.clone()).save(&d.join("model.ckpt"))?;
            }
        }
        history.push(rec);
        if let (Some(d), Some(sp)) = (&opts.out_dir, &state_path) {
            model.save(&d.join("last.ckpt"))?;
            write_history(&d.join("history.json"), &history)?;
            let st = State {
                header: StateHeader {
                    config_hash: cfg.hash(),
                    next_epoch: epoch + 1,
                    best_epoch,
                    best_lmse,
                    adam: adam.clone(),
                    history: history.clone(),
                    n_params: n,
                },
                params: model.params.clone(),
                best_params: best_params.clone(),
            };
            write_state(sp, &st, &adam)?;
        }
    }
    Ok(TrainOutcome {
        best: with_params(&model, best_params),
        best_epoch,
        last: model,
        history,
    })
}

fn with_params(model: &SliceScoreModel, params: Vec<f64>) -> SliceScoreModel {
    let mut m = model.clone();
    m.params = params;
    m
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(history)?;
    fs::write(path, text).map_err(|e| BpregError::io(path, e))
}
