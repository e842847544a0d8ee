//! The slice scoring network: a convolutional backbone followed by a fixed
//! head (1x1 conv to 512 channels, ReLU, global average pooling, linear).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BpregError, Result};
use crate::loss::{combined_loss, LossKind, ScoreBatch};
use crate::nn::{LayerSpec, Network, Shape, Tape};
use crate::par::Exec;
use crate::sampling::TrainingItem;
use crate::volume::{PreprocessedVolume, SLICE_PIXELS, SLICE_SIZE};

const MAGIC: &[u8; 8] = b"BPRGCKPT";
const VERSION: u32 = 1;
pub const HEAD_CHANNELS: usize = 512;
/// Slices per gradient chunk. Chunk sums are reduced in order, so the
/// gradient does not depend on the number of threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vgg16,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    #[serde(default)]
    pub pretrained: bool,
    /// Checkpoint providing initial weights when `pretrained` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<std::path::PathBuf>,
    #[serde(default = "one")]
    pub input_channels: usize,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: Backbone::Tiny,
            pretrained: false,
            pretrained_weights: None,
            input_channels: 1,
        }
    }

    pub fn vgg16() -> Self {
        ModelConfig {
            backbone: Backbone::Vgg16,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 {
            return Err(BpregError::Config(format!(
                "input_channels must be 1, got {}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let conv3 = |cout| LayerSpec::Conv {
            cout,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut specs = Vec::new();
        match self.backbone {
            Backbone::Tiny => {
                specs.push(LayerSpec::AvgPool2);
                for c in [8, 16, 32] {
                    specs.extend([conv3(c), LayerSpec::Relu, LayerSpec::MaxPool2]);
                }
            }
            Backbone::Vgg16 => {
                specs.push(LayerSpec::Replicate(3));
                for (c, n) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
                    for _ in 0..n {
                        specs.extend([conv3(c), LayerSpec::Relu]);
                    }
                    specs.push(LayerSpec::MaxPool2);
                }
            }
        }
        specs.extend([
            LayerSpec::Conv {
                cout: HEAD_CHANNELS,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { nout: 1 },
        ]);
        specs
    }

    pub fn network(&self) -> Network {
        Network::new(
            Shape {
                c: 1,
                h: SLICE_SIZE,
                w: SLICE_SIZE,
            },
            &self.layer_specs(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SliceScoreModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub seed: u64,
    net: Network,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<SliceScoreModel> {
    cfg.validate()?;
    let net = cfg.network();
    let params = if cfg.pretrained {
        let path = cfg.pretrained_weights.as_ref().ok_or_else(|| {
            BpregError::Config("pretrained weights requested but no weights file configured".into())
        })?;
        let donor = SliceScoreModel::load(path)?;
        if donor.params.len() != net.param_count() {
            return Err(BpregError::Checkpoint {
                path: path.clone(),
                reason: format!(
                    "holds {} parameters, {:?} backbone needs {}",
                    donor.params.len(),
                    cfg.backbone,
                    net.param_count()
                ),
            });
        }
        donor.params
    } else {
        net.init_params(&mut ChaCha8Rng::seed_from_u64(seed))
    };
    Ok(SliceScoreModel {
        config: cfg.clone(),
        params,
        seed,
        net,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    param_count: usize,
    param_sha256: String,
}

/// Loss value and parameter gradient of one update step.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub scores: Vec<f64>,
    pub empty_warning: bool,
}

impl SliceScoreModel {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn checksum(&self) -> String {
        params_sha256(&self.params)
    }

    pub fn score_slice(&self, pixels: &[f64]) -> f64 {
        self.net.forward(&self.params, pixels)[0]
    }

    pub fn score_slice_f32(&self, pixels: &[f32]) -> f64 {
        let x: Vec<f64> = pixels.iter().map(|&v| v as f64).collect();
        self.score_slice(&x)
    }

    /// Score of a slice with every pixel at the air floor.
    pub fn empty_slice_score(&self) -> f64 {
        self.score_slice(&vec![-1.0; SLICE_PIXELS])
    }

    /// Scores every slice in order. Slices are independent, so the batch size
    /// only controls how many are scheduled together.
    pub fn predict_scores(&self, v: &PreprocessedVolume, batch_size: usize, exec: Exec) -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        for chunk in v.slices.chunks(batch_size.max(1)) {
            out.extend(exec.map(chunk, |s| self.score_slice_f32(s.as_f32())));
        }
        out
    }

    /// Scores the given slice indices only.
    pub fn predict_indices(&self, v: &PreprocessedVolume, indices: &[usize], exec: Exec) -> Vec<f64> {
        exec.map(indices, |&i| self.score_slice_f32(v.slices[i].as_f32()))
    }

    pub fn step_gradient(
        &self,
        items: &[TrainingItem],
        kind: LossKind,
        alpha: f64,
        beta: f64,
        exec: Exec,
    ) -> Result<StepGradient> {
        let m = items.first().map(|it| it.slices.len()).ok_or_else(|| {
            BpregError::Contract("empty batch".into())
        })?;
        if items.iter().any(|it| it.slices.len() != m) {
            return Err(BpregError::Contract("items differ in slice count".into()));
        }
        let slices: Vec<&[f64]> = items.iter().flat_map(|it| it.slices.iter().map(|s| s.as_slice())).collect();
        let passes: Vec<(f64, Tape)> = exec.map(&slices, |x| {
            let (y, tape) = self.net.forward_train(&self.params, x);
            (y[0], tape)
        });
        let scores: Vec<f64> = passes.iter().map(|p| p.0).collect();
        let batch = ScoreBatch::new(scores.clone(), m, items.iter().map(|it| it.delta_h).collect())?;
        let loss = combined_loss(&batch, kind, alpha, beta)?;
        let n_chunks = slices.len().div_ceil(GRAD_CHUNK);
        let partial = exec.map_range(n_chunks, |c| {
            let mut g = vec![0.0; self.params.len()];
            let end = ((c + 1) * GRAD_CHUNK).min(slices.len());
            for i in c * GRAD_CHUNK..end {
                if loss.grad[i] != 0.0 {
                    self.net.backward(&self.params, &passes[i].1, &[loss.grad[i]], &mut g);
                }
            }
            g
        });
        let mut grad = vec![0.0; self.params.len()];
        for g in partial {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(StepGradient {
            loss: loss.value,
            grad,
            scores,
            empty_warning: loss.empty_warning,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.seed,
            param_count: self.params.len(),
            param_sha256: self.checksum(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(24 + json.len() + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| BpregError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| BpregError::io(path, e))?;
        let bad = |reason: &str| BpregError::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash mismatch"));
        }
        header.config.validate()?;
        let raw = &bytes[20 + hlen..];
        if raw.len() != 8 * header.param_count {
            return Err(bad("parameter payload has the wrong length"));
        }
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params_sha256(&params) != header.param_sha256 {
            return Err(bad("parameter checksum mismatch"));
        }
        let net = header.config.network();
        if net.param_count() != params.len() {
            return Err(bad("parameter count does not match the architecture"));
        }
        Ok(SliceScoreModel {
            config: header.config,
            params,
            seed: header.seed,
            net,
        })
    }
}

fn params_sha256(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
