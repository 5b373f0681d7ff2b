//! Three-stage training orchestration: audio contrastive pre-training,
//! multimodal audio–video pre-training, and supervised fine-tuning of a
//! tagging head on the frozen backbone.
//!
//! Determinism contract: every random draw comes from a ChaCha stream derived
//! from (seed, purpose, epoch, track), so a run is reproduced exactly by its
//! seed, and resuming from an epoch checkpoint continues the same stream.
//! Checkpoints contain no timestamps; two runs with the same seed and config
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::make_training_pair;
use crate::config::{AppConfig, Stage, StageConfig};
use crate::contrastive::{
    build_multimodal_batch, build_unimodal_batch, nt_xent_loss, nt_xent_loss_and_grad,
};
use crate::corpus::{Manifest, Split, TrackRecord};
use crate::error::{Error, Result};
use crate::eval::{
    macro_average, overlap_inference, LabelMatrix, MetricKind, PredictionMatrix, TagPredictor,
};
use crate::features::{decode_audio, load_second_embeddings, AudioWaveform, SecondEmbeddingSeq};
use crate::models::{
    batch_second_slices, Adam, AdamConfig, Param, Projector, ProjectorConfig, SampleCnn, TagHead,
    TagHeadConfig, VideoEncoder,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCMRCKPT";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Derives an independent ChaCha stream from the run seed and a purpose path,
/// e.g. `derive_rng(seed, &["stage1", "epoch", "3"])`. Streams for different
/// paths are uncorrelated, and the scheme makes checkpointed RNG state
/// unnecessary: (seed, epoch) pins every draw.
pub fn derive_rng(seed: u64, path: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in path {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// SHA-256 hex digest of a tensor's little-endian f64 bytes.
pub fn tensor_hash(t: &ArrayD<f64>) -> String {
    let mut h = Sha256::new();
    for v in t.iter() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Per-tensor hashes, used to verify freezing contracts bitwise.
pub fn parameter_hashes(tensors: &BTreeMap<String, ArrayD<f64>>) -> BTreeMap<String, String> {
    tensors.iter().map(|(k, v)| (k.clone(), tensor_hash(v))).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    stage: Stage,
    epoch: usize,
    best_epoch: usize,
    best_metric: Option<f64>,
    step_count: u64,
    seed: u64,
    config_toml: String,
    tag_vocabulary: Vec<String>,
    tensors: Vec<TensorInfo>,
}

/// A versioned training snapshot: stage tag, epoch counters, config echo,
/// and named f64 tensors (parameters, normalization statistics, optimizer
/// moments). RNG state is implied by (seed, epoch) under [`derive_rng`].
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub step_count: u64,
    pub seed: u64,
    pub config: AppConfig,
    pub tag_vocabulary: Vec<String>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Binary layout: magic, schema version (u32 LE), header length (u64 LE),
    /// JSON header, tensor payload (f64 LE, header order), SHA-256 checksum.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_metric: self.best_metric,
            step_count: self.step_count,
            seed: self.seed,
            config_toml: self.config.to_toml()?,
            tag_vocabulary: self.tag_vocabulary.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("encode header: {e}")))?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for t in self.tensors.values() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version {version} is not supported (expected \
                 {CHECKPOINT_SCHEMA_VERSION}); no migration path exists"
            )));
        }
        let body_len = bytes.len() - 32;
        let stored = &bytes[body_len..];
        let digest = Sha256::digest(&bytes[..body_len]);
        if stored != digest.as_slice() {
            return Err(bad("integrity check failed: checksum mismatch".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if 20 + header_len > body_len {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| bad(format!("decode header: {e}")))?;
        if header.schema_version != version {
            return Err(bad("header/container schema_version disagree".into()));
        }
        let config: AppConfig = toml::from_str(&header.config_toml)
            .map_err(|e| bad(format!("config echo does not parse: {e}")))?;

        let mut offset = 20 + header_len;
        let mut tensors = BTreeMap::new();
        for info in &header.tensors {
            let n: usize = info.shape.iter().product();
            if offset + n * 8 > body_len {
                return Err(bad(format!("tensor {} runs past end of file", info.name)));
            }
            let data: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            offset += n * 8;
            let t = ArrayD::from_shape_vec(info.shape.clone(), data)
                .map_err(|e| bad(format!("tensor {}: {e}", info.name)))?;
            if tensors.insert(info.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", info.name)));
            }
        }
        if offset != body_len {
            return Err(bad("trailing bytes after tensor payload".into()));
        }
        Ok(Checkpoint {
            stage: header.stage,
            epoch: header.epoch,
            best_epoch: header.best_epoch,
            best_metric: header.best_metric,
            step_count: header.step_count,
            seed: header.seed,
            config,
            tag_vocabulary: header.tag_vocabulary,
            tensors,
        })
    }
}

fn params_to_tensors(params: Vec<&Param>) -> Vec<(String, ArrayD<f64>)> {
    params.into_iter().map(|p| (p.name.clone(), p.value.clone())).collect()
}

fn load_params(params: Vec<&mut Param>, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    for p in params {
        let t = tensors
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// One appended metric observation, also a row of the run's metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only `epoch,split,metric,value` log backing each run directory.
pub struct MetricsLog {
    path: PathBuf,
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::write(path, "epoch,split,metric,value\n").map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), records: Vec::new() })
    }

    pub fn append(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{epoch},{split},{metric},{value}").map_err(|e| Error::io(&self.path, e))?;
        self.records.push(MetricRecord {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
        Ok(())
    }
}

/// Reads a metrics CSV written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let (header, rows) = crate::eval::read_csv(path)?;
    if header != ["epoch", "split", "metric", "value"] {
        return Err(Error::Data(format!("{}: not a metrics log", path.display())));
    }
    rows.into_iter()
        .map(|r| {
            Ok(MetricRecord {
                epoch: r[0].parse().map_err(|e| Error::Data(format!("bad epoch: {e}")))?,
                split: r[1].clone(),
                metric: r[2].clone(),
                value: r[3].parse().map_err(|e| Error::Data(format!("bad value: {e}")))?,
            })
        })
        .collect()
}

/// What a finished stage leaves behind.
#[derive(Debug)]
pub struct StageOutcome {
    /// best-epoch checkpoint (`best.ckpt`)
    pub checkpoint_path: PathBuf,
    /// most recent epoch checkpoint (`last.ckpt`)
    pub last_path: PathBuf,
    /// stage-2 only: the exported audio-encoder-only artifact
    pub export_path: Option<PathBuf>,
    pub best_epoch: usize,
    pub history: Vec<MetricRecord>,
    pub metrics_path: PathBuf,
}

fn load_split_audio(manifest: &Manifest, split: Split) -> Result<Vec<(TrackRecord, AudioWaveform)>> {
    manifest
        .split(split)
        .map(|r| Ok((r.clone(), decode_audio(Path::new(&r.audio_path), &r.track_id)?)))
        .collect()
}

/// Deterministic evaluation crops for contrastive validation: the
/// start-aligned and end-aligned segments of each track, zero-padded when the
/// track is shorter than one segment.
fn fixed_crop(samples: &[f64], n: usize, from_end: bool) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if samples.len() >= n {
        let start = if from_end { samples.len() - n } else { 0 };
        out.copy_from_slice(&samples[start..start + n]);
    } else {
        out[..samples.len()].copy_from_slice(samples);
    }
    out
}

fn rows_to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut a = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        a.row_mut(i).assign(&Array1::from(r.clone()));
    }
    a
}

fn adam_for(stage_cfg: &StageConfig) -> Adam {
    Adam::new(AdamConfig {
        learning_rate: stage_cfg.learning_rate,
        weight_decay: stage_cfg.weight_decay,
        ..AdamConfig::default()
    })
}

/// Contrastive validation loss over fixed unaugmented crop pairs.
fn contrastive_val_loss(
    cnn: &mut SampleCnn,
    projector: &mut Projector,
    waveforms: &[(TrackRecord, AudioWaveform)],
    stage_cfg: &StageConfig,
) -> Result<f64> {
    let n_samples = cnn.cfg.required_input_samples();
    let mut total = 0.0;
    let mut batches = 0.0_f64;
    for chunk in waveforms.chunks(stage_cfg.batch_size) {
        let left: Vec<Vec<f64>> =
            chunk.iter().map(|(_, w)| fixed_crop(&w.samples, n_samples, false)).collect();
        let right: Vec<Vec<f64>> =
            chunk.iter().map(|(_, w)| fixed_crop(&w.samples, n_samples, true)).collect();
        let mut stacked = left;
        stacked.extend(right);
        let emb = cnn.forward(&rows_to_array(&stacked), false)?;
        let proj = projector.forward(&emb, false);
        let n = chunk.len();
        let batch = build_unimodal_batch(
            proj.slice(ndarray::s![..n, ..]).to_owned(),
            proj.slice(ndarray::s![n.., ..]).to_owned(),
        )?;
        total += nt_xent_loss(&batch, &stage_cfg.loss_config())?;
        batches += 1.0;
    }
    Ok(total / batches.max(1.0))
}

struct BestTracker {
    /// larger is better (losses are negated before tracking)
    best: Option<f64>,
    best_epoch: usize,
}

impl BestTracker {
    fn new(prior: Option<f64>, prior_epoch: usize) -> Self {
        BestTracker { best: prior, best_epoch: prior_epoch }
    }

    fn improved(&mut self, epoch: usize, value: f64) -> bool {
        if self.best.map_or(true, |b| value > b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }
}

/// Stage 1: contrastive pre-training of the audio encoder on augmented crop
/// pairs. Checkpoints every epoch (`last.ckpt`) and keeps the epoch with the
/// lowest validation loss (`best.ckpt`). `resume` continues a `last.ckpt`
/// run as if it had never been interrupted.
pub fn pretrain_audio(
    manifest: &Manifest,
    cfg: &AppConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<StageOutcome> {
    let stage_cfg = &cfg.audio_pretrain;
    let train = load_split_audio(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let valid = load_split_audio(manifest, Split::Valid)?;
    let val_set: &[(TrackRecord, AudioWaveform)] = if valid.is_empty() { &train } else { &valid };

    let mut cnn = SampleCnn::new(
        cfg.samplecnn.clone(),
        &mut derive_rng(cfg.seed, &["init", "samplecnn"]),
    )?;
    let proj_cfg = ProjectorConfig { in_dim: cfg.samplecnn.out_dim, proj_dim: cfg.projector.proj_dim };
    let mut projector =
        Projector::new("audio_proj", proj_cfg, &mut derive_rng(cfg.seed, &["init", "audio_proj"]))?;
    let mut adam = adam_for(stage_cfg);

    let mut start_epoch = 0usize;
    let mut tracker = BestTracker::new(None, 0);
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.stage != Stage::AudioPretrain {
            return Err(Error::Checkpoint(format!(
                "cannot resume stage audio_pretrain from a {} checkpoint",
                ckpt.stage
            )));
        }
        cnn.load_named_tensors(&ckpt.tensors)?;
        load_params(projector.params_mut(), &ckpt.tensors)?;
        adam.load_state_tensors(ckpt.step_count, &ckpt.tensors);
        start_epoch = ckpt.epoch;
        tracker = BestTracker::new(ckpt.best_metric, ckpt.best_epoch);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = MetricsLog::create(&metrics_path)?;

    let make_ckpt = |cnn: &SampleCnn,
                     projector: &Projector,
                     adam: &Adam,
                     epoch: usize,
                     tracker: &BestTracker| {
        let mut tensors: BTreeMap<String, ArrayD<f64>> = cnn.named_tensors().into_iter().collect();
        tensors.extend(params_to_tensors(projector.params()));
        tensors.extend(adam.state_tensors());
        Checkpoint {
            stage: Stage::AudioPretrain,
            epoch,
            best_epoch: tracker.best_epoch,
            best_metric: tracker.best,
            step_count: adam.step_count,
            seed: cfg.seed,
            config: cfg.clone(),
            tag_vocabulary: Vec::new(),
            tensors,
        }
    };

    if stage_cfg.epochs == 0 && resume.is_none() {
        let ckpt = make_ckpt(&cnn, &projector, &adam, 0, &tracker);
        ckpt.save(&best_path)?;
        ckpt.save(&last_path)?;
        return Ok(StageOutcome {
            checkpoint_path: best_path,
            last_path,
            export_path: None,
            best_epoch: 0,
            history: log.records,
            metrics_path,
        });
    }

    let n_samples = cfg.samplecnn.required_input_samples();
    for epoch in start_epoch + 1..=stage_cfg.epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &["stage1", "shuffle", &epoch_tag]));

        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0_f64;
        for batch_idx in order.chunks(stage_cfg.batch_size) {
            if batch_idx.len() < 2 {
                continue; // NT-Xent needs at least one negative
            }
            let mut left = Vec::with_capacity(batch_idx.len());
            let mut right = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let (record, w) = &train[i];
                let mut rng =
                    derive_rng(cfg.seed, &["stage1", "track", &record.track_id, &epoch_tag]);
                let (a, b) = make_training_pair(w, n_samples, &cfg.augment, &mut rng)?;
                left.push(a.samples);
                right.push(b.samples);
            }
            let n = left.len();
            let mut stacked = left;
            stacked.extend(right);
            let emb = cnn.forward(&rows_to_array(&stacked), true)?;
            let proj = projector.forward(&emb, true);
            let batch = build_unimodal_batch(
                proj.slice(ndarray::s![..n, ..]).to_owned(),
                proj.slice(ndarray::s![n.., ..]).to_owned(),
            )?;
            let (loss, gl, gr) = nt_xent_loss_and_grad(&batch, &stage_cfg.loss_config())?;
            if !loss.is_finite() {
                make_ckpt(&cnn, &projector, &adam, epoch, &tracker)
                    .save(&out_dir.join("diagnostic.ckpt"))?;
                return Err(Error::Numeric(format!(
                    "non-finite contrastive loss at epoch {epoch}; \
                     diagnostic checkpoint written to {}",
                    out_dir.join("diagnostic.ckpt").display()
                )));
            }
            let mut dproj = Array2::zeros((2 * n, gl.shape()[1]));
            dproj.slice_mut(ndarray::s![..n, ..]).assign(&gl);
            dproj.slice_mut(ndarray::s![n.., ..]).assign(&gr);
            let demb = projector.backward(&dproj);
            cnn.backward(&demb);
            let mut params = cnn.params_mut();
            params.extend(projector.params_mut());
            adam.step(params)?;
            epoch_loss += loss;
            n_batches += 1.0;
        }
        let train_loss = epoch_loss / n_batches.max(1.0);
        log.append(epoch, "train", "contrastive_loss", train_loss)?;

        let val_loss = contrastive_val_loss(&mut cnn, &mut projector, val_set, stage_cfg)?;
        log.append(epoch, "valid", "contrastive_loss", val_loss)?;

        let improved = tracker.improved(epoch, -val_loss);
        let ckpt = make_ckpt(&cnn, &projector, &adam, epoch, &tracker);
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(&best_path)?;
        }
    }

    Ok(StageOutcome {
        checkpoint_path: best_path,
        last_path,
        export_path: None,
        best_epoch: tracker.best_epoch,
        history: log.records,
        metrics_path,
    })
}

/// Per-track context features for stage 2, with per-record skip accounting.
fn load_video_features(
    records: &[(TrackRecord, AudioWaveform)],
    cache_dir: &Path,
    input_dim: usize,
) -> Result<(Vec<(TrackRecord, AudioWaveform, SecondEmbeddingSeq)>, Vec<String>)> {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (record, w) in records {
        match load_second_embeddings(cache_dir, &record.track_id) {
            Ok(seq) if !seq.vectors.is_empty() => {
                let dim = seq.vectors[0].len();
                if dim != input_dim {
                    return Err(Error::Config(format!(
                        "cached video features for {} have dim {dim}, video encoder expects {input_dim}",
                        record.track_id
                    )));
                }
                kept.push((record.clone(), w.clone(), seq));
            }
            _ => skipped.push(record.track_id.clone()),
        }
    }
    Ok((kept, skipped))
}

/// Stage 2: multimodal contrastive pre-training. Loads the stage-1 audio
/// encoder, freezes its first `freeze_blocks_n` blocks (including the stem),
/// and contrasts cropped audio against the aligned per-second video context
/// through fresh projectors and a jointly trained video encoder. The exported
/// artifact (`backbone.ckpt`) holds only the audio encoder.
pub fn pretrain_multimodal(
    manifest: &Manifest,
    audio_ckpt: &Path,
    cfg: &AppConfig,
    cache_dir: &Path,
    out_dir: &Path,
) -> Result<StageOutcome> {
    let stage_cfg = &cfg.multimodal_pretrain;
    let source = Checkpoint::load(audio_ckpt)?;
    if source.stage != Stage::AudioPretrain {
        return Err(Error::Checkpoint(format!(
            "pretrain-multimodal needs a stage-1 (audio_pretrain) checkpoint, got {}; \
             run `pretrain-audio` first",
            source.stage
        )));
    }

    let mut cnn = SampleCnn::new(
        source.config.samplecnn.clone(),
        &mut derive_rng(cfg.seed, &["init", "samplecnn"]),
    )?;
    cnn.load_named_tensors(&source.tensors)?;
    cnn.freeze_blocks(stage_cfg.freeze_blocks_n)?;
    let frozen_before: BTreeMap<String, String> = cnn
        .params()
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), tensor_hash(&p.value)))
        .collect();

    let audio_proj_cfg =
        ProjectorConfig { in_dim: cnn.cfg.out_dim, proj_dim: cfg.projector.proj_dim };
    let mut audio_proj = Projector::new(
        "audio_proj",
        audio_proj_cfg,
        &mut derive_rng(cfg.seed, &["init", "mm_audio_proj"]),
    )?;
    let video_proj_cfg =
        ProjectorConfig { in_dim: cfg.video_encoder.out_dim, proj_dim: cfg.projector.proj_dim };
    let mut video_proj = Projector::new(
        "video_proj",
        video_proj_cfg,
        &mut derive_rng(cfg.seed, &["init", "mm_video_proj"]),
    )?;
    let mut video_enc = VideoEncoder::new(
        "video_enc",
        cfg.video_encoder.clone(),
        &mut derive_rng(cfg.seed, &["init", "video_enc"]),
    )?;
    let mut adam = adam_for(stage_cfg);

    let train_audio = load_split_audio(manifest, Split::Train)?;
    if train_audio.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (train, skipped) =
        load_video_features(&train_audio, cache_dir, cfg.video_encoder.input_dim)?;
    if skipped.len() * 2 > train_audio.len() {
        return Err(Error::Data(format!(
            "{} of {} training tracks lack cached video features: {:?}",
            skipped.len(),
            train_audio.len(),
            skipped
        )));
    }
    for id in &skipped {
        eprintln!("warning: skipping {id}: no cached video features");
    }
    let valid_audio = load_split_audio(manifest, Split::Valid)?;
    let (valid, _) = load_video_features(&valid_audio, cache_dir, cfg.video_encoder.input_dim)?;
    let val_set = if valid.is_empty() { &train } else { &valid };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let export_path = out_dir.join("backbone.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = MetricsLog::create(&metrics_path)?;
    let mut tracker = BestTracker::new(None, 0);

    let n_samples = cnn.cfg.required_input_samples();
    let sr = cnn.cfg.sample_rate_hz as f64;
    let segment_s = n_samples as f64 / sr;
    let seg_ceil = segment_s.ceil().max(1.0) as usize;
    let loss_cfg = stage_cfg.loss_config();

    // crop + align one track; start chosen so the video slice always exists
    let pick_segment = |w: &AudioWaveform,
                        seq: &SecondEmbeddingSeq,
                        rng: Option<&mut ChaCha8Rng>|
     -> Result<(Vec<f64>, Vec<Array1<f64>>)> {
        if seq.len() < seg_ceil {
            return Err(Error::OutOfRange {
                track_id: w.track_id.clone(),
                reason: format!("video covers {} s, segment needs {seg_ceil} s", seq.len()),
            });
        }
        let max_start_s = (seq.len() - seg_ceil) as f64;
        let max_start =
            ((max_start_s * sr) as usize).min(w.samples.len().saturating_sub(n_samples));
        let start = match rng {
            Some(rng) if max_start > 0 => rng.gen_range(0..=max_start),
            _ => 0,
        };
        let audio = fixed_crop(&w.samples[start..], n_samples, false);
        let video = crate::features::align_video_segment(seq, start as f64 / sr, segment_s)?;
        Ok((audio, video.vectors))
    };

    let forward_batch = |cnn: &mut SampleCnn,
                         audio_proj: &mut Projector,
                         video_proj: &mut Projector,
                         video_enc: &mut VideoEncoder,
                         audio_rows: &[Vec<f64>],
                         video_slices: &[Vec<Array1<f64>>],
                         ids: &[String],
                         train: bool|
     -> Result<(crate::contrastive::PairBatch, usize)> {
        let emb = cnn.forward(&rows_to_array(audio_rows), train)?;
        let a = audio_proj.forward(&emb, train);
        let steps = batch_second_slices(video_slices)?;
        let v_emb = video_enc.forward(&steps, train)?;
        let v = video_proj.forward(&v_emb, train);
        let batch = build_multimodal_batch(a, v, ids, ids)?;
        Ok((batch, ids.len()))
    };

    let make_ckpt = |cnn: &SampleCnn,
                     audio_proj: &Projector,
                     video_proj: &Projector,
                     video_enc: &VideoEncoder,
                     adam: &Adam,
                     epoch: usize,
                     tracker: &BestTracker| {
        let mut tensors: BTreeMap<String, ArrayD<f64>> = cnn.named_tensors().into_iter().collect();
        tensors.extend(params_to_tensors(audio_proj.params()));
        tensors.extend(params_to_tensors(video_proj.params()));
        tensors.extend(params_to_tensors(video_enc.params()));
        tensors.extend(adam.state_tensors());
        Checkpoint {
            stage: Stage::MultimodalPretrain,
            epoch,
            best_epoch: tracker.best_epoch,
            best_metric: tracker.best,
            step_count: adam.step_count,
            seed: cfg.seed,
            config: cfg.clone(),
            tag_vocabulary: Vec::new(),
            tensors,
        }
    };

    for epoch in 1..=stage_cfg.epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &["stage2", "shuffle", &epoch_tag]));

        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0_f64;
        for batch_idx in order.chunks(stage_cfg.batch_size) {
            if batch_idx.len() < 2 {
                continue;
            }
            let mut audio_rows = Vec::with_capacity(batch_idx.len());
            let mut video_slices = Vec::with_capacity(batch_idx.len());
            let mut ids = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let (record, w, seq) = &train[i];
                let mut rng =
                    derive_rng(cfg.seed, &["stage2", "track", &record.track_id, &epoch_tag]);
                let (a, v) = pick_segment(w, seq, Some(&mut rng))?;
                audio_rows.push(a);
                video_slices.push(v);
                ids.push(record.track_id.clone());
            }
            let (batch, n) = forward_batch(
                &mut cnn,
                &mut audio_proj,
                &mut video_proj,
                &mut video_enc,
                &audio_rows,
                &video_slices,
                &ids,
                true,
            )?;
            let (loss, gl, gr) = nt_xent_loss_and_grad(&batch, &loss_cfg)?;
            if !loss.is_finite() {
                make_ckpt(&cnn, &audio_proj, &video_proj, &video_enc, &adam, epoch, &tracker)
                    .save(&out_dir.join("diagnostic.ckpt"))?;
                return Err(Error::Numeric(format!(
                    "non-finite multimodal loss at epoch {epoch}"
                )));
            }
            let _ = n;
            let demb = audio_proj.backward(&gl);
            cnn.backward(&demb);
            let dv_emb = video_proj.backward(&gr);
            video_enc.backward(&dv_emb);
            let mut params = cnn.params_mut();
            params.extend(audio_proj.params_mut());
            params.extend(video_proj.params_mut());
            params.extend(video_enc.params_mut());
            adam.step(params)?;
            epoch_loss += loss;
            n_batches += 1.0;
        }
        let train_loss = epoch_loss / n_batches.max(1.0);
        log.append(epoch, "train", "contrastive_loss", train_loss)?;

        // fixed start-aligned segments for validation
        let mut val_loss = 0.0;
        let mut val_batches = 0.0_f64;
        for chunk in val_set.chunks(stage_cfg.batch_size) {
            let mut audio_rows = Vec::new();
            let mut video_slices = Vec::new();
            let mut ids = Vec::new();
            for (record, w, seq) in chunk {
                let (a, v) = pick_segment(w, seq, None)?;
                audio_rows.push(a);
                video_slices.push(v);
                ids.push(record.track_id.clone());
            }
            let (batch, _) = forward_batch(
                &mut cnn,
                &mut audio_proj,
                &mut video_proj,
                &mut video_enc,
                &audio_rows,
                &video_slices,
                &ids,
                false,
            )?;
            val_loss += nt_xent_loss(&batch, &loss_cfg)?;
            val_batches += 1.0;
        }
        let val_loss = val_loss / val_batches.max(1.0);
        log.append(epoch, "valid", "contrastive_loss", val_loss)?;

        let improved = tracker.improved(epoch, -val_loss);
        let ckpt = make_ckpt(&cnn, &audio_proj, &video_proj, &video_enc, &adam, epoch, &tracker);
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(&best_path)?;
        }
    }

    // verify the freezing contract before exporting
    for p in cnn.params() {
        if let Some(before) = frozen_before.get(&p.name) {
            if tensor_hash(&p.value) != *before {
                return Err(Error::Numeric(format!(
                    "frozen parameter {} changed during stage 2",
                    p.name
                )));
            }
        }
    }

    if stage_cfg.epochs == 0 {
        let ckpt = make_ckpt(&cnn, &audio_proj, &video_proj, &video_enc, &adam, 0, &tracker);
        ckpt.save(&best_path)?;
        ckpt.save(&last_path)?;
    }

    // export: audio encoder only, per the stage contract
    let best = Checkpoint::load(&best_path)?;
    let encoder_names: Vec<String> = cnn.named_tensors().into_iter().map(|(n, _)| n).collect();
    let export = Checkpoint {
        stage: Stage::MultimodalPretrain,
        epoch: best.epoch,
        best_epoch: best.best_epoch,
        best_metric: best.best_metric,
        step_count: best.step_count,
        seed: cfg.seed,
        config: cfg.clone(),
        tag_vocabulary: Vec::new(),
        tensors: best
            .tensors
            .into_iter()
            .filter(|(name, _)| encoder_names.contains(name))
            .collect(),
    };
    export.save(&export_path)?;

    Ok(StageOutcome {
        checkpoint_path: best_path,
        last_path,
        export_path: Some(export_path),
        best_epoch: tracker.best_epoch,
        history: log.records,
        metrics_path,
    })
}

/// Ordered tag vocabulary from the training split: sorted unique tag names.
pub fn derive_vocabulary(manifest: &Manifest) -> Result<Vec<String>> {
    let mut vocab: Vec<String> = manifest
        .split(Split::Train)
        .flat_map(|r| r.tags.iter().flatten().cloned())
        .collect();
    vocab.sort();
    vocab.dedup();
    if vocab.is_empty() {
        return Err(Error::Data("no tags found in the training split".into()));
    }
    Ok(vocab)
}

/// Binary label rows for `records` against a fixed vocabulary.
/// Unknown tags are an error listing them by name.
pub fn label_matrix(records: &[TrackRecord], vocab: &[String]) -> Result<Array2<u8>> {
    let index: BTreeMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut unknown: Vec<String> = Vec::new();
    let mut labels = Array2::zeros((records.len(), vocab.len()));
    for (row, record) in records.iter().enumerate() {
        for tag in record.tags.iter().flatten() {
            match index.get(tag.as_str()) {
                Some(&col) => labels[[row, col]] = 1,
                None => unknown.push(format!("{} (track {})", tag, record.track_id)),
            }
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::Data(format!(
            "tags outside the training vocabulary: {}",
            unknown.join(", ")
        )));
    }
    Ok(labels)
}

/// Frozen-backbone embeddings of the center crop of each track, computed in
/// inference mode (running normalization statistics, no augmentation).
fn embed_center_crops(
    cnn: &mut SampleCnn,
    records: &[(TrackRecord, AudioWaveform)],
    batch_size: usize,
) -> Result<Array2<f64>> {
    let n_samples = cnn.cfg.required_input_samples();
    let mut out = Array2::zeros((records.len(), cnn.cfg.out_dim));
    for (chunk_start, chunk) in records.chunks(batch_size).enumerate() {
        let rows: Vec<Vec<f64>> = chunk
            .iter()
            .map(|(_, w)| {
                let start = w.samples.len().saturating_sub(n_samples) / 2;
                fixed_crop(&w.samples[start.min(w.samples.len())..], n_samples, false)
            })
            .collect();
        let emb = cnn.forward(&rows_to_array(&rows), false)?;
        out.slice_mut(ndarray::s![
            chunk_start * batch_size..chunk_start * batch_size + chunk.len(),
            ..
        ])
        .assign(&emb);
    }
    Ok(out)
}

/// Stage 3: supervised fine-tuning of the tagging head on frozen backbone
/// features. The backbone never enters the optimizer; its embeddings are
/// computed once. Best epoch is selected by validation PR-AUC.
pub fn finetune(
    manifest: &Manifest,
    backbone_ckpt: &Path,
    cfg: &AppConfig,
    out_dir: &Path,
) -> Result<StageOutcome> {
    let stage_cfg = &cfg.finetune;
    let source = Checkpoint::load(backbone_ckpt)?;
    let mut cnn = SampleCnn::new(
        source.config.samplecnn.clone(),
        &mut derive_rng(cfg.seed, &["init", "samplecnn"]),
    )?;
    cnn.load_named_tensors(&source.tensors)?;
    cnn.freeze_all()?;
    let backbone_before: BTreeMap<String, ArrayD<f64>> = cnn.named_tensors().into_iter().collect();
    let hashes_before = parameter_hashes(&backbone_before);

    let vocab = derive_vocabulary(manifest)?;
    let head_cfg = TagHeadConfig {
        in_dim: cnn.cfg.out_dim,
        hidden_dim: cfg.tag_head.hidden_dim,
        n_tags: vocab.len(),
    };
    let mut head =
        TagHead::new("tag_head", head_cfg, &mut derive_rng(cfg.seed, &["init", "tag_head"]))?;
    let mut adam = adam_for(stage_cfg);

    let train = load_split_audio(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let valid = load_split_audio(manifest, Split::Valid)?;
    let val_set: &[(TrackRecord, AudioWaveform)] = if valid.is_empty() { &train } else { &valid };

    let train_records: Vec<TrackRecord> = train.iter().map(|(r, _)| r.clone()).collect();
    let val_records: Vec<TrackRecord> = val_set.iter().map(|(r, _)| r.clone()).collect();
    let train_labels = label_matrix(&train_records, &vocab)?.mapv(f64::from);
    let val_labels_u8 = label_matrix(&val_records, &vocab)?;

    let train_emb = embed_center_crops(&mut cnn, &train, stage_cfg.batch_size)?;
    let val_emb = embed_center_crops(&mut cnn, val_set, stage_cfg.batch_size)?;
    let val_ids: Vec<String> = val_records.iter().map(|r| r.track_id.clone()).collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = MetricsLog::create(&metrics_path)?;
    let mut tracker = BestTracker::new(None, 0);

    let make_ckpt = |cnn: &SampleCnn, head: &TagHead, adam: &Adam, epoch: usize, tracker: &BestTracker| {
        let mut tensors: BTreeMap<String, ArrayD<f64>> = cnn.named_tensors().into_iter().collect();
        tensors.extend(params_to_tensors(head.params()));
        tensors.extend(adam.state_tensors());
        Checkpoint {
            stage: Stage::Finetune,
            epoch,
            best_epoch: tracker.best_epoch,
            best_metric: tracker.best,
            step_count: adam.step_count,
            seed: cfg.seed,
            config: cfg.clone(),
            tag_vocabulary: vocab.clone(),
            tensors,
        }
    };

    // validation pass shared by the epoch loop and the epochs=0 baseline
    let validate = |head: &mut TagHead| -> Result<(f64, Option<f64>, Option<f64>, f64)> {
        let scores = head.forward(&val_emb, false);
        let eps = 1e-12;
        let val_labels = val_labels_u8.mapv(f64::from);
        let bce = scores
            .iter()
            .zip(val_labels.iter())
            .map(|(s, y)| -(y * (s + eps).ln() + (1.0 - y) * (1.0 - s + eps).ln()))
            .sum::<f64>()
            / (scores.len() as f64);
        let preds = PredictionMatrix::new(scores, val_ids.clone(), vocab.clone())?;
        let labels = LabelMatrix::new(val_labels_u8.clone())?;
        let roc = macro_average(MetricKind::RocAuc, &preds, &labels).ok().map(|m| m.value);
        let pr = macro_average(MetricKind::PrAuc, &preds, &labels).ok().map(|m| m.value);
        // selection: PR-AUC when defined, otherwise negated validation loss
        let selection = pr.unwrap_or(-bce);
        Ok((bce, roc, pr, selection))
    };

    if stage_cfg.epochs == 0 {
        let (bce, roc, pr, _) = validate(&mut head)?;
        log.append(0, "valid", "bce_loss", bce)?;
        if let Some(v) = roc {
            log.append(0, "valid", "roc_auc", v)?;
        }
        if let Some(v) = pr {
            log.append(0, "valid", "pr_auc", v)?;
        }
        let ckpt = make_ckpt(&cnn, &head, &adam, 0, &tracker);
        ckpt.save(&best_path)?;
        ckpt.save(&last_path)?;
        return Ok(StageOutcome {
            checkpoint_path: best_path,
            last_path,
            export_path: None,
            best_epoch: 0,
            history: log.records,
            metrics_path,
        });
    }

    for epoch in 1..=stage_cfg.epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &["stage3", "shuffle", &epoch_tag]));

        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0_f64;
        for batch_idx in order.chunks(stage_cfg.batch_size) {
            let x = Array2::from_shape_fn((batch_idx.len(), cnn.cfg.out_dim), |(i, j)| {
                train_emb[[batch_idx[i], j]]
            });
            let y = Array2::from_shape_fn((batch_idx.len(), vocab.len()), |(i, j)| {
                train_labels[[batch_idx[i], j]]
            });
            let scores = head.forward(&x, true);
            let loss = head.bce_backward(&scores, &y);
            if !loss.is_finite() {
                make_ckpt(&cnn, &head, &adam, epoch, &tracker)
                    .save(&out_dir.join("diagnostic.ckpt"))?;
                return Err(Error::Numeric(format!("non-finite BCE loss at epoch {epoch}")));
            }
            adam.step(head.params_mut())?;
            epoch_loss += loss;
            n_batches += 1.0;
        }
        log.append(epoch, "train", "bce_loss", epoch_loss / n_batches.max(1.0))?;

        let (bce, roc, pr, selection) = validate(&mut head)?;
        log.append(epoch, "valid", "bce_loss", bce)?;
        if let Some(v) = roc {
            log.append(epoch, "valid", "roc_auc", v)?;
        }
        if let Some(v) = pr {
            log.append(epoch, "valid", "pr_auc", v)?;
        }

        let improved = tracker.improved(epoch, selection);
        let ckpt = make_ckpt(&cnn, &head, &adam, epoch, &tracker);
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(&best_path)?;
        }
    }

    let hashes_after = parameter_hashes(&cnn.named_tensors().into_iter().collect());
    if hashes_before != hashes_after {
        return Err(Error::Numeric("frozen backbone changed during fine-tuning".into()));
    }

    Ok(StageOutcome {
        checkpoint_path: best_path,
        last_path,
        export_path: None,
        best_epoch: tracker.best_epoch,
        history: log.records,
        metrics_path,
    })
}

/// Frozen backbone + tagging head, scoring one window at a time.
pub struct BackboneTagger {
    cnn: SampleCnn,
    head: TagHead,
    vocab: Vec<String>,
}

impl BackboneTagger {
    /// Builds the inference model from a stage-3 checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Finetune {
            return Err(Error::Checkpoint(format!(
                "evaluation needs a finetune checkpoint, got {}; run `finetune` first",
                ckpt.stage
            )));
        }
        if ckpt.tag_vocabulary.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no tag vocabulary".into()));
        }
        let mut rng = derive_rng(ckpt.seed, &["init", "samplecnn"]);
        let mut cnn = SampleCnn::new(ckpt.config.samplecnn.clone(), &mut rng)?;
        cnn.load_named_tensors(&ckpt.tensors)?;
        cnn.freeze_all()?;
        let head_cfg = TagHeadConfig {
            in_dim: cnn.cfg.out_dim,
            hidden_dim: ckpt.config.tag_head.hidden_dim,
            n_tags: ckpt.tag_vocabulary.len(),
        };
        let mut head = TagHead::new(
            "tag_head",
            head_cfg,
            &mut derive_rng(ckpt.seed, &["init", "tag_head"]),
        )?;
        load_params(head.params_mut(), &ckpt.tensors)?;
        Ok(BackboneTagger { cnn, head, vocab: ckpt.tag_vocabulary.clone() })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }
}

impl TagPredictor for BackboneTagger {
    fn n_tags(&self) -> usize {
        self.vocab.len()
    }

    fn window_samples(&self) -> usize {
        self.cnn.cfg.required_input_samples()
    }

    fn predict_window(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        let x = rows_to_array(&[samples.to_vec()]);
        let emb = self.cnn.forward(&x, false)?;
        let scores = self.head.forward(&emb, false);
        Ok(scores.row(0).to_vec())
    }
}

/// The evaluation summary for one split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub macro_roc_auc: f64,
    pub macro_pr_auc: f64,
    pub per_tag_roc: Vec<Option<f64>>,
    pub per_tag_pr: Vec<Option<f64>>,
    pub tag_vocabulary: Vec<String>,
    pub skipped_tags: Vec<String>,
    pub n_tracks: usize,
}

/// Scores every track of `split` with 50%-overlap window inference and
/// macro-averages both metrics over the checkpoint's tag vocabulary.
pub fn evaluate_tagging(
    manifest: &Manifest,
    split: Split,
    ckpt_path: &Path,
    overlap: f64,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model = BackboneTagger::from_checkpoint(&ckpt)?;
    let records: Vec<TrackRecord> = manifest.split(split).cloned().collect();
    if records.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    let vocab = model.vocabulary().to_vec();
    let labels = LabelMatrix::new(label_matrix(&records, &vocab)?)?;

    let mut scores = Array2::zeros((records.len(), vocab.len()));
    let mut ids = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let w = decode_audio(Path::new(&record.audio_path), &record.track_id)?;
        let row = overlap_inference(&w, &mut model, overlap)?;
        scores.row_mut(i).assign(&Array1::from(row));
        ids.push(record.track_id.clone());
    }
    let preds = PredictionMatrix::new(scores, ids, vocab.clone())?;
    let roc = macro_average(MetricKind::RocAuc, &preds, &labels)?;
    let pr = macro_average(MetricKind::PrAuc, &preds, &labels)?;
    Ok(EvalReport {
        macro_roc_auc: roc.value,
        macro_pr_auc: pr.value,
        per_tag_roc: roc.per_tag,
        per_tag_pr: pr.per_tag,
        tag_vocabulary: vocab,
        skipped_tags: roc.skipped_tags,
        n_tracks: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentChainConfig;
    use crate::corpus::Split;
    use approx::assert_relative_eq;
    use tempfile::TempDir;

    /// Tiny but real configuration: 162-sample segments, 8-D embeddings.
    fn tiny_config(seed: u64) -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.seed = seed;
        cfg.samplecnn.first_kernel = 2;
        cfg.samplecnn.n_blocks = 4;
        cfg.samplecnn.channel_schedule = vec![4, 4, 8, 8];
        cfg.samplecnn.out_dim = 8;
        cfg.projector.in_dim = 8;
        cfg.projector.proj_dim = 4;
        cfg.tag_head.in_dim = 8;
        cfg.tag_head.hidden_dim = 6;
        cfg.video_encoder.input_dim = 6;
        cfg.video_encoder.hidden_dim = 5;
        cfg.augment = AugmentChainConfig {
            pitch_shift_p: 0.0,
            reverb_p: 0.0,
            frequency_filter_p: 0.0,
            ..AugmentChainConfig::default()
        };
        for stage in [
            &mut cfg.audio_pretrain,
            &mut cfg.multimodal_pretrain,
            &mut cfg.finetune,
        ] {
            stage.batch_size = 8;
            stage.epochs = 3;
            stage.learning_rate = 0.01;
        }
        cfg
    }

    fn write_wav(path: &Path, samples: &[f64]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).unwrap();
        for s in samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64) as i16).unwrap();
        }
        writer.finalize().unwrap();
    }

    /// n_tracks sine tracks in 2 frequency classes, tagged accordingly,
    /// split train/valid, with optional per-second video features whose
    /// first component encodes the class.
    fn tiny_corpus(dir: &Path, n_tracks: usize, video_dim: Option<usize>) -> Manifest {
        let mut records = Vec::new();
        let sr = 16000.0;
        let duration_s = 2.0;
        let cache = dir.join("cache");
        std::fs::create_dir_all(&cache).unwrap();
        for i in 0..n_tracks {
            let class = i % 2;
            let freq = if class == 0 { 220.0 } else { 3520.0 };
            let n = (sr * duration_s) as usize;
            let samples: Vec<f64> = (0..n)
                .map(|t| {
                    0.5 * (2.0 * std::f64::consts::PI * freq * t as f64 / sr).sin()
                        + 0.01 * ((i * 7919 + t) as f64).sin()
                })
                .collect();
            let id = format!("track{i:03}");
            let audio_path = dir.join(format!("{id}.wav"));
            write_wav(&audio_path, &samples);
            let audio_path = audio_path.to_string_lossy().into_owned();
            if let Some(dim) = video_dim {
                let vectors: Vec<Array1<f64>> = (0..duration_s as usize)
                    .map(|s| {
                        Array1::from_shape_fn(dim, |j| {
                            if j == 0 {
                                class as f64 * 2.0 - 1.0
                            } else {
                                0.1 * ((i + j + s) as f64).sin()
                            }
                        })
                    })
                    .collect();
                crate::features::save_second_embeddings(
                    &cache,
                    &SecondEmbeddingSeq { vectors, track_id: id.clone() },
                )
                .unwrap();
            }
            let split = if i % 3 == 1 { Split::Valid } else { Split::Train };
            records.push(TrackRecord {
                track_id: id,
                audio_path,
                video_path: None,
                duration_s,
                split,
                tags: Some(vec![if class == 0 { "low".into() } else { "high".into() }]),
            });
        }
        Manifest::new(records).unwrap()
    }

    fn cache_dir(dir: &Path) -> PathBuf {
        dir.join("cache")
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(1);
        let mut rng = derive_rng(1, &["init", "samplecnn"]);
        let cnn = SampleCnn::new(cfg.samplecnn.clone(), &mut rng).unwrap();
        let ckpt = Checkpoint {
            stage: Stage::AudioPretrain,
            epoch: 3,
            best_epoch: 2,
            best_metric: Some(-0.5),
            step_count: 17,
            seed: 1,
            config: cfg,
            tag_vocabulary: vec!["a".into()],
            tensors: cnn.named_tensors().into_iter().collect(),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.best_epoch, 2);
        assert_eq!(loaded.step_count, 17);
        assert_eq!(loaded.tag_vocabulary, vec!["a".to_string()]);
        assert_eq!(loaded.tensors, ckpt.tensors);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_corruption() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(1);
        let ckpt = Checkpoint {
            stage: Stage::AudioPretrain,
            epoch: 0,
            best_epoch: 0,
            best_metric: None,
            step_count: 0,
            seed: 1,
            config: cfg,
            tag_vocabulary: vec![],
            tensors: BTreeMap::new(),
        };
        let path = dir.path().join("x.ckpt");
        ckpt.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // container version
        let vpath = dir.path().join("v.ckpt");
        std::fs::write(&vpath, &bytes).unwrap();
        let err = Checkpoint::load(&vpath).unwrap_err();
        assert!(err.to_string().contains("schema_version"), "{err}");

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let cpath = dir.path().join("c.ckpt");
        std::fs::write(&cpath, &bytes).unwrap();
        let err = Checkpoint::load(&cpath).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn zero_epoch_pretrain_checkpoint_equals_initialization() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 4, None);
        let mut cfg = tiny_config(5);
        cfg.audio_pretrain.epochs = 0;
        let outcome = pretrain_audio(&manifest, &cfg, &dir.path().join("run"), None).unwrap();
        let ckpt = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ckpt.epoch, 0);
        let mut rng = derive_rng(5, &["init", "samplecnn"]);
        let fresh = SampleCnn::new(cfg.samplecnn.clone(), &mut rng).unwrap();
        for (name, tensor) in fresh.named_tensors() {
            assert_eq!(ckpt.tensors[&name], tensor, "{name}");
        }
    }

    #[test]
    fn pretrain_audio_is_deterministic_and_loss_decreases() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 8, None);
        let mut cfg = tiny_config(11);
        cfg.audio_pretrain.epochs = 4;
        let out1 = pretrain_audio(&manifest, &cfg, &dir.path().join("r1"), None).unwrap();
        let out2 = pretrain_audio(&manifest, &cfg, &dir.path().join("r2"), None).unwrap();
        assert_eq!(out1.history, out2.history);
        assert_eq!(
            std::fs::read(&out1.last_path).unwrap(),
            std::fs::read(&out2.last_path).unwrap()
        );
        let train_losses: Vec<f64> = out1
            .history
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.value)
            .collect();
        assert!(
            train_losses.last().unwrap() < train_losses.first().unwrap(),
            "loss did not decrease: {train_losses:?}"
        );
        let logged = read_metrics(&out1.metrics_path).unwrap();
        assert_eq!(logged, out1.history);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 8, None);
        let mut cfg = tiny_config(13);
        cfg.audio_pretrain.epochs = 4;
        let full = pretrain_audio(&manifest, &cfg, &dir.path().join("full"), None).unwrap();

        let mut cfg_half = cfg.clone();
        cfg_half.audio_pretrain.epochs = 2;
        let half = pretrain_audio(&manifest, &cfg_half, &dir.path().join("half"), None).unwrap();
        let resumed = pretrain_audio(
            &manifest,
            &cfg,
            &dir.path().join("resumed"),
            Some(&half.last_path),
        )
        .unwrap();

        let a = Checkpoint::load(&full.last_path).unwrap();
        let b = Checkpoint::load(&resumed.last_path).unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(a.epoch, b.epoch);
        // the resumed log holds epochs 3..=4 and matches the full run there
        let tail: Vec<&MetricRecord> =
            full.history.iter().filter(|r| r.epoch > 2).collect();
        assert_eq!(tail.len(), resumed.history.len());
        for (x, y) in tail.iter().zip(&resumed.history) {
            assert_eq!(**x, *y);
        }
    }

    #[test]
    fn multimodal_freezes_blocks_and_exports_encoder_only() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 8, Some(6));
        let mut cfg = tiny_config(17);
        cfg.audio_pretrain.epochs = 1;
        cfg.multimodal_pretrain.epochs = 2;
        cfg.multimodal_pretrain.freeze_blocks_n = 2;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();

        let stage1_ckpt = Checkpoint::load(&stage1.checkpoint_path).unwrap();
        let outcome = pretrain_multimodal(
            &manifest,
            &stage1.checkpoint_path,
            &cfg,
            &cache_dir(dir.path()),
            &dir.path().join("s2"),
        )
        .unwrap();

        let last = Checkpoint::load(&outcome.last_path).unwrap();
        // stem + first 2 blocks bitwise unchanged
        for name in last.tensors.keys() {
            let frozen = name.starts_with("stem.")
                || name.starts_with("block0.")
                || name.starts_with("block1.");
            let is_param = !name.contains("running_") && !name.starts_with("adam.");
            if frozen && is_param {
                assert_eq!(
                    tensor_hash(&last.tensors[name]),
                    tensor_hash(&stage1_ckpt.tensors[name]),
                    "frozen tensor {name} changed"
                );
            }
        }
        // export holds only audio-encoder tensors
        let export = Checkpoint::load(outcome.export_path.as_ref().unwrap()).unwrap();
        assert!(!export.tensors.is_empty());
        for name in export.tensors.keys() {
            assert!(
                name.starts_with("stem.") || name.starts_with("block"),
                "non-encoder tensor {name} in export"
            );
        }
    }

    #[test]
    fn multimodal_requires_stage1_checkpoint_and_video_coverage() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 8, Some(6));
        let mut cfg = tiny_config(19);
        cfg.audio_pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();
        let stage3 =
            finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("s3")).unwrap();

        // wrong stage tag is refused with an actionable message
        let err = pretrain_multimodal(
            &manifest,
            &stage3.checkpoint_path,
            &cfg,
            &cache_dir(dir.path()),
            &dir.path().join("s2a"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("pretrain-audio"), "{err}");

        // >50% missing video features aborts
        let empty_cache = dir.path().join("empty_cache");
        std::fs::create_dir_all(&empty_cache).unwrap();
        let err = pretrain_multimodal(
            &manifest,
            &stage1.checkpoint_path,
            &cfg,
            &empty_cache,
            &dir.path().join("s2b"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn finetune_keeps_backbone_bitwise_and_learns_separable_task() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 12, None);
        let mut cfg = tiny_config(23);
        cfg.audio_pretrain.epochs = 2;
        cfg.finetune.epochs = 25;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();
        let stage1_ckpt = Checkpoint::load(&stage1.checkpoint_path).unwrap();

        let outcome =
            finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("s3")).unwrap();
        let last = Checkpoint::load(&outcome.last_path).unwrap();
        for (name, tensor) in &last.tensors {
            if name.starts_with("stem.") || name.starts_with("block") {
                assert_eq!(
                    tensor_hash(tensor),
                    tensor_hash(&stage1_ckpt.tensors[name]),
                    "backbone tensor {name} changed"
                );
            }
        }
        assert_eq!(last.tag_vocabulary, vec!["high".to_string(), "low".to_string()]);
        let best_roc = outcome
            .history
            .iter()
            .filter(|r| r.metric == "roc_auc")
            .map(|r| r.value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best_roc >= 0.9, "validation ROC-AUC {best_roc} on a separable task");
    }

    #[test]
    fn finetune_zero_epochs_reports_random_head_metrics() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 8, None);
        let mut cfg = tiny_config(29);
        cfg.audio_pretrain.epochs = 0;
        cfg.finetune.epochs = 0;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();
        let a = finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("a")).unwrap();
        let b = finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, 0);
        let ckpt = Checkpoint::load(&a.checkpoint_path).unwrap();
        let mut fresh = TagHead::new(
            "tag_head",
            TagHeadConfig { in_dim: 8, hidden_dim: 6, n_tags: 2 },
            &mut derive_rng(29, &["init", "tag_head"]),
        )
        .unwrap();
        for p in fresh.params_mut() {
            assert_eq!(ckpt.tensors[&p.name], p.value, "{}", p.name);
        }
    }

    #[test]
    fn unknown_validation_tags_are_listed() {
        let dir = TempDir::new().unwrap();
        let mut manifest = tiny_corpus(dir.path(), 8, None);
        // poison one validation record with a tag outside the train vocabulary
        let poisoned = manifest
            .records
            .iter_mut()
            .find(|r| r.split == Split::Valid)
            .unwrap();
        poisoned.tags = Some(vec!["zebra-noises".into()]);
        let mut cfg = tiny_config(31);
        cfg.audio_pretrain.epochs = 0;
        cfg.finetune.epochs = 1;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();
        let err =
            finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("s3")).unwrap_err();
        assert!(err.to_string().contains("zebra-noises"), "{err}");
    }

    #[test]
    fn evaluate_tagging_scores_every_track() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 12, None);
        let mut cfg = tiny_config(37);
        cfg.audio_pretrain.epochs = 1;
        cfg.finetune.epochs = 10;
        let stage1 = pretrain_audio(&manifest, &cfg, &dir.path().join("s1"), None).unwrap();
        let stage3 =
            finetune(&manifest, &stage1.checkpoint_path, &cfg, &dir.path().join("s3")).unwrap();
        let report =
            evaluate_tagging(&manifest, Split::Valid, &stage3.checkpoint_path, 0.5).unwrap();
        assert_eq!(report.n_tracks, 4);
        assert_eq!(report.tag_vocabulary, vec!["high".to_string(), "low".to_string()]);
        assert!(report.macro_roc_auc >= 0.0 && report.macro_roc_auc <= 1.0);
        assert_relative_eq!(
            report.per_tag_roc.iter().flatten().sum::<f64>()
                / report.per_tag_roc.iter().flatten().count() as f64,
            report.macro_roc_auc,
            epsilon = 1e-12
        );
    }

    #[test]
    fn derive_rng_streams_are_independent_and_stable() {
        let a: u64 = derive_rng(1, &["x"]).gen();
        let b: u64 = derive_rng(1, &["x"]).gen();
        let c: u64 = derive_rng(1, &["y"]).gen();
        let d: u64 = derive_rng(2, &["x"]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
