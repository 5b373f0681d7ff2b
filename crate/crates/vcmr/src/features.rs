//! Audio decoding and the video frame-embedding pipeline.
//!
//! Audio enters the pipeline as mono 16 kHz waveforms in [-1, 1]. Video
//! enters as frames sampled at a fixed rate (default 5 fps); a pluggable
//! embedder turns each frame into a 512-D vector and consecutive groups of
//! `round(fps)` vectors are averaged into one context vector per second.
//! Per-track second-embedding sequences are cached in a small binary format
//! with a versioned header.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const AUDIO_SAMPLE_RATE_HZ: u32 = 16_000;
pub const EMBED_DIM: usize = 512;
pub const DEFAULT_FPS: f64 = 5.0;

/// Mono waveform at the pipeline sample rate, amplitude in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioWaveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub track_id: String,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, track_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform must be non-empty".into()));
        }
        Ok(AudioWaveform { samples, sample_rate_hz, track_id: track_id.into() })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Decode an audio file (WAV) to a mono 16 kHz waveform. Multi-channel input
/// is averaged across channels; other sample rates are resampled.
pub fn decode_audio(path: &Path, track_id: &str) -> Result<AudioWaveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Decode { path: path.into(), reason: "zero channels".into() });
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Decode { path: path.into(), reason: e.to_string() })?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Decode { path: path.into(), reason: "no samples".into() });
    }
    let n_frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(n_frames);
    for frame in interleaved.chunks_exact(channels) {
        mono.push(frame.iter().sum::<f64>() / channels as f64);
    }
    let mut samples = if spec.sample_rate == AUDIO_SAMPLE_RATE_HZ {
        mono
    } else {
        resample(&mono, spec.sample_rate, AUDIO_SAMPLE_RATE_HZ)
    };
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    AudioWaveform::new(samples, AUDIO_SAMPLE_RATE_HZ, track_id)
}

/// Band-limited resampling with a Hann-windowed sinc kernel (32 zero
/// crossings, cutoff at 95% of the narrower Nyquist). The filter is fixed;
/// bit-exact agreement with other resamplers is not a goal.
pub fn resample(input: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    assert!(from_hz > 0 && to_hz > 0, "sample rates must be positive");
    if from_hz == to_hz || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    // when downsampling, stretch the kernel to the output Nyquist
    let scale = ratio.min(1.0);
    let fc = 0.475 * scale;
    let zero_crossings = 32.0;
    let half_width = zero_crossings / scale;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let lo = ((center - half_width).ceil() as i64).max(0);
        let hi = ((center + half_width).floor() as i64).min(input.len() as i64 - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for i in lo..=hi {
            let u = i as f64 - center;
            let w = 0.5 * (1.0 + (std::f64::consts::PI * u / half_width).cos());
            let s = sinc(2.0 * fc * u) * w;
            acc += input[i as usize] * s;
            norm += s;
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// One grayscale video frame, intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height || pixels.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Parse a binary (P5) PGM file.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Decode { path: path.into(), reason: reason.into() };
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            // skip whitespace and comments
            while pos < data.len() {
                if data[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if data[pos] == b'#' {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Decode { path: path.into(), reason: "truncated header".into() });
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad("not a binary PGM (P5) file"));
        }
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let maxval: f64 = token()?.parse().map_err(|_| bad("bad maxval"))?;
        let body = pos + 1; // single whitespace after maxval
        if data.len() < body + width * height {
            return Err(bad("truncated pixel data"));
        }
        let pixels = data[body..body + width * height].iter().map(|&b| b as f64 / maxval).collect();
        Frame::new(width, height, pixels)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Sequence of per-frame embedding vectors at a known frame rate.
#[derive(Debug, Clone)]
pub struct FrameEmbeddingSeq {
    pub vectors: Vec<Array1<f64>>,
    pub fps: f64,
}

/// One 512-D context vector per second of video.
#[derive(Debug, Clone)]
pub struct SecondEmbeddingSeq {
    pub vectors: Vec<Array1<f64>>,
    pub track_id: String,
}

impl SecondEmbeddingSeq {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Maps frames to fixed-dimension embedding vectors. Implementations must be
/// safe for concurrent read-only use.
pub trait FrameEmbedder: Sync {
    fn output_dim(&self) -> usize;
    fn embed(&self, frame: &Frame) -> Array1<f64>;
}

/// Deterministic seeded random-projection embedder. The frame is pooled onto
/// an 8x8 intensity grid and projected by a fixed Gaussian matrix, so equal
/// frames map to equal vectors and intensity structure survives into the
/// embedding.
pub struct StubEmbedder {
    projection: Array2<f64>, // EMBED_DIM x 64
}

impl StubEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f72_b1d3);
        let mut projection = Array2::zeros((EMBED_DIM, 64));
        for v in projection.iter_mut() {
            // Box-Muller keeps us off rand_distr for one gaussian draw
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() / 8.0;
        }
        StubEmbedder { projection }
    }

    fn pooled_grid(frame: &Frame) -> Array1<f64> {
        let mut grid = Array1::zeros(64);
        let mut counts = [0usize; 64];
        for y in 0..frame.height {
            for x in 0..frame.width {
                let gy = y * 8 / frame.height;
                let gx = x * 8 / frame.width;
                grid[gy * 8 + gx] += frame.pixels[y * frame.width + x];
                counts[gy * 8 + gx] += 1;
            }
        }
        for (g, &c) in grid.iter_mut().zip(counts.iter()) {
            if c > 0 {
                *g /= c as f64;
            }
        }
        grid
    }
}

impl FrameEmbedder for StubEmbedder {
    fn output_dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, frame: &Frame) -> Array1<f64> {
        self.projection.dot(&Self::pooled_grid(frame))
    }
}

/// Adapter slot for an external pre-trained frame encoder: per-track files of
/// precomputed frame vectors (same binary layout as the feature cache) are
/// looked up by frame index instead of running a model.
pub struct PrecomputedEmbedder {
    vectors: Vec<Array1<f64>>,
    cursor: std::cell::Cell<usize>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let (vectors, _) = read_vector_file(path)?;
        Ok(PrecomputedEmbedder { vectors, cursor: std::cell::Cell::new(0) })
    }
}

// The cursor makes this embedder single-threaded; the pipeline calls it
// sequentially per track.
unsafe impl Sync for PrecomputedEmbedder {}

impl FrameEmbedder for PrecomputedEmbedder {
    fn output_dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, _frame: &Frame) -> Array1<f64> {
        let i = self.cursor.get();
        self.cursor.set(i + 1);
        self.vectors
            .get(i)
            .cloned()
            .unwrap_or_else(|| Array1::zeros(EMBED_DIM))
    }
}

/// Embed every frame in order. Fails up front if the embedder does not
/// produce 512-D vectors.
pub fn embed_frames(frames: &[Frame], embedder: &dyn FrameEmbedder, fps: f64) -> Result<FrameEmbeddingSeq> {
    if embedder.output_dim() != EMBED_DIM {
        return Err(Error::Config(format!(
            "frame embedder outputs dimension {}, expected {EMBED_DIM}",
            embedder.output_dim()
        )));
    }
    if fps <= 0.0 {
        return Err(Error::InvalidInput("fps must be positive".into()));
    }
    let vectors = frames.iter().map(|f| embedder.embed(f)).collect();
    Ok(FrameEmbeddingSeq { vectors, fps })
}

/// Arithmetic mean over consecutive groups of `round(fps)` frame vectors;
/// a trailing partial group is dropped, so the output covers
/// `floor(n_frames / round(fps))` whole seconds.
pub fn average_per_second(seq: &FrameEmbeddingSeq, track_id: impl Into<String>) -> Result<SecondEmbeddingSeq> {
    if seq.fps <= 0.0 {
        return Err(Error::InvalidInput("fps must be positive".into()));
    }
    let group = (seq.fps.round() as usize).max(1);
    let vectors = seq
        .vectors
        .chunks_exact(group)
        .map(|chunk| {
            let mut mean = Array1::zeros(chunk[0].len());
            for v in chunk {
                mean += v;
            }
            mean / group as f64
        })
        .collect();
    Ok(SecondEmbeddingSeq { vectors, track_id: track_id.into() })
}

/// Slice the per-second context covering the audio interval
/// `[start_s, start_s + length_s)`: seconds `floor(start)` through
/// `floor(start) + ceil(length) - 1`.
pub fn align_video_segment(seq: &SecondEmbeddingSeq, start_s: f64, length_s: f64) -> Result<SecondEmbeddingSeq> {
    if start_s < 0.0 || length_s <= 0.0 {
        return Err(Error::InvalidInput(format!("bad segment start={start_s} length={length_s}")));
    }
    let first = start_s.floor() as usize;
    let count = length_s.ceil() as usize;
    if first + count > seq.len() {
        return Err(Error::OutOfRange {
            track_id: seq.track_id.clone(),
            reason: format!(
                "segment seconds {first}..{} exceed coverage of {} seconds",
                first + count,
                seq.len()
            ),
        });
    }
    Ok(SecondEmbeddingSeq {
        vectors: seq.vectors[first..first + count].to_vec(),
        track_id: seq.track_id.clone(),
    })
}

const FEATURE_MAGIC: &[u8; 8] = b"VCMRFEAT";
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

fn write_vector_file(path: &Path, vectors: &[Array1<f64>]) -> Result<()> {
    let dim = vectors.first().map(|v| v.len()).unwrap_or(EMBED_DIM);
    let mut out = Vec::with_capacity(20 + vectors.len() * dim * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    for v in vectors {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_vector_file(path: &Path) -> Result<(Vec<Array1<f64>>, u32)> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Data(format!("{}: {reason}", path.display()));
    if data.len() < 20 || &data[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature cache file".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != FEATURE_SCHEMA_VERSION {
        return Err(bad(format!("unsupported feature schema_version {version}")));
    }
    let dim = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(data[16..20].try_into().unwrap()) as usize;
    if data.len() != 20 + dim * n * 8 {
        return Err(bad(format!("expected {} payload bytes, got {}", dim * n * 8, data.len() - 20)));
    }
    let mut vectors = Vec::with_capacity(n);
    for i in 0..n {
        let base = 20 + i * dim * 8;
        let v: Vec<f64> = data[base..base + dim * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        vectors.push(Array1::from(v));
    }
    Ok((vectors, version))
}

pub fn feature_cache_path(cache_dir: &Path, track_id: &str) -> PathBuf {
    cache_dir.join(format!("{track_id}.feat"))
}

pub fn save_second_embeddings(cache_dir: &Path, seq: &SecondEmbeddingSeq) -> Result<()> {
    write_vector_file(&feature_cache_path(cache_dir, &seq.track_id), &seq.vectors)
}

pub fn load_second_embeddings(cache_dir: &Path, track_id: &str) -> Result<SecondEmbeddingSeq> {
    let (vectors, _) = read_vector_file(&feature_cache_path(cache_dir, track_id))?;
    Ok(SecondEmbeddingSeq { vectors, track_id: track_id.into() })
}

/// Save per-frame vectors for the precomputed-embedder adapter.
pub fn save_frame_embeddings(path: &Path, vectors: &[Array1<f64>]) -> Result<()> {
    write_vector_file(path, vectors)
}

/// Load every `.pgm` frame in a directory, ordered by file name.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| Frame::load_pgm(p)).collect()
}
