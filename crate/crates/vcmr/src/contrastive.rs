//! Pair construction and the normalized temperature-scaled cross-entropy
//! (NT-Xent) objective.
//!
//! A batch of N positive pairs is stacked into 2N embeddings. For anchor i
//! with positive j, the per-anchor term is
//! `-log( exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) )`
//! with cosine similarity, and the loss averages both anchor directions over
//! all N pairs. The log-sum-exp is max-stabilized: at tau = 0.1 similarities
//! scale by 10, which a naive exponential sum would not survive at low
//! precision.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor for cosine similarity: zero vectors are normalized against
/// this instead of erroring, since they can occur transiently at init.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// N aligned positive pairs: row i of `left` is positive with row i of
/// `right`; everything else in the stacked 2N batch is a negative.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl PairBatch {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(Error::InvalidInput(format!(
                "pair batch sides disagree: {:?} vs {:?}",
                left.shape(),
                right.shape()
            )));
        }
        if left.shape()[0] == 0 {
            return Err(Error::InvalidInput("pair batch must contain at least one pair".into()));
        }
        if left.iter().chain(right.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding in pair batch".into()));
        }
        Ok(PairBatch { left, right })
    }

    pub fn n_pairs(&self) -> usize {
        self.left.shape()[0]
    }

    /// Stack left then right into the 2N x d anchor matrix.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[self.left.view(), self.right.view()]).expect("same width")
    }
}

/// Cosine similarity matrix between the rows of A and B, entries in [-1, 1].
/// Rows with norm below the floor are normalized against the floor; their
/// indices are reported alongside the matrix.
pub fn cosine_similarity_matrix_diag(
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> (Array2<f64>, Vec<usize>) {
    let norm = |m: &Array2<f64>| -> (Array2<f64>, Vec<usize>) {
        let mut flagged = Vec::new();
        let mut out = m.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if n < NORM_EPS {
                flagged.push(i);
                row.mapv_inplace(|v| v / NORM_EPS);
            } else {
                row.mapv_inplace(|v| v / n);
            }
        }
        (out, flagged)
    };
    let (ua, mut flagged) = norm(a);
    let (ub, fb) = norm(b);
    flagged.extend(fb);
    (ua.dot(&ub.t()), flagged)
}

pub fn cosine_similarity_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    cosine_similarity_matrix_diag(a, b).0
}

fn normalized_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut u = z.clone();
    let mut norms = Array1::zeros(z.shape()[0]);
    for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    (u, norms)
}

fn positive_index(i: usize, n: usize) -> usize {
    (i + n) % (2 * n)
}

/// NT-Xent loss over the stacked 2N batch.
pub fn nt_xent_loss(batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(nt_xent_core(batch, cfg, false)?.0)
}

/// Loss plus gradients with respect to the raw (unnormalized) left and right
/// embeddings.
pub fn nt_xent_loss_and_grad(
    batch: &PairBatch,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (loss, grads) = nt_xent_core(batch, cfg, true)?;
    let (gl, gr) = grads.expect("gradients requested");
    Ok((loss, gl, gr))
}

#[allow(clippy::type_complexity)]
fn nt_xent_core(
    batch: &PairBatch,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(f64, Option<(Array2<f64>, Array2<f64>)>)> {
    cfg.validate()?;
    let n = batch.n_pairs();
    let total = 2 * n;
    let z = batch.stacked();
    let (u, norms) = normalized_rows(&z);
    let sim = u.dot(&u.t()).mapv(|s| s / cfg.temperature);

    let mut loss = 0.0;
    // softmax over k != i, max-stabilized
    let mut probs = with_grad.then(|| Array2::zeros((total, total)));
    for i in 0..total {
        let row = sim.index_axis(Axis(0), i);
        let mut max = f64::NEG_INFINITY;
        for k in 0..total {
            if k != i && row[k] > max {
                max = row[k];
            }
        }
        let mut denom = 0.0;
        for k in 0..total {
            if k != i {
                denom += (row[k] - max).exp();
            }
        }
        let j = positive_index(i, n);
        loss += -(row[j] - max) + denom.ln();
        if let Some(p) = probs.as_mut() {
            for k in 0..total {
                if k != i {
                    p[[i, k]] = (row[k] - max).exp() / denom;
                }
            }
        }
    }
    loss /= total as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite contrastive loss".into()));
    }

    let grads = if let Some(mut g_sim) = probs {
        // dL/dsim[i,k] = (softmax - one_hot(positive)) / (tau * 2N), k != i
        let scale = 1.0 / (cfg.temperature * total as f64);
        for i in 0..total {
            let j = positive_index(i, n);
            g_sim[[i, j]] -= 1.0;
        }
        g_sim.mapv_inplace(|v| v * scale);
        for i in 0..total {
            g_sim[[i, i]] = 0.0;
        }
        // sim = U U^T: dL/dU = (G + G^T) U
        let g_u = (&g_sim + &g_sim.t()).dot(&u);
        // u = z / ||z||: project out the radial component and rescale
        let mut g_z = Array2::zeros((total, z.shape()[1]));
        for i in 0..total {
            let ui = u.index_axis(Axis(0), i);
            let gi = g_u.index_axis(Axis(0), i);
            let radial = ui.dot(&gi);
            let mut row = g_z.index_axis_mut(Axis(0), i);
            for (out, (g, uv)) in row.iter_mut().zip(gi.iter().zip(ui.iter())) {
                *out = (g - radial * uv) / norms[i];
            }
        }
        let (gl, gr) = g_z.view().split_at(Axis(0), n);
        Some((gl.to_owned(), gr.to_owned()))
    } else {
        None
    };
    Ok((loss, grads))
}

/// Unimodal pairing: first and second augmented views, positives by input
/// index.
pub fn build_unimodal_batch(first_views: Array2<f64>, second_views: Array2<f64>) -> Result<PairBatch> {
    PairBatch::new(first_views, second_views)
}

/// Cross-modal pairing: audio against video embeddings from the same tracks,
/// aligned by index. Track identifiers guard against silent misalignment.
pub fn build_multimodal_batch(
    audio: Array2<f64>,
    video: Array2<f64>,
    audio_track_ids: &[String],
    video_track_ids: &[String],
) -> Result<PairBatch> {
    if audio_track_ids != video_track_ids {
        let mismatch = audio_track_ids
            .iter()
            .zip(video_track_ids.iter())
            .position(|(a, v)| a != v)
            .unwrap_or(0);
        return Err(Error::InvalidInput(format!(
            "audio/video track alignment broken at index {mismatch}: {:?} vs {:?}",
            audio_track_ids.get(mismatch),
            video_track_ids.get(mismatch)
        )));
    }
    PairBatch::new(audio, video)
}
