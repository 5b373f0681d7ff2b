//! Projection heads, the tagging MLP and the recurrent video-context
//! encoder.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, Linear, Param};
use super::lstm::LstmLayer;
use crate::error::{Error, Result};

/// Two affine layers with one ReLU, mapping encoder output to the lower
/// dimensional space where the contrastive loss is computed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub proj_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { in_dim: 512, proj_dim: 128 }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim >= self.in_dim {
            return Err(Error::Config(format!(
                "proj_dim {} must be lower than in_dim {}",
                self.proj_dim, self.in_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    fc1: Linear,
    fc2: Linear,
    relu_mask: Option<Array2<f64>>,
}

impl Projector {
    pub fn new(name: &str, cfg: ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Projector {
            fc1: Linear::new(&format!("{name}.fc1"), cfg.in_dim, cfg.in_dim, rng),
            fc2: Linear::new(&format!("{name}.fc2"), cfg.in_dim, cfg.proj_dim, rng),
            cfg,
            relu_mask: None,
        })
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let h = self.fc1.forward(x, train);
        let a = h.mapv(|v| v.max(0.0));
        if train {
            self.relu_mask = Some(h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        self.fc2.forward(&a, train)
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let da = self.fc2.backward(dy);
        let mask = self.relu_mask.take().expect("forward(train) before backward");
        self.fc1.backward(&(da * &mask))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out
    }
}

/// Two affine layers with one ReLU and per-tag sigmoid outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TagHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_tags: usize,
}

impl Default for TagHeadConfig {
    fn default() -> Self {
        TagHeadConfig { in_dim: 512, hidden_dim: 256, n_tags: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct TagHead {
    pub cfg: TagHeadConfig,
    fc1: Linear,
    fc2: Linear,
    relu_mask: Option<Array2<f64>>,
    logits: Option<Array2<f64>>,
}

impl TagHead {
    pub fn new(name: &str, cfg: TagHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_tags == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config("tag head needs positive hidden_dim and n_tags".into()));
        }
        Ok(TagHead {
            fc1: Linear::new(&format!("{name}.fc1"), cfg.in_dim, cfg.hidden_dim, rng),
            fc2: Linear::new(&format!("{name}.fc2"), cfg.hidden_dim, cfg.n_tags, rng),
            cfg,
            relu_mask: None,
            logits: None,
        })
    }

    /// Per-tag scores strictly inside (0, 1).
    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let h = self.fc1.forward(x, train);
        let a = h.mapv(|v| v.max(0.0));
        let logits = self.fc2.forward(&a, train);
        let scores = logits.mapv(sigmoid);
        if train {
            self.relu_mask = Some(h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            self.logits = Some(logits);
        }
        scores
    }

    /// Mean per-tag binary cross-entropy and its gradient through the
    /// sigmoid, accumulated into the head's parameters. Returns the loss.
    pub fn bce_backward(&mut self, scores: &Array2<f64>, labels: &Array2<f64>) -> f64 {
        let n = (scores.shape()[0] * scores.shape()[1]) as f64;
        let eps = 1e-12;
        let loss = scores
            .iter()
            .zip(labels.iter())
            .map(|(s, y)| -(y * (s + eps).ln() + (1.0 - y) * (1.0 - s + eps).ln()))
            .sum::<f64>()
            / n;
        // d(BCE)/d(logit) = (score - label) / n
        let dlogits = (scores - labels) / n;
        let da = self.fc2.backward(&dlogits);
        let mask = self.relu_mask.take().expect("forward(train) before bce_backward");
        self.logits = None;
        let _ = self.fc1.backward(&(da * &mask));
        loss
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out
    }
}

/// Recurrent encoder for per-second video context: a 2-layer LSTM whose
/// final hidden state feeds one fully connected layer to 512 dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VideoEncoderConfig {
    pub input_dim: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        VideoEncoderConfig { input_dim: 512, n_layers: 2, hidden_dim: 256, out_dim: 512 }
    }
}

impl VideoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers != 2 {
            return Err(Error::Config(format!("video encoder is a 2-layer LSTM, got n_layers = {}", self.n_layers)));
        }
        if self.out_dim != 512 {
            return Err(Error::Config(format!("video encoder out_dim must be 512, got {}", self.out_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub cfg: VideoEncoderConfig,
    lstm1: LstmLayer,
    lstm2: LstmLayer,
    fc: Linear,
    seq_len: Option<usize>,
}

impl VideoEncoder {
    pub fn new(name: &str, cfg: VideoEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(VideoEncoder {
            lstm1: LstmLayer::new(&format!("{name}.lstm1"), cfg.input_dim, cfg.hidden_dim, rng),
            lstm2: LstmLayer::new(&format!("{name}.lstm2"), cfg.hidden_dim, cfg.hidden_dim, rng),
            fc: Linear::new(&format!("{name}.fc"), cfg.hidden_dim, cfg.out_dim, rng),
            cfg,
            seq_len: None,
        })
    }

    /// Encode a batch of equal-length second-vector slices
    /// (steps of shape (batch, input_dim)) to (batch, out_dim).
    pub fn forward(&mut self, steps: &[Array2<f64>], train: bool) -> Result<Array2<f64>> {
        if steps.is_empty() {
            return Err(Error::InvalidInput("video encoder needs a non-empty slice".into()));
        }
        let h1 = self.lstm1.forward(steps, train);
        let h2 = self.lstm2.forward(&h1, train);
        if train {
            self.seq_len = Some(steps.len());
        }
        Ok(self.fc.forward(h2.last().unwrap(), train))
    }

    pub fn backward(&mut self, dy: &Array2<f64>) {
        let seq_len = self.seq_len.take().expect("forward(train) before backward");
        let dh_last = self.fc.backward(dy);
        let batch = dh_last.shape()[0];
        let mut dh2 = vec![Array2::zeros((batch, self.cfg.hidden_dim)); seq_len];
        *dh2.last_mut().unwrap() = dh_last;
        let dh1 = self.lstm2.backward(&dh2);
        let _ = self.lstm1.backward(&dh1);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.lstm1.params_mut();
        out.extend(self.lstm2.params_mut());
        out.extend(self.fc.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.lstm1.params();
        out.extend(self.lstm2.params());
        out.extend(self.fc.params());
        out
    }
}

/// Convert a batch of equal-length per-second slices into step-major arrays
/// for the recurrent encoder.
pub fn batch_second_slices(slices: &[Vec<Array1<f64>>]) -> Result<Vec<Array2<f64>>> {
    let seq_len = slices.first().map(|s| s.len()).unwrap_or(0);
    if seq_len == 0 {
        return Err(Error::InvalidInput("empty video slice batch".into()));
    }
    if slices.iter().any(|s| s.len() != seq_len) {
        return Err(Error::InvalidInput("video slices in a batch must share a length".into()));
    }
    let dim = slices[0][0].len();
    let mut steps = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        let mut step = Array2::zeros((slices.len(), dim));
        for (b, slice) in slices.iter().enumerate() {
            step.row_mut(b).assign(&slice[t]);
        }
        steps.push(step);
    }
    Ok(steps)
}
