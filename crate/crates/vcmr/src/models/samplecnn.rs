//! Raw-waveform convolutional encoder.
//!
//! The stem is a non-overlapping convolution with kernel = stride =
//! `first_kernel`, followed by `n_blocks` blocks of conv(3, pad 1) +
//! batch norm + ReLU + max-pool(`pool_size`). With the default 9 blocks and
//! pool size 3 the admissible input length is `first_kernel * 3^9` samples
//! and the temporal axis collapses to a single 512-wide feature vector.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm1d, Conv1d, MaxPool1d, Param, Relu};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCnnConfig {
    /// kernel (and stride) of the first convolution; the resolution knob
    pub first_kernel: usize,
    pub n_blocks: usize,
    pub pool_size: usize,
    pub channel_schedule: Vec<usize>,
    pub out_dim: usize,
    pub sample_rate_hz: u32,
}

impl Default for SampleCnnConfig {
    fn default() -> Self {
        SampleCnnConfig {
            first_kernel: 5,
            n_blocks: 9,
            pool_size: 3,
            channel_schedule: vec![128, 128, 256, 256, 256, 256, 512, 512, 512],
            out_dim: 512,
            sample_rate_hz: 16_000,
        }
    }
}

impl SampleCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.first_kernel == 0 {
            return Err(Error::Config("first_kernel must be positive".into()));
        }
        if self.channel_schedule.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "channel_schedule has {} entries, expected n_blocks = {}",
                self.channel_schedule.len(),
                self.n_blocks
            )));
        }
        if self.channel_schedule.last() != Some(&self.out_dim) {
            return Err(Error::Config(format!(
                "last channel stage {:?} must equal out_dim {}",
                self.channel_schedule.last(),
                self.out_dim
            )));
        }
        Ok(())
    }

    /// Admissible input length: `first_kernel * pool_size^n_blocks` samples.
    pub fn required_input_samples(&self) -> usize {
        self.first_kernel * self.pool_size.pow(self.n_blocks as u32)
    }

    pub fn input_duration_s(&self) -> f64 {
        self.required_input_samples() as f64 / self.sample_rate_hz as f64
    }

    fn block_channels(&self, block: usize) -> (usize, usize) {
        let input = if block == 0 { self.channel_schedule[0] } else { self.channel_schedule[block - 1] };
        (input, self.channel_schedule[block])
    }

    /// Closed-form trainable parameter count: stem conv + affine batch norm
    /// terms, then per block conv(3) weights/bias plus batch-norm scale and
    /// shift. Running statistics are buffers, not parameters.
    pub fn count_parameters(&self) -> usize {
        let c0 = self.channel_schedule[0];
        let mut total = self.first_kernel * c0 + c0 + 2 * c0;
        for block in 0..self.n_blocks {
            let (cin, cout) = self.block_channels(block);
            total += 3 * cin * cout + cout + 2 * cout;
        }
        total
    }
}

/// Input-resolution table entry for one first-kernel choice.
#[derive(Debug, Clone, Serialize)]
pub struct Resolution {
    pub first_kernel: usize,
    pub input_samples: usize,
    pub duration_s: f64,
}

pub fn resolution_calculus(cfg: &SampleCnnConfig) -> Resolution {
    Resolution {
        first_kernel: cfg.first_kernel,
        input_samples: cfg.required_input_samples(),
        duration_s: cfg.input_duration_s(),
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
    relu: Relu,
    pool: MaxPool1d,
}

#[derive(Debug, Clone)]
pub struct SampleCnn {
    pub cfg: SampleCnnConfig,
    stem_conv: Conv1d,
    stem_bn: BatchNorm1d,
    stem_relu: Relu,
    blocks: Vec<ConvBlock>,
    pub frozen_blocks: usize,
}

impl SampleCnn {
    pub fn new(cfg: SampleCnnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.channel_schedule[0];
        let stem_conv = Conv1d::new("stem.conv", 1, c0, cfg.first_kernel, cfg.first_kernel, 0, rng);
        let stem_bn = BatchNorm1d::new("stem.bn", c0);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let (cin, cout) = cfg.block_channels(b);
            blocks.push(ConvBlock {
                conv: Conv1d::new(&format!("block{b}.conv"), cin, cout, 3, 1, 1, rng),
                bn: BatchNorm1d::new(&format!("block{b}.bn"), cout),
                relu: Relu::default(),
                pool: MaxPool1d::new(cfg.pool_size),
            });
        }
        Ok(SampleCnn { cfg, stem_conv, stem_bn, stem_relu: Relu::default(), blocks, frozen_blocks: 0 })
    }

    /// Encode a batch of waveform segments (batch, samples) to (batch, out_dim).
    pub fn forward(&mut self, segments: &Array2<f64>, train: bool) -> Result<Array2<f64>> {
        let required = self.cfg.required_input_samples();
        if segments.shape()[1] != required {
            return Err(Error::Shape {
                expected: format!("{required} samples"),
                actual: format!("{} samples", segments.shape()[1]),
            });
        }
        let batch = segments.shape()[0];
        let x = segments
            .to_owned()
            .into_shape((batch, 1, required))
            .expect("contiguous segment batch");
        let mut h = self.stem_conv.forward(&x, train);
        h = self.stem_bn.forward(&h, train);
        h = self.stem_relu.forward(&h, train);
        for block in &mut self.blocks {
            h = block.conv.forward(&h, train);
            h = block.bn.forward(&h, train);
            h = block.relu.forward(&h, train);
            h = block.pool.forward(&h, train);
        }
        debug_assert_eq!(h.shape()[2], 1, "temporal axis must collapse");
        let out = h.index_axis(Axis(2), 0).to_owned();
        debug_assert_eq!(out.shape(), &[batch, self.cfg.out_dim]);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder output".into()));
        }
        Ok(out)
    }

    /// Backpropagate from the embedding gradient; parameter gradients
    /// accumulate on every layer including frozen ones (the optimizer skips
    /// non-trainable parameters).
    pub fn backward(&mut self, d_embedding: &Array2<f64>) {
        let batch = d_embedding.shape()[0];
        let mut dh = d_embedding
            .to_owned()
            .into_shape((batch, self.cfg.out_dim, 1))
            .expect("contiguous gradient");
        for block in self.blocks.iter_mut().rev() {
            dh = block.pool.backward(&dh);
            dh = block.relu.backward(&dh);
            dh = block.bn.backward(&dh);
            dh = block.conv.backward(&dh);
        }
        dh = self.stem_relu.backward(&dh);
        dh = self.stem_bn.backward(&dh);
        let _ = self.stem_conv.backward(&dh);
    }

    /// Mark the first `n` blocks (and the stem, which feeds block 1) as
    /// frozen: their parameters leave the optimizer and their normalization
    /// statistics stop adapting. `n = 0` makes everything trainable again.
    pub fn freeze_blocks(&mut self, n: usize) -> Result<()> {
        if n > self.cfg.n_blocks {
            return Err(Error::InvalidInput(format!(
                "cannot freeze {n} blocks of a {}-block encoder",
                self.cfg.n_blocks
            )));
        }
        self.frozen_blocks = n;
        let stem_frozen = n >= 1;
        for p in self.stem_conv.params_mut() {
            p.trainable = !stem_frozen;
        }
        self.stem_bn.frozen = stem_frozen;
        for p in self.stem_bn.params_mut() {
            p.trainable = !stem_frozen;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let frozen = i < n;
            for p in block.conv.params_mut().into_iter().chain(block.bn.params_mut()) {
                p.trainable = !frozen;
            }
            block.bn.frozen = frozen;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) -> Result<()> {
        self.freeze_blocks(self.cfg.n_blocks)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.stem_conv.params_mut();
        out.extend(self.stem_bn.params_mut());
        for block in &mut self.blocks {
            out.extend(block.conv.params_mut());
            out.extend(block.bn.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.stem_conv.params();
        out.extend(self.stem_bn.params());
        for block in &self.blocks {
            out.extend(block.conv.params());
            out.extend(block.bn.params());
        }
        out
    }

    /// Every tensor the checkpoint must carry: parameters plus batch-norm
    /// running statistics.
    pub fn named_tensors(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        let mut out: Vec<(String, ndarray::ArrayD<f64>)> =
            self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let mut push_stats = |bn: &BatchNorm1d| {
            out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone().into_dyn()));
            out.push((format!("{}.running_var", bn.name), bn.running_var.clone().into_dyn()));
        };
        push_stats(&self.stem_bn);
        for block in &self.blocks {
            push_stats(&block.bn);
        }
        out
    }

    pub fn load_named_tensors(
        &mut self,
        tensors: &std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
    ) -> Result<()> {
        let missing = |name: &str| Error::Checkpoint(format!("missing tensor {name}"));
        for p in self.params_mut() {
            let t = tensors.get(&p.name).ok_or_else(|| missing(&p.name))?;
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
        let mut bns: Vec<&mut BatchNorm1d> = vec![&mut self.stem_bn];
        bns.extend(self.blocks.iter_mut().map(|b| &mut b.bn));
        for bn in bns {
            for (field, target) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let name = format!("{}.{field}", bn.name);
                let t = tensors.get(&name).ok_or_else(|| missing(&name))?;
                *target = t
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Checkpoint(format!("tensor {name} is not 1-D")))?;
            }
        }
        Ok(())
    }

    /// Instantiated trainable parameter count; agrees with the closed form.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(first_kernel: usize) -> SampleCnnConfig {
        SampleCnnConfig {
            first_kernel,
            n_blocks: 3,
            pool_size: 3,
            channel_schedule: vec![4, 4, 8],
            out_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn resolution_calculus_matches_grid() {
        for (k, samples, seconds) in [(1, 19683, 1.2302), (3, 59049, 3.6906), (5, 98415, 6.1509)] {
            let cfg = SampleCnnConfig { first_kernel: k, ..Default::default() };
            let r = resolution_calculus(&cfg);
            assert_eq!(r.input_samples, samples);
            assert!((r.duration_s - seconds).abs() < 5e-5, "k={k}: {}", r.duration_s);
        }
    }

    #[test]
    fn default_parameter_budget() {
        let cfg = SampleCnnConfig::default();
        let count = cfg.count_parameters();
        let target = 2_600_000.0;
        assert!(
            (count as f64 - target).abs() / target <= 0.15,
            "parameter count {count} outside 2.6M +- 15%"
        );
    }

    #[test]
    fn closed_form_count_matches_instantiated_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small_cfg(2);
        let model = SampleCnn::new(cfg.clone(), &mut rng).unwrap();
        assert_eq!(cfg.count_parameters(), model.count_parameters());
    }

    #[test]
    fn doubling_channels_roughly_quadruples_conv_count() {
        let base = small_cfg(2);
        let doubled = SampleCnnConfig {
            channel_schedule: base.channel_schedule.iter().map(|c| c * 2).collect(),
            out_dim: base.out_dim * 2,
            ..base.clone()
        };
        // subtract stem and affine terms to isolate the block convolutions
        let conv_count = |cfg: &SampleCnnConfig| {
            (0..cfg.n_blocks)
                .map(|b| {
                    let (cin, cout) = cfg.block_channels(b);
                    3 * cin * cout
                })
                .sum::<usize>() as f64
        };
        let ratio = conv_count(&doubled) / conv_count(&base);
        assert!((ratio - 4.0).abs() < 1e-9);
    }

    #[test]
    fn single_tiny_block_count_by_hand() {
        let cfg = SampleCnnConfig {
            first_kernel: 3,
            n_blocks: 1,
            pool_size: 3,
            channel_schedule: vec![1],
            out_dim: 1,
            ..Default::default()
        };
        // stem: 3*1*1 + 1 + bn 2; block: 3*1*1 + 1 + bn 2
        assert_eq!(cfg.count_parameters(), 12);
    }

    #[test]
    fn forward_emits_single_vector_and_rejects_off_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg(2);
        let required = cfg.required_input_samples();
        let mut model = SampleCnn::new(cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, required), |_| rng.gen_range(-1.0..1.0));
        let y = model.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[2, 8]);
        let short = Array2::zeros((1, required - 1));
        assert!(matches!(model.forward(&short, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn all_zero_input_yields_finite_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg(1);
        let mut model = SampleCnn::new(cfg.clone(), &mut rng).unwrap();
        let x = Array2::zeros((1, cfg.required_input_samples()));
        let y = model.forward(&x, false).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_gradient_matches_finite_differences() {
        use crate::models::layers::finite_diff;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SampleCnnConfig {
            first_kernel: 2,
            n_blocks: 2,
            pool_size: 3,
            channel_schedule: vec![3, 4],
            out_dim: 4,
            ..Default::default()
        };
        let required = cfg.required_input_samples();
        let mut model = SampleCnn::new(cfg, &mut rng).unwrap();
        let x = Array2::from_shape_fn((2, required), |_| rng.gen_range(-1.0..1.0));
        let y = model.forward(&x, true).unwrap();
        model.backward(&y.clone());
        let loss = |m: &SampleCnn, x: &Array2<f64>| {
            let mut probe = m.clone();
            let y = probe.forward(x, true).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        // probe a stem weight and a block weight
        let checks: Vec<(usize, Vec<usize>)> = vec![(0, vec![1, 0, 1]), (4, vec![2, 1, 0])];
        for (param_pos, idx) in checks {
            let analytic = model.params()[param_pos].grad[ndarray::IxDyn(&idx)];
            let orig = model.params()[param_pos].value[ndarray::IxDyn(&idx)];
            let num = finite_diff(
                orig,
                |v| {
                    let mut probe = model.clone();
                    probe.params_mut()[param_pos].value[ndarray::IxDyn(&idx)] = v;
                    loss(&probe, &x)
                },
                1e-5,
            );
            assert!(
                (analytic - num).abs() < 1e-4 * analytic.abs().max(1.0),
                "param {param_pos} {idx:?}: {analytic} vs {num}"
            );
        }
    }

    #[test]
    fn freeze_marks_parameters_and_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = SampleCnn::new(small_cfg(1), &mut rng).unwrap();
        model.freeze_blocks(2).unwrap();
        let frozen: Vec<bool> = model.params().iter().map(|p| !p.trainable).collect();
        // stem (4 params) + 2 blocks (4 params each) frozen, last block trainable
        assert!(frozen[..12].iter().all(|&f| f));
        assert!(frozen[12..].iter().all(|&f| !f));
        assert!(model.freeze_blocks(7).is_err());
        model.freeze_blocks(0).unwrap();
        assert!(model.params().iter().all(|p| p.trainable));
    }
}
