//! Stacked LSTM with full backpropagation through time.
//!
//! Sequences within a batch share a length (the pipeline aligns every video
//! slice to the same number of seconds before batching). Gate layout in the
//! packed weight matrices is input, forget, cell, output.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::layers::{sigmoid, Param};

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: Param, // [4H, In]
    pub w_hh: Param, // [4H, H]
    pub b: Param,    // [4H]
    hidden: usize,
    input: usize,
    cache: Option<Vec<StepCache>>,
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmLayer {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let mut init = |shape: &[usize]| {
            ndarray::ArrayD::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        LstmLayer {
            w_ih: Param::new(format!("{name}.w_ih"), init(&[4 * hidden, input])),
            w_hh: Param::new(format!("{name}.w_hh"), init(&[4 * hidden, hidden])),
            b: Param::new(format!("{name}.b"), init(&[4 * hidden])),
            hidden,
            input,
            cache: None,
        }
    }

    /// Run the full sequence; returns the hidden state at every step.
    pub fn forward(&mut self, xs: &[Array2<f64>], train: bool) -> Vec<Array2<f64>> {
        let batch = xs[0].shape()[0];
        let h = self.hidden;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut h_t = Array2::zeros((batch, h));
        let mut c_t = Array2::zeros((batch, h));
        let mut outputs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let mut pre = x.dot(&w_ih.t()) + h_t.dot(&w_hh.t());
            pre += &bias;
            let i = pre.slice(ndarray::s![.., 0..h]).mapv(sigmoid);
            let f = pre.slice(ndarray::s![.., h..2 * h]).mapv(sigmoid);
            let g = pre.slice(ndarray::s![.., 2 * h..3 * h]).mapv(f64::tanh);
            let o = pre.slice(ndarray::s![.., 3 * h..4 * h]).mapv(sigmoid);
            let c_new = &f * &c_t + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o * &tanh_c;
            if train {
                caches.push(StepCache {
                    x: x.clone(),
                    h_prev: h_t.clone(),
                    c_prev: c_t.clone(),
                    i,
                    f,
                    g,
                    o,
                    tanh_c,
                });
            }
            h_t = h_new.clone();
            c_t = c_new;
            outputs.push(h_new);
        }
        if train {
            self.cache = Some(caches);
        }
        outputs
    }

    /// BPTT given gradients with respect to each step's hidden output.
    /// Returns per-step input gradients and accumulates parameter gradients.
    pub fn backward(&mut self, dhs: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let caches = self.cache.take().expect("forward(train) before backward");
        let steps = caches.len();
        let batch = dhs[0].shape()[0];
        let h = self.hidden;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mut dw_ih = Array2::<f64>::zeros((4 * h, self.input));
        let mut dw_hh = Array2::<f64>::zeros((4 * h, h));
        let mut db = Array1::<f64>::zeros(4 * h);
        let mut dxs = vec![Array2::zeros((batch, self.input)); steps];
        let mut dh_next = Array2::<f64>::zeros((batch, h));
        let mut dc_next = Array2::<f64>::zeros((batch, h));
        for t in (0..steps).rev() {
            let cache = &caches[t];
            let dh = &dhs[t] + &dh_next;
            let d_o = &dh * &cache.tanh_c;
            let dc = &dc_next + &(&dh * &cache.o * &cache.tanh_c.mapv(|v| 1.0 - v * v));
            let di = &dc * &cache.g;
            let dg = &dc * &cache.i;
            let df = &dc * &cache.c_prev;
            dc_next = &dc * &cache.f;
            let dpre_i = &di * &cache.i * &cache.i.mapv(|v| 1.0 - v);
            let dpre_f = &df * &cache.f * &cache.f.mapv(|v| 1.0 - v);
            let dpre_g = &dg * &cache.g.mapv(|v| 1.0 - v * v);
            let dpre_o = &d_o * &cache.o * &cache.o.mapv(|v| 1.0 - v);
            let mut dpre = Array2::zeros((batch, 4 * h));
            dpre.slice_mut(ndarray::s![.., 0..h]).assign(&dpre_i);
            dpre.slice_mut(ndarray::s![.., h..2 * h]).assign(&dpre_f);
            dpre.slice_mut(ndarray::s![.., 2 * h..3 * h]).assign(&dpre_g);
            dpre.slice_mut(ndarray::s![.., 3 * h..4 * h]).assign(&dpre_o);
            dw_ih = dw_ih + dpre.t().dot(&cache.x);
            dw_hh = dw_hh + dpre.t().dot(&cache.h_prev);
            db = db + dpre.sum_axis(Axis(0));
            dxs[t] = dpre.dot(&w_ih);
            dh_next = dpre.dot(&w_hh);
        }
        self.w_ih.grad += &dw_ih.into_dyn();
        self.w_hh.grad += &dw_hh.into_dyn();
        self.b.grad += &db.into_dyn();
        dxs
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::layers::finite_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_loss(layer: &LstmLayer, xs: &[Array2<f64>]) -> f64 {
        let mut probe = layer.clone();
        let hs = probe.forward(xs, false);
        // readout: squared sum of the final hidden state
        0.5 * hs.last().unwrap().iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = LstmLayer::new("l", 3, 4, &mut rng);
        let xs: Vec<Array2<f64>> =
            (0..5).map(|_| Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0))).collect();
        let hs = layer.forward(&xs, true);
        let mut dhs: Vec<Array2<f64>> = hs.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
        *dhs.last_mut().unwrap() = hs.last().unwrap().clone();
        let dxs = layer.backward(&dhs);

        for (pname, idx) in [("w_ih", [1, 2]), ("w_hh", [5, 3]), ("w_ih", [10, 0])] {
            let get = |l: &LstmLayer| -> f64 {
                let p = if pname == "w_ih" { &l.w_ih } else { &l.w_hh };
                p.value[ndarray::IxDyn(&idx)]
            };
            let analytic = {
                let p = if pname == "w_ih" { &layer.w_ih } else { &layer.w_hh };
                p.grad[ndarray::IxDyn(&idx)]
            };
            let num = finite_diff(
                get(&layer),
                |v| {
                    let mut probe = layer.clone();
                    let p = if pname == "w_ih" { &mut probe.w_ih } else { &mut probe.w_hh };
                    p.value[ndarray::IxDyn(&idx)] = v;
                    run_loss(&probe, &xs)
                },
                1e-5,
            );
            assert!((analytic - num).abs() < 1e-6, "{pname}{idx:?}: {analytic} vs {num}");
        }

        // input gradient at the first timestep (exercises a long BPTT path)
        let analytic = dxs[0][[1, 2]];
        let num = finite_diff(
            xs[0][[1, 2]],
            |v| {
                let mut xp: Vec<Array2<f64>> = xs.clone();
                xp[0][[1, 2]] = v;
                run_loss(&layer, &xp)
            },
            1e-5,
        );
        assert!((analytic - num).abs() < 1e-6, "{analytic} vs {num}");
    }

    #[test]
    fn lstm_inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = LstmLayer::new("l", 4, 8, &mut rng);
        let xs: Vec<Array2<f64>> =
            (0..3).map(|_| Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0))).collect();
        let a = layer.forward(&xs, false);
        let b = layer.forward(&xs, false);
        assert_eq!(a.last().unwrap(), b.last().unwrap());
    }
}
