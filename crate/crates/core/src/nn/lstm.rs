//! Convolutional LSTM cell with full backpropagation through time support.
//!
//! Gates are produced by a single 3×3 convolution over the concatenated
//! (input, hidden) maps, split into (input, forget, candidate, output).
//! The forget-gate bias starts at 1 so memories survive early training.

use ndarray::{s, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::conv::Conv2d;
use super::Param;

#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub conv: Conv2d,
    pub hidden_ch: usize,
    pub input_ch: usize,
}

/// Per-step values required by the backward pass.
pub struct LstmStepCache {
    cat_in: Array4<f64>,
    i: Array4<f64>,
    f: Array4<f64>,
    g: Array4<f64>,
    o: Array4<f64>,
    c_prev: Array4<f64>,
    c_new: Array4<f64>,
}

impl ConvLstmCell {
    pub fn new(name: &str, input_ch: usize, hidden_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv2d::new(name, input_ch + hidden_ch, 4 * hidden_ch, 3, 1, 1, 1.0, rng);
        // forget gate bias = 1
        for c in hidden_ch..2 * hidden_ch {
            conv.b.value[[c]] = 1.0;
        }
        ConvLstmCell { conv, hidden_ch, input_ch }
    }

    pub fn zero_state(&self, n: usize, h: usize, w: usize) -> (Array4<f64>, Array4<f64>) {
        (
            Array4::zeros((n, self.hidden_ch, h, w)),
            Array4::zeros((n, self.hidden_ch, h, w)),
        )
    }

    pub fn forward(
        &self,
        x: &Array4<f64>,
        h_prev: &Array4<f64>,
        c_prev: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, LstmStepCache) {
        let cat_in = ndarray::concatenate(Axis(1), &[x.view(), h_prev.view()]).unwrap();
        let gates = self.conv.forward(&cat_in);
        let hc = self.hidden_ch;
        let pre_i = gates.slice(s![.., 0..hc, .., ..]).to_owned();
        let pre_f = gates.slice(s![.., hc..2 * hc, .., ..]).to_owned();
        let pre_g = gates.slice(s![.., 2 * hc..3 * hc, .., ..]).to_owned();
        let pre_o = gates.slice(s![.., 3 * hc..4 * hc, .., ..]).to_owned();
        let i = super::ops::sigmoid(&pre_i);
        let f = super::ops::sigmoid(&pre_f);
        let g = super::ops::tanh(&pre_g);
        let o = super::ops::sigmoid(&pre_o);
        let c_new = &f * c_prev + &i * &g;
        let h_new = &o * &c_new.mapv(f64::tanh);
        let cache = LstmStepCache {
            cat_in,
            i,
            f,
            g,
            o,
            c_prev: c_prev.clone(),
            c_new: c_new.clone(),
        };
        (h_new, c_new, cache)
    }

    /// Backward through one step. `gh`/`gc` are the gradients flowing into
    /// this step's outputs; returns gradients for (input, h_prev, c_prev)
    /// and accumulates parameter gradients.
    pub fn backward(
        &mut self,
        cache: &LstmStepCache,
        gh: &Array4<f64>,
        gc: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let tanh_c = cache.c_new.mapv(f64::tanh);
        let d_o = gh * &tanh_c;
        let d_c = gh * &cache.o * tanh_c.mapv(|t| 1.0 - t * t) + gc;
        let d_f = &d_c * &cache.c_prev;
        let d_i = &d_c * &cache.g;
        let d_g = &d_c * &cache.i;
        let gc_prev = &d_c * &cache.f;

        let dpre_i = d_i * &cache.i * cache.i.mapv(|v| 1.0 - v);
        let dpre_f = d_f * &cache.f * cache.f.mapv(|v| 1.0 - v);
        let dpre_g = d_g * cache.g.mapv(|v| 1.0 - v * v);
        let dpre_o = d_o * &cache.o * cache.o.mapv(|v| 1.0 - v);
        let dgates = ndarray::concatenate(
            Axis(1),
            &[dpre_i.view(), dpre_f.view(), dpre_g.view(), dpre_o.view()],
        )
        .unwrap();
        let gcat = self.conv.backward(&cache.cat_in, &dgates);
        let gx = gcat.slice(s![.., 0..self.input_ch, .., ..]).to_owned();
        let gh_prev = gcat.slice(s![.., self.input_ch.., .., ..]).to_owned();
        (gx, gh_prev, gc_prev)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.conv.w, &self.conv.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.conv.w, &mut self.conv.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_state_zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = ConvLstmCell::new("lstm", 1, 4, &mut rng);
        let x = Array4::zeros((1, 1, 4, 4));
        let (h0, c0) = cell.zero_state(1, 4, 4);
        let (h1, c1, _) = cell.forward(&x, &h0, &c0);
        // candidate tanh(0)=0 keeps the cell at the zero fixed point
        assert!(c1.iter().all(|&v| v == 0.0));
        assert!(h1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bptt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cell = ConvLstmCell::new("lstm", 2, 3, &mut rng);
        let xs: Vec<Array4<f64>> = (0..3)
            .map(|_| {
                Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random_range(-1.0f64..1.0))
            })
            .collect();
        let target = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.random_range(0.0f64..1.0));

        // loss: MSE between final hidden state and a fixed target
        let loss_of = |cell: &ConvLstmCell, xs: &[Array4<f64>], target: &Array4<f64>| {
            let (mut h, mut c) = cell.zero_state(1, 4, 4);
            for x in xs {
                let (hn, cn, _) = cell.forward(x, &h, &c);
                h = hn;
                c = cn;
            }
            (&h - target).mapv(|d| d * d).mean().unwrap()
        };

        let xs2 = xs.clone();
        let t2 = target.clone();
        let backward = move |cell: &mut ConvLstmCell| {
            for p in cell.params_mut() {
                p.zero_grad();
            }
            let (mut h, mut c) = cell.zero_state(1, 4, 4);
            let mut caches = Vec::new();
            for x in &xs2 {
                let (hn, cn, cache) = cell.forward(x, &h, &c);
                caches.push(cache);
                h = hn;
                c = cn;
            }
            let n = h.len() as f64;
            let mut gh = (&h - &t2).mapv(|d| 2.0 * d / n);
            let mut gc = Array4::zeros(c.dim());
            for cache in caches.iter().rev() {
                let (_, ghp, gcp) = cell.backward(cache, &gh, &gc);
                gh = ghp;
                gc = gcp;
            }
        };

        let coords = gradcheck::spread_coords(&cell.params(), 12, 99);
        let report = gradcheck::check_params(
            &mut cell,
            &coords,
            backward,
            |c| c.params_mut(),
            |c| loss_of(c, &xs, &target),
        );
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }
}
