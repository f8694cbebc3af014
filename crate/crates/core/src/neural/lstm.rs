//! A single LSTM layer with fused gate weights and explicit
//! backpropagation-through-time support.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::linalg::{sigmoid, Mat};

/// Gate order inside the fused weight matrix and bias: input, forget, cell
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    /// 4·hidden × (input + hidden); each row maps [x; h_prev].
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(hidden: usize) -> CellState {
        CellState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Everything one forward step must remember for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    /// [x; h_prev] exactly as multiplied by `w`.
    pub xh: Vec<f64>,
    /// Post-activation gates [i f g o], length 4·hidden.
    pub gates: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> LstmLayer {
        LstmLayer { input, hidden, w: Mat::zeros(4 * hidden, input + hidden), b: vec![0.0; 4 * hidden] }
    }

    /// Glorot-uniform weights (fan-in = input + hidden, fan-out = hidden),
    /// zero biases except the forget gate at 1.
    pub fn glorot(input: usize, hidden: usize, rng: &mut ChaCha20Rng) -> LstmLayer {
        let bound = (6.0 / (input + hidden + hidden) as f64).sqrt();
        let mut layer = LstmLayer::zeros(input, hidden);
        for v in &mut layer.w.data {
            *v = rng.gen_range(-bound..bound);
        }
        for v in &mut layer.b[hidden..2 * hidden] {
            *v = 1.0;
        }
        layer
    }

    pub fn grads_zeros(&self) -> LayerGrads {
        LayerGrads { w: Mat::zeros(4 * self.hidden, self.input + self.hidden), b: vec![0.0; 4 * self.hidden] }
    }

    pub fn forward(&self, x: &[f64], prev: &CellState) -> (CellState, StepCache) {
        assert_eq!(x.len(), self.input, "lstm input width");
        let hd = self.hidden;
        let mut xh = Vec::with_capacity(self.input + hd);
        xh.extend_from_slice(x);
        xh.extend_from_slice(&prev.h);

        let mut gates = self.b.clone();
        self.w.gemv_add(&xh, &mut gates);
        for v in &mut gates[..2 * hd] {
            *v = sigmoid(*v);
        }
        for v in &mut gates[2 * hd..3 * hd] {
            *v = v.tanh();
        }
        for v in &mut gates[3 * hd..] {
            *v = sigmoid(*v);
        }

        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            c[k] = f * prev.c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        let state = CellState { h: h.clone(), c: c.clone() };
        (state, StepCache { xh, gates, c_prev: prev.c.clone(), c, h })
    }

    /// One BPTT step. `dh` is the full gradient on h_t (upstream plus
    /// recurrent), `dc_in` the recurrent gradient on c_t. Accumulates into
    /// `grads` and returns (dx, dh_prev, dc_prev).
    pub fn backward_step(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc_in: &[f64],
        grads: &mut LayerGrads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let mut da = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (
                cache.gates[k],
                cache.gates[hd + k],
                cache.gates[2 * hd + k],
                cache.gates[3 * hd + k],
            );
            let tc = cache.c[k].tanh();
            let d_o = dh[k] * tc;
            let dc = dh[k] * o * (1.0 - tc * tc) + dc_in[k];
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * cache.c_prev[k];
            da[k] = d_i * i * (1.0 - i);
            da[hd + k] = d_f * f * (1.0 - f);
            da[2 * hd + k] = d_g * (1.0 - g * g);
            da[3 * hd + k] = d_o * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
        grads.w.ger_add(&da, &cache.xh);
        for (b, d) in grads.b.iter_mut().zip(&da) {
            *b += d;
        }
        let mut dxh = vec![0.0; self.input + hd];
        self.w.gemv_t_add(&da, &mut dxh);
        let dh_prev = dxh.split_off(self.input);
        (dxh, dh_prev, dc_prev)
    }
}
