//! The sequence model: stacked LSTM layers over encoded tokens, a softmax
//! over productions, the three-level objective, and truncated
//! backpropagation with Adam. All math is 64-bit and seed-deterministic.

pub mod adam;
pub mod linalg;
pub mod loss;
pub mod lstm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use adam::Adam;
use linalg::{softmax, Mat};
use loss::{loss_grad_logits, three_level_loss, LossReport};
use lstm::{CellState, LayerGrads, LstmLayer, StepCache};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("illegal truth: {0}")]
    IllegalTruth(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Prediction steps per backpropagation window.
    pub truncation: usize,
    pub learning_rate: f64,
    pub dropout_keep: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    /// Weight of the constraint penalty term.
    pub lambda_c: f64,
    pub use_context: bool,
    pub use_three_level_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 200,
            layers: 2,
            truncation: 50,
            learning_rate: 0.001,
            dropout_keep: 0.9,
            lambda_l1: 0.0001,
            lambda_l2: 0.0001,
            lambda_c: 0.1,
            use_context: true,
            use_three_level_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |msg: String| Err(NeuralError::ShapeMismatch(msg));
        if self.hidden == 0 || self.layers == 0 || self.truncation == 0 {
            return bad("hidden size, layer count and truncation must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return bad(format!("dropout keep probability {}", self.dropout_keep));
        }
        for (name, v) in
            [("lambda_l1", self.lambda_l1), ("lambda_l2", self.lambda_l2), ("lambda_c", self.lambda_c)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub input_width: usize,
    pub output_width: usize,
    pub layers: Vec<LstmLayer>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

/// Per-layer recurrent state. Values only — carrying it across windows
/// detaches it from the gradient graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub layers: Vec<CellState>,
}

impl Model {
    pub fn new(config: ModelConfig, input_width: usize, output_width: usize) -> Model {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = input_width;
        for _ in 0..config.layers {
            layers.push(LstmLayer::glorot(width, config.hidden, &mut rng));
            width = config.hidden;
        }
        let bound = (6.0 / (config.hidden + output_width) as f64).sqrt();
        let w_out = Mat::from_fn(output_width, config.hidden, |_, _| rng.gen_range(-bound..bound));
        Model { config, input_width, output_width, layers, w_out, b_out: vec![0.0; output_width] }
    }

    pub fn zeros(config: ModelConfig, input_width: usize, output_width: usize) -> Model {
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = input_width;
        for _ in 0..config.layers {
            layers.push(LstmLayer::zeros(width, config.hidden));
            width = config.hidden;
        }
        Model {
            config,
            input_width,
            output_width,
            layers,
            w_out: Mat::zeros(output_width, config.hidden),
            b_out: vec![0.0; output_width],
        }
    }

    pub fn state0(&self) -> ModelState {
        ModelState { layers: self.layers.iter().map(|l| CellState::zeros(l.hidden)).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum::<usize>()
            + self.w_out.data.len()
            + self.b_out.len()
    }

    /// Parameters in a fixed order: per layer weights then biases, output
    /// weights, output bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.w_out.data);
        out.extend_from_slice(&self.b_out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} parameters for a model of {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            at += n;
            &flat[at - n..at]
        };
        for l in &mut self.layers {
            let n = l.w.data.len();
            l.w.data.copy_from_slice(take(n));
            let n = l.b.len();
            l.b.copy_from_slice(take(n));
        }
        let n = self.w_out.data.len();
        self.w_out.data.copy_from_slice(take(n));
        let n = self.b_out.len();
        self.b_out.copy_from_slice(take(n));
        Ok(())
    }

    /// Inference-mode step: no dropout. Returns the production distribution
    /// and the advanced state.
    pub fn forward_step(
        &self,
        input: &[f64],
        state: &ModelState,
    ) -> Result<(Vec<f64>, ModelState), NeuralError> {
        self.check_input(input, state)?;
        let mut next = Vec::with_capacity(self.layers.len());
        let mut x: Vec<f64> = input.to_vec();
        for (layer, prev) in self.layers.iter().zip(&state.layers) {
            let (st, _) = layer.forward(&x, prev);
            x = st.h.clone();
            next.push(st);
        }
        let mut logits = self.b_out.clone();
        self.w_out.gemv_add(&x, &mut logits);
        Ok((softmax(&logits), ModelState { layers: next }))
    }

    fn check_input(&self, input: &[f64], state: &ModelState) -> Result<(), NeuralError> {
        if input.len() != self.input_width {
            return Err(NeuralError::ShapeMismatch(format!(
                "input of {} into a model expecting {}",
                input.len(),
                self.input_width
            )));
        }
        if state.layers.len() != self.layers.len()
            || state.layers.iter().any(|s| s.h.len() != self.config.hidden)
        {
            return Err(NeuralError::ShapeMismatch("carried state shape".into()));
        }
        Ok(())
    }
}

/// One position of a training window: the encoded token fed in, and — at
/// prediction positions — the true next production with its legal mask.
#[derive(Clone, Debug)]
pub struct WindowStep {
    pub input: Vec<f64>,
    pub target: Option<(usize, Vec<bool>)>,
}

#[derive(Clone, Debug)]
pub struct WindowOutcome {
    /// Per prediction position, in window order.
    pub losses: Vec<LossReport>,
    /// Mean total loss over prediction positions (the data term).
    pub mean_total: f64,
    /// Data term plus L1/L2 regularizers — what the gradients differentiate.
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl Gradients {
    fn zeros(model: &Model) -> Gradients {
        Gradients {
            layers: model.layers.iter().map(|l| l.grads_zeros()).collect(),
            w_out: Mat::zeros(model.output_width, model.config.hidden),
            b_out: vec![0.0; model.output_width],
        }
    }

    /// Same ordering as [`Model::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.w.data);
            out.extend_from_slice(&l.b);
        }
        out.extend_from_slice(&self.w_out.data);
        out.extend_from_slice(&self.b_out);
        out
    }

    fn check_finite(&self) -> Result<(), NeuralError> {
        let all = self
            .layers
            .iter()
            .flat_map(|l| l.w.data.iter().chain(&l.b))
            .chain(&self.w_out.data)
            .chain(&self.b_out);
        for v in all {
            if !v.is_finite() {
                return Err(NeuralError::NonFiniteGradient(
                    "aborting before applying a NaN/Inf update".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Inverted-dropout masks, one per (position, layer), applied to layer
/// outputs; `None` = evaluation mode.
struct Masks(Option<Vec<Vec<Vec<f64>>>>);

impl Masks {
    fn eval() -> Masks {
        Masks(None)
    }

    fn sample(model: &Model, len: usize, rng: &mut ChaCha20Rng) -> Masks {
        let keep = model.config.dropout_keep;
        if keep >= 1.0 {
            return Masks::eval();
        }
        let inv = 1.0 / keep;
        let mut all = Vec::with_capacity(len);
        for _ in 0..len {
            let per_layer = model
                .layers
                .iter()
                .map(|l| (0..l.hidden).map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 }).collect())
                .collect();
            all.push(per_layer);
        }
        Masks(Some(all))
    }

    fn apply(&self, t: usize, layer: usize, h: &[f64]) -> Vec<f64> {
        match &self.0 {
            None => h.to_vec(),
            Some(all) => h.iter().zip(&all[t][layer]).map(|(v, m)| v * m).collect(),
        }
    }
}

struct WindowRun {
    outcome: WindowOutcome,
    grads: Gradients,
    state: ModelState,
}

fn run_window(
    model: &Model,
    window: &[WindowStep],
    state: ModelState,
    masks: &Masks,
) -> Result<WindowRun, NeuralError> {
    let cfg = &model.config;
    let n_layers = model.layers.len();
    let targets = window.iter().filter(|s| s.target.is_some()).count();

    // Forward, caching per (layer, t).
    let mut caches: Vec<Vec<StepCache>> = vec![Vec::with_capacity(window.len()); n_layers];
    let mut outs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(window.len()); n_layers];
    let mut dists: Vec<Option<Vec<f64>>> = Vec::with_capacity(window.len());
    let mut losses = Vec::with_capacity(targets);
    let mut cur = state;
    for (t, step) in window.iter().enumerate() {
        model.check_input(&step.input, &cur)?;
        let mut x = step.input.clone();
        for (l, layer) in model.layers.iter().enumerate() {
            let (st, cache) = layer.forward(&x, &cur.layers[l]);
            x = masks.apply(t, l, &st.h);
            cur.layers[l] = st;
            caches[l].push(cache);
            outs[l].push(x.clone());
        }
        match &step.target {
            None => dists.push(None),
            Some((p_true, legal)) => {
                let mut logits = model.b_out.clone();
                model.w_out.gemv_add(&x, &mut logits);
                let dist = softmax(&logits);
                losses.push(three_level_loss(
                    &dist,
                    *p_true,
                    legal,
                    cfg.lambda_c,
                    cfg.use_three_level_loss,
                )?);
                dists.push(Some(dist));
            }
        }
    }

    let mean_total = if targets == 0 {
        0.0
    } else {
        losses.iter().map(|l: &LossReport| l.total).sum::<f64>() / targets as f64
    };

    // Regularizers over weight matrices only, biases excluded.
    let weight_mats = || model.layers.iter().map(|l| &l.w).chain([&model.w_out]);
    let l1: f64 = weight_mats().map(|w| w.data.iter().map(|v| v.abs()).sum::<f64>()).sum();
    let l2: f64 = weight_mats().map(|w| w.data.iter().map(|v| v * v).sum::<f64>()).sum();
    let objective = mean_total + cfg.lambda_l1 * l1 + cfg.lambda_l2 * l2;
    if !objective.is_finite() {
        return Err(NeuralError::NonFiniteGradient(format!(
            "objective diverged to {objective} (data {mean_total}, ‖W‖₁ {l1}, ‖W‖₂² {l2})"
        )));
    }

    // Backward.
    let mut grads = Gradients::zeros(model);
    let mut d_out: Vec<Vec<Vec<f64>>> =
        vec![vec![vec![0.0; cfg.hidden]; window.len()]; n_layers];
    for (t, dist) in dists.iter().enumerate() {
        let Some(dist) = dist else { continue };
        let (p_true, legal) = window[t].target.as_ref().expect("dist implies target");
        let mut dlogits =
            loss_grad_logits(dist, *p_true, legal, cfg.lambda_c, cfg.use_three_level_loss);
        for v in &mut dlogits {
            *v /= targets as f64;
        }
        grads.w_out.ger_add(&dlogits, &outs[n_layers - 1][t]);
        for (b, d) in grads.b_out.iter_mut().zip(&dlogits) {
            *b += d;
        }
        let mut dout = vec![0.0; cfg.hidden];
        model.w_out.gemv_t_add(&dlogits, &mut dout);
        for (acc, d) in d_out[n_layers - 1][t].iter_mut().zip(&dout) {
            *acc += d;
        }
    }
    for l in (0..n_layers).rev() {
        let layer = &model.layers[l];
        let mut dh_next = vec![0.0; cfg.hidden];
        let mut dc_next = vec![0.0; cfg.hidden];
        for t in (0..window.len()).rev() {
            // d_out is the gradient on the dropped output; pull it back
            // through the mask to reach h_t.
            let dropped = masks.apply(t, l, &d_out[l][t]);
            let dh: Vec<f64> = dropped.iter().zip(&dh_next).map(|(a, b)| a + b).collect();
            let (dx, dh_prev, dc_prev) =
                layer.backward_step(&caches[l][t], &dh, &dc_next, &mut grads.layers[l]);
            dh_next = dh_prev;
            dc_next = dc_prev;
            if l > 0 {
                d_out[l - 1][t] = dx;
            }
        }
    }
    for (w, g) in model.layers.iter().map(|l| &l.w).chain([&model.w_out]).zip(
        grads.layers.iter_mut().map(|g| &mut g.w).chain([&mut grads.w_out]),
    ) {
        for (gv, wv) in g.data.iter_mut().zip(&w.data) {
            *gv += cfg.lambda_l1 * wv.signum() + 2.0 * cfg.lambda_l2 * wv;
        }
    }
    grads.check_finite()?;

    Ok(WindowRun { outcome: WindowOutcome { losses, mean_total, objective }, grads, state: cur })
}

/// Deterministic (no-dropout) gradients over one window; the advanced state
/// comes back detached.
pub fn window_gradients(
    model: &Model,
    window: &[WindowStep],
    state: ModelState,
) -> Result<(WindowOutcome, Gradients, ModelState), NeuralError> {
    let run = run_window(model, window, state, &Masks::eval())?;
    Ok((run.outcome, run.grads, run.state))
}

/// Evaluation-mode objective (data term + regularizers) without touching
/// gradients — the finite-difference oracle's target.
pub fn window_objective(
    model: &Model,
    window: &[WindowStep],
    state: ModelState,
) -> Result<f64, NeuralError> {
    Ok(run_window(model, window, state, &Masks::eval())?.outcome.objective)
}

/// One truncated-backpropagation update: forward over the window (with
/// train-mode dropout when `dropout_rng` is given), reverse-mode gradients
/// of the mean loss plus regularizers, then an Adam step.
pub fn tbptt_step(
    model: &mut Model,
    adam: &mut Adam,
    window: &[WindowStep],
    state: ModelState,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(WindowOutcome, ModelState), NeuralError> {
    let masks = match dropout_rng {
        Some(rng) => Masks::sample(model, window.len(), rng),
        None => Masks::eval(),
    };
    let run = run_window(model, window, state, &masks)?;
    if window.iter().any(|s| s.target.is_some()) {
        let mut flat = model.flatten();
        adam.step(&mut flat, &run.grads.flatten());
        model.load_flat(&flat)?;
    }
    Ok((run.outcome, run.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use linalg::sigmoid;

    fn onehot(width: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        v[k] = 1.0;
        v
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig { hidden: 8, layers: 2, truncation: 10, seed: 42, ..ModelConfig::default() }
    }

    #[test]
    fn zero_model_predicts_uniformly() {
        let m = Model::zeros(tiny_config(), 6, 10);
        let (dist, _) = m.forward_step(&onehot(6, 2), &m.state0()).unwrap();
        for p in dist {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn distributions_are_valid_and_deterministic() {
        let a = Model::new(tiny_config(), 6, 10);
        let b = Model::new(tiny_config(), 6, 10);
        assert_eq!(a.flatten(), b.flatten(), "same seed, same parameters");
        let mut sa = a.state0();
        let mut sb = b.state0();
        for t in 0..20 {
            let x = onehot(6, t % 6);
            let (da, na) = a.forward_step(&x, &sa).unwrap();
            let (db, nb) = b.forward_step(&x, &sb).unwrap();
            assert_eq!(da, db);
            let sum: f64 = da.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(da.iter().all(|&p| p > 0.0));
            (sa, sb) = (na, nb);
        }
        let c = Model::new(ModelConfig { seed: 43, ..tiny_config() }, 6, 10);
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn shape_errors_are_reported() {
        let m = Model::new(tiny_config(), 6, 10);
        assert!(matches!(
            m.forward_step(&[0.0; 5], &m.state0()),
            Err(NeuralError::ShapeMismatch(_))
        ));
        let mut m2 = m.clone();
        assert!(matches!(m2.load_flat(&[0.0; 3]), Err(NeuralError::ShapeMismatch(_))));
        let other = Model::new(tiny_config(), 9, 10);
        assert!(matches!(
            m.forward_step(&onehot(9, 0), &other.state0()),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn flatten_round_trips() {
        let m = Model::new(tiny_config(), 6, 10);
        let flat = m.flatten();
        assert_eq!(flat.len(), m.param_count());
        let mut copy = Model::zeros(tiny_config(), 6, 10);
        copy.load_flat(&flat).unwrap();
        assert_eq!(copy, m);
    }

    /// Symbolic gradient of a 1-unit, 1-layer model over a single prediction
    /// step, written out by hand from the chain rule.
    #[test]
    fn one_unit_gradient_matches_symbolic_derivative() {
        let config = ModelConfig {
            hidden: 1,
            layers: 1,
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            use_three_level_loss: false,
            ..ModelConfig::default()
        };
        let mut m = Model::zeros(config, 1, 2);
        let (wi, wf, wg, wo) = (0.5, -0.2, 0.8, 0.3);
        let (bi, bf, bg, bo) = (0.1, 1.0, -0.3, 0.2);
        *m.layers[0].w.at_mut(0, 0) = wi;
        *m.layers[0].w.at_mut(1, 0) = wf;
        *m.layers[0].w.at_mut(2, 0) = wg;
        *m.layers[0].w.at_mut(3, 0) = wo;
        m.layers[0].b = vec![bi, bf, bg, bo];
        let (u0, u1, v0, v1) = (0.7, -0.4, 0.05, -0.1);
        *m.w_out.at_mut(0, 0) = u0;
        *m.w_out.at_mut(1, 0) = u1;
        m.b_out = vec![v0, v1];

        let x = 0.9;
        let window = [WindowStep { input: vec![x], target: Some((0, vec![true, true])) }];
        let (_, grads, _) = window_gradients(&m, &window, m.state0()).unwrap();

        // Forward by hand (h0 = c0 = 0, so the forget path is dead).
        let i = sigmoid(wi * x + bi);
        let g = (wg * x + bg).tanh();
        let o = sigmoid(wo * x + bo);
        let c = i * g;
        let h = o * c.tanh();
        let z0 = u0 * h + v0;
        let z1 = u1 * h + v1;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let y0 = e0 / (e0 + e1);
        let y1 = e1 / (e0 + e1);
        // L = −ln y0; dL/dz = (y − onehot0)
        let (dz0, dz1) = (y0 - 1.0, y1);
        let dh = u0 * dz0 + u1 * dz1;
        let d_o = dh * c.tanh();
        let dc = dh * o * (1.0 - c.tanh() * c.tanh());
        let d_i = dc * g;
        let d_g = dc * i;
        let da_i = d_i * i * (1.0 - i);
        let da_g = d_g * (1.0 - g * g);
        let da_o = d_o * o * (1.0 - o);

        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(grads.w_out.at(0, 0), dz0 * h));
        assert!(close(grads.w_out.at(1, 0), dz1 * h));
        assert!(close(grads.b_out[0], dz0));
        assert!(close(grads.b_out[1], dz1));
        assert!(close(grads.layers[0].w.at(0, 0), da_i * x));
        assert!(close(grads.layers[0].w.at(2, 0), da_g * x));
        assert!(close(grads.layers[0].w.at(3, 0), da_o * x));
        assert!(close(grads.layers[0].b[0], da_i));
        assert!(close(grads.layers[0].b[2], da_g));
        assert!(close(grads.layers[0].b[3], da_o));
        // forget gate: gradient exactly zero through c_prev = 0
        assert!(close(grads.layers[0].w.at(1, 0), 0.0));
        assert!(close(grads.layers[0].b[1], 0.0));
    }

    fn random_window(
        rng: &mut ChaCha20Rng,
        len: usize,
        width: usize,
        out: usize,
    ) -> Vec<WindowStep> {
        (0..len)
            .map(|t| {
                let input: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // every third position is input-only, like a Pop
                let target = (t % 3 != 2).then(|| {
                    let p_true = rng.gen_range(0..out);
                    let legal: Vec<bool> =
                        (0..out).map(|p| p == p_true || rng.gen()).collect();
                    (p_true, legal)
                });
                WindowStep { input, target }
            })
            .collect()
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let config = ModelConfig {
            hidden: 8,
            layers: 2,
            dropout_keep: 1.0,
            use_three_level_loss: true,
            seed: 17,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, 7, 5);
        // keep weights clear of zero so the L1 term stays differentiable
        // along the difference step
        let flat: Vec<f64> = model.flatten().iter().map(|v| v + 0.05 * v.signum()).collect();
        model.load_flat(&flat).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let window = random_window(&mut rng, 10, 7, 5);
        // carried-in state exercises the c_prev path
        let mut state = model.state0();
        for s in &mut state.layers {
            for v in s.h.iter_mut().chain(s.c.iter_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }

        let (_, grads, _) = window_gradients(&model, &window, state.clone()).unwrap();
        let analytic = grads.flatten();
        let base = model.flatten();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..base.len() {
            let mut probe = model.clone();
            let mut up = base.clone();
            up[k] += h;
            probe.load_flat(&up).unwrap();
            let fu = window_objective(&probe, &window, state.clone()).unwrap();
            let mut dn = base.clone();
            dn[k] -= h;
            probe.load_flat(&dn).unwrap();
            let fd = window_objective(&probe, &window, state.clone()).unwrap();
            let fd = (fu - fd) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "param {k}: analytic {} vs fd {fd} (rel {rel})", analytic[k]);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn bias_perturbation_changes_only_the_data_term() {
        // L1/L2 exclude biases: with a frozen data path (zero-weight output
        // row unaffected), moving a bias shifts the objective exactly by the
        // data-term difference.
        let config = ModelConfig { hidden: 4, layers: 1, dropout_keep: 1.0, seed: 5, ..ModelConfig::default() };
        let model = Model::new(config, 3, 4);
        let window = [WindowStep { input: vec![0.3, -0.2, 0.5], target: Some((1, vec![true; 4])) }];

        let objective_and_data = |m: &Model| {
            let run = window_objective(m, &window, m.state0()).unwrap();
            let (outcome, _, _) = window_gradients(m, &window, m.state0()).unwrap();
            (run, outcome.mean_total)
        };
        let (obj_a, data_a) = objective_and_data(&model);
        let mut shifted = model.clone();
        shifted.b_out[2] += 0.25;
        let (obj_b, data_b) = objective_and_data(&shifted);
        let reg_a = obj_a - data_a;
        let reg_b = obj_b - data_b;
        assert!((reg_a - reg_b).abs() < 1e-15, "bias moved a regularizer: {reg_a} vs {reg_b}");
        assert!((data_a - data_b).abs() > 1e-6, "bias should move the data term");
    }

    #[test]
    fn twenty_sequence_toy_corpus_halves_loss_in_200_steps() {
        // Next-class prediction on cyclic sequences: learnable well within
        // the step budget.
        let classes = 5;
        let config = ModelConfig {
            hidden: 8,
            layers: 2,
            learning_rate: 0.03,
            dropout_keep: 1.0,
            use_three_level_loss: false,
            seed: 1,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, classes, classes);
        let mut adam = Adam::new(config.learning_rate, model.param_count());
        let sequences: Vec<Vec<WindowStep>> = (0..20)
            .map(|s| {
                (0..10)
                    .map(|t| WindowStep {
                        input: onehot(classes, (s + t) % classes),
                        target: Some(((s + t + 1) % classes, vec![true; classes])),
                    })
                    .collect()
            })
            .collect();
        let mut history = Vec::new();
        for step in 0..200 {
            let window = &sequences[step % 20];
            let fresh = model.state0();
            let (outcome, _) = tbptt_step(&mut model, &mut adam, window, fresh, None).unwrap();
            history.push(outcome.mean_total);
        }
        let head: f64 = history[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = history[180..].iter().sum::<f64>() / 20.0;
        assert!(tail <= 0.5 * head, "mean loss {head} only fell to {tail}");
    }

    #[test]
    fn non_finite_gradients_abort_the_update() {
        let config = ModelConfig { hidden: 4, layers: 1, seed: 2, ..ModelConfig::default() };
        let mut model = Model::new(config, 3, 4);
        *model.w_out.at_mut(0, 0) = 1e308;
        *model.w_out.at_mut(1, 0) = -1e308;
        let mut adam = Adam::new(0.001, model.param_count());
        let window = [WindowStep { input: vec![1.0, 1.0, 1.0], target: Some((1, vec![true; 4])) }];
        let before = model.flatten();
        let fresh = model.state0();
        let err = tbptt_step(&mut model, &mut adam, &window, fresh, None);
        assert!(matches!(err, Err(NeuralError::NonFiniteGradient(_))), "{err:?}");
        assert_eq!(model.flatten(), before, "params untouched after abort");
    }

    #[test]
    fn dropout_masks_scale_and_vanish_correctly() {
        let config = ModelConfig { hidden: 64, layers: 2, dropout_keep: 0.9, seed: 3, ..ModelConfig::default() };
        let model = Model::new(config, 5, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let masks = Masks::sample(&model, 4, &mut rng);
        let all = masks.0.as_ref().unwrap();
        let mut zeros = 0;
        let mut total = 0;
        for t in all {
            for layer in t {
                for &v in layer {
                    assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15);
                    zeros += (v == 0.0) as usize;
                    total += 1;
                }
            }
        }
        let rate = zeros as f64 / total as f64;
        assert!((rate - 0.1).abs() < 0.05, "drop rate {rate}");
        // keep = 1 means evaluation behaviour even in train mode
        let off = Masks::sample(
            &Model::new(ModelConfig { dropout_keep: 1.0, ..config }, 5, 6),
            4,
            &mut rng,
        );
        assert!(off.0.is_none());
    }

    #[test]
    fn config_validation_rejects_bad_rates() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { hidden: 0, ..ModelConfig::default() },
            ModelConfig { dropout_keep: 0.0, ..ModelConfig::default() },
            ModelConfig { dropout_keep: 1.5, ..ModelConfig::default() },
            ModelConfig { learning_rate: 0.0, ..ModelConfig::default() },
            ModelConfig { lambda_l1: -1.0, ..ModelConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
