//! Small feedforward networks with hand-written backpropagation, plus an
//! Adam optimizer. Backward returns both parameter and input gradients —
//! the input gradient feeds the chain-rule correction in the adversary
//! update and the action gradient in the actor update.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Output head: identity, or a tanh squash scaled to a symmetric range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Tanh { scale: f64 },
}

/// Fully connected network with rectifier hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    /// `weights[l]` has shape `(sizes[l+1], sizes[l])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub output: OutputActivation,
}

/// Parameter gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// He-style initialization over the given layer widths.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&n| n == 0) {
            return Err(Error::Shape("network needs >= 2 nonzero layer widths".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                scale * rng.gen_range(-1.0..1.0)
            }));
            // nonzero bias init keeps a layer's units off the relu kink even
            // when every upstream unit is inactive for some input
            let bound = 1.0 / (fan_in as f64).sqrt();
            biases.push(Array1::from_shape_fn(fan_out, |_| {
                bound * rng.gen_range(-1.0..1.0)
            }));
        }
        Ok(Self { sizes: sizes.to_vec(), weights, biases, output })
    }

    /// All-zero parameters; forward output is the squashed zero vector.
    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&n| n == 0) {
            return Err(Error::Shape("network needs >= 2 nonzero layer widths".into()));
        }
        let weights = sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases, output })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Pre- and post-activation vectors per layer, for backward.
    fn forward_trace(&self, x: &[f64]) -> Result<(Vec<Array1<f64>>, Vec<Array1<f64>>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} != expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut act = Array1::from_vec(x.to_vec());
        let mut pre_acts = Vec::with_capacity(self.weights.len());
        let mut acts = vec![act.clone()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let pre = w.dot(&act) + b;
            act = if l < last {
                pre.mapv(|z| z.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Linear => pre.clone(),
                    OutputActivation::Tanh { scale } => pre.mapv(|z| scale * z.tanh()),
                }
            };
            pre_acts.push(pre);
            acts.push(act.clone());
        }
        Ok((pre_acts, acts))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, acts) = self.forward_trace(x)?;
        Ok(acts.last().unwrap().to_vec())
    }

    /// Backpropagate `upstream = dL/dy`, returning `dL/dparams` and `dL/dx`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream length {} != output {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let (pre_acts, acts) = self.forward_trace(x)?;
        let last = self.weights.len() - 1;
        let mut delta = Array1::from_vec(upstream.to_vec());
        // output head derivative
        match self.output {
            OutputActivation::Linear => {}
            OutputActivation::Tanh { scale } => {
                let d = pre_acts[last].mapv(|z| scale * (1.0 - z.tanh().powi(2)));
                delta = &delta * &d;
            }
        }
        let mut gw: Vec<Array2<f64>> = self.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut gb: Vec<Array1<f64>> = self.biases.iter().map(|b| Array1::zeros(b.dim())).collect();
        for l in (0..=last).rev() {
            if l < last {
                let d = pre_acts[l].mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
                delta = &delta * &d;
            }
            gb[l] = delta.clone();
            gw[l] = delta
                .view()
                .insert_axis(ndarray::Axis(1))
                .dot(&acts[l].view().insert_axis(ndarray::Axis(0)));
            delta = self.weights[l].t().dot(&delta);
        }
        Ok((Gradients { weights: gw, biases: gb }, delta.to_vec()))
    }

    /// Gradient of the output with respect to the input only.
    pub fn input_gradient(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward(x, upstream)?.1)
    }

    /// `param += step * grad` across all parameters.
    pub fn add_scaled(&mut self, grads: &Gradients, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(step, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(step, g);
        }
    }

    /// Largest parameter magnitude, for the divergence guard.
    pub fn max_abs_param(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .fold(0.0_f64, |m, &x| m.max(x.abs()));
        self.biases
            .iter()
            .flat_map(|b| b.iter())
            .fold(w, |m, &x| m.max(x.abs()))
    }

    /// `tau * live + (1 - tau) * self`, the soft target tracking rule.
    pub fn track(&mut self, live: &Mlp, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
        }
        if self.sizes != live.sizes {
            return Err(Error::Shape("target and live network shapes differ".into()));
        }
        for (t, l) in self.weights.iter_mut().zip(&live.weights) {
            t.zip_mut_with(l, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        for (t, l) in self.biases.iter_mut().zip(&live.biases) {
            t.zip_mut_with(l, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(weight, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(weight, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in self.weights.iter_mut() {
            w.mapv_inplace(|x| x * factor);
        }
        for b in self.biases.iter_mut() {
            b.mapv_inplace(|x| x * factor);
        }
    }
}

/// Adam with the standard bias correction; `step` moves against the
/// gradient (descent), `step_ascent` along it.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.apply(net, grads, -1.0);
    }

    pub fn step_ascent(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.apply(net, grads, 1.0);
    }

    fn apply(&mut self, net: &mut Mlp, grads: &Gradients, sign: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p += sign * lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Central finite differences of `loss` over every parameter of `net`.
/// Test oracle; exported so downstream gradient checks reuse it.
pub fn finite_difference_params(
    net: &Mlp,
    h: f64,
    mut loss: impl FnMut(&Mlp) -> f64,
) -> Gradients {
    let mut grads = Gradients::zeros_like(net);
    let mut probe = net.clone();
    for l in 0..net.weights.len() {
        for idx in 0..net.weights[l].len() {
            let (r, c) = (idx / net.weights[l].ncols(), idx % net.weights[l].ncols());
            let orig = probe.weights[l][[r, c]];
            probe.weights[l][[r, c]] = orig + h;
            let up = loss(&probe);
            probe.weights[l][[r, c]] = orig - h;
            let down = loss(&probe);
            probe.weights[l][[r, c]] = orig;
            grads.weights[l][[r, c]] = (up - down) / (2.0 * h);
        }
        for j in 0..net.biases[l].len() {
            let orig = probe.biases[l][j];
            probe.biases[l][j] = orig + h;
            let up = loss(&probe);
            probe.biases[l][j] = orig - h;
            let down = loss(&probe);
            probe.biases[l][j] = orig;
            grads.biases[l][j] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Worst relative disagreement between two gradient sets, with an absolute
/// floor so exact zeros compare cleanly.
pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst = 0.0_f64;
    let pairs = a
        .weights
        .iter()
        .zip(&b.weights)
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .chain(
            a.biases
                .iter()
                .zip(&b.biases)
                .flat_map(|(x, y)| x.iter().zip(y.iter())),
        );
    for (&x, &y) in pairs {
        let denom = x.abs().max(y.abs()).max(1e-6);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
