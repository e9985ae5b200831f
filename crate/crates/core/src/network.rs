//! Feedforward Z-value approximator with analytic gradients.
//!
//! The network maps a standardized state to a scalar pre-activation `o`;
//! the output activation turns it into `Z = exp(-phi(o))` with
//! `phi = tanh` or `phi = softplus`, so `Z > 0` for every finite input and
//! `V = -ln Z = phi(o)` is available without going through `exp`.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// `Z = exp(-tanh(o))`, range `(e^-1, e)`.
    ExpNegTanh,
    /// `Z = exp(-softplus(o))`, range `(0, 1)`.
    ExpNegSoftplus,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::ExpNegTanh => "exp-neg-tanh",
            OutputActivation::ExpNegSoftplus => "exp-neg-softplus",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "exp-neg-tanh" => Ok(OutputActivation::ExpNegTanh),
            "exp-neg-softplus" => Ok(OutputActivation::ExpNegSoftplus),
            other => Err(Error::Parse(format!("unknown output activation '{other}'"))),
        }
    }

    /// `phi(o)`, i.e. the value `V = -ln Z`.
    #[inline]
    fn phi(self, o: f64) -> f64 {
        match self {
            OutputActivation::ExpNegTanh => o.tanh(),
            OutputActivation::ExpNegSoftplus => softplus(o),
        }
    }

    #[inline]
    fn dphi(self, o: f64) -> f64 {
        match self {
            OutputActivation::ExpNegTanh => {
                let t = o.tanh();
                1.0 - t * t
            }
            OutputActivation::ExpNegSoftplus => sigmoid(o),
        }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Anything that can score a state with a value `V(x)` and its gradient.
pub trait ValueFunction {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.value(x)?, self.value_gradient(x)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZNetwork {
    layer_sizes: Vec<usize>,
    output: OutputActivation,
    params: Vec<f64>,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Per-evaluation activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the standardized input, `acts[l]` the tanh output of hidden layer l.
    acts: Vec<Vec<f64>>,
    /// Output pre-activation.
    pub out: f64,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

thread_local! {
    static SCRATCH: RefCell<Trace> = RefCell::new(Trace::default());
}

fn with_scratch<T>(f: impl FnOnce(&mut Trace) -> T) -> T {
    SCRATCH.with(|t| f(&mut t.borrow_mut()))
}

/// `tanh` through a single `exp`; absolute error near machine epsilon and
/// several times cheaper than the libm routine.
#[inline]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ZNetwork {
    /// Glorot-uniform weights, zero biases, identity standardization.
    pub fn new(layer_sizes: &[usize], output: OutputActivation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, output)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("network needs at least an input and an output layer".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config("output layer must have exactly one unit".into()));
        }
        let n = layer_sizes[0];
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            output,
            params: vec![0.0; param_count(layer_sizes)],
            input_mean: vec![0.0; n],
            input_scale: vec![1.0; n],
        })
    }

    /// Rebuilds a network from stored parts, validating consistency.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        output: OutputActivation,
        params: Vec<f64>,
        input_mean: Vec<f64>,
        input_scale: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(&layer_sizes, output)?;
        if params.len() != net.params.len() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        net.set_standardization(input_mean, input_scale)?;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_mean(&self) -> &[f64] {
        &self.input_mean
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn set_standardization(&mut self, mean: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        let n = self.input_dim();
        if mean.len() != n || scale.len() != n {
            return Err(Error::Config("standardization vectors must match the input dimension".into()));
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("standardization scale must be positive and finite".into()));
        }
        self.input_mean = mean;
        self.input_scale = scale;
        Ok(())
    }

    /// Fits the standardization to the per-dimension mean and standard
    /// deviation of `states`. Dimensions with no spread keep unit scale.
    pub fn fit_standardization<'a, I>(&mut self, states: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let n = self.input_dim();
        let mut count = 0usize;
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for x in states {
            if x.len() != n {
                return Err(Error::Argument("state dimension mismatch in standardization".into()));
            }
            count += 1;
            for i in 0..n {
                let d = x[i] - mean[i];
                mean[i] += d / count as f64;
                m2[i] += d * (x[i] - mean[i]);
            }
        }
        if count < 2 {
            return Err(Error::Argument("need at least two states to standardize".into()));
        }
        let scale = m2
            .iter()
            .map(|v| {
                let sd = (v / (count - 1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        self.set_standardization(mean, scale)
    }

    /// Offset of the output-layer bias within the flat parameter vector.
    pub fn output_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Forward pass recording activations into `trace`; returns the output
    /// pre-activation `o`.
    pub fn eval_into(&self, x: &[f64], trace: &mut Trace) -> Result<f64> {
        let n = self.input_dim();
        if x.len() != n {
            return Err(Error::Argument(format!("network expects {n} inputs, got {}", x.len())));
        }
        let layers = self.layer_sizes.len() - 1;
        trace.acts.resize_with(layers, Vec::new);
        {
            let a0 = &mut trace.acts[0];
            a0.clear();
            for (i, ((xi, mean), scale)) in x.iter().zip(&self.input_mean).zip(&self.input_scale).enumerate() {
                let s = (xi - mean) / scale;
                if !s.is_finite() {
                    return Err(Error::numeric_at("network input", i));
                }
                a0.push(s);
            }
        }
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            if l + 1 == layers {
                let input = &trace.acts[l];
                let mut o = b[0];
                for (wi, ai) in w.iter().zip(input) {
                    o += wi * ai;
                }
                if !o.is_finite() {
                    return Err(Error::numeric(format!("network layer {}", l + 1)));
                }
                trace.out = o;
                return Ok(o);
            }
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let input = &head[l];
            let next = &mut tail[0];
            next.clear();
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut z = b[j];
                for (wi, ai) in row.iter().zip(input) {
                    z += wi * ai;
                }
                let h = fast_tanh(z);
                if !h.is_finite() {
                    return Err(Error::numeric(format!("network layer {}", l + 1)));
                }
                next.push(h);
            }
        }
        unreachable!("network has an output layer")
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_sizes.windows(2).scan(0, |off, w| {
            let base = *off;
            *off += w[0] * w[1] + w[1];
            Some((base, w[0], w[1]))
        })
    }

    /// Accumulates `scale * d o / d params` into `grad` using a trace from
    /// [`eval_into`](Self::eval_into).
    pub fn accumulate_param_grad(&self, trace: &mut Trace, scale: f64, grad: &mut [f64]) {
        let layers: Vec<(usize, usize, usize)> = self.layer_offsets().collect();
        let Trace { acts, delta, prev, .. } = trace;
        // delta holds d o / d z for the current layer's pre-activations
        delta.clear();
        delta.push(scale);
        for (l, &(base, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            for j in 0..fan_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let gw = &mut grad[base + j * fan_in..base + (j + 1) * fan_in];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += dj * a;
                }
                grad[base + fan_in * fan_out + j] += dj;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[base..base + fan_in * fan_out];
            prev.clear();
            prev.resize(fan_in, 0.0);
            for j in 0..fan_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += dj * wi;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            std::mem::swap(delta, prev);
        }
    }

    /// `d o / d x` (raw, unstandardized input) from a trace, written to `out`.
    pub fn output_input_grad_into(&self, trace: &mut Trace, out: &mut Vec<f64>) {
        let layers: Vec<(usize, usize, usize)> = self.layer_offsets().collect();
        let Trace { acts, delta, prev, .. } = trace;
        delta.clear();
        delta.push(1.0);
        for (l, &(base, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let w = &self.params[base..base + fan_in * fan_out];
            prev.clear();
            prev.resize(fan_in, 0.0);
            for j in 0..fan_out {
                let dj = delta[j];
                for (p, wi) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += dj * wi;
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    *p *= 1.0 - a * a;
                }
            }
            std::mem::swap(delta, prev);
        }
        out.clear();
        out.extend(delta.iter().zip(&self.input_scale).map(|(d, s)| d / s));
    }

    pub fn output_input_grad(&self, trace: &mut Trace) -> Vec<f64> {
        let mut out = Vec::new();
        self.output_input_grad_into(trace, &mut out);
        out
    }

    /// `phi(o)` and `phi'(o)` for an output pre-activation.
    #[inline]
    pub fn value_from_output(&self, o: f64) -> (f64, f64) {
        (self.output.phi(o), self.output.dphi(o))
    }

    /// `Z(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let v = self.log_value(x)?;
        let z = (-v).exp();
        if !(z > 0.0) {
            return Err(Error::numeric("network output underflow"));
        }
        Ok(z)
    }

    /// `V(x) = -ln Z(x)`, computed without exponentiating.
    pub fn log_value(&self, x: &[f64]) -> Result<f64> {
        let o = with_scratch(|t| self.eval_into(x, t))?;
        Ok(self.output.phi(o))
    }

    /// `dZ/d params`.
    pub fn grad_params(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        with_scratch(|t| -> Result<()> {
            let o = self.eval_into(x, t)?;
            let z = (-self.output.phi(o)).exp();
            self.accumulate_param_grad(t, -z * self.output.dphi(o), &mut grad);
            Ok(())
        })?;
        Ok(grad)
    }

    /// `dZ/dx`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        with_scratch(|t| {
            let o = self.eval_into(x, t)?;
            let z = (-self.output.phi(o)).exp();
            let s = -z * self.output.dphi(o);
            Ok(self.output_input_grad(t).into_iter().map(|g| g * s).collect())
        })
    }

    /// `dV/dx` with `V = -ln Z`; avoids the `-(dZ/dx)/Z` quotient.
    pub fn log_value_grad_input(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        with_scratch(|t| {
            let o = self.eval_into(x, t)?;
            let (v, dv) = self.value_from_output(o);
            let mut g = Vec::with_capacity(x.len());
            self.output_input_grad_into(t, &mut g);
            g.iter_mut().for_each(|gi| *gi *= dv);
            Ok((v, g))
        })
    }
}

impl ValueFunction for ZNetwork {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.log_value(x)
    }

    fn value_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_value_grad_input(x)?.1)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.log_value_grad_input(x)
    }
}

/// Analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradientReport {
    pub fn new(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        Self::with_floor(analytic, numeric, 1e-8)
    }

    /// Relative error `|a - n| / max(floor, |a| + |n|)` per entry.
    pub fn with_floor(analytic: Vec<f64>, numeric: Vec<f64>, floor: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let max_rel_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
            .fold(0.0, f64::max);
        Self { analytic, numeric, max_rel_err }
    }
}

/// Central finite differences of a scalar function.
pub fn central_difference<F>(f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares [`ZNetwork::grad_params`] against central differences.
pub fn check_param_gradient(net: &ZNetwork, x: &[f64], h: f64) -> Result<GradientReport> {
    let analytic = net.grad_params(x)?;
    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..probe.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let plus = probe.forward(x)?;
        probe.params[i] = orig - h;
        let minus = probe.forward(x)?;
        probe.params[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(GradientReport::new(analytic, numeric))
}

/// Compares [`ZNetwork::grad_input`] against central differences.
pub fn check_input_gradient(net: &ZNetwork, x: &[f64], h: f64) -> Result<GradientReport> {
    let analytic = net.grad_input(x)?;
    let numeric = central_difference(|p| net.forward(p), x, h)?;
    Ok(GradientReport::new(analytic, numeric))
}
