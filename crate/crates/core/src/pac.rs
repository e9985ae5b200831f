//! Passive actor-critic.
//!
//! The critic fits `(Z, Z_avg)` to the linearized Bellman equation
//! `Z_avg Z(x) = exp(-q dt) E[Z(x')]` from passive transitions only. The
//! actor then fits the control scale `S` of the policy `u = -S B' dV/dx` by
//! driving the average-cost TD error of the controlled transition to zero,
//! using the known input gain `B` and the critic's value estimate.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmdp::{apply_neg_s, project_gradient, quad_form, LmdpModel};
use crate::network::{OutputActivation, Trace, ValueFunction, ZNetwork};

/// Lower clamp for `Z_avg`.
pub const Z_AVG_MIN: f64 = 1e-8;

/// Largest value `V = -ln Z` treated as representable; beyond it `Z`
/// underflows in double precision.
const V_UNDERFLOW: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub x: Vec<f64>,
    /// Next state under passive dynamics.
    pub x_next: Vec<f64>,
    /// State cost at `x`.
    pub q: f64,
}

impl TransitionSample {
    pub fn new(x: Vec<f64>, x_next: Vec<f64>, q: f64) -> Result<Self> {
        if x.len() != x_next.len() {
            return Err(Error::Argument("state and next state differ in dimension".into()));
        }
        if x.iter().chain(&x_next).any(|v| !v.is_finite()) || !q.is_finite() {
            return Err(Error::Argument("transition sample has non-finite entries".into()));
        }
        if q < 0.0 {
            return Err(Error::Argument(format!("state cost must be nonnegative, got {q}")));
        }
        Ok(Self { x, x_next, q })
    }
}

/// How the state cost enters the exponentiated Bellman target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QScaling {
    /// `exp(-q dt)` in the critic target and `q dt` in the actor reward.
    TimeStep,
    /// `exp(-q)` and `q`: the cost is taken as already integrated over a step.
    Literal,
}

impl QScaling {
    /// Cost charged for one step.
    #[inline]
    pub fn per_step(self, q: f64, dt: f64) -> f64 {
        match self {
            QScaling::TimeStep => q * dt,
            QScaling::Literal => q,
        }
    }
}

/// Per-sample weighting of the critic's parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticWeighting {
    /// `2 e Z_avg dZ/dnu` and `2 e Z`, exactly the squared-TD-error gradients.
    Plain,
    /// The same gradients divided by `(Z_avg Z)^2`, i.e. descent on the
    /// relative TD error `e / (Z_avg Z)`. Identical fixed point; does not
    /// starve states where `Z` is tiny.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorGradient {
    /// Chain rule through the controlled next state.
    Full,
    /// Ignores the dependence of `x~` on `S`.
    Semi,
}

/// Constant learning rate with a single multiplicative decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub base: f64,
    /// Iteration at which the rate drops; `None` keeps it constant.
    pub decay_at: Option<u64>,
    pub decay_factor: f64,
}

impl RateSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decay_at: None, decay_factor: 1.0 }
    }

    /// Constant `base`, decayed by `factor` once `fraction` of `total`
    /// iterations have run.
    pub fn with_decay(base: f64, total: u64, fraction: f64, factor: f64) -> Self {
        Self { base, decay_at: Some((total as f64 * fraction).round() as u64), decay_factor: factor }
    }

    pub fn rate(&self, iter: u64) -> f64 {
        match self.decay_at {
            Some(at) if iter >= at => self.base * self.decay_factor,
            _ => self.base,
        }
    }
}

/// Keeps the free additive constant of `V` pinned: after each relative
/// update the output bias is nudged so the smallest batch value tracks
/// `level`. The relative TD error is invariant to that constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueAnchor {
    pub level: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub net: ZNetwork,
    /// Clamped estimate in `(Z_AVG_MIN, 1]`.
    pub z_avg: f64,
    /// Last estimate before clamping.
    pub z_avg_raw: f64,
    pub dt: f64,
    pub q_scaling: QScaling,
    pub weighting: CriticWeighting,
    pub anchor: Option<ValueAnchor>,
    /// Lower bound on the relative residual `1 - target / (Z_avg Z)`.
    pub relative_floor: f64,
    pub rate_avg: RateSchedule,
    pub rate_net: RateSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CriticStats {
    pub mean_e2: f64,
    /// Mean squared relative TD error `(e / (Z_avg Z))^2`.
    pub mean_rel2: f64,
    pub clamped: bool,
}

impl Critic {
    /// `e = Z_avg Z(x) - min(1, exp(-q dt) Z(x'))`.
    pub fn td_error(&self, s: &TransitionSample) -> Result<f64> {
        let v = self.net.log_value(&s.x)?;
        let v_next = self.net.log_value(&s.x_next)?;
        let target = (-self.q_scaling.per_step(s.q, self.dt) - v_next).min(0.0).exp();
        Ok(self.z_avg * (-v).exp() - target)
    }

    /// One minibatch step on `(nu, Z_avg)`.
    pub fn update(&mut self, iter: u64, batch: &[&TransitionSample]) -> Result<CriticStats> {
        if batch.is_empty() {
            return Err(Error::Argument("critic update needs a nonempty batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.net.num_params()];
        let mut trace = Trace::default();
        let mut next_trace = Trace::default();
        let ln_zavg = self.z_avg.ln();
        let mut avg_step = 0.0;
        let mut e2 = 0.0;
        let mut rel2 = 0.0;
        let mut min_v = f64::INFINITY;
        for s in batch {
            let o = self.net.eval_into(&s.x, &mut trace)?;
            let (v, dv) = self.net.value_from_output(o);
            let o_next = self.net.eval_into(&s.x_next, &mut next_trace)?;
            let (v_next, _) = self.net.value_from_output(o_next);
            let ln_target = (-self.q_scaling.per_step(s.q, self.dt) - v_next).min(0.0);
            let z = (-v).exp();
            let e = self.z_avg * z - ln_target.exp();
            // e / (Z_avg Z) evaluated in log space
            let rho = (1.0 - (ln_target - ln_zavg + v).exp()).max(self.relative_floor);
            e2 += e * e;
            rel2 += rho * rho;
            min_v = min_v.min(v);
            // scale multiplies d o / d nu; dZ/do = -Z phi'(o)
            let scale = match self.weighting {
                CriticWeighting::Plain => {
                    avg_step += 2.0 * e * z;
                    -2.0 * e * self.z_avg * z * dv
                }
                CriticWeighting::Relative => {
                    avg_step += 2.0 * rho * self.z_avg;
                    -2.0 * rho * dv
                }
            };
            self.net.accumulate_param_grad(&mut trace, scale * inv, &mut grad);
        }
        let alpha_net = self.rate_net.rate(iter);
        let alpha_avg = self.rate_avg.rate(iter);
        if grad.iter().any(|g| !g.is_finite()) || !avg_step.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite critic gradient at iteration {iter} (z_avg = {}, mean e^2 = {})",
                self.z_avg,
                e2 * inv
            )));
        }
        for (p, g) in self.net.params_mut().iter_mut().zip(&grad) {
            *p -= alpha_net * g;
        }
        let raw = self.z_avg - alpha_avg * avg_step * inv;
        self.z_avg_raw = raw;
        let clamped = !(raw > Z_AVG_MIN && raw <= 1.0);
        self.z_avg = raw.clamp(Z_AVG_MIN, 1.0);
        if let (CriticWeighting::Relative, Some(anchor)) = (self.weighting, self.anchor) {
            let bi = self.net.output_bias_index();
            self.net.params_mut()[bi] += anchor.gain * (anchor.level - min_v);
        }
        Ok(CriticStats { mean_e2: e2 * inv, mean_rel2: rel2 * inv, clamped })
    }

    /// `-ln Z_avg`, using the unclamped estimate while it is positive.
    pub fn v_avg(&self) -> f64 {
        if self.z_avg_raw > 0.0 {
            -self.z_avg_raw.ln()
        } else {
            -self.z_avg.ln()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub s_hat: DMatrix<f64>,
    pub input_gain: DMatrix<f64>,
    pub dt: f64,
    pub q_scaling: QScaling,
    pub gradient: ActorGradient,
    pub rate: RateSchedule,
}

/// Actor TD error and its derivative with respect to `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorTd {
    pub d: f64,
    pub grad_s: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorStats {
    pub mean_d2: f64,
    pub not_positive_definite: bool,
}

fn checked_value(v: f64, what: &str) -> Result<f64> {
    if !v.is_finite() || v > V_UNDERFLOW {
        return Err(Error::numeric(format!("{what}: Z underflow (V = {v})")));
    }
    Ok(v)
}

/// Actor TD error for an arbitrary value function `V` with average cost `v_avg`.
///
/// `d = q dt + 0.5 g' S g dt + V(x~) - v_avg - V(x)` with `g = B' dV/dx(x)` and
/// `x~ = x' - B S g dt`.
#[allow(clippy::too_many_arguments)]
pub fn actor_td<V: ValueFunction + ?Sized>(
    value: &V,
    v_avg: f64,
    s_hat: &DMatrix<f64>,
    input_gain: &DMatrix<f64>,
    dt: f64,
    q_scaling: QScaling,
    gradient: ActorGradient,
    s: &TransitionSample,
) -> Result<ActorTd> {
    let (v, grad_v) = value.value_and_gradient(&s.x)?;
    let v = checked_value(v, "actor V(x)")?;
    let b = input_gain;
    let g = project_gradient(b, &grad_v);
    let u = apply_neg_s(s_hat, &g);
    let mut x_tilde = s.x_next.clone();
    for (i, xt) in x_tilde.iter_mut().enumerate() {
        for (j, uj) in u.iter().enumerate() {
            *xt += b[(i, j)] * uj * dt;
        }
    }
    let (v_tilde, grad_tilde) = value.value_and_gradient(&x_tilde)?;
    let v_tilde = checked_value(v_tilde, "actor V(x~)")?;
    let q = q_scaling.per_step(s.q, dt);
    let d = q + 0.5 * quad_form(s_hat, &g) * dt + v_tilde - v_avg - v;
    let m = g.len();
    let h = match gradient {
        ActorGradient::Full => project_gradient(b, &grad_tilde),
        ActorGradient::Semi => vec![0.0; m],
    };
    let grad_s = DMatrix::from_fn(m, m, |i, j| dt * (0.5 * g[i] - h[i]) * g[j]);
    Ok(ActorTd { d, grad_s })
}

impl Actor {
    pub fn td_error(&self, critic: &Critic, s: &TransitionSample) -> Result<ActorTd> {
        actor_td(&critic.net, critic.v_avg(), &self.s_hat, &self.input_gain, self.dt, self.q_scaling, self.gradient, s)
    }

    pub fn update(&mut self, iter: u64, critic: &Critic, batch: &[&TransitionSample]) -> Result<ActorStats> {
        if batch.is_empty() {
            return Err(Error::Argument("actor update needs a nonempty batch".into()));
        }
        let m = self.s_hat.nrows();
        let inv = 1.0 / batch.len() as f64;
        let mut step = DMatrix::zeros(m, m);
        let mut d2 = 0.0;
        for s in batch {
            let td = self.td_error(critic, s)?;
            d2 += td.d * td.d;
            step += td.grad_s * (2.0 * td.d * inv);
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite actor gradient at iteration {iter}")));
        }
        let beta = self.rate.rate(iter);
        let next = &self.s_hat - step * beta;
        self.s_hat = (&next + next.transpose()) * 0.5;
        let not_pd = self.s_hat.clone().cholesky().is_none();
        Ok(ActorStats { mean_d2: d2 * inv, not_positive_definite: not_pd })
    }
}

/// Counters for clamp and definiteness events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PacEvents {
    pub z_avg_clamps: u64,
    pub s_not_positive_definite: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacState {
    pub critic: Critic,
    pub actor: Actor,
    pub iter: u64,
    pub events: PacEvents,
}

impl PacState {
    /// Critic step; advances the iteration counter.
    pub fn critic_update(&mut self, batch: &[&TransitionSample]) -> Result<CriticStats> {
        let stats = self.critic.update(self.iter, batch)?;
        if stats.clamped {
            self.events.z_avg_clamps += 1;
        }
        self.iter += 1;
        Ok(stats)
    }

    pub fn actor_update(&mut self, batch: &[&TransitionSample]) -> Result<ActorStats> {
        let stats = self.actor.update(self.iter, &self.critic, batch)?;
        if stats.not_positive_definite {
            self.events.s_not_positive_definite += 1;
        }
        Ok(stats)
    }

    pub fn critic_td_error(&self, s: &TransitionSample) -> Result<f64> {
        self.critic.td_error(s)
    }

    pub fn actor_td_error(&self, s: &TransitionSample) -> Result<ActorTd> {
        self.actor.td_error(&self.critic, s)
    }

    /// `-S B' dV/dx` at `x`.
    pub fn action(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, grad) = self.critic.net.log_value_grad_input(x)?;
        crate::lmdp::optimal_action(&self.actor.s_hat, &self.actor.input_gain, &grad)
    }
}

impl ValueFunction for PacState {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.critic.net.log_value(x)
    }

    fn value_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.critic.net.value_gradient(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    pub output_activation: String,
    /// Critic `Z_avg` rate (alpha_1).
    pub rate_z_avg: f64,
    /// Critic network rate.
    pub rate_net: f64,
    /// Actor rate (beta).
    pub rate_actor: f64,
    /// Fraction of iterations after which every rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub q_scaling: QScaling,
    pub critic_weighting: CriticWeighting,
    pub actor_gradient: ActorGradient,
    pub anchor_level: f64,
    pub anchor_gain: f64,
    /// Floor on the relative critic residual; bounds the step when `Z(x)`
    /// sits far below its target.
    pub relative_floor: f64,
    pub z_avg_init: f64,
    /// Initial `S` is this multiple of the identity.
    pub s_init: f64,
    pub metrics_every: u64,
    /// Fraction of final iterations over which parameters, `Z_avg` and `S`
    /// are averaged to form the returned state; 0 returns the last iterate.
    pub average_tail: f64,
    /// Abort when the windowed critic loss exceeds its running minimum by this factor.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            batch_size: 64,
            seed: 0,
            hidden_layers: vec![32, 32],
            output_activation: "exp-neg-softplus".into(),
            rate_z_avg: 0.01,
            rate_net: 0.01,
            rate_actor: 0.01,
            decay_at: 0.8,
            decay_factor: 0.1,
            q_scaling: QScaling::TimeStep,
            critic_weighting: CriticWeighting::Relative,
            actor_gradient: ActorGradient::Full,
            anchor_level: 4.0,
            anchor_gain: 0.05,
            relative_floor: -4.0,
            z_avg_init: 0.9,
            s_init: 0.1,
            metrics_every: 1000,
            average_tail: 0.2,
            divergence_factor: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for (name, r) in [("rate_z_avg", self.rate_z_avg), ("rate_net", self.rate_net), ("rate_actor", self.rate_actor)]
        {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.decay_at) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay_at must lie in [0,1] and decay_factor be positive".into()));
        }
        if !(self.z_avg_init > 0.0 && self.z_avg_init <= 1.0) {
            return Err(Error::Config("z_avg_init must lie in (0, 1]".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.average_tail) {
            return Err(Error::Config("average_tail must lie in [0,1]".into()));
        }
        if !(self.relative_floor < 0.0) {
            return Err(Error::Config("relative_floor must be negative".into()));
        }
        if self.metrics_every == 0 {
            return Err(Error::Config("metrics_every must be positive".into()));
        }
        OutputActivation::parse(&self.output_activation)?;
        Ok(())
    }

    fn schedule(&self, base: f64) -> RateSchedule {
        RateSchedule::with_decay(base, self.iterations, self.decay_at, self.decay_factor)
    }
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub mean_e2: f64,
    pub mean_d2: f64,
    pub z_avg: f64,
    pub s_hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: PacState,
    pub metrics: Vec<MetricRow>,
}

/// Initial learner state for a model and a dataset (used for input standardization).
pub fn initial_state(dataset: &[TransitionSample], model: &LmdpModel, cfg: &TrainConfig) -> Result<PacState> {
    cfg.validate()?;
    let n = model.state_dim();
    let m = model.control_dim();
    let mut sizes = vec![n];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(1);
    let act = OutputActivation::parse(&cfg.output_activation)?;
    let mut net = ZNetwork::new(&sizes, act, cfg.seed)?;
    if dataset.len() >= 2 {
        net.fit_standardization(dataset.iter().map(|s| s.x.as_slice()))?;
    }
    let anchor = match cfg.critic_weighting {
        CriticWeighting::Relative => Some(ValueAnchor { level: cfg.anchor_level, gain: cfg.anchor_gain }),
        CriticWeighting::Plain => None,
    };
    Ok(PacState {
        critic: Critic {
            net,
            z_avg: cfg.z_avg_init,
            z_avg_raw: cfg.z_avg_init,
            dt: model.dt(),
            q_scaling: cfg.q_scaling,
            weighting: cfg.critic_weighting,
            anchor,
            relative_floor: cfg.relative_floor,
            rate_avg: cfg.schedule(cfg.rate_z_avg),
            rate_net: cfg.schedule(cfg.rate_net),
        },
        actor: Actor {
            s_hat: DMatrix::identity(m, m) * cfg.s_init,
            input_gain: model.input_gain().clone(),
            dt: model.dt(),
            q_scaling: cfg.q_scaling,
            gradient: cfg.actor_gradient,
            rate: cfg.schedule(cfg.rate_actor),
        },
        iter: 0,
        events: PacEvents::default(),
    })
}

/// Runs `cfg.iterations` critic-then-actor steps on uniformly resampled
/// minibatches. Deterministic for a given seed.
pub fn train(dataset: &[TransitionSample], model: &LmdpModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = initial_state(dataset, model, cfg)?;
    if dataset.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} samples, fewer than the batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let n = model.state_dim();
    if let Some(bad) = dataset.iter().position(|s| s.x.len() != n) {
        return Err(Error::Config(format!("sample {bad} has dimension {}, model expects {n}", dataset[bad].x.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_u64);
    let mut metrics = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0u64);
    let mut best_loss = f64::INFINITY;
    let mut batch: Vec<&TransitionSample> = Vec::with_capacity(cfg.batch_size);
    let tail = (cfg.iterations as f64 * cfg.average_tail).round() as u64;
    let mut average = TailAverage::default();
    for _ in 0..cfg.iterations {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(&dataset[rng.random_range(0..dataset.len())]);
        }
        let cs = state.critic_update(&batch)?;
        let as_ = state.actor_update(&batch)?;
        let loss = match cfg.critic_weighting {
            CriticWeighting::Plain => cs.mean_e2,
            CriticWeighting::Relative => cs.mean_rel2,
        };
        window.0 += cs.mean_e2;
        window.1 += as_.mean_d2;
        window.2 += loss;
        window.3 += 1;
        if state.iter % cfg.metrics_every == 0 || state.iter == cfg.iterations {
            let k = window.3 as f64;
            let wl = window.2 / k;
            metrics.push(MetricRow {
                iteration: state.iter,
                mean_e2: window.0 / k,
                mean_d2: window.1 / k,
                z_avg: state.critic.z_avg,
                s_hat: state.actor.s_hat.iter().copied().collect(),
            });
            best_loss = best_loss.min(wl);
            if wl > cfg.divergence_factor * best_loss && best_loss > 0.0 {
                return Err(Error::Divergence(format!(
                    "critic loss {wl:e} at iteration {} is {:.0}x its minimum {best_loss:e} (z_avg = {}, S = {:?})",
                    state.iter,
                    wl / best_loss,
                    state.critic.z_avg,
                    state.actor.s_hat.as_slice()
                )));
            }
            window = (0.0, 0.0, 0.0, 0);
        }
        if state.iter + tail > cfg.iterations {
            average.add(&state);
        }
    }
    average.apply(&mut state);
    Ok(TrainOutcome { state, metrics })
}

/// Running mean of the learner's iterates.
#[derive(Default)]
struct TailAverage {
    count: f64,
    params: Vec<f64>,
    z_avg: f64,
    z_avg_raw: f64,
    s_hat: Option<DMatrix<f64>>,
}

impl TailAverage {
    fn add(&mut self, st: &PacState) {
        self.count += 1.0;
        let w = 1.0 / self.count;
        if self.params.is_empty() {
            self.params = st.critic.net.params().to_vec();
            self.z_avg = st.critic.z_avg;
            self.z_avg_raw = st.critic.z_avg_raw;
            self.s_hat = Some(st.actor.s_hat.clone());
            return;
        }
        for (a, p) in self.params.iter_mut().zip(st.critic.net.params()) {
            *a += w * (p - *a);
        }
        self.z_avg += w * (st.critic.z_avg - self.z_avg);
        self.z_avg_raw += w * (st.critic.z_avg_raw - self.z_avg_raw);
        if let Some(s) = self.s_hat.as_mut() {
            *s += (&st.actor.s_hat - &*s) * w;
        }
    }

    fn apply(self, st: &mut PacState) {
        if self.count == 0.0 {
            return;
        }
        st.critic.net.params_mut().copy_from_slice(&self.params);
        st.critic.z_avg = self.z_avg;
        st.critic.z_avg_raw = self.z_avg_raw;
        if let Some(s) = self.s_hat {
            st.actor.s_hat = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d() -> LmdpModel {
        LmdpModel::new(DMatrix::from_element(1, 1, 1.0), 0.1, |x| x[0] * x[0]).unwrap()
    }

    fn constant_state(c: f64, z_avg: f64) -> PacState {
        // zero network with output bias chosen so that Z == c everywhere
        let cfg =
            TrainConfig { hidden_layers: vec![4], critic_weighting: CriticWeighting::Plain, ..Default::default() };
        let mut st = initial_state(&[], &model_1d(), &cfg).unwrap();
        for p in st.critic.net.params_mut() {
            *p = 0.0;
        }
        // softplus(b) = -ln c  =>  b = ln(exp(-ln c) - 1)
        let b = ((-c.ln()).exp() - 1.0).ln();
        let bi = st.critic.net.output_bias_index();
        st.critic.net.params_mut()[bi] = b;
        st.critic.z_avg = z_avg;
        st.critic.z_avg_raw = z_avg;
        st
    }

    #[test]
    fn critic_error_for_constant_z() {
        let st = constant_state(0.4, 0.8);
        let s = TransitionSample::new(vec![0.3], vec![-0.1], 0.0).unwrap();
        let e = st.critic_td_error(&s).unwrap();
        assert!((e - 0.4 * (0.8 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn critic_target_is_clamped() {
        let mut st = constant_state(0.5, 0.9);
        // switch to the bounded tanh output so that Z can exceed 1
        let mut net = ZNetwork::zeros(&[1, 4, 1], OutputActivation::ExpNegTanh).unwrap();
        let bi = net.output_bias_index();
        net.params_mut()[bi] = -(1.7f64.ln()).atanh();
        st.critic.net = net;
        let s = TransitionSample::new(vec![0.0], vec![0.0], 0.0).unwrap();
        // exp(-q dt) Z_next = 1.7 -> target 1
        let e = st.critic_td_error(&s).unwrap();
        assert!((e - (0.9 * 1.7 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_error_batch_leaves_state() {
        let mut st = constant_state(0.6, 1.0);
        let before = st.clone();
        let s = TransitionSample::new(vec![0.5], vec![0.2], 0.0).unwrap();
        let stats = st.critic_update(&[&s, &s]).unwrap();
        assert_eq!(stats.mean_e2, 0.0);
        assert_eq!(st.critic.net, before.critic.net);
        assert_eq!(st.critic.z_avg, before.critic.z_avg);
        assert_eq!(st.iter, 1);
    }

    #[test]
    fn z_avg_step_arithmetic() {
        // one sample with e = 0.2 and Z = 0.5: Z_avg moves by 2 * 0.1 * 0.2 * 0.5
        let mut st = constant_state(0.5, 0.9);
        st.critic.rate_avg = RateSchedule::constant(0.1);
        st.critic.rate_net = RateSchedule::constant(0.0);
        // target 0.25 gives e = 0.9 * 0.5 - 0.25 = 0.2
        let q = -(0.25f64 / 0.5).ln() / 0.1;
        let s = TransitionSample::new(vec![0.0], vec![0.0], q).unwrap();
        assert!((st.critic_td_error(&s).unwrap() - 0.2).abs() < 1e-12);
        st.critic_update(&[&s]).unwrap();
        assert!((st.critic.z_avg - (0.9 - 0.02)).abs() < 1e-12);
    }

    #[test]
    fn z_avg_is_clamped() {
        let mut st = constant_state(0.5, 1.0);
        st.critic.rate_avg = RateSchedule::constant(10.0);
        st.critic.rate_net = RateSchedule::constant(0.0);
        // e < 0 pushes Z_avg above 1
        let s = TransitionSample::new(vec![0.0], vec![0.0], 0.0).unwrap();
        st.critic.z_avg = 0.5;
        st.critic_update(&[&s]).unwrap();
        assert!(st.critic.z_avg <= 1.0 && st.critic.z_avg > 0.0);
        assert_eq!(st.events.z_avg_clamps, 1);
        assert!(st.critic.z_avg_raw > 1.0);
    }

    #[test]
    fn actor_error_with_null_gradient() {
        let st = constant_state(0.5, 0.9);
        let s = TransitionSample::new(vec![0.7], vec![0.9], 2.0).unwrap();
        let v = -(0.5f64).ln();
        let td = st.actor_td_error(&s).unwrap();
        let expected = 2.0 * 0.1 + v - (-(0.9f64).ln()) - v;
        assert!((td.d - expected).abs() < 1e-12);
        assert!(td.grad_s.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn actor_update_with_zero_error_keeps_s() {
        let mut st = constant_state(0.5, 1.0);
        let s = TransitionSample::new(vec![0.7], vec![0.9], 0.0).unwrap();
        assert_eq!(st.actor_td_error(&s).unwrap().d, 0.0);
        let before = st.actor.s_hat.clone();
        st.actor_update(&[&s]).unwrap();
        assert_eq!(st.actor.s_hat, before);
    }

    #[test]
    fn actor_gradient_matches_finite_difference() {
        let model = model_1d();
        let cfg = TrainConfig { hidden_layers: vec![6], ..Default::default() };
        let mut st = initial_state(&[], &model, &cfg).unwrap();
        st.critic.z_avg = 0.95;
        st.critic.z_avg_raw = 0.95;
        let s = TransitionSample::new(vec![0.8], vec![0.75], 0.64).unwrap();
        for s_val in [0.05, 0.25, 1.0] {
            st.actor.s_hat = DMatrix::from_element(1, 1, s_val);
            let analytic = st.actor_td_error(&s).unwrap().grad_s[(0, 0)];
            let h = 1e-6;
            let mut plus = st.clone();
            plus.actor.s_hat[(0, 0)] += h;
            let mut minus = st.clone();
            minus.actor.s_hat[(0, 0)] -= h;
            let numeric = (plus.actor_td_error(&s).unwrap().d - minus.actor_td_error(&s).unwrap().d) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "S={s_val}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let model = model_1d();
        let data: Vec<_> = (0..10)
            .map(|i| TransitionSample::new(vec![i as f64 * 0.1], vec![i as f64 * 0.1 + 0.01], 0.0).unwrap())
            .collect();
        let cfg = TrainConfig { iterations: 0, batch_size: 4, hidden_layers: vec![4], ..Default::default() };
        let out = train(&data, &model, &cfg).unwrap();
        assert_eq!(out.state, initial_state(&data, &model, &cfg).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn small_dataset_rejected() {
        let model = model_1d();
        let data = vec![TransitionSample::new(vec![0.0], vec![0.0], 0.0).unwrap(); 3];
        let cfg = TrainConfig { batch_size: 8, ..Default::default() };
        assert!(matches!(train(&data, &model, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rate_schedule_decays_once() {
        let r = RateSchedule::with_decay(0.5, 100, 0.8, 0.1);
        assert_eq!(r.rate(0), 0.5);
        assert_eq!(r.rate(79), 0.5);
        assert!((r.rate(80) - 0.05).abs() < 1e-15);
        assert!((r.rate(1000) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn invalid_sample_rejected() {
        assert!(TransitionSample::new(vec![0.0], vec![0.0], -1.0).is_err());
        assert!(TransitionSample::new(vec![0.0], vec![f64::NAN], 0.0).is_err());
        assert!(TransitionSample::new(vec![0.0], vec![0.0, 1.0], 0.0).is_err());
    }
}
