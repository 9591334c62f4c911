//! Soft actor-critic over a single bounded action, the similarity weight λ.
//!
//! The actor is a tanh-squashed Gaussian; two critics score `(state, tanh u)`
//! and slowly track target copies. The temperature is tuned toward a fixed
//! target entropy.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::nn::{self, ParamView};
use crate::diff::{Adam, Gradients, Graph, Mat, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::LambdaPolicy;
use crate::rng::chacha;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;
const CRITICS: [&str; 2] = ["critic1", "critic2"];
const TARGETS: [&str; 2] = ["target1", "target2"];

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub capacity: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub lambda_range: (f64, f64),
    pub target_entropy: f64,
    pub initial_alpha: f64,
    /// Gradient updates per environment step.
    pub updates_per_step: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            capacity: 10_000,
            batch_size: 64,
            hidden: 64,
            lambda_range: (-1.0, 1.0),
            target_entropy: -1.0,
            initial_alpha: 1.0,
            updates_per_step: 1,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lambda_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad lambda range [{lo}, {hi}]")));
        }
        if self.capacity == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid("capacity, batch size and hidden width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.gamma) || !(self.initial_alpha > 0.0) {
            return Err(Error::invalid("tau and gamma must lie in [0, 1] and alpha must be positive"));
        }
        Ok(())
    }

    /// Affine map from `[-1, 1]` onto the λ range.
    pub fn scale_action(&self, squashed: f64) -> f64 {
        let (lo, hi) = self.lambda_range;
        (lo + 0.5 * (squashed + 1.0) * (hi - lo)).clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Pre-squash Gaussian sample.
    pub raw_action: f64,
    /// λ after squashing and scaling.
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1024)) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Appends, evicting the oldest transition when full.
    pub fn store(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

pub fn store_transition(buffer: &mut ReplayBuffer, t: Transition) {
    buffer.store(t);
}

fn init_mlp(set: &mut ParameterSet, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<()> {
    set.init_linear(rng, &format!("{prefix}.l0"), d_in, hidden)?;
    set.init_linear(rng, &format!("{prefix}.l1"), hidden, hidden)?;
    set.init_linear(rng, &format!("{prefix}.out"), hidden, d_out)
}

fn mlp(g: &mut Graph, p: &ParamView, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, p, &format!("{prefix}.l0"), x)?;
    let h = g.relu(h);
    let h = nn::linear(g, p, &format!("{prefix}.l1"), h)?;
    let h = g.relu(h);
    nn::linear(g, p, &format!("{prefix}.out"), h)
}

/// Actor head on a graph: `(mean, clamped log-std)`, each `rows x 1`.
fn actor_heads(g: &mut Graph, p: &ParamView, states: Var) -> Result<(Var, Var)> {
    let out = mlp(g, p, "actor", states)?;
    let mean = g.slice_cols(out, 0, 1)?;
    let log_std = g.slice_cols(out, 1, 1)?;
    Ok((mean, g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)))
}

/// Reparameterized sample `u = mean + std·ε`, its squash `tanh u`, and the
/// log-density of the squashed action with the change-of-variables term.
fn squashed_sample(g: &mut Graph, mean: Var, log_std: Var, eps: &[f64]) -> Result<(Var, Var)> {
    let e = g.constant(Mat::new(eps.len(), 1, eps.to_vec())?);
    let std = g.exp(log_std);
    let noise = g.mul(std, e)?;
    let u = g.add(mean, noise)?;
    let a = g.tanh(u);
    let gauss: Vec<f64> = eps.iter().map(|x| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()).collect();
    let gauss = g.constant(Mat::new(eps.len(), 1, gauss)?);
    let logp = g.sub(gauss, log_std)?;
    let a2 = g.square(a);
    let one_minus = g.neg(a2);
    let one_minus = g.add_const(one_minus, 1.0 + TANH_EPS);
    let jac = g.log(one_minus);
    Ok((a, g.sub(logp, jac)?))
}

fn critic(g: &mut Graph, p: &ParamView, name: &str, states: Var, actions: Var) -> Result<Var> {
    let x = g.concat_cols(&[states, actions])?;
    mlp(g, p, name, x)
}

fn stack_states<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Result<Mat> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::shape(format!("state of length {} for dimension {dim}", r.len())));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Mat::new(n, dim, data)
}

/// Draws λ from the policy at `state`: `u ~ N(mean, std)` (or `u = mean`),
/// squashed by tanh and scaled into the λ range. Returns `(u, λ)`.
pub fn sample_action<R: Rng>(
    params: &ParameterSet,
    config: &SacConfig,
    state: &[f64],
    stochastic: bool,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let s = g.constant(Mat::row_vector(state.to_vec()));
    let (mean, log_std) = actor_heads(&mut g, &ParamView::frozen(params, ""), s)?;
    let (m, ls) = (g.value(mean).item(), g.value(log_std).item());
    let u = if stochastic {
        let e: f64 = rng.sample(StandardNormal);
        m + ls.exp() * e
    } else {
        m
    };
    Ok((u, config.scale_action(u.tanh())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub config: SacConfig,
    pub state_dim: usize,
    /// `actor.*`, `critic{1,2}.*`, `target{1,2}.*` and `log_alpha`.
    pub params: ParameterSet,
    pub buffer: ReplayBuffer,
    actor_opt: Adam,
    critic_opt: Adam,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
    previous: Option<(Vec<f64>, f64, f64)>,
    /// Updates performed so far.
    pub updates: u64,
}

impl SacAgent {
    pub fn new(state_dim: usize, config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        let mut rng = chacha(seed);
        let mut params = ParameterSet::new();
        init_mlp(&mut params, &mut rng, "actor", state_dim, config.hidden, 2)?;
        for c in CRITICS {
            init_mlp(&mut params, &mut rng, c, state_dim + 1, config.hidden, 1)?;
        }
        for (c, t) in CRITICS.iter().zip(TARGETS) {
            let copy = params.sub_set(&format!("{c}."));
            params.extend_prefixed(&format!("{t}."), &copy)?;
        }
        params.insert("log_alpha", Tensor::new(vec![1], vec![config.initial_alpha.ln()])?)?;
        Ok(Self {
            actor_opt: Adam::new(config.actor_lr),
            critic_opt: Adam::new(config.critic_lr),
            alpha_opt: Adam::new(config.alpha_lr),
            buffer: ReplayBuffer::new(config.capacity),
            config,
            state_dim,
            params,
            rng: chacha(seed ^ 0xa11ce),
            previous: None,
            updates: 0,
        })
    }

    /// Replaces every parameter; paths and shapes must match.
    pub fn load_params(&mut self, set: &ParameterSet) -> Result<()> {
        if set.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", self.params.len(), set.len())));
        }
        for (path, t) in self.params.iter() {
            match set.get(path) {
                Ok(o) if o.shape == t.shape => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen {path}"))),
            }
        }
        self.params = set.clone();
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.params.get("log_alpha").map(|t| t.values[0].exp()).unwrap_or(f64::NAN)
    }

    pub fn sample_action(&mut self, state: &[f64], stochastic: bool) -> Result<(f64, f64)> {
        sample_action(&self.params, &self.config, state, stochastic, &mut self.rng)
    }

    /// Deterministic λ at `state`.
    pub fn greedy_lambda(&mut self, state: &[f64]) -> Result<f64> {
        Ok(self.sample_action(state, false)?.1)
    }

    /// `(mean, log_std)` of the pre-squash Gaussian at `state`.
    pub fn policy_moments(&self, state: &[f64]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let s = g.constant(Mat::row_vector(state.to_vec()));
        let (m, ls) = actor_heads(&mut g, &ParamView::frozen(&self.params, ""), s)?;
        Ok((g.value(m).item(), g.value(ls).item()))
    }

    /// `θ' ← τθ + (1-τ)θ'` for both target critics.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        for (c, t) in CRITICS.iter().zip(TARGETS) {
            let online = self.params.sub_set(&format!("{c}."));
            for (path, src) in online.iter() {
                let dst = self
                    .params
                    .get_mut(&format!("{t}.{path}"))
                    .ok_or_else(|| Error::MissingParameter(format!("{t}.{path}")))?;
                for (d, s) in dst.values.iter_mut().zip(&src.values) {
                    *d = tau * s + (1.0 - tau) * *d;
                }
            }
        }
        Ok(())
    }

    /// `y = r + γ (1 - terminal) (min target Q(s', a') - α log π(a'|s'))`
    /// with `a'` drawn from the current policy using the noise `eps`.
    pub fn critic_targets(&self, batch: &[Transition], eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != batch.len() {
            return Err(Error::shape("one noise sample per transition is required"));
        }
        let alpha = self.alpha();
        let mut g = Graph::new();
        let p = ParamView::frozen(&self.params, "");
        let s2 = g.constant(stack_states(batch.iter().map(|t| &t.next_state), self.state_dim)?);
        let (m, ls) = actor_heads(&mut g, &p, s2)?;
        let (a2, logp2) = squashed_sample(&mut g, m, ls, eps)?;
        let q1 = critic(&mut g, &p, TARGETS[0], s2, a2)?;
        let q2 = critic(&mut g, &p, TARGETS[1], s2, a2)?;
        let (q1, q2, logp2) = (g.value(q1), g.value(q2), g.value(logp2));
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.terminal || self.config.gamma == 0.0 {
                    t.reward
                } else {
                    t.reward + self.config.gamma * (q1.data[i].min(q2.data[i]) - alpha * logp2.data[i])
                }
            })
            .collect())
    }

    /// Mean squared error of both online critics against fixed targets.
    pub fn critic_loss(&self, batch: &[Transition], targets: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = ParamView::frozen(&self.params, "");
        let s = g.constant(stack_states(batch.iter().map(|t| &t.state), self.state_dim)?);
        let a = g.constant(Mat::new(batch.len(), 1, batch.iter().map(|t| t.raw_action.tanh()).collect())?);
        let y = Mat::new(batch.len(), 1, targets.to_vec())?;
        let mut total = 0.0;
        for c in CRITICS {
            let q = critic(&mut g, &p, c, s, a)?;
            total += g.value(q).data.iter().zip(&y.data).map(|(q, y)| (q - y) * (q - y)).sum::<f64>() / y.data.len() as f64;
        }
        Ok(total)
    }

    /// Monte Carlo estimate of the squashed policy's entropy at `state`.
    pub fn policy_entropy(&mut self, state: &[f64], samples: usize) -> Result<f64> {
        let eps: Vec<f64> = (0..samples).map(|_| self.rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let p = ParamView::frozen(&self.params, "");
        let rows: Vec<Vec<f64>> = vec![state.to_vec(); samples];
        let s = g.constant(stack_states(rows.iter(), self.state_dim)?);
        let (m, ls) = actor_heads(&mut g, &p, s)?;
        let (_, logp) = squashed_sample(&mut g, m, ls, &eps)?;
        Ok(-g.value(logp).data.iter().sum::<f64>() / samples as f64)
    }

    /// One gradient step on critics, actor and temperature from a sampled
    /// minibatch, then a soft target update. Returns `None` while the buffer
    /// holds fewer transitions than the batch size.
    pub fn update(&mut self) -> Result<Option<UpdateStats>> {
        let n = self.config.batch_size;
        if self.buffer.len() < n {
            return Ok(None);
        }
        let batch: Vec<Transition> = self.buffer.sample(&mut self.rng, n).into_iter().cloned().collect();
        let dim = self.state_dim;
        let states = stack_states(batch.iter().map(|t| &t.state), dim)?;
        let actions = Mat::new(n, 1, batch.iter().map(|t| t.raw_action.tanh()).collect())?;
        let alpha = self.alpha();

        let eps_next: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        let y = self.critic_targets(&batch, &eps_next)?;

        let critic_loss = {
            let mut g = Graph::new();
            let p = ParamView::tracked(&self.params, "");
            let s = g.constant(states.clone());
            let a = g.constant(actions);
            let target = g.constant(Mat::new(n, 1, y)?);
            let mut total = None;
            for c in CRITICS {
                let q = critic(&mut g, &p, c, s, a)?;
                let d = g.sub(q, target)?;
                let sq = g.square(d);
                let l = g.mean(sq);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let loss = total.expect("two critics");
            let grads = g.backward(loss)?.params(&g);
            let value = g.value(loss).item();
            self.critic_opt.step(&mut self.params, &grads)?;
            value
        };

        let eps: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        let (actor_loss, mean_logp) = {
            let mut g = Graph::new();
            let actor = ParamView::tracked(&self.params, "");
            let frozen = ParamView::frozen(&self.params, "");
            let s = g.constant(states);
            let (m, ls) = actor_heads(&mut g, &actor, s)?;
            let (a, logp) = squashed_sample(&mut g, m, ls, &eps)?;
            let q1 = critic(&mut g, &frozen, CRITICS[0], s, a)?;
            let q2 = critic(&mut g, &frozen, CRITICS[1], s, a)?;
            // Elementwise minimum through a mask taken from the forward values.
            let mask: Vec<f64> =
                (0..n).map(|i| if g.value(q1).data[i] <= g.value(q2).data[i] { 1.0 } else { 0.0 }).collect();
            let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
            let mask = g.constant(Mat::new(n, 1, mask)?);
            let inv = g.constant(Mat::new(n, 1, inv)?);
            let q1m = g.mul(q1, mask)?;
            let q2m = g.mul(q2, inv)?;
            let qmin = g.add(q1m, q2m)?;
            let ent = g.scale(logp, alpha);
            let diff = g.sub(ent, qmin)?;
            let loss = g.mean(diff);
            let grads = g.backward(loss)?.params(&g);
            let mean_logp = g.value(logp).data.iter().sum::<f64>() / n as f64;
            let value = g.value(loss).item();
            self.actor_opt.step(&mut self.params, &grads)?;
            (value, mean_logp)
        };

        // d/d(log α) of -log α · (log π + target entropy), batch mean.
        let mut ga = Gradients::new();
        ga.0.insert("log_alpha".into(), vec![-(mean_logp + self.config.target_entropy)]);
        self.alpha_opt.step(&mut self.params, &ga)?;

        self.soft_update(self.config.tau)?;
        self.updates += 1;
        Ok(Some(UpdateStats { critic_loss, actor_loss, alpha: self.alpha(), entropy: -mean_logp }))
    }

    /// Stores `(s_prev, λ_prev, r_t, s_t, terminal)` when a previous action
    /// exists, runs the configured number of updates, and samples the next λ.
    pub fn agent_step(&mut self, state: &[f64], reward: f64, terminal: bool) -> Result<f64> {
        if state.len() != self.state_dim {
            return Err(Error::shape(format!("state of length {}, expected {}", state.len(), self.state_dim)));
        }
        if let Some((prev_state, raw, action)) = self.previous.take() {
            self.buffer.store(Transition {
                state: prev_state,
                raw_action: raw,
                action,
                reward,
                next_state: state.to_vec(),
                terminal,
            });
            for _ in 0..self.config.updates_per_step {
                self.update()?;
            }
        }
        let (raw, lambda) = self.sample_action(state, true)?;
        self.previous = Some((state.to_vec(), raw, lambda));
        Ok(lambda)
    }
}

impl LambdaPolicy for SacAgent {
    fn next_lambda(&mut self, state: &[f64], reward: f64, terminal: bool) -> Result<f64> {
        self.agent_step(state, reward, terminal)
    }
}
