//! Backward neural dynamic programming for discrete-time control: NNContPI
//! (performance iteration with frozen later policies) and Hybrid-Now
//! (one-step optimization against a learned continuation value).
//!
//! Gradients with respect to the policy parameters flow through the
//! simulated dynamics by an adjoint pass over each rollout.

use std::time::Instant;

use serde::Serialize;

use crate::nn::{Activation, FeedforwardNet, ForwardCache};
use crate::problems::ControlProblem;
use crate::sim::{path_rng, stream_key};
use crate::train::{at_step, mean_var, minimize, reduce_gradient, reduce_mean, ParamSet, Scheme, TrainConfig, TrainError};

const INIT: u64 = 0xC047;
const VALUE_PHASE: u64 = 1;
const EVAL: u64 = 0xE7A1;

/// Feedback policy `x ↦ a`, squashed into the control box when there is one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Policy {
    pub net: FeedforwardNet,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Policy {
    /// Writes the control and, in `dsq`, the derivative of the squashing map.
    fn act(&self, x: &[f64], cache: &mut ForwardCache, a: &mut [f64], dsq: &mut [f64]) {
        let o = self.net.forward(x, cache);
        match &self.bounds {
            None => {
                a.copy_from_slice(o);
                dsq.iter_mut().for_each(|d| *d = 1.0);
            }
            Some((lo, hi)) => {
                for k in 0..a.len() {
                    let th = o[k].tanh();
                    let half = 0.5 * (hi[k] - lo[k]);
                    a[k] = lo[k] + half * (th + 1.0);
                    dsq[k] = half * (1.0 - th * th);
                }
            }
        }
    }

    pub fn control(&self, x: &[f64]) -> Result<Vec<f64>, TrainError> {
        let mut cache = ForwardCache::new(&self.net);
        let q = self.net.output_dim();
        let (mut a, mut d) = (vec![0.0; q], vec![0.0; q]);
        if x.len() != self.net.input_dim() {
            return Err(TrainError::Config("state dimension mismatch".into()));
        }
        self.act(x, &mut cache, &mut a, &mut d);
        Ok(a)
    }
}

/// Learned policies, Hybrid-Now value networks (`V̂_T = g` is implicit)
/// and the Monte-Carlo cost of the policies from `x₀`.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyValuePair {
    pub scheme: Scheme,
    pub policies: Vec<Policy>,
    pub values: Vec<FeedforwardNet>,
    pub estimate: f64,
    pub std_error: f64,
    pub policy_losses: Vec<f64>,
    pub value_losses: Vec<f64>,
    /// Sample variance of each value-regression target.
    pub value_target_var: Vec<f64>,
    pub runtime_s: f64,
    pub seed: u64,
}

struct Ctx<'a> {
    problem: &'a dyn ControlProblem,
    cfg: &'a TrainConfig,
    scheme: Scheme,
    act: Activation,
    d: usize,
    q: usize,
    m: usize,
    horizon: usize,
}

impl<'a> Ctx<'a> {
    fn new(problem: &'a dyn ControlProblem, cfg: &'a TrainConfig, scheme: Scheme) -> Result<Self, TrainError> {
        cfg.validate()?;
        if problem.horizon() == 0 {
            return Err(TrainError::Config("control horizon must be at least one step".into()));
        }
        if let Some((lo, hi)) = problem.control_bounds() {
            if lo.len() != problem.control_dim() || hi.len() != problem.control_dim() || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(TrainError::Config("control bounds must satisfy lo < hi per coordinate".into()));
            }
        }
        Ok(Self {
            problem,
            cfg,
            scheme,
            act: cfg.activation.unwrap_or(Activation::Tanh),
            d: problem.state_dim(),
            q: problem.control_dim(),
            m: problem.noise_dim(),
            horizon: problem.horizon(),
        })
    }

    fn budget(&self, t: usize) -> usize {
        if t + 1 == self.horizon {
            self.cfg.first_step_iters
        } else {
            self.cfg.iters_per_step
        }
    }

    fn fresh(&self, out: usize, t: usize, which: u64) -> Result<FeedforwardNet, TrainError> {
        self.cfg.fresh_net(self.d, out, self.act, &[self.scheme.tag(), INIT, t as u64, which])
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.problem.control_bounds().map(|(l, h)| (l.to_vec(), h.to_vec()))
    }

    fn key(&self, t: usize, phase: u64, it: usize) -> u64 {
        self.cfg.batch_key(&[self.scheme.tag(), t as u64, phase], it)
    }

    /// Training state `X_t` and noises `ε_{t+1..T}` of sample `b`.
    fn draw(&self, t: usize, key: u64, b: usize, x: &mut [f64], eps: &mut [f64]) {
        let mut rng = path_rng(key, b as u64);
        self.problem.sample_training_state(t, &mut rng, x);
        for e in eps.chunks_exact_mut(self.m) {
            self.problem.sample_noise(&mut rng, e);
        }
    }
}

struct Scratch {
    caches: Vec<ForwardCache>,
    vcache: Option<ForwardCache>,
    xs: Vec<f64>,
    acts: Vec<f64>,
    dsq: Vec<f64>,
    eps: Vec<f64>,
    jx: Vec<f64>,
    ja: Vec<f64>,
    jpi: Vec<f64>,
    gx: Vec<f64>,
    ga: Vec<f64>,
    lam: Vec<f64>,
    next: Vec<f64>,
    mu: Vec<f64>,
}

impl Scratch {
    fn new(ctx: &Ctx, policy: &FeedforwardNet, value: Option<&FeedforwardNet>) -> Self {
        let (d, q, t) = (ctx.d, ctx.q, ctx.horizon);
        Self {
            caches: (0..t).map(|_| ForwardCache::new(policy)).collect(),
            vcache: value.map(ForwardCache::new),
            xs: vec![0.0; (t + 1) * d],
            acts: vec![0.0; t * q],
            dsq: vec![0.0; t * q],
            eps: vec![0.0; t * ctx.m],
            jx: vec![0.0; d * d],
            ja: vec![0.0; d * q],
            jpi: vec![0.0; q * d],
            gx: vec![0.0; d],
            ga: vec![0.0; q],
            lam: vec![0.0; d],
            next: vec![0.0; d],
            mu: vec![0.0; q],
        }
    }
}

/// Rolls out from `xs[t]` with `first` at step `t` and `later[s − t − 1]` afterwards,
/// returning the cost-to-go. Noises are read from `s.eps[(s − t)·m ..]`.
fn rollout(ctx: &Ctx, t: usize, first: &Policy, later: &[&Policy], s: &mut Scratch) -> f64 {
    let (d, q, m) = (ctx.d, ctx.q, ctx.m);
    let mut cost = 0.0;
    for step in t..ctx.horizon {
        let pol = if step == t { first } else { later[step - t - 1] };
        let (xs_lo, xs_hi) = s.xs.split_at_mut((step + 1) * d);
        let x = &xs_lo[step * d..];
        let a = &mut s.acts[step * q..(step + 1) * q];
        pol.act(x, &mut s.caches[step], a, &mut s.dsq[step * q..(step + 1) * q]);
        cost += ctx.problem.running_cost(x, a);
        let e = &s.eps[(step - t) * m..(step - t + 1) * m];
        ctx.problem.dynamics(x, a, e, &mut xs_hi[..d]);
    }
    cost + ctx.problem.terminal_cost(&s.xs[ctx.horizon * d..])
}

/// `∂cost/∂a_t` for a rollout stored in `s`, into `s.mu`.
fn adjoint(ctx: &Ctx, t: usize, later: &[&Policy], s: &mut Scratch) {
    let (d, q, m, n) = (ctx.d, ctx.q, ctx.m, ctx.horizon);
    ctx.problem.terminal_cost_grad(&s.xs[n * d..], &mut s.lam);
    for step in (t..n).rev() {
        let x = &s.xs[step * d..(step + 1) * d];
        let a = &s.acts[step * q..(step + 1) * q];
        let e = &s.eps[(step - t) * m..(step - t + 1) * m];
        ctx.problem.running_cost_grad(x, a, &mut s.gx, &mut s.ga);
        ctx.problem.dynamics_jacobians(x, a, e, &mut s.jx, &mut s.ja);
        // μ = ∂f/∂a + J_aᵀ λ
        for k in 0..q {
            s.mu[k] = s.ga[k] + (0..d).map(|r| s.ja[r * q + k] * s.lam[r]).sum::<f64>();
        }
        if step == t {
            break;
        }
        // λ ← ∂f/∂x + J_xᵀ λ + Dπᵀ μ
        let pol = later[step - t - 1];
        pol.net.jacobian_from_cache(&mut s.caches[step], &mut s.jpi);
        for c in 0..d {
            let mut v = s.gx[c] + (0..d).map(|r| s.jx[r * d + c] * s.lam[r]).sum::<f64>();
            for k in 0..q {
                v += s.dsq[step * q + k] * s.jpi[k * d + c] * s.mu[k];
            }
            s.next[c] = v;
        }
        s.lam.copy_from_slice(&s.next);
    }
}

/// NNContPI: at each step `t = T−1..0` minimize the simulated cost-to-go of
/// the candidate policy at `t` followed by the learned policies.
pub fn train_nncontpi(problem: &dyn ControlProblem, cfg: &TrainConfig) -> Result<PolicyValuePair, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::new(problem, cfg, Scheme::NnContPi)?;
    let n = ctx.horizon;
    let mut policies: Vec<Option<Policy>> = vec![None; n];
    let mut losses = vec![f64::NAN; n];
    for t in (0..n).rev() {
        let init = match &policies.get(t + 1).cloned().flatten() {
            Some(p) => p.net.clone(),
            None => ctx.fresh(ctx.q, t, 0)?,
        };
        let later: Vec<Policy> = policies[t + 1..].iter().map(|p| p.clone().expect("trained")).collect();
        let later: Vec<&Policy> = later.iter().collect();
        let bounds = ctx.bounds();
        let mut set = ParamSet::of_nets(vec![init]);
        losses[t] = minimize(&mut set, ctx.budget(t), cfg, |set, it, grad| {
            let key = ctx.key(t, 0, it);
            let pol = Policy {
                net: set.nets[0].clone(),
                bounds: bounds.clone(),
            };
            let (loss, g) = reduce_gradient(cfg.batch_size, set.len(), || Scratch::new(&ctx, &pol.net, None), |s, b, gout| {
                let (d, q) = (ctx.d, ctx.q);
                ctx.draw(t, key, b, &mut s.xs[t * d..(t + 1) * d], &mut s.eps[..(n - t) * ctx.m]);
                let cost = rollout(&ctx, t, &pol, &later, s);
                adjoint(&ctx, t, &later, s);
                for k in 0..q {
                    s.mu[k] *= s.dsq[t * q + k];
                }
                pol.net.backward(&mut s.caches[t], &s.mu, Some(gout), None);
                cost
            });
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step(ctx.scheme.id(), t))?;
        policies[t] = Some(Policy {
            net: set.nets.pop().unwrap(),
            bounds,
        });
    }
    let policies: Vec<Policy> = policies.into_iter().map(|p| p.expect("trained")).collect();
    let (estimate, std_error) = evaluate_policy(problem, &policies, cfg.batch_size.max(1) * 100, stream_key(cfg.seed, &[EVAL]))?;
    Ok(PolicyValuePair {
        scheme: ctx.scheme,
        policies,
        values: Vec::new(),
        estimate,
        std_error,
        policy_losses: losses,
        value_losses: Vec::new(),
        value_target_var: Vec::new(),
        runtime_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}

/// `V̂_{t+1}(x)` and its gradient; `g` at the horizon.
fn continuation(ctx: &Ctx, t: usize, values: &[Option<FeedforwardNet>], x: &[f64], cache: &mut Option<ForwardCache>, grad: Option<&mut [f64]>) -> f64 {
    if t + 1 == ctx.horizon {
        if let Some(g) = grad {
            ctx.problem.terminal_cost_grad(x, g);
        }
        return ctx.problem.terminal_cost(x);
    }
    let net = values[t + 1].as_ref().expect("trained");
    let cache = cache.get_or_insert_with(|| ForwardCache::new(net));
    let v = net.forward(x, cache)[0];
    if let Some(g) = grad {
        net.backward(cache, &[1.0], None, Some(g));
    }
    v
}

/// Hybrid-Now: at each step learn the policy against `f + V̂_{t+1}(X_{t+1})`,
/// then regress `V̂_t` onto that one-step target under the learned policy.
pub fn train_hybrid_now(problem: &dyn ControlProblem, cfg: &TrainConfig) -> Result<PolicyValuePair, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::new(problem, cfg, Scheme::HybridNow)?;
    let (n, d, q, m) = (ctx.horizon, ctx.d, ctx.q, ctx.m);
    let mut policies: Vec<Option<Policy>> = vec![None; n];
    let mut values: Vec<Option<FeedforwardNet>> = vec![None; n];
    let mut policy_losses = vec![f64::NAN; n];
    let mut value_losses = vec![f64::NAN; n];
    let mut target_var = vec![f64::NAN; n];
    let bounds = ctx.bounds();

    // Writes X_{t+1} for sample b into s.xs and returns the one-step target pieces.
    let step = |pol: &Policy, values: &[Option<FeedforwardNet>], t: usize, key: u64, b: usize, s: &mut Scratch, want_grad: bool| -> f64 {
        ctx.draw(t, key, b, &mut s.xs[..d], &mut s.eps[..m]);
        let (x, rest) = s.xs.split_at_mut(d);
        pol.act(x, &mut s.caches[0], &mut s.acts[..q], &mut s.dsq[..q]);
        let a = &s.acts[..q];
        let f = ctx.problem.running_cost(x, a);
        ctx.problem.dynamics(x, a, &s.eps[..m], &mut rest[..d]);
        let xn = &rest[..d];
        let v = if want_grad {
            let v = continuation(&ctx, t, values, xn, &mut s.vcache, Some(&mut s.lam));
            ctx.problem.running_cost_grad(x, a, &mut s.gx, &mut s.ga);
            ctx.problem.dynamics_jacobians(x, a, &s.eps[..m], &mut s.jx, &mut s.ja);
            for k in 0..q {
                s.mu[k] = (s.ga[k] + (0..d).map(|r| s.ja[r * q + k] * s.lam[r]).sum::<f64>()) * s.dsq[k];
            }
            v
        } else {
            continuation(&ctx, t, values, xn, &mut s.vcache, None)
        };
        f + v
    };

    for t in (0..n).rev() {
        let init = match policies.get(t + 1).and_then(Option::as_ref) {
            Some(p) => p.net.clone(),
            None => ctx.fresh(q, t, 0)?,
        };
        let mut set = ParamSet::of_nets(vec![init]);
        policy_losses[t] = minimize(&mut set, ctx.budget(t), cfg, |set, it, grad| {
            let key = ctx.key(t, 0, it);
            let pol = Policy {
                net: set.nets[0].clone(),
                bounds: bounds.clone(),
            };
            let (loss, g) = reduce_gradient(cfg.batch_size, set.len(), || Scratch::new(&ctx, &pol.net, None), |s, b, gout| {
                let c = step(&pol, &values, t, key, b, s, true);
                pol.net.backward(&mut s.caches[0], &s.mu, Some(gout), None);
                c
            });
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step(ctx.scheme.id(), t))?;
        let pol = Policy {
            net: set.nets.pop().unwrap(),
            bounds: bounds.clone(),
        };

        let vinit = match values.get(t + 1).and_then(Option::as_ref) {
            Some(v) => v.clone(),
            None => ctx.fresh(1, t, 1)?,
        };
        let mut vset = ParamSet::of_nets(vec![vinit]);
        value_losses[t] = minimize(&mut vset, ctx.budget(t), cfg, |vset, it, grad| {
            let key = ctx.key(t, VALUE_PHASE, it);
            let vn = &vset.nets[0];
            let (loss, g) = reduce_gradient(cfg.batch_size, vset.len(), || (Scratch::new(&ctx, &pol.net, None), ForwardCache::new(vn)), |(s, vc), b, gout| {
                let target = step(&pol, &values, t, key, b, s, false);
                let r = vn.forward(&s.xs[..d], vc)[0] - target;
                vn.backward(vc, &[2.0 * r], Some(gout), None);
                r * r
            });
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step("value", t))?;
        let key = ctx.key(t, VALUE_PHASE, usize::MAX);
        let targets: Vec<f64> = {
            let mut s = Scratch::new(&ctx, &pol.net, None);
            (0..cfg.batch_size).map(|b| step(&pol, &values, t, key, b, &mut s, false)).collect()
        };
        target_var[t] = mean_var(&targets).1;
        values[t] = vset.nets.pop();
        policies[t] = Some(pol);
    }
    let policies: Vec<Policy> = policies.into_iter().map(|p| p.expect("trained")).collect();
    let (estimate, std_error) = evaluate_policy(problem, &policies, cfg.batch_size.max(1) * 100, stream_key(cfg.seed, &[EVAL]))?;
    Ok(PolicyValuePair {
        scheme: ctx.scheme,
        policies,
        values: values.into_iter().flatten().collect(),
        estimate,
        std_error,
        policy_losses,
        value_losses,
        value_target_var: target_var,
        runtime_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}

/// Monte-Carlo cost `Σ_t f(X_t, π_t(X_t)) + g(X_T)` from `x₀` over `rollouts`
/// paths, as `(mean, standard error)`.
pub fn evaluate_policy(problem: &dyn ControlProblem, policies: &[Policy], rollouts: usize, key: u64) -> Result<(f64, f64), TrainError> {
    let n = problem.horizon();
    if policies.len() != n {
        return Err(TrainError::Config(format!("expected {n} policies, got {}", policies.len())));
    }
    if rollouts == 0 {
        return Err(TrainError::Config("need at least one rollout".into()));
    }
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, &cfg, Scheme::NnContPi)?;
    let refs: Vec<&Policy> = policies.iter().skip(1).collect();
    let cost = |s: &mut Scratch, b: usize| {
        let mut rng = path_rng(key, b as u64);
        s.xs[..ctx.d].copy_from_slice(problem.x0());
        for e in s.eps.chunks_exact_mut(ctx.m) {
            problem.sample_noise(&mut rng, e);
        }
        rollout(&ctx, 0, &policies[0], &refs, s)
    };
    let mean = reduce_mean(rollouts, || Scratch::new(&ctx, &policies[0].net, None), cost);
    let second = reduce_mean(rollouts, || Scratch::new(&ctx, &policies[0].net, None), |s, b| {
        let c = cost(s, b);
        (c - mean) * (c - mean)
    });
    if !mean.is_finite() {
        return Err(TrainError::Divergence {
            stage: "evaluation".into(),
            step: 0,
            iteration: 0,
        });
    }
    let var = if rollouts > 1 { second * rollouts as f64 / (rollouts - 1) as f64 } else { 0.0 };
    Ok((mean, (var / rollouts as f64).sqrt()))
}

pub fn solve(problem: &dyn ControlProblem, scheme: Scheme, cfg: &TrainConfig) -> Result<PolicyValuePair, TrainError> {
    match scheme {
        Scheme::NnContPi => train_nncontpi(problem, cfg),
        Scheme::HybridNow => train_hybrid_now(problem, cfg),
        other => Err(TrainError::Config(format!("`{other}` is not a control scheme"))),
    }
}
