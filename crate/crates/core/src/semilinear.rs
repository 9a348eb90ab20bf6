//! Schemes for semilinear PDEs, `Z = σᵀDu`: the global Deep BSDE solver,
//! the local DBDP1/DBDP2 schemes, the regression variant, Deep Splitting and
//! the multistep MDBDP scheme.
//!
//! All local schemes run backward over the fine grid. Step `i` is trained on
//! fresh Euler paths each iteration, warm-started from step `i + 1`.

use std::time::Instant;

use crate::nn::{Activation, FeedforwardNet, ForwardCache, TangentCache};
use crate::problems::{Driver, PdeProblem, SemilinearDriver};
use crate::sim::{mat_t_vec, mat_vec, simulate_paths, simulate_prefix, PathBatch, TimeGrid};
use crate::train::{
    at_step, minimize, pilot_normalization, reduce_gradient, reduce_mean, ParamSet, Scheme, SchemeResult, TrainConfig,
    TrainError,
};

const INIT: u64 = 0x1417;
const Z_PHASE: u64 = 1;
const U_PHASE: u64 = 2;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn driver_of(problem: &PdeProblem) -> Result<&dyn SemilinearDriver, TrainError> {
    match &problem.driver {
        Driver::Semilinear(f) => Ok(f.as_ref()),
        Driver::FullyNonlinear(_) => Err(TrainError::Config(format!(
            "problem `{}` has a fully nonlinear driver; use a second-order scheme",
            problem.id
        ))),
    }
}

fn check_grid(problem: &PdeProblem, grid: &TimeGrid) -> Result<(), TrainError> {
    if (grid.maturity() - problem.maturity).abs() > 1e-12 * problem.maturity.max(1.0) {
        return Err(TrainError::Config(format!(
            "grid maturity {} differs from the problem maturity {}",
            grid.maturity(),
            problem.maturity
        )));
    }
    Ok(())
}

/// Per-thread buffers for one sample.
pub(crate) struct Scratch {
    pub uc: ForwardCache,
    pub zc: ForwardCache,
    pub tc: TangentCache,
    pub z: Vec<f64>,
    pub dz: Vec<f64>,
    pub gz: Vec<f64>,
    pub sig: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl Scratch {
    pub fn new(u_like: &FeedforwardNet, z_like: &FeedforwardNet) -> Self {
        let d = u_like.input_dim();
        Self {
            uc: ForwardCache::new(u_like),
            zc: ForwardCache::new(z_like),
            tc: TangentCache::new(u_like),
            z: vec![0.0; d],
            dz: vec![0.0; d],
            gz: vec![0.0; d],
            sig: vec![0.0; d * d],
            v: vec![0.0; d],
            w: vec![0.0; d],
        }
    }
}

/// Shared read-only context of a training run.
struct Ctx<'a> {
    problem: &'a PdeProblem,
    grid: &'a TimeGrid,
    f: &'a dyn SemilinearDriver,
    d: usize,
    act: Activation,
    cfg: &'a TrainConfig,
    scheme: Scheme,
    norm: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    fn new(problem: &'a PdeProblem, grid: &'a TimeGrid, cfg: &'a TrainConfig, scheme: Scheme) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_grid(problem, grid)?;
        Ok(Self {
            problem,
            grid,
            f: driver_of(problem)?,
            d: problem.dim,
            act: cfg.activation.unwrap_or(problem.activation),
            cfg,
            scheme,
            norm: None,
        })
    }

    fn for_training(problem: &'a PdeProblem, grid: &'a TimeGrid, cfg: &'a TrainConfig, scheme: Scheme) -> Result<Self, TrainError> {
        let mut ctx = Self::new(problem, grid, cfg, scheme)?;
        ctx.norm = Some(pilot_normalization(grid, &problem.x0, problem.dynamics.as_ref(), cfg)?);
        Ok(ctx)
    }

    fn budget(&self, i: usize) -> usize {
        if i + 1 == self.grid.steps() {
            self.cfg.first_step_iters
        } else {
            self.cfg.iters_per_step
        }
    }

    fn fresh(&self, out: usize, i: usize, which: u64) -> Result<FeedforwardNet, TrainError> {
        let mut net = self
            .cfg
            .fresh_net(self.d, out, self.act, &[self.scheme.tag(), INIT, i as u64, which])?;
        if let Some((c, s)) = &self.norm {
            net.set_input_normalization(c, s)?;
        }
        Ok(net)
    }

    fn paths(&self, steps: usize, key: u64) -> Result<PathBatch, TrainError> {
        Ok(simulate_prefix(
            self.grid,
            steps,
            &self.problem.x0,
            self.problem.dynamics.as_ref(),
            self.cfg.batch_size,
            key,
        )?)
    }

    fn key(&self, i: usize, phase: u64, it: usize) -> u64 {
        self.cfg.batch_key(&[self.scheme.tag(), i as u64, phase], it)
    }

    /// `Û_{i+1}(x)`, with `Û_N = g`.
    fn next_value(&self, next: Option<&FeedforwardNet>, x: &[f64], cache: &mut ForwardCache) -> f64 {
        match next {
            Some(n) => n.forward(x, cache)[0],
            None => self.problem.terminal.value(x),
        }
    }
}

/// Residual `target − U − fΔt − Z·ΔW` and its sensitivities, with `Z = s.z`
/// already set. Writes `∂r²/∂Z` into `s.gz` and returns `(r², ∂r²/∂U)`.
fn local_residual(ctx: &Ctx, i: usize, x: &[f64], dw: &[f64], u: f64, target: f64, s: &mut Scratch) -> (f64, f64) {
    let dt = ctx.grid.dt();
    let (fv, fy) = ctx.f.eval(ctx.grid.time(i), x, u, &s.z, &mut s.dz);
    let r = target - u - fv * dt - dot(&s.z, dw);
    for k in 0..ctx.d {
        s.gz[k] = 2.0 * r * (-s.dz[k] * dt - dw[k]);
    }
    (r * r, 2.0 * r * (-1.0 - fy * dt))
}

/// One sample of the DBDP1/MDBDP loss with separate value and gradient
/// networks. Adds parameter gradients when `grads` is given.
fn two_net_sample(
    ctx: &Ctx,
    i: usize,
    nets: (&FeedforwardNet, &FeedforwardNet),
    x: &[f64],
    dw: &[f64],
    target: f64,
    s: &mut Scratch,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let (un, zn) = nets;
    let u = un.forward(x, &mut s.uc)[0];
    let zv = zn.forward(x, &mut s.zc);
    s.z.copy_from_slice(zv);
    let (loss, gu) = local_residual(ctx, i, x, dw, u, target, s);
    if let Some((gu_out, gz_out)) = grads {
        un.backward(&mut s.uc, &[gu], Some(gu_out), None);
        zn.backward(&mut s.zc, &s.gz, Some(gz_out), None);
    }
    loss
}

/// One sample of the DBDP2 loss, `Z = σᵀ∇U`.
fn gradient_net_sample(
    ctx: &Ctx,
    i: usize,
    un: &FeedforwardNet,
    x: &[f64],
    dw: &[f64],
    target: f64,
    s: &mut Scratch,
    grad: Option<&mut [f64]>,
) -> f64 {
    let u = un.forward(x, &mut s.uc)[0];
    un.backward(&mut s.uc, &[1.0], None, Some(&mut s.v));
    ctx.problem.dynamics.diffusion(ctx.grid.time(i), x, &mut s.sig);
    mat_t_vec(&s.sig, &s.v, &mut s.z);
    let (loss, gu) = local_residual(ctx, i, x, dw, u, target, s);
    if let Some(g) = grad {
        // ∂L/∂(∇U) = σ ∂L/∂Z
        mat_vec(&s.sig, &s.gz, &mut s.w);
        un.forward_tangent(x, &s.w, &mut s.tc);
        un.backward_tangent(&mut s.tc, &[gu], &[1.0], g);
    }
    loss
}

/// `g(X_N) − Σ_{j>i} [f(t_j, X_j, Û_j, Ẑ_j)Δt + Ẑ_j·ΔW_j]` along path `b`.
/// `later[k]` holds `(Û_j, Ẑ_j)` for `j = i + 1 + k`.
fn multistep_target(ctx: &Ctx, i: usize, later: &[(FeedforwardNet, FeedforwardNet)], paths: &PathBatch, b: usize, s: &mut Scratch) -> f64 {
    let n = ctx.grid.steps();
    let dt = ctx.grid.dt();
    let mut tgt = ctx.problem.terminal.value(paths.state(b, n));
    for (k, (un, zn)) in later.iter().enumerate() {
        let j = i + 1 + k;
        let x = paths.state(b, j);
        let u = un.forward(x, &mut s.uc)[0];
        s.z.copy_from_slice(zn.forward(x, &mut s.zc));
        let fv = ctx.f.eval(ctx.grid.time(j), x, u, &s.z, &mut s.dz).0;
        tgt -= fv * dt + dot(&s.z, paths.increment(b, j));
    }
    tgt
}

fn result(scheme: Scheme, estimate: f64, step_losses: Vec<f64>, start: Instant, cfg: &TrainConfig) -> SchemeResult {
    SchemeResult {
        scheme,
        estimate_y0: estimate,
        step_losses,
        gamma_losses: Vec::new(),
        runtime_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        value_nets: Vec::new(),
        z_nets: Vec::new(),
        z0: None,
        gamma_nets: Vec::new(),
    }
}

fn finite_estimate(v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Divergence {
            stage: "evaluation".into(),
            step: 0,
            iteration: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// Global scheme

/// Deep BSDE: trains `Y₀`, a constant `Z₀` and `𝒵_1..𝒵_{N−1}` jointly by
/// propagating `Y_{i+1} = Y_i + f Δt + Z_i·ΔW_i` forward and minimizing
/// `E|Y_N − g(X_N)|²`. The iteration budget equals the total of the local
/// schemes, `first_step_iters + (N−1)·iters_per_step`.
pub fn train_deep_bsde(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, Scheme::DeepBsde)?;
    let (n, d, dt) = (grid.steps(), ctx.d, grid.dt());
    let budget = cfg.first_step_iters + (n - 1) * cfg.iters_per_step;

    // Y₀ starts at the Monte-Carlo mean of the payoff.
    let pilot = simulate_paths(grid, &problem.x0, problem.dynamics.as_ref(), cfg.batch_size, ctx.key(n, INIT, 0))?;
    let y0 = (0..cfg.batch_size)
        .map(|b| problem.terminal.value(pilot.state(b, n)))
        .sum::<f64>()
        / cfg.batch_size as f64;
    let mut scalars = vec![y0];
    scalars.extend(std::iter::repeat(0.0).take(d));
    let nets = (1..n).map(|i| ctx.fresh(d, i, 1)).collect::<Result<Vec<_>, _>>()?;
    let mut set = ParamSet { scalars, nets };
    let template_z = ctx.fresh(d, 0, 1)?;
    let template_u = ctx.fresh(1, 0, 0)?;

    let loss = minimize(&mut set, budget, cfg, |set, it, grad| {
        let paths = ctx.paths(n, ctx.key(0, 0, it))?;
        let offs = set.offsets();
        let (loss, g) = reduce_gradient(
            cfg.batch_size,
            set.len(),
            || (Scratch::new(&template_u, &template_z), vec![0.0; n], vec![0.0; n * d]),
            |(s, fys, gzs), b, gout| {
                let mut y = set.scalars[0];
                for i in 0..n {
                    let x = paths.state(b, i);
                    if i == 0 {
                        s.z.copy_from_slice(&set.scalars[1..]);
                    } else {
                        s.z.copy_from_slice(set.nets[i - 1].forward(x, &mut s.zc));
                    }
                    let dw = paths.increment(b, i);
                    let (fv, fy) = ctx.f.eval(grid.time(i), x, y, &s.z, &mut s.dz);
                    fys[i] = fy;
                    for k in 0..d {
                        gzs[i * d + k] = s.dz[k] * dt + dw[k];
                    }
                    y += fv * dt + dot(&s.z, dw);
                }
                let r = y - problem.terminal.value(paths.state(b, n));
                let mut adj = 2.0 * r;
                for i in (0..n).rev() {
                    for k in 0..d {
                        s.gz[k] = adj * gzs[i * d + k];
                    }
                    if i == 0 {
                        for k in 0..d {
                            gout[1 + k] += s.gz[k];
                        }
                    } else {
                        let net = &set.nets[i - 1];
                        net.forward(paths.state(b, i), &mut s.zc);
                        let o = offs[i - 1];
                        net.backward(&mut s.zc, &s.gz, Some(&mut gout[o..o + net.num_params()]), None);
                    }
                    adj *= 1.0 + fys[i] * dt;
                }
                gout[0] += adj;
                r * r
            },
        );
        grad.copy_from_slice(&g);
        Ok(loss)
    })
    .map_err(at_step("deep_bsde", 0))?;

    let mut out = result(Scheme::DeepBsde, finite_estimate(set.scalars[0])?, vec![loss], start, cfg);
    out.z0 = Some(set.scalars[1..].to_vec());
    out.z_nets = set.nets;
    out.runtime_s = start.elapsed().as_secs_f64();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Local schemes

/// DBDP1: at each step fits `(𝒰_i, 𝒵_i)` to
/// `E|Û_{i+1}(X_{i+1}) − 𝒰_i − f(t_i, X_i, 𝒰_i, 𝒵_i)Δt − 𝒵_i·ΔW_i|²`.
pub fn train_dbdp1(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_two_net(problem, grid, cfg, Scheme::Dbdp1)
}

/// MDBDP: DBDP1 with the one-step target replaced by the multistep target
/// built from the frozen later networks.
pub fn train_mdbdp(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_two_net(problem, grid, cfg, Scheme::Mdbdp)
}

fn train_two_net(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig, scheme: Scheme) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, scheme)?;
    let (n, d) = (grid.steps(), ctx.d);
    let multistep = scheme == Scheme::Mdbdp;
    // trained[k] = (Û_j, Ẑ_j) for j = i + 1 + k once step i is reached
    let mut trained: Vec<(FeedforwardNet, FeedforwardNet)> = Vec::with_capacity(n);
    let mut losses = vec![f64::NAN; n];
    for i in (0..n).rev() {
        let (u0, z0) = match trained.first() {
            Some((u, z)) => (u.clone(), z.clone()),
            None => (ctx.fresh(1, i, 0)?, ctx.fresh(d, i, 1)?),
        };
        let mut set = ParamSet::of_nets(vec![u0, z0]);
        let later = &trained;
        let steps = if multistep { n } else { i + 1 };
        losses[i] = minimize(&mut set, ctx.budget(i), cfg, |set, it, grad| {
            let paths = ctx.paths(steps, ctx.key(i, 0, it))?;
            let (un, zn) = (&set.nets[0], &set.nets[1]);
            let split = un.num_params();
            let (loss, g) = reduce_gradient(cfg.batch_size, set.len(), || Scratch::new(un, zn), |s, b, gout| {
                let target = if multistep {
                    multistep_target(&ctx, i, later, &paths, b, s)
                } else {
                    let next = later.first().map(|p| &p.0);
                    ctx.next_value(next, paths.state(b, i + 1), &mut s.uc)
                };
                let (gu, gz) = gout.split_at_mut(split);
                two_net_sample(&ctx, i, (un, zn), paths.state(b, i), paths.increment(b, i), target, s, Some((gu, gz)))
            });
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step(scheme.id(), i))?;
        let mut nets = set.nets.into_iter();
        let (u, z) = (nets.next().unwrap(), nets.next().unwrap());
        trained.insert(0, (u, z));
    }
    let estimate = finite_estimate(trained[0].0.eval(&problem.x0)?[0])?;
    let mut out = result(scheme, estimate, losses, start, cfg);
    let (us, zs): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    out.value_nets = us;
    out.z_nets = zs;
    out.runtime_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// DBDP2: one network per step, `Z` obtained as `σᵀ∇𝒰_i` by differentiating the network.
pub fn train_dbdp2(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, Scheme::Dbdp2)?;
    let n = grid.steps();
    let mut trained: Vec<FeedforwardNet> = Vec::with_capacity(n);
    let mut losses = vec![f64::NAN; n];
    let z_like = ctx.fresh(ctx.d, 0, 1)?;
    for i in (0..n).rev() {
        let u0 = match trained.first() {
            Some(u) => u.clone(),
            None => ctx.fresh(1, i, 0)?,
        };
        let mut set = ParamSet::of_nets(vec![u0]);
        let next = trained.first();
        losses[i] = minimize(&mut set, ctx.budget(i), cfg, |set, it, grad| {
            let paths = ctx.paths(i + 1, ctx.key(i, 0, it))?;
            let un = &set.nets[0];
            let (loss, g) = reduce_gradient(
                cfg.batch_size,
                set.len(),
                || (Scratch::new(un, &z_like), ForwardCache::new(un)),
                |(s, vc), b, gout| {
                    let target = ctx.next_value(next, paths.state(b, i + 1), vc);
                    gradient_net_sample(&ctx, i, un, paths.state(b, i), paths.increment(b, i), target, s, Some(gout))
                },
            );
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step("dbdp2", i))?;
        trained.insert(0, set.nets.pop().unwrap());
    }
    let estimate = finite_estimate(trained[0].eval(&problem.x0)?[0])?;
    let mut out = result(Scheme::Dbdp2, estimate, losses, start, cfg);
    out.value_nets = trained;
    out.runtime_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Regression variant: first `𝒵_i` is fitted to `ΔW_i/Δt · Û_{i+1}(X_{i+1})`,
/// then `𝒰_i` to `Û_{i+1}(X_{i+1}) − f(t_i, X_i, 𝒰_i, Ẑ_i)Δt`.
pub fn train_regression_scheme(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_value_regression(problem, grid, cfg, Scheme::Regression)
}

/// Deep Splitting: `Ẑ_i = σᵀ(t_i, X_i) ∇Û_{i+1}(X_i)` (using `Dg` at the last
/// step), then `𝒰_i` fitted by the same regression as the regression variant.
pub fn train_deep_splitting(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_value_regression(problem, grid, cfg, Scheme::DeepSplitting)
}

fn train_value_regression(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig, scheme: Scheme) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, scheme)?;
    let (n, d, dt) = (grid.steps(), ctx.d, grid.dt());
    if scheme == Scheme::DeepSplitting && !problem.terminal.gradient(&problem.x0, &mut vec![0.0; d]) {
        return Err(TrainError::Config("deep splitting needs the terminal gradient Dg".into()));
    }
    let mut values: Vec<FeedforwardNet> = Vec::with_capacity(n);
    let mut zs: Vec<FeedforwardNet> = Vec::new();
    let mut losses = vec![f64::NAN; n];
    let u_like = ctx.fresh(1, 0, 0)?;
    let z_like = ctx.fresh(d, 0, 1)?;
    for i in (0..n).rev() {
        let next = values.first();
        // Z estimate at step i.
        let z_net = if scheme == Scheme::Regression {
            let z0 = match zs.first() {
                Some(z) => z.clone(),
                None => ctx.fresh(d, i, 1)?,
            };
            let mut set = ParamSet::of_nets(vec![z0]);
            minimize(&mut set, ctx.budget(i), cfg, |set, it, grad| {
                let paths = ctx.paths(i + 1, ctx.key(i, Z_PHASE, it))?;
                let zn = &set.nets[0];
                let (loss, g) = reduce_gradient(cfg.batch_size, set.len(), || Scratch::new(&u_like, zn), |s, b, gout| {
                    let v = ctx.next_value(next, paths.state(b, i + 1), &mut s.uc);
                    let dw = paths.increment(b, i);
                    let zv = zn.forward(paths.state(b, i), &mut s.zc);
                    let mut loss = 0.0;
                    for k in 0..d {
                        let e = zv[k] - dw[k] / dt * v;
                        s.gz[k] = 2.0 * e;
                        loss += e * e;
                    }
                    zn.backward(&mut s.zc, &s.gz, Some(gout), None);
                    loss
                });
                grad.copy_from_slice(&g);
                Ok(loss)
            })
            .map_err(at_step("regression/z", i))?;
            Some(set.nets.pop().unwrap())
        } else {
            None
        };

        let u0 = match values.first() {
            Some(u) => u.clone(),
            None => ctx.fresh(1, i, 0)?,
        };
        let mut set = ParamSet::of_nets(vec![u0]);
        let z_ref = z_net.as_ref();
        losses[i] = minimize(&mut set, ctx.budget(i), cfg, |set, it, grad| {
            let paths = ctx.paths(i + 1, ctx.key(i, U_PHASE, it))?;
            let un = &set.nets[0];
            let (loss, g) = reduce_gradient(
                cfg.batch_size,
                set.len(),
                || (Scratch::new(un, &z_like), ForwardCache::new(un)),
                |(s, vc), b, gout| {
                    let x = paths.state(b, i);
                    let target = ctx.next_value(next, paths.state(b, i + 1), vc);
                    match (z_ref, next) {
                        (Some(zn), _) => s.z.copy_from_slice(zn.forward(x, &mut s.zc)),
                        (None, Some(nv)) => {
                            nv.forward(x, vc);
                            nv.backward(vc, &[1.0], None, Some(&mut s.v));
                            problem.dynamics.diffusion(grid.time(i), x, &mut s.sig);
                            mat_t_vec(&s.sig, &s.v, &mut s.z);
                        }
                        (None, None) => {
                            problem.terminal.gradient(x, &mut s.v);
                            problem.dynamics.diffusion(grid.time(i), x, &mut s.sig);
                            mat_t_vec(&s.sig, &s.v, &mut s.z);
                        }
                    }
                    let u = un.forward(x, &mut s.uc)[0];
                    let (fv, fy) = ctx.f.eval(grid.time(i), x, u, &s.z, &mut s.dz);
                    let r = target - u - fv * dt;
                    un.backward(&mut s.uc, &[2.0 * r * (-1.0 - fy * dt)], Some(gout), None);
                    r * r
                },
            );
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step(scheme.id(), i))?;
        values.insert(0, set.nets.pop().unwrap());
        if let Some(z) = z_net {
            zs.insert(0, z);
        }
    }
    let estimate = finite_estimate(values[0].eval(&problem.x0)?[0])?;
    let mut out = result(scheme, estimate, losses, start, cfg);
    out.value_nets = values;
    out.z_nets = zs;
    out.runtime_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Dispatches a semilinear scheme.
pub fn solve(problem: &PdeProblem, grid: &TimeGrid, scheme: Scheme, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    match scheme {
        Scheme::DeepBsde => train_deep_bsde(problem, grid, cfg),
        Scheme::Dbdp1 => train_dbdp1(problem, grid, cfg),
        Scheme::Dbdp2 => train_dbdp2(problem, grid, cfg),
        Scheme::Regression => train_regression_scheme(problem, grid, cfg),
        Scheme::DeepSplitting => train_deep_splitting(problem, grid, cfg),
        Scheme::Mdbdp => train_mdbdp(problem, grid, cfg),
        other => Err(TrainError::Config(format!("`{other}` is not a semilinear scheme"))),
    }
}

// ---------------------------------------------------------------------------
// Loss evaluation at fixed parameters

/// DBDP1 loss of `(u, z)` at step `i` on `paths`; `next` is `Û_{i+1}` (`None` means `g`).
pub fn dbdp1_loss(
    problem: &PdeProblem,
    grid: &TimeGrid,
    i: usize,
    u: &FeedforwardNet,
    z: &FeedforwardNet,
    next: Option<&FeedforwardNet>,
    paths: &PathBatch,
) -> Result<f64, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::Dbdp1)?;
    Ok(reduce_mean(paths.batch_size(), || (Scratch::new(u, z), ForwardCache::new(u)), |(s, vc), b| {
        let target = ctx.next_value(next, paths.state(b, i + 1), vc);
        two_net_sample(&ctx, i, (u, z), paths.state(b, i), paths.increment(b, i), target, s, None)
    }))
}

/// DBDP2 loss of `u` at step `i` on `paths`.
pub fn dbdp2_loss(
    problem: &PdeProblem,
    grid: &TimeGrid,
    i: usize,
    u: &FeedforwardNet,
    next: Option<&FeedforwardNet>,
    paths: &PathBatch,
) -> Result<f64, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::Dbdp2)?;
    let z_like = FeedforwardNet::zeros(ctx.d, ctx.d, &[1], Activation::Tanh)?;
    Ok(reduce_mean(paths.batch_size(), || (Scratch::new(u, &z_like), ForwardCache::new(u)), |(s, vc), b| {
        let target = ctx.next_value(next, paths.state(b, i + 1), vc);
        gradient_net_sample(&ctx, i, u, paths.state(b, i), paths.increment(b, i), target, s, None)
    }))
}

/// MDBDP loss of `(u, z)` at step `i`; `later[k]` holds `(Û_j, Ẑ_j)` for `j = i + 1 + k`.
pub fn mdbdp_loss(
    problem: &PdeProblem,
    grid: &TimeGrid,
    i: usize,
    u: &FeedforwardNet,
    z: &FeedforwardNet,
    later: &[(FeedforwardNet, FeedforwardNet)],
    paths: &PathBatch,
) -> Result<f64, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::Mdbdp)?;
    if later.len() + i + 1 != grid.steps() {
        return Err(TrainError::Config("one frozen network pair per later step required".into()));
    }
    Ok(reduce_mean(paths.batch_size(), || Scratch::new(u, z), |s, b| {
        let target = multistep_target(&ctx, i, later, paths, b, s);
        two_net_sample(&ctx, i, (u, z), paths.state(b, i), paths.increment(b, i), target, s, None)
    }))
}
