//! Second-order multistep schemes for fully nonlinear PDEs, `Z = Du`,
//! `Γ = D²u`: the explicit 2EMDBDP scheme and the 2MDBDP / 2M²DBDP schemes
//! that learn `Γ` on a coarse subgrid with Malliavin-weight regressions.
//!
//! Every fine step minimizes the multistep loss
//! `E|g(X_N) − Σ_{j>i}[|π|F_j + Ẑ_jᵀσΔW_j] − 𝒰(X_i) − |π|F(t_i, X_i, 𝒰, 𝒵, Γ_i) − 𝒵(X_i)ᵀσΔW_i|²`
//! with all later networks frozen. The schemes differ in the Hessians fed to `F`.

use std::time::Instant;

use crate::nn::{sym_len, sym_pack, sym_pack_grad, sym_unpack, Activation, FeedforwardNet, ForwardCache};
use crate::problems::{Driver, FullyNonlinearDriver, PdeProblem};
use crate::semilinear::dot;
use crate::sim::{antithetic_into, stream_key, mat_vec, simulate_prefix, MalliavinWeights, PathBatch, TimeGrid};
use crate::train::{
    at_step, minimize, pilot_normalization, reduce_gradient, reduce_mean, ParamSet, Scheme, SchemeResult, TrainConfig,
    TrainError,
};

const INIT: u64 = 0x2417;
const GAMMA_PHASE: u64 = 3;
const PILOT_MEANS: u64 = 0x9171;

/// Where the Hessian fed to the driver comes from.
#[derive(Clone, Copy)]
pub enum HessianSource<'a> {
    /// `D²g`.
    Terminal,
    /// Symmetrized input Jacobian of a gradient network.
    ZJacobian(&'a FeedforwardNet),
    /// A `Γ` network with packed symmetric output.
    Gamma(&'a FeedforwardNet),
}

/// Trained `Γ̂_ℓ` on the coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub coarse_index: usize,
    pub net: FeedforwardNet,
    pub loss: f64,
}

/// Frozen networks of a fully nonlinear run, by fine index (`values`, `zs`)
/// and coarse index (`gammas`; index `N̂` stands for `D²g`).
#[derive(Debug, Clone, Default)]
pub struct TrainedModels {
    pub values: Vec<Option<FeedforwardNet>>,
    pub zs: Vec<Option<FeedforwardNet>>,
    pub gammas: Vec<Option<FeedforwardNet>>,
}

impl TrainedModels {
    pub fn empty(grid: &TimeGrid) -> Self {
        Self {
            values: vec![None; grid.steps()],
            zs: vec![None; grid.steps()],
            gammas: vec![None; grid.coarse_steps()],
        }
    }

    fn value(&self, i: usize) -> Result<&FeedforwardNet, TrainError> {
        self.values
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| TrainError::Config(format!("value network at step {i} is not trained")))
    }

    fn z(&self, i: usize) -> Result<&FeedforwardNet, TrainError> {
        self.zs
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| TrainError::Config(format!("gradient network at step {i} is not trained")))
    }

    /// `Γ̂_ℓ`; `D²g` at `ℓ = N̂`.
    fn gamma(&self, l: usize) -> Result<HessianSource<'_>, TrainError> {
        if l == self.gammas.len() {
            return Ok(HessianSource::Terminal);
        }
        self.gammas
            .get(l)
            .and_then(Option::as_ref)
            .map(HessianSource::Gamma)
            .ok_or_else(|| TrainError::Config(format!("Hessian network at coarse step {l} is not trained")))
    }

    /// `(Û_j, Ẑ_j)` for `j = i + 1 .. N − 1`.
    fn later(&self, i: usize) -> Result<Vec<(&FeedforwardNet, &FeedforwardNet)>, TrainError> {
        (i + 1..self.values.len()).map(|j| Ok((self.value(j)?, self.z(j)?))).collect()
    }
}

struct Ctx<'a> {
    problem: &'a PdeProblem,
    grid: &'a TimeGrid,
    f: &'a dyn FullyNonlinearDriver,
    d: usize,
    act: Activation,
    cfg: &'a TrainConfig,
    scheme: Scheme,
    norm: Option<(Vec<f64>, Vec<f64>)>,
    /// Constant `(μ, σ)` when the training process has them.
    constant: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    fn new(problem: &'a PdeProblem, grid: &'a TimeGrid, cfg: &'a TrainConfig, scheme: Scheme) -> Result<Self, TrainError> {
        cfg.validate()?;
        let f = match &problem.driver {
            Driver::FullyNonlinear(f) => f.as_ref(),
            Driver::Semilinear(_) => {
                return Err(TrainError::Config(format!(
                    "problem `{}` has a semilinear driver; use a first-order scheme",
                    problem.id
                )))
            }
        };
        if (grid.maturity() - problem.maturity).abs() > 1e-12 * problem.maturity.max(1.0) {
            return Err(TrainError::Config("grid maturity differs from the problem maturity".into()));
        }
        let d = problem.dim;
        Ok(Self {
            problem,
            grid,
            f,
            d,
            act: cfg.activation.unwrap_or(problem.activation),
            cfg,
            scheme,
            norm: None,
            constant: problem.dynamics.constant().map(|(m, s)| (m.to_vec(), s.to_vec())),
        })
    }

    fn for_training(problem: &'a PdeProblem, grid: &'a TimeGrid, cfg: &'a TrainConfig, scheme: Scheme) -> Result<Self, TrainError> {
        let mut ctx = Self::new(problem, grid, cfg, scheme)?;
        ctx.require_terminal_hessian()?;
        ctx.norm = Some(pilot_normalization(grid, &problem.x0, problem.dynamics.as_ref(), cfg)?);
        Ok(ctx)
    }

    fn require_terminal_hessian(&self) -> Result<(), TrainError> {
        if self.problem.terminal.hessian(&self.problem.x0, &mut vec![0.0; self.d * self.d]) {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "`{}` needs the terminal Hessian D²g, which problem `{}` does not provide",
                self.scheme, self.problem.id
            )))
        }
    }

    fn constant(&self) -> Result<(&[f64], &[f64]), TrainError> {
        self.constant
            .as_ref()
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
            .ok_or_else(|| TrainError::Config(format!("`{}` needs constant drift and diffusion", self.scheme)))
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

    fn budget(&self, i: usize) -> usize {
        if i + 1 == self.grid.steps() {
            self.cfg.first_step_iters
        } else {
            self.cfg.iters_per_step
        }
    }
}

/// Per-thread buffers.
struct Scratch {
    uc: ForwardCache,
    zc: ForwardCache,
    gc: ForwardCache,
    z: Vec<f64>,
    dz: Vec<f64>,
    gz: Vec<f64>,
    sdw: Vec<f64>,
    sig: Vec<f64>,
    gam: Vec<f64>,
    jac: Vec<f64>,
    xa: Vec<f64>,
    w: Vec<f64>,
    h: Vec<f64>,
    mat: Vec<f64>,
    packed: Vec<f64>,
}

impl Scratch {
    fn new(u_like: &FeedforwardNet, z_like: &FeedforwardNet, g_like: &FeedforwardNet) -> Self {
        let d = u_like.input_dim();
        Self {
            uc: ForwardCache::new(u_like),
            zc: ForwardCache::new(z_like),
            gc: ForwardCache::new(g_like),
            z: vec![0.0; d],
            dz: vec![0.0; d],
            gz: vec![0.0; d],
            sdw: vec![0.0; d],
            sig: vec![0.0; d * d],
            gam: vec![0.0; d * d],
            jac: vec![0.0; d * d],
            xa: vec![0.0; d],
            w: vec![0.0; d],
            h: vec![0.0; d],
            mat: vec![0.0; d * d],
            packed: vec![0.0; sym_len(d)],
        }
    }
}

/// Writes the Hessian from `src` at `x` into `s.gam`.
fn hessian_at(ctx: &Ctx, src: HessianSource, x: &[f64], s: &mut Scratch) {
    let d = ctx.d;
    match src {
        HessianSource::Terminal => {
            ctx.problem.terminal.hessian(x, &mut s.gam);
        }
        HessianSource::ZJacobian(zn) => {
            zn.forward(x, &mut s.zc);
            zn.jacobian_from_cache(&mut s.zc, &mut s.jac);
            for a in 0..d {
                for b in 0..d {
                    s.gam[a * d + b] = 0.5 * (s.jac[a * d + b] + s.jac[b * d + a]);
                }
            }
        }
        HessianSource::Gamma(gn) => {
            let out = gn.forward(x, &mut s.gc);
            sym_unpack(out, d, &mut s.gam);
        }
    }
}

/// `σ(t_j, X_j) ΔW_j` into `s.sdw`.
fn sigma_dw(ctx: &Ctx, j: usize, x: &[f64], dw: &[f64], s: &mut Scratch) {
    ctx.problem.dynamics.diffusion(ctx.grid.time(j), x, &mut s.sig);
    mat_vec(&s.sig, dw, &mut s.sdw);
}

/// Multistep target along path `b`: `g(X_N) − Σ_{j>i}[|π|F_j + Ẑ_jᵀσΔW_j]`.
/// With `frozen = None` the Hessian at `X_j` is `D_xẐ_j(X_j)`; otherwise `frozen` is used everywhere.
fn multistep_target(
    ctx: &Ctx,
    i: usize,
    later: &[(&FeedforwardNet, &FeedforwardNet)],
    frozen: Option<HessianSource>,
    paths: &PathBatch,
    b: usize,
    s: &mut Scratch,
) -> f64 {
    let n = ctx.grid.steps();
    let dt = ctx.grid.dt();
    let mut tgt = ctx.problem.terminal.value(paths.state(b, n));
    for (k, (un, zn)) in later.iter().enumerate() {
        let j = i + 1 + k;
        let x = paths.state(b, j);
        hessian_at(ctx, frozen.unwrap_or(HessianSource::ZJacobian(zn)), x, s);
        let u = un.forward(x, &mut s.uc)[0];
        s.z.copy_from_slice(zn.forward(x, &mut s.zc));
        let fv = ctx.f.eval(ctx.grid.time(j), x, u, &s.z, &s.gam, &mut s.dz).0;
        sigma_dw(ctx, j, x, paths.increment(b, j), s);
        tgt -= fv * dt + dot(&s.z, &s.sdw);
    }
    tgt
}

/// One sample of the step-`i` loss with `Γ_i = s.gam` already set.
fn step_sample(
    ctx: &Ctx,
    i: usize,
    nets: (&FeedforwardNet, &FeedforwardNet),
    paths: &PathBatch,
    b: usize,
    target: f64,
    s: &mut Scratch,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let (un, zn) = nets;
    let dt = ctx.grid.dt();
    let x = paths.state(b, i);
    sigma_dw(ctx, i, x, paths.increment(b, i), s);
    let u = un.forward(x, &mut s.uc)[0];
    s.z.copy_from_slice(zn.forward(x, &mut s.zc));
    let (fv, fy) = ctx.f.eval(ctx.grid.time(i), x, u, &s.z, &s.gam, &mut s.dz);
    let r = target - u - dt * fv - dot(&s.z, &s.sdw);
    if let Some((gu, gz)) = grads {
        for k in 0..ctx.d {
            s.gz[k] = 2.0 * r * (-dt * s.dz[k] - s.sdw[k]);
        }
        un.backward(&mut s.uc, &[2.0 * r * (-1.0 - dt * fy)], Some(gu), None);
        zn.backward(&mut s.zc, &s.gz, Some(gz), None);
    }
    r * r
}

/// Hessian plan for fine step `i`: the source and path index of `Γ_i`, and
/// the source for the later steps (`None`: per-step `D_xẐ_j`).
#[derive(Clone, Copy)]
struct StepPlan<'a> {
    current: HessianSource<'a>,
    current_at: usize,
    later: Option<HessianSource<'a>>,
}

fn explicit_plan(models: &TrainedModels, i: usize, n: usize) -> Result<StepPlan<'_>, TrainError> {
    let current = if i + 1 == n {
        HessianSource::Terminal
    } else {
        HessianSource::ZJacobian(models.z(i + 1)?)
    };
    Ok(StepPlan {
        current,
        current_at: i + 1,
        later: None,
    })
}

fn frozen_plan(src: HessianSource<'_>, i: usize) -> StepPlan<'_> {
    StepPlan {
        current: src,
        current_at: i,
        later: Some(src),
    }
}

fn sample_loss(
    ctx: &Ctx,
    i: usize,
    nets: (&FeedforwardNet, &FeedforwardNet),
    later: &[(&FeedforwardNet, &FeedforwardNet)],
    plan: StepPlan,
    paths: &PathBatch,
    b: usize,
    s: &mut Scratch,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let target = multistep_target(ctx, i, later, plan.later, paths, b, s);
    hessian_at(ctx, plan.current, paths.state(b, plan.current_at), s);
    step_sample(ctx, i, nets, paths, b, target, s, grads)
}

/// Trains `(𝒰_i, 𝒵_i)`, warm-started from step `i + 1`.
fn train_step(ctx: &Ctx, i: usize, models: &mut TrainedModels, plan_of: impl Fn(&TrainedModels) -> Result<StepPlan<'_>, TrainError>, g_like: &FeedforwardNet) -> Result<f64, TrainError> {
    let n = ctx.grid.steps();
    let (u0, z0) = if i + 1 < n {
        (models.value(i + 1)?.clone(), models.z(i + 1)?.clone())
    } else {
        let (mut u, mut z) = (ctx.fresh(1, i, 0)?, ctx.fresh(ctx.d, i, 1)?);
        let (gm, dgm) = pilot_terminal_means(ctx)?;
        u.set_output_bias(&[gm])?;
        if let Some(dgm) = dgm {
            z.set_output_bias(&dgm)?;
        }
        (u, z)
    };
    let mut set = ParamSet::of_nets(vec![u0, z0]);
    let loss = {
        let later = models.later(i)?;
        let plan = plan_of(models)?;
        minimize(&mut set, ctx.budget(i), ctx.cfg, |set, it, grad| {
            let paths = ctx.paths(n, ctx.key(i, 0, it))?;
            let (un, zn) = (&set.nets[0], &set.nets[1]);
            let split = un.num_params();
            let (loss, g) = reduce_gradient(ctx.cfg.batch_size, set.len(), || Scratch::new(un, zn, g_like), |s, b, gout| {
                let (gu, gz) = gout.split_at_mut(split);
                sample_loss(ctx, i, (un, zn), &later, plan, &paths, b, s, Some((gu, gz)))
            });
            grad.copy_from_slice(&g);
            Ok(loss)
        })
        .map_err(at_step(ctx.scheme.id(), i))?
    };
    let mut nets = set.nets.into_iter();
    models.values[i] = nets.next();
    models.zs[i] = nets.next();
    Ok(loss)
}

/// Pilot means of `g(X_N)` and, when available, `Dg(X_N)`.
fn pilot_terminal_means(ctx: &Ctx) -> Result<(f64, Option<Vec<f64>>), TrainError> {
    let b = ctx.cfg.batch_size;
    let paths = ctx.paths(ctx.grid.steps(), stream_key(ctx.cfg.seed, &[PILOT_MEANS]))?;
    let n = ctx.grid.steps();
    let term = &ctx.problem.terminal;
    let mut gm = 0.0;
    let mut dgm = vec![0.0; ctx.d];
    let mut dg = vec![0.0; ctx.d];
    let mut has_grad = true;
    for p in 0..b {
        let x = paths.state(p, n);
        gm += term.value(x);
        has_grad &= term.gradient(x, &mut dg);
        dgm.iter_mut().zip(&dg).for_each(|(m, v)| *m += v);
    }
    dgm.iter_mut().for_each(|m| *m /= b as f64);
    Ok((gm / b as f64, has_grad.then_some(dgm)))
}

fn gamma_like(ctx: &Ctx) -> Result<FeedforwardNet, TrainError> {
    ctx.fresh(sym_len(ctx.d), usize::MAX, 2)
}

// ---------------------------------------------------------------------------
// Hessian regression targets

/// Target of the order-one estimator at coarse step `ℓ` along path `b`:
/// `sym(½(Ẑ(X₊) − Ẑ(X̂₊)) ⊗ Ĥ¹)` with `X₊ = X_{κ̂(ℓ+1)}` and its antithetic
/// companion `X̂₊`, where `Ẑ` is `Ẑ_{κ̂(ℓ+1)}` (or `Dg` at the terminal date).
/// Row-major `d × d` into `out`.
pub fn gamma_v2_target(
    problem: &PdeProblem,
    grid: &TimeGrid,
    l: usize,
    z_next: Option<&FeedforwardNet>,
    paths: &PathBatch,
    b: usize,
    out: &mut [f64],
) -> Result<(), TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::TwoMdbdp)?;
    let (_, sigma) = ctx.constant()?;
    let weights = MalliavinWeights::new(sigma)?;
    let like = FeedforwardNet::zeros(ctx.d, ctx.d, &[1], Activation::Tanh)?;
    let mut s = Scratch::new(&like, z_next.unwrap_or(&like), &like);
    v2_target(&ctx, &weights, l, z_next, paths, b, &mut s);
    out.copy_from_slice(&s.mat);
    Ok(())
}

fn z_at(ctx: &Ctx, z: Option<&FeedforwardNet>, x: &[f64], cache: &mut ForwardCache, out: &mut [f64]) {
    match z {
        Some(zn) => out.copy_from_slice(zn.forward(x, cache)),
        None => {
            ctx.problem.terminal.gradient(x, out);
        }
    }
}

/// Fills `s.mat` with the order-one target.
fn v2_target(ctx: &Ctx, weights: &MalliavinWeights, l: usize, z_next: Option<&FeedforwardNet>, paths: &PathBatch, b: usize, s: &mut Scratch) {
    let d = ctx.d;
    let k = ctx.grid.kappa_hat();
    let (a, e) = (l * k, (l + 1) * k);
    let (mu, sigma) = ctx.constant().expect("checked by the caller");
    let hdt = ctx.grid.coarse_dt();
    paths.increment_sum(b, a, e, &mut s.w);
    antithetic_into(paths.state(b, a), mu, sigma, &s.w, hdt, &mut s.xa);
    weights.h1_into(&s.w, hdt, &mut s.h);
    z_at(ctx, z_next, paths.state(b, e), &mut s.zc, &mut s.z);
    z_at(ctx, z_next, &s.xa, &mut s.zc, &mut s.dz);
    for c in 0..d {
        s.gz[c] = 0.5 * (s.z[c] - s.dz[c]);
    }
    for r in 0..d {
        for c in 0..d {
            s.mat[r * d + c] = 0.5 * (s.gz[r] * s.h[c] + s.gz[c] * s.h[r]);
        }
    }
}

/// Decomposition of the order-two target at coarse step `ℓ`:
/// `target = terminal − forward + correction`, where `terminal` is the
/// averaged terminal-Hessian term, `forward` is `(|π̂|/2)Σ_m (F_m(X) + F_m(X̂))Ĥ²_{ℓ,m}`
/// and `correction` is `(|π̂|/2)Σ_m 2F_ℓ Ĥ²_{ℓ,m}`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct V3Parts {
    pub terminal: Vec<f64>,
    pub forward: Vec<f64>,
    pub correction: Vec<f64>,
}

impl V3Parts {
    pub fn target(&self) -> Vec<f64> {
        self.terminal
            .iter()
            .zip(&self.forward)
            .zip(&self.correction)
            .map(|((t, f), c)| t - f + c)
            .collect()
    }
}

/// Order-two estimator target at coarse step `ℓ` along path `b`. `models`
/// must hold `Û, Ẑ` at the coarse dates after `ℓ` (and at `ℓ` itself) and `Γ̂_m` for `m > ℓ`.
pub fn gamma_v3_parts(
    problem: &PdeProblem,
    grid: &TimeGrid,
    l: usize,
    models: &TrainedModels,
    paths: &PathBatch,
    b: usize,
) -> Result<V3Parts, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::TwoM2dbdp)?;
    let (_, sigma) = ctx.constant()?;
    let weights = MalliavinWeights::new(sigma)?;
    let frozen = V3Frozen::collect(&ctx, l, models)?;
    let like = FeedforwardNet::zeros(ctx.d, 1, &[1], Activation::Tanh)?;
    let zl = FeedforwardNet::zeros(ctx.d, ctx.d, &[1], Activation::Tanh)?;
    let gl = FeedforwardNet::zeros(ctx.d, sym_len(ctx.d), &[1], Activation::Tanh)?;
    let mut s = Scratch::new(frozen.anchor.0.map_or(&like, |v| v), frozen.anchor.1.map_or(&zl, |v| v), &gl);
    let mut s = V3Scratch::new(&ctx, &mut s);
    v3_parts(&ctx, &weights, l, &frozen, paths, b, &mut s);
    Ok(V3Parts {
        terminal: s.terminal.clone(),
        forward: s.forward.clone(),
        correction: s.correction.clone(),
    })
}

/// Networks the order-two target reads.
struct V3Frozen<'a> {
    /// `(Û, Ẑ, Γ̂_m)` at coarse dates `m = ℓ+1 .. N̂−1`.
    coarse: Vec<(&'a FeedforwardNet, &'a FeedforwardNet, HessianSource<'a>)>,
    /// `(Û_{κ̂ℓ}, Ẑ_{κ̂ℓ})` and `Γ̂_{ℓ+1}` for the correction.
    anchor: (Option<&'a FeedforwardNet>, Option<&'a FeedforwardNet>),
    anchor_gamma: HessianSource<'a>,
}

impl<'a> V3Frozen<'a> {
    fn collect(ctx: &Ctx, l: usize, models: &'a TrainedModels) -> Result<Self, TrainError> {
        let (k, nh) = (ctx.grid.kappa_hat(), ctx.grid.coarse_steps());
        let coarse = (l + 1..nh)
            .map(|m| Ok((models.value(m * k)?, models.z(m * k)?, models.gamma(m)?)))
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Self {
            coarse,
            anchor: (Some(models.value(l * k)?), Some(models.z(l * k)?)),
            anchor_gamma: models.gamma(l + 1)?,
        })
    }
}

struct V3Scratch<'s> {
    s: &'s mut Scratch,
    terminal: Vec<f64>,
    forward: Vec<f64>,
    correction: Vec<f64>,
    h2: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'s> V3Scratch<'s> {
    fn new(ctx: &Ctx, s: &'s mut Scratch) -> Self {
        let dd = ctx.d * ctx.d;
        Self {
            s,
            terminal: vec![0.0; dd],
            forward: vec![0.0; dd],
            correction: vec![0.0; dd],
            h2: vec![0.0; dd],
            tmp: vec![0.0; dd],
        }
    }
}

/// `F(t, x, Û(x), Ẑ(x), Γ(x))`.
fn driver_at(ctx: &Ctx, t: f64, x: &[f64], u: &FeedforwardNet, z: &FeedforwardNet, g: HessianSource, s: &mut Scratch) -> f64 {
    hessian_at(ctx, g, x, s);
    let uv = u.forward(x, &mut s.uc)[0];
    s.z.copy_from_slice(z.forward(x, &mut s.zc));
    ctx.f.eval(t, x, uv, &s.z, &s.gam, &mut s.dz).0
}

fn v3_parts(ctx: &Ctx, weights: &MalliavinWeights, l: usize, frozen: &V3Frozen, paths: &PathBatch, b: usize, v: &mut V3Scratch) {
    let d = ctx.d;
    let (k, nh, n) = (ctx.grid.kappa_hat(), ctx.grid.coarse_steps(), ctx.grid.steps());
    let (mu, sigma) = ctx.constant().expect("checked by the caller");
    let hdt = ctx.grid.coarse_dt();
    let a = l * k;
    let anchor = paths.state(b, a);

    // Terminal term, with the lowest-variance form the problem supports.
    let span = nh - l;
    let s = &mut *v.s;
    paths.increment_sum(b, a, n, &mut s.w);
    antithetic_into(anchor, mu, sigma, &s.w, span as f64 * hdt, &mut s.xa);
    let xn = paths.state(b, n);
    let term = &ctx.problem.terminal;
    if term.hessian(xn, &mut v.terminal) {
        term.hessian(&s.xa, &mut v.tmp);
        v.terminal.iter_mut().zip(&v.tmp).for_each(|(t, h)| *t = 0.5 * (*t + h));
    } else if term.gradient(xn, &mut s.z) {
        term.gradient(&s.xa, &mut s.dz);
        weights.h1_into(&s.w, span as f64 * hdt, &mut s.h);
        for r in 0..d {
            for c in 0..d {
                let (dr, dc) = (0.5 * (s.z[r] - s.dz[r]), 0.5 * (s.z[c] - s.dz[c]));
                v.terminal[r * d + c] = 0.5 * (dr * s.h[c] + dc * s.h[r]);
            }
        }
    } else {
        let avg = 0.5 * (term.value(xn) + term.value(&s.xa)) - term.value(anchor);
        weights.h2_into(&s.w, span, hdt, &mut v.h2);
        v.terminal.iter_mut().zip(&v.h2).for_each(|(t, h)| *t = avg * h);
    }

    v.forward.iter_mut().for_each(|x| *x = 0.0);
    v.correction.iter_mut().for_each(|x| *x = 0.0);
    if frozen.coarse.is_empty() {
        return;
    }
    let f_anchor = match frozen.anchor {
        (Some(u), Some(z)) => driver_at(ctx, ctx.grid.time(a), anchor, u, z, frozen.anchor_gamma, s),
        _ => 0.0,
    };
    for (off, &(u, z, g)) in frozen.coarse.iter().enumerate() {
        let m = l + 1 + off;
        let span = m - l;
        let t = ctx.grid.time(m * k);
        paths.increment_sum(b, a, m * k, &mut s.w);
        weights.h2_into(&s.w, span, hdt, &mut v.h2);
        antithetic_into(anchor, mu, sigma, &s.w, span as f64 * hdt, &mut s.xa);
        let xa = s.xa.clone();
        let f_fwd = driver_at(ctx, t, paths.state(b, m * k), u, z, g, s);
        let f_anti = driver_at(ctx, t, &xa, u, z, g, s);
        for (idx, h) in v.h2.iter().enumerate() {
            v.forward[idx] += 0.5 * hdt * (f_fwd + f_anti) * h;
            v.correction[idx] += 0.5 * hdt * 2.0 * f_anchor * h;
        }
    }
}

/// Fits `Γ̂_ℓ` by regression on the given target, warm-started from `init`.
fn fit_gamma<T>(ctx: &Ctx, l: usize, (init, iters): (FeedforwardNet, usize), steps: usize, target: T, z_like: &FeedforwardNet, u_like: &FeedforwardNet) -> Result<HessianEstimate, TrainError>
where
    T: Fn(&PathBatch, usize, &mut Scratch) -> Vec<f64> + Sync,
{
    let d = ctx.d;
    let a = l * ctx.grid.kappa_hat();
    let mut set = ParamSet::of_nets(vec![init]);
    let loss = minimize(&mut set, iters, ctx.cfg, |set, it, grad| {
        let paths = ctx.paths(steps, ctx.key(l, GAMMA_PHASE, it))?;
        let gn = &set.nets[0];
        let (loss, g) = reduce_gradient(ctx.cfg.batch_size, set.len(), || (Scratch::new(u_like, z_like, gn), ForwardCache::new(gn)), |(s, cache), b, gout| {
            let tgt = target(&paths, b, s);
            let out = gn.forward(paths.state(b, a), cache);
            sym_unpack(out, d, &mut s.gam);
            let mut loss = 0.0;
            for (idx, t) in tgt.iter().enumerate() {
                let e = s.gam[idx] - t;
                s.jac[idx] = 2.0 * e;
                loss += e * e;
            }
            sym_pack_grad(&s.jac, d, &mut s.packed);
            gn.backward(cache, &s.packed, Some(gout), None);
            loss
        });
        grad.copy_from_slice(&g);
        Ok(loss)
    })
    .map_err(at_step("gamma", a))?;
    Ok(HessianEstimate {
        coarse_index: l,
        net: set.nets.pop().unwrap(),
        loss,
    })
}

/// Order-one (`V2`) Hessian fit at coarse step `ℓ < N̂`, using `Ẑ_{κ̂(ℓ+1)}`.
pub fn train_gamma_v2(
    problem: &PdeProblem,
    grid: &TimeGrid,
    l: usize,
    models: &TrainedModels,
    cfg: &TrainConfig,
) -> Result<HessianEstimate, TrainError> {
    let ctx = Ctx::for_training(problem, grid, cfg, Scheme::TwoMdbdp)?;
    gamma_v2_in(&ctx, l, models)
}

/// Warm start from `Γ̂_{ℓ+1}`, or a fresh network whose output bias is the
/// pilot mean of `D²g(X_N)`, with the matching iteration budget.
fn gamma_init(ctx: &Ctx, l: usize, models: &TrainedModels) -> Result<(FeedforwardNet, usize), TrainError> {
    if let Some(g) = models.gammas.get(l + 1).and_then(Option::as_ref) {
        return Ok((g.clone(), ctx.cfg.gamma_iters));
    }
    let d = ctx.d;
    let mut net = ctx.fresh(sym_len(d), l, 2)?;
    let paths = ctx.paths(ctx.grid.steps(), stream_key(ctx.cfg.seed, &[PILOT_MEANS]))?;
    let b = paths.batch_size();
    let mut h = vec![0.0; d * d];
    let mut mean = vec![0.0; d * d];
    for p in 0..b {
        ctx.problem.terminal.hessian(paths.state(p, ctx.grid.steps()), &mut h);
        mean.iter_mut().zip(&h).for_each(|(m, v)| *m += v / b as f64);
    }
    let mut packed = vec![0.0; sym_len(d)];
    sym_pack(&mean, d, &mut packed);
    net.set_output_bias(&packed)?;
    Ok((net, ctx.cfg.gamma_first_iters))
}

fn gamma_v2_in(ctx: &Ctx, l: usize, models: &TrainedModels) -> Result<HessianEstimate, TrainError> {
    let (_, sigma) = ctx.constant()?;
    let weights = MalliavinWeights::new(sigma)?;
    let (k, nh) = (ctx.grid.kappa_hat(), ctx.grid.coarse_steps());
    if l >= nh {
        return Err(TrainError::Config(format!("coarse step {l} has no Hessian fit; Γ̂ = D²g there")));
    }
    let z_next = if l + 1 == nh { None } else { Some(models.z((l + 1) * k)?) };
    let u_like = ctx.fresh(1, 0, 0)?;
    let z_like = ctx.fresh(ctx.d, 0, 1)?;
    let init = gamma_init(ctx, l, models)?;
    fit_gamma(ctx, l, init, (l + 1) * k, |paths, b, s| {
        v2_target(ctx, &weights, l, z_next, paths, b, s);
        s.mat.clone()
    }, &z_like, &u_like)
}

/// Order-two (`V3`) Hessian fit at coarse step `ℓ < N̂`.
pub fn train_gamma_v3(
    problem: &PdeProblem,
    grid: &TimeGrid,
    l: usize,
    models: &TrainedModels,
    cfg: &TrainConfig,
) -> Result<HessianEstimate, TrainError> {
    let ctx = Ctx::for_training(problem, grid, cfg, Scheme::TwoM2dbdp)?;
    gamma_v3_in(&ctx, l, models)
}

fn gamma_v3_in(ctx: &Ctx, l: usize, models: &TrainedModels) -> Result<HessianEstimate, TrainError> {
    let (_, sigma) = ctx.constant()?;
    let weights = MalliavinWeights::new(sigma)?;
    if l >= ctx.grid.coarse_steps() {
        return Err(TrainError::Config(format!("coarse step {l} has no Hessian fit; Γ̂ = D²g there")));
    }
    let frozen = V3Frozen::collect(ctx, l, models)?;
    let u_like = ctx.fresh(1, 0, 0)?;
    let z_like = ctx.fresh(ctx.d, 0, 1)?;
    let init = gamma_init(ctx, l, models)?;
    fit_gamma(ctx, l, init, ctx.grid.steps(), |paths, b, s| {
        let mut v = V3Scratch::new(ctx, s);
        v3_parts(ctx, &weights, l, &frozen, paths, b, &mut v);
        v.terminal
            .iter()
            .zip(&v.forward)
            .zip(&v.correction)
            .map(|((t, f), c)| t - f + c)
            .collect()
    }, &z_like, &u_like)
}

// ---------------------------------------------------------------------------
// Schemes

fn finish(ctx: &Ctx, models: TrainedModels, losses: Vec<f64>, gamma_losses: Vec<f64>, start: Instant) -> Result<SchemeResult, TrainError> {
    let u0 = models.value(0)?;
    let estimate = u0.eval(&ctx.problem.x0)?[0];
    if !estimate.is_finite() {
        return Err(TrainError::Divergence {
            stage: "evaluation".into(),
            step: 0,
            iteration: 0,
        });
    }
    Ok(SchemeResult {
        scheme: ctx.scheme,
        estimate_y0: estimate,
        step_losses: losses,
        gamma_losses,
        runtime_s: start.elapsed().as_secs_f64(),
        seed: ctx.cfg.seed,
        value_nets: models.values.into_iter().flatten().collect(),
        z_nets: models.zs.into_iter().flatten().collect(),
        z0: None,
        gamma_nets: models.gammas.into_iter().flatten().collect(),
    })
}

/// 2EMDBDP: `Γ_i = D_xẐ_{i+1}` (at `X_{i+1}`; `D²g` at the last step) and
/// `D_xẐ_j(X_j)` inside the multistep sum.
pub fn train_2emdbdp(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, Scheme::TwoEmdbdp)?;
    let n = grid.steps();
    let g_like = gamma_like(&ctx)?;
    let mut models = TrainedModels::empty(grid);
    let mut losses = vec![f64::NAN; n];
    for i in (0..n).rev() {
        losses[i] = train_step(&ctx, i, &mut models, |m| explicit_plan(m, i, n), &g_like)?;
    }
    finish(&ctx, models, losses, Vec::new(), start)
}

/// 2MDBDP: coarse outer loop `ℓ = N̂..0`; `Γ̂_ℓ` from the order-one estimator
/// (`D²g` at `ℓ = N̂`), then fine steps `i = κ̂(ℓ−1) .. κ̂ℓ−1` trained with `Γ̂_ℓ` frozen.
pub fn train_2mdbdp(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_coarse(problem, grid, cfg, Scheme::TwoMdbdp)
}

/// 2M²DBDP: as 2MDBDP with the order-two estimator for `Γ̂_ℓ`.
pub fn train_2m2dbdp(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    train_coarse(problem, grid, cfg, Scheme::TwoM2dbdp)
}

fn train_coarse(problem: &PdeProblem, grid: &TimeGrid, cfg: &TrainConfig, scheme: Scheme) -> Result<SchemeResult, TrainError> {
    let start = Instant::now();
    let ctx = Ctx::for_training(problem, grid, cfg, scheme)?;
    ctx.constant()?;
    let (n, k, nh) = (grid.steps(), grid.kappa_hat(), grid.coarse_steps());
    let g_like = gamma_like(&ctx)?;
    let mut models = TrainedModels::empty(grid);
    let mut losses = vec![f64::NAN; n];
    let mut gamma_losses = vec![f64::NAN; nh];
    for l in (0..=nh).rev() {
        if l < nh {
            let est = if scheme == Scheme::TwoMdbdp {
                gamma_v2_in(&ctx, l, &models)?
            } else {
                gamma_v3_in(&ctx, l, &models)?
            };
            gamma_losses[l] = est.loss;
            models.gammas[l] = Some(est.net);
        }
        if l == 0 {
            break;
        }
        for i in ((l - 1) * k..l * k).rev() {
            losses[i] = train_step(&ctx, i, &mut models, |m| Ok(frozen_plan(m.gamma(l)?, i)), &g_like)?;
        }
    }
    debug_assert!(losses.iter().all(|l| !l.is_nan()) || n == 0);
    finish(&ctx, models, losses, gamma_losses, start)
}

/// Dispatches a fully nonlinear scheme.
pub fn solve(problem: &PdeProblem, grid: &TimeGrid, scheme: Scheme, cfg: &TrainConfig) -> Result<SchemeResult, TrainError> {
    match scheme {
        Scheme::TwoEmdbdp => train_2emdbdp(problem, grid, cfg),
        Scheme::TwoMdbdp => train_2mdbdp(problem, grid, cfg),
        Scheme::TwoM2dbdp => train_2m2dbdp(problem, grid, cfg),
        other => Err(TrainError::Config(format!("`{other}` is not a fully nonlinear scheme"))),
    }
}

// ---------------------------------------------------------------------------
// Loss evaluation at fixed parameters

/// 2EMDBDP loss of `(u, z)` at fine step `i`; `models` supplies the later networks.
pub fn explicit_step_loss(
    problem: &PdeProblem,
    grid: &TimeGrid,
    i: usize,
    u: &FeedforwardNet,
    z: &FeedforwardNet,
    models: &TrainedModels,
    paths: &PathBatch,
) -> Result<f64, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::TwoEmdbdp)?;
    ctx.require_terminal_hessian()?;
    let later = models.later(i)?;
    let plan = explicit_plan(models, i, grid.steps())?;
    let g_like = FeedforwardNet::zeros(ctx.d, sym_len(ctx.d), &[1], Activation::Tanh)?;
    Ok(reduce_mean(paths.batch_size(), || Scratch::new(u, z, &g_like), |s, b| {
        sample_loss(&ctx, i, (u, z), &later, plan, paths, b, s, None)
    }))
}

/// 2MDBDP/2M²DBDP loss of `(u, z)` at fine step `i` with `Γ̂_ℓ` taken from `models` (`D²g` at `ℓ = N̂`).
pub fn coarse_step_loss(
    problem: &PdeProblem,
    grid: &TimeGrid,
    i: usize,
    l: usize,
    u: &FeedforwardNet,
    z: &FeedforwardNet,
    models: &TrainedModels,
    paths: &PathBatch,
) -> Result<f64, TrainError> {
    let cfg = TrainConfig::default();
    let ctx = Ctx::new(problem, grid, &cfg, Scheme::TwoMdbdp)?;
    ctx.require_terminal_hessian()?;
    let later = models.later(i)?;
    let plan = frozen_plan(models.gamma(l)?, i);
    let g_like = FeedforwardNet::zeros(ctx.d, sym_len(ctx.d), &[1], Activation::Tanh)?;
    Ok(reduce_mean(paths.batch_size(), || Scratch::new(u, z, &g_like), |s, b| {
        sample_loss(&ctx, i, (u, z), &later, plan, paths, b, s, None)
    }))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::problems::{CvaDriver, GammaFree, QuadraticTerminal, SemilinearDriver, Terminal, ZeroDriver};
    use crate::sim::{malliavin_h1, path_rng, simulate_paths, ConstantCoefficients};
    use crate::train::mean_var;

    const SIGMA: [f64; 4] = [1.0, 0.3, 0.0, 0.8];
    const A: [f64; 4] = [0.6, -0.2, -0.2, 0.9];

    fn problem(sigma: &[f64], driver: Driver, terminal: Arc<dyn Terminal>) -> PdeProblem {
        PdeProblem {
            id: "test".into(),
            dim: 2,
            maturity: 1.0,
            x0: vec![0.2, -0.4],
            dynamics: Arc::new(ConstantCoefficients::new(vec![0.1, -0.05], sigma.to_vec())),
            driver,
            terminal,
            reference_value: None,
            reference_solution: None,
            activation: Activation::Tanh,
        }
    }

    fn quad(expose: bool) -> Arc<dyn Terminal> {
        Arc::new(QuadraticTerminal {
            matrix: A.to_vec(),
            expose_hessian: expose,
        })
    }

    fn random_net(out: usize, seed: u64) -> FeedforwardNet {
        FeedforwardNet::glorot(2, out, &[5, 5], Activation::Tanh, &mut path_rng(seed, 0)).unwrap()
    }

    /// `x ↦ Mx` with no hidden layer.
    fn linear_net(m: &[f64]) -> FeedforwardNet {
        let mut p = m.to_vec();
        p.extend_from_slice(&[0.0, 0.0]);
        FeedforwardNet::from_params(2, 2, &[], Activation::Tanh, p).unwrap()
    }

    fn within_3se(samples: &[Vec<f64>], expected: &[f64]) {
        for (k, e) in expected.iter().enumerate() {
            let xs: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let (m, v) = mean_var(&xs);
            let se = (v / xs.len() as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * se + 1e-12, "entry {k}: {m} vs {e} (se {se})");
        }
    }

    #[test]
    fn gamma_free_losses_equal_multistep_losses() {
        let f: Arc<dyn SemilinearDriver> = Arc::new(CvaDriver { beta: 0.3 });
        let eye = [1.0, 0.0, 0.0, 1.0];
        let semi = problem(&eye, Driver::Semilinear(f.clone()), quad(true));
        let full = problem(&eye, Driver::FullyNonlinear(Arc::new(GammaFree(f))), quad(true));
        let n = 4;
        let grid = TimeGrid::new(1.0, n, 1).unwrap();
        let paths = simulate_paths(&grid, &full.x0, full.dynamics.as_ref(), 300, 4).unwrap();
        let mut models = TrainedModels::empty(&grid);
        for j in 0..n {
            models.values[j] = Some(random_net(1, 10 + j as u64));
            models.zs[j] = Some(random_net(2, 20 + j as u64));
        }
        for g in 0..n {
            models.gammas[g] = Some(random_net(3, 30 + g as u64));
        }
        for i in 0..n {
            let (u, z) = (random_net(1, 40 + i as u64), random_net(2, 50 + i as u64));
            let later: Vec<_> = (i + 1..n)
                .map(|j| (models.values[j].clone().unwrap(), models.zs[j].clone().unwrap()))
                .collect();
            let reference = crate::semilinear::mdbdp_loss(&semi, &grid, i, &u, &z, &later, &paths).unwrap();
            let explicit = explicit_step_loss(&full, &grid, i, &u, &z, &models, &paths).unwrap();
            let coarse = coarse_step_loss(&full, &grid, i, i + 1, &u, &z, &models, &paths).unwrap();
            assert!(reference > 1e-3);
            for l in [explicit, coarse] {
                assert!((l - reference).abs() <= 1e-12 * reference, "step {i}: {l} vs {reference}");
            }
        }
    }

    #[test]
    fn v2_target_recovers_quadratic_hessian() {
        let p = problem(&SIGMA, Driver::FullyNonlinear(Arc::new(ZeroDriver)), quad(true));
        let grid = TimeGrid::new(1.0, 4, 2).unwrap();
        let paths = simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 100_000, 8).unwrap();
        let zn = linear_net(&A);
        let mut out = vec![0.0; 4];
        let samples: Vec<Vec<f64>> = (0..paths.batch_size())
            .map(|b| {
                gamma_v2_target(&p, &grid, 0, Some(&zn), &paths, b, &mut out).unwrap();
                assert_eq!(out[1], out[2]);
                out.clone()
            })
            .collect();
        within_3se(&samples, &A);

        // Constant Ẑ gives an identically zero target.
        let flat = FeedforwardNet::from_params(2, 2, &[], Activation::Tanh, vec![0.0, 0.0, 0.0, 0.0, 1.0, -2.0]).unwrap();
        gamma_v2_target(&p, &grid, 0, Some(&flat), &paths, 3, &mut out).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn v2_fit_recovers_quadratic_hessian() {
        let p = problem(&SIGMA, Driver::FullyNonlinear(Arc::new(ZeroDriver)), quad(true));
        let grid = TimeGrid::new(1.0, 4, 2).unwrap();
        let mut models = TrainedModels::empty(&grid);
        models.zs[2] = Some(linear_net(&A));
        let cfg = TrainConfig {
            gamma_first_iters: 1500,
            lr_start: 1e-2,
            lr_end: 1e-4,
            ..Default::default()
        };
        let est = train_gamma_v2(&p, &grid, 0, &models, &cfg).unwrap();
        let mut g = vec![0.0; 4];
        sym_unpack(&est.net.eval(&p.x0).unwrap(), 2, &mut g);
        for (a, b) in g.iter().zip(&A) {
            assert!((a - b).abs() < 0.05, "{g:?}");
        }
    }

    /// Bounded driver depending on every argument.
    struct Bounded;

    impl FullyNonlinearDriver for Bounded {
        fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], g: &[f64], dz: &mut [f64]) -> (f64, f64) {
            dz.iter_mut().for_each(|v| *v = 0.0);
            ((x[0] + t).sin() + y.cos() + z[1].tanh() + g[0].tanh(), 0.0)
        }
    }

    fn v3_models(grid: &TimeGrid) -> TrainedModels {
        let mut m = TrainedModels::empty(grid);
        for j in 0..grid.steps() {
            m.values[j] = Some(random_net(1, 60 + j as u64));
            m.zs[j] = Some(random_net(2, 70 + j as u64));
        }
        for l in 0..grid.coarse_steps() {
            m.gammas[l] = Some(random_net(3, 80 + l as u64));
        }
        m
    }

    #[test]
    fn v3_correction_has_zero_mean() {
        let p = problem(&SIGMA, Driver::FullyNonlinear(Arc::new(Bounded)), quad(true));
        let grid = TimeGrid::new(1.0, 8, 2).unwrap();
        let models = v3_models(&grid);
        let paths = simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 100_000, 12).unwrap();
        let samples: Vec<Vec<f64>> = (0..paths.batch_size())
            .map(|b| gamma_v3_parts(&p, &grid, 0, &models, &paths, b).unwrap().correction)
            .collect();
        assert!(samples.iter().any(|s| s[0] != 0.0));
        within_3se(&samples, &[0.0; 4]);
    }

    #[test]
    fn v3_terminal_term_hierarchy() {
        let grid = TimeGrid::new(1.0, 4, 2).unwrap();
        let expected: Vec<f64> = A.iter().map(|a| 2.0 * a).collect();
        let zero = Driver::FullyNonlinear(Arc::new(ZeroDriver));

        // D²g: exact, and the driver terms vanish.
        let p = problem(&SIGMA, zero.clone(), quad(true));
        let models = v3_models(&grid);
        let paths = simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 100_000, 3).unwrap();
        let parts = gamma_v3_parts(&p, &grid, 0, &models, &paths, 17).unwrap();
        assert_eq!(parts.terminal, expected);
        assert!(parts.forward.iter().chain(&parts.correction).all(|v| *v == 0.0));
        assert_eq!(parts.target(), expected);

        // Dg only, then g only: unbiased within Monte-Carlo error.
        struct ValueOnly(QuadraticTerminal);
        impl Terminal for ValueOnly {
            fn value(&self, x: &[f64]) -> f64 {
                self.0.value(x)
            }
        }
        let fallbacks: [Arc<dyn Terminal>; 2] = [
            quad(false),
            Arc::new(ValueOnly(QuadraticTerminal {
                matrix: A.to_vec(),
                expose_hessian: false,
            })),
        ];
        for term in fallbacks {
            let p = problem(&SIGMA, zero.clone(), term);
            let samples: Vec<Vec<f64>> = (0..paths.batch_size())
                .map(|b| gamma_v3_parts(&p, &grid, 0, &models, &paths, b).unwrap().terminal)
                .collect();
            within_3se(&samples, &expected);
        }
    }

    #[test]
    fn antithetic_target_has_lower_variance() {
        let p = crate::problems::make_merton_problem(0.5, &[0.6], 1.0, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 10, 1).unwrap();
        let paths = simulate_paths(&grid, &p.x0, p.dynamics.as_ref(), 20_000, 5).unwrap();
        let l = grid.coarse_steps() - 1;
        let (mut anti, mut plain) = (Vec::new(), Vec::new());
        let mut out = vec![0.0];
        let mut dg = vec![0.0];
        let mut w = vec![0.0];
        for b in 0..paths.batch_size() {
            gamma_v2_target(&p, &grid, l, None, &paths, b, &mut out).unwrap();
            anti.push(out[0]);
            paths.increment_sum(b, l, l + 1, &mut w);
            p.terminal.gradient(paths.state(b, l + 1), &mut dg);
            let h = malliavin_h1(&[1.0], &w, grid.coarse_dt()).unwrap();
            plain.push(dg[0] * h[0]);
        }
        let (va, vp) = (mean_var(&anti).1, mean_var(&plain).1);
        assert!(va <= vp, "{va} vs {vp}");
    }

    fn tiny(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            first_step_iters: 30,
            iters_per_step: 10,
            gamma_iters: 10,
            gamma_first_iters: 20,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn schemes_run_and_repeat_bit_identically() {
        let p = crate::problems::make_merton_problem(0.5, &[0.6], 1.0, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4, 2).unwrap();
        for scheme in [Scheme::TwoEmdbdp, Scheme::TwoMdbdp, Scheme::TwoM2dbdp] {
            let a = solve(&p, &grid, scheme, &tiny(2)).unwrap();
            let b = solve(&p, &grid, scheme, &tiny(2)).unwrap();
            assert_eq!(a.estimate_y0.to_bits(), b.estimate_y0.to_bits(), "{scheme}");
            assert_eq!(a.value_nets.len(), 4);
            if scheme != Scheme::TwoEmdbdp {
                assert_eq!(a.gamma_nets.len(), 2);
                assert!(a.gamma_losses.iter().all(|l| l.is_finite()));
            }
        }
    }

    #[test]
    fn configuration_errors() {
        let grid = TimeGrid::new(1.0, 4, 2).unwrap();
        let cva = crate::problems::make_cva_problem(1, 0.2, 0.03, 1.0).unwrap();
        assert!(matches!(solve(&cva, &grid, Scheme::TwoMdbdp, &tiny(0)), Err(TrainError::Config(_))));
        let p = problem(&SIGMA, Driver::FullyNonlinear(Arc::new(ZeroDriver)), quad(false));
        assert!(matches!(solve(&p, &grid, Scheme::TwoEmdbdp, &tiny(0)), Err(TrainError::Config(_))));
        let singular = problem(&[1.0, 1.0, 1.0, 1.0], Driver::FullyNonlinear(Arc::new(ZeroDriver)), quad(true));
        assert!(solve(&singular, &grid, Scheme::TwoMdbdp, &tiny(0)).is_err());
        let m = crate::problems::make_merton_problem(0.5, &[0.6], 1.0, 1.0).unwrap();
        assert!(matches!(solve(&m, &grid, Scheme::Dbdp1, &tiny(0)), Err(TrainError::Config(_))));
    }
}
