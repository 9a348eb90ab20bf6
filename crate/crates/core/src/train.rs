//! Shared training machinery: configuration, the Adam loop, deterministic
//! mini-batch reduction and the result record every scheme returns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{adam_step, Activation, AdamState, FeedforwardNet, LrSchedule, NnError};
use crate::problems::ProblemError;
use crate::sim::{path_rng, simulate_paths, stream_key, Diffusion, SimError, TimeGrid};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged in {stage} at time step {step}, iteration {iteration}")]
    Divergence {
        stage: String,
        step: usize,
        iteration: usize,
    },
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::Divergence { .. })
    }
}

/// Hyperparameters shared by every scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Iterations at the first trained step (the terminal one for backward schemes).
    pub first_step_iters: usize,
    pub iters_per_step: usize,
    /// Iterations for each warm-started Hessian-network fit.
    pub gamma_iters: usize,
    /// Iterations for the first (cold-started) Hessian-network fit.
    pub gamma_first_iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_plateaus: usize,
    /// Defaults to two layers of width `d + 10`.
    pub hidden_widths: Option<Vec<usize>>,
    /// Defaults to the problem's activation.
    pub activation: Option<Activation>,
    pub seed: u64,
    /// Number of trailing batch losses averaged into the reported step loss.
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            first_step_iters: 4000,
            iters_per_step: 400,
            gamma_iters: 1000,
            gamma_first_iters: 4000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            lr_plateaus: 6,
            hidden_widths: None,
            activation: None,
            seed: 0,
            loss_window: 10,
        }
    }
}

impl TrainConfig {
    pub fn widths(&self, d: usize) -> Vec<usize> {
        self.hidden_widths.clone().unwrap_or_else(|| vec![d + 10, d + 10])
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.hidden_widths.as_ref().is_some_and(|w| w.contains(&0)) {
            return Err(TrainError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, budget: usize) -> LrSchedule {
        LrSchedule::geometric(self.lr_start, self.lr_end, self.lr_plateaus, budget as u64)
    }

    /// Glorot-initialized network drawn from the run's seed and `tags`.
    pub fn fresh_net(
        &self,
        input: usize,
        output: usize,
        activation: Activation,
        tags: &[u64],
    ) -> Result<FeedforwardNet, TrainError> {
        let mut rng = path_rng(stream_key(self.seed, tags), u64::MAX);
        Ok(FeedforwardNet::glorot(input, output, &self.widths(input), activation, &mut rng)?)
    }

    /// Batch key for iteration `iteration` of the stage identified by `tags`.
    pub fn batch_key(&self, tags: &[u64], iteration: usize) -> u64 {
        let mut all = tags.to_vec();
        all.push(iteration as u64);
        stream_key(self.seed, &all)
    }
}

/// Per-coordinate mean and standard deviation of `X_N` over a pilot batch,
/// used as the fixed input standardization of every network of a run.
/// Degenerate coordinates get unit scale.
pub fn pilot_normalization(
    grid: &TimeGrid,
    x0: &[f64],
    dynamics: &dyn Diffusion,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = grid.steps();
    let b = cfg.batch_size.max(2);
    let paths = simulate_paths(grid, x0, dynamics, b, stream_key(cfg.seed, &[PILOT]))?;
    let d = x0.len();
    let mut center = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for k in 0..d {
        let xs: Vec<f64> = (0..b).map(|p| paths.state(p, n)[k]).collect();
        let (m, v) = mean_var(&xs);
        center[k] = m;
        scale[k] = if v.sqrt() > 1e-8 * m.abs().max(1.0) { v.sqrt() } else { 1.0 };
    }
    Ok((center, scale))
}

const PILOT: u64 = 0x9170;

/// Trainable parameters: free scalars followed by networks, flattened in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub scalars: Vec<f64>,
    pub nets: Vec<FeedforwardNet>,
}

impl ParamSet {
    pub fn of_nets(nets: Vec<FeedforwardNet>) -> Self {
        Self {
            scalars: Vec::new(),
            nets,
        }
    }

    pub fn len(&self) -> usize {
        self.scalars.len() + self.nets.iter().map(FeedforwardNet::num_params).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start of each network's block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut o = self.scalars.len();
        self.nets
            .iter()
            .map(|n| {
                let s = o;
                o += n.num_params();
                s
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.scalars.clone();
        for n in &self.nets {
            v.extend_from_slice(n.params());
        }
        v
    }

    pub fn load(&mut self, flat: &[f64]) {
        let k = self.scalars.len();
        self.scalars.copy_from_slice(&flat[..k]);
        let mut o = k;
        for n in &mut self.nets {
            let m = n.num_params();
            n.params_mut().copy_from_slice(&flat[o..o + m]);
            o += m;
        }
    }
}

/// Runs `iters` Adam updates. `batch` fills the mean mini-batch gradient
/// for iteration `it` and returns the mean loss. Returns the mean of the
/// trailing `loss_window` losses.
pub fn minimize<F>(set: &mut ParamSet, iters: usize, cfg: &TrainConfig, mut batch: F) -> Result<f64, TrainError>
where
    F: FnMut(&ParamSet, usize, &mut [f64]) -> Result<f64, TrainError>,
{
    let n = set.len();
    let mut flat = set.flatten();
    let mut grad = vec![0.0; n];
    let mut state = AdamState::new(n, cfg.schedule(iters));
    let window = cfg.loss_window.max(1);
    let mut recent = std::collections::VecDeque::with_capacity(window);
    let diverged = |iteration| TrainError::Divergence {
        stage: String::new(),
        step: 0,
        iteration,
    };
    for it in 0..iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = batch(set, it, &mut grad)?;
        if !loss.is_finite() {
            return Err(diverged(it));
        }
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(loss);
        adam_step(&mut flat, &grad, &mut state).map_err(|_| diverged(it))?;
        set.load(&flat);
    }
    Ok(if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    })
}

/// Tags a divergence with its stage and time step.
pub fn at_step(stage: &str, step: usize) -> impl Fn(TrainError) -> TrainError + '_ {
    move |e| match e {
        TrainError::Divergence { iteration, .. } => TrainError::Divergence {
            stage: stage.to_string(),
            step,
            iteration,
        },
        other => other,
    }
}

/// Samples per reduction chunk. Fixed so the summation order, and hence every
/// result bit, does not depend on the thread count.
pub const CHUNK: usize = 50;

/// Mean loss and mean gradient over `n` samples. `per_sample` adds its
/// sample's gradient into the buffer and returns its loss.
pub fn reduce_gradient<S, I, F>(n: usize, n_params: usize, init: I, per_sample: F) -> (f64, Vec<f64>)
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize, &mut [f64]) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<(f64, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut scratch = init();
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            for b in c * CHUNK..((c + 1) * CHUNK).min(n) {
                loss += per_sample(&mut scratch, b, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in parts {
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (total * scale, grad)
}

/// Mean of `per_sample` over `n` samples with the same chunked order.
pub fn reduce_mean<S, I, F>(n: usize, init: I, per_sample: F) -> f64
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut scratch = init();
            (c * CHUNK..((c + 1) * CHUNK).min(n)).map(|b| per_sample(&mut scratch, b)).sum()
        })
        .collect();
    parts.iter().sum::<f64>() / n as f64
}

/// Sample mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Every solver in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "deep_bsde")]
    DeepBsde,
    #[serde(rename = "dbdp1")]
    Dbdp1,
    #[serde(rename = "dbdp2")]
    Dbdp2,
    #[serde(rename = "regression")]
    Regression,
    #[serde(rename = "deep_splitting")]
    DeepSplitting,
    #[serde(rename = "mdbdp")]
    Mdbdp,
    #[serde(rename = "2emdbdp")]
    TwoEmdbdp,
    #[serde(rename = "2mdbdp")]
    TwoMdbdp,
    #[serde(rename = "2m2dbdp")]
    TwoM2dbdp,
    #[serde(rename = "nncontpi")]
    NnContPi,
    #[serde(rename = "hybrid_now")]
    HybridNow,
}

impl Scheme {
    pub const ALL: [Scheme; 11] = [
        Scheme::DeepBsde,
        Scheme::Dbdp1,
        Scheme::Dbdp2,
        Scheme::Regression,
        Scheme::DeepSplitting,
        Scheme::Mdbdp,
        Scheme::TwoEmdbdp,
        Scheme::TwoMdbdp,
        Scheme::TwoM2dbdp,
        Scheme::NnContPi,
        Scheme::HybridNow,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::DeepBsde => "deep_bsde",
            Scheme::Dbdp1 => "dbdp1",
            Scheme::Dbdp2 => "dbdp2",
            Scheme::Regression => "regression",
            Scheme::DeepSplitting => "deep_splitting",
            Scheme::Mdbdp => "mdbdp",
            Scheme::TwoEmdbdp => "2emdbdp",
            Scheme::TwoMdbdp => "2mdbdp",
            Scheme::TwoM2dbdp => "2m2dbdp",
            Scheme::NnContPi => "nncontpi",
            Scheme::HybridNow => "hybrid_now",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    /// Stream tag separating the random numbers of different schemes.
    pub fn tag(self) -> u64 {
        Self::ALL.iter().position(|s| *s == self).expect("listed") as u64 + 1
    }

    pub fn is_semilinear(self) -> bool {
        matches!(
            self,
            Scheme::DeepBsde | Scheme::Dbdp1 | Scheme::Dbdp2 | Scheme::Regression | Scheme::DeepSplitting | Scheme::Mdbdp
        )
    }

    pub fn is_fully_nonlinear(self) -> bool {
        matches!(self, Scheme::TwoEmdbdp | Scheme::TwoMdbdp | Scheme::TwoM2dbdp)
    }

    pub fn is_control(self) -> bool {
        matches!(self, Scheme::NnContPi | Scheme::HybridNow)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Output of a PDE scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub scheme: Scheme,
    /// Trained value at `(0, x₀)`.
    pub estimate_y0: f64,
    /// Final training loss per fine time step (a single entry for the global scheme).
    pub step_losses: Vec<f64>,
    /// Final loss per coarse Hessian fit; `NaN` where no fit happened.
    pub gamma_losses: Vec<f64>,
    pub runtime_s: f64,
    pub seed: u64,
    /// `𝒰_i`, `i = 0..N−1` (empty for the global scheme).
    pub value_nets: Vec<FeedforwardNet>,
    /// `𝒵_i`, indexed like the value networks; for the global scheme
    /// `𝒵_1..𝒵_{N−1}` with `z0` holding the constant initial gradient.
    pub z_nets: Vec<FeedforwardNet>,
    pub z0: Option<Vec<f64>>,
    /// `Γ̂_ℓ` for `ℓ = 0..N̂−1`.
    pub gamma_nets: Vec<FeedforwardNet>,
}
