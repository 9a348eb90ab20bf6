//! Forward simulation: time grids, Euler–Maruyama paths, antithetic
//! companions and Malliavin weights for constant diffusion matrices.
//!
//! Matrices are row-major `Vec<f64>`. Randomness comes from ChaCha streams
//! keyed by a 64-bit run key, with one stream per path index, so a batch is
//! reproducible regardless of how paths are scheduled across threads.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time grid: {0}")]
    Grid(String),
    #[error("non-finite coefficient at step {step} of path {path}")]
    NonFinite { path: usize, step: usize },
    #[error("diffusion matrix is singular")]
    Singular,
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform partition of `[0, T]` into `steps` intervals with a coarse subgrid
/// made of every `kappa_hat`-th point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    maturity: f64,
    steps: usize,
    kappa_hat: usize,
}

impl TimeGrid {
    pub fn new(maturity: f64, steps: usize, kappa_hat: usize) -> Result<Self, SimError> {
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(SimError::Grid(format!("maturity must be positive, got {maturity}")));
        }
        if steps == 0 || kappa_hat == 0 {
            return Err(SimError::Grid("step counts must be positive".into()));
        }
        if steps % kappa_hat != 0 {
            return Err(SimError::Grid(format!(
                "subgrid divisor {kappa_hat} does not divide {steps} steps"
            )));
        }
        Ok(Self {
            maturity,
            steps,
            kappa_hat,
        })
    }

    /// Grid without a distinct coarse level (`kappa_hat = 1`).
    pub fn uniform(maturity: f64, steps: usize) -> Result<Self, SimError> {
        Self::new(maturity, steps, 1)
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kappa_hat(&self) -> usize {
        self.kappa_hat
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.steps as f64
    }

    pub fn coarse_steps(&self) -> usize {
        self.steps / self.kappa_hat
    }

    pub fn coarse_dt(&self) -> f64 {
        self.kappa_hat as f64 * self.dt()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    /// Fine index of coarse point `l`.
    pub fn coarse_index(&self, l: usize) -> usize {
        l * self.kappa_hat
    }
}

/// SplitMix64 finalizer, used to derive independent stream keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of tags into a single stream key.
pub fn stream_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed), |k, &t| mix64(k ^ mix64(t)))
}

/// Generator for path `path` under `key`.
pub fn path_rng(key: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(path);
    rng
}

/// Box–Muller transform of two uniforms.
#[inline]
pub fn normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // 1 - U lies in (0, 1], keeping the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = std::f64::consts::TAU * u2;
    (r * th.cos(), r * th.sin())
}

pub fn fill_normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for c in &mut chunks {
        let (a, b) = normal_pair(rng);
        c[0] = a;
        c[1] = b;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(rng).0;
    }
}

/// Coefficients of the training diffusion `dX = μ(t,X) dt + σ(t,X) dW`.
pub trait Diffusion: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major `d × d`.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// `(μ, σ)` when both are constant.
    fn constant(&self) -> Option<(&[f64], &[f64])> {
        None
    }
}

/// Constant drift vector and diffusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantCoefficients {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ConstantCoefficients {
    pub fn new(drift: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), drift.len() * drift.len());
        Self { drift, sigma }
    }

    pub fn diagonal(drift: Vec<f64>, vols: &[f64]) -> Self {
        Self::new(drift, diag(vols))
    }

    pub fn standard(d: usize) -> Self {
        Self::diagonal(vec![0.0; d], &vec![1.0; d])
    }
}

impl Diffusion for ConstantCoefficients {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }

    fn constant(&self) -> Option<(&[f64], &[f64])> {
        Some((&self.drift, &self.sigma))
    }
}

/// Driftless multi-asset Black–Scholes: `dX^k = vol·X^k dW^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricBrownian {
    pub dim: usize,
    pub vol: f64,
}

impl Diffusion for GeometricBrownian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, xk) in x.iter().enumerate() {
            out[k * self.dim + k] = self.vol * xk;
        }
    }
}

pub fn diag(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut m = vec![0.0; d * d];
    for (k, &x) in v.iter().enumerate() {
        m[k * d + k] = x;
    }
    m
}

/// `out = m · v` for row-major square `m`.
#[inline]
pub fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(d)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out = mᵀ · v` for row-major square `m`.
#[inline]
pub fn mat_t_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &vi) in m.chunks_exact(d).zip(v) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// Simulated trajectories and the increments that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    batch_size: usize,
    steps: usize,
    dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
}

impl PathBatch {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let off = (path * (self.steps + 1) + i) * self.dim;
        &self.states[off..off + self.dim]
    }

    #[inline]
    pub fn increment(&self, path: usize, i: usize) -> &[f64] {
        let off = (path * self.steps + i) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// `W_{t_to} − W_{t_from}` for one path.
    pub fn increment_sum(&self, path: usize, from: usize, to: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in from..to {
            for (o, w) in out.iter_mut().zip(self.increment(path, i)) {
                *o += w;
            }
        }
    }

    /// CSV dump with columns `path_id, step, x_1..x_d, dW_1..dW_d`; the last
    /// step has empty increment fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        let mut header = vec!["path_id".to_string(), "step".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x_{k}")));
        header.extend((1..=self.dim).map(|k| format!("dW_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for b in 0..self.batch_size {
            for i in 0..=self.steps {
                let mut row = vec![b.to_string(), i.to_string()];
                row.extend(self.state(b, i).iter().map(|v| v.to_string()));
                if i < self.steps {
                    row.extend(self.increment(b, i).iter().map(|v| v.to_string()));
                } else {
                    row.extend(std::iter::repeat(String::new()).take(self.dim));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Euler–Maruyama simulation of `batch_size` paths started at `x0`.
pub fn simulate_paths(
    grid: &TimeGrid,
    x0: &[f64],
    coeffs: &dyn Diffusion,
    batch_size: usize,
    key: u64,
) -> Result<PathBatch, SimError> {
    simulate_prefix(grid, grid.steps(), x0, coeffs, batch_size, key)
}

/// Same as [`simulate_paths`] but stops after the first `steps` grid steps.
/// Path `b` agrees with the first `steps` steps of the full simulation under the same key.
pub fn simulate_prefix(
    grid: &TimeGrid,
    steps: usize,
    x0: &[f64],
    coeffs: &dyn Diffusion,
    batch_size: usize,
    key: u64,
) -> Result<PathBatch, SimError> {
    if steps > grid.steps() {
        return Err(SimError::Grid(format!("{steps} steps requested on a grid of {}", grid.steps())));
    }
    let d = coeffs.dim();
    if x0.len() != d {
        return Err(SimError::Dim {
            expected: d,
            got: x0.len(),
        });
    }
    if batch_size == 0 {
        return Err(SimError::EmptyBatch);
    }
    let n = steps;
    let sqdt = grid.dt().sqrt();
    let mut states = vec![0.0; batch_size * (n + 1) * d];
    let mut increments = vec![0.0; batch_size * n * d];
    states
        .par_chunks_mut((n + 1) * d)
        .zip(increments.par_chunks_mut(n * d))
        .enumerate()
        .try_for_each(|(b, (xs, dws))| {
            let mut rng = path_rng(key, b as u64);
            fill_normals(&mut rng, dws);
            dws.iter_mut().for_each(|w| *w *= sqdt);
            euler_path(grid, x0, coeffs, xs, dws).map_err(|step| SimError::NonFinite { path: b, step })
        })?;
    Ok(PathBatch {
        batch_size,
        steps: n,
        dim: d,
        states,
        increments,
    })
}

/// Replays the Euler recursion for one path from its stored increments.
/// Returns the failing step index on a non-finite state.
fn euler_path(
    grid: &TimeGrid,
    x0: &[f64],
    coeffs: &dyn Diffusion,
    xs: &mut [f64],
    dws: &[f64],
) -> Result<(), usize> {
    let d = x0.len();
    let steps = dws.len() / d;
    let dt = grid.dt();
    let mut mu = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut sdw = vec![0.0; d];
    xs[..d].copy_from_slice(x0);
    for i in 0..steps {
        let (cur, next) = xs[i * d..(i + 2) * d].split_at_mut(d);
        let t = grid.time(i);
        coeffs.drift(t, cur, &mut mu);
        coeffs.diffusion(t, cur, &mut sig);
        mat_vec(&sig, &dws[i * d..(i + 1) * d], &mut sdw);
        for k in 0..d {
            next[k] = cur[k] + mu[k] * dt + sdw[k];
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(i);
        }
    }
    Ok(())
}

/// Reflected companion `X + μ·span_dt − σ·ΔŴ` of the forward state
/// `X + μ·span_dt + σ·ΔŴ`.
pub fn antithetic_states(anchor: &[f64], mu: &[f64], sigma: &[f64], dw: &[f64], span_dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; anchor.len()];
    antithetic_into(anchor, mu, sigma, dw, span_dt, &mut out);
    out
}

#[inline]
pub fn antithetic_into(anchor: &[f64], mu: &[f64], sigma: &[f64], dw: &[f64], span_dt: f64, out: &mut [f64]) {
    mat_vec(sigma, dw, out);
    for ((o, a), m) in out.iter_mut().zip(anchor).zip(mu) {
        *o = a + m * span_dt - *o;
    }
}

/// Forward counterpart of [`antithetic_into`].
#[inline]
pub fn forward_into(anchor: &[f64], mu: &[f64], sigma: &[f64], dw: &[f64], span_dt: f64, out: &mut [f64]) {
    mat_vec(sigma, dw, out);
    for ((o, a), m) in out.iter_mut().zip(anchor).zip(mu) {
        *o += a + m * span_dt;
    }
}

/// Malliavin weights for a constant invertible diffusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinWeights {
    dim: usize,
    sigma_inv: Vec<f64>,
}

impl MalliavinWeights {
    pub fn new(sigma: &[f64]) -> Result<Self, SimError> {
        let d = (sigma.len() as f64).sqrt().round() as usize;
        if d * d != sigma.len() || d == 0 {
            return Err(SimError::Dim {
                expected: d * d,
                got: sigma.len(),
            });
        }
        let inv = DMatrix::from_row_slice(d, d, sigma)
            .try_inverse()
            .ok_or(SimError::Singular)?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Singular);
        }
        let mut sigma_inv = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                sigma_inv[r * d + c] = inv[(r, c)];
            }
        }
        Ok(Self { dim: d, sigma_inv })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(σᵀ)⁻¹ ΔŴ / dt`.
    pub fn h1_into(&self, dw: &[f64], dt: f64, out: &mut [f64]) {
        mat_t_vec(&self.sigma_inv, dw, out);
        out.iter_mut().for_each(|o| *o /= dt);
    }

    /// `(σᵀ)⁻¹ [ΔŴΔŴᵀ − span·dt·I] σ⁻¹ / (span·dt)²`, row-major.
    pub fn h2_into(&self, dw: &[f64], span: usize, dt: f64, out: &mut [f64]) {
        let d = self.dim;
        let h = span as f64 * dt;
        // v = (σᵀ)⁻¹ ΔŴ, so (σᵀ)⁻¹ ΔŴΔŴᵀ σ⁻¹ = v vᵀ; the identity part is (σσᵀ)⁻¹.
        let mut v = vec![0.0; d];
        mat_t_vec(&self.sigma_inv, dw, &mut v);
        let si = &self.sigma_inv;
        for a in 0..d {
            for b in 0..d {
                let mut sst = 0.0;
                for k in 0..d {
                    sst += si[k * d + a] * si[k * d + b];
                }
                out[a * d + b] = (v[a] * v[b] - h * sst) / (h * h);
            }
        }
    }
}

/// Order-one weight `(σᵀ)⁻¹ ΔŴ / dt`.
pub fn malliavin_h1(sigma: &[f64], dw: &[f64], dt: f64) -> Result<Vec<f64>, SimError> {
    let w = MalliavinWeights::new(sigma)?;
    let mut out = vec![0.0; w.dim()];
    w.h1_into(dw, dt, &mut out);
    Ok(out)
}

/// Order-two weight over `span` coarse steps of length `dt`.
pub fn malliavin_h2(sigma: &[f64], dw: &[f64], span: usize, dt: f64) -> Result<Vec<f64>, SimError> {
    let w = MalliavinWeights::new(sigma)?;
    let mut out = vec![0.0; w.dim() * w.dim()];
    w.h2_into(dw, span, dt, &mut out);
    Ok(out)
}
