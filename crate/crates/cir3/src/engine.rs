//! Simulation of the one-, two-, and three-factor CIR systems.
//!
//! The cascade structure of the model makes the volatility factor v
//! autonomous, the pair (θ, v) autonomous, and the full triple (R, θ, v)
//! a Markov process:
//!
//! ```text
//! dR = k(θ − R) dt   + α √(|vR|) dW¹
//! dθ = k_θ(ζ − θ) dt + αβ √(|vθ|) dW²
//! dv = k_v(η − v) dt + γ √(|v|) dW³
//! ```
//!
//! Two schemes are provided. Full-truncation Euler evaluates every
//! coefficient at the positive part of the state and clamps after the
//! update. The default mixed scheme advances v by sampling the exact CIR
//! transition law (a Gamma–Poisson mixture) and the remaining coordinates
//! by full-truncation Euler conditioned on the piecewise v values, which
//! removes the dominant discretization bias from downstream statistics.
//!
//! Synchronously coupled pairs drive two solutions with bitwise-identical
//! increments and expose the raw (unclamped) difference of the coordinate
//! the relevant contraction estimate speaks about.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{sample_increments, BrownianIncrements, NoiseStream};
use crate::params::ModelParams;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite state at path {path}, step {step}; the time step is likely too large")]
    NonFiniteState { path: usize, step: usize },
    #[error("coupling pattern violation: {0}")]
    CouplingPatternViolation(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(&'static str),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes; not a CIR3 cache file")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid factor count {0} in header")]
    BadFactorCount(u32),
    #[error("cache body is truncated or not a whole number of records")]
    Truncated,
    #[error("inconsistent records: {0}")]
    Inconsistent(&'static str),
}

/// Full three-factor state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State3 {
    pub r: f64,
    pub theta: f64,
    pub v: f64,
}

/// Discretization grid; recorded times are multiples of `record_stride · dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
    pub record_stride: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize, record_stride: usize) -> Result<Self, EngineError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(EngineError::InvalidGrid("dt must be positive and finite"));
        }
        if n_steps == 0 {
            return Err(EngineError::InvalidGrid("n_steps must be at least 1"));
        }
        if record_stride == 0 || n_steps % record_stride != 0 {
            return Err(EngineError::InvalidGrid(
                "record_stride must be >= 1 and divide n_steps",
            ));
        }
        Ok(Self { dt, n_steps, record_stride })
    }

    /// Number of recorded states, including t = 0.
    pub fn n_recorded(&self) -> usize {
        self.n_steps / self.record_stride + 1
    }

    pub fn recorded_times(&self) -> Vec<f64> {
        (0..self.n_recorded())
            .map(|i| (i * self.record_stride) as f64 * self.dt)
            .collect()
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerFullTruncation,
    ExactVEulerRest,
}

/// Initial law for one coordinate; constants are first-class since the
/// ergodicity statements quantify over arbitrary initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    Constant(f64),
    Gamma { shape: f64, scale: f64 },
    /// The stationary Gamma law of the v-factor for the active parameters.
    StationaryGamma,
}

impl InitialLaw {
    fn draw(&self, stream: &mut NoiseStream, params: &ModelParams) -> f64 {
        match *self {
            InitialLaw::Constant(x) => x,
            InitialLaw::Gamma { shape, scale } => stream.gamma(shape, scale),
            InitialLaw::StationaryGamma => stream.gamma_stationary(&params.stationary_gamma()),
        }
    }
}

/// Simulation request for `simulate_ensemble`.
///
/// `initial_laws` is ordered by coordinate: `[v]` for one factor,
/// `[θ, v]` for two, `[R, θ, v]` for three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub factors: usize,
    pub initial_laws: Vec<InitialLaw>,
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub n_paths: usize,
    pub root_seed: u64,
}

/// Recorded trajectories, laid out `[path][recorded time][coordinate]` with
/// coordinates in the order (R, θ, v) restricted to the active factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub factors: usize,
    pub n_paths: usize,
    pub root_seed: u64,
    data: Vec<f64>,
}

impl PathEnsemble {
    /// Rebuilds an ensemble from externally held data (e.g. a cache file);
    /// the flat layout must match `[path][recorded time][coordinate]`.
    pub fn from_parts(
        grid: TimeGrid,
        scheme: Scheme,
        factors: usize,
        n_paths: usize,
        root_seed: u64,
        data: Vec<f64>,
    ) -> Result<Self, EngineError> {
        if !(1..=3).contains(&factors) || data.len() != n_paths * grid.n_recorded() * factors {
            return Err(EngineError::InvalidSpec(
                "data length must equal n_paths * n_recorded * factors",
            ));
        }
        Ok(Self { grid, scheme, factors, n_paths, root_seed, data })
    }

    /// The recorded state of `path` at recorded index `rec`.
    pub fn state(&self, path: usize, rec: usize) -> &[f64] {
        let n_rec = self.grid.n_recorded();
        let base = (path * n_rec + rec) * self.factors;
        &self.data[base..base + self.factors]
    }

    /// All paths' values of coordinate `coord` at recorded index `rec`.
    pub fn coord_at(&self, rec: usize, coord: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, rec)[coord]).collect()
    }

    pub fn mean_at(&self, rec: usize, coord: usize) -> f64 {
        let vals = self.coord_at(rec, coord);
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.recorded_times()
    }

    pub fn raw_data(&self) -> &[f64] {
        &self.data
    }
}

/// Two ensembles driven by identical noise, plus the raw (unclamped)
/// per-path difference of the coupled coordinate at each recorded time.
#[derive(Debug, Clone)]
pub struct CoupledEnsemble {
    pub first: PathEnsemble,
    pub second: PathEnsemble,
    /// `[path][recorded time]`, difference before any clamping.
    deltas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    /// Lemma-4.1 style: two v-solutions, arbitrary distinct initials.
    VCoupling,
    /// θ-contraction: identical v-initials (hence identical v-paths).
    ThetaCoupling,
    /// R-contraction: identical (θ, v)-initials.
    RCoupling,
}

impl CouplingKind {
    pub fn factors(self) -> usize {
        match self {
            CouplingKind::VCoupling => 1,
            CouplingKind::ThetaCoupling => 2,
            CouplingKind::RCoupling => 3,
        }
    }
}

impl CoupledEnsemble {
    pub fn delta(&self, path: usize, rec: usize) -> f64 {
        self.deltas[path * self.first.grid.n_recorded() + rec]
    }

    pub fn deltas_at(&self, rec: usize) -> Vec<f64> {
        (0..self.first.n_paths).map(|p| self.delta(p, rec)).collect()
    }

    pub fn mean_abs_delta(&self, rec: usize) -> f64 {
        let d = self.deltas_at(rec);
        d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64
    }
}

/// Drift vector b(R, θ, v) = (k(θ−R), k_θ(ζ−θ), k_v(η−v)).
pub fn drift(state: &State3, params: &ModelParams) -> [f64; 3] {
    [
        params.k * (state.theta - state.r),
        params.k_theta * (params.zeta - state.theta),
        params.k_v * (params.eta - state.v),
    ]
}

/// Diffusion matrix σ(R, θ, v); absolute values are applied before the
/// square roots, matching the |·| in the model equations.
///
/// ```text
///     ⎡ α√(ρ̄vR)  ρ_θα√(vR)  ρ_vα√(vR) ⎤
/// σ = ⎢    0       αβ√(vθ)      0      ⎥
///     ⎣    0          0        γ√v     ⎦
/// ```
pub fn diffusion(state: &State3, params: &ModelParams) -> [[f64; 3]; 3] {
    let vr = (state.v * state.r).abs().sqrt();
    let vt = (state.v * state.theta).abs().sqrt();
    let sv = state.v.abs().sqrt();
    [
        [
            params.alpha * params.rho_bar().sqrt() * vr,
            params.rho_theta * params.alpha * vr,
            params.rho_v * params.alpha * vr,
        ],
        [0.0, params.alpha * params.beta * vt, 0.0],
        [0.0, 0.0, params.gamma * sv],
    ]
}

/// One full-truncation Euler update without the final clamp.
///
/// Coefficients are evaluated at the positive parts of the coordinates;
/// the raw output may dip below zero, which couplings need to see.
fn euler_step_raw(s: &State3, inc: &BrownianIncrements, p: &ModelParams) -> State3 {
    let rp = s.r.max(0.0);
    let tp = s.theta.max(0.0);
    let vp = s.v.max(0.0);
    State3 {
        r: s.r + p.k * (tp - rp) * inc.dt + p.alpha * (vp * rp).sqrt() * inc.dw1,
        theta: s.theta
            + p.k_theta * (p.zeta - tp) * inc.dt
            + p.alpha * p.beta * (vp * tp).sqrt() * inc.dw2,
        v: s.v + p.k_v * (p.eta - vp) * inc.dt + p.gamma * vp.sqrt() * inc.dw3,
    }
}

/// Full-truncation Euler step: positive-part coefficients, then clamp at 0.
pub fn step_euler_full_truncation(
    state: &State3,
    inc: &BrownianIncrements,
    params: &ModelParams,
) -> Result<State3, EngineError> {
    let raw = euler_step_raw(state, inc, params);
    let out = State3 {
        r: raw.r.max(0.0),
        theta: raw.theta.max(0.0),
        v: raw.v.max(0.0),
    };
    if !(out.r.is_finite() && out.theta.is_finite() && out.v.is_finite()) {
        return Err(EngineError::NonFiniteState { path: 0, step: 0 });
    }
    Ok(out)
}

/// Samples the exact CIR transition v_{t+dt} | v_t = v.
///
/// With e = e^(−k_v·dt), c = γ²(1−e)/(4k_v), d = 4k_vη/γ² and
/// noncentrality λ = v·e/c, the transition is c·χ²_d(λ), realized as the
/// Gamma–Poisson mixture 2c·Gamma(d/2 + N) with N ~ Poisson(λ/2). The
/// output is exactly nonnegative and reproduces the conditional mean
/// η + (v − η)e^(−k_v·dt).
pub fn step_cir_exact(v: f64, dt: f64, params: &ModelParams, stream: &mut NoiseStream) -> f64 {
    debug_assert!(v >= 0.0 && dt > 0.0);
    let e = (-params.k_v * dt).exp();
    let c = params.gamma * params.gamma * (1.0 - e) / (4.0 * params.k_v);
    let d = 4.0 * params.k_v * params.eta / (params.gamma * params.gamma);
    let lambda = v * e / c;
    let n = stream.poisson(0.5 * lambda);
    2.0 * c * stream.gamma(0.5 * d + n as f64, 1.0)
}

/// Index of the first active coordinate in canonical (R, θ, v) order.
fn first_coord(factors: usize) -> usize {
    3 - factors
}

/// Advances one path, recording the active coordinates at stride points.
/// Returns Err(step) on a non-finite state.
fn simulate_path_into(
    out: &mut [f64],
    factors: usize,
    laws: &[InitialLaw],
    grid: &TimeGrid,
    scheme: Scheme,
    params: &ModelParams,
    stream: &mut NoiseStream,
) -> Result<(), usize> {
    let lo = first_coord(factors);
    let mut state = State3 { r: 0.0, theta: 0.0, v: 0.0 };
    {
        let coords = [&mut state.r, &mut state.theta, &mut state.v];
        let mut laws_it = laws.iter();
        for (c, slot) in coords.into_iter().enumerate() {
            if c >= lo {
                *slot = laws_it.next().expect("one law per active factor").draw(stream, params);
            }
        }
    }

    let record = |state: &State3, rec: usize, out: &mut [f64]| {
        let base = rec * factors;
        let all = [state.r, state.theta, state.v];
        out[base..base + factors].copy_from_slice(&all[lo..]);
    };
    record(&state, 0, out);

    for step in 1..=grid.n_steps {
        let inc = match factors {
            3 => sample_increments(stream, grid.dt, params),
            2 => {
                let g2 = stream.normal();
                let g3 = stream.normal();
                let s = grid.dt.sqrt();
                BrownianIncrements { dw1: 0.0, dw2: s * g2, dw3: s * g3, dt: grid.dt }
            }
            1 => {
                let g3 = stream.normal();
                BrownianIncrements { dw1: 0.0, dw2: 0.0, dw3: grid.dt.sqrt() * g3, dt: grid.dt }
            }
            _ => unreachable!("factor count validated"),
        };
        let mut next = match step_euler_full_truncation(&state, &inc, params) {
            Ok(s) => s,
            Err(_) => return Err(step),
        };
        if scheme == Scheme::ExactVEulerRest {
            // v advances by its exact transition; θ and R keep the Euler
            // update conditioned on the pre-step v.
            next.v = step_cir_exact(state.v, grid.dt, params, stream);
        }
        if !(next.r.is_finite() && next.theta.is_finite() && next.v.is_finite()) {
            return Err(step);
        }
        state = next;
        if step % grid.record_stride == 0 {
            record(&state, step / grid.record_stride, out);
        }
    }
    Ok(())
}

/// Simulates `n_paths` independent trajectories, path-parallel.
///
/// Each path owns the stream `(root_seed, path_index)`, so the result is
/// byte-identical for a fixed spec regardless of the worker count.
pub fn simulate_ensemble(spec: &EnsembleSpec, params: &ModelParams) -> Result<PathEnsemble, EngineError> {
    if !(1..=3).contains(&spec.factors) {
        return Err(EngineError::InvalidSpec("factors must be 1, 2, or 3"));
    }
    if spec.initial_laws.len() != spec.factors {
        return Err(EngineError::InvalidSpec("need exactly one initial law per factor"));
    }
    if spec.n_paths == 0 {
        return Err(EngineError::InvalidSpec("n_paths must be at least 1"));
    }
    let n_rec = spec.grid.n_recorded();
    let mut data = vec![0.0f64; spec.n_paths * n_rec * spec.factors];
    let chunk = n_rec * spec.factors;
    data.par_chunks_mut(chunk).enumerate().try_for_each(|(path, slot)| {
        let mut stream = NoiseStream::new(spec.root_seed, path as u64);
        simulate_path_into(
            slot,
            spec.factors,
            &spec.initial_laws,
            &spec.grid,
            spec.scheme,
            params,
            &mut stream,
        )
        .map_err(|step| EngineError::NonFiniteState { path, step })
    })?;
    Ok(PathEnsemble {
        grid: spec.grid,
        scheme: spec.scheme,
        factors: spec.factors,
        n_paths: spec.n_paths,
        root_seed: spec.root_seed,
        data,
    })
}

/// Simulates a synchronously coupled pair of solutions.
///
/// Both trajectories see bitwise-identical Brownian increments and share
/// the initial draws of every coordinate the coupling requires to agree:
/// v-coupling frees v, θ-coupling frees θ (shared v), R-coupling frees R
/// (shared θ and v). The coupled coordinate's raw difference is tracked
/// before clamping so sign changes are not masked.
///
/// Full-truncation Euler is used for every coordinate: the exact v-sampler
/// cannot be driven synchronously from two different starting points.
pub fn simulate_coupled(
    kind: CouplingKind,
    initials_first: &[InitialLaw],
    initials_second: &[InitialLaw],
    grid: &TimeGrid,
    params: &ModelParams,
    n_paths: usize,
    root_seed: u64,
) -> Result<CoupledEnsemble, EngineError> {
    let factors = kind.factors();
    if initials_first.len() != factors || initials_second.len() != factors {
        return Err(EngineError::InvalidSpec("need exactly one initial law per factor"));
    }
    if n_paths == 0 {
        return Err(EngineError::InvalidSpec("n_paths must be at least 1"));
    }
    // All coordinates after the first must be shared between the pair.
    for (i, (a, b)) in initials_first.iter().zip(initials_second).enumerate().skip(1) {
        if a != b {
            return Err(EngineError::CouplingPatternViolation(format!(
                "coordinate {i} of a {kind:?} pair must use identical initial laws, got {a:?} vs {b:?}"
            )));
        }
    }

    let lo = first_coord(factors);
    let n_rec = grid.n_recorded();
    let mut first = vec![0.0f64; n_paths * n_rec * factors];
    let mut second = vec![0.0f64; n_paths * n_rec * factors];
    let mut deltas = vec![0.0f64; n_paths * n_rec];

    first
        .par_chunks_mut(n_rec * factors)
        .zip(second.par_chunks_mut(n_rec * factors))
        .zip(deltas.par_chunks_mut(n_rec))
        .enumerate()
        .try_for_each(|(path, ((out_a, out_b), out_d))| {
            let mut stream = NoiseStream::new(root_seed, path as u64);
            // Shared coordinates are drawn once; the free coordinate is
            // drawn per side, in first-then-second order.
            let free_a = initials_first[0].draw(&mut stream, params);
            let free_b = initials_second[0].draw(&mut stream, params);
            let mut shared = [0.0f64; 3];
            for (c, slot) in shared.iter_mut().enumerate().skip(lo + 1) {
                *slot = initials_first[c - lo].draw(&mut stream, params);
            }
            let mut sa = State3 { r: shared[0], theta: shared[1], v: shared[2] };
            let mut sb = sa;
            match lo {
                0 => {
                    sa.r = free_a;
                    sb.r = free_b;
                }
                1 => {
                    sa.theta = free_a;
                    sb.theta = free_b;
                }
                _ => {
                    sa.v = free_a;
                    sb.v = free_b;
                }
            }

            let coupled = |s: &State3| match lo {
                0 => s.r,
                1 => s.theta,
                _ => s.v,
            };
            let record = |s: &State3, rec: usize, out: &mut [f64]| {
                let all = [s.r, s.theta, s.v];
                out[rec * factors..(rec + 1) * factors].copy_from_slice(&all[lo..]);
            };
            record(&sa, 0, out_a);
            record(&sb, 0, out_b);
            out_d[0] = coupled(&sa) - coupled(&sb);

            for step in 1..=grid.n_steps {
                let inc = match factors {
                    3 => sample_increments(&mut stream, grid.dt, params),
                    2 => {
                        let g2 = stream.normal();
                        let g3 = stream.normal();
                        let s = grid.dt.sqrt();
                        BrownianIncrements { dw1: 0.0, dw2: s * g2, dw3: s * g3, dt: grid.dt }
                    }
                    _ => {
                        let g3 = stream.normal();
                        BrownianIncrements { dw1: 0.0, dw2: 0.0, dw3: grid.dt.sqrt() * g3, dt: grid.dt }
                    }
                };
                let raw_a = euler_step_raw(&sa, &inc, params);
                let raw_b = euler_step_raw(&sb, &inc, params);
                let fin = |s: &State3| s.r.is_finite() && s.theta.is_finite() && s.v.is_finite();
                if !fin(&raw_a) || !fin(&raw_b) {
                    return Err(EngineError::NonFiniteState { path, step });
                }
                let clamp = |s: State3| State3 {
                    r: s.r.max(0.0),
                    theta: s.theta.max(0.0),
                    v: s.v.max(0.0),
                };
                if step % grid.record_stride == 0 {
                    out_d[step / grid.record_stride] = coupled(&raw_a) - coupled(&raw_b);
                }
                sa = clamp(raw_a);
                sb = clamp(raw_b);
                if step % grid.record_stride == 0 {
                    record(&sa, step / grid.record_stride, out_a);
                    record(&sb, step / grid.record_stride, out_b);
                }
            }
            Ok(())
        })?;

    let wrap = |data: Vec<f64>| PathEnsemble {
        grid: *grid,
        scheme: Scheme::EulerFullTruncation,
        factors,
        n_paths,
        root_seed,
        data,
    };
    Ok(CoupledEnsemble { first: wrap(first), second: wrap(second), deltas })
}

const CACHE_MAGIC: &[u8; 4] = b"CIR3";
const CACHE_VERSION: u32 = 1;

/// Writes the ensemble to the columnar binary cache format: a 16-byte
/// header (magic "CIR3", version, factor count, reserved word), then one
/// record per path per recorded time of little-endian f64 columns
/// (path, time, then the active coordinates in (R, θ, v) order).
pub fn write_cache<W: Write>(ens: &PathEnsemble, mut w: W) -> Result<(), CacheError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(ens.factors as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    let times = ens.times();
    for path in 0..ens.n_paths {
        for (rec, t) in times.iter().enumerate() {
            w.write_all(&(path as f64).to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
            for &x in ens.state(path, rec) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// An ensemble reconstructed from the cache; scheme and seed are not part
/// of the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedEnsemble {
    pub factors: usize,
    pub n_paths: usize,
    pub times: Vec<f64>,
    /// `[path][recorded time][coordinate]`, same layout as `PathEnsemble`.
    pub data: Vec<f64>,
}

impl CachedEnsemble {
    pub fn state(&self, path: usize, rec: usize) -> &[f64] {
        let base = (path * self.times.len() + rec) * self.factors;
        &self.data[base..base + self.factors]
    }

    pub fn coord_at(&self, rec: usize, coord: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, rec)[coord]).collect()
    }
}

pub fn read_cache<R: Read>(mut r: R) -> Result<CachedEnsemble, CacheError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| CacheError::Truncated)?;
    if &header[0..4] != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(CacheError::UnsupportedVersion(version));
    }
    let factors = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if !(1..=3).contains(&factors) {
        return Err(CacheError::BadFactorCount(factors));
    }
    let factors = factors as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let rec_bytes = 8 * (2 + factors);
    if body.is_empty() || body.len() % rec_bytes != 0 {
        return Err(CacheError::Truncated);
    }
    let n_records = body.len() / rec_bytes;
    let mut times = Vec::new();
    let mut data = Vec::with_capacity(n_records * factors);
    let mut expected_path = 0usize;
    let mut rec_in_path = 0usize;
    for i in 0..n_records {
        let at = |j: usize| {
            f64::from_le_bytes(body[i * rec_bytes + 8 * j..i * rec_bytes + 8 * (j + 1)].try_into().unwrap())
        };
        let path = at(0) as usize;
        let t = at(1);
        if path != expected_path {
            if path == expected_path + 1 && rec_in_path == times.len() {
                expected_path = path;
                rec_in_path = 0;
            } else {
                return Err(CacheError::Inconsistent("records are not grouped by path"));
            }
        }
        if expected_path == 0 {
            times.push(t);
        } else if times.get(rec_in_path).copied() != Some(t) {
            return Err(CacheError::Inconsistent("time grid differs across paths"));
        }
        rec_in_path += 1;
        for j in 0..factors {
            data.push(at(2 + j));
        }
    }
    if rec_in_path != times.len() {
        return Err(CacheError::Inconsistent("last path is incomplete"));
    }
    Ok(CachedEnsemble { factors, n_paths: expected_path + 1, times, data })
}

/// Writes the ensemble as CSV with a `path,time,...` header row.
pub fn write_csv<W: Write>(ens: &PathEnsemble, mut w: W) -> io::Result<()> {
    let names = ["R", "theta", "v"];
    let lo = first_coord(ens.factors);
    write!(w, "path,time")?;
    for name in &names[lo..] {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    let times = ens.times();
    for path in 0..ens.n_paths {
        for (rec, t) in times.iter().enumerate() {
            write!(w, "{path},{t}")?;
            for &x in ens.state(path, rec) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GammaStationary;

    fn default_params() -> ModelParams {
        ModelParams {
            k: 1.0,
            k_theta: 1.0,
            k_v: 1.0,
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.5,
            zeta: 1.0,
            eta: 1.0,
            rho_theta: 0.3,
            rho_v: 0.3,
        }
        .validate()
        .unwrap()
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn drift_equilibrium_and_components() {
        let p = default_params();
        let eq = State3 { r: p.zeta, theta: p.zeta, v: p.eta };
        assert_eq!(drift(&eq, &p), [0.0, 0.0, 0.0]);
        let s = State3 { r: 1.0, theta: 2.0, v: 1.0 };
        assert_eq!(drift(&s, &p)[0], 1.0);
    }

    #[test]
    fn drift_matches_noiseless_flow() {
        // One explicit Euler step of the deterministic system recovers the
        // drift as a finite difference to machine precision, and two grids
        // bracket the O(dt) flow error.
        let p = default_params();
        let s = State3 { r: 0.7, theta: 1.9, v: 0.4 };
        let b = drift(&s, &p);
        let dt = 1e-4;
        let flow = |mut x: State3, h: f64, n: usize| {
            for _ in 0..n {
                let bx = drift(&x, &p);
                x.r += bx[0] * h;
                x.theta += bx[1] * h;
                x.v += bx[2] * h;
            }
            x
        };
        let one = flow(s, dt, 1);
        assert!(((one.r - s.r) / dt - b[0]).abs() < 1e-12);
        assert!(((one.theta - s.theta) / dt - b[1]).abs() < 1e-12);
        assert!(((one.v - s.v) / dt - b[2]).abs() < 1e-12);
        // Flow over t = 0.01: finite difference matches drift within O(dt).
        let t = 0.01;
        let fine = flow(s, t / 100.0, 100);
        // Second-order flow term is ½(Db·b)t; here |Db·b| ≈ 2.1.
        assert!(((fine.r - s.r) / t - b[0]).abs() < 2.0 * t);
    }

    #[test]
    fn diffusion_vanishes_at_zero_v_and_reduces_to_identity() {
        let p = default_params();
        let zero = diffusion(&State3 { r: 1.0, theta: 1.0, v: 0.0 }, &p);
        for row in zero {
            for x in row {
                assert_eq!(x, 0.0);
            }
        }
        let id_params = ModelParams {
            alpha: 1.0,
            gamma: 1.0,
            rho_theta: 0.0,
            rho_v: 0.0,
            ..default_params()
        }
        .validate()
        .unwrap();
        let d = diffusion(&State3 { r: 1.0, theta: 1.0, v: 1.0 }, &id_params);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diffusion_gram_upper_left_is_alpha2_v_r() {
        // (σσᵀ)₁₁ = (ρ̄ + ρ_θ² + ρ_v²) α²vR = α²vR.
        let p = ModelParams {
            alpha: 1.0,
            rho_theta: 0.5,
            rho_v: 0.5,
            ..default_params()
        }
        .validate()
        .unwrap();
        let d = diffusion(&State3 { r: 1.0, theta: 0.0, v: 1.0 }, &p);
        let gram00: f64 = (0..3).map(|j| d[0][j] * d[0][j]).sum();
        assert!((gram00 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euler_fixed_point_and_zero_v_update() {
        let p = default_params();
        let eq = State3 { r: p.zeta, theta: p.zeta, v: p.eta };
        let inc = BrownianIncrements { dw1: 0.0, dw2: 0.0, dw3: 0.0, dt: 0.01 };
        let out = step_euler_full_truncation(&eq, &inc, &p).unwrap();
        assert_eq!(out, eq);

        // At v = 0 the diffusion vanishes, so any dW3 leaves v' = k_v·η·dt.
        let s = State3 { r: 1.0, theta: 1.0, v: 0.0 };
        let inc = BrownianIncrements { dw1: 0.0, dw2: 0.0, dw3: 5.0, dt: 0.01 };
        let out = step_euler_full_truncation(&s, &inc, &p).unwrap();
        assert!((out.v - 0.01).abs() < 1e-15);
    }

    #[test]
    fn euler_strong_order_half_in_v() {
        // Self-refinement study on the v-equation: the pathwise gap between
        // a dt-grid and a dt/2-grid solution at T = 1 decays like O(√dt).
        let p = default_params();
        let t_end = 1.0;
        let mut log_dt = Vec::new();
        let mut log_err = Vec::new();
        for exp in [7u32, 9, 11] {
            let dt = (0.5f64).powi(exp as i32);
            let n_steps = (t_end / dt).round() as usize;
            let n_paths = 4000;
            let mut errs = Vec::with_capacity(n_paths);
            for path in 0..n_paths {
                let mut stream = NoiseStream::new(40 + exp as u64, path as u64);
                let mut coarse = 2.0f64;
                let mut fine = 2.0f64;
                for _ in 0..n_steps {
                    let g_a = stream.normal();
                    let g_b = stream.normal();
                    let h = 0.5 * dt;
                    let fine_step = |v: f64, g: f64| {
                        let vp: f64 = v.max(0.0);
                        (v + p.k_v * (p.eta - vp) * h + p.gamma * vp.sqrt() * h.sqrt() * g).max(0.0)
                    };
                    fine = fine_step(fine, g_a);
                    fine = fine_step(fine, g_b);
                    let vp = coarse.max(0.0);
                    let dw = h.sqrt() * (g_a + g_b);
                    coarse = (coarse + p.k_v * (p.eta - vp) * dt + p.gamma * vp.sqrt() * dw).max(0.0);
                }
                errs.push((coarse - fine).abs());
            }
            let (mean_err, _) = mean_and_se(&errs);
            log_dt.push(dt.ln());
            log_err.push(mean_err.ln());
        }
        let order = slope(&log_dt, &log_err);
        assert!(
            (0.35..=0.75).contains(&order),
            "observed strong order {order}, want about 0.5"
        );
    }

    #[test]
    fn exact_step_conditional_mean() {
        let p = ModelParams { k_v: 0.5, eta: 0.05, ..default_params() }.validate().unwrap();
        let mut stream = NoiseStream::new(50, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| step_cir_exact(0.03, 1.0, &p, &mut stream)).collect();
        let (m, se) = mean_and_se(&draws);
        let want = 0.05 + (0.03 - 0.05) * (-0.5f64).exp();
        assert!((want - 0.037869).abs() < 1e-6);
        assert!((m - want).abs() < 3.0 * se, "mean {m}, want {want}");
    }

    #[test]
    fn exact_step_from_zero_is_central_gamma() {
        let p = default_params();
        let mut stream = NoiseStream::new(51, 0);
        let dt = 0.7;
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| step_cir_exact(0.0, dt, &p, &mut stream)).collect();
        assert!(draws.iter().all(|&x| x >= 0.0));
        let (m, se) = mean_and_se(&draws);
        let want = p.eta * (1.0 - (-p.k_v * dt).exp());
        assert!((m - want).abs() < 3.0 * se, "mean {m}, want {want}");
        // From v = 0 the Poisson mean is 0, so the mixture is purely the
        // central Gamma branch and consumes a deterministic draw pattern.
        let mut s = NoiseStream::new(52, 0);
        let before = s.counter();
        let _ = step_cir_exact(0.0, dt, &p, &mut s);
        assert!(s.counter() > before);
    }

    #[test]
    fn exact_step_preserves_stationary_moments() {
        let p = default_params();
        let g: GammaStationary = p.stationary_gamma();
        let mut stream = NoiseStream::new(53, 0);
        let n = 200_000;
        let mut m1 = Vec::with_capacity(n);
        let mut m2 = Vec::with_capacity(n);
        for _ in 0..n {
            let v0 = stream.gamma_stationary(&g);
            let v1 = step_cir_exact(v0, 0.5, &p, &mut stream);
            m1.push(v1);
            m2.push(v1 * v1);
        }
        let (mean1, se1) = mean_and_se(&m1);
        let (mean2, se2) = mean_and_se(&m2);
        let want1 = g.shape * g.scale;
        let want2 = g.shape * (g.shape + 1.0) * g.scale * g.scale;
        assert!((mean1 - want1).abs() < 3.0 * se1, "M1 {mean1} vs {want1}");
        assert!((mean2 - want2).abs() < 3.0 * se2, "M2 {mean2} vs {want2}");
    }

    #[test]
    fn ensemble_drift_only_stays_at_equilibrium() {
        let p = ModelParams { gamma: 1e-12, ..default_params() }.validate().unwrap();
        let spec = EnsembleSpec {
            factors: 1,
            initial_laws: vec![InitialLaw::Constant(p.eta)],
            grid: TimeGrid::new(0.01, 100, 10).unwrap(),
            scheme: Scheme::EulerFullTruncation,
            n_paths: 16,
            root_seed: 60,
        };
        let ens = simulate_ensemble(&spec, &p).unwrap();
        let last = ens.grid.n_recorded() - 1;
        for path in 0..ens.n_paths {
            assert!((ens.state(path, last)[0] - p.eta).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_exact_scheme_is_stationary() {
        let p = default_params();
        let spec = EnsembleSpec {
            factors: 1,
            initial_laws: vec![InitialLaw::StationaryGamma],
            grid: TimeGrid::new(0.125, 8, 8).unwrap(),
            scheme: Scheme::ExactVEulerRest,
            n_paths: 100_000,
            root_seed: 61,
        };
        let ens = simulate_ensemble(&spec, &p).unwrap();
        let vals = ens.coord_at(ens.grid.n_recorded() - 1, 0);
        let (m, se) = mean_and_se(&vals);
        assert!((m - p.eta).abs() < 3.0 * se, "mean {m}");
    }

    #[test]
    fn ensemble_theta_mean_curve() {
        // E[θ_t] solves the linear ODE with rate k_θ regardless of v, so the
        // ensemble mean tracks ζ + (θ₀ − ζ)e^(−k_θ t) up to the Euler bias.
        let p = default_params();
        let grid = TimeGrid::new((0.5f64).powi(8), 512, 64).unwrap();
        let theta0 = 3.0;
        let spec = EnsembleSpec {
            factors: 3,
            initial_laws: vec![
                InitialLaw::Constant(1.0),
                InitialLaw::Constant(theta0),
                InitialLaw::Constant(1.0),
            ],
            grid,
            scheme: Scheme::ExactVEulerRest,
            n_paths: 20_000,
            root_seed: 62,
        };
        let ens = simulate_ensemble(&spec, &p).unwrap();
        for (rec, t) in ens.times().iter().enumerate().skip(1) {
            let vals = ens.coord_at(rec, 1);
            let (m, se) = mean_and_se(&vals);
            let want = p.zeta + (theta0 - p.zeta) * (-p.k_theta * t).exp();
            // Euler bias on the mean is at most k_θ·t·dt·|θ₀ − ζ| here.
            let bias = p.k_theta * t * grid.dt * (theta0 - p.zeta).abs();
            assert!(
                (m - want).abs() < 3.0 * se + bias,
                "t={t}: mean {m}, want {want}, se {se}"
            );
        }
    }

    #[test]
    fn coupled_identical_initials_give_zero_delta() {
        let p = default_params();
        let grid = TimeGrid::new(0.01, 50, 10).unwrap();
        for kind in [CouplingKind::VCoupling, CouplingKind::ThetaCoupling, CouplingKind::RCoupling] {
            let laws: Vec<InitialLaw> =
                (0..kind.factors()).map(|_| InitialLaw::Constant(1.5)).collect();
            let c = simulate_coupled(kind, &laws, &laws, &grid, &p, 8, 70).unwrap();
            for path in 0..8 {
                for rec in 0..grid.n_recorded() {
                    assert_eq!(c.delta(path, rec), 0.0);
                }
            }
        }
    }

    #[test]
    fn coupling_pattern_enforced() {
        let p = default_params();
        let grid = TimeGrid::new(0.01, 10, 10).unwrap();
        let a = vec![InitialLaw::Constant(1.0), InitialLaw::Constant(1.0)];
        let b = vec![InitialLaw::Constant(2.0), InitialLaw::Constant(0.5)];
        let err = simulate_coupled(CouplingKind::ThetaCoupling, &a, &b, &grid, &p, 4, 71)
            .unwrap_err();
        assert!(matches!(err, EngineError::CouplingPatternViolation(_)));
    }

    #[test]
    fn v_coupling_contracts_at_rate_k_v() {
        let p = default_params();
        let grid = TimeGrid::new((0.5f64).powi(7), 384, 32).unwrap();
        let c = simulate_coupled(
            CouplingKind::VCoupling,
            &[InitialLaw::Constant(2.0)],
            &[InitialLaw::Constant(0.0)],
            &grid,
            &p,
            5000,
            72,
        )
        .unwrap();
        let times = c.first.times();
        let logs: Vec<f64> = (0..times.len()).map(|r| c.mean_abs_delta(r).ln()).collect();
        let rate = -slope(&times, &logs);
        assert!(
            (rate - p.k_v).abs() < 0.1 * p.k_v,
            "contraction rate {rate}, want {}",
            p.k_v
        );
    }

    #[test]
    fn theta_coupling_respects_exponential_bound() {
        let p = default_params();
        let grid = TimeGrid::new((0.5f64).powi(7), 384, 32).unwrap();
        let delta0 = 1.0;
        let c = simulate_coupled(
            CouplingKind::ThetaCoupling,
            &[InitialLaw::Constant(2.0), InitialLaw::Constant(1.0)],
            &[InitialLaw::Constant(1.0), InitialLaw::Constant(1.0)],
            &grid,
            &p,
            5000,
            73,
        )
        .unwrap();
        for (rec, t) in c.first.times().iter().enumerate() {
            let abs: Vec<f64> = c.deltas_at(rec).iter().map(|d| d.abs()).collect();
            let (m, se) = mean_and_se(&abs);
            let bound = delta0 * (-p.k_theta * t).exp();
            assert!(
                m <= bound + 3.0 * se,
                "t={t}: E|Δ| = {m} exceeds bound {bound} (se {se})"
            );
        }
    }

    #[test]
    fn v_coupling_preserves_order_before_meeting() {
        let p = default_params();
        let grid = TimeGrid::new((0.5f64).powi(7), 384, 1).unwrap();
        let c = simulate_coupled(
            CouplingKind::VCoupling,
            &[InitialLaw::Constant(2.0)],
            &[InitialLaw::Constant(0.0)],
            &grid,
            &p,
            200,
            74,
        )
        .unwrap();
        for path in 0..200 {
            let mut met = false;
            for rec in 0..grid.n_recorded() {
                let d = c.delta(path, rec);
                if !met && d <= 0.0 {
                    met = true;
                }
                if !met {
                    assert!(d > 0.0, "path {path} flipped sign before meeting");
                }
                // After a meeting the shared noise keeps the gap negligible.
                assert!(d > -0.05, "path {path} re-separated downward to {d}");
            }
        }
    }

    #[test]
    fn schemes_agree_in_distribution_as_dt_shrinks() {
        let p = default_params();
        let dt = (0.5f64).powi(7);
        let grid = TimeGrid::new(dt, 128, 128).unwrap();
        let run = |scheme, seed| {
            let spec = EnsembleSpec {
                factors: 1,
                initial_laws: vec![InitialLaw::Constant(2.0)],
                grid,
                scheme,
                n_paths: 40_000,
                root_seed: seed,
            };
            let ens = simulate_ensemble(&spec, &p).unwrap();
            let vals = ens.coord_at(grid.n_recorded() - 1, 0);
            let (m, se) = mean_and_se(&vals);
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (m, se, var)
        };
        let (me, se_e, var_e) = run(Scheme::EulerFullTruncation, 80);
        let (mx, se_x, var_x) = run(Scheme::ExactVEulerRest, 81);
        assert!(
            (me - mx).abs() < 3.0 * (se_e + se_x) + 2.0 * dt,
            "means {me} vs {mx}"
        );
        assert!(
            (var_e - var_x).abs() < 0.1 * var_x + 2.0 * dt,
            "variances {var_e} vs {var_x}"
        );
    }

    #[test]
    fn nonnegativity_of_recorded_states() {
        let p = ModelParams { gamma: 2.0, ..default_params() }.validate().unwrap();
        for scheme in [Scheme::EulerFullTruncation, Scheme::ExactVEulerRest] {
            let spec = EnsembleSpec {
                factors: 3,
                initial_laws: vec![
                    InitialLaw::Constant(0.02),
                    InitialLaw::Constant(0.02),
                    InitialLaw::StationaryGamma,
                ],
                grid: TimeGrid::new((0.5f64).powi(7), 256, 16).unwrap(),
                scheme,
                n_paths: 500,
                root_seed: 82,
            };
            let ens = simulate_ensemble(&spec, &p).unwrap();
            for path in 0..ens.n_paths {
                for rec in 0..ens.grid.n_recorded() {
                    for &x in ens.state(path, rec) {
                        assert!(x >= 0.0 && x.is_finite());
                    }
                }
            }
        }
    }

    #[test]
    fn drift_dissipativity_on_random_pairs() {
        // (b_θ(x₁) − b_θ(x₂))·(x₁ − x₂) = −k_θΔθ² − k_vΔv²
        //                               ≤ −min{k_θ, k_v}|x₁ − x₂|².
        let p = ModelParams { k_theta: 0.7, k_v: 1.3, ..default_params() }.validate().unwrap();
        let mut stream = NoiseStream::new(83, 0);
        let kmin = p.k_theta.min(p.k_v);
        for _ in 0..10_000 {
            let x1 = [3.0 * stream.uniform(), 3.0 * stream.uniform()];
            let x2 = [3.0 * stream.uniform(), 3.0 * stream.uniform()];
            let b = |x: &[f64; 2]| [p.k_theta * (p.zeta - x[0]), p.k_v * (p.eta - x[1])];
            let b1 = b(&x1);
            let b2 = b(&x2);
            let inner = (b1[0] - b2[0]) * (x1[0] - x2[0]) + (b1[1] - b2[1]) * (x1[1] - x2[1]);
            let norm2 = (x1[0] - x2[0]).powi(2) + (x1[1] - x2[1]).powi(2);
            assert!(inner <= -kmin * norm2 + 1e-12 * norm2.max(1.0));
        }
    }

    #[test]
    fn determinism_across_thread_counts() {
        let p = default_params();
        let spec = EnsembleSpec {
            factors: 3,
            initial_laws: vec![
                InitialLaw::Constant(1.0),
                InitialLaw::Constant(1.0),
                InitialLaw::StationaryGamma,
            ],
            grid: TimeGrid::new(0.01, 64, 8).unwrap(),
            scheme: Scheme::ExactVEulerRest,
            n_paths: 64,
            root_seed: 84,
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate_ensemble(&spec, &p).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.raw_data().len(), b.raw_data().len());
        for (x, y) in a.raw_data().iter().zip(b.raw_data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn cache_roundtrip_and_bad_magic() {
        let p = default_params();
        let spec = EnsembleSpec {
            factors: 2,
            initial_laws: vec![InitialLaw::Constant(1.0), InitialLaw::StationaryGamma],
            grid: TimeGrid::new(0.02, 20, 5).unwrap(),
            scheme: Scheme::ExactVEulerRest,
            n_paths: 7,
            root_seed: 85,
        };
        let ens = simulate_ensemble(&spec, &p).unwrap();
        let mut buf = Vec::new();
        write_cache(&ens, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"CIR3");
        let cached = read_cache(buf.as_slice()).unwrap();
        assert_eq!(cached.factors, 2);
        assert_eq!(cached.n_paths, 7);
        assert_eq!(cached.times, ens.times());
        for path in 0..7 {
            for rec in 0..ens.grid.n_recorded() {
                assert_eq!(cached.state(path, rec), ens.state(path, rec));
            }
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cache(bad.as_slice()), Err(CacheError::BadMagic)));
        assert!(matches!(read_cache(&buf[..20]), Err(CacheError::Truncated)));
    }

    #[test]
    fn csv_has_expected_header() {
        let p = default_params();
        let spec = EnsembleSpec {
            factors: 3,
            initial_laws: vec![
                InitialLaw::Constant(1.0),
                InitialLaw::Constant(1.0),
                InitialLaw::Constant(1.0),
            ],
            grid: TimeGrid::new(0.5, 2, 1).unwrap(),
            scheme: Scheme::EulerFullTruncation,
            n_paths: 2,
            root_seed: 86,
        };
        let ens = simulate_ensemble(&spec, &p).unwrap();
        let mut buf = Vec::new();
        write_csv(&ens, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,time,R,theta,v\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
