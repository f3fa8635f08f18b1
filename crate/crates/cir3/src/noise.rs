//! Deterministic, stream-split pseudo-random sources.
//!
//! Every path owns a `NoiseStream` keyed on `(root_seed, path_index)`, so
//! replaying a stream reproduces its output bit-for-bit regardless of how
//! paths are scheduled across workers. All randomness flows through
//! `uniform()`, which advances the stream counter by exactly one draw;
//! Gaussians are produced by a high-accuracy inverse-CDF transform of a
//! single uniform.
//!
//! Correlated Brownian increments use the decomposition
//! `dW¹ = √ρ̄·g₁ + ρ_θ·g₂ + ρ_v·g₃` (with `dW² = g₂`, `dW³ = g₃`), which
//! reproduces the correlation matrix Σ with unit diagonal,
//! Corr(dW¹,dW²) = ρ_θ, Corr(dW¹,dW³) = ρ_v and Corr(dW²,dW³) = 0.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use statrs::function::gamma::ln_gamma;

use crate::params::{GammaStationary, ModelParams};

/// A reproducible uniform stream for one simulation path.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    root_seed: u64,
    path_index: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl NoiseStream {
    /// Opens the stream for `(root_seed, path_index)`.
    pub fn new(root_seed: u64, path_index: u64) -> Self {
        // Odd multiplier keeps path_index -> state injective for a fixed
        // root seed, so distinct paths never share a generator state.
        let mut state = root_seed ^ path_index.wrapping_mul(0xa24baed4963ee407);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            root_seed,
            path_index,
            counter: 0,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Number of uniform draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// One uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        (((self.rng.next_u64() >> 11) as f64) + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the inverse CDF; consumes one uniform.
    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }

    /// Gamma(shape, scale) draw.
    ///
    /// shape ≥ 1 uses the Marsaglia-Tsang squeeze/accept-reject on a normal
    /// proposal; shape < 1 uses the boost identity
    /// Gamma(a) = Gamma(a+1)·U^(1/a), so parameter sets violating the
    /// Feller condition are supported.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        assert!(shape > 0.0 && scale > 0.0, "gamma parameters must be positive");
        if shape < 1.0 {
            let boost = self.gamma(shape + 1.0, 1.0);
            let u = self.uniform();
            return boost * u.powf(1.0 / shape) * scale;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v * scale;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v * scale;
            }
        }
    }

    /// Draw from the stationary Gamma law of the v-factor.
    pub fn gamma_stationary(&mut self, g: &GammaStationary) -> f64 {
        self.gamma(g.shape, g.scale)
    }

    /// Poisson(mean) draw; mean may be zero.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        assert!(mean >= 0.0 && mean.is_finite(), "poisson mean must be finite and >= 0");
        if mean == 0.0 {
            return 0;
        }
        if mean < 10.0 {
            // Knuth multiplication method.
            let limit = (-mean).exp();
            let mut product = 1.0;
            let mut count = 0u64;
            loop {
                product *= self.uniform();
                if product <= limit {
                    return count;
                }
                count += 1;
            }
        }
        // Hörmann's transformed rejection (PTRS).
        let slam = mean.sqrt();
        let loglam = mean.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
            if lhs <= k * loglam - mean - ln_gamma(k + 1.0) {
                return k as u64;
            }
        }
    }
}

/// Correlated per-step Brownian increments.
#[derive(Debug, Clone, Copy)]
pub struct BrownianIncrements {
    pub dw1: f64,
    pub dw2: f64,
    pub dw3: f64,
    pub dt: f64,
}

/// Draws one triple of correlated increments; consumes exactly 3 uniforms.
pub fn sample_increments(stream: &mut NoiseStream, dt: f64, params: &ModelParams) -> BrownianIncrements {
    debug_assert!(dt > 0.0);
    let g1 = stream.normal();
    let g2 = stream.normal();
    let g3 = stream.normal();
    let sqrt_dt = dt.sqrt();
    let rho_bar_sqrt = params.rho_bar().sqrt();
    BrownianIncrements {
        dw1: sqrt_dt * (rho_bar_sqrt * g1 + params.rho_theta * g2 + params.rho_v * g3),
        dw2: sqrt_dt * g2,
        dw3: sqrt_dt * g3,
        dt,
    }
}

/// Pushes one uniform through a generalized-inverse CDF.
///
/// Applying two quantile functions to the same uniform yields the comonotone
/// coupling of the two laws, which is optimal for 1-D transport.
pub fn quantile_sample<F: Fn(f64) -> f64>(quantile_fn: F, stream: &mut NoiseStream) -> f64 {
    quantile_fn(stream.uniform())
}

/// Inverse standard normal CDF (Wichura's AS 241, double precision).
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_66e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_6)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> ModelParams {
        ModelParams {
            k: 1.0,
            k_theta: 1.0,
            k_v: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            zeta: 1.0,
            eta: 1.0,
            rho_theta: 0.0,
            rho_v: 0.0,
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut a = NoiseStream::new(7, 42);
        let mut b = NoiseStream::new(7, 42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        assert_eq!(a.counter(), 100);
    }

    #[test]
    fn distinct_paths_diverge() {
        let mut a = NoiseStream::new(7, 0);
        let mut b = NoiseStream::new(7, 1);
        let same = (0..32).filter(|_| a.uniform() == b.uniform()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn increments_deterministic_per_counter() {
        let p = unit_params();
        let mut a = NoiseStream::new(3, 5);
        let mut b = NoiseStream::new(3, 5);
        let ia = sample_increments(&mut a, 0.25, &p);
        let ib = sample_increments(&mut b, 0.25, &p);
        assert_eq!(ia.dw1.to_bits(), ib.dw1.to_bits());
        assert_eq!(ia.dw2.to_bits(), ib.dw2.to_bits());
        assert_eq!(ia.dw3.to_bits(), ib.dw3.to_bits());
        assert_eq!(a.counter(), 3);
    }

    #[test]
    fn zero_correlations_pass_raw_normals() {
        let p = unit_params();
        let mut s = NoiseStream::new(11, 0);
        let mut reference = s.clone();
        let inc = sample_increments(&mut s, 1.0, &p);
        let g1 = reference.normal();
        let g2 = reference.normal();
        let g3 = reference.normal();
        assert_eq!(inc.dw1, g1);
        assert_eq!(inc.dw2, g2);
        assert_eq!(inc.dw3, g3);
    }

    #[test]
    fn normal_quantile_reference_points() {
        assert!(normal_quantile(0.5).abs() < 1e-15);
        // Φ⁻¹(0.975) = 1.959963984540054...
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-9);
        // Deep tail stays finite and symmetric up to the cancellation in
        // 1 - p, which caps attainable accuracy near p = 1.
        assert!((normal_quantile(1e-12) + normal_quantile(1.0 - 1e-12)).abs() < 1e-4);
        assert!((normal_quantile(1e-9) + 5.997807014855852).abs() < 1e-8);
    }

    #[test]
    fn sample_covariance_matches_sigma() {
        let p = ModelParams {
            rho_theta: 0.5,
            rho_v: 0.3,
            ..unit_params()
        }
        .validate()
        .unwrap();
        let n = 1_000_000usize;
        let mut s = NoiseStream::new(0, 0);
        let mut sums = [0.0f64; 3];
        let mut prods = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let inc = sample_increments(&mut s, 1.0, &p);
            let w = [inc.dw1, inc.dw2, inc.dw3];
            for i in 0..3 {
                sums[i] += w[i];
                for j in 0..3 {
                    prods[i][j] += w[i] * w[j];
                }
            }
        }
        let sigma = [
            [1.0, p.rho_theta, p.rho_v],
            [p.rho_theta, 1.0, 0.0],
            [p.rho_v, 0.0, 1.0],
        ];
        // Var of a product of unit normals is 1 + rho^2 <= 2; 3 SE with
        // that bound covers every entry.
        let se = (2.0 / n as f64).sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let cov = prods[i][j] / n as f64 - sums[i] / n as f64 * sums[j] / n as f64;
                assert!(
                    (cov - sigma[i][j]).abs() < 3.0 * se,
                    "cov[{i}][{j}] = {cov}, want {}",
                    sigma[i][j]
                );
            }
        }
    }

    #[test]
    fn quantile_sample_identity_and_exponential() {
        let mut s = NoiseStream::new(1, 0);
        let u = quantile_sample(|x| x, &mut s);
        assert!(u > 0.0 && u < 1.0);
        // Exponential(1) quantile at u = 1 - e^{-1} is exactly 1.
        let exp_q = |u: f64| -(1.0 - u).ln();
        assert!((exp_q(1.0 - (-1.0f64).exp()) - 1.0).abs() < 1e-14);
        // Monte Carlo mean of the gamma(2, 0.5) quantile pushforward.
        let mut mean = 0.0;
        let n = 100_000;
        let mut s = NoiseStream::new(1, 1);
        for _ in 0..n {
            mean += s.gamma(2.0, 0.5);
        }
        mean /= n as f64;
        // Var = shape * scale^2 = 0.5.
        let se = (0.5f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn gamma_moments_both_branches() {
        let n = 100_000;
        // shape = 1 (exponential), mean 1.
        let mut s = NoiseStream::new(2, 0);
        let mut m1 = 0.0;
        for _ in 0..n {
            m1 += s.gamma(1.0, 1.0);
        }
        m1 /= n as f64;
        assert!((m1 - 1.0).abs() < 3.0 * (1.0f64 / n as f64).sqrt());

        // shape = 2, scale = 0.5: second moment shape(shape+1)scale^2 = 1.5.
        let mut s = NoiseStream::new(2, 1);
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for _ in 0..n {
            let x = s.gamma(2.0, 0.5);
            assert!(x >= 0.0);
            m2 += x * x;
            m4 += x * x * x * x;
        }
        m2 /= n as f64;
        m4 /= n as f64;
        let se = ((m4 - m2 * m2) / n as f64).sqrt();
        assert!((m2 - 1.5).abs() < 3.0 * se, "m2 {m2}");

        // shape < 1 boost branch: mean = shape * scale.
        let mut s = NoiseStream::new(2, 2);
        let mut m1 = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = s.gamma(0.5, 2.0);
            assert!(x >= 0.0);
            m1 += x;
            sq += x * x;
        }
        m1 /= n as f64;
        sq /= n as f64;
        let se = ((sq - m1 * m1) / n as f64).sqrt();
        assert!((m1 - 1.0).abs() < 3.0 * se, "boost mean {m1}");
    }

    #[test]
    fn poisson_small_and_large_means() {
        let n = 100_000;
        for (seed, mean) in [(0u64, 0.5f64), (1, 4.0), (2, 40.0), (3, 2000.0)] {
            let mut s = NoiseStream::new(20 + seed, 0);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for _ in 0..n {
                let k = s.poisson(mean) as f64;
                m1 += k;
                m2 += k * k;
            }
            m1 /= n as f64;
            m2 /= n as f64;
            let se = ((m2 - m1 * m1) / n as f64).sqrt();
            assert!((m1 - mean).abs() < 4.0 * se, "mean {mean}: got {m1}");
        }
        let mut s = NoiseStream::new(9, 0);
        assert_eq!(s.poisson(0.0), 0);
    }
}
