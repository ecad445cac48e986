//! Transition law of the infinite HMM with the row distributions integrated
//! out, stick-breaking growth of β, and the auxiliary-variable samplers for
//! `m`, λ, α and β.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GammaPrior;
use crate::special::ln_gamma;

/// Transition counts, base measure and concentrations of one particle.
///
/// `counts[i][j]` is the number of transitions from state `i` to state `j`;
/// `beta` has one more entry than there are states, the last being the mass
/// reserved for unvisited states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionState {
    pub counts: Vec<Vec<u32>>,
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
}

impl TransitionState {
    pub fn num_states(&self) -> usize {
        self.counts.len()
    }

    pub fn row_total(&self, s: usize) -> u64 {
        self.counts[s].iter().map(|&c| c as u64).sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.num_states()).map(|s| self.row_total(s)).sum()
    }

    /// Predictive probabilities of the next state from `from`; the last entry
    /// is the probability of moving to a new state.
    pub fn transition_probs(&self, from: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.beta.len());
        self.transition_probs_into(from, &mut out)?;
        Ok(out)
    }

    pub fn transition_probs_into(&self, from: usize, out: &mut Vec<f64>) -> Result<()> {
        let l = self.num_states();
        if from >= l {
            return Err(Error::InvalidState { state: from, count: l });
        }
        let row = &self.counts[from];
        let denom = self.row_total(from) as f64 + self.alpha;
        out.clear();
        for j in 0..l {
            out.push((row[j] as f64 + self.alpha * self.beta[j]) / denom);
        }
        out.push(self.alpha * self.beta[l] / denom);
        Ok(())
    }

    /// Adds an empty row and column for a newly born state. β must already
    /// have been grown.
    pub fn add_state(&mut self) {
        for row in self.counts.iter_mut() {
            row.push(0);
        }
        let l = self.counts.len() + 1;
        self.counts.push(vec![0; l]);
    }
}

/// Splits the tail mass of β with stick fraction `xi`.
pub fn grow_beta_with(beta: &mut Vec<f64>, xi: f64) {
    let tail = *beta.last().expect("beta is never empty");
    let last = beta.len() - 1;
    beta[last] = xi * tail;
    beta.push(tail - beta[last]);
}

/// Splits the tail mass of β with `Ξ ~ Beta(1, λ)`.
pub fn grow_beta<R: Rng + ?Sized>(beta: &mut Vec<f64>, lambda: f64, rng: &mut R) -> f64 {
    let xi = Beta::new(1.0, lambda).expect("lambda is positive").sample(rng);
    grow_beta_with(beta, xi);
    xi
}

const STIRLING_ROW_CAP: usize = 4096;

/// Log unsigned Stirling numbers of the first kind, `ln S(n, m)`, filled
/// row by row on demand.
#[derive(Debug, Clone, Default)]
pub struct StirlingCache {
    rows: Vec<Vec<f64>>,
}

fn next_row(prev: &[f64], n: usize) -> Vec<f64> {
    // S(n+1, m) = n·S(n, m) + S(n, m−1)
    let ln_n = (n as f64).ln();
    let mut row = vec![f64::NEG_INFINITY; n + 2];
    for m in 1..=n + 1 {
        let a = if m <= n { prev[m] + ln_n } else { f64::NEG_INFINITY };
        let b = prev[m - 1];
        row[m] = crate::special::log_add_exp(a, b);
    }
    row
}

impl StirlingCache {
    pub fn new() -> Self {
        Self {
            rows: vec![vec![0.0]],
        }
    }

    pub fn max_n(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    /// Fills the table through row `n` (up to an internal cap).
    pub fn ensure(&mut self, n: usize) {
        if self.rows.is_empty() {
            self.rows.push(vec![0.0]);
        }
        let n = n.min(STIRLING_ROW_CAP);
        while self.rows.len() <= n {
            let k = self.rows.len() - 1;
            let row = next_row(&self.rows[k], k);
            self.rows.push(row);
        }
    }

    /// `ln S(n, m)`; `n` must be within the filled range.
    pub fn ln_s(&self, n: usize, m: usize) -> f64 {
        if m > n {
            return f64::NEG_INFINITY;
        }
        self.rows[n][m]
    }

    pub fn row(&self, n: usize) -> Option<&[f64]> {
        self.rows.get(n).map(|r| r.as_slice())
    }
}

/// Draws `m` with `Pr(m) ∝ S(n, m)·x^m`, `x = αβ_j`.
///
/// Rows beyond the cache are sampled through the equivalent sequential
/// table-opening representation, `m = Σ_k Bernoulli(x/(x + k))`.
pub fn sample_m<R: Rng + ?Sized>(n: u32, x: f64, cache: &StirlingCache, rng: &mut R) -> u32 {
    if n == 0 {
        return 0;
    }
    if !(x > 0.0) {
        return 1;
    }
    let Some(row) = cache.row(n as usize) else {
        return sample_m_sequential(n, x, rng);
    };
    let ln_x = x.ln();
    let ln_norm = ln_gamma(x + n as f64) - ln_gamma(x);
    let mut u: f64 = rng.random();
    for m in 1..=n as usize {
        let p = (row[m] + m as f64 * ln_x - ln_norm).exp();
        u -= p;
        if u < 0.0 {
            return m as u32;
        }
    }
    n
}

pub fn sample_m_sequential<R: Rng + ?Sized>(n: u32, x: f64, rng: &mut R) -> u32 {
    let mut m = 0;
    for k in 0..n {
        if rng.random::<f64>() * (x + k as f64) < x {
            m += 1;
        }
    }
    m
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive")
        .sample(rng)
}

/// `ln G` for `G ~ Gamma(shape, 1)`, accurate for tiny shapes.
fn ln_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        gamma_draw(shape, 1.0, rng).ln()
    } else {
        let u: f64 = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        gamma_draw(shape + 1.0, 1.0, rng).ln() + u.ln() / shape
    }
}

/// Smallest Dirichlet concentration used in place of a zero count.
pub const DIRICHLET_FLOOR: f64 = 1e-300;

/// Draws `β ~ Dir(m_{·1}, …, m_{·L}, λ)`.
pub fn sample_beta_given_m<R: Rng + ?Sized>(m_col: &[u64], lambda: f64, rng: &mut R) -> Vec<f64> {
    let mut lg: Vec<f64> = m_col
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let a = if m == 0 {
                log::debug!("zero Dirichlet concentration for state {j}; clamped");
                DIRICHLET_FLOOR
            } else {
                m as f64
            };
            ln_gamma_draw(a, rng)
        })
        .collect();
    lg.push(ln_gamma_draw(lambda, rng));
    let lse = crate::special::log_sum_exp(&lg);
    let mut beta: Vec<f64> = lg.iter().map(|v| (v - lse).exp()).collect();
    // absorb rounding so the vector sums to one
    let s: f64 = beta.iter().sum();
    for b in beta.iter_mut() {
        *b /= s;
    }
    beta
}

/// Draws λ given the state count `l` and total table count `m_dd`, through the
/// auxiliary `φ ~ Beta(λ+1, m_dd)` and the two-gamma mixture. Returns `(λ, φ)`.
pub fn sample_lambda<R: Rng + ?Sized>(
    prev: f64,
    l: usize,
    m_dd: u64,
    prior: GammaPrior,
    rng: &mut R,
) -> (f64, f64) {
    if m_dd == 0 {
        return (gamma_draw(prior.shape, prior.rate, rng), 1.0);
    }
    let phi = Beta::new(prev + 1.0, m_dd as f64)
        .expect("beta parameters are positive")
        .sample(rng)
        .max(f64::MIN_POSITIVE);
    let rate = prior.rate - phi.ln();
    let l = l as f64;
    let odds = (prior.shape + l - 1.0) / (m_dd as f64 * rate);
    let eps = odds / (1.0 + odds);
    let shape = if rng.random::<f64>() < eps {
        prior.shape + l
    } else {
        prior.shape + l - 1.0
    };
    let lambda = if shape > 0.0 {
        gamma_draw(shape, rate, rng)
    } else {
        gamma_draw(prior.shape + l, rate, rng)
    };
    (lambda.max(f64::MIN_POSITIVE), phi)
}

/// Draws α through `g_i ~ Beta(α+1, n_i)`, `h_i ~ Ber(n_i/(α+n_i))`; rows with
/// no outgoing transitions contribute `g_i = 1`, `h_i = 0`.
pub fn sample_alpha<R: Rng + ?Sized>(
    prev: f64,
    row_totals: &[u64],
    m_dd: u64,
    prior: GammaPrior,
    rng: &mut R,
) -> (f64, Vec<f64>, Vec<bool>) {
    let mut g = Vec::with_capacity(row_totals.len());
    let mut h = Vec::with_capacity(row_totals.len());
    let mut sum_ln_g = 0.0;
    let mut sum_h = 0u64;
    for &n in row_totals {
        if n == 0 {
            g.push(1.0);
            h.push(false);
            continue;
        }
        let nf = n as f64;
        let gi = Beta::new(prev + 1.0, nf)
            .expect("beta parameters are positive")
            .sample(rng)
            .max(f64::MIN_POSITIVE);
        let hi = rng.random::<f64>() * (prev + nf) < nf;
        sum_ln_g += gi.ln();
        sum_h += hi as u64;
        g.push(gi);
        h.push(hi);
    }
    let shape = prior.shape + m_dd as f64 - sum_h as f64;
    let alpha = gamma_draw(shape, prior.rate - sum_ln_g, rng).max(f64::MIN_POSITIVE);
    (alpha, g, h)
}

/// Auxiliary draws produced by one structural refresh.
#[derive(Debug, Clone, Default)]
pub struct RefreshDraws {
    pub m: Vec<Vec<u32>>,
    pub phi: f64,
    pub g: Vec<f64>,
    pub h: Vec<bool>,
}

/// Refreshes λ, α and β in the order m → φ → λ → (g, h) → α → β.
pub fn refresh_structure<R: Rng + ?Sized>(
    ts: &mut TransitionState,
    lambda_prior: GammaPrior,
    alpha_prior: GammaPrior,
    cache: &StirlingCache,
    rng: &mut R,
) -> RefreshDraws {
    let l = ts.num_states();
    let mut m = vec![vec![0u32; l]; l];
    let mut m_col = vec![0u64; l];
    for i in 0..l {
        for j in 0..l {
            let mij = sample_m(ts.counts[i][j], ts.alpha * ts.beta[j], cache, rng);
            m[i][j] = mij;
            m_col[j] += mij as u64;
        }
    }
    let m_dd: u64 = m_col.iter().sum();
    let (lambda, phi) = sample_lambda(ts.lambda, l, m_dd, lambda_prior, rng);
    ts.lambda = lambda;
    let rows: Vec<u64> = (0..l).map(|s| ts.row_total(s)).collect();
    let (alpha, g, h) = sample_alpha(ts.alpha, &rows, m_dd, alpha_prior, rng);
    ts.alpha = alpha;
    ts.beta = sample_beta_given_m(&m_col, ts.lambda, rng);
    RefreshDraws { m, phi, g, h }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ts(counts: Vec<Vec<u32>>, beta: Vec<f64>, alpha: f64) -> TransitionState {
        TransitionState {
            counts,
            beta,
            alpha,
            lambda: 1.0,
        }
    }

    #[test]
    fn no_counts_gives_beta() {
        let t = ts(vec![vec![0, 0], vec![0, 0]], vec![0.5, 0.3, 0.2], 2.0);
        assert_eq!(t.transition_probs(1).unwrap(), vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn one_count_hand_value() {
        let t = ts(vec![vec![1]], vec![0.5, 0.5], 1.0);
        assert_eq!(t.transition_probs(0).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn huge_alpha_recovers_beta() {
        let t = ts(vec![vec![5, 3], vec![0, 9]], vec![0.2, 0.3, 0.5], 1e9);
        let p = t.transition_probs(0).unwrap();
        for (a, b) in p.iter().zip(&t.beta) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_state_is_rejected() {
        let t = ts(vec![vec![1]], vec![0.5, 0.5], 1.0);
        assert!(matches!(
            t.transition_probs(1),
            Err(Error::InvalidState { state: 1, count: 1 })
        ));
    }

    #[test]
    fn grow_beta_boundary_and_mean() {
        let mut b = vec![0.6, 0.4];
        grow_beta_with(&mut b, 1.0);
        assert_eq!(b, vec![0.6, 0.4, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut b = vec![0.3, 0.7];
            let xi = grow_beta(&mut b, 4.0, &mut rng);
            assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            sum += xi;
        }
        // Beta(1, 4): mean 0.2, variance 4/(25·6)
        let se = (4.0 / 150.0 / n as f64).sqrt();
        assert!((sum / n as f64 - 0.2).abs() < 3.0 * se);
    }

    #[test]
    fn stirling_recurrence_and_small_values() {
        let mut c = StirlingCache::new();
        c.ensure(500);
        assert_eq!(c.ln_s(0, 0), 0.0);
        assert_eq!(c.ln_s(1, 0), f64::NEG_INFINITY);
        let s3: Vec<f64> = (1..=3).map(|m| c.ln_s(3, m).exp()).collect();
        assert!((s3[0] - 2.0).abs() < 1e-12 && (s3[1] - 3.0).abs() < 1e-12 && (s3[2] - 1.0).abs() < 1e-12);
        // S(n, 1) = (n−1)!, S(n, n−1) = n(n−1)/2
        assert!((c.ln_s(200, 1) - ln_gamma(200.0)).abs() < 1e-10 * ln_gamma(200.0));
        assert!((c.ln_s(100, 99).exp() - 4950.0).abs() < 1e-8);
    }

    #[test]
    fn sample_m_forced_and_three_count_law() {
        let mut c = StirlingCache::new();
        c.ensure(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_m(0, 1.3, &c, &mut rng), 0);
        for _ in 0..100 {
            assert_eq!(sample_m(1, 0.2, &c, &mut rng), 1);
        }
        let n = 120_000;
        let mut hist = [0usize; 4];
        for _ in 0..n {
            hist[sample_m(3, 1.0, &c, &mut rng) as usize] += 1;
        }
        let want = [0.0, 1.0 / 3.0, 0.5, 1.0 / 6.0];
        for m in 1..4 {
            let p = hist[m] as f64 / n as f64;
            let se = (want[m] * (1.0 - want[m]) / n as f64).sqrt();
            assert!((p - want[m]).abs() < 4.0 * se, "m={m}: {p}");
        }
    }

    #[test]
    fn sample_m_matches_sequential_representation() {
        let mut c = StirlingCache::new();
        c.ensure(60);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (nij, x) = (60u32, 2.5);
        let draws = 40_000;
        let a: f64 = (0..draws).map(|_| sample_m(nij, x, &c, &mut rng) as f64).sum::<f64>() / draws as f64;
        let b: f64 = (0..draws).map(|_| sample_m_sequential(nij, x, &mut rng) as f64).sum::<f64>() / draws as f64;
        // exact mean Σ x/(x+k)
        let exact: f64 = (0..nij).map(|k| x / (x + k as f64)).sum();
        let var: f64 = (0..nij).map(|k| { let p = x / (x + k as f64); p * (1.0 - p) }).sum();
        let se = (var / draws as f64).sqrt();
        assert!((a - exact).abs() < 4.0 * se);
        assert!((b - exact).abs() < 4.0 * se);
    }

    #[test]
    fn sample_m_never_nan_for_large_counts() {
        let mut c = StirlingCache::new();
        c.ensure(10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &x in &[1e-8, 0.01, 1.0, 50.0, 1e4] {
            let m = sample_m(10_000, x, &c, &mut rng);
            assert!((1..=10_000).contains(&m));
        }
        for &n in &[100usize, 4096] {
            if let Some(row) = c.row(n) {
                assert!(row.iter().all(|v| !v.is_nan()));
            }
        }
    }

    #[test]
    fn dirichlet_mean_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut s = 0.0;
        for _ in 0..n {
            let b = sample_beta_given_m(&[3], 1.0, &mut rng);
            assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            s += b[0];
        }
        // Beta(3, 1): mean 0.75, variance 3/(16·5)
        let se = (3.0 / 80.0 / n as f64).sqrt();
        assert!((s / n as f64 - 0.75).abs() < 3.0 * se);
        let b = sample_beta_given_m(&[0, 4], 0.5, &mut rng);
        assert!(b[0] >= 0.0 && b[0] < 1e-100);
    }

    #[test]
    fn lambda_mixture_weight_hand_value() {
        // a=1, L=1, m=1, b − ln φ = 1 → odds 1
        let odds: f64 = (1.0 + 1.0 - 1.0) / (1.0 * 1.0);
        assert_eq!(odds / (1.0 + odds), 0.5);
    }

    #[test]
    fn alpha_with_empty_rows_is_gamma_prior_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = GammaPrior::new(2.0, 1.5);
        let n = 100_000;
        let mut s = 0.0;
        for _ in 0..n {
            let (a, g, h) = sample_alpha(1.0, &[0, 0, 0], 4, prior, &mut rng);
            assert!(g.iter().all(|v| *v == 1.0) && h.iter().all(|v| !v));
            s += a;
        }
        // Gamma(2 + 4, 1.5)
        let se = (6.0 / 2.25 / n as f64).sqrt();
        assert!((s / n as f64 - 4.0).abs() < 3.0 * se);
    }

    /// Posterior mean by trapezoid quadrature on a log grid.
    fn quadrature_mean(log_dens: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi, k) = (-12.0f64, 6.0f64, 20_000);
        let h = (hi - lo) / k as f64;
        let pts: Vec<(f64, f64)> = (0..=k)
            .map(|i| {
                let u = lo + h * i as f64;
                let x = u.exp();
                (x, log_dens(x) + u) // Jacobian of x = e^u
            })
            .collect();
        let max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m) = (0.0, 0.0);
        for (i, (x, l)) in pts.iter().enumerate() {
            let w = if i == 0 || i == k { 0.5 } else { 1.0 };
            let p = (l - max).exp() * w;
            z += p;
            m += p * x;
        }
        m / z
    }

    fn batch_mean_check(draws: &[f64], exact: f64) {
        let nb = 100;
        let size = draws.len() / nb;
        let means: Vec<f64> = (0..nb)
            .map(|b| draws[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / nb as f64;
        let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (nb - 1) as f64;
        let se = (var / nb as f64).sqrt();
        assert!((grand - exact).abs() < 3.0 * se, "chain mean {grand}, exact {exact}, se {se}");
    }

    #[test]
    fn lambda_chain_matches_exact_posterior() {
        let prior = GammaPrior::new(1.0, 1.0);
        let (l, m) = (3usize, 20u64);
        let exact = quadrature_mean(|x| {
            (prior.shape - 1.0) * x.ln() - prior.rate * x + l as f64 * x.ln() + ln_gamma(x) - ln_gamma(x + m as f64)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut lam = 1.0;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                lam = sample_lambda(lam, l, m, prior, &mut rng).0;
                lam
            })
            .collect();
        batch_mean_check(&draws, exact);
    }

    #[test]
    fn alpha_chain_matches_exact_posterior() {
        let prior = GammaPrior::new(1.5, 1.0);
        let rows = [12u64, 7, 0];
        let m_dd = 6u64;
        let exact = quadrature_mean(|x| {
            let mut v = (prior.shape - 1.0) * x.ln() - prior.rate * x + m_dd as f64 * x.ln();
            for &n in &rows {
                if n > 0 {
                    v += ln_gamma(x) - ln_gamma(x + n as f64);
                }
            }
            v
        });
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut a = 1.0;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                a = sample_alpha(a, &rows, m_dd, prior, &mut rng).0;
                a
            })
            .collect();
        batch_mean_check(&draws, exact);
    }

    #[test]
    fn refresh_keeps_beta_on_simplex() {
        let mut c = StirlingCache::new();
        c.ensure(50);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = ts(vec![vec![10, 2], vec![1, 30]], vec![0.5, 0.3, 0.2], 1.0);
        for _ in 0..200 {
            let d = refresh_structure(&mut t, GammaPrior::new(1.0, 1.0), GammaPrior::new(1.0, 1.0), &c, &mut rng);
            assert_eq!(d.m.len(), 2);
            assert_eq!(t.beta.len(), 3);
            assert!((t.beta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(t.alpha > 0.0 && t.lambda > 0.0);
        }
    }
}
