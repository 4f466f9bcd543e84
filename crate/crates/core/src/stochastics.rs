//! Workload and analysis models: Poisson arrivals (homogeneous,
//! piecewise nonhomogeneous, gamma-mixed), Erlang interarrival laws, flow
//! superposition, the compound-Poisson recursion, attack probabilities,
//! discounted fee income and stablecoin valuation.
//!
//! Time is measured in whatever unit the caller's rates use; the simulator
//! and CLI work in seconds.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{StreamRng, Streams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StochError {
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("invalid {name}: {value}")]
    Invalid { name: &'static str, value: f64 },
    #[error("bounds [{s}, {t}] outside the domain [0, {horizon}]")]
    OutOfDomain { s: f64, t: f64, horizon: f64 },
    #[error("bad intensity: {0}")]
    BadIntensity(String),
    #[error("bad distribution: {0}")]
    BadDistribution(String),
}

fn nonnegative(name: &'static str, value: f64) -> Result<f64, StochError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(StochError::Negative { name, value })
    }
}

/// `ln k!`.
pub fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Above this mean the pmf is evaluated in log space.
const LOG_DOMAIN_MEAN: f64 = 50.0;

/// `P(N = k)` for `N ~ Poisson(mu)`.
pub fn poisson_pmf(mu: f64, k: u64) -> Result<f64, StochError> {
    let mu = nonnegative("mean", mu)?;
    if mu == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    if mu > LOG_DOMAIN_MEAN {
        return Ok((k as f64 * mu.ln() - mu - ln_factorial(k)).exp());
    }
    let mut p = (-mu).exp();
    for i in 1..=k {
        p *= mu / i as f64;
    }
    Ok(p)
}

/// `P(N <= k)` for `N ~ Poisson(mu)`.
pub fn poisson_cdf(mu: f64, k: u64) -> Result<f64, StochError> {
    let mut total = 0.0;
    for i in 0..=k {
        total += poisson_pmf(mu, i)?;
    }
    Ok(total.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntensityForm {
    Constant(f64),
    /// `intercept + slope * u`, with `u` the absolute time.
    Affine { intercept: f64, slope: f64 },
}

impl IntensityForm {
    fn at(&self, u: f64) -> f64 {
        match *self {
            IntensityForm::Constant(c) => c,
            IntensityForm::Affine { intercept, slope } => intercept + slope * u,
        }
    }

    fn antiderivative(&self, u: f64) -> f64 {
        match *self {
            IntensityForm::Constant(c) => c * u,
            IntensityForm::Affine { intercept, slope } => intercept * u + 0.5 * slope * u * u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityPiece {
    pub start: f64,
    pub end: f64,
    pub form: IntensityForm,
}

/// A piecewise constant-or-affine event density on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFunction {
    pieces: Vec<IntensityPiece>,
}

impl IntensityFunction {
    /// Pieces must start at 0, be contiguous, and stay nonnegative.
    pub fn new(pieces: Vec<IntensityPiece>) -> Result<Self, StochError> {
        let bad = |msg: String| Err(StochError::BadIntensity(msg));
        if pieces.is_empty() {
            return bad("no pieces".into());
        }
        let mut expected_start = 0.0;
        for (i, p) in pieces.iter().enumerate() {
            if !(p.start.is_finite() && p.end.is_finite()) || p.end <= p.start {
                return bad(format!("piece {i} has empty or infinite span"));
            }
            if (p.start - expected_start).abs() > 1e-12 {
                return bad(format!("piece {i} starts at {} not {expected_start}", p.start));
            }
            if p.form.at(p.start) < -1e-12 || p.form.at(p.end) < -1e-12 {
                return bad(format!("piece {i} is negative"));
            }
            expected_start = p.end;
        }
        Ok(Self { pieces })
    }

    pub fn constant(rate: f64, horizon: f64) -> Result<Self, StochError> {
        nonnegative("rate", rate)?;
        Self::new(vec![IntensityPiece {
            start: 0.0,
            end: horizon,
            form: IntensityForm::Constant(rate),
        }])
    }

    pub fn pieces(&self) -> &[IntensityPiece] {
        &self.pieces
    }

    pub fn horizon(&self) -> f64 {
        self.pieces.last().map_or(0.0, |p| p.end)
    }

    /// Rate at time `u`; zero outside the domain.
    pub fn rate_at(&self, u: f64) -> f64 {
        self.pieces
            .iter()
            .find(|p| u >= p.start && u <= p.end)
            .map_or(0.0, |p| p.form.at(u).max(0.0))
    }

    /// Supremum of the rate, attained at a piece endpoint.
    pub fn max_rate(&self) -> f64 {
        self.pieces
            .iter()
            .flat_map(|p| [p.form.at(p.start), p.form.at(p.end)])
            .fold(0.0, f64::max)
    }

    /// Exact `∫_s^t λ(u) du`.
    pub fn integral(&self, s: f64, t: f64) -> Result<f64, StochError> {
        let horizon = self.horizon();
        if !(0.0..=horizon).contains(&s) || !(s..=horizon).contains(&t) {
            return Err(StochError::OutOfDomain { s, t, horizon });
        }
        Ok(self
            .pieces
            .iter()
            .map(|p| {
                let lo = s.max(p.start);
                let hi = t.min(p.end);
                if hi > lo {
                    p.form.antiderivative(hi) - p.form.antiderivative(lo)
                } else {
                    0.0
                }
            })
            .sum())
    }
}

/// Event times of a homogeneous process with `rate` on `[0, horizon]`.
pub fn sample_homogeneous<R: Rng + ?Sized>(rate: f64, horizon: f64, rng: &mut R) -> Vec<f64> {
    let mut times = Vec::new();
    if rate <= 0.0 {
        return times;
    }
    let gap = Exp::new(rate).expect("positive rate");
    let mut t = gap.sample(rng);
    while t <= horizon {
        times.push(t);
        t += gap.sample(rng);
    }
    times
}

/// Event times on `[0, T]` by thinning a homogeneous process at the
/// intensity's supremum.
pub fn sample_nonhomogeneous<R: Rng + ?Sized>(f: &IntensityFunction, rng: &mut R) -> Vec<f64> {
    let ceiling = f.max_rate();
    sample_homogeneous(ceiling, f.horizon(), rng)
        .into_iter()
        .filter(|&u| rng.random::<f64>() * ceiling < f.rate_at(u))
        .collect()
}

/// Gamma-mixed Poisson count: draw `θ ~ Gamma(r, rate p/(1-p))`, then a
/// Poisson count with mean `θ t`. At `t = 1` the marginal is negative
/// binomial `(r, p)`.
pub fn sample_mixed_poisson<R: Rng + ?Sized>(
    r: f64,
    p: f64,
    t: f64,
    rng: &mut R,
) -> Result<u64, StochError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(StochError::Invalid { name: "r", value: r });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(StochError::Invalid { name: "p", value: p });
    }
    nonnegative("t", t)?;
    let theta = Gamma::new(r, (1.0 - p) / p)
        .map_err(|_| StochError::Invalid { name: "r", value: r })?
        .sample(rng);
    Ok(poisson_count(theta * t, rng))
}

/// A Poisson(`mean`) draw; zero for a zero mean.
pub fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Rate of the superposition of independent Poisson flows.
pub fn merge_flows(rates: &[f64]) -> Result<f64, StochError> {
    rates
        .iter()
        .try_fold(0.0, |acc, &r| Ok(acc + nonnegative("rate", r)?))
}

/// Interleaves independent homogeneous flows on `[0, horizon]`; each event
/// carries the index of the flow it came from.
pub fn sample_merged<R: Rng + ?Sized>(
    rates: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<(f64, usize)>, StochError> {
    merge_flows(rates)?;
    let mut events: Vec<(f64, usize)> = rates
        .iter()
        .enumerate()
        .flat_map(|(i, &rate)| {
            sample_homogeneous(rate, horizon, rng)
                .into_iter()
                .map(move |t| (t, i))
                .collect::<Vec<_>>()
        })
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(events)
}

fn erlang_params(n: u64, lambda: f64, x: f64) -> Result<(), StochError> {
    if n == 0 {
        return Err(StochError::Invalid { name: "n", value: 0.0 });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(StochError::Invalid { name: "lambda", value: lambda });
    }
    nonnegative("x", x).map(|_| ())
}

/// Density of the sum of `n` independent exponential(`lambda`) gaps.
pub fn erlang_pdf(n: u64, lambda: f64, x: f64) -> Result<f64, StochError> {
    erlang_params(n, lambda, x)?;
    if x == 0.0 {
        return Ok(if n == 1 { lambda } else { 0.0 });
    }
    let ln = n as f64 * lambda.ln() + (n - 1) as f64 * x.ln() - lambda * x - ln_factorial(n - 1);
    Ok(ln.exp())
}

/// `F_n(t)`: probability that the `n`-th event has happened by `t`.
pub fn erlang_cdf(n: u64, lambda: f64, t: f64) -> Result<f64, StochError> {
    erlang_params(n, lambda, t)?;
    Ok((1.0 - poisson_cdf(lambda * t, n - 1)?).max(0.0))
}

/// `P_n(t) = F_n(t) - F_{n+1}(t)`, the probability of exactly `n` events in
/// `(0, t)`.
pub fn count_probability(n: u64, lambda: f64, t: f64) -> Result<f64, StochError> {
    if n == 0 {
        erlang_params(1, lambda, t)?;
        return Ok(1.0 - erlang_cdf(1, lambda, t)?);
    }
    Ok(erlang_cdf(n, lambda, t)? - erlang_cdf(n + 1, lambda, t)?)
}

/// Expected sum of `e^{-β W_k}` over events in `(0, t)`, one unit per event.
pub fn expected_discounted_fees(lambda: f64, beta: f64, t: f64) -> Result<f64, StochError> {
    nonnegative("lambda", lambda)?;
    nonnegative("t", t)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(StochError::Invalid { name: "beta", value: beta });
    }
    Ok(-lambda / beta * (-beta * t).exp_m1())
}

/// Probability that no transaction arrives while two boxes of duration
/// `tau` form: `e^{-2 λ τ}`.
pub fn attack_success_prob(lambda: f64, tau: f64) -> Result<f64, StochError> {
    nonnegative("lambda", lambda)?;
    nonnegative("tau", tau)?;
    Ok((-2.0 * lambda * tau).exp())
}

/// Smallest box duration keeping the attack probability at or below `p_max`.
pub fn min_tau_for_bound(lambda: f64, p_max: f64) -> Result<f64, StochError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(StochError::Invalid { name: "lambda", value: lambda });
    }
    if !(p_max > 0.0 && p_max <= 1.0) {
        return Err(StochError::Invalid { name: "p_max", value: p_max });
    }
    Ok((p_max.ln() / (-2.0 * lambda)).max(0.0))
}

/// Average wait until final confirmation under duration-based closing.
pub fn mean_confirmation_time(tau: f64) -> f64 {
    1.5 * tau
}

/// Stablecoin reserve value `m0 · e^{(r - δ) t}`.
pub fn boxdollar_value(m0: f64, r: f64, delta: f64, t: f64) -> f64 {
    m0 * ((r - delta) * t).exp()
}

/// A finite discrete law on integers, stored by ascending value.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaw {
    points: Vec<(u64, f64)>,
}

impl DiscreteLaw {
    /// Probabilities must be nonnegative and sum to one within `1e-12`.
    pub fn new(mut points: Vec<(u64, f64)>) -> Result<Self, StochError> {
        if points.is_empty() {
            return Err(StochError::BadDistribution("empty support".into()));
        }
        points.sort_by_key(|p| p.0);
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(StochError::BadDistribution("repeated support point".into()));
        }
        if points.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return Err(StochError::BadDistribution("negative probability".into()));
        }
        let total: f64 = points.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(StochError::BadDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { points })
    }

    pub fn degenerate(value: u64) -> Self {
        Self {
            points: vec![(value, 1.0)],
        }
    }

    /// Uniform on `lo..=hi`.
    pub fn uniform(lo: u64, hi: u64) -> Result<Self, StochError> {
        if hi < lo {
            return Err(StochError::BadDistribution("empty support".into()));
        }
        let n = (hi - lo + 1) as f64;
        let mut points: Vec<(u64, f64)> = (lo..=hi).map(|v| (v, 1.0 / n)).collect();
        // Absorb rounding so the sum is exactly representable as one.
        let head: f64 = points[..points.len() - 1].iter().map(|p| p.1).sum();
        points.last_mut().expect("nonempty").1 = 1.0 - head;
        Self::new(points)
    }

    /// Parses `value:prob,value:prob,…`.
    pub fn parse(text: &str) -> Result<Self, StochError> {
        let mut points = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (v, p) = part
                .split_once(':')
                .ok_or_else(|| StochError::BadDistribution(format!("expected value:prob, got {part:?}")))?;
            let v: u64 = v
                .trim()
                .parse()
                .map_err(|_| StochError::BadDistribution(format!("bad value {v:?}")))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| StochError::BadDistribution(format!("bad probability {p:?}")))?;
            points.push((v, p));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn min_value(&self) -> u64 {
        self.points[0].0
    }

    pub fn max_value(&self) -> u64 {
        self.points[self.points.len() - 1].0
    }

    pub fn prob(&self, value: u64) -> f64 {
        self.points
            .binary_search_by_key(&value, |p| p.0)
            .map_or(0.0, |i| self.points[i].1)
    }

    pub fn cdf(&self, value: u64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.0 <= value)
            .map(|p| p.1)
            .sum()
    }

    /// Generalized inverse: the smallest support value `m` with `F(m) >= p`.
    pub fn quantile(&self, p: f64) -> u64 {
        let mut acc = 0.0;
        for &(v, q) in &self.points {
            acc += q;
            // Tolerate the rounding of partial sums such as 0.2+0.2+0.2.
            if acc >= p - 1e-12 {
                return v;
            }
        }
        self.max_value()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let p: f64 = rng.random();
        self.quantile(p)
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().map(|&(v, p)| v as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.points
            .iter()
            .map(|&(v, p)| p * (v as f64 - mean).powi(2))
            .sum()
    }
}

/// Transaction-size law on the positive integers.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityPmf(DiscreteLaw);

impl SeverityPmf {
    pub fn new(law: DiscreteLaw) -> Result<Self, StochError> {
        if law.min_value() == 0 {
            return Err(StochError::BadDistribution(
                "severity support must be positive".into(),
            ));
        }
        Ok(Self(law))
    }

    pub fn parse(text: &str) -> Result<Self, StochError> {
        Self::new(DiscreteLaw::parse(text)?)
    }

    pub fn law(&self) -> &DiscreteLaw {
        &self.0
    }
}

/// `f(0..=k_max)` of a compound Poisson sum.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundPmf {
    pub values: Vec<f64>,
    pub lambda: f64,
}

impl CompoundPmf {
    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, f)| k as f64 * f)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Compound Poisson pmf by recursion:
/// `f(0) = e^{-λ}`, `f(k) = (λ/k) Σ_{i=1..k} i p(i) f(k-i)`.
pub fn panjer_compound_pmf(
    lambda: f64,
    severity: &SeverityPmf,
    k_max: usize,
) -> Result<CompoundPmf, StochError> {
    let lambda = nonnegative("lambda", lambda)?;
    let law = severity.law();
    let mut values = Vec::with_capacity(k_max + 1);
    values.push((-lambda).exp());
    for k in 1..=k_max {
        let acc: f64 = law
            .points()
            .iter()
            .take_while(|&&(i, _)| i as usize <= k)
            .map(|&(i, p)| i as f64 * p * values[k - i as usize])
            .sum();
        values.push(lambda * acc / k as f64);
    }
    Ok(CompoundPmf { values, lambda })
}

/// One draw of `S(t) = X_1 + … + X_{N(t)}` with `N` Poisson of rate
/// `lambda`.
pub fn sample_compound<R: Rng + ?Sized>(
    lambda: f64,
    t: f64,
    severity: &SeverityPmf,
    rng: &mut R,
) -> u64 {
    let n = sample_homogeneous(lambda, t, rng).len();
    (0..n).map(|_| severity.law().sample(rng)).sum()
}

/// Independent replications are grouped into this many fixed leaves; each
/// leaf owns an indexed stream and partial results are combined in leaf
/// order, so totals do not depend on the thread count.
pub const REPLICATION_LEAVES: u64 = 1024;

/// Runs `replications` draws of `f` in parallel and returns the per-leaf
/// results folded with `combine`, in leaf order.
pub fn replicate<T, F, C>(
    streams: &Streams,
    label: &str,
    replications: u64,
    f: F,
    combine: C,
) -> T
where
    T: Send + Default,
    F: Fn(&mut StreamRng, &mut T) + Sync,
    C: Fn(T, T) -> T,
{
    let leaves: Vec<T> = (0..REPLICATION_LEAVES)
        .into_par_iter()
        .map(|leaf| {
            let count = replications / REPLICATION_LEAVES
                + u64::from(leaf < replications % REPLICATION_LEAVES);
            let mut rng = streams.indexed(label, leaf);
            let mut acc = T::default();
            for _ in 0..count {
                f(&mut rng, &mut acc);
            }
            acc
        })
        .collect();
    leaves.into_iter().fold(T::default(), combine)
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.575_829_303_549;
