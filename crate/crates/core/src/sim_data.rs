//! Correlated non-normal crossover data through a Gaussian copula, and a
//! replication check of predicted variances.
//!
//! Each subject draws `z ~ N(0, R_latent)`, maps `u = Phi(z)` and takes the
//! marginal quantile at `u`. The response-scale correlation this produces
//! is smaller in magnitude than the latent one; with `calibrate` the latent
//! correlation of every period pair is solved so that the response-scale
//! correlation equals the target `R_truth`.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::correlation::{working_correlation, CorrelationKind, Structure};
use crate::error::{Error, Result};
use crate::gee_fit::{fit, SubjectRecord, TrialDataset};
use crate::gee_variance::{ApproxDesign, DesignModel};
use crate::model_core::{
    build_design_matrix, mean_response, CrossoverLayout, Family, ModelSpec, TreatmentSequence,
};

/// Largest fraction of failed replications tolerated.
pub const MAX_FAILURE_RATE: f64 = 0.05;
/// Calibrated response-scale correlations are solved to this accuracy.
pub const CALIBRATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub layout: CrossoverLayout,
    pub design: ApproxDesign,
    pub theta_true: DVector<f64>,
    pub spec: ModelSpec,
    pub truth: CorrelationKind,
    pub n: usize,
    pub seed: u64,
    /// Solve latent correlations so the response-scale correlation matches
    /// `truth`.
    pub calibrate: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        let m = self.spec.param_layout(&self.layout).len();
        if self.theta_true.len() != m {
            return Err(Error::Dimension(format!(
                "theta_true has length {}, model has {m} parameters",
                self.theta_true.len()
            )));
        }
        for s in self.design.sequences() {
            s.validate(&self.layout)?;
        }
        self.truth.validate(self.layout.periods())
    }

    pub fn counts(&self) -> Vec<usize> {
        round_counts(&self.design, self.n)
    }
}

/// Largest-remainder apportionment of `n` subjects. Remainder ties go to
/// the larger weight, then to the earlier sequence in lexicographic order.
pub fn round_counts(design: &ApproxDesign, n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = design.weights().iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
            .then(design.weights()[b].total_cmp(&design.weights()[a]))
            .then(design.sequences()[a].cmp(&design.sequences()[b]))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Quantile of the unit-scale Gamma(shape) distribution by Newton's method
/// from the Wilson-Hilferty approximation.
pub fn gamma_quantile(shape: f64, u: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(u);
    let c = 1.0 / (9.0 * shape);
    let mut x = shape * (1.0 - c + z * c.sqrt()).powi(3);
    if !(x > 0.0) {
        // lower tail: P(shape, x) ~ x^shape / Gamma(shape + 1)
        x = ((u.ln() + ln_gamma(shape + 1.0)) / shape).exp();
    }
    let log_norm = ln_gamma(shape);
    for _ in 0..100 {
        let err = gamma_lr(shape, x) - u;
        let density = ((shape - 1.0) * x.ln() - x - log_norm).exp();
        if density <= 0.0 || !density.is_finite() {
            break;
        }
        let mut next = x - err / density;
        if next <= 0.0 {
            next = x / 2.0;
        }
        let done = (next - x).abs() <= 1e-14 * x;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Smallest `k` with `F(k) >= u` for Poisson(mu).
pub fn poisson_quantile(mu: f64, u: f64) -> f64 {
    let mut k = 0.0;
    let mut pk = (-mu).exp();
    let mut cdf = pk;
    let limit = mu + 50.0 * mu.sqrt() + 100.0;
    while cdf < u && k < limit {
        k += 1.0;
        pk *= mu / k;
        cdf += pk;
    }
    k
}

fn marginal_quantile(family: Family, mu: f64, u: f64) -> f64 {
    match family {
        Family::Bernoulli => f64::from(u > 1.0 - mu),
        Family::Poisson => poisson_quantile(mu, u),
        Family::Gamma { shape } => gamma_quantile(shape, u) * mu / shape,
    }
}

/// Standard bivariate normal density with correlation `r`.
fn bvn_density(h: f64, k: f64, r: f64) -> f64 {
    let s = 1.0 - r * r;
    (-(h * h - 2.0 * r * h * k + k * k) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s.sqrt())
}

/// Latent thresholds `Phi^{-1}(F(a - 1))`, `a >= 1`, of a discrete margin:
/// `Y >= a` exactly when `Z` exceeds the `a`-th threshold.
fn thresholds(family: Family, mu: f64) -> Vec<f64> {
    let normal = Normal::standard();
    match family {
        Family::Bernoulli => vec![normal.inverse_cdf(1.0 - mu)],
        Family::Poisson => {
            let mut out = vec![];
            let mut pk = (-mu).exp();
            let mut cdf = pk;
            let mut a = 0.0;
            while 1.0 - cdf > 1e-13 {
                out.push(normal.inverse_cdf(cdf));
                a += 1.0;
                pk *= mu / a;
                cdf += pk;
            }
            out
        }
        Family::Gamma { .. } => unreachable!("continuous margin"),
    }
}

/// Gauss-Hermite rule for the standard normal weight (Golub-Welsch).
fn gauss_hermite_normal(order: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i.abs_diff(j) == 1 {
            ((i.max(j)) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Response-scale correlation of two margins under latent correlation `rho`.
pub fn response_correlation(family: Family, mu_a: f64, mu_b: f64, rho: f64) -> f64 {
    match family {
        Family::Bernoulli | Family::Poisson => {
            // d/dr P(Z1 > h, Z2 > k) = phi2(h, k; r), so the covariance is
            // the integral of the summed densities over [0, rho]
            let ha = thresholds(family, mu_a);
            let hb = thresholds(family, mu_b);
            let var = |mu: f64| family.unit_variance(mu);
            let intervals = 400;
            let step = rho / intervals as f64;
            let g = |r: f64| -> f64 {
                let mut total = 0.0;
                for &h in &ha {
                    for &k in &hb {
                        total += bvn_density(h, k, r);
                    }
                }
                total
            };
            let mut cov = 0.0;
            for i in 0..=intervals {
                let w = if i == 0 || i == intervals {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                cov += w * g(i as f64 * step);
            }
            cov *= step / 3.0;
            cov / (var(mu_a) * var(mu_b)).sqrt()
        }
        Family::Gamma { shape } => gamma_response_correlation(shape, rho),
    }
}

/// Scale-free: depends on the shape only.
fn gamma_response_correlation(shape: f64, rho: f64) -> f64 {
    let (x, w) = gauss_hermite_normal(60);
    let normal = Normal::standard();
    let q = |z: f64| {
        let u = normal.cdf(z).clamp(1e-300, 1.0 - 1e-16);
        gamma_quantile(shape, u)
    };
    let qa: Vec<f64> = x.iter().map(|&z| q(z)).collect();
    let s = (1.0 - rho * rho).sqrt();
    let mut e = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        for (j, &xj) in x.iter().enumerate() {
            e += w[i] * w[j] * qa[i] * q(rho * xi + s * xj);
        }
    }
    // unit-scale Gamma(shape): mean = variance = shape
    (e - shape * shape) / shape
}

/// Latent correlation whose response-scale correlation equals `target`.
pub fn calibrate_latent(family: Family, mu_a: f64, mu_b: f64, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let f = |r: f64| response_correlation(family, mu_a, mu_b, r) - target;
    let (mut lo, mut hi) = (-0.999, 0.999);
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "response correlation {target} is not attainable for the {} margins (range {:.3} to {:.3})",
            family.name(),
            flo + target,
            fhi + target
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= CALIBRATION_TOL * 0.1 {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct SequencePlan {
    sequence: TreatmentSequence,
    count: usize,
    mu: Vec<f64>,
    latent: Cholesky<f64, Dyn>,
}

/// Precomputed means and latent factors; generation only draws normals.
pub struct Simulator {
    config: SimConfig,
    plans: Vec<SequencePlan>,
}

impl Simulator {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let p = config.layout.periods();
        let family = config.spec.family();
        let target = working_correlation(&config.truth, p)?;
        let counts = config.counts();
        let mut gamma_cache: HashMap<u64, f64> = HashMap::new();
        let mut plans = vec![];
        for (seq, count) in config.design.sequences().iter().zip(counts) {
            let x = build_design_matrix(seq, &config.layout, &config.spec)?;
            let eta = &x * &config.theta_true;
            let mu: Vec<f64> = eta.iter().map(|&e| mean_response(&config.spec, e)).collect();
            let mut latent = target.clone();
            if config.calibrate {
                for j in 0..p {
                    for k in (j + 1)..p {
                        let r = match family {
                            Family::Gamma { .. } => *gamma_cache
                                .entry(target[(j, k)].to_bits())
                                .or_insert(calibrate_latent(family, 1.0, 1.0, target[(j, k)])?),
                            _ => calibrate_latent(family, mu[j], mu[k], target[(j, k)])?,
                        };
                        latent[(j, k)] = r;
                        latent[(k, j)] = r;
                    }
                }
            }
            let latent = Cholesky::new(latent).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "latent correlation for sequence {seq} is not positive definite"
                ))
            })?;
            plans.push(SequencePlan {
                sequence: seq.clone(),
                count,
                mu,
                latent,
            });
        }
        Ok(Self {
            config: config.clone(),
            plans,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn simulate(&self, seed: u64) -> Result<TrialDataset> {
        let p = self.config.layout.periods();
        let family = self.config.spec.family();
        let normal = Normal::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut subjects = Vec::with_capacity(self.config.n);
        for plan in &self.plans {
            for _ in 0..plan.count {
                let e = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let z = plan.latent.l_dirty().lower_triangle() * e;
                let responses = (0..p)
                    .map(|j| {
                        let u = normal.cdf(z[j]).clamp(1e-300, 1.0 - 1e-16);
                        marginal_quantile(family, plan.mu[j], u)
                    })
                    .collect();
                subjects.push(SubjectRecord {
                    id: (subjects.len() + 1).to_string(),
                    sequence: plan.sequence.clone(),
                    responses,
                });
            }
        }
        TrialDataset::new(self.config.layout, family, subjects)
    }
}

pub fn simulate_trial(config: &SimConfig) -> Result<TrialDataset> {
    Simulator::new(config)?.simulate(config.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub replications: usize,
    pub failures: usize,
    /// Fewer than two usable replications; matrices are NaN.
    pub insufficient: bool,
    pub working: Structure,
    pub mean_alpha: f64,
    pub mean_dispersion: f64,
    pub empirical: DMatrix<f64>,
    pub model_based: DMatrix<f64>,
    pub sandwich: DMatrix<f64>,
    /// Elementwise `empirical / model_based`.
    pub model_ratio: DMatrix<f64>,
    /// Elementwise `empirical / sandwich`.
    pub sandwich_ratio: DMatrix<f64>,
}

impl VarianceReport {
    pub fn model_diagonal_ratios(&self) -> DVector<f64> {
        self.model_ratio.diagonal()
    }

    pub fn sandwich_diagonal_ratios(&self) -> DVector<f64> {
        self.sandwich_ratio.diagonal()
    }
}

/// Fit `replications` simulated trials (seeds `seed + r`) with the given
/// working structure and compare the empirical covariance of the estimates
/// with the model-based and sandwich predictions at the true parameters.
/// The predictions use the true correlation when the working structure
/// matches it and the mean estimated alpha otherwise.
pub fn empirical_variance_check(
    config: &SimConfig,
    working: Structure,
    replications: usize,
) -> Result<VarianceReport> {
    let sim = Simulator::new(config)?;
    let spec = config.spec;
    let m = spec.param_layout(&config.layout).len();
    let fits: Vec<Option<(DVector<f64>, f64, f64)>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let data = sim.simulate(config.seed.wrapping_add(r as u64)).ok()?;
            let f = fit(&data, &spec, working).ok()?;
            f.converged.then_some((f.theta_hat, f.alpha_hat, f.dispersion_hat))
        })
        .collect();
    let ok: Vec<&(DVector<f64>, f64, f64)> = fits.iter().flatten().collect();
    let failures = replications - ok.len();
    if replications > 0 && failures as f64 > MAX_FAILURE_RATE * replications as f64 {
        return Err(Error::ExcessiveFailures {
            failed: failures,
            total: replications,
        });
    }
    let nan = DMatrix::from_element(m, m, f64::NAN);
    if ok.len() < 2 {
        return Ok(VarianceReport {
            replications,
            failures,
            insufficient: true,
            working,
            mean_alpha: f64::NAN,
            mean_dispersion: f64::NAN,
            empirical: nan.clone(),
            model_based: nan.clone(),
            sandwich: nan.clone(),
            model_ratio: nan.clone(),
            sandwich_ratio: nan,
        });
    }
    let k = ok.len() as f64;
    let mean = ok.iter().fold(DVector::zeros(m), |acc, (t, _, _)| acc + t) / k;
    let mut empirical = DMatrix::zeros(m, m);
    for (t, _, _) in &ok {
        let d = t - &mean;
        empirical += &d * d.transpose();
    }
    empirical /= k - 1.0;
    let mean_alpha = ok.iter().map(|(_, a, _)| a).sum::<f64>() / k;
    let mean_dispersion = ok.iter().map(|(_, _, d)| d).sum::<f64>() / k;

    let alpha = if working == config.truth.structure {
        config.truth.alpha
    } else {
        mean_alpha
    };
    let kind = working.with_alpha(alpha);
    let counts = config.counts();
    let realized = ApproxDesign::normalized(
        config.design.sequences().to_vec(),
        counts.iter().map(|&c| c as f64).collect(),
    )?
    .pruned(f64::MIN_POSITIVE)?;
    let model = DesignModel::new(config.layout, spec, kind)?;
    let model_based = model.model_based_variance(&realized, &config.theta_true, config.n)?;
    let sandwich = model.sandwich_variance(&realized, &config.theta_true, &config.truth, config.n)?;
    let model_ratio = empirical.component_div(&model_based);
    let sandwich_ratio = empirical.component_div(&sandwich);
    Ok(VarianceReport {
        replications,
        failures,
        insufficient: false,
        working,
        mean_alpha,
        mean_dispersion,
        empirical,
        model_based,
        sandwich,
        model_ratio,
        sandwich_ratio,
    })
}
