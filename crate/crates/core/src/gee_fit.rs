//! GEE fit of the marginal model to complete crossover data, with moment
//! estimates of the working correlation and dispersion and sandwich
//! standard errors.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{working_correlation, CorrelationKind, Structure};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model_core::{
    build_design_matrix, mean_response, mu_eta_derivative, CrossoverLayout, Family, Link,
    ModelSpec, TreatmentSequence,
};

pub const MAX_ITERATIONS: usize = 50;
pub const THETA_TOLERANCE: f64 = 1e-8;
/// Distance kept from the ends of the admissible alpha interval.
pub const ALPHA_MARGIN: f64 = 1e-3;
pub const Z_95: f64 = 1.96;
const POLISH_STEPS: usize = 20;
/// `|eta|` beyond which a non-converged binary fit is treated as separated.
const SEPARATION_ETA: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub sequence: TreatmentSequence,
    pub responses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    layout: CrossoverLayout,
    family: Family,
    subjects: Vec<SubjectRecord>,
}

impl TrialDataset {
    pub fn new(layout: CrossoverLayout, family: Family, subjects: Vec<SubjectRecord>) -> Result<Self> {
        for s in &subjects {
            s.sequence.validate(&layout).map_err(|e| {
                Error::Dataset(format!("subject {}: {e}", s.id))
            })?;
            if s.responses.len() != layout.periods() {
                return Err(Error::Dataset(format!(
                    "subject {} has {} responses, expected {}",
                    s.id,
                    s.responses.len(),
                    layout.periods()
                )));
            }
            if let Some((k, y)) = s
                .responses
                .iter()
                .enumerate()
                .find(|(_, y)| !family.in_support(**y))
            {
                return Err(Error::Dataset(format!(
                    "subject {} period {}: response {y} is outside the {} support",
                    s.id,
                    k + 1,
                    family.name()
                )));
            }
        }
        let layout = layout.with_subjects(subjects.len().max(1))?;
        Ok(Self {
            layout,
            family,
            subjects,
        })
    }

    pub fn layout(&self) -> &CrossoverLayout {
        &self.layout
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn observations(&self) -> usize {
        self.subjects.len() * self.layout.periods()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub theta_hat: DVector<f64>,
    pub structure: Structure,
    /// Clamped estimate used in the fit.
    pub alpha_hat: f64,
    pub alpha_raw: f64,
    /// Moment estimate; the Bernoulli and Poisson fits use 1 regardless.
    pub dispersion_hat: f64,
    pub model_se: DVector<f64>,
    pub sandwich_se: DVector<f64>,
    pub ci_low: DVector<f64>,
    pub ci_high: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub estimating_equation_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub raw: f64,
    pub clamped: f64,
}

/// Moment estimate of alpha from per-subject Pearson residuals: the mean of
/// `r_j r_k / phi` over all period pairs (CS) or adjacent pairs (AR1).
pub fn estimate_alpha(
    residuals: &[DVector<f64>],
    structure: Structure,
    dispersion: f64,
) -> Result<AlphaEstimate> {
    if residuals.len() < 2 {
        return Err(Error::Insufficient(format!(
            "alpha needs residuals from at least 2 subjects, got {}",
            residuals.len()
        )));
    }
    let p = residuals[0].len();
    if p < 2 {
        return Err(Error::Insufficient("alpha needs at least 2 periods".into()));
    }
    if residuals.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("residual vectors differ in length".into()));
    }
    let (sum, pairs) = match structure {
        Structure::Independent => {
            return Ok(AlphaEstimate {
                raw: 0.0,
                clamped: 0.0,
            })
        }
        Structure::CompoundSymmetric => {
            let mut sum = 0.0;
            for r in residuals {
                for j in 0..p {
                    for k in (j + 1)..p {
                        sum += r[j] * r[k];
                    }
                }
            }
            (sum, residuals.len() * p * (p - 1) / 2)
        }
        Structure::Ar1 => {
            let mut sum = 0.0;
            for r in residuals {
                for j in 0..p - 1 {
                    sum += r[j] * r[j + 1];
                }
            }
            (sum, residuals.len() * (p - 1))
        }
    };
    let raw = sum / (pairs as f64 * dispersion);
    let (lower, upper) = structure.admissible(p);
    let clamped = raw.clamp(lower + ALPHA_MARGIN, upper - ALPHA_MARGIN);
    Ok(AlphaEstimate { raw, clamped })
}

/// `sum r^2 / (N - m)` over all Pearson residuals.
pub fn estimate_dispersion(residuals: &[f64], m: usize) -> Result<f64> {
    if residuals.len() <= m {
        return Err(Error::Insufficient(format!(
            "dispersion needs more than {m} residuals, got {}",
            residuals.len()
        )));
    }
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / (residuals.len() - m) as f64)
}

/// Design matrices per distinct sequence and the stacked responses.
struct Prepared<'a> {
    data: &'a TrialDataset,
    spec: ModelSpec,
    designs: HashMap<TreatmentSequence, DMatrix<f64>>,
    m: usize,
}

/// Per-subject pieces at the current theta.
struct Contribution {
    info: DMatrix<f64>,
    score: DVector<f64>,
    /// `D' V^{-1} (y - mu)` outer product, for the sandwich middle.
    meat: DMatrix<f64>,
}

impl<'a> Prepared<'a> {
    fn new(data: &'a TrialDataset, spec: &ModelSpec) -> Result<Self> {
        let mut designs = HashMap::new();
        for s in data.subjects() {
            if !designs.contains_key(&s.sequence) {
                designs.insert(
                    s.sequence.clone(),
                    build_design_matrix(&s.sequence, data.layout(), spec)?,
                );
            }
        }
        Ok(Self {
            data,
            spec: *spec,
            designs,
            m: spec.param_layout(data.layout()).len(),
        })
    }

    fn x(&self, s: &SubjectRecord) -> &DMatrix<f64> {
        &self.designs[&s.sequence]
    }

    fn check_rank(&self) -> Result<()> {
        let mut xtx = DMatrix::zeros(self.m, self.m);
        for s in self.data.subjects() {
            let x = self.x(s);
            xtx += x.transpose() * x;
        }
        let rank = linalg::numerical_rank(&xtx);
        if rank < self.m {
            return Err(Error::RankDeficient { rank, dim: self.m });
        }
        Ok(())
    }

    fn eta(&self, s: &SubjectRecord, theta: &DVector<f64>) -> DVector<f64> {
        self.x(s) * theta
    }

    fn max_abs_eta(&self, theta: &DVector<f64>) -> f64 {
        self.data
            .subjects()
            .iter()
            .map(|s| self.eta(s, theta).amax())
            .fold(0.0, f64::max)
    }

    /// Pearson residuals `(y - mu) / sqrt(v(mu))` with the unit variance.
    fn pearson(&self, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        let family = self.spec.family();
        self.data
            .subjects()
            .iter()
            .map(|s| {
                let eta = self.eta(s, theta);
                DVector::from_iterator(
                    eta.len(),
                    eta.iter().zip(&s.responses).map(|(&e, &y)| {
                        let mu = mean_response(&self.spec, e);
                        (y - mu) / family.unit_variance(mu).sqrt()
                    }),
                )
            })
            .collect()
    }

    fn contributions(
        &self,
        theta: &DVector<f64>,
        r: &DMatrix<f64>,
        dispersion: f64,
    ) -> Result<Vec<Contribution>> {
        let family = self.spec.family();
        self.data
            .subjects()
            .par_iter()
            .map(|s| {
                let x = self.x(s);
                let eta = x * theta;
                let p = eta.len();
                let mut d = x.clone();
                let mut sd = DVector::zeros(p);
                let mut resid = DVector::zeros(p);
                for i in 0..p {
                    let mu = mean_response(&self.spec, eta[i]);
                    let v = family.unit_variance(mu) * dispersion;
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::Divergence { iteration: 0 });
                    }
                    sd[i] = v.sqrt();
                    resid[i] = s.responses[i] - mu;
                    d.row_mut(i).scale_mut(mu_eta_derivative(&self.spec, eta[i]));
                }
                let v = DMatrix::from_fn(p, p, |i, j| sd[i] * r[(i, j)] * sd[j]);
                let chol = Cholesky::new(v).ok_or(Error::SingularCovariance { rcond: 0.0 })?;
                let vinv_d = chol.solve(&d);
                let info = d.transpose() * &vinv_d;
                let score = vinv_d.transpose() * resid;
                let meat = &score * score.transpose();
                Ok(Contribution { info, score, meat })
            })
            .collect()
    }

    fn totals(
        &self,
        theta: &DVector<f64>,
        r: &DMatrix<f64>,
        dispersion: f64,
    ) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let parts = self.contributions(theta, r, dispersion)?;
        let mut info = DMatrix::zeros(self.m, self.m);
        let mut score = DVector::zeros(self.m);
        let mut meat = DMatrix::zeros(self.m, self.m);
        for c in &parts {
            info += &c.info;
            score += &c.score;
            meat += &c.meat;
        }
        Ok((linalg::symmetrized(info), score, linalg::symmetrized(meat)))
    }

    /// One Fisher-scoring step, halved while the score norm grows.
    fn scoring_step(
        &self,
        theta: &DVector<f64>,
        r: &DMatrix<f64>,
        dispersion: f64,
        iteration: usize,
    ) -> Result<DVector<f64>> {
        let (info, score, _) = self.totals(theta, r, dispersion)?;
        let chol = Cholesky::new(info).ok_or(Error::Divergence { iteration })?;
        let delta = chol.solve(&score);
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration });
        }
        let base = score.norm();
        let mut step = 1.0;
        for _ in 0..30 {
            let cand = theta + &delta * step;
            if let Ok((_, s, _)) = self.totals(&cand, r, dispersion) {
                if s.norm().is_finite() && (s.norm() <= base || step < 1e-3) {
                    return Ok(cand);
                }
            }
            step *= 0.5;
        }
        Ok(theta + &delta * step)
    }

    fn start(&self) -> DVector<f64> {
        let ys: Vec<f64> = self
            .data
            .subjects()
            .iter()
            .flat_map(|s| s.responses.iter().copied())
            .collect();
        let ybar = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut theta = DVector::zeros(self.m);
        theta[0] = match self.spec.link() {
            Link::Logit => {
                let p = ybar.clamp(1e-3, 1.0 - 1e-3);
                (p / (1.0 - p)).ln()
            }
            Link::Log => ybar.max(1e-3).ln(),
        };
        theta
    }
}

/// Fit by GEE with the given working structure. Starts from the
/// independence GLM, then alternates Fisher scoring with moment updates of
/// alpha and the dispersion.
pub fn fit(data: &TrialDataset, spec: &ModelSpec, structure: Structure) -> Result<FitResult> {
    if std::mem::discriminant(&data.family()) != std::mem::discriminant(&spec.family()) {
        return Err(Error::InvalidModel(format!(
            "dataset family {} does not match model family {}",
            data.family().name(),
            spec.family().name()
        )));
    }
    if data.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 subjects, got {}",
            data.len()
        )));
    }
    let prep = Prepared::new(data, spec)?;
    prep.check_rank()?;
    let p = data.layout().periods();
    let m = prep.m;
    if spec.family() == Family::Bernoulli {
        let first = data.subjects()[0].responses[0];
        if data
            .subjects()
            .iter()
            .all(|s| s.responses.iter().all(|&y| y == first))
        {
            return Err(Error::Separation {
                reason: format!("every response equals {first}"),
                partial: None,
            });
        }
    }
    let estimate_phi = matches!(spec.family(), Family::Gamma { .. });
    let phi_of = |theta: &DVector<f64>| -> Result<f64> {
        let flat: Vec<f64> = prep.pearson(theta).iter().flat_map(|r| r.iter().copied()).collect();
        estimate_dispersion(&flat, m)
    };

    // independence GLM start
    let identity = DMatrix::identity(p, p);
    let mut theta = prep.start();
    for it in 0..MAX_ITERATIONS {
        let next = prep.scoring_step(&theta, &identity, 1.0, it)?;
        let change = (&next - &theta).amax();
        theta = next;
        if change < THETA_TOLERANCE {
            break;
        }
    }

    let mut alpha = AlphaEstimate {
        raw: 0.0,
        clamped: 0.0,
    };
    let mut phi = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut r = identity.clone();
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let phi_hat = phi_of(&theta)?;
        phi = if estimate_phi { phi_hat } else { 1.0 };
        alpha = estimate_alpha(&prep.pearson(&theta), structure, phi)?;
        r = working_correlation(&structure.with_alpha(alpha.clamped), p)?;
        let next = prep.scoring_step(&theta, &r, phi, it)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        let change = (&next - &theta).amax();
        theta = next;
        if change < THETA_TOLERANCE {
            converged = true;
            break;
        }
    }

    // polish the estimating equations with alpha and phi held fixed
    for it in 0..POLISH_STEPS {
        let (_, score, _) = prep.totals(&theta, &r, phi)?;
        if score.norm() <= 1e-12 {
            break;
        }
        theta = prep.scoring_step(&theta, &r, phi, iterations + it)?;
    }

    let dispersion_hat = phi_of(&theta)?;
    let (info, score, meat) = prep.totals(&theta, &r, phi)?;
    let names = spec.param_layout(data.layout()).names();
    let partial = |theta: DVector<f64>| FitResult {
        names: names.clone(),
        theta_hat: theta,
        structure,
        alpha_hat: alpha.clamped,
        alpha_raw: alpha.raw,
        dispersion_hat,
        model_se: DVector::from_element(m, f64::NAN),
        sandwich_se: DVector::from_element(m, f64::NAN),
        ci_low: DVector::from_element(m, f64::NAN),
        ci_high: DVector::from_element(m, f64::NAN),
        iterations,
        converged: false,
        estimating_equation_norm: score.norm(),
    };
    if spec.family() == Family::Bernoulli && !converged && prep.max_abs_eta(&theta) > SEPARATION_ETA {
        return Err(Error::Separation {
            reason: format!(
                "linear predictor reached {:.1} without convergence",
                prep.max_abs_eta(&theta)
            ),
            partial: Some(Box::new(partial(theta))),
        });
    }
    let bread_inv = match linalg::spd_inverse(&info) {
        Ok(b) => b,
        Err(_) => return Err(Error::Divergence { iteration: iterations }),
    };
    let sandwich = linalg::symmetrized(&bread_inv * meat * &bread_inv);
    let model_se = bread_inv.diagonal().map(f64::sqrt);
    let sandwich_se = sandwich.diagonal().map(f64::sqrt);
    let ci_low = &theta - &sandwich_se * Z_95;
    let ci_high = &theta + &sandwich_se * Z_95;
    Ok(FitResult {
        names,
        theta_hat: theta,
        structure,
        alpha_hat: alpha.clamped,
        alpha_raw: alpha.raw,
        dispersion_hat,
        model_se,
        sandwich_se,
        ci_low,
        ci_high,
        iterations,
        converged,
        estimating_equation_norm: score.norm(),
    })
}

impl FitResult {
    pub fn working(&self) -> CorrelationKind {
        self.structure.with_alpha(self.alpha_hat)
    }
}
