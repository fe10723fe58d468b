//! Priors on the linear-predictor coefficients, Latin hypercube samples from
//! them, and the prior-averaged D-criterion.

use nalgebra::DVector;
use rand::distr::Open01;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gee_variance::{ApproxDesign, DesignModel};

/// Sample size used when none is given.
pub const DEFAULT_SAMPLE_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    IndependentNormal { mean: Vec<f64>, variance: f64 },
}

impl PriorSpec {
    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = PriorSpec::UniformBox { lower, upper };
        p.validate()?;
        Ok(p)
    }

    pub fn independent_normal(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let p = PriorSpec::IndependentNormal { mean, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::UniformBox { lower, .. } => lower.len(),
            PriorSpec::IndependentNormal { mean, .. } => mean.len(),
        }
    }

    pub fn method(&self) -> SampleMethod {
        match self {
            PriorSpec::UniformBox { .. } => SampleMethod::LhsUniform,
            PriorSpec::IndependentNormal { .. } => SampleMethod::LhsNormal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::UniformBox { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::InvalidPrior(format!(
                        "{} lower bounds but {} upper bounds",
                        lower.len(),
                        upper.len()
                    )));
                }
                if lower.is_empty() {
                    return Err(Error::InvalidPrior("empty prior".into()));
                }
                for (k, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if !(l.is_finite() && u.is_finite() && l < u) {
                        return Err(Error::InvalidPrior(format!(
                            "coordinate {k}: interval [{l}, {u}] is empty or not finite"
                        )));
                    }
                }
            }
            PriorSpec::IndependentNormal { mean, variance } => {
                if mean.is_empty() {
                    return Err(Error::InvalidPrior("empty prior".into()));
                }
                if mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::InvalidPrior("prior mean is not finite".into()));
                }
                if !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::InvalidPrior(format!(
                        "variance must be positive, got {variance}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    LhsUniform,
    LhsNormal,
}

/// How to turn a table of estimates and intervals into a prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    Normal { variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSample {
    pub points: Vec<DVector<f64>>,
    pub seed: u64,
    pub method: SampleMethod,
}

impl PriorSample {
    /// A one-point sample, for locally optimal designs.
    pub fn single(theta: DVector<f64>) -> Self {
        Self {
            points: vec![theta],
            seed: 0,
            method: SampleMethod::LhsUniform,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }
}

/// Latin hypercube sample: each coordinate visits every one of the `count`
/// equal-probability strata once, with uniform jitter inside the stratum and
/// an independent random pairing of strata across coordinates.
pub fn lhs_sample(prior: &PriorSpec, count: usize, seed: u64) -> Result<PriorSample> {
    prior.validate()?;
    if count == 0 {
        return Err(Error::InvalidPrior("sample size must be at least 1".into()));
    }
    let m = prior.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![DVector::zeros(m); count];
    let mut strata: Vec<usize> = (0..count).collect();
    let std_normal = Normal::standard();
    for k in 0..m {
        strata.shuffle(&mut rng);
        for (i, point) in points.iter_mut().enumerate() {
            let jitter: f64 = rng.sample(Open01);
            let u = (strata[i] as f64 + jitter) / count as f64;
            point[k] = match prior {
                PriorSpec::UniformBox { lower, upper } => {
                    // stay inside the box despite rounding
                    (lower[k] + u * (upper[k] - lower[k])).clamp(lower[k], upper[k])
                }
                PriorSpec::IndependentNormal { mean, variance } => {
                    mean[k] + variance.sqrt() * std_normal.inverse_cdf(u)
                }
            };
        }
    }
    Ok(PriorSample {
        points,
        seed,
        method: prior.method(),
    })
}

/// Prior from point estimates and 95% intervals: the product of the
/// intervals, or independent normals centred on the estimates.
pub fn prior_from_ci_table(
    estimates: &[f64],
    ci_lower: &[f64],
    ci_upper: &[f64],
    kind: PriorKind,
) -> Result<PriorSpec> {
    if estimates.len() != ci_lower.len() || estimates.len() != ci_upper.len() {
        return Err(Error::InvalidPrior(format!(
            "table columns differ in length ({}, {}, {})",
            estimates.len(),
            ci_lower.len(),
            ci_upper.len()
        )));
    }
    for (k, (l, u)) in ci_lower.iter().zip(ci_upper).enumerate() {
        if !(l < u) {
            return Err(Error::InvalidPrior(format!(
                "row {k}: ci_low {l} is not below ci_high {u}"
            )));
        }
    }
    match kind {
        PriorKind::Uniform => PriorSpec::uniform_box(ci_lower.to_vec(), ci_upper.to_vec()),
        PriorKind::Normal { variance } => PriorSpec::independent_normal(estimates.to_vec(), variance),
    }
}

fn locate(err: Error, index: usize) -> Error {
    match err {
        Error::NonEstimable { rank, dim } => Error::NonEstimablePoint { index, rank, dim },
        other => other,
    }
}

/// `Lambda` at every sample point, in sample order.
pub fn criterion_values(
    model: &DesignModel,
    design: &ApproxDesign,
    sample: &PriorSample,
    n: usize,
) -> Result<Vec<f64>> {
    sample
        .points
        .par_iter()
        .enumerate()
        .map(|(i, theta)| model.d_criterion(design, theta, n).map_err(|e| locate(e, i)))
        .collect()
}

/// Sample mean of the D-criterion, summed in sample order.
pub fn bayes_objective(
    model: &DesignModel,
    design: &ApproxDesign,
    sample: &PriorSample,
    n: usize,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidPrior("empty prior sample".into()));
    }
    let values = criterion_values(model, design, sample, n)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub psi_candidate: f64,
    pub psi_reference: f64,
    /// `(Psi_ref / Psi)^(1/m)`; `None` where the ratio has no real power.
    pub eff_paper: Option<f64>,
    /// `exp((Psi_ref - Psi) / (t - 1))`.
    pub eff_log: f64,
}

impl EfficiencyReport {
    pub fn from_objectives(psi_candidate: f64, psi_reference: f64, m: usize, q: usize) -> Self {
        let ratio = psi_reference / psi_candidate;
        let eff_paper = if psi_candidate == 0.0 {
            None
        } else {
            Some(ratio.powf(1.0 / m as f64)).filter(|v| v.is_finite())
        };
        Self {
            psi_candidate,
            psi_reference,
            eff_paper,
            eff_log: ((psi_reference - psi_candidate) / q as f64).exp(),
        }
    }
}

/// Efficiency of `candidate` against `reference` on a shared prior sample.
pub fn d_efficiency(
    model: &DesignModel,
    candidate: &ApproxDesign,
    reference: &ApproxDesign,
    sample: &PriorSample,
    n: usize,
) -> Result<EfficiencyReport> {
    let psi = bayes_objective(model, candidate, sample, n)?;
    let psi_ref = bayes_objective(model, reference, sample, n)?;
    Ok(EfficiencyReport::from_objectives(
        psi,
        psi_ref,
        model.params().len(),
        model.params().contrasts(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationKind;
    use crate::model_core::{CrossoverLayout, Family, ModelSpec, TreatmentSequence};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    const T2_EST: [f64; 3] = [0.0493, -0.0011, 0.5664];
    const T2_LOW: [f64; 3] = [-0.4457, -0.4256, 0.1006];
    const T2_HIGH: [f64; 3] = [0.5444, 0.4234, 1.0322];

    fn poisson_reduced() -> DesignModel {
        DesignModel::new(
            CrossoverLayout::new(2, 2, 1).unwrap(),
            ModelSpec::canonical(Family::Poisson, false).unwrap(),
            CorrelationKind::independent(),
        )
        .unwrap()
    }

    fn ab_ba() -> ApproxDesign {
        ApproxDesign::uniform(vec!["AB".parse().unwrap(), "BA".parse().unwrap()]).unwrap()
    }

    fn strata_hit(sample: &PriorSample, k: usize, lo: f64, hi: f64) -> Vec<usize> {
        let n = sample.len();
        let mut hits = vec![0; n];
        for p in &sample.points {
            let s = (((p[k] - lo) / (hi - lo)) * n as f64).floor() as usize;
            hits[s.min(n - 1)] += 1;
        }
        hits
    }

    #[test]
    fn unit_square_strata() {
        let prior = PriorSpec::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let s = lhs_sample(&prior, 4, 11).unwrap();
        for k in 0..2 {
            assert_eq!(strata_hit(&s, k, 0.0, 1.0), vec![1, 1, 1, 1]);
        }
    }

    #[test]
    fn single_point_inside_box() {
        let prior = PriorSpec::uniform_box(T2_LOW.to_vec(), T2_HIGH.to_vec()).unwrap();
        let s = lhs_sample(&prior, 1, 5).unwrap();
        assert_eq!(s.len(), 1);
        for k in 0..3 {
            assert!(s.points[0][k] > T2_LOW[k] && s.points[0][k] < T2_HIGH[k]);
        }
        let normal = PriorSpec::independent_normal(vec![0.0; 3], 0.25).unwrap();
        assert_eq!(lhs_sample(&normal, 1, 5).unwrap().len(), 1);
        assert!(lhs_sample(&normal, 0, 5).is_err());
    }

    #[test]
    fn normal_strata_through_quantile() {
        let prior = PriorSpec::independent_normal(vec![1.0, -2.0], 0.5).unwrap();
        let s = lhs_sample(&prior, 50, 3).unwrap();
        let dist = [Normal::new(1.0, 0.5f64.sqrt()).unwrap(), Normal::new(-2.0, 0.5f64.sqrt()).unwrap()];
        for (k, d) in dist.iter().enumerate() {
            let mut hits = [0; 50];
            for p in &s.points {
                hits[(d.cdf(p[k]) * 50.0).floor() as usize] += 1;
            }
            assert!(hits.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn normal_sample_mean_within_standard_error() {
        let prior = PriorSpec::independent_normal(vec![0.0; 3], 0.25).unwrap();
        let bound = 3.0 * 0.5 / 10.0;
        let mut avg = [0.0; 3];
        for seed in 0..20 {
            let s = lhs_sample(&prior, 100, seed).unwrap();
            for k in 0..3 {
                let mean = s.points.iter().map(|p| p[k]).sum::<f64>() / 100.0;
                assert!(mean.abs() <= bound, "seed {seed} coord {k}: {mean}");
                avg[k] += mean / 20.0;
            }
        }
        assert!(avg.iter().all(|a| a.abs() <= bound));
    }

    #[test]
    fn reproducible_and_seed_dependent() {
        let prior = PriorSpec::uniform_box(T2_LOW.to_vec(), T2_HIGH.to_vec()).unwrap();
        let a = lhs_sample(&prior, 100, 42).unwrap();
        let b = lhs_sample(&prior, 100, 42).unwrap();
        let c = lhs_sample(&prior, 100, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn table_two_priors() {
        let u = prior_from_ci_table(&T2_EST, &T2_LOW, &T2_HIGH, PriorKind::Uniform).unwrap();
        assert_eq!(
            u,
            PriorSpec::UniformBox {
                lower: vec![-0.4457, -0.4256, 0.1006],
                upper: vec![0.5444, 0.4234, 1.0322]
            }
        );
        let n = prior_from_ci_table(&T2_EST, &T2_LOW, &T2_HIGH, PriorKind::Normal { variance: 0.25 }).unwrap();
        assert_eq!(
            n,
            PriorSpec::IndependentNormal {
                mean: vec![0.0493, -0.0011, 0.5664],
                variance: 0.25
            }
        );
        let collapsed = [0.5444, -0.4256, 1.0322];
        assert!(prior_from_ci_table(&T2_EST, &T2_LOW, &collapsed, PriorKind::Uniform).is_err());
        assert!(PriorSpec::independent_normal(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn objective_of_one_and_two_points() {
        let model = poisson_reduced();
        let d = ab_ba();
        let a = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let b = DVector::from_vec(vec![-0.3, 0.0, 0.9]);
        let la = model.d_criterion(&d, &a, 1).unwrap();
        let lb = model.d_criterion(&d, &b, 1).unwrap();
        assert_eq!(bayes_objective(&model, &d, &PriorSample::single(a.clone()), 1).unwrap(), la);
        let two = PriorSample {
            points: vec![a, b],
            seed: 0,
            method: SampleMethod::LhsUniform,
        };
        assert_relative_eq!(bayes_objective(&model, &d, &two, 1).unwrap(), (la + lb) / 2.0, epsilon = 1e-15);
    }

    /// Poisson reduced 2x2 information under independence, assembled by hand.
    fn poisson_lambda(theta: &DVector<f64>, weights: &[(&str, f64)]) -> f64 {
        let mut info = DMatrix::<f64>::zeros(3, 3);
        for (s, w) in weights {
            let bytes = s.as_bytes();
            for period in 0..2 {
                let x = [
                    1.0,
                    if period == 0 { 1.0 } else { 0.0 },
                    if bytes[period] == b'A' { 1.0 } else { 0.0 },
                ];
                let eta = x[0] * theta[0] + x[1] * theta[1] + x[2] * theta[2];
                let mu = eta.exp();
                for i in 0..3 {
                    for j in 0..3 {
                        info[(i, j)] += w * mu * x[i] * x[j];
                    }
                }
            }
        }
        info.try_inverse().unwrap()[(2, 2)].ln()
    }

    #[test]
    fn objective_against_independent_average() {
        let model = poisson_reduced();
        let prior = prior_from_ci_table(&T2_EST, &T2_LOW, &T2_HIGH, PriorKind::Uniform).unwrap();
        let sample = lhs_sample(&prior, 100, 2024).unwrap();
        let psi = bayes_objective(&model, &ab_ba(), &sample, 1).unwrap();
        let oracle = sample
            .points
            .iter()
            .map(|th| poisson_lambda(th, &[("AB", 0.5), ("BA", 0.5)]))
            .sum::<f64>()
            / 100.0;
        assert_relative_eq!(psi, oracle, epsilon = 1e-10);
    }

    #[test]
    fn non_estimable_point_is_named() {
        let model = poisson_reduced();
        let d = ApproxDesign::uniform(vec!["AB".parse().unwrap()]).unwrap();
        let sample = PriorSample::single(DVector::zeros(3));
        match bayes_objective(&model, &d, &sample, 1) {
            Err(Error::NonEstimablePoint { index: 0, rank: 2, dim: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn efficiency_arithmetic() {
        let r = EfficiencyReport::from_objectives(-1.0, -2.0, 3, 1);
        assert_relative_eq!(r.eff_paper.unwrap(), 2f64.powf(1.0 / 3.0), epsilon = 1e-15);
        assert_relative_eq!(r.eff_log, (-1f64).exp(), epsilon = 1e-15);
        assert_eq!(EfficiencyReport::from_objectives(0.0, -2.0, 3, 1).eff_paper, None);
        // sign change: no real root of a negative ratio
        assert_eq!(EfficiencyReport::from_objectives(1.0, -2.0, 4, 1).eff_paper, None);
    }

    #[test]
    fn self_efficiency_is_one_and_log_form_ignores_n() {
        let model = poisson_reduced();
        let prior = prior_from_ci_table(&T2_EST, &T2_LOW, &T2_HIGH, PriorKind::Uniform).unwrap();
        let sample = lhs_sample(&prior, 30, 9).unwrap();
        let d = ab_ba();
        let same = d_efficiency(&model, &d, &d, &sample, 1).unwrap();
        assert_eq!(same.eff_log, 1.0);
        assert_eq!(same.eff_paper, Some(1.0));

        // uniform over all four sequences ties with {AB, BA} here, so use an
        // unbalanced design
        let seqs: Vec<TreatmentSequence> = ["AB", "BA"].iter().map(|s| s.parse().unwrap()).collect();
        let other = ApproxDesign::new(seqs, vec![0.7, 0.3]).unwrap();
        let e1 = d_efficiency(&model, &other, &d, &sample, 1).unwrap();
        let e50 = d_efficiency(&model, &other, &d, &sample, 50).unwrap();
        assert_relative_eq!(e1.eff_log, e50.eff_log, epsilon = 1e-12);
        let (p1, p50) = (e1.eff_paper.unwrap(), e50.eff_paper.unwrap());
        assert!((p1 - p50).abs() > 1e-6, "{p1} {p50}");
    }

    proptest! {
        #[test]
        fn uniform_lhs_has_latin_property(
            n in 1usize..40,
            seed in any::<u64>(),
            widths in proptest::collection::vec(0.1f64..5.0, 1..5),
        ) {
            let lower: Vec<f64> = widths.iter().map(|w| -w / 3.0).collect();
            let upper: Vec<f64> = widths.iter().zip(&lower).map(|(w, l)| l + w).collect();
            let prior = PriorSpec::uniform_box(lower.clone(), upper.clone()).unwrap();
            let s = lhs_sample(&prior, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            for k in 0..widths.len() {
                for p in &s.points {
                    prop_assert_eq!(p.len(), widths.len());
                    prop_assert!(p[k] >= lower[k] && p[k] <= upper[k]);
                }
                let hits = strata_hit(&s, k, lower[k], upper[k]);
                prop_assert!(hits.iter().all(|&h| h == 1), "{:?}", hits);
            }
            prop_assert_eq!(s, lhs_sample(&prior, n, seed).unwrap());
        }

        #[test]
        fn objective_of_concatenated_samples(seed in any::<u64>(), n in 1usize..12) {
            let model = poisson_reduced();
            let prior = prior_from_ci_table(&T2_EST, &T2_LOW, &T2_HIGH, PriorKind::Uniform).unwrap();
            let a = lhs_sample(&prior, n, seed).unwrap();
            let b = lhs_sample(&prior, n, seed.wrapping_add(1)).unwrap();
            let mut joined = a.clone();
            joined.points.extend(b.points.iter().cloned());
            let d = ab_ba();
            let pa = bayes_objective(&model, &d, &a, 1).unwrap();
            let pb = bayes_objective(&model, &d, &b, 1).unwrap();
            let pj = bayes_objective(&model, &d, &joined, 1).unwrap();
            prop_assert!((pj - (pa + pb) / 2.0).abs() <= 1e-12 * (1.0 + pj.abs()));
        }
    }
}
