//! Response families, canonical links, treatment sequences and the
//! reference-cell design matrix of a crossover trial.
//!
//! Parameters are coded with the last period, last treatment and last
//! carryover level as reference, so a model with `t` treatments and `p`
//! periods has `1 + (p - 1) + (t - 1)` coefficients, plus `t - 1` carryover
//! coefficients in the full model.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 40.0;

/// Default cap on full `t^p` enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

/// Trial geometry: `t` treatments, `p` periods, `n` subjects.
///
/// The usual setting is `t <= p`, but nothing here depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossoverLayout {
    treatments: usize,
    periods: usize,
    subjects: usize,
}

impl CrossoverLayout {
    pub fn new(treatments: usize, periods: usize, subjects: usize) -> Result<Self> {
        if treatments < 2 {
            return Err(Error::InvalidLayout(format!(
                "need at least 2 treatments, got {treatments}"
            )));
        }
        if treatments > 26 {
            return Err(Error::InvalidLayout(format!(
                "treatment labels run A..Z, so at most 26 treatments, got {treatments}"
            )));
        }
        if periods < 2 {
            return Err(Error::InvalidLayout(format!(
                "need at least 2 periods, got {periods}"
            )));
        }
        if subjects < 1 {
            return Err(Error::InvalidLayout("need at least 1 subject".into()));
        }
        Ok(Self {
            treatments,
            periods,
            subjects,
        })
    }

    pub fn treatments(&self) -> usize {
        self.treatments
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn subjects(&self) -> usize {
        self.subjects
    }

    pub fn with_subjects(self, subjects: usize) -> Result<Self> {
        Self::new(self.treatments, self.periods, subjects)
    }
}

/// One treatment per period. Labels are stored zero-based (`A` is 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TreatmentSequence(Vec<u8>);

impl TreatmentSequence {
    pub fn new(assignments: Vec<u8>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= 26) {
            return Err(Error::InvalidSequence(format!(
                "label index {bad} outside A..Z"
            )));
        }
        Ok(Self(assignments))
    }

    pub fn assignments(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Treatment given in `period` (zero-based).
    pub fn treatment(&self, period: usize) -> usize {
        self.0[period] as usize
    }

    pub fn validate(&self, layout: &CrossoverLayout) -> Result<()> {
        if self.0.len() != layout.periods() {
            return Err(Error::Dimension(format!(
                "sequence {self} has {} periods, layout has {}",
                self.0.len(),
                layout.periods()
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&a| a as usize >= layout.treatments()) {
            return Err(Error::InvalidSequence(format!(
                "sequence {self} uses treatment {} but layout has {} treatments",
                (b'A' + bad) as char,
                layout.treatments()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TreatmentSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &a in &self.0 {
            write!(f, "{}", (b'A' + a) as char)?;
        }
        Ok(())
    }
}

impl FromStr for TreatmentSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let labels = s
            .bytes()
            .map(|b| {
                if b.is_ascii_uppercase() {
                    Ok(b - b'A')
                } else {
                    Err(Error::InvalidSequence(format!(
                        "{s:?}: expected uppercase letters A..Z"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels)
    }
}

impl TryFrom<String> for TreatmentSequence {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TreatmentSequence> for String {
    fn from(s: TreatmentSequence) -> String {
        s.to_string()
    }
}

/// Parse a whitespace- or comma-separated list such as `"AB BA"`.
pub fn parse_sequences(list: &str) -> Result<Vec<TreatmentSequence>> {
    list.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Bernoulli,
    Poisson,
    /// Gamma with known shape `kappa`; the rate is implied by the mean.
    Gamma { shape: f64 },
}

impl Family {
    pub fn gamma(shape: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::InvalidModel(format!(
                "gamma shape must be positive, got {shape}"
            )));
        }
        Ok(Family::Gamma { shape })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Gamma { .. } => "gamma",
        }
    }

    pub fn canonical_link(&self) -> Link {
        match self {
            Family::Bernoulli => Link::Logit,
            Family::Poisson | Family::Gamma { .. } => Link::Log,
        }
    }

    /// Dispersion multiplying the unit variance function (`1/kappa` for Gamma).
    pub fn dispersion(&self) -> f64 {
        match self {
            Family::Bernoulli | Family::Poisson => 1.0,
            Family::Gamma { shape } => 1.0 / shape,
        }
    }

    /// Variance as a function of the mean with unit dispersion.
    pub fn unit_variance(&self, mu: f64) -> f64 {
        match self {
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Gamma { .. } => mu * mu,
        }
    }

    pub fn in_mean_space(&self, mu: f64) -> bool {
        match self {
            Family::Bernoulli => mu > 0.0 && mu < 1.0,
            Family::Poisson | Family::Gamma { .. } => mu > 0.0 && mu.is_finite(),
        }
    }

    pub fn in_support(&self, y: f64) -> bool {
        match self {
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Family::Gamma { .. } => y > 0.0 && y.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Logit,
    Log,
}

/// Response family, its canonical link and whether carryover terms enter
/// the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    family: Family,
    link: Link,
    carryover: bool,
}

impl ModelSpec {
    pub fn new(family: Family, link: Link, carryover: bool) -> Result<Self> {
        if family.canonical_link() != link {
            return Err(Error::InvalidModel(format!(
                "{} responses only support the {:?} link",
                family.name(),
                family.canonical_link()
            )));
        }
        if let Family::Gamma { shape } = family {
            Family::gamma(shape)?;
        }
        Ok(Self {
            family,
            link,
            carryover,
        })
    }

    /// Family with its canonical link.
    pub fn canonical(family: Family, carryover: bool) -> Result<Self> {
        Self::new(family, family.canonical_link(), carryover)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn carryover(&self) -> bool {
        self.carryover
    }

    pub fn param_layout(&self, layout: &CrossoverLayout) -> ParamLayout {
        ParamLayout {
            treatments: layout.treatments(),
            periods: layout.periods(),
            carryover: self.carryover,
        }
    }
}

/// Block structure of the coefficient vector:
/// intercept, period effects, direct effects, carryover effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    treatments: usize,
    periods: usize,
    carryover: bool,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        let base = 1 + (self.periods - 1) + (self.treatments - 1);
        if self.carryover {
            base + self.treatments - 1
        } else {
            base
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn period_index(&self, period: usize) -> Option<usize> {
        (period + 1 < self.periods).then_some(1 + period)
    }

    pub fn direct_index(&self, treatment: usize) -> Option<usize> {
        (treatment + 1 < self.treatments).then_some(self.periods + treatment)
    }

    pub fn carryover_index(&self, treatment: usize) -> Option<usize> {
        (self.carryover && treatment + 1 < self.treatments)
            .then_some(self.periods + self.treatments - 1 + treatment)
    }

    /// Column range of the direct-treatment block.
    pub fn direct_block(&self) -> std::ops::Range<usize> {
        self.periods..self.periods + self.treatments - 1
    }

    pub fn carryover_block(&self) -> Option<std::ops::Range<usize>> {
        let start = self.periods + self.treatments - 1;
        self.carryover.then(|| start..start + self.treatments - 1)
    }

    pub fn contrasts(&self) -> usize {
        self.treatments - 1
    }

    /// Names matching the printed tables: `mu`, `beta1..`, `tau1..`, `rho1..`.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        names.push("mu".to_string());
        names.extend((1..self.periods).map(|i| format!("beta{i}")));
        names.extend((1..self.treatments).map(|s| format!("tau{s}")));
        if self.carryover {
            names.extend((1..self.treatments).map(|s| format!("rho{s}")));
        }
        names
    }
}

/// Reference-cell design matrix for one sequence, `p x m`.
pub fn build_design_matrix(
    seq: &TreatmentSequence,
    layout: &CrossoverLayout,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    seq.validate(layout)?;
    let params = spec.param_layout(layout);
    let p = layout.periods();
    let mut x = DMatrix::zeros(p, params.len());
    for i in 0..p {
        x[(i, 0)] = 1.0;
        if let Some(c) = params.period_index(i) {
            x[(i, c)] = 1.0;
        }
        if let Some(c) = params.direct_index(seq.treatment(i)) {
            x[(i, c)] = 1.0;
        }
        if i > 0 {
            if let Some(c) = params.carryover_index(seq.treatment(i - 1)) {
                x[(i, c)] = 1.0;
            }
        }
    }
    Ok(x)
}

fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// Inverse link.
pub fn mean_response(spec: &ModelSpec, eta: f64) -> f64 {
    let eta = clamp_eta(eta);
    match spec.link {
        // 1/(1 + e^-40) rounds to 1; keep the mean strictly inside (0, 1)
        Link::Logit => {
            if eta >= 0.0 {
                (1.0 / (1.0 + (-eta).exp())).min(1.0 - f64::EPSILON / 2.0)
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            }
        }
        Link::Log => eta.exp(),
    }
}

/// `Var(Y)` as a function of the mean, with the Gamma dispersion `1/kappa`
/// folded in.
pub fn variance_function(spec: &ModelSpec, mu: f64) -> Result<f64> {
    let family = spec.family;
    if !family.in_mean_space(mu) {
        return Err(Error::MeanOutOfRange {
            mu,
            family: family.name(),
        });
    }
    Ok(family.unit_variance(mu) * family.dispersion())
}

/// `d mu / d eta`.
pub fn mu_eta_derivative(spec: &ModelSpec, eta: f64) -> f64 {
    let mu = mean_response(spec, eta);
    match spec.link {
        Link::Logit => mu * (1.0 - mu),
        Link::Log => mu,
    }
}

/// All `t^p` sequences in lexicographic order, or the validated explicit list.
pub fn enumerate_sequences(
    layout: &CrossoverLayout,
    restriction: Option<&[TreatmentSequence]>,
    cap: usize,
) -> Result<Vec<TreatmentSequence>> {
    if let Some(list) = restriction {
        for seq in list {
            seq.validate(layout)?;
        }
        return Ok(list.to_vec());
    }
    let t = layout.treatments();
    let p = layout.periods();
    let count = (t as u128).checked_pow(p as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0u8; p];
    for _ in 0..count {
        out.push(TreatmentSequence(digits.clone()));
        for d in digits.iter_mut().rev() {
            *d += 1;
            if (*d as usize) < t {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seq(s: &str) -> TreatmentSequence {
        s.parse().unwrap()
    }

    #[test]
    fn design_matrix_two_by_two_full() {
        let layout = CrossoverLayout::new(2, 2, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Poisson, true).unwrap();
        let x = build_design_matrix(&seq("AB"), &layout, &spec).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[1., 1., 1., 0., 1., 0., 0., 1.]);
        assert_eq!(x, expected);
    }

    #[test]
    fn design_matrix_two_by_two_reduced() {
        let layout = CrossoverLayout::new(2, 2, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Poisson, false).unwrap();
        let x = build_design_matrix(&seq("BA"), &layout, &spec).unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[1., 1., 0., 1., 0., 1.]);
        assert_eq!(x, expected);
    }

    #[test]
    fn design_matrix_four_by_four_row_two() {
        let layout = CrossoverLayout::new(4, 4, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Bernoulli, true).unwrap();
        let x = build_design_matrix(&seq("ABCD"), &layout, &spec).unwrap();
        assert_eq!(x.shape(), (4, 10));
        // columns: mu, P1, P2, P3, TA, TB, TC, CA, CB, CC
        let row: Vec<f64> = x.row(1).iter().copied().collect();
        assert_eq!(row, vec![1., 0., 1., 0., 0., 1., 0., 1., 0., 0.]);
        // last period, treatment D, carryover C: only intercept and C_C
        let row: Vec<f64> = x.row(3).iter().copied().collect();
        assert_eq!(row, vec![1., 0., 0., 0., 0., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn design_matrix_rejects_mismatch() {
        let layout = CrossoverLayout::new(2, 3, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Poisson, false).unwrap();
        assert!(build_design_matrix(&seq("AB"), &layout, &spec).is_err());
        assert!(build_design_matrix(&seq("ABC"), &layout, &spec).is_err());
    }

    #[test]
    fn mean_and_derivative_values() {
        let bern = ModelSpec::canonical(Family::Bernoulli, false).unwrap();
        let pois = ModelSpec::canonical(Family::Poisson, false).unwrap();
        let gam = ModelSpec::canonical(Family::gamma(2.0).unwrap(), false).unwrap();
        assert_eq!(mean_response(&bern, 0.0), 0.5);
        assert_eq!(mean_response(&pois, 0.0), 1.0);
        assert_relative_eq!(mean_response(&bern, 3f64.ln()), 0.75, epsilon = 1e-15);
        assert_eq!(mu_eta_derivative(&bern, 0.0), 0.25);
        assert_relative_eq!(mu_eta_derivative(&gam, 1.0), std::f64::consts::E, epsilon = 1e-15);
    }

    #[test]
    fn variance_values_and_domain() {
        let bern = ModelSpec::canonical(Family::Bernoulli, false).unwrap();
        let pois = ModelSpec::canonical(Family::Poisson, false).unwrap();
        let gam = ModelSpec::canonical(Family::gamma(2.0).unwrap(), false).unwrap();
        assert_eq!(variance_function(&bern, 0.5).unwrap(), 0.25);
        assert_eq!(variance_function(&pois, 2.7).unwrap(), 2.7);
        assert_eq!(variance_function(&gam, 4.0).unwrap(), 8.0);
        assert!(variance_function(&bern, 1.0).is_err());
        assert!(variance_function(&pois, -1.0).is_err());
    }

    #[test]
    fn eta_is_clamped() {
        let pois = ModelSpec::canonical(Family::Poisson, false).unwrap();
        assert_eq!(mean_response(&pois, 1e6), ETA_CLAMP.exp());
        let bern = ModelSpec::canonical(Family::Bernoulli, false).unwrap();
        let hi = mean_response(&bern, 1e6);
        assert!(hi < 1.0 && hi > 0.999);
        assert!(mean_response(&bern, -1e6) > 0.0);
    }

    #[test]
    fn non_canonical_link_rejected() {
        assert!(ModelSpec::new(Family::Poisson, Link::Logit, false).is_err());
        assert!(ModelSpec::new(Family::Bernoulli, Link::Log, false).is_err());
        assert!(Family::gamma(0.0).is_err());
    }

    #[test]
    fn enumeration() {
        let layout = CrossoverLayout::new(2, 2, 1).unwrap();
        let all = enumerate_sequences(&layout, None, DEFAULT_ENUMERATION_CAP).unwrap();
        let names: Vec<String> = all.iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["AA", "AB", "BA", "BB"]);
        let layout = CrossoverLayout::new(3, 2, 1).unwrap();
        assert_eq!(
            enumerate_sequences(&layout, None, DEFAULT_ENUMERATION_CAP)
                .unwrap()
                .len(),
            9
        );
        let layout = CrossoverLayout::new(10, 5, 1).unwrap();
        assert!(matches!(
            enumerate_sequences(&layout, None, DEFAULT_ENUMERATION_CAP),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn explicit_sixteen_sequence_set() {
        let layout = CrossoverLayout::new(4, 4, 80).unwrap();
        let list = parse_sequences(
            "ACDB BDCA CBAD DABC ADCB BCDA CABD DBAC AABB BBAA CCDD DDCC AAAB BBBA CCCD DDDC",
        )
        .unwrap();
        let out = enumerate_sequences(&layout, Some(&list), DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(out, list);
        let bad = parse_sequences("ABCE").unwrap();
        assert!(enumerate_sequences(&layout, Some(&bad), DEFAULT_ENUMERATION_CAP).is_err());
    }

    #[test]
    fn sequence_parsing() {
        assert_eq!(seq("ABCD").assignments(), &[0, 1, 2, 3]);
        assert_eq!(seq("DCBA").to_string(), "DCBA");
        assert!("AbC".parse::<TreatmentSequence>().is_err());
        assert!("".parse::<TreatmentSequence>().is_err());
        assert!(seq("AB") < seq("BA"));
    }

    #[test]
    fn parameter_names() {
        let layout = CrossoverLayout::new(2, 3, 1).unwrap();
        let spec = ModelSpec::canonical(Family::gamma(2.0).unwrap(), true).unwrap();
        assert_eq!(
            spec.param_layout(&layout).names(),
            ["mu", "beta1", "beta2", "tau1", "rho1"]
        );
    }
}
