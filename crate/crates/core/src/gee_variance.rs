//! GEE information of treatment sequences and the variance of the estimated
//! direct-treatment contrasts under an approximate design.
//!
//! For a sequence `w` with design matrix `X`, `D = diag(dmu/deta) X` and
//! `V = A^{1/2} R A^{1/2}` with `A = diag(Var Y)`. The per-subject
//! information is `D' V^{-1} D`; a design with weights `p_w` over `n`
//! subjects has information `n * sum_w p_w D_w' V_w^{-1} D_w`.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::correlation::{working_correlation, CorrelationKind};
use crate::error::{Error, Result};
use crate::linalg::{self, RCOND_MIN};
use crate::model_core::{
    build_design_matrix, mean_response, mu_eta_derivative, variance_function, CrossoverLayout,
    ModelSpec, ParamLayout, TreatmentSequence,
};

/// Tolerance on the weight sum of an approximate design.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Proportions of subjects allocated to distinct treatment sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxDesign {
    sequences: Vec<TreatmentSequence>,
    weights: Vec<f64>,
}

impl ApproxDesign {
    pub fn new(sequences: Vec<TreatmentSequence>, weights: Vec<f64>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidDesign("no sequences".into()));
        }
        if sequences.len() != weights.len() {
            return Err(Error::InvalidDesign(format!(
                "{} sequences but {} weights",
                sequences.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidDesign(format!("weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDesign(format!("weights sum to {total}, not 1")));
        }
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s) {
                return Err(Error::InvalidDesign(format!("sequence {s} listed twice")));
            }
        }
        let len = sequences[0].len();
        if sequences.iter().any(|s| s.len() != len) {
            return Err(Error::InvalidDesign("sequences differ in length".into()));
        }
        Ok(Self { sequences, weights })
    }

    /// Rescale nonnegative weights to sum to one.
    pub fn normalized(sequences: Vec<TreatmentSequence>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDesign("weights sum to zero".into()));
        }
        Self::new(sequences, weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(sequences: Vec<TreatmentSequence>) -> Result<Self> {
        let k = sequences.len().max(1);
        Self::normalized(sequences, vec![1.0 / k as f64; k])
    }

    pub fn sequences(&self) -> &[TreatmentSequence] {
        &self.sequences
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TreatmentSequence, f64)> {
        self.sequences.iter().zip(self.weights.iter().copied())
    }

    /// Weight on `seq`, zero when absent.
    pub fn weight_of(&self, seq: &TreatmentSequence) -> f64 {
        self.iter().find(|(s, _)| *s == seq).map_or(0.0, |(_, w)| w)
    }

    /// Subject counts `n * p_w`, for reporting only.
    pub fn expected_counts(&self, n: usize) -> Vec<f64> {
        self.weights.iter().map(|w| w * n as f64).collect()
    }

    /// Drop sequences whose weight is below `threshold` and renormalize.
    pub fn pruned(&self, threshold: f64) -> Result<Self> {
        let (seqs, weights): (Vec<_>, Vec<_>) = self
            .iter()
            .filter(|(_, w)| *w >= threshold)
            .map(|(s, w)| (s.clone(), w))
            .unzip();
        Self::normalized(seqs, weights)
    }
}

/// Selects the direct-treatment block `tau_1 .. tau_{t-1}` from the
/// coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastExtractor {
    block: std::ops::Range<usize>,
    dim: usize,
}

impl ContrastExtractor {
    pub fn new(params: &ParamLayout) -> Self {
        Self {
            block: params.direct_block(),
            dim: params.len(),
        }
    }

    pub fn rows(&self) -> usize {
        self.block.len()
    }

    pub fn block(&self) -> std::ops::Range<usize> {
        self.block.clone()
    }

    /// The explicit `(t-1) x m` selector.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.rows(), self.dim);
        for (r, c) in self.block.clone().enumerate() {
            e[(r, c)] = 1.0;
        }
        e
    }

    /// `E M E'` without forming `E`.
    pub fn extract(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.rows();
        m.view((self.block.start, self.block.start), (q, q)).into_owned()
    }
}

/// Layout, response model and working correlation, with `R(alpha)` built once.
#[derive(Debug, Clone)]
pub struct DesignModel {
    layout: CrossoverLayout,
    spec: ModelSpec,
    working: CorrelationKind,
    params: ParamLayout,
    r: DMatrix<f64>,
}

struct SequenceTerms {
    d: DMatrix<f64>,
    sd: DVector<f64>,
}

impl DesignModel {
    pub fn new(layout: CrossoverLayout, spec: ModelSpec, working: CorrelationKind) -> Result<Self> {
        let r = working_correlation(&working, layout.periods())?;
        Ok(Self {
            layout,
            spec,
            working,
            params: spec.param_layout(&layout),
            r,
        })
    }

    pub fn layout(&self) -> &CrossoverLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn working(&self) -> &CorrelationKind {
        &self.working
    }

    pub fn params(&self) -> &ParamLayout {
        &self.params
    }

    pub fn extractor(&self) -> ContrastExtractor {
        ContrastExtractor::new(&self.params)
    }

    /// Same layout and response model under another working correlation.
    pub fn with_working(&self, working: CorrelationKind) -> Result<Self> {
        Self::new(self.layout, self.spec, working)
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "theta has length {}, model has {} parameters",
                theta.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    fn terms(&self, seq: &TreatmentSequence, theta: &DVector<f64>) -> Result<SequenceTerms> {
        self.check_theta(theta)?;
        let x = build_design_matrix(seq, &self.layout, &self.spec)?;
        let eta = &x * theta;
        let p = x.nrows();
        let mut d = x;
        let mut sd = DVector::zeros(p);
        for i in 0..p {
            let mu = mean_response(&self.spec, eta[i]);
            sd[i] = variance_function(&self.spec, mu)?.sqrt();
            let g = mu_eta_derivative(&self.spec, eta[i]);
            d.row_mut(i).scale_mut(g);
        }
        Ok(SequenceTerms { d, sd })
    }

    fn covariance(&self, r: &DMatrix<f64>, sd: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| sd[i] * r[(i, j)] * sd[j])
    }

    fn factor_covariance(&self, sd: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
        let v = self.covariance(&self.r, sd);
        let rcond = linalg::reciprocal_condition(&v);
        if !(rcond >= RCOND_MIN) {
            return Err(Error::SingularCovariance { rcond });
        }
        Cholesky::new(v).ok_or(Error::SingularCovariance { rcond })
    }

    /// Per-subject information `D' V^{-1} D` of one sequence.
    pub fn sequence_information(
        &self,
        seq: &TreatmentSequence,
        theta: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let terms = self.terms(seq, theta)?;
        let chol = self.factor_covariance(&terms.sd)?;
        let mut z = terms.d;
        chol.l_dirty().solve_lower_triangular_mut(&mut z);
        Ok(linalg::symmetrized(z.transpose() * z))
    }

    fn check_design(&self, design: &ApproxDesign) -> Result<()> {
        for s in design.sequences() {
            s.validate(&self.layout)?;
        }
        Ok(())
    }

    /// `n * sum_w p_w D_w' V_w^{-1} D_w`.
    pub fn design_information(
        &self,
        design: &ApproxDesign,
        theta: &DVector<f64>,
        n: usize,
    ) -> Result<DMatrix<f64>> {
        self.check_design(design)?;
        let m = self.params.len();
        let mut info = DMatrix::zeros(m, m);
        for (seq, w) in design.iter() {
            if w > 0.0 {
                info += self.sequence_information(seq, theta)? * w;
            }
        }
        info *= n as f64;
        Ok(linalg::symmetrized(info))
    }

    /// Inverse of the design information, valid when the working correlation
    /// is the true one.
    pub fn model_based_variance(
        &self,
        design: &ApproxDesign,
        theta: &DVector<f64>,
        n: usize,
    ) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.design_information(design, theta, n)?)
    }

    /// `B^{-1} M B^{-1}` with the bread from the working correlation and the
    /// middle term from `Cov(Y) = A^{1/2} R_truth A^{1/2}`.
    pub fn sandwich_variance(
        &self,
        design: &ApproxDesign,
        theta: &DVector<f64>,
        truth: &CorrelationKind,
        n: usize,
    ) -> Result<DMatrix<f64>> {
        self.check_design(design)?;
        let r_truth = working_correlation(truth, self.layout.periods())?;
        let m = self.params.len();
        let mut bread = DMatrix::zeros(m, m);
        let mut middle = DMatrix::zeros(m, m);
        for (seq, w) in design.iter() {
            if w == 0.0 {
                continue;
            }
            let terms = self.terms(seq, theta)?;
            let chol = self.factor_covariance(&terms.sd)?;
            let g = chol.solve(&terms.d);
            let cov = self.covariance(&r_truth, &terms.sd);
            bread += (terms.d.transpose() * &g) * w;
            middle += (g.transpose() * cov * &g) * w;
        }
        bread *= n as f64;
        middle *= n as f64;
        linalg::symmetrize(&mut bread);
        let bread_inv = linalg::spd_inverse(&bread)?;
        Ok(linalg::symmetrized(&bread_inv * middle * &bread_inv))
    }

    /// Variance of the direct-treatment estimates, `E Var(theta) E'`.
    pub fn contrast_variance(
        &self,
        design: &ApproxDesign,
        theta: &DVector<f64>,
        n: usize,
    ) -> Result<DMatrix<f64>> {
        let var = self.model_based_variance(design, theta, n)?;
        Ok(self.extractor().extract(&var))
    }

    /// `log det Var(tau_hat)`; smaller is better.
    pub fn d_criterion(&self, design: &ApproxDesign, theta: &DVector<f64>, n: usize) -> Result<f64> {
        let cv = self.contrast_variance(design, theta, n)?;
        let chol = Cholesky::new(cv).ok_or(Error::NonEstimable {
            rank: 0,
            dim: self.params.len(),
        })?;
        Ok(linalg::log_det_cholesky(&chol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::Structure;
    use crate::model_core::Family;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn seq(s: &str) -> TreatmentSequence {
        s.parse().unwrap()
    }

    fn seqs(list: &[&str]) -> Vec<TreatmentSequence> {
        list.iter().map(|s| seq(s)).collect()
    }

    fn model(t: usize, p: usize, family: Family, carry: bool, kind: CorrelationKind) -> DesignModel {
        DesignModel::new(
            CrossoverLayout::new(t, p, 1).unwrap(),
            ModelSpec::canonical(family, carry).unwrap(),
            kind,
        )
        .unwrap()
    }

    /// 3x3 inverse by cofactors.
    fn inverse3(m: &DMatrix<f64>) -> DMatrix<f64> {
        let c = |i: usize, j: usize| {
            let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
            let s: Vec<usize> = (0..3).filter(|&k| k != j).collect();
            let minor = m[(r[0], s[0])] * m[(r[1], s[1])] - m[(r[0], s[1])] * m[(r[1], s[0])];
            if (i + j).is_multiple_of(2) {
                minor
            } else {
                -minor
            }
        };
        let det = (0..3).map(|j| m[(0, j)] * c(0, j)).sum::<f64>();
        DMatrix::from_fn(3, 3, |i, j| c(j, i) / det)
    }

    fn det3(m: &DMatrix<f64>) -> f64 {
        m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
    }

    #[test]
    fn design_validation() {
        assert!(ApproxDesign::new(seqs(&["AB", "BA"]), vec![0.5, 0.5]).is_ok());
        assert!(ApproxDesign::new(seqs(&["AB", "BA"]), vec![0.6, 0.5]).is_err());
        assert!(ApproxDesign::new(seqs(&["AB", "BA"]), vec![1.5, -0.5]).is_err());
        assert!(ApproxDesign::new(seqs(&["AB", "AB"]), vec![0.5, 0.5]).is_err());
        assert!(ApproxDesign::new(vec![], vec![]).is_err());
        let d = ApproxDesign::new(seqs(&["AB", "BA", "AA"]), vec![0.5, 0.49995, 0.00005]).unwrap();
        let p = d.pruned(1e-4).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn extractor_selects_direct_block() {
        let m = model(4, 4, Family::Bernoulli, true, CorrelationKind::independent());
        let e = m.extractor().matrix();
        assert_eq!(e.shape(), (3, 10));
        for r in 0..3 {
            let ones: Vec<usize> = (0..10).filter(|&c| e[(r, c)] == 1.0).collect();
            assert_eq!(ones, vec![4 + r]);
            assert_eq!(e.row(r).sum(), 1.0);
        }
    }

    #[test]
    fn poisson_identity_information() {
        let m = model(2, 2, Family::Poisson, false, CorrelationKind::independent());
        let info = m.sequence_information(&seq("AB"), &DVector::zeros(3)).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[2., 1., 1., 1., 1., 1., 1., 1., 1.]);
        assert_relative_eq!(info, expected, epsilon = 1e-14);
    }

    #[test]
    fn bernoulli_quarter_xtx() {
        let m = model(3, 3, Family::Bernoulli, true, CorrelationKind::independent());
        let layout = CrossoverLayout::new(3, 3, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Bernoulli, true).unwrap();
        for s in ["ABC", "CCA", "BAB"] {
            let x = build_design_matrix(&seq(s), &layout, &spec).unwrap();
            let info = m.sequence_information(&seq(s), &DVector::zeros(7)).unwrap();
            assert_relative_eq!(info, x.transpose() * &x * 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn gamma_ar1_against_explicit_inverse() {
        let kind = CorrelationKind::ar1(0.5);
        let m = model(2, 3, Family::gamma(2.0).unwrap(), false, kind);
        let info = m.sequence_information(&seq("ABB"), &DVector::zeros(4)).unwrap();
        // mu = 1, dmu/deta = 1, Var = 1/2 so V = R/2 and D = X.
        let r = working_correlation(&kind, 3).unwrap();
        let v_inv = inverse3(&(r * 0.5));
        let x = DMatrix::from_row_slice(3, 4, &[1., 1., 0., 1., 1., 0., 1., 0., 1., 0., 0., 0.]);
        let expected = x.transpose() * v_inv * &x;
        assert_relative_eq!(info, expected, epsilon = 1e-12);
    }

    #[test]
    fn design_information_linearity_and_scaling() {
        let m = model(2, 2, Family::Poisson, false, CorrelationKind::compound_symmetric(0.3));
        let theta = DVector::from_vec(vec![0.1, -0.2, 0.4]);
        let single = ApproxDesign::new(seqs(&["AB"]), vec![1.0]).unwrap();
        assert_relative_eq!(
            m.design_information(&single, &theta, 1).unwrap(),
            m.sequence_information(&seq("AB"), &theta).unwrap(),
            epsilon = 1e-14
        );
        let half = ApproxDesign::uniform(seqs(&["AB", "BA"])).unwrap();
        let expected = (m.sequence_information(&seq("AB"), &theta).unwrap()
            + m.sequence_information(&seq("BA"), &theta).unwrap())
            * 0.5;
        assert_relative_eq!(m.design_information(&half, &theta, 1).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(
            m.design_information(&half, &theta, 20).unwrap(),
            expected * 20.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn model_based_variance_of_ab_ba() {
        let m = model(2, 2, Family::Poisson, false, CorrelationKind::independent());
        let d = ApproxDesign::uniform(seqs(&["AB", "BA"])).unwrap();
        let info = m.design_information(&d, &DVector::zeros(3), 1).unwrap();
        // brute-force determinant decides estimability
        assert_relative_eq!(det3(&info), 0.5, epsilon = 1e-14);
        let var = m.model_based_variance(&d, &DVector::zeros(3), 1).unwrap();
        assert_relative_eq!(var, inverse3(&info), epsilon = 1e-12);
        assert_relative_eq!(&info * &var, DMatrix::identity(3, 3), epsilon = 1e-10);
        // AB alone confounds period and treatment
        let single = ApproxDesign::uniform(seqs(&["AB"])).unwrap();
        assert!(matches!(
            m.model_based_variance(&single, &DVector::zeros(3), 1),
            Err(Error::NonEstimable { rank: 2, dim: 3 })
        ));
    }

    #[test]
    fn sandwich_collapses_and_scales() {
        let kind = CorrelationKind::compound_symmetric(0.4);
        let m = model(2, 3, Family::Poisson, true, kind);
        let d = ApproxDesign::uniform(seqs(&["AAB", "ABB", "BAA", "BBA"])).unwrap();
        let theta = DVector::from_vec(vec![0.2, 0.1, -0.1, 0.3, 0.05]);
        let model_var = m.model_based_variance(&d, &theta, 1).unwrap();
        let sandwich = m.sandwich_variance(&d, &theta, &kind, 1).unwrap();
        assert_relative_eq!(model_var, sandwich, epsilon = 1e-10);
        let s10 = m.sandwich_variance(&d, &theta, &CorrelationKind::ar1(0.6), 10).unwrap();
        let s1 = m.sandwich_variance(&d, &theta, &CorrelationKind::ar1(0.6), 1).unwrap();
        assert_relative_eq!(s10 * 10.0, s1, epsilon = 1e-10);
    }

    #[test]
    fn misspecified_sandwich_dominates_model_based() {
        let m = model(2, 2, Family::Poisson, false, CorrelationKind::independent());
        let d = ApproxDesign::uniform(seqs(&["AB", "BA"])).unwrap();
        let theta = DVector::zeros(3);
        let sandwich = m
            .sandwich_variance(&d, &theta, &CorrelationKind::compound_symmetric(0.5), 1)
            .unwrap();
        assert_relative_eq!(sandwich, sandwich.transpose(), epsilon = 1e-15);
        assert!(sandwich.clone().symmetric_eigenvalues().min() > 0.0);
        // GEE with the true correlation is efficient among linear estimating
        // equations, so the misspecified sandwich can only be larger.
        let efficient = m
            .with_working(CorrelationKind::compound_symmetric(0.5))
            .unwrap()
            .model_based_variance(&d, &theta, 1)
            .unwrap();
        let diff_eig = (sandwich - efficient).symmetric_eigenvalues();
        assert!(diff_eig.min() > -1e-12, "{diff_eig}");
    }

    #[test]
    fn contrast_block_and_criterion() {
        let m = model(2, 2, Family::Poisson, false, CorrelationKind::independent());
        let d = ApproxDesign::uniform(seqs(&["AB", "BA"])).unwrap();
        let theta = DVector::zeros(3);
        let var = m.model_based_variance(&d, &theta, 1).unwrap();
        let cv = m.contrast_variance(&d, &theta, 1).unwrap();
        assert_eq!(cv.shape(), (1, 1));
        assert_eq!(cv[(0, 0)], var[(2, 2)]);
        let lambda = m.d_criterion(&d, &theta, 1).unwrap();
        assert_relative_eq!(lambda, cv[(0, 0)].ln(), epsilon = 1e-14);
        let lambda2 = m.d_criterion(&d, &theta, 2).unwrap();
        assert_relative_eq!(lambda2 - lambda, -(2f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn criterion_against_dense_assembly() {
        // t = 4 binary reduced, Williams design, CS
        let kind = CorrelationKind::compound_symmetric(0.215);
        let m = model(4, 4, Family::Bernoulli, false, kind);
        let d = ApproxDesign::uniform(seqs(&["ABCD", "BDAC", "CADB", "DCBA"])).unwrap();
        let theta = DVector::from_vec(vec![1.098, -0.3056, -0.2414, 0.3817, -0.327, -0.0681, -0.5322]);
        let layout = CrossoverLayout::new(4, 4, 1).unwrap();
        let spec = ModelSpec::canonical(Family::Bernoulli, false).unwrap();
        let r = working_correlation(&kind, 4).unwrap();
        let mut info = DMatrix::zeros(7, 7);
        for s in d.sequences() {
            let x = build_design_matrix(s, &layout, &spec).unwrap();
            let eta = &x * &theta;
            let mu: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
            let a_half = DMatrix::from_diagonal(&DVector::from_iterator(
                4,
                mu.iter().map(|m| (m * (1.0 - m)).sqrt()),
            ));
            let dmat = DMatrix::from_diagonal(&DVector::from_iterator(
                4,
                mu.iter().map(|m| m * (1.0 - m)),
            )) * &x;
            let v = &a_half * &r * &a_half;
            let v_inv = v.try_inverse().unwrap();
            info += dmat.transpose() * v_inv * dmat * 0.25;
        }
        let var = info.try_inverse().unwrap();
        let e = m.extractor().matrix();
        let cv = &e * var * e.transpose();
        let brute = cv.determinant().ln();
        let lambda = m.d_criterion(&d, &theta, 1).unwrap();
        assert_relative_eq!(lambda, brute, epsilon = 1e-10);
        let full = m.contrast_variance(&d, &theta, 1).unwrap();
        assert_eq!(full.shape(), (3, 3));
        assert!(full.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn non_tau_permutation_leaves_contrast_variance() {
        // Reordering non-tau coordinates of the information is a similarity
        // transform that leaves the tau block of its inverse untouched.
        let m = model(3, 3, Family::Poisson, true, CorrelationKind::ar1(0.3));
        let d = ApproxDesign::uniform(seqs(&["ABC", "BCA", "CAB", "ACB", "BAC", "CBA"])).unwrap();
        let theta = DVector::from_vec(vec![0.1, 0.2, -0.1, 0.3, -0.2, 0.1, 0.05]);
        let info = m.design_information(&d, &theta, 1).unwrap();
        let perm = [6, 0, 2, 3, 4, 1, 5]; // tau block (3, 4) kept in place
        let permuted = DMatrix::from_fn(7, 7, |i, j| info[(perm[i], perm[j])]);
        let block = |v: DMatrix<f64>| v.view((3, 3), (2, 2)).into_owned();
        assert_relative_eq!(
            block(linalg::spd_inverse(&info).unwrap()),
            block(linalg::spd_inverse(&permuted).unwrap()),
            epsilon = 1e-10
        );
    }

    fn relabel(s: &TreatmentSequence, perm: &[u8]) -> TreatmentSequence {
        TreatmentSequence::new(s.assignments().iter().map(|&a| perm[a as usize]).collect()).unwrap()
    }

    #[test]
    fn relabeling_treatments_leaves_criterion_invariant() {
        // With the last treatment as reference, a relabeling that fixes the
        // reference permutes the tau (and rho) coordinates.
        let kind = CorrelationKind::compound_symmetric(0.3);
        let m = model(3, 3, Family::Bernoulli, true, kind);
        let d = ApproxDesign::new(seqs(&["ABC", "BCA", "CAB", "AAB"]), vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let theta = DVector::from_vec(vec![0.2, 0.1, -0.3, 0.5, -0.4, 0.2, 0.1]);
        let perm = [1u8, 0, 2];
        let relabeled = ApproxDesign::new(
            d.sequences().iter().map(|s| relabel(s, &perm)).collect(),
            d.weights().to_vec(),
        )
        .unwrap();
        let mut theta2 = theta.clone();
        theta2.swap_rows(3, 4);
        theta2.swap_rows(5, 6);
        assert_relative_eq!(
            m.d_criterion(&d, &theta, 1).unwrap(),
            m.d_criterion(&relabeled, &theta2, 1).unwrap(),
            epsilon = 1e-10
        );
        // t = 2: swapping A and B moves the reference, so tau -> -tau,
        // mu -> mu + tau, and the carryover flips the same way.
        let m2 = model(2, 3, Family::Poisson, true, CorrelationKind::ar1(0.4));
        let d2 = ApproxDesign::new(seqs(&["ABB", "BAA", "AAB"]), vec![0.4, 0.4, 0.2]).unwrap();
        let th = DVector::from_vec(vec![0.3, 0.1, 0.2, 0.25, -0.15]);
        let swapped = ApproxDesign::new(
            d2.sequences().iter().map(|s| relabel(s, &[1, 0])).collect(),
            d2.weights().to_vec(),
        )
        .unwrap();
        // eta is linear in the indicators; reparametrize in the transformed
        // coordinates. Only first-period rows lack carryover, so mu also
        // absorbs rho on later periods: solve that through the period block.
        // beta_i shifts by -rho for i >= 2 relative to period 1; with period
        // 3 as reference: mu' = mu + tau + rho, beta1' = beta1 - rho,
        // beta2' = beta2, tau' = -tau, rho' = -rho.
        let th2 = DVector::from_vec(vec![
            th[0] + th[3] + th[4],
            th[1] - th[4],
            th[2],
            -th[3],
            -th[4],
        ]);
        assert_relative_eq!(
            m2.d_criterion(&d2, &th, 1).unwrap(),
            m2.d_criterion(&swapped, &th2, 1).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn singular_working_covariance_reported() {
        // alpha just inside the bound makes V ill-conditioned
        let m = model(2, 3, Family::Poisson, false, CorrelationKind::compound_symmetric(1.0 - 1e-14));
        let err = m.sequence_information(&seq("ABB"), &DVector::zeros(4)).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { .. }), "{err}");
    }

    proptest! {
        #[test]
        fn information_linear_in_weights(
            lambda in 0.0f64..1.0,
            raw1 in proptest::collection::vec(0.01f64..1.0, 4),
            raw2 in proptest::collection::vec(0.01f64..1.0, 4),
            alpha in 0.0f64..0.9,
        ) {
            let m = model(2, 2, Family::Bernoulli, true, Structure::Ar1.with_alpha(alpha));
            let theta = DVector::from_vec(vec![0.3, -0.1, 0.5, 0.2]);
            let s = seqs(&["AA", "AB", "BA", "BB"]);
            let d1 = ApproxDesign::normalized(s.clone(), raw1.clone()).unwrap();
            let d2 = ApproxDesign::normalized(s.clone(), raw2.clone()).unwrap();
            let mix: Vec<f64> = d1.weights().iter().zip(d2.weights()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let dm = ApproxDesign::normalized(s, mix).unwrap();
            let lhs = m.design_information(&dm, &theta, 1).unwrap();
            let rhs = m.design_information(&d1, &theta, 1).unwrap() * lambda
                + m.design_information(&d2, &theta, 1).unwrap() * (1.0 - lambda);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn sandwich_equals_model_when_truth_is_working(
            alpha in -0.3f64..0.9,
            theta in proptest::collection::vec(-1.0f64..1.0, 5),
            raw in proptest::collection::vec(0.05f64..1.0, 4),
            ar in any::<bool>(),
        ) {
            let structure = if ar { Structure::Ar1 } else { Structure::CompoundSymmetric };
            let kind = structure.with_alpha(alpha);
            let m = model(2, 3, Family::Poisson, true, kind);
            let d = ApproxDesign::normalized(seqs(&["AAB", "ABB", "BAA", "BBA"]), raw).unwrap();
            let theta = DVector::from_vec(theta);
            let model_var = m.model_based_variance(&d, &theta, 3).unwrap();
            let sandwich = m.sandwich_variance(&d, &theta, &kind, 3).unwrap();
            prop_assert!((&model_var - &sandwich).amax() <= 1e-10 * model_var.amax().max(1.0));
            prop_assert!((&sandwich - sandwich.transpose()).amax() <= 1e-12);
        }
    }
}
