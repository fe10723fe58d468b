//! Fixtures shared by the benchmarks.

use xover_core::{
    lhs_sample, parse_sequences, prior_from_ci_table, CorrelationKind, CrossoverLayout, DesignModel,
    Family, ModelSpec, PriorKind, PriorSample, TreatmentSequence,
};

pub struct Fixture {
    pub model: DesignModel,
    pub candidates: Vec<TreatmentSequence>,
    pub sample: PriorSample,
}

/// Binary 4x4 reduced model over the 16-sequence candidate set, CS 0.8.
pub fn binary_reduced(points: usize) -> Fixture {
    let model = DesignModel::new(
        CrossoverLayout::new(4, 4, 100).unwrap(),
        ModelSpec::canonical(Family::Bernoulli, false).unwrap(),
        CorrelationKind::compound_symmetric(0.8),
    )
    .unwrap();
    let candidates = parse_sequences(
        "ACDB BDCA CBAD DABC ADCB BCDA CABD DBAC AABB BBAA CCDD DDCC AAAB BBBA CCCD DDDC",
    )
    .unwrap();
    let est = [1.0980, -0.3056, -0.2414, 0.3817, -0.3270, -0.0681, -0.5322];
    let lo = [0.4232, -0.8643, -0.8228, -0.2391, -0.8660, -0.6996, -1.1684];
    let hi = [1.7728, 0.2532, 0.3399, 1.0026, 0.2119, 0.5635, 0.1041];
    let prior = prior_from_ci_table(&est, &lo, &hi, PriorKind::Uniform).unwrap();
    Fixture {
        model,
        candidates,
        sample: lhs_sample(&prior, points, 1).unwrap(),
    }
}

/// Poisson 2x2 full model over all four sequences, AR1 0.4.
pub fn poisson_full(points: usize) -> Fixture {
    let layout = CrossoverLayout::new(2, 2, 20).unwrap();
    let model = DesignModel::new(
        layout,
        ModelSpec::canonical(Family::Poisson, true).unwrap(),
        CorrelationKind::ar1(0.4),
    )
    .unwrap();
    let candidates = xover_core::enumerate_sequences(&layout, None, 16).unwrap();
    let est = [-0.0541, 0.0541, 0.6419, 0.1494];
    let lo = [-1.0405, -0.4519, -0.1036, -0.8566];
    let hi = [0.9324, 0.5600, 1.3873, 1.1553];
    let prior = prior_from_ci_table(&est, &lo, &hi, PriorKind::Uniform).unwrap();
    Fixture {
        model,
        candidates,
        sample: lhs_sample(&prior, points, 1).unwrap(),
    }
}
