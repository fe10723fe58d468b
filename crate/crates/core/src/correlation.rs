//! Working correlation matrices for the repeated measures of one subject.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Independent,
    #[serde(rename = "cs")]
    CompoundSymmetric,
    Ar1,
}

impl Structure {
    pub fn name(&self) -> &'static str {
        match self {
            Structure::Independent => "independent",
            Structure::CompoundSymmetric => "cs",
            Structure::Ar1 => "ar1",
        }
    }

    /// Open interval of admissible alpha for `p` periods.
    pub fn admissible(&self, p: usize) -> (f64, f64) {
        match self {
            Structure::Independent => (f64::NEG_INFINITY, f64::INFINITY),
            Structure::CompoundSymmetric => (-1.0 / (p.max(2) as f64 - 1.0), 1.0),
            Structure::Ar1 => (-1.0, 1.0),
        }
    }

    pub fn with_alpha(self, alpha: f64) -> CorrelationKind {
        CorrelationKind {
            structure: self,
            alpha: if self == Structure::Independent {
                0.0
            } else {
                alpha
            },
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independent" => Ok(Structure::Independent),
            "cs" => Ok(Structure::CompoundSymmetric),
            "ar1" => Ok(Structure::Ar1),
            other => Err(Error::InvalidModel(format!(
                "unknown correlation structure {other:?} (expected independent, cs or ar1)"
            ))),
        }
    }
}

/// A structure together with its fixed scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKind {
    pub structure: Structure,
    pub alpha: f64,
}

impl CorrelationKind {
    pub fn independent() -> Self {
        Structure::Independent.with_alpha(0.0)
    }

    pub fn compound_symmetric(alpha: f64) -> Self {
        Structure::CompoundSymmetric.with_alpha(alpha)
    }

    pub fn ar1(alpha: f64) -> Self {
        Structure::Ar1.with_alpha(alpha)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.structure == Structure::Independent {
            return Ok(());
        }
        let (lower, upper) = self.structure.admissible(p);
        if !(self.alpha > lower && self.alpha < upper) {
            return Err(Error::AlphaOutOfRange {
                structure: self.structure.name(),
                alpha: self.alpha,
                lower,
                upper,
            });
        }
        Ok(())
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.structure {
            Structure::Independent => f.write_str("independent"),
            s => write!(f, "{s}({})", self.alpha),
        }
    }
}

/// `R(alpha)`: symmetric, unit diagonal, positive definite on the admissible
/// interval.
pub fn working_correlation(kind: &CorrelationKind, p: usize) -> Result<DMatrix<f64>> {
    kind.validate(p)?;
    let a = kind.alpha;
    Ok(DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            return 1.0;
        }
        match kind.structure {
            Structure::Independent => 0.0,
            Structure::CompoundSymmetric => a,
            Structure::Ar1 => a.powi(i.abs_diff(j) as i32),
        }
    }))
}
