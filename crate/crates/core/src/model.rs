//! Model specification and its TOML configuration.
//!
//! Configuration keys (all numbers decimal literals):
//!
//! ```toml
//! kernel = [[2.0, 1.0], [1.0, 2.0]]   # row-major, symmetric, non-negative
//! measure = [0.6, 0.4]                # probability vector
//! lambda = [[0.3, -0.1], [-0.1, 0.2]] # optional, kernel fluctuation (default 0)
//! psi = [0.2, -0.2]                   # optional, measure fluctuation, sums to 0
//! truncation = 4                      # N, the slice |l| <= N
//! horizon = 0.5                       # T
//! seed = 42                           # optional base seed
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Kernel, TypeMeasure};

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub kernel: Kernel,
    pub measure: TypeMeasure,
    /// Kernel fluctuation: `sqrt(n) (kappa_n - kappa) -> lambda`.
    pub lambda: Kernel,
    /// Measure fluctuation, entries sum to zero.
    pub psi: Vec<f64>,
    pub truncation: usize,
    pub horizon: f64,
    pub seed: Option<u64>,
}

impl ModelSpec {
    pub fn new(kernel: Kernel, measure: TypeMeasure, truncation: usize, horizon: f64) -> Result<Self> {
        let k = kernel.dim();
        Self::with_perturbations(kernel, measure, Kernel::zeros(k), vec![0.0; k], truncation, horizon)
    }

    pub fn with_perturbations(
        kernel: Kernel,
        measure: TypeMeasure,
        lambda: Kernel,
        psi: Vec<f64>,
        truncation: usize,
        horizon: f64,
    ) -> Result<Self> {
        let spec = ModelSpec {
            kernel,
            measure,
            lambda,
            psi,
            truncation,
            horizon,
            seed: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Erdos-Renyi: one type, unit kernel.
    pub fn erdos_renyi(truncation: usize, horizon: f64) -> Self {
        Self::new(Kernel::constant(1, 1.0), TypeMeasure::uniform(1), truncation, horizon)
            .expect("valid ER spec")
    }

    pub fn types(&self) -> usize {
        self.kernel.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel.dim();
        for (what, got) in [
            ("measure", self.measure.dim()),
            ("lambda", self.lambda.dim()),
            ("psi", self.psi.len()),
        ] {
            if got != k {
                return Err(Error::Config(format!("{what} has dimension {got}, kernel has {k}")));
            }
        }
        if !self.kernel.is_irreducible() {
            return Err(Error::InvalidKernel("kernel must be strictly positive (irreducible)".into()));
        }
        if !self.measure.is_positive() {
            return Err(Error::InvalidMeasure("measure must be strictly positive".into()));
        }
        let total = self.measure.total();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMeasure(format!("total mass {total}")));
        }
        let psi_sum: f64 = self.psi.iter().sum();
        if psi_sum.abs() > 1e-12 {
            return Err(Error::Config(format!("psi must sum to 0, sums to {psi_sum}")));
        }
        if self.truncation == 0 {
            return Err(Error::Config("truncation must be positive".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon {}", self.horizon)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_spec()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            kernel: self.kernel.rows(),
            measure: self.measure.mass().to_vec(),
            lambda: Some(self.lambda.rows()),
            psi: Some(self.psi.clone()),
            truncation: self.truncation,
            horizon: self.horizon,
            seed: self.seed,
        }
    }
}

/// Serialized form of [`ModelSpec`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: Vec<Vec<f64>>,
    pub measure: Vec<f64>,
    #[serde(default)]
    pub lambda: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub psi: Option<Vec<f64>>,
    pub truncation: usize,
    pub horizon: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn into_spec(self) -> Result<ModelSpec> {
        let kernel = Kernel::new(self.kernel)?;
        let k = kernel.dim();
        let lambda = match self.lambda {
            Some(rows) => Kernel::perturbation(rows)?,
            None => Kernel::zeros(k),
        };
        let mut spec = ModelSpec::with_perturbations(
            kernel,
            TypeMeasure::new(self.measure)?,
            lambda,
            self.psi.unwrap_or_else(|| vec![0.0; k]),
            self.truncation,
            self.horizon,
        )?;
        spec.seed = self.seed;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let spec = ModelSpec::from_toml_str(
            r#"
            kernel = [[2.0, 1.0], [1.0, 2.0]]
            measure = [0.6, 0.4]
            lambda = [[0.3, -0.1], [-0.1, 0.2]]
            psi = [0.2, -0.2]
            truncation = 4
            horizon = 0.5
            seed = 7
            "#,
        )
        .unwrap();
        assert_eq!(spec.types(), 2);
        assert_eq!(spec.lambda.get(0, 1), -0.1);
        assert_eq!(spec.seed, Some(7));
        let back = toml::to_string(&spec.to_config()).unwrap();
        let again = ModelSpec::from_toml_str(&back).unwrap();
        assert_eq!(again.kernel, spec.kernel);
    }

    #[test]
    fn rejects_bad_psi_and_unknown_keys() {
        let bad_psi = "kernel = [[1.0]]\nmeasure = [1.0]\npsi = [0.5]\ntruncation = 3\nhorizon = 1.0\n";
        assert!(ModelSpec::from_toml_str(bad_psi).is_err());
        let unknown = "kernel = [[1.0]]\nmeasure = [1.0]\ntruncation = 3\nhorizon = 1.0\nfoo = 1\n";
        assert!(ModelSpec::from_toml_str(unknown).is_err());
    }

    #[test]
    fn rejects_reducible_kernel() {
        let k = Kernel::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(ModelSpec::new(k, TypeMeasure::uniform(2), 3, 1.0).is_err());
    }
}
