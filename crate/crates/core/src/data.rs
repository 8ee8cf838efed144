use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response series, optional second response and lagged design matrix.
///
/// Row `t` pairs `y[t]` (and `z[t]`) with the design row `(1, x_{t-1}')`:
/// lag alignment happens before construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    z: Option<Vec<f64>>,
    /// Row-major `n x (k + 1)`, column 0 all ones.
    x: Vec<f64>,
    n: usize,
    k: usize,
}

impl Dataset {
    /// Builds a dataset from already-lagged predictor rows; the intercept
    /// column is prepended here.
    pub fn new(y: Vec<f64>, z: Option<Vec<f64>>, predictors: &[Vec<f64>]) -> Result<Self> {
        let n = y.len();
        if predictors.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} predictor rows for {} responses",
                predictors.len(),
                n
            )));
        }
        let k = predictors.first().map_or(0, Vec::len);
        let mut x = Vec::with_capacity(n * (k + 1));
        for (t, row) in predictors.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidDataset(format!(
                    "predictor row {t} has {} entries, expected {k}",
                    row.len()
                )));
            }
            x.push(1.0);
            x.extend_from_slice(row);
        }
        Self::from_design(y, z, x, k)
    }

    /// Intercept-only dataset.
    pub fn intercept_only(y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::from_design(y, None, vec![1.0; n], 0)
    }

    /// Builds a dataset from a row-major design that already carries the
    /// intercept column.
    pub fn from_design(y: Vec<f64>, z: Option<Vec<f64>>, x: Vec<f64>, k: usize) -> Result<Self> {
        let n = y.len();
        let p = k + 1;
        if x.len() != n * p {
            return Err(Error::InvalidDataset(format!(
                "design has {} entries, expected {n} x {p}",
                x.len()
            )));
        }
        if let Some(t) = (0..n).find(|&t| x[t * p] != 1.0) {
            return Err(Error::InvalidDataset(format!(
                "intercept column is not one at row {t}"
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite y at row {i}")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite predictor at row {}",
                i / p
            )));
        }
        if let Some(z) = &z {
            if z.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "z has {} entries, expected {n}",
                    z.len()
                )));
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("non-finite z at row {i}")));
            }
        }
        Ok(Dataset { y, z, x, n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Coefficient dimension `k + 1`.
    pub fn p(&self) -> usize {
        self.k + 1
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> Option<&[f64]> {
        self.z.as_deref()
    }

    pub fn design(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let p = self.p();
        &self.x[t * p..(t + 1) * p]
    }

    /// Same design, new first response.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Self::from_design(y, self.z.clone(), self.x.clone(), self.k)
    }

    /// Same design, new second response.
    pub fn with_z(&self, z: Vec<f64>) -> Result<Self> {
        Self::from_design(self.y.clone(), Some(z), self.x.clone(), self.k)
    }

    /// Interchanges the roles of the two responses (exposure CoVaR).
    pub fn swap_responses(&self) -> Result<Self> {
        let z = self.z.clone().ok_or(Error::MissingZ)?;
        Self::from_design(z, Some(self.y.clone()), self.x.clone(), self.k)
    }

    /// Rows in reverse order.
    pub fn reversed(&self) -> Self {
        let p = self.p();
        let x = (0..self.n)
            .rev()
            .flat_map(|t| self.x[t * p..(t + 1) * p].iter().copied())
            .collect();
        Dataset {
            y: self.y.iter().rev().copied().collect(),
            z: self.z.as_ref().map(|z| z.iter().rev().copied().collect()),
            x,
            n: self.n,
            k: self.k,
        }
    }

    /// `X_t' b` for every row.
    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|t| crate::linalg::dot(self.row(t), coef))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepends_intercept() {
        let d = Dataset::new(vec![1.0, 2.0], None, &[vec![0.5], vec![0.7]]).unwrap();
        assert_eq!(d.design(), &[1.0, 0.5, 1.0, 0.7]);
        assert_eq!((d.n(), d.k(), d.p()), (2, 1, 2));
    }

    #[test]
    fn rejects_non_finite_and_bad_intercept() {
        assert!(Dataset::new(vec![f64::NAN], None, &[vec![1.0]]).is_err());
        assert!(Dataset::from_design(vec![1.0], None, vec![2.0, 1.0], 1).is_err());
        assert!(Dataset::new(vec![1.0], Some(vec![1.0, 2.0]), &[vec![1.0]]).is_err());
    }

    #[test]
    fn swap_requires_z() {
        let d = Dataset::intercept_only(vec![1.0, 2.0]).unwrap();
        assert!(matches!(d.swap_responses(), Err(Error::MissingZ)));
        let d = d.with_z(vec![3.0, 4.0]).unwrap();
        let s = d.swap_responses().unwrap();
        assert_eq!(s.y(), &[3.0, 4.0]);
        assert_eq!(s.z().unwrap(), &[1.0, 2.0]);
    }
}
