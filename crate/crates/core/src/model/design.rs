use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::scalar::Scalar;

/// Which columns enter the outcome design, always in the order
/// `(A, z..., v..., U dummies...)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignSelector {
    pub include_exposure: bool,
    pub include_z: bool,
    pub include_v: bool,
    include_true_cluster: bool,
}

impl DesignSelector {
    pub const fn new(include_exposure: bool, include_z: bool, include_v: bool) -> Self {
        Self { include_exposure, include_z, include_v, include_true_cluster: false }
    }

    /// `(A, z, v)`: the clustered estimator's outcome design. `z` is kept in
    /// the outcome model, so exclusion-restriction violations are tolerated.
    pub const fn full() -> Self {
        Self::new(true, true, true)
    }

    /// `(A, v)`: exposure plus the measured confounders.
    pub const fn exposure_and_v() -> Self {
        Self::new(true, false, true)
    }

    /// `(A, v, U dummies)`. Only the infeasible baseline may build this.
    pub(crate) const fn with_true_cluster_dummies(mut self) -> Self {
        self.include_true_cluster = true;
        self
    }

    #[inline]
    pub fn include_true_cluster(&self) -> bool {
        self.include_true_cluster
    }
}

/// Row-major outcome design matrix with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
    names: Vec<String>,
}

impl<F: Scalar> DesignMatrix<F> {
    pub fn from_rows(rows: Vec<Vec<F>>, names: Vec<String>) -> Result<Self> {
        let cols = names.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("design rows disagree with column names".into()));
        }
        let n = rows.len();
        Ok(Self { rows: n, cols, data: rows.into_iter().flatten().collect(), names })
    }

    pub fn build(ds: &Dataset<F>, sel: DesignSelector) -> Result<Self> {
        let mut names = Vec::new();
        if sel.include_exposure {
            names.push("exposure".to_string());
        }
        if sel.include_z {
            names.extend((1..=ds.dim_z()).map(|j| format!("z{j}")));
        }
        if sel.include_v {
            names.extend((1..=ds.dim_v()).map(|j| format!("v{j}")));
        }
        let levels: Vec<u32> = if sel.include_true_cluster {
            let truth = ds
                .true_clusters()
                .ok_or_else(|| Error::InvalidParameter("dataset has no true_cluster column".into()))?;
            let mut lv = truth;
            lv.sort_unstable();
            lv.dedup();
            // first level is the reference
            lv.into_iter().skip(1).collect()
        } else {
            Vec::new()
        };
        names.extend(levels.iter().map(|u| format!("u{u}")));

        let mut data = Vec::with_capacity(ds.n() * names.len());
        for r in ds.records() {
            if sel.include_exposure {
                data.push(r.exposure);
            }
            if sel.include_z {
                data.extend_from_slice(&r.z);
            }
            if sel.include_v {
                data.extend_from_slice(&r.v);
            }
            for &u in &levels {
                data.push(if r.true_cluster == Some(u) { F::one() } else { F::zero() });
            }
        }
        Ok(Self { rows: ds.n(), cols: names.len(), data, names })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `x_i . beta` for every row.
    pub fn linear_predictor(&self, beta: &[F]) -> Vec<F> {
        assert_eq!(beta.len(), self.cols, "coefficient length must match design width");
        (0..self.rows).map(|i| self.row(i).iter().zip(beta).map(|(&x, &b)| x * b).sum()).collect()
    }

    /// Indices of columns with zero range.
    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.cols)
            .filter(|&j| {
                let first = self.data[j];
                (0..self.rows).all(|i| self.data[i * self.cols + j] == first)
            })
            .collect()
    }
}

/// Outcome-model coefficients: exposure effect first, then the remaining
/// design columns in design order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeCoefficients<F> {
    /// Log-hazard ratio of the exposure.
    pub beta_a: F,
    pub beta_x: Vec<F>,
}

impl<F: Scalar> OutcomeCoefficients<F> {
    pub fn new(beta_a: F, beta_x: Vec<F>) -> Self {
        Self { beta_a, beta_x }
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1);
        Self { beta_a: F::zero(), beta_x: vec![F::zero(); dim - 1] }
    }

    pub fn from_slice(v: &[F]) -> Self {
        Self { beta_a: v[0], beta_x: v[1..].to_vec() }
    }

    pub fn to_vec(&self) -> Vec<F> {
        std::iter::once(self.beta_a).chain(self.beta_x.iter().copied()).collect()
    }

    pub fn dim(&self) -> usize {
        1 + self.beta_x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.beta_a.is_finite() && self.beta_x.iter().all(|b| b.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SurvivalRecord;

    #[test]
    fn column_order_is_exposure_z_v_dummies() {
        let recs = vec![
            SurvivalRecord::new(1, 1.0, 1, 5.0, vec![1.0, 2.0], vec![3.0]).with_true_cluster(0),
            SurvivalRecord::new(2, 2.0, 1, 6.0, vec![1.5, 2.5], vec![3.5]).with_true_cluster(2),
        ];
        let ds = Dataset::validate(recs).unwrap();
        let x = DesignMatrix::build(&ds, DesignSelector::full()).unwrap();
        assert_eq!(x.names(), ["exposure", "z1", "z2", "v1"]);
        assert_eq!(x.row(1), [6.0, 1.5, 2.5, 3.5]);
        let x = DesignMatrix::build(&ds, DesignSelector::exposure_and_v().with_true_cluster_dummies()).unwrap();
        assert_eq!(x.names(), ["exposure", "v1", "u2"]);
        assert_eq!(x.row(0), [5.0, 3.0, 0.0]);
        assert_eq!(x.row(1), [6.0, 3.5, 1.0]);
    }

    #[test]
    fn truth_is_excluded_unless_requested() {
        let recs = vec![
            SurvivalRecord::new(1, 1.0, 1, 5.0, vec![], vec![]).with_true_cluster(0),
            SurvivalRecord::new(2, 2.0, 1, 6.0, vec![], vec![]).with_true_cluster(1),
        ];
        let ds = Dataset::validate(recs).unwrap();
        for sel in [DesignSelector::full(), DesignSelector::exposure_and_v()] {
            assert!(!sel.include_true_cluster());
            let x = DesignMatrix::build(&ds, sel).unwrap();
            assert!(x.names().iter().all(|n| !n.starts_with('u')));
        }
    }
}
