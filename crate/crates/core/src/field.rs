//! Batched velocity fields `v(x_t, t, c)`: the trainable network and the analytic oracle share
//! this interface so samplers and losses can run against either.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::analytic::GaussianMixture;
use crate::error::{check_dim, Error, Result};

pub trait VelocityField {
    fn dim(&self) -> usize;

    /// Row `i` of the result is `v(x[i], t[i], c[i])`.
    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], c: &[usize]) -> Result<Array2<f64>>;
}

/// The exact optimal velocity of a mixture, optionally per class label.
#[derive(Debug, Clone)]
pub struct OracleField {
    unconditional: GaussianMixture,
    per_class: Option<BTreeMap<usize, GaussianMixture>>,
}

impl OracleField {
    /// Ignores the class label.
    pub fn unconditional(gm: GaussianMixture) -> Self {
        Self {
            unconditional: gm,
            per_class: None,
        }
    }

    /// Uses the sub-mixture of each class label.
    pub fn conditional(gm: GaussianMixture) -> Result<Self> {
        let mut per_class = BTreeMap::new();
        for c in 0..gm.num_classes() {
            if let Ok(sub) = gm.conditional(c) {
                per_class.insert(c, sub);
            }
        }
        Ok(Self {
            unconditional: gm,
            per_class: Some(per_class),
        })
    }

    pub fn mixture_for(&self, class: usize) -> Result<&GaussianMixture> {
        match &self.per_class {
            None => Ok(&self.unconditional),
            Some(m) => m
                .get(&class)
                .ok_or_else(|| Error::Mixture(format!("no component with class {class}"))),
        }
    }
}

impl VelocityField for OracleField {
    fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, t: &[f64], c: &[usize]) -> Result<Array2<f64>> {
        check_dim("oracle velocity", x.ncols(), self.dim())?;
        check_dim("oracle velocity", x.nrows(), t.len())?;
        check_dim("oracle velocity", x.nrows(), c.len())?;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let xi: Vec<f64> = row.to_vec();
            let v = self.mixture_for(c[i])?.marginal_velocity(&xi, t[i])?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }
}

/// `v == 0` everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn velocity(&self, x: ArrayView2<'_, f64>, _t: &[f64], _c: &[usize]) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}
