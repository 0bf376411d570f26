//! Dense reference solver for small tomography instances.
//!
//! Builds the forward matrix column by column, the noise weighting as an
//! explicit inverse of the assembled covariance (with the tip–tilt
//! projector written out as a matrix) and solves by Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::tomography::TomographyOperator;
use crate::wfs::SlopeVector;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseOracle {
    /// Forward matrix, slopes x coefficients.
    pub forward: DMatrix<f64>,
    /// Noise weighting per sensor, tip–tilt sandwich included.
    pub weights: Vec<DMatrix<f64>>,
    /// Plain inverse covariance per sensor (no tip–tilt projection).
    pub plain_weights: Vec<DMatrix<f64>>,
    pub prior: DVector<f64>,
    pub alpha: f64,
    pub normal: DMatrix<f64>,
    offsets: Vec<usize>,
    lgs: Vec<bool>,
    chol: Cholesky<f64, Dyn>,
}

impl DenseOracle {
    /// Largest coefficient dimension the oracle accepts.
    pub const MAX_DIM: usize = 5000;

    pub fn assemble(op: &TomographyOperator) -> Result<Self> {
        let n = op.dim();
        if n > Self::MAX_DIM {
            return Err(Error::Domain(format!(
                "dense oracle is capped at {} coefficients, instance has {n}",
                Self::MAX_DIM
            )));
        }
        let m = op.n_slopes();
        let mut forward = DMatrix::zeros(m, n);
        let mut e = vec![0.0; n];
        for k in 0..n {
            e[k] = 1.0;
            let col = op.forward(&e)?;
            forward.column_mut(k).copy_from_slice(&col.data);
            e[k] = 0.0;
        }
        let mut offsets = vec![0];
        let mut weights = Vec::new();
        let mut plain_weights = Vec::new();
        let mut lgs = Vec::new();
        for s in op.sensors() {
            let na = s.geometry.n_active();
            let mut cov = DMatrix::zeros(2 * na, 2 * na);
            for i in 0..na {
                let [cxx, cxy, cyy] = s.noise.block(i);
                cov[(i, i)] = cxx;
                cov[(i, na + i)] = cxy;
                cov[(na + i, i)] = cxy;
                cov[(na + i, na + i)] = cyy;
            }
            let inv = cov
                .try_inverse()
                .ok_or_else(|| Error::Model("singular sensor covariance".into()))?;
            let w = if s.noise.tiptilt_removed {
                let p = tiptilt_complement(na);
                &p * &inv * &p
            } else {
                inv.clone()
            };
            offsets.push(offsets.last().unwrap() + 2 * na);
            weights.push(w);
            plain_weights.push(inv);
            lgs.push(s.star.is_lgs());
        }
        let prior = DVector::from_vec(op.prior().weights.clone());
        let alpha = op.alpha();
        let mut weighted = DMatrix::zeros(m, n);
        for (j, w) in weights.iter().enumerate() {
            let rows = offsets[j]..offsets[j + 1];
            let block = forward.rows(rows.start, rows.len());
            weighted.rows_mut(rows.start, rows.len()).copy_from(&(w * block));
        }
        let mut normal = forward.transpose() * weighted;
        for k in 0..n {
            normal[(k, k)] += alpha * prior[k];
        }
        let chol = Cholesky::new(normal.clone())
            .ok_or_else(|| Error::Model("assembled normal matrix is not positive definite".into()))?;
        Ok(DenseOracle {
            forward,
            weights,
            plain_weights,
            prior,
            alpha,
            normal,
            offsets,
            lgs,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.normal.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.normal * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// `A^T C^{-1} s`.
    pub fn rhs(&self, s: &SlopeVector) -> Result<Vec<f64>> {
        Error::check_len("slopes", self.forward.nrows(), s.len())?;
        let mut w = DVector::zeros(s.len());
        for (j, wm) in self.weights.iter().enumerate() {
            let r = self.offsets[j]..self.offsets[j + 1];
            let v = wm * DVector::from_column_slice(&s.data[r.clone()]);
            w.rows_mut(r.start, r.len()).copy_from(&v);
        }
        Ok((self.forward.transpose() * w).as_slice().to_vec())
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec()
    }

    /// `|x - y|_A` in the energy norm of the normal matrix.
    pub fn energy_norm(&self, x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        crate::dot(&d, &self.apply(&d)).max(0.0).sqrt()
    }

    /// Diagonal of the LGS-only data term with plain weighting.
    pub fn lgs_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let mut diag = vec![0.0; n];
        for (j, w) in self.plain_weights.iter().enumerate() {
            if !self.lgs[j] {
                continue;
            }
            let r = self.offsets[j]..self.offsets[j + 1];
            let block = self.forward.rows(r.start, r.len());
            let wb = w * block;
            for k in 0..n {
                diag[k] += block.column(k).dot(&wb.column(k));
            }
        }
        diag
    }
}

/// `I - T` for a sensor with `n` subapertures (x slopes, then y slopes).
pub fn tiptilt_complement(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::identity(2 * n, 2 * n);
    let v = 1.0 / n as f64;
    for half in 0..2 {
        for i in 0..n {
            for j in 0..n {
                p[(half * n + i, half * n + j)] -= v;
            }
        }
    }
    p
}

/// Dense MAP solution for measurements `s`.
pub fn oracle_solve(op: &TomographyOperator, s: &SlopeVector) -> Result<Vec<f64>> {
    let o = DenseOracle::assemble(op)?;
    Ok(o.solve(&o.rhs(s)?))
}
