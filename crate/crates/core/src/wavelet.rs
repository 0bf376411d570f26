//! Orthonormal 2-D Daubechies transform with periodic boundaries, and the
//! diagonal scale-weighted prior built on top of it.
//!
//! Coefficients use the Mallat layout: after `L` levels on an `n x n` grid
//! the top-left `n/2^L` square holds the scaling coefficients and each
//! level adds three detail bands around it. Scale indices run from `j = 0`
//! (scaling band) to `j = L` (finest details).

use crate::grid::LayerLayout;
use crate::{Error, Result};

/// Daubechies orthonormal filter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Daubechies {
    pub order: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Daubechies {
    pub fn new(order: usize) -> Result<Self> {
        let lo: Vec<f64> = match order {
            1 => vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
            2 => vec![
                0.482_962_913_144_534_143_37,
                0.836_516_303_737_807_905_58,
                0.224_143_868_042_013_381_03,
                -0.129_409_522_551_260_381_17,
            ],
            3 => vec![
                0.332_670_552_950_082_616,
                0.806_891_509_311_092_576_49,
                0.459_877_502_118_491_570_1,
                -0.135_011_020_010_254_588_7,
                -0.085_441_273_882_026_661_693,
                0.035_226_291_885_709_536_603,
            ],
            4 => vec![
                0.230_377_813_308_896_500_86,
                0.714_846_570_552_915_647_09,
                0.630_880_767_929_858_907_88,
                -0.027_983_769_416_859_854_211,
                -0.187_034_811_719_093_084_08,
                0.030_841_381_835_560_763_627,
                0.032_883_011_666_885_199_735,
                -0.010_597_401_785_069_032_105,
            ],
            _ => {
                return Err(Error::config(
                    "wavelet.order",
                    format!("Daubechies order {order} not available (1..=4)"),
                ))
            }
        };
        let len = lo.len();
        let hi = (0..len)
            .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 } * lo[len - 1 - k])
            .collect();
        Ok(Daubechies { order, lo, hi })
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lo
    }

    pub fn highpass(&self) -> &[f64] {
        &self.hi
    }

    /// One periodic analysis step on `x` (even length), written as
    /// `[approx | detail]` into `out`.
    fn analyze(&self, x: &[f64], out: &mut [f64]) {
        let m = x.len();
        let half = m / 2;
        for k in 0..half {
            let mut a = 0.0;
            let mut d = 0.0;
            for (t, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + t) % m];
                a += h * v;
                d += g * v;
            }
            out[k] = a;
            out[half + k] = d;
        }
    }

    /// Transpose of [`Self::analyze`].
    fn synthesize(&self, c: &[f64], out: &mut [f64]) {
        let m = c.len();
        let half = m / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..half {
            let (a, d) = (c[k], c[half + k]);
            for (t, (&h, &g)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * k + t) % m] += h * a + g * d;
            }
        }
    }
}

/// Multilevel 2-D transform down to a `coarsest x coarsest` scaling band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletTransform {
    pub filter: Daubechies,
    pub coarsest: usize,
}

impl WaveletTransform {
    pub fn new(order: usize, coarsest: usize) -> Result<Self> {
        if !coarsest.is_power_of_two() {
            return Err(Error::config("wavelet.coarsest", "coarsest band size must be a power of two"));
        }
        Ok(WaveletTransform {
            filter: Daubechies::new(order)?,
            coarsest,
        })
    }

    /// Daubechies-3 down to an 8x8 scaling band.
    pub fn standard() -> Self {
        WaveletTransform::new(3, 8).expect("valid defaults")
    }

    /// Number of decomposition levels for an `n x n` grid.
    pub fn levels(&self, n: usize) -> usize {
        let mut m = n;
        let mut l = 0;
        while m > self.coarsest && m / 2 >= self.filter.lo.len().div_ceil(2) {
            m /= 2;
            l += 1;
        }
        l
    }

    fn check(&self, n: usize, len: usize) -> Result<()> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::config("grid_size", format!("wavelet grid {n} is not a power of two")));
        }
        Error::check_len("wavelet input", n * n, len)
    }

    /// Forward transform of a row-major `n x n` array.
    pub fn dwt2(&self, values: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(n, values.len())?;
        let mut data = values.to_vec();
        let mut line = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut m = n;
        for _ in 0..self.levels(n) {
            for r in 0..m {
                let row = &mut data[r * n..r * n + m];
                self.filter.analyze(row, &mut tmp[..m]);
                row.copy_from_slice(&tmp[..m]);
            }
            for c in 0..m {
                for r in 0..m {
                    line[r] = data[r * n + c];
                }
                self.filter.analyze(&line[..m], &mut tmp[..m]);
                for r in 0..m {
                    data[r * n + c] = tmp[r];
                }
            }
            m /= 2;
        }
        Ok(data)
    }

    /// Inverse transform; exact transpose of [`Self::dwt2`].
    pub fn idwt2(&self, coeffs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(n, coeffs.len())?;
        let mut data = coeffs.to_vec();
        let mut line = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let levels = self.levels(n);
        let mut m = n >> (levels.saturating_sub(1));
        if levels == 0 {
            return Ok(data);
        }
        for _ in 0..levels {
            for c in 0..m {
                for r in 0..m {
                    line[r] = data[r * n + c];
                }
                self.filter.synthesize(&line[..m], &mut tmp[..m]);
                for r in 0..m {
                    data[r * n + c] = tmp[r];
                }
            }
            for r in 0..m {
                let row = &mut data[r * n..r * n + m];
                self.filter.synthesize(row, &mut tmp[..m]);
                row.copy_from_slice(&tmp[..m]);
            }
            m *= 2;
        }
        Ok(data)
    }

    /// Scale index of Mallat position `(row, col)` on an `n x n` grid.
    pub fn scale_of(&self, n: usize, row: usize, col: usize) -> usize {
        let levels = self.levels(n);
        let base = n >> levels;
        let m = row.max(col);
        if m < base {
            return 0;
        }
        let mut band = base;
        let mut j = 1;
        while m >= 2 * band {
            band *= 2;
            j += 1;
        }
        j
    }

    /// Finest scale index for an `n x n` grid.
    pub fn max_scale(&self, n: usize) -> usize {
        self.levels(n)
    }

    /// Forward transform of every layer in a flat layout.
    pub fn dwt_layers(&self, layout: &LayerLayout, values: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("layer values", layout.total_len(), values.len())?;
        let mut out = Vec::with_capacity(values.len());
        for (l, g) in layout.layers().iter().enumerate() {
            out.extend(self.dwt2(layout.slice(values, l), g.grid.size)?);
        }
        Ok(out)
    }

    pub fn idwt_layers(&self, layout: &LayerLayout, coeffs: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("wavelet coefficients", layout.total_len(), coeffs.len())?;
        let mut out = Vec::with_capacity(coeffs.len());
        for (l, g) in layout.layers().iter().enumerate() {
            out.extend(self.idwt2(layout.slice(coeffs, l), g.grid.size)?);
        }
        Ok(out)
    }
}

/// Diagonal prior `D`: one weight per wavelet coefficient of every layer,
/// `(1/c_rho) (L0^(-11/3) + 2^(11/3 j))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDiagonal {
    pub weights: Vec<f64>,
}

impl PriorDiagonal {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weight of scale `j` for a layer of strength `c_rho`.
pub fn prior_weight(c_rho: f64, outer_scale: f64, j: usize) -> f64 {
    (outer_scale.powf(-11.0 / 3.0) + 2f64.powf(11.0 / 3.0 * j as f64)) / c_rho
}

pub fn build_prior(
    c_rho: &[f64],
    layout: &LayerLayout,
    outer_scale: f64,
    transform: &WaveletTransform,
) -> Result<PriorDiagonal> {
    Error::check_len("layer strengths", layout.n_layers(), c_rho.len())?;
    if !(outer_scale > 0.0 && outer_scale.is_finite()) {
        return Err(Error::config("atmosphere.outer_scale_m", "outer scale must be > 0"));
    }
    let mut weights = Vec::with_capacity(layout.total_len());
    for (l, g) in layout.layers().iter().enumerate() {
        let c = c_rho[l];
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::config(
                format!("tomography.layers[{l}].weight"),
                "layer strength must be > 0",
            ));
        }
        let n = g.grid.size;
        let per_scale: Vec<f64> = (0..=transform.max_scale(n))
            .map(|j| prior_weight(c, outer_scale, j))
            .collect();
        for r in 0..n {
            for col in 0..n {
                weights.push(per_scale[transform.scale_of(n, r, col)]);
            }
        }
    }
    Ok(PriorDiagonal { weights })
}

/// `alpha * D c`.
pub fn apply_prior(c: &[f64], prior: &PriorDiagonal, alpha: f64) -> Result<Vec<f64>> {
    Error::check_len("prior", prior.len(), c.len())?;
    Ok(c.iter().zip(&prior.weights).map(|(x, w)| alpha * w * x).collect())
}

/// `alpha * (D c, c)`.
pub fn penalty(c: &[f64], prior: &PriorDiagonal, alpha: f64) -> Result<f64> {
    Error::check_len("prior", prior.len(), c.len())?;
    Ok(alpha * c.iter().zip(&prior.weights).map(|(x, w)| w * x * x).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LayerGeometry, LayerGrid};
    use crate::rng;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn filters_are_orthonormal() {
        for order in 1..=4 {
            let f = Daubechies::new(order).unwrap();
            let h = f.lowpass();
            let e: f64 = h.iter().map(|v| v * v).sum();
            assert!((e - 1.0).abs() < 1e-14, "order {order}");
            assert!((h.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() < 1e-14);
            for shift in (2..h.len()).step_by(2) {
                let s: f64 = (0..h.len() - shift).map(|k| h[k] * h[k + shift]).sum();
                assert!(s.abs() < 1e-14, "order {order} shift {shift}");
            }
        }
        assert!(Daubechies::new(9).is_err());
    }

    #[test]
    fn perfect_reconstruction_and_parseval() {
        let w = WaveletTransform::standard();
        let x = random(128 * 128, 1);
        let c = w.dwt2(&x, 128).unwrap();
        let y = w.idwt2(&c, 128).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        let ex: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ec: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((ex - ec).abs() < 1e-12 * ex);
    }

    #[test]
    fn non_power_of_two_rejected() {
        let w = WaveletTransform::standard();
        assert!(matches!(w.dwt2(&vec![0.0; 48 * 48], 48), Err(Error::Config { .. })));
    }

    #[test]
    fn scale_indexing() {
        let w = WaveletTransform::standard();
        assert_eq!(w.levels(64), 3);
        assert_eq!(w.scale_of(64, 0, 0), 0);
        assert_eq!(w.scale_of(64, 7, 7), 0);
        assert_eq!(w.scale_of(64, 3, 8), 1);
        assert_eq!(w.scale_of(64, 15, 15), 1);
        assert_eq!(w.scale_of(64, 16, 0), 2);
        assert_eq!(w.scale_of(64, 63, 63), 3);
        assert_eq!(w.levels(8), 0);
    }

    #[test]
    fn prior_weights() {
        let w = WaveletTransform::standard();
        let lay = LayerLayout::new(vec![LayerGeometry {
            altitude_m: 0.0,
            grid: LayerGrid::new(64, 0.5).unwrap(),
        }]);
        let p = build_prior(&[1.0], &lay, 1e9, &w).unwrap();
        assert!((p.weights[0] - 1.0).abs() < 1e-12);
        let l0: f64 = 25.0;
        let p = build_prior(&[1.0], &lay, l0, &w).unwrap();
        // position (40, 40) sits in the finest band, j = 3
        assert_eq!(p.weights[40 * 64 + 40], l0.powf(-11.0 / 3.0) + 2048.0);
        let p2 = build_prior(&[2.0], &lay, l0, &w).unwrap();
        for (a, b) in p.weights.iter().zip(&p2.weights) {
            assert_eq!(*b, a / 2.0 * 1.0);
        }
        assert!(p.weights.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn prior_application() {
        let w = WaveletTransform::standard();
        let lay = LayerLayout::new(vec![LayerGeometry {
            altitude_m: 0.0,
            grid: LayerGrid::new(16, 0.5).unwrap(),
        }]);
        let p = build_prior(&[0.5], &lay, 20.0, &w).unwrap();
        let c = random(256, 4);
        assert!(apply_prior(&c, &p, 0.0).unwrap().iter().all(|&v| v == 0.0));
        let mut e = vec![0.0; 256];
        e[9] = 1.0;
        let pen = penalty(&e, &p, 3.0).unwrap();
        assert_eq!(pen, 3.0 * prior_weight(0.5, 20.0, 1));
        assert!(apply_prior(&c[..10], &p, 1.0).is_err());
    }
}
