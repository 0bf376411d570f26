//! Least-squares DM fitting over sampled field directions.

use rayon::prelude::*;

use crate::grid::{ApertureGrid, LayerLayout};
use crate::propagation::Projector;
use crate::tomography::{cg_solve, SolveOptions, SolveReport};
use crate::{Error, Result};

/// Fits DM commands `a` minimising `sum_j w_j |H_j a - P_j phi|^2`.
#[derive(Debug, Clone)]
pub struct FittingProblem {
    dm_layout: LayerLayout,
    recon_layout: LayerLayout,
    directions: Vec<[f64; 2]>,
    weights: Vec<f64>,
    mirrors: Vec<Projector>,
    layers: Vec<Projector>,
}

impl FittingProblem {
    /// `weights = None` weighs all directions equally.
    pub fn new(
        dm_layout: LayerLayout,
        recon_layout: LayerLayout,
        grid: &ApertureGrid,
        directions: Vec<[f64; 2]>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if directions.len() < dm_layout.n_layers() {
            return Err(Error::config(
                "fitting.directions",
                format!("{} directions cannot constrain {} mirrors", directions.len(), dm_layout.n_layers()),
            ));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != directions.len() {
                    return Err(Error::config(
                        "fitting.weights",
                        format!("{} weights for {} directions", w.len(), directions.len()),
                    ));
                }
                if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return Err(Error::config("fitting.weights", "weights must be finite and >= 0"));
                }
                w
            }
            None => vec![1.0 / directions.len() as f64; directions.len()],
        };
        let mirrors = directions
            .iter()
            .map(|&t| Projector::new(&dm_layout, grid, t, None))
            .collect::<Result<Vec<_>>>()?;
        let layers = directions
            .iter()
            .map(|&t| Projector::new(&recon_layout, grid, t, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(FittingProblem {
            dm_layout,
            recon_layout,
            directions,
            weights,
            mirrors,
            layers,
        })
    }

    pub fn n_commands(&self) -> usize {
        self.dm_layout.total_len()
    }

    pub fn dm_layout(&self) -> &LayerLayout {
        &self.dm_layout
    }

    pub fn directions(&self) -> &[[f64; 2]] {
        &self.directions
    }

    /// `H^T W P phi`.
    pub fn rhs(&self, phi: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("reconstructed layers", self.recon_layout.total_len(), phi.len())?;
        let parts = (0..self.directions.len())
            .into_par_iter()
            .map(|j| {
                let mut wf = self.layers[j].forward(phi)?;
                wf.iter_mut().for_each(|v| *v *= self.weights[j]);
                self.mirrors[j].adjoint(&wf)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(sum(parts, self.n_commands()))
    }

    /// `out = H^T W H a`.
    pub fn apply_normal(&self, a: &[f64], out: &mut [f64]) -> Result<()> {
        let parts = (0..self.directions.len())
            .into_par_iter()
            .map(|j| {
                let mut wf = self.mirrors[j].forward(a)?;
                wf.iter_mut().for_each(|v| *v *= self.weights[j]);
                self.mirrors[j].adjoint(&wf)
            })
            .collect::<Result<Vec<_>>>()?;
        out.copy_from_slice(&sum(parts, self.n_commands()));
        Ok(())
    }

    /// Weighted objective `sum_j w_j |H_j a - P_j phi|^2`.
    pub fn residual(&self, a: &[f64], phi: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for j in 0..self.directions.len() {
            let h = self.mirrors[j].forward(a)?;
            let p = self.layers[j].forward(phi)?;
            total += self.weights[j] * h.iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        Ok(total)
    }

    /// CG on `H^T W H a = H^T W P phi` from `a = 0`.
    pub fn fit(&self, phi: &[f64], iters: usize) -> Result<(Vec<f64>, SolveReport)> {
        let b = self.rhs(phi)?;
        cg_solve(
            |x, y| self.apply_normal(x, y),
            &b,
            &vec![0.0; b.len()],
            SolveOptions::budget(iters),
        )
    }
}

/// Actuator commands fitted to reconstructed layers `phi`.
pub fn fit_dms(problem: &FittingProblem, phi: &[f64], iters: usize) -> Result<Vec<f64>> {
    Ok(problem.fit(phi, iters)?.0)
}

fn sum(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Hands reconstructed layers that sit at the DM altitudes straight to the
/// mirrors, resampling bilinearly when the grids differ.
pub fn layers_at_dm_shortcut(recon_layout: &LayerLayout, dm_layout: &LayerLayout, phi: &[f64]) -> Result<Vec<f64>> {
    Error::check_len("reconstructed layers", recon_layout.total_len(), phi.len())?;
    if recon_layout.n_layers() != dm_layout.n_layers() {
        return Err(Error::config(
            "fitting.mode",
            format!(
                "layers-at-DM needs one layer per mirror ({} layers, {} mirrors)",
                recon_layout.n_layers(),
                dm_layout.n_layers()
            ),
        ));
    }
    let mut out = Vec::with_capacity(dm_layout.total_len());
    for (l, (rl, dm)) in recon_layout.layers().iter().zip(dm_layout.layers()).enumerate() {
        if (rl.altitude_m - dm.altitude_m).abs() > 1e-6 {
            return Err(Error::config(
                "fitting.mode",
                format!(
                    "layer {l} at {} m does not match mirror altitude {} m",
                    rl.altitude_m, dm.altitude_m
                ),
            ));
        }
        let values = recon_layout.slice(phi, l);
        if rl.grid == dm.grid {
            out.extend_from_slice(values);
            continue;
        }
        let n = dm.grid.size;
        for iy in 0..n {
            for ix in 0..n {
                let (x, y) = (dm.grid.coord(ix), dm.grid.coord(iy));
                let (idx, w) = rl.grid.stencil(x, y).ok_or_else(|| {
                    Error::config(
                        "fitting.mode",
                        format!("actuator ({x:.3}, {y:.3}) m of mirror {l} lies outside layer {l}"),
                    )
                })?;
                out.push((0..4).map(|k| w[k] * values[idx[k]]).sum());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{LayerGeometry, LayerGrid};
    use crate::rng;
    use crate::ARCSEC;
    use rand::Rng;

    fn layout(alts: &[f64], n: usize, d: f64) -> LayerLayout {
        LayerLayout::new(
            alts.iter()
                .map(|&h| LayerGeometry {
                    altitude_m: h,
                    grid: LayerGrid::new(n, d).unwrap(),
                })
                .collect(),
        )
    }

    #[test]
    fn ground_dm_reproduces_ground_layer() {
        let grid = ApertureGrid::annular(17, 0.5, 8.0, 0.0).unwrap();
        let dm = layout(&[0.0], 32, 0.5);
        let rl = layout(&[0.0], 32, 0.5);
        let p = FittingProblem::new(dm, rl, &grid, vec![[0.0, 0.0]], None).unwrap();
        let mut r = rng::from_seed(1);
        let phi: Vec<f64> = (0..1024).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, _) = p.fit(&phi, 200).unwrap();
        assert!(p.residual(&a, &phi).unwrap() < 1e-20);
        assert!(fit_dms(&p, &vec![0.0; 1024], 4).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_does_not_increase() {
        let grid = ApertureGrid::annular(17, 0.5, 8.0, 0.3).unwrap();
        let dm = layout(&[0.0, 4000.0], 32, 0.5);
        let rl = layout(&[0.0, 2000.0, 8000.0], 32, 0.5);
        let dirs: Vec<[f64; 2]> = (0..9)
            .map(|k| [((k % 3) as f64 - 1.0) * 40.0 * ARCSEC, ((k / 3) as f64 - 1.0) * 40.0 * ARCSEC])
            .collect();
        let p = FittingProblem::new(dm, rl, &grid, dirs, None).unwrap();
        let mut r = rng::from_seed(2);
        let phi: Vec<f64> = (0..3 * 1024).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for it in 1..8 {
            let (a, _) = p.fit(&phi, it).unwrap();
            let f = p.residual(&a, &phi).unwrap();
            assert!(f <= prev * (1.0 + 1e-12));
            prev = f;
        }
    }

    #[test]
    fn shortcut_rules() {
        let rl = layout(&[0.0, 4000.0, 12700.0], 16, 0.5);
        let same = rl.clone();
        let phi: Vec<f64> = (0..rl.total_len()).map(|k| k as f64).collect();
        assert_eq!(layers_at_dm_shortcut(&rl, &same, &phi).unwrap(), phi);

        let other = layout(&[0.0, 5000.0, 12700.0], 16, 0.5);
        assert!(matches!(layers_at_dm_shortcut(&rl, &other, &phi), Err(Error::Config { .. })));

        let coarse = layout(&[0.0, 4000.0, 12700.0], 8, 1.0);
        let c = vec![2.5; rl.total_len()];
        let a = layers_at_dm_shortcut(&rl, &coarse, &c).unwrap();
        assert!(a.iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn too_few_directions() {
        let grid = ApertureGrid::annular(9, 1.0, 8.0, 0.0).unwrap();
        let dm = layout(&[0.0, 4000.0], 16, 1.0);
        let rl = layout(&[0.0], 16, 1.0);
        assert!(FittingProblem::new(dm, rl, &grid, vec![[0.0, 0.0]], None).is_err());
    }
}
