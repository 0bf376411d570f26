//! MAP normal equations in the wavelet domain.
//!
//! The operator `sum_m A_m^T C_m^{-1} A_m + alpha D` is never assembled:
//! each application runs idwt -> project -> Shack–Hartmann -> weighting ->
//! adjoints -> dwt for every sensor and adds the diagonal prior.

mod solver;

pub use solver::{cg_solve, pcg_solve, solve_observed, write_trace_csv, SolveOptions, SolveReport, SolverState};

use rayon::prelude::*;

use crate::grid::LayerLayout;
use crate::propagation::{GuideStar, Projector};
use crate::wavelet::{build_prior, PriorDiagonal, WaveletTransform};
use crate::wfs::{self, NoiseModel, SensorNoise, SlopeVector, WfsGeometry};
use crate::{dot, Error, Result};

/// One sensor's forward chain with its noise description.
#[derive(Debug, Clone)]
pub struct SensorChain {
    pub star: GuideStar,
    pub geometry: WfsGeometry,
    pub noise: SensorNoise,
    projector: Projector,
}

impl SensorChain {
    pub fn new(star: GuideStar, geometry: WfsGeometry, noise: SensorNoise, layout: &LayerLayout) -> Result<Self> {
        noise.validate(geometry.n_active())?;
        let projector = Projector::new(layout, geometry.corner_grid(), star.direction, star.cone_altitude())?;
        Ok(SensorChain {
            star,
            geometry,
            noise,
            projector,
        })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Noise-free slopes `Gamma P phi` of layer values `phi`.
    pub fn slopes(&self, layers: &[f64]) -> Result<Vec<f64>> {
        let wf = self.projector.forward(layers)?;
        wfs::shack_hartmann(&wf, &self.geometry)
    }

    /// `out += P^T Gamma^T y`.
    pub fn adjoint_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        let mut wf = vec![0.0; self.projector.wavefront_len()];
        wfs::shack_hartmann_adjoint(y, &self.geometry, &mut wf)?;
        self.projector.apply_adjoint(&wf, out)
    }

    /// `P^T Gamma^T C^{-1} Gamma P phi` in layer space.
    fn normal(&self, layers: &[f64]) -> Result<Vec<f64>> {
        let s = self.slopes(layers)?;
        let w = wfs::apply_inv_sensor(&s, &self.noise);
        let mut out = vec![0.0; layers.len()];
        self.adjoint_into(&w, &mut out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TomographyOperator {
    layout: LayerLayout,
    transform: WaveletTransform,
    sensors: Vec<SensorChain>,
    prior: PriorDiagonal,
    alpha: f64,
}

impl TomographyOperator {
    /// `geoms[m]` observes `stars[geoms[m].direction_index]` with noise
    /// `noise.sensors[m]`; `c_rho` are the relative layer strengths of the
    /// reconstruction layers in `layout`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: LayerLayout,
        transform: WaveletTransform,
        stars: &[GuideStar],
        geoms: &[WfsGeometry],
        noise: &NoiseModel,
        c_rho: &[f64],
        outer_scale: f64,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        noise.validate(geoms)?;
        let sensors = geoms
            .iter()
            .zip(&noise.sensors)
            .map(|(g, n)| {
                let star = stars.get(g.direction_index).ok_or_else(|| {
                    Error::config(
                        "wfs.direction_index",
                        format!("no guide star {} ({} defined)", g.direction_index, stars.len()),
                    )
                })?;
                SensorChain::new(star.clone(), g.clone(), n.clone(), &layout)
            })
            .collect::<Result<Vec<_>>>()?;
        let prior = build_prior(c_rho, &layout, outer_scale, &transform)?;
        Ok(TomographyOperator {
            layout,
            transform,
            sensors,
            prior,
            alpha,
        })
    }

    /// Number of wavelet coefficients.
    pub fn dim(&self) -> usize {
        self.layout.total_len()
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn transform(&self) -> &WaveletTransform {
        &self.transform
    }

    pub fn sensors(&self) -> &[SensorChain] {
        &self.sensors
    }

    pub fn geometries(&self) -> Vec<WfsGeometry> {
        self.sensors.iter().map(|s| s.geometry.clone()).collect()
    }

    pub fn prior(&self) -> &PriorDiagonal {
        &self.prior
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    /// Replaces every sensor's noise description (same sensor order).
    pub fn set_noise(&mut self, noise: &NoiseModel) -> Result<()> {
        noise.validate(&self.geometries())?;
        for (s, n) in self.sensors.iter_mut().zip(&noise.sensors) {
            s.noise = n.clone();
        }
        Ok(())
    }

    pub fn n_slopes(&self) -> usize {
        self.sensors.iter().map(|s| s.geometry.n_slopes()).sum()
    }

    /// Layer values `W^{-1} c`.
    pub fn synthesize(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.transform.idwt_layers(&self.layout, c)
    }

    /// Noise-free measurement `A c` of every sensor.
    pub fn forward(&self, c: &[f64]) -> Result<SlopeVector> {
        let phi = self.synthesize(c)?;
        self.forward_layers(&phi)
    }

    /// Noise-free measurement of layer values `phi` (no wavelet synthesis).
    pub fn forward_layers(&self, phi: &[f64]) -> Result<SlopeVector> {
        let parts = self
            .sensors
            .par_iter()
            .map(|s| s.slopes(phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(SlopeVector::from_parts(parts))
    }

    /// Unweighted adjoint `A^T y`.
    pub fn adjoint(&self, y: &SlopeVector) -> Result<Vec<f64>> {
        self.check_slopes(y)?;
        let parts = self
            .sensors
            .par_iter()
            .enumerate()
            .map(|(m, s)| {
                let mut out = vec![0.0; self.dim()];
                s.adjoint_into(y.sensor(m), &mut out)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        self.transform.dwt_layers(&self.layout, &sum_in_order(parts, self.dim()))
    }

    fn check_slopes(&self, s: &SlopeVector) -> Result<()> {
        Error::check_len("slope sensors", self.sensors.len(), s.n_sensors())?;
        for (m, sc) in self.sensors.iter().enumerate() {
            Error::check_len("sensor slopes", sc.geometry.n_slopes(), s.sensor(m).len())?;
        }
        Ok(())
    }

    /// `out = (sum_m A_m^T C_m^{-1} A_m + alpha D) c`.
    pub fn apply_normal(&self, c: &[f64], out: &mut [f64]) -> Result<()> {
        Error::check_len("normal operator input", self.dim(), c.len())?;
        Error::check_len("normal operator output", self.dim(), out.len())?;
        let data = self.data_term(c)?;
        for ((o, d), (x, w)) in out.iter_mut().zip(data).zip(c.iter().zip(&self.prior.weights)) {
            *o = d + self.alpha * w * x;
        }
        Ok(())
    }

    pub fn normal(&self, c: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.apply_normal(c, &mut out)?;
        Ok(out)
    }

    fn data_term(&self, c: &[f64]) -> Result<Vec<f64>> {
        if self.sensors.is_empty() {
            return Ok(vec![0.0; c.len()]);
        }
        let phi = self.synthesize(c)?;
        // Fixed sensor order in the reduction keeps results independent of
        // the thread count.
        let parts = self
            .sensors
            .par_iter()
            .map(|s| s.normal(&phi))
            .collect::<Result<Vec<_>>>()?;
        self.transform.dwt_layers(&self.layout, &sum_in_order(parts, self.dim()))
    }

    /// Right-hand side `A^T C^{-1} s`.
    pub fn build_rhs(&self, s: &SlopeVector) -> Result<Vec<f64>> {
        self.check_slopes(s)?;
        let parts = self
            .sensors
            .par_iter()
            .enumerate()
            .map(|(m, sc)| {
                let w = wfs::apply_inv_sensor(s.sensor(m), &sc.noise);
                let mut out = vec![0.0; self.dim()];
                sc.adjoint_into(&w, &mut out)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        self.transform.dwt_layers(&self.layout, &sum_in_order(parts, self.dim()))
    }

    /// MAP objective `1/2 |s - A c|^2_{C^{-1}} + alpha/2 (D c, c)`.
    pub fn objective(&self, c: &[f64], s: &SlopeVector) -> Result<f64> {
        self.check_slopes(s)?;
        let pred = self.forward(c)?;
        let mut misfit = 0.0;
        for (m, sc) in self.sensors.iter().enumerate() {
            let r: Vec<f64> = s.sensor(m).iter().zip(pred.sensor(m)).map(|(a, b)| a - b).collect();
            misfit += dot(&r, &wfs::apply_inv_sensor(&r, &sc.noise));
        }
        let prior = crate::wavelet::penalty(c, &self.prior, self.alpha)?;
        Ok(0.5 * (misfit + prior))
    }

    /// Diagonal of the LGS-only data term `sum_{m in LGS} A_m^T C~_m^{-1} A_m`
    /// (plain noise weighting, no tip–tilt projection), by probing with every
    /// unit coefficient vector.
    pub fn lgs_diagonal(&self) -> Result<Vec<f64>> {
        let lgs: Vec<&SensorChain> = self.sensors.iter().filter(|s| s.star.is_lgs()).collect();
        let mut diag = vec![0.0; self.dim()];
        if lgs.is_empty() {
            return Ok(diag);
        }
        for (l, g) in self.layout.layers().iter().enumerate() {
            let n = g.grid.size;
            let range = self.layout.range(l);
            let entries = (0..n * n)
                .into_par_iter()
                .map(|k| {
                    let mut e = vec![0.0; n * n];
                    e[k] = 1.0;
                    let basis = self.transform.idwt2(&e, n)?;
                    let mut q = 0.0;
                    for s in &lgs {
                        let mut wf = vec![0.0; s.projector.wavefront_len()];
                        s.projector.accumulate_layer(l, &basis, &mut wf);
                        let slopes = wfs::shack_hartmann(&wf, &s.geometry)?;
                        q += dot(&slopes, &s.noise.apply_inv_plain(&slopes));
                    }
                    Ok(q)
                })
                .collect::<Result<Vec<f64>>>()?;
            diag[range].copy_from_slice(&entries);
        }
        Ok(diag)
    }

    /// Modified Jacobi diagonal `diag(LGS data term) + alpha D`.
    pub fn build_jacobi_preconditioner(&self) -> Result<Vec<f64>> {
        let lgs = self.lgs_diagonal()?;
        self.jacobi_from_lgs(&lgs)
    }

    /// Jacobi diagonal from a cached [`Self::lgs_diagonal`], for the current alpha.
    pub fn jacobi_from_lgs(&self, lgs_diag: &[f64]) -> Result<Vec<f64>> {
        Error::check_len("LGS diagonal", self.dim(), lgs_diag.len())?;
        let j: Vec<f64> = lgs_diag
            .iter()
            .zip(&self.prior.weights)
            .map(|(q, w)| q + self.alpha * w)
            .collect();
        if let Some(k) = j.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Model(format!("preconditioner entry {k} is {}", j[k])));
        }
        Ok(j)
    }

    /// CG on the normal equations.
    pub fn cg(&self, rhs: &[f64], x0: &[f64], opts: SolveOptions) -> Result<(Vec<f64>, SolveReport)> {
        cg_solve(|x, y| self.apply_normal(x, y), rhs, x0, opts)
    }

    /// PCG on the normal equations with diagonal `jacobi`.
    pub fn pcg(&self, jacobi: &[f64], rhs: &[f64], x0: &[f64], opts: SolveOptions) -> Result<(Vec<f64>, SolveReport)> {
        pcg_solve(|x, y| self.apply_normal(x, y), jacobi, rhs, x0, opts)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::config("tomography.alpha", format!("alpha must be > 0, got {alpha}")))
    }
}

fn sum_in_order(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    acc
}
