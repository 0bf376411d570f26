//! Residual RMS, Maréchal Strehl and long-exposure summaries.
//!
//! Phase is carried in radians at a reference wavelength; [`EvaluationGrid`]
//! rescales residual RMS to the imaging wavelength before applying the
//! Maréchal approximation, so `strehl = exp(-rms^2)` with `rms` in radians
//! at the imaging wavelength.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::grid::{ApertureGrid, LayerLayout};
use crate::propagation::Projector;
use crate::{Error, Result, ARCSEC};

/// Science directions and wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    pub directions: Vec<[f64; 2]>,
    pub wavelength_m: f64,
    /// Wavelength at which phase values are expressed.
    pub reference_wavelength_m: f64,
}

impl EvaluationGrid {
    /// `n x n` directions evenly covering a square field of side `side_rad`
    /// centred on zenith, row-major from the most negative corner.
    pub fn square(n: usize, side_rad: f64, wavelength_m: f64, reference_wavelength_m: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("evaluation.grid_points", "need at least one direction"));
        }
        if !(wavelength_m > 0.0 && reference_wavelength_m > 0.0) {
            return Err(Error::config("evaluation.wavelength_m", "wavelengths must be > 0"));
        }
        if !(side_rad >= 0.0 && side_rad.is_finite()) {
            return Err(Error::config("evaluation.field_side_arcsec", "field side must be >= 0"));
        }
        let step = if n > 1 { side_rad / (n - 1) as f64 } else { 0.0 };
        let c = (n as f64 - 1.0) / 2.0;
        let mut directions = Vec::with_capacity(n * n);
        for iy in 0..n {
            for ix in 0..n {
                directions.push([(ix as f64 - c) * step, (iy as f64 - c) * step]);
            }
        }
        Ok(EvaluationGrid {
            directions,
            wavelength_m,
            reference_wavelength_m,
        })
    }

    /// Factor converting reference-wavelength phase to imaging-wavelength phase.
    pub fn phase_scale(&self) -> f64 {
        self.reference_wavelength_m / self.wavelength_m
    }

    /// Direction closest to zenith.
    pub fn on_axis_index(&self) -> usize {
        on_axis(&self.directions)
    }
}

fn on_axis(dirs: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (i, d) in dirs.iter().enumerate() {
        if d[0].hypot(d[1]) < dirs[best][0].hypot(dirs[best][1]) {
            best = i;
        }
    }
    best
}

/// RMS of `x` over its entries after removing the mean.
pub fn piston_free_rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Piston-removed RMS over the masked pupil of the atmosphere seen along
/// `theta` minus the DM correction, in the phase units of the inputs.
pub fn residual_rms(
    atm_layout: &LayerLayout,
    atm: &[f64],
    dm_layout: &LayerLayout,
    commands: &[f64],
    theta: [f64; 2],
    pupil: &ApertureGrid,
) -> Result<f64> {
    let a = Projector::new(atm_layout, pupil, theta, None)?.forward(atm)?;
    let h = Projector::new(dm_layout, pupil, theta, None)?.forward(commands)?;
    Ok(masked_residual(pupil, &a, &h))
}

fn masked_residual(pupil: &ApertureGrid, a: &[f64], h: &[f64]) -> f64 {
    let d: Vec<f64> = pupil.mask.iter().zip(a.iter().zip(h)).filter(|(m, _)| **m).map(|(_, (x, y))| x - y).collect();
    piston_free_rms(&d)
}

/// Maréchal Strehl `exp(-rms^2)` for a phase RMS in radians.
pub fn strehl_marechal(rms: f64) -> Result<f64> {
    if !(rms >= 0.0) {
        return Err(Error::Domain(format!("rms must be >= 0, got {rms}")));
    }
    Ok((-rms * rms).exp())
}

/// Cached projections for evaluating many time steps.
#[derive(Debug, Clone)]
pub struct Evaluator {
    grid: EvaluationGrid,
    pupil: ApertureGrid,
    atm: Vec<Projector>,
    dm: Vec<Projector>,
}

impl Evaluator {
    pub fn new(grid: EvaluationGrid, pupil: ApertureGrid, atm_layout: &LayerLayout, dm_layout: &LayerLayout) -> Result<Self> {
        let atm = grid
            .directions
            .iter()
            .map(|&t| Projector::new(atm_layout, &pupil, t, None))
            .collect::<Result<Vec<_>>>()?;
        let dm = grid
            .directions
            .iter()
            .map(|&t| Projector::new(dm_layout, &pupil, t, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluator { grid, pupil, atm, dm })
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    /// Per-direction residual RMS (radians at the imaging wavelength) and
    /// Maréchal Strehl.
    pub fn evaluate(&self, atm: &[f64], commands: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let scale = self.grid.phase_scale();
        let rms = (0..self.atm.len())
            .into_par_iter()
            .map(|j| {
                let a = self.atm[j].forward(atm)?;
                let h = self.dm[j].forward(commands)?;
                Ok(scale * masked_residual(&self.pupil, &a, &h))
            })
            .collect::<Result<Vec<f64>>>()?;
        let strehl = rms.iter().map(|&r| strehl_marechal(r)).collect::<Result<Vec<_>>>()?;
        Ok((rms, strehl))
    }
}

/// One row of the per-step metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub t: f64,
    pub rms: Vec<f64>,
    pub strehl: Vec<f64>,
    pub solver_iters: usize,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialBin {
    pub separation_arcsec: f64,
    pub count: usize,
    pub le_strehl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongExposureSummary {
    pub steps_used: usize,
    pub burn_in: usize,
    pub per_direction: Vec<f64>,
    pub field_average: f64,
    pub on_axis: f64,
    pub radial: Vec<RadialBin>,
}

/// Number of leading steps discarded for a `fraction` burn-in (at least one
/// step is always kept).
pub fn burn_in_steps(n_steps: usize, fraction: f64) -> usize {
    let b = (n_steps as f64 * fraction.clamp(0.0, 1.0)).floor() as usize;
    b.min(n_steps.saturating_sub(1))
}

/// Long-exposure Strehl per direction (mean over the kept steps), its field
/// average, on-axis value and radial averages by separation from zenith.
pub fn long_exposure_summary(
    strehl_series: &[Vec<f64>],
    directions: &[[f64; 2]],
    burn_in_fraction: f64,
) -> Result<LongExposureSummary> {
    if strehl_series.is_empty() {
        return Err(Error::Domain("no recorded steps".into()));
    }
    let nd = directions.len();
    for row in strehl_series {
        Error::check_len("strehl row", nd, row.len())?;
    }
    let burn_in = burn_in_steps(strehl_series.len(), burn_in_fraction);
    let kept = &strehl_series[burn_in..];
    let per_direction: Vec<f64> = (0..nd)
        .map(|j| kept.iter().map(|r| r[j]).sum::<f64>() / kept.len() as f64)
        .collect();
    let field_average = per_direction.iter().sum::<f64>() / nd as f64;
    let on_axis = per_direction[on_axis(directions)];

    let mut order: Vec<(f64, f64)> = directions
        .iter()
        .zip(&per_direction)
        .map(|(d, &s)| (d[0].hypot(d[1]), s))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut radial: Vec<RadialBin> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for (r, s) in order {
        let r_as = r / ARCSEC;
        match radial.last_mut() {
            Some(bin) if (bin.separation_arcsec - r_as).abs() <= 1e-6 * (1.0 + r_as) => {
                bin.count += 1;
                *sums.last_mut().unwrap() += s;
            }
            _ => {
                radial.push(RadialBin {
                    separation_arcsec: r_as,
                    count: 1,
                    le_strehl: 0.0,
                });
                sums.push(s);
            }
        }
    }
    for (bin, s) in radial.iter_mut().zip(sums) {
        bin.le_strehl = s / bin.count as f64;
    }
    Ok(LongExposureSummary {
        steps_used: kept.len(),
        burn_in,
        per_direction,
        field_average,
        on_axis,
        radial,
    })
}

/// `t,rms_rad_0..,strehl_0..,solver_iters,residual_norm`.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[StepMetrics], n_dirs: usize) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..n_dirs).map(|j| format!("rms_rad_{j}")));
    header.extend((0..n_dirs).map(|j| format!("strehl_{j}")));
    header.push("solver_iters".into());
    header.push("residual_norm".into());
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut f = vec![format!("{}", r.t)];
        f.extend(r.rms.iter().map(|v| format!("{v}")));
        f.extend(r.strehl.iter().map(|v| format!("{v}")));
        f.push(r.solver_iters.to_string());
        f.push(format!("{}", r.residual_norm));
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

/// `dir_x_arcsec,dir_y_arcsec,le_strehl`.
pub fn write_summary_csv<W: Write>(mut w: W, directions: &[[f64; 2]], le: &[f64]) -> Result<()> {
    Error::check_len("summary", directions.len(), le.len())?;
    writeln!(w, "dir_x_arcsec,dir_y_arcsec,le_strehl")?;
    for (d, s) in directions.iter().zip(le) {
        writeln!(w, "{},{},{}", d[0] / ARCSEC, d[1] / ARCSEC, s)?;
    }
    Ok(())
}
