//! Experiment plumbing: configuration, assembly of a simulation from a
//! config, runs, parameter sweeps, output files and the dense oracle.

pub mod config;
pub mod oracle;

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

pub use config::RunConfig;
pub use oracle::{oracle_solve, DenseOracle};

use crate::atmosphere::{normalize_layers, Atmosphere, LayerSpec, VonKarmanSpectrum};
use crate::control::{
    simulate_loop, DmToSlopeOperator, FittingStage, LoopResult, LoopSettings, Reconstructor, SolverKind,
    StabilityMonitor, TruthSensors,
};
use crate::evaluation::{
    long_exposure_summary, write_metrics_csv, write_summary_csv, EvaluationGrid, Evaluator, LongExposureSummary,
};
use crate::fitting::FittingProblem;
use crate::grid::{ApertureGrid, LayerGeometry, LayerGrid, LayerLayout};
use crate::propagation::{layout_from_specs, GuideStar};
use crate::tomography::{write_trace_csv, SolveOptions, TomographyOperator};
use crate::wavelet::WaveletTransform;
use crate::wfs::{radial_elongation, slope_variance, Elongation, NoiseModel, SensorNoise, WfsGeometry};
use crate::{Error, Result, ARCSEC};
use config::{FittingModeConfig, SolverConfig, StarKindConfig};

/// Kolmogorov phase PSD prefactor: `0.023 r0^(-5/3)` (frequencies in cycles/m).
const KOLMOGOROV: f64 = 0.023;

/// Everything needed to run one closed loop.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RunConfig,
    pub atmosphere: Atmosphere,
    pub stars: Vec<GuideStar>,
    pub geometries: Vec<WfsGeometry>,
    pub truth: TruthSensors,
    pub a_hat: DmToSlopeOperator,
    pub reconstructor: Reconstructor,
    pub evaluator: Evaluator,
}

/// Turbulence strength (PSD prefactor) of the whole atmosphere in
/// rad² at the reference wavelength.
pub fn total_strength(cfg: &RunConfig) -> f64 {
    let a = &cfg.atmosphere;
    let scale = a.r0_wavelength_m / cfg.tomography.reference_wavelength_m;
    KOLMOGOROV * a.r0_m.powf(-5.0 / 3.0) * scale * scale
}

pub fn guide_stars(cfg: &RunConfig) -> Vec<GuideStar> {
    cfg.guide_stars
        .iter()
        .map(|g| {
            let dir = [g.direction_arcsec[0] * ARCSEC, g.direction_arcsec[1] * ARCSEC];
            match g.kind {
                StarKindConfig::Ngs => GuideStar::ngs(dir, g.flux_photons),
                StarKindConfig::Lgs => GuideStar::lgs(dir, g.altitude_m.unwrap_or(f64::INFINITY), g.flux_photons),
            }
        })
        .collect()
}

pub fn sensor_geometries(cfg: &RunConfig) -> Result<Vec<WfsGeometry>> {
    let t = &cfg.telescope;
    cfg.guide_stars
        .iter()
        .enumerate()
        .map(|(i, g)| {
            WfsGeometry::new(g.subapertures, t.diameter_m, t.obstruction, t.subaperture_threshold, i)
                .map_err(|e| crate::atmosphere::prefix_field(e, &format!("guide_stars[{i}]")))
        })
        .collect()
}

/// Noise model with elongation weight `tau` on LGS sensors.
pub fn noise_model(cfg: &RunConfig, geoms: &[WfsGeometry], tau: f64) -> Result<NoiseModel> {
    let n = &cfg.noise;
    let sensors = cfg
        .guide_stars
        .iter()
        .zip(geoms)
        .map(|(g, geom)| {
            let sigma2 = slope_variance(g.flux_photons, n.readout_e, n.kappa_photon, n.kappa_readout)?;
            Ok(match g.kind {
                StarKindConfig::Ngs => SensorNoise::isotropic(sigma2),
                StarKindConfig::Lgs => SensorNoise {
                    sigma2,
                    elongation: Some(Elongation {
                        betas: radial_elongation(geom, n.elongation_max, n.launch_m, cfg.telescope.diameter_m / 2.0),
                        fwhm: n.spot_fwhm,
                        tau,
                    }),
                    tiptilt_removed: true,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseModel { sensors })
}

pub fn atmosphere_specs(cfg: &RunConfig) -> Result<Vec<LayerSpec>> {
    let a = &cfg.atmosphere;
    let mut specs: Vec<LayerSpec> = a
        .layers
        .iter()
        .map(|l| LayerSpec {
            altitude_m: l.altitude_m,
            strength: l.fraction,
            wind: l.wind,
            grid_spacing_m: a.screen_spacing_m,
            grid_size: a.screen_size,
        })
        .collect();
    normalize_layers(&mut specs, total_strength(cfg))
        .map_err(|e| crate::atmosphere::prefix_field(e, "atmosphere"))?;
    Ok(specs)
}

pub fn reconstruction_layout(cfg: &RunConfig) -> Result<LayerLayout> {
    let t = &cfg.tomography;
    let grid = LayerGrid::new(t.grid_size, t.grid_spacing_m)?;
    Ok(LayerLayout::new(
        t.layers
            .iter()
            .map(|l| LayerGeometry {
                altitude_m: l.altitude_m,
                grid: grid.clone(),
            })
            .collect(),
    ))
}

pub fn dm_layout(cfg: &RunConfig) -> Result<LayerLayout> {
    let grid = LayerGrid::new(cfg.dms.grid_size, cfg.dms.spacing_m)?;
    Ok(LayerLayout::new(
        cfg.dms
            .altitudes_m
            .iter()
            .map(|&h| LayerGeometry {
                altitude_m: h,
                grid: grid.clone(),
            })
            .collect(),
    ))
}

pub fn evaluation_grid(cfg: &RunConfig) -> Result<EvaluationGrid> {
    let e = &cfg.evaluation;
    EvaluationGrid::square(
        e.grid_points,
        e.field_side_arcsec * ARCSEC,
        e.wavelength_m,
        cfg.tomography.reference_wavelength_m,
    )
}

pub fn science_pupil(cfg: &RunConfig) -> Result<ApertureGrid> {
    let n = cfg.evaluation.pupil_samples;
    let d = cfg.telescope.diameter_m;
    ApertureGrid::annular(n, d / (n - 1) as f64, d, cfg.telescope.obstruction)
}

/// Tomography operator described by `cfg`.
pub fn tomography_operator(cfg: &RunConfig) -> Result<TomographyOperator> {
    let geoms = sensor_geometries(cfg)?;
    let stars = guide_stars(cfg);
    let model = noise_model(cfg, &geoms, cfg.noise.tau)?;
    let t = &cfg.tomography;
    let total: f64 = t.layers.iter().map(|l| l.weight).sum();
    let c_rho: Vec<f64> = t.layers.iter().map(|l| l.weight / total).collect();
    TomographyOperator::new(
        reconstruction_layout(cfg)?,
        WaveletTransform::new(t.wavelet_order, t.coarsest_band)?,
        &stars,
        &geoms,
        &model,
        &c_rho,
        cfg.atmosphere.outer_scale_m,
        t.alpha,
    )
}

impl Simulation {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        Self::build_with(cfg, None)
    }

    /// `lgs_diagonal` skips probing the Jacobi diagonal when a PCG
    /// reconstructor with identical geometry and noise was built before.
    pub fn build_with(cfg: &RunConfig, lgs_diagonal: Option<&[f64]>) -> Result<Self> {
        cfg.validate()?;
        let stars = guide_stars(cfg);
        let geometries = sensor_geometries(cfg)?;
        let model = noise_model(cfg, &geometries, cfg.noise.tau)?;
        let truth_noise = noise_model(cfg, &geometries, cfg.noise.true_tau)?;

        let specs = atmosphere_specs(cfg)?;
        let atm_layout = layout_from_specs(&specs)?;
        let atmosphere = Atmosphere::generate(
            specs,
            VonKarmanSpectrum::new(cfg.atmosphere.outer_scale_m)?,
            cfg.run.seed,
        )?;
        let dms = dm_layout(cfg)?;
        let pupil = science_pupil(cfg)?;
        let grid = evaluation_grid(cfg)?;

        let op = tomography_operator(cfg)?;
        let fitting = match cfg.fitting.mode {
            FittingModeConfig::Fit => FittingStage::Fit {
                problem: FittingProblem::new(
                    dms.clone(),
                    op.layout().clone(),
                    &pupil,
                    grid.directions.clone(),
                    cfg.fitting.weights.clone(),
                )?,
                iters: cfg.fitting.iterations,
            },
            FittingModeConfig::LayersAtDm => FittingStage::LayersAtDm { dm_layout: dms.clone() },
        };
        let solver = match cfg.tomography.solver {
            SolverConfig::Cg => SolverKind::Cg,
            SolverConfig::Pcg => SolverKind::Pcg,
        };
        let opts = SolveOptions {
            max_iters: cfg.tomography.iterations,
            tol: cfg.tomography.tol,
        };
        let mut reconstructor = Reconstructor::new(op, solver, opts, fitting, lgs_diagonal)?;
        reconstructor.warm_restart = cfg.tomography.warm_restart;

        let truth = TruthSensors::new(
            &atm_layout,
            &dms,
            &stars,
            &geometries,
            cfg.noise.enabled.then_some(truth_noise),
            cfg.noise.lgs_jitter,
        )?;
        let a_hat = DmToSlopeOperator::new(&dms, &stars, &geometries, &model)?;
        let evaluator = Evaluator::new(grid, pupil, &atm_layout, &dms)?;
        Ok(Simulation {
            config: cfg.clone(),
            atmosphere,
            stars,
            geometries,
            truth,
            a_hat,
            reconstructor,
            evaluator,
        })
    }

    pub fn run(&mut self) -> Result<RunOutcome> {
        let cfg = &self.config;
        let settings = LoopSettings {
            gain: cfg.control.gain,
            dt: cfg.run.dt,
            n_steps: cfg.run.steps,
            seed: cfg.run.seed,
        };
        let started = std::time::Instant::now();
        let result = simulate_loop(
            &self.atmosphere,
            &self.truth,
            &self.a_hat,
            &mut self.reconstructor,
            &self.evaluator,
            &settings,
        )?;
        log::info!("{} steps in {:.2} s", settings.n_steps, started.elapsed().as_secs_f64());
        let series: Vec<Vec<f64>> = result.metrics.iter().map(|m| m.strehl.clone()).collect();
        let dirs = &self.evaluator.grid().directions;
        let summary = long_exposure_summary(&series, dirs, cfg.run.burn_in_fraction)?;
        let report = RunReport {
            crate_version: env!("CARGO_PKG_VERSION"),
            master_seed: cfg.run.seed,
            steps: cfg.run.steps,
            directions_arcsec: dirs.iter().map(|d| [d[0] / ARCSEC, d[1] / ARCSEC]).collect(),
            summary,
            stability: result.monitor.clone(),
            stable: result.monitor.is_stable(),
            config: cfg.clone(),
        };
        Ok(RunOutcome { report, result })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub crate_version: &'static str,
    pub master_seed: u64,
    pub steps: usize,
    pub directions_arcsec: Vec<[f64; 2]>,
    pub summary: LongExposureSummary,
    pub stability: StabilityMonitor,
    pub stable: bool,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub result: LoopResult,
}

impl RunOutcome {
    pub fn field_average(&self) -> f64 {
        self.report.summary.field_average
    }

    /// Writes `metrics.csv`, `summary.csv`, `report.json` and, when
    /// requested, `solver_trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n_dirs = self.report.directions_arcsec.len();
        write_metrics_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?), &self.result.metrics, n_dirs)?;
        let dirs: Vec<[f64; 2]> = self
            .report
            .directions_arcsec
            .iter()
            .map(|d| [d[0] * ARCSEC, d[1] * ARCSEC])
            .collect();
        write_summary_csv(
            BufWriter::new(fs::File::create(dir.join("summary.csv"))?),
            &dirs,
            &self.report.summary.per_direction,
        )?;
        let json = serde_json::to_string_pretty(&self.report).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("report.json"), json + "\n")?;
        if self.report.config.run.solver_trace {
            write_trace_csv(
                BufWriter::new(fs::File::create(dir.join("solver_trace.csv"))?),
                &self.result.first_solve_history,
                None,
            )?;
        }
        Ok(())
    }
}

/// Builds and runs one configuration.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    Simulation::build(cfg)?.run()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    PcgIters,
    LgsFlux,
    Gain,
}

impl FromStr for SweepParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParameter::Alpha),
            "pcg_iters" | "pcg-iters" => Ok(SweepParameter::PcgIters),
            "lgs_flux" | "lgs-flux" => Ok(SweepParameter::LgsFlux),
            "gain" => Ok(SweepParameter::Gain),
            other => Err(Error::config(
                "sweep.parameter",
                format!("unknown parameter `{other}` (alpha, pcg_iters, lgs_flux, gain)"),
            )),
        }
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::PcgIters => "pcg_iters",
            SweepParameter::LgsFlux => "lgs_flux",
            SweepParameter::Gain => "gain",
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            SweepParameter::Alpha => c.tomography.alpha = value,
            SweepParameter::PcgIters => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::config("sweep.values", format!("iteration count {value} is not a positive integer")));
                }
                c.tomography.solver = SolverConfig::Pcg;
                c.tomography.iterations = value as usize;
            }
            SweepParameter::LgsFlux => {
                for g in c.guide_stars.iter_mut().filter(|g| g.kind == StarKindConfig::Lgs) {
                    g.flux_photons = value;
                }
            }
            SweepParameter::Gain => c.control.gain = value,
        }
        c.validate()?;
        Ok(c)
    }

    /// Whether the Jacobi diagonal stays valid across values.
    fn keeps_lgs_diagonal(self) -> bool {
        !matches!(self, SweepParameter::LgsFlux)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub on_axis: f64,
    pub field_average: f64,
    pub summary: LongExposureSummary,
}

/// Independent runs of `cfg` per value (shared seeds). With `out_dir`, each
/// run writes into `<out_dir>/<parameter>_<value>/` and the combined table
/// goes to `<out_dir>/sweep_<parameter>.csv`.
pub fn sweep(cfg: &RunConfig, parameter: SweepParameter, values: &[f64], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep.values", "value list is empty"));
    }
    let configs = values
        .iter()
        .map(|&v| parameter.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let mut lgs_diag: Option<Vec<f64>> = None;
    let mut rows = Vec::with_capacity(values.len());
    for (c, &v) in configs.iter().zip(values) {
        let pcg = c.tomography.solver == SolverConfig::Pcg;
        if pcg && parameter.keeps_lgs_diagonal() && lgs_diag.is_none() {
            lgs_diag = Some(tomography_operator(c)?.lgs_diagonal()?);
        }
        let cached = if pcg && parameter.keeps_lgs_diagonal() {
            lgs_diag.as_deref()
        } else {
            None
        };
        let outcome = Simulation::build_with(c, cached)?.run()?;
        log::info!("{} = {v}: field-average LE Strehl {:.4}", parameter.name(), outcome.field_average());
        if let Some(dir) = out_dir {
            outcome.write(&dir.join(format!("{}_{v}", parameter.name())))?;
        }
        rows.push(SweepRow {
            parameter,
            value: v,
            on_axis: outcome.report.summary.on_axis,
            field_average: outcome.report.summary.field_average,
            summary: outcome.report.summary,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_sweep_csv(fs::File::create(dir.join(format!("sweep_{}.csv", parameter.name())))?, &rows)?;
    }
    Ok(rows)
}

/// `parameter,value,on_axis,field_average,radial_<sep>...` (separations in arcsec).
pub fn write_sweep_csv<W: std::io::Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    let seps: Vec<f64> = rows
        .first()
        .map(|r| r.summary.radial.iter().map(|b| b.separation_arcsec).collect())
        .unwrap_or_default();
    let mut header = vec!["parameter".to_string(), "value".into(), "on_axis".into(), "field_average".into()];
    header.extend(seps.iter().map(|s| format!("radial_{s:.1}")));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut f = vec![r.parameter.name().to_string(), format!("{}", r.value), format!("{}", r.on_axis), format!("{}", r.field_average)];
        f.extend(r.summary.radial.iter().map(|b| format!("{}", b.le_strehl)));
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

/// Writes the initial (or time-`t`) phase screens of `cfg` as
/// `screen_<i>.pscn` into `dir`; returns the paths.
pub fn dump_screens(cfg: &RunConfig, t: f64, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    cfg.validate()?;
    let atm = Atmosphere::generate(
        atmosphere_specs(cfg)?,
        VonKarmanSpectrum::new(cfg.atmosphere.outer_scale_m)?,
        cfg.run.seed,
    )?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, s) in atm.at_time(t)?.iter().enumerate() {
        let p = dir.join(format!("screen_{i}.pscn"));
        crate::atmosphere::write_screen(BufWriter::new(fs::File::create(&p)?), s)?;
        paths.push(p);
    }
    Ok(paths)
}
