//! Pseudo-open-loop control and the closed-loop simulator.
//!
//! Frame `k` runs with mirror commands `a_k`. The measurement `s_k` samples
//! the residual at the frame midpoint and becomes available two frames
//! later: `a_k = a_{k-1} + g (R (s_{k-2} + A^ a_{k-2}) - a_{k-2})`, with
//! `a_0 = a_1 = 0`.

use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::atmosphere::Atmosphere;
use crate::evaluation::{Evaluator, StepMetrics};
use crate::fitting::{layers_at_dm_shortcut, FittingProblem};
use crate::grid::LayerLayout;
use crate::propagation::{flatten_screens, GuideStar, Projector};
use crate::rng;
use crate::tomography::{SolveOptions, SolveReport, SolverState, TomographyOperator};
use crate::wfs::{self, NoiseModel, SlopeVector, TipTiltProjector, WfsGeometry};
use crate::{norm2, Error, Result};

/// Command history of the POLC integrator.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    /// `a_{t-1}`
    pub previous: Vec<f64>,
    /// `a_{t-2}`
    pub before_previous: Vec<f64>,
    pub gain: f64,
    pub t: usize,
}

impl ControlState {
    pub fn new(n_commands: usize, gain: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gain) {
            return Err(Error::config("control.gain", format!("gain must lie in [0, 1], got {gain}")));
        }
        Ok(ControlState {
            previous: vec![0.0; n_commands],
            before_previous: vec![0.0; n_commands],
            gain,
            t: 0,
        })
    }

    /// Records externally decided commands for the current step.
    pub fn push(&mut self, a: Vec<f64>) {
        self.before_previous = std::mem::replace(&mut self.previous, a);
        self.t += 1;
    }
}

/// `A^`: DM commands to slopes, through the same projection and sensor
/// chain as the tomography forward model. LGS rows carry `(I - T)`.
#[derive(Debug, Clone)]
pub struct DmToSlopeOperator {
    chains: Vec<(Projector, WfsGeometry, bool)>,
    n_commands: usize,
}

impl DmToSlopeOperator {
    pub fn new(dm_layout: &LayerLayout, stars: &[GuideStar], geoms: &[WfsGeometry], noise: &NoiseModel) -> Result<Self> {
        noise.validate(geoms)?;
        let chains = geoms
            .iter()
            .zip(&noise.sensors)
            .map(|(g, n)| {
                let star = &stars[g.direction_index];
                let p = Projector::new(dm_layout, g.corner_grid(), star.direction, star.cone_altitude())?;
                Ok((p, g.clone(), n.tiptilt_removed))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DmToSlopeOperator {
            chains,
            n_commands: dm_layout.total_len(),
        })
    }

    pub fn n_commands(&self) -> usize {
        self.n_commands
    }

    pub fn apply(&self, a: &[f64]) -> Result<SlopeVector> {
        Error::check_len("DM commands", self.n_commands, a.len())?;
        let parts = self
            .chains
            .iter()
            .map(|(p, g, tt)| {
                let mut s = wfs::shack_hartmann(&p.forward(a)?, g)?;
                if *tt {
                    TipTiltProjector::new(g.n_active()).remove_in_place(&mut s);
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SlopeVector::from_parts(parts))
    }
}

/// One POLC update. Returns `a_t` and shifts the history.
pub fn polc_step<R>(state: &mut ControlState, s: &SlopeVector, a_hat: &DmToSlopeOperator, mut reconstruct: R) -> Result<Vec<f64>>
where
    R: FnMut(&SlopeVector) -> Result<Vec<f64>>,
{
    Error::check_len("control history", a_hat.n_commands(), state.previous.len())?;
    let mut s_ol = a_hat.apply(&state.before_previous)?;
    s_ol.add_assign(s)?;
    let r = reconstruct(&s_ol)?;
    Error::check_len("reconstructed commands", state.previous.len(), r.len())?;
    let a: Vec<f64> = state
        .previous
        .iter()
        .zip(r.iter().zip(&state.before_previous))
        .map(|(a1, (ri, a2))| a1 + state.gain * (ri - a2))
        .collect();
    state.push(a.clone());
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Cg,
    Pcg,
}

/// How reconstructed layers become mirror commands.
#[derive(Debug, Clone)]
pub enum FittingStage {
    Fit { problem: FittingProblem, iters: usize },
    LayersAtDm { dm_layout: LayerLayout },
}

/// Tomography plus fitting, with warm restart between calls.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    op: TomographyOperator,
    solver: SolverKind,
    opts: SolveOptions,
    jacobi: Option<Vec<f64>>,
    fitting: FittingStage,
    state: SolverState,
    pub warm_restart: bool,
}

/// Output of one reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub commands: Vec<f64>,
    pub report: SolveReport,
}

impl Reconstructor {
    /// For PCG the Jacobi diagonal is probed here unless `lgs_diagonal`
    /// (see [`TomographyOperator::lgs_diagonal`]) is supplied.
    pub fn new(
        op: TomographyOperator,
        solver: SolverKind,
        opts: SolveOptions,
        fitting: FittingStage,
        lgs_diagonal: Option<&[f64]>,
    ) -> Result<Self> {
        if opts.max_iters == 0 {
            return Err(Error::config("tomography.iterations", "iteration budget must be >= 1"));
        }
        if let FittingStage::LayersAtDm { dm_layout } = &fitting {
            // validates altitudes and grids up front
            layers_at_dm_shortcut(op.layout(), dm_layout, &vec![0.0; op.dim()])?;
        }
        let jacobi = match solver {
            SolverKind::Cg => None,
            SolverKind::Pcg => Some(match lgs_diagonal {
                Some(d) => op.jacobi_from_lgs(d)?,
                None => op.build_jacobi_preconditioner()?,
            }),
        };
        let state = SolverState::new(op.dim());
        Ok(Reconstructor {
            op,
            solver,
            opts,
            jacobi,
            fitting,
            state,
            warm_restart: true,
        })
    }

    pub fn operator(&self) -> &TomographyOperator {
        &self.op
    }

    pub fn n_commands(&self) -> usize {
        match &self.fitting {
            FittingStage::Fit { problem, .. } => problem.n_commands(),
            FittingStage::LayersAtDm { dm_layout } => dm_layout.total_len(),
        }
    }

    pub fn solver_state(&self) -> &SolverState {
        &self.state
    }

    /// Wavelet coefficients of the reconstructed atmosphere.
    pub fn solve(&mut self, s: &SlopeVector) -> Result<(Vec<f64>, SolveReport)> {
        let rhs = self.op.build_rhs(s)?;
        let x0 = if self.warm_restart {
            self.state.warm_restart_seed()
        } else {
            vec![0.0; self.op.dim()]
        };
        let (c, report) = match (&self.solver, &self.jacobi) {
            (SolverKind::Pcg, Some(j)) => self.op.pcg(j, &rhs, &x0, self.opts)?,
            _ => self.op.cg(&rhs, &x0, self.opts)?,
        };
        self.state.record(&c, &report);
        Ok((c, report))
    }

    pub fn reconstruct(&mut self, s: &SlopeVector) -> Result<Reconstruction> {
        let (c, report) = self.solve(s)?;
        let phi = self.op.synthesize(&c)?;
        let commands = match &self.fitting {
            FittingStage::Fit { problem, iters } => problem.fit(&phi, *iters)?.0,
            FittingStage::LayersAtDm { dm_layout } => layers_at_dm_shortcut(self.op.layout(), dm_layout, &phi)?,
        };
        Ok(Reconstruction { commands, report })
    }
}

/// What the simulated sensors actually see.
#[derive(Debug, Clone)]
pub struct TruthSensors {
    sensors: Vec<TruthSensor>,
    /// Slope noise actually injected; `None` is noise-free.
    pub noise: Option<NoiseModel>,
    /// RMS of the random common slope offset added to every LGS sensor per
    /// frame (laser pointing jitter).
    pub lgs_jitter: f64,
}

#[derive(Debug, Clone)]
struct TruthSensor {
    atm: Projector,
    dm: Projector,
    geom: WfsGeometry,
    lgs: bool,
}

impl TruthSensors {
    pub fn new(
        atm_layout: &LayerLayout,
        dm_layout: &LayerLayout,
        stars: &[GuideStar],
        geoms: &[WfsGeometry],
        noise: Option<NoiseModel>,
        lgs_jitter: f64,
    ) -> Result<Self> {
        if let Some(n) = &noise {
            n.validate(geoms)?;
        }
        let sensors = geoms
            .iter()
            .map(|g| {
                let star = stars.get(g.direction_index).ok_or_else(|| {
                    Error::config("wfs.direction_index", format!("no guide star {}", g.direction_index))
                })?;
                Ok(TruthSensor {
                    atm: Projector::new(atm_layout, g.corner_grid(), star.direction, star.cone_altitude())?,
                    dm: Projector::new(dm_layout, g.corner_grid(), star.direction, star.cone_altitude())?,
                    geom: g.clone(),
                    lgs: star.is_lgs(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TruthSensors {
            sensors,
            noise,
            lgs_jitter,
        })
    }

    pub fn geometries(&self) -> Vec<WfsGeometry> {
        self.sensors.iter().map(|s| s.geom.clone()).collect()
    }

    /// Noise-free slopes of the residual `atmosphere - mirrors`.
    pub fn residual_slopes(&self, atm: &[f64], commands: &[f64]) -> Result<SlopeVector> {
        let parts = self
            .sensors
            .iter()
            .map(|s| {
                let mut wf = s.atm.forward(atm)?;
                let dm = s.dm.forward(commands)?;
                wf.iter_mut().zip(dm).for_each(|(w, d)| *w -= d);
                wfs::shack_hartmann(&wf, &s.geom)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SlopeVector::from_parts(parts))
    }

    /// Residual slopes plus noise and LGS jitter drawn for frame `step`.
    pub fn measure(&self, atm: &[f64], commands: &[f64], master_seed: u64, step: u64) -> Result<SlopeVector> {
        let mut s = self.residual_slopes(atm, commands)?;
        if let Some(n) = &self.noise {
            let noise = wfs::sample_noise(n, &self.geometries(), rng::derive_seed(master_seed, "frame-noise", 0, step))?;
            s.add_assign(&noise)?;
        }
        if self.lgs_jitter > 0.0 {
            for (m, ts) in self.sensors.iter().enumerate() {
                if !ts.lgs {
                    continue;
                }
                let mut r = rng::stream(master_seed, "lgs-jitter", m as u64, step);
                let jx: f64 = StandardNormal.sample(&mut r);
                let jy: f64 = StandardNormal.sample(&mut r);
                let n = ts.geom.n_active();
                let v = s.sensor_mut(m);
                v[..n].iter_mut().for_each(|x| *x += self.lgs_jitter * jx);
                v[n..].iter_mut().for_each(|y| *y += self.lgs_jitter * jy);
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub gain: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
}

/// Bounds on the loop: command norms must stay below `limit_factor` times
/// the first (open-loop) reconstruction norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityMonitor {
    pub open_loop_norm: f64,
    pub max_command_norm: f64,
    pub max_residual_rms: f64,
    pub limit_factor: f64,
}

impl StabilityMonitor {
    pub fn is_stable(&self) -> bool {
        self.max_residual_rms.is_finite()
            && self.max_command_norm.is_finite()
            && self.max_command_norm <= self.limit_factor * self.open_loop_norm.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct LoopResult {
    pub metrics: Vec<StepMetrics>,
    /// RMS of the measured slopes per frame.
    pub slope_rms: Vec<f64>,
    pub command_norms: Vec<f64>,
    pub final_commands: Vec<f64>,
    pub monitor: StabilityMonitor,
    /// Residual norms of the first reconstruction, one per iteration.
    pub first_solve_history: Vec<f64>,
}

/// Runs the closed loop for `settings.n_steps` frames. With zero gain the
/// mirrors never move and reconstruction is skipped.
pub fn simulate_loop(
    atmosphere: &Atmosphere,
    truth: &TruthSensors,
    a_hat: &DmToSlopeOperator,
    reconstructor: &mut Reconstructor,
    evaluator: &Evaluator,
    settings: &LoopSettings,
) -> Result<LoopResult> {
    if settings.n_steps == 0 {
        return Err(Error::config("run.steps", "need at least one step"));
    }
    if !(settings.dt > 0.0) {
        return Err(Error::config("run.dt", "time step must be > 0"));
    }
    let n_cmd = reconstructor.n_commands();
    Error::check_len("DM-to-slope operator", n_cmd, a_hat.n_commands())?;
    let mut state = ControlState::new(n_cmd, settings.gain)?;
    let mut pending: VecDeque<SlopeVector> = VecDeque::with_capacity(3);
    let mut metrics = Vec::with_capacity(settings.n_steps);
    let mut slope_rms = Vec::with_capacity(settings.n_steps);
    let mut command_norms = Vec::with_capacity(settings.n_steps);
    let mut monitor = StabilityMonitor {
        open_loop_norm: 0.0,
        max_command_norm: 0.0,
        max_residual_rms: 0.0,
        limit_factor: 100.0,
    };
    let mut first = true;
    let mut first_solve_history = Vec::new();
    let mut growing_solves = 0;

    for k in 0..settings.n_steps {
        let t = (k as f64 + 0.5) * settings.dt;
        let phi = flatten_screens(&atmosphere.at_time(t)?);
        let mut iters = 0;
        let mut resid = 0.0;
        let a = if k >= 2 && settings.gain > 0.0 {
            let s = pending.pop_front().expect("two frames of latency");
            polc_step(&mut state, &s, a_hat, |s_ol| {
                let r = reconstructor.reconstruct(s_ol)?;
                iters = r.report.iterations;
                if r.report.residual_increases > 0 {
                    growing_solves += 1;
                }
                resid = r.report.residual_norm;
                if first {
                    monitor.open_loop_norm = norm2(&r.commands);
                    first_solve_history = r.report.history.clone();
                    first = false;
                }
                Ok(r.commands)
            })?
        } else {
            if k >= 2 {
                pending.pop_front();
            }
            let a = state.previous.clone();
            state.push(a.clone());
            a
        };
        let s = truth.measure(&phi, &a, settings.seed, k as u64)?;
        slope_rms.push(s.rms());
        pending.push_back(s);

        let (rms, strehl) = evaluator.evaluate(&phi, &a)?;
        let worst = rms.iter().cloned().fold(0.0, f64::max);
        if !worst.is_finite() {
            return Err(Error::Numerical {
                solver: "closed loop",
                iteration: k,
                message: "non-finite residual".into(),
            });
        }
        monitor.max_residual_rms = monitor.max_residual_rms.max(worst);
        let cn = norm2(&a);
        monitor.max_command_norm = monitor.max_command_norm.max(cn);
        command_norms.push(cn);
        metrics.push(StepMetrics {
            t,
            rms,
            strehl,
            solver_iters: iters,
            residual_norm: resid,
        });
    }
    if growing_solves > 0 {
        log::warn!("solver residual grew by more than 10% within {growing_solves} of the solves");
    }
    if !monitor.is_stable() && settings.gain > 0.0 {
        log::warn!(
            "command norm {} exceeds {}x the open-loop reconstruction norm {}",
            monitor.max_command_norm,
            monitor.limit_factor,
            monitor.open_loop_norm
        );
    }
    Ok(LoopResult {
        metrics,
        slope_rms,
        command_norms,
        final_commands: state.previous,
        monitor,
        first_solve_history,
    })
}
