//! Conjugate gradients with optional diagonal preconditioning.
//!
//! Both variants share one loop; with a unit diagonal the preconditioned
//! path performs exactly the same floating-point operations as plain CG.

use std::io::Write;

use crate::{dot, norm2, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Relative residual `|r| / |b|` at which to stop; `0` runs the full
    /// iteration budget.
    pub tol: f64,
}

impl SolveOptions {
    pub fn budget(max_iters: usize) -> Self {
        SolveOptions { max_iters, tol: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual_norm: f64,
    pub rhs_norm: f64,
    /// Residual norm before the first and after every iteration.
    pub history: Vec<f64>,
    /// Iterations in which the residual norm grew by more than 10%.
    pub residual_increases: usize,
}

impl SolveReport {
    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm > 0.0 {
            self.residual_norm / self.rhs_norm
        } else {
            self.residual_norm
        }
    }
}

/// Plain conjugate gradients for `A x = b`.
pub fn cg_solve<F>(apply: F, rhs: &[f64], x0: &[f64], opts: SolveOptions) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    krylov("cg", apply, None, rhs, x0, opts, &mut |_, _, _| {})
}

/// Conjugate gradients preconditioned by `diag(jacobi)`.
pub fn pcg_solve<F>(
    apply: F,
    jacobi: &[f64],
    rhs: &[f64],
    x0: &[f64],
    opts: SolveOptions,
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    krylov("pcg", apply, Some(jacobi), rhs, x0, opts, &mut |_, _, _| {})
}

/// Like [`cg_solve`]/[`pcg_solve`], calling `observer(iter, x, |r|)` after the
/// initial residual and after every iteration.
pub fn solve_observed<F>(
    apply: F,
    jacobi: Option<&[f64]>,
    rhs: &[f64],
    x0: &[f64],
    opts: SolveOptions,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let name = if jacobi.is_some() { "pcg" } else { "cg" };
    krylov(name, apply, jacobi, rhs, x0, opts, observer)
}

fn krylov<F>(
    solver: &'static str,
    mut apply: F,
    jacobi: Option<&[f64]>,
    rhs: &[f64],
    x0: &[f64],
    opts: SolveOptions,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = rhs.len();
    Error::check_len("initial guess", n, x0.len())?;
    if let Some(j) = jacobi {
        Error::check_len("preconditioner", n, j.len())?;
        if let Some(k) = j.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Model(format!("preconditioner entry {k} is not positive")));
        }
    }
    if opts.max_iters == 0 {
        return Err(Error::Domain("iteration budget must be >= 1".into()));
    }
    let breakdown = |iteration: usize, message: &str| Error::Numerical {
        solver,
        iteration,
        message: message.to_string(),
    };

    let mut x = x0.to_vec();
    let mut ap = vec![0.0; n];
    let mut r = rhs.to_vec();
    if x.iter().any(|&v| v != 0.0) {
        apply(&x, &mut ap)?;
        r.iter_mut().zip(&ap).for_each(|(ri, a)| *ri -= a);
    }
    let precondition = |r: &[f64], z: &mut [f64]| match jacobi {
        Some(j) => z.iter_mut().zip(r).zip(j).for_each(|((zi, ri), ji)| *zi = ri / ji),
        None => z.copy_from_slice(r),
    };
    let rhs_norm = norm2(rhs);
    let mut rnorm = norm2(&r);
    if !rnorm.is_finite() {
        return Err(breakdown(0, "non-finite initial residual"));
    }
    let mut history = vec![rnorm];
    observer(0, &x, rnorm);
    // Past round-off level further steps only amplify noise in p^T A p, so
    // a zero tolerance still stops there.
    let floor = 4.0 * f64::EPSILON * rhs_norm;
    let converged = |rn: f64| rn <= floor || (opts.tol > 0.0 && rn <= opts.tol * rhs_norm);
    if converged(rnorm) {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                residual_norm: rnorm,
                rhs_norm,
                history,
                residual_increases: 0,
            },
        ));
    }

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut iterations = 0;
    let mut increases = 0;
    for it in 1..=opts.max_iters {
        apply(&p, &mut ap)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(breakdown(it, "non-finite curvature"));
        }
        if pap <= 0.0 {
            return Err(breakdown(it, "operator is not positive definite"));
        }
        let step = rho / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += step * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, a)| *ri -= step * a);
        let prev = rnorm;
        rnorm = norm2(&r);
        if !rnorm.is_finite() {
            return Err(breakdown(it, "non-finite residual"));
        }
        if rnorm > 1.1 * prev {
            increases += 1;
        }
        iterations = it;
        history.push(rnorm);
        observer(it, &x, rnorm);
        if converged(rnorm) {
            break;
        }
        precondition(&r, &mut z);
        let rho_new = dot(&r, &z);
        let beta = rho_new / rho;
        rho = rho_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    if increases > 0 {
        log::debug!("{solver}: residual norm grew by more than 10% in {increases} iteration(s)");
    }
    Ok((
        x,
        SolveReport {
            iterations,
            residual_norm: rnorm,
            rhs_norm,
            history,
            residual_increases: increases,
        },
    ))
}

/// Carries the previous time step's solution for warm restarts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverState {
    dim: usize,
    previous: Option<Vec<f64>>,
    pub last_iterations: usize,
    pub last_residual: f64,
}

impl SolverState {
    pub fn new(dim: usize) -> Self {
        SolverState {
            dim,
            ..Default::default()
        }
    }

    /// Initial guess for the next solve: the previous solution, or zero on
    /// the first step.
    pub fn warm_restart_seed(&self) -> Vec<f64> {
        match &self.previous {
            Some(p) => p.clone(),
            None => vec![0.0; self.dim],
        }
    }

    pub fn record(&mut self, solution: &[f64], report: &SolveReport) {
        self.previous = Some(solution.to_vec());
        self.last_iterations = report.iterations;
        self.last_residual = report.residual_norm;
    }

    pub fn previous(&self) -> Option<&[f64]> {
        self.previous.as_deref()
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }
}

/// Solver trace: `iter,residual_norm,energy_norm_error` (last column empty
/// without an oracle).
pub fn write_trace_csv<W: Write>(mut w: W, residuals: &[f64], energy_errors: Option<&[f64]>) -> Result<()> {
    writeln!(w, "iter,residual_norm,energy_norm_error")?;
    for (i, r) in residuals.iter().enumerate() {
        match energy_errors.and_then(|e| e.get(i)) {
            Some(e) => writeln!(w, "{i},{r},{e}")?,
            None => writeln!(w, "{i},{r},")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Vec<Vec<f64>> {
        // tridiagonal with varying diagonal
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            2.0 + i as f64
                        } else if i.abs_diff(j) == 1 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn mv(a: &[Vec<f64>]) -> impl FnMut(&[f64], &mut [f64]) -> Result<()> + '_ {
        move |x, y| {
            for (yi, row) in y.iter_mut().zip(a) {
                *yi = dot(row, x);
            }
            Ok(())
        }
    }

    #[test]
    fn zero_rhs_zero_guess() {
        let a = spd(5);
        let (x, rep) = cg_solve(mv(&a), &[0.0; 5], &[0.0; 5], SolveOptions::budget(10)).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn converges_in_n_steps() {
        let a = spd(12);
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let (x, rep) = cg_solve(mv(&a), &b, &[0.0; 12], SolveOptions { max_iters: 100, tol: 1e-13 }).unwrap();
        assert!(rep.iterations <= 14);
        let mut ax = vec![0.0; 12];
        mv(&a)(&x, &mut ax).unwrap();
        for (p, q) in ax.iter().zip(&b) {
            assert!((p - q).abs() < 1e-11);
        }
    }

    #[test]
    fn unit_preconditioner_matches_cg_bitwise() {
        let a = spd(20);
        let b: Vec<f64> = (0..20).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let ones = vec![1.0; 20];
        let o = SolveOptions::budget(7);
        let (x1, r1) = cg_solve(mv(&a), &b, &[0.0; 20], o).unwrap();
        let (x2, r2) = pcg_solve(mv(&a), &ones, &b, &[0.0; 20], o).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(r1.history, r2.history);
    }

    #[test]
    fn indefinite_operator_reports_iteration() {
        let neg = |x: &[f64], y: &mut [f64]| {
            y.iter_mut().zip(x).for_each(|(a, b)| *a = -b);
            Ok(())
        };
        match cg_solve(neg, &[1.0, 1.0], &[0.0, 0.0], SolveOptions::budget(3)) {
            Err(Error::Numerical { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("{other:?}"),
        }
        let nan = |_: &[f64], y: &mut [f64]| {
            y.iter_mut().for_each(|v| *v = f64::NAN);
            Ok(())
        };
        assert!(matches!(
            cg_solve(nan, &[1.0], &[0.0], SolveOptions::budget(3)),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn warm_restart_handoff() {
        let mut s = SolverState::new(3);
        assert_eq!(s.warm_restart_seed(), vec![0.0; 3]);
        let sol = vec![0.1, -2.0, 1e-300];
        let rep = SolveReport {
            iterations: 4,
            residual_norm: 0.0,
            rhs_norm: 1.0,
            history: vec![],
            residual_increases: 0,
        };
        s.record(&sol, &rep);
        assert_eq!(s.warm_restart_seed(), sol);
    }

    #[test]
    fn trace_csv() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[1.0, 0.5], Some(&[2.0, 1.0])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,residual_norm,energy_norm_error\n0,1,2\n1,0.5,1\n");
    }
}
