//! Geometric propagation from layers (or DM surfaces) to the pupil.
//!
//! A [`Projector`] freezes the bilinear interpolation stencils for one
//! direction, one aperture grid and one layer stack. Forward application
//! gathers layer samples into pupil points; the adjoint scatters with the
//! same weights, so the two are exact transposes of each other.
//!
//! For a natural guide star the pupil point `r` sees layer `l` at
//! `r + theta * h_l`; for a laser guide star at altitude `H` the footprint
//! shrinks to `(1 - h_l / H) * r + theta * h_l`.

use serde::{Deserialize, Serialize};

use crate::atmosphere::{LayerSpec, PhaseScreen};
use crate::grid::{ApertureGrid, LayerGeometry, LayerGrid, LayerLayout};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StarKind {
    Ngs,
    Lgs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuideStar {
    pub kind: StarKind,
    /// Off-axis angle in radians.
    pub direction: [f64; 2],
    /// Sodium-layer altitude for laser guide stars.
    pub lgs_altitude_m: Option<f64>,
    /// Photons per subaperture per frame.
    pub flux_photons: f64,
}

impl GuideStar {
    pub fn ngs(direction: [f64; 2], flux_photons: f64) -> Self {
        GuideStar {
            kind: StarKind::Ngs,
            direction,
            lgs_altitude_m: None,
            flux_photons,
        }
    }

    pub fn lgs(direction: [f64; 2], altitude_m: f64, flux_photons: f64) -> Self {
        GuideStar {
            kind: StarKind::Lgs,
            direction,
            lgs_altitude_m: Some(altitude_m),
            flux_photons,
        }
    }

    pub fn is_lgs(&self) -> bool {
        self.kind == StarKind::Lgs
    }

    /// Cone altitude used by the projection, `None` for a star at infinity.
    pub fn cone_altitude(&self) -> Option<f64> {
        match self.kind {
            StarKind::Ngs => None,
            StarKind::Lgs => self.lgs_altitude_m,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerStencil {
    idx: Vec<[u32; 4]>,
    w: Vec<[f64; 4]>,
}

/// Frozen interpolation stencils for one direction.
#[derive(Debug, Clone)]
pub struct Projector {
    layout: LayerLayout,
    n_points: usize,
    /// Aperture indices of the masked points, row-major.
    points: Vec<usize>,
    stencils: Vec<LayerStencil>,
}

impl Projector {
    /// Builds the projection of `layout` onto `grid` along `theta`. With
    /// `cone_altitude = Some(H)` the LGS cone geometry is used.
    pub fn new(
        layout: &LayerLayout,
        grid: &ApertureGrid,
        theta: [f64; 2],
        cone_altitude: Option<f64>,
    ) -> Result<Self> {
        let pts = grid.masked_points();
        let mut stencils = Vec::with_capacity(layout.n_layers());
        for (li, layer) in layout.layers().iter().enumerate() {
            let h = layer.altitude_m;
            let scale = match cone_altitude {
                Some(big_h) => {
                    if !(big_h > 0.0) || h >= big_h {
                        return Err(Error::config(
                            "guide_stars.altitude_m",
                            format!("layer {li} at {h} m is not below the LGS altitude {big_h} m"),
                        ));
                    }
                    1.0 - h / big_h
                }
                None => 1.0,
            };
            let (dx, dy) = (theta[0] * h, theta[1] * h);
            let mut st = LayerStencil {
                idx: Vec::with_capacity(pts.len()),
                w: Vec::with_capacity(pts.len()),
            };
            for &(_, x, y) in &pts {
                let (px, py) = (scale * x + dx, scale * y + dy);
                let (idx, w) = layer.grid.stencil(px, py).ok_or_else(|| {
                    let (lo, hi) = layer.grid.extent();
                    Error::geometry(
                        format!("layer {li} at {h} m"),
                        format!("footprint point ({px:.3}, {py:.3}) m outside layer extent [{lo:.3}, {hi:.3}] m"),
                    )
                })?;
                st.idx.push(idx.map(|i| i as u32));
                st.w.push(w);
            }
            stencils.push(st);
        }
        Ok(Projector {
            layout: layout.clone(),
            n_points: grid.len(),
            points: pts.iter().map(|p| p.0).collect(),
            stencils,
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    /// Length of the wavefront vectors (all aperture points, masked or not).
    pub fn wavefront_len(&self) -> usize {
        self.n_points
    }

    /// `out = P x`; unmasked points are set to zero.
    pub fn apply(&self, layers: &[f64], out: &mut [f64]) -> Result<()> {
        Error::check_len("projection input", self.layout.total_len(), layers.len())?;
        Error::check_len("projection output", self.n_points, out.len())?;
        out.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..self.layout.n_layers() {
            self.accumulate_layer(l, self.layout.slice(layers, l), out);
        }
        Ok(())
    }

    /// `out += P_l x_l` for one layer's values.
    pub fn accumulate_layer(&self, layer: usize, values: &[f64], out: &mut [f64]) {
        let st = &self.stencils[layer];
        for ((&p, idx), w) in self.points.iter().zip(&st.idx).zip(&st.w) {
            out[p] += w[0] * values[idx[0] as usize]
                + w[1] * values[idx[1] as usize]
                + w[2] * values[idx[2] as usize]
                + w[3] * values[idx[3] as usize];
        }
    }

    /// `out += P^T y`.
    pub fn apply_adjoint(&self, wavefront: &[f64], out: &mut [f64]) -> Result<()> {
        Error::check_len("adjoint projection input", self.n_points, wavefront.len())?;
        Error::check_len("adjoint projection output", self.layout.total_len(), out.len())?;
        for l in 0..self.layout.n_layers() {
            let r = self.layout.range(l);
            let values = &mut out[r];
            let st = &self.stencils[l];
            for ((&p, idx), w) in self.points.iter().zip(&st.idx).zip(&st.w) {
                let y = wavefront[p];
                for k in 0..4 {
                    values[idx[k] as usize] += w[k] * y;
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, layers: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_points];
        self.apply(layers, &mut out)?;
        Ok(out)
    }

    pub fn adjoint(&self, wavefront: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.layout.total_len()];
        self.apply_adjoint(wavefront, &mut out)?;
        Ok(out)
    }
}

/// Layout of a simulated atmosphere's layer specs.
pub fn layout_from_specs(specs: &[LayerSpec]) -> Result<LayerLayout> {
    let layers = specs
        .iter()
        .map(|s| {
            Ok(LayerGeometry {
                altitude_m: s.altitude_m,
                grid: LayerGrid::new(s.grid_size, s.grid_spacing_m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerLayout::new(layers))
}

/// Concatenates screens into the flat vector expected by a [`Projector`].
pub fn flatten_screens(screens: &[PhaseScreen]) -> Vec<f64> {
    screens.iter().flat_map(|s| s.values.iter().copied()).collect()
}

/// `sum_l phi_l(r + theta h_l)` on the masked points of `grid`.
pub fn project_ngs(layout: &LayerLayout, layers: &[f64], theta: [f64; 2], grid: &ApertureGrid) -> Result<Vec<f64>> {
    Projector::new(layout, grid, theta, None)?.forward(layers)
}

/// `sum_l phi_l((1 - h_l/H) r + theta h_l)` on the masked points of `grid`.
pub fn project_lgs(
    layout: &LayerLayout,
    layers: &[f64],
    theta: [f64; 2],
    lgs_altitude_m: f64,
    grid: &ApertureGrid,
) -> Result<Vec<f64>> {
    Projector::new(layout, grid, theta, Some(lgs_altitude_m))?.forward(layers)
}

pub fn project_ngs_adjoint(
    layout: &LayerLayout,
    wavefront: &[f64],
    theta: [f64; 2],
    grid: &ApertureGrid,
) -> Result<Vec<f64>> {
    Projector::new(layout, grid, theta, None)?.adjoint(wavefront)
}

pub fn project_lgs_adjoint(
    layout: &LayerLayout,
    wavefront: &[f64],
    theta: [f64; 2],
    lgs_altitude_m: f64,
    grid: &ApertureGrid,
) -> Result<Vec<f64>> {
    Projector::new(layout, grid, theta, Some(lgs_altitude_m))?.adjoint(wavefront)
}

/// Correction `H_theta a` produced by bilinear DM surfaces described by
/// `dm_layout` (one grid per mirror at its conjugation altitude).
pub fn project_dm(dm_layout: &LayerLayout, commands: &[f64], theta: [f64; 2], grid: &ApertureGrid) -> Result<Vec<f64>> {
    project_ngs(dm_layout, commands, theta, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
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

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn ground_layer_is_sampled_directly() {
        let lay = layout(&[0.0], 32, 0.5);
        let grid = ApertureGrid::annular(9, 0.5, 4.0, 0.0).unwrap();
        let x = random(lay.total_len(), 1);
        let wf = project_ngs(&lay, &x, [3e-4, -2e-4], &grid).unwrap();
        let g = lay.layers()[0].grid;
        for (k, px, py) in grid.masked_points() {
            let ix = (px / 0.5).round() as i64 + 16;
            let iy = (py / 0.5).round() as i64 + 16;
            let want = x[(iy * 32 + ix) as usize];
            assert!((wf[k] - want).abs() < 1e-14, "{k}");
            let _ = g;
        }
    }

    #[test]
    fn two_layers_on_axis_sum() {
        let lay = layout(&[0.0, 5000.0], 16, 0.5);
        let grid = ApertureGrid::annular(5, 0.5, 2.0, 0.0).unwrap();
        let x = random(lay.total_len(), 2);
        let wf = project_ngs(&lay, &x, [0.0, 0.0], &grid).unwrap();
        let a = project_ngs(&layout(&[0.0], 16, 0.5), &x[..256], [0.0; 2], &grid).unwrap();
        let b = project_ngs(&layout(&[0.0], 16, 0.5), &x[256..], [0.0; 2], &grid).unwrap();
        for k in 0..wf.len() {
            assert!((wf[k] - a[k] - b[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn off_axis_shift_matches_scalar_bilinear() {
        // h = 10 km, theta_x = 1e-4 rad: one metre shift
        let n = 32;
        let d = 0.4;
        let lay = layout(&[10_000.0], n, d);
        let x = random(lay.total_len(), 3);
        let grid = ApertureGrid::annular(9, 0.5, 4.0, 0.0).unwrap();
        let wf = project_ngs(&lay, &x, [1e-4, 0.0], &grid).unwrap();
        let sample = |px: f64, py: f64| {
            let u = px / d + (n / 2) as f64;
            let v = py / d + (n / 2) as f64;
            let (i, j) = (u.floor() as usize, v.floor() as usize);
            let (fu, fv) = (u - i as f64, v - j as f64);
            let at = |a: usize, b: usize| x[b * n + a];
            at(i, j) * (1.0 - fu) * (1.0 - fv) + at(i + 1, j) * fu * (1.0 - fv) + at(i, j + 1) * (1.0 - fu) * fv
                + at(i + 1, j + 1) * fu * fv
        };
        let pts = grid.masked_points();
        for &(k, px, py) in pts.iter().step_by(pts.len() / 5).take(5) {
            assert!((wf[k] - sample(px + 1.0, py)).abs() < 1e-13);
        }
    }

    #[test]
    fn cone_factor_and_ground_identity() {
        let grid = ApertureGrid::annular(9, 0.5, 4.0, 0.0).unwrap();
        let lay0 = layout(&[0.0], 32, 0.5);
        let x = random(lay0.total_len(), 4);
        let a = project_ngs(&lay0, &x, [1e-4, 0.0], &grid).unwrap();
        let b = project_lgs(&lay0, &x, [1e-4, 0.0], 90_000.0, &grid).unwrap();
        assert_eq!(a, b);

        // linear screen phi(x) = x: LGS tilt reduced by (1 - h/H)
        let n = 64;
        let d = 0.5;
        let h = 4000.0;
        let big_h = 90_000.0;
        let lay = layout(&[h], n, d);
        let g = lay.layers()[0].grid;
        let mut lin = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                lin[iy * n + ix] = g.coord(ix);
            }
        }
        let theta = [2e-4, 1e-4];
        let wf = project_lgs(&lay, &lin, theta, big_h, &grid).unwrap();
        for (k, px, _) in grid.masked_points() {
            let want = (1.0 - h / big_h) * px + theta[0] * h;
            assert!((wf[k] - want).abs() < 1e-12);
        }
        assert!(((1.0 - h / big_h) - 86.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn layer_above_lgs_rejected() {
        let grid = ApertureGrid::annular(5, 0.5, 2.0, 0.0).unwrap();
        let lay = layout(&[95_000.0], 16, 0.5);
        let x = vec![0.0; lay.total_len()];
        assert!(matches!(
            project_lgs(&lay, &x, [0.0; 2], 90_000.0, &grid),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn footprint_overflow_names_layer() {
        let grid = ApertureGrid::annular(17, 0.5, 8.0, 0.0).unwrap();
        let lay = layout(&[0.0, 12_000.0], 32, 0.5);
        let x = vec![0.0; lay.total_len()];
        match project_ngs(&lay, &x, [5e-4, 0.0], &grid) {
            Err(Error::Geometry { context, .. }) => assert!(context.contains("layer 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adjoint_basics() {
        let grid = ApertureGrid::annular(9, 0.5, 4.0, 0.0).unwrap();
        let lay = layout(&[0.0, 3000.0], 32, 0.5);
        let p = Projector::new(&lay, &grid, [1e-4, 5e-5], Some(90_000.0)).unwrap();
        let z = p.adjoint(&vec![0.0; grid.len()]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        // one pupil point: mass spreads over <= 4 cells per layer summing to 1
        let (k, _, _) = grid.masked_points()[7];
        let mut e = vec![0.0; grid.len()];
        e[k] = 1.0;
        let back = p.adjoint(&e).unwrap();
        for l in 0..2 {
            let s = lay.slice(&back, l);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(s.iter().filter(|&&v| v != 0.0).count() <= 4);
        }
    }

    #[test]
    fn far_lgs_matches_ngs() {
        let grid = ApertureGrid::annular(9, 0.5, 4.0, 0.0).unwrap();
        let lay = layout(&[0.0, 6000.0], 32, 0.5);
        let x = random(lay.total_len(), 5);
        let a = project_ngs(&lay, &x, [0.0; 2], &grid).unwrap();
        let b = project_lgs(&lay, &x, [0.0; 2], 1e15, &grid).unwrap();
        let na = crate::norm2(&a);
        let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(crate::norm2(&diff) <= 1e-9 * na);
    }
}
