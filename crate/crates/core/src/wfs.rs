//! Shack–Hartmann sensing in Fried geometry and the slope-noise model.
//!
//! Phase lives on subaperture corners. A subaperture with corners
//! `p00, p10, p01, p11` (first index along x) reads
//!
//! ```text
//! s_x = ((p10 + p11) - (p00 + p01)) / (2 d)
//! s_y = ((p01 + p11) - (p00 + p10)) / (2 d)
//! ```
//!
//! i.e. the mean wavefront gradient over the cell. Slope vectors store all
//! x slopes of a sensor followed by all y slopes; sensors are concatenated
//! in guide-star order.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::grid::ApertureGrid;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Lenslet layout of one sensor over the pupil.
#[derive(Debug, Clone, PartialEq)]
pub struct WfsGeometry {
    pub subapertures_per_side: usize,
    pub subaperture_size_m: f64,
    /// Active flag per subaperture, row-major.
    pub active_mask: Vec<bool>,
    /// Guide star this sensor looks at.
    pub direction_index: usize,
    active: Vec<(usize, usize)>,
    corners: ApertureGrid,
}

impl WfsGeometry {
    /// Square lenslet array across a pupil of `diameter` with central
    /// obstruction `obstruction` (fraction of the diameter). A subaperture is
    /// active when at least `threshold` of its area is illuminated.
    pub fn new(
        subapertures_per_side: usize,
        diameter: f64,
        obstruction: f64,
        threshold: f64,
        direction_index: usize,
    ) -> Result<Self> {
        if subapertures_per_side == 0 {
            return Err(Error::config("subapertures", "need at least one subaperture"));
        }
        let n = subapertures_per_side;
        let d = diameter / n as f64;
        let ro = diameter / 2.0;
        let ri = obstruction * ro;
        const SUB: usize = 20;
        let mut mask = vec![false; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let mut lit = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let x = -ro + (ix as f64 + (sx as f64 + 0.5) / SUB as f64) * d;
                        let y = -ro + (iy as f64 + (sy as f64 + 0.5) / SUB as f64) * d;
                        let r = x.hypot(y);
                        if r <= ro && r >= ri {
                            lit += 1;
                        }
                    }
                }
                mask[iy * n + ix] = lit as f64 >= threshold * (SUB * SUB) as f64;
            }
        }
        Self::from_mask(n, d, mask, direction_index)
    }

    pub fn from_mask(
        subapertures_per_side: usize,
        subaperture_size_m: f64,
        active_mask: Vec<bool>,
        direction_index: usize,
    ) -> Result<Self> {
        let n = subapertures_per_side;
        Error::check_len("active subaperture mask", n * n, active_mask.len())?;
        let mut active = Vec::new();
        let mut corner_mask = vec![false; (n + 1) * (n + 1)];
        for iy in 0..n {
            for ix in 0..n {
                if active_mask[iy * n + ix] {
                    active.push((ix, iy));
                    for (cx, cy) in [(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)] {
                        corner_mask[cy * (n + 1) + cx] = true;
                    }
                }
            }
        }
        if active.is_empty() {
            return Err(Error::config("subapertures", "sensor has no active subaperture"));
        }
        let corners = ApertureGrid::with_mask(n + 1, subaperture_size_m, corner_mask)?;
        Ok(WfsGeometry {
            subapertures_per_side: n,
            subaperture_size_m,
            active_mask,
            direction_index,
            active,
            corners,
        })
    }

    /// Number of active subapertures `S`.
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn n_slopes(&self) -> usize {
        2 * self.active.len()
    }

    /// Active subapertures as `(ix, iy)`, in slope order.
    pub fn active(&self) -> &[(usize, usize)] {
        &self.active
    }

    /// Fried corner grid on which this sensor samples the wavefront.
    pub fn corner_grid(&self) -> &ApertureGrid {
        &self.corners
    }

    /// Centre of subaperture `(ix, iy)` in pupil coordinates.
    pub fn subaperture_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let d = self.subaperture_size_m;
        let o = -(self.subapertures_per_side as f64) * d / 2.0;
        (o + (ix as f64 + 0.5) * d, o + (iy as f64 + 0.5) * d)
    }

    fn corner_ids(&self, ix: usize, iy: usize) -> [usize; 4] {
        let m = self.subapertures_per_side + 1;
        let p00 = iy * m + ix;
        [p00, p00 + 1, p00 + m, p00 + m + 1]
    }
}

/// Mean-gradient slopes of `wavefront` (sampled on the corner grid).
pub fn shack_hartmann(wavefront: &[f64], geom: &WfsGeometry) -> Result<Vec<f64>> {
    let mut out = vec![0.0; geom.n_slopes()];
    shack_hartmann_into(wavefront, geom, &mut out)?;
    Ok(out)
}

pub fn shack_hartmann_into(wavefront: &[f64], geom: &WfsGeometry, out: &mut [f64]) -> Result<()> {
    if wavefront.len() != geom.corners.len() {
        return Err(Error::config(
            "wfs",
            format!(
                "wavefront has {} samples, sensor corner grid has {}",
                wavefront.len(),
                geom.corners.len()
            ),
        ));
    }
    Error::check_len("slope output", geom.n_slopes(), out.len())?;
    let s = geom.n_active();
    let inv = 1.0 / (2.0 * geom.subaperture_size_m);
    for (i, &(ix, iy)) in geom.active.iter().enumerate() {
        let [p00, p10, p01, p11] = geom.corner_ids(ix, iy).map(|k| wavefront[k]);
        out[i] = ((p10 + p11) - (p00 + p01)) * inv;
        out[s + i] = ((p01 + p11) - (p00 + p10)) * inv;
    }
    Ok(())
}

/// `wf += Gamma^T s`.
pub fn shack_hartmann_adjoint(slopes: &[f64], geom: &WfsGeometry, wavefront: &mut [f64]) -> Result<()> {
    Error::check_len("slope input", geom.n_slopes(), slopes.len())?;
    Error::check_len("adjoint wavefront", geom.corners.len(), wavefront.len())?;
    let s = geom.n_active();
    let inv = 1.0 / (2.0 * geom.subaperture_size_m);
    for (i, &(ix, iy)) in geom.active.iter().enumerate() {
        let [p00, p10, p01, p11] = geom.corner_ids(ix, iy);
        let gx = slopes[i] * inv;
        let gy = slopes[s + i] * inv;
        wavefront[p00] += -gx - gy;
        wavefront[p10] += gx - gy;
        wavefront[p01] += -gx + gy;
        wavefront[p11] += gx + gy;
    }
    Ok(())
}

/// Slopes of several sensors concatenated in guide-star order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeVector {
    pub data: Vec<f64>,
    offsets: Vec<usize>,
}

impl SlopeVector {
    pub fn zeros(geoms: &[WfsGeometry]) -> Self {
        let mut offsets = vec![0];
        for g in geoms {
            offsets.push(offsets.last().unwrap() + g.n_slopes());
        }
        SlopeVector {
            data: vec![0.0; *offsets.last().unwrap()],
            offsets,
        }
    }

    pub fn from_parts(parts: Vec<Vec<f64>>) -> Self {
        let mut offsets = vec![0];
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p);
            offsets.push(data.len());
        }
        SlopeVector { data, offsets }
    }

    pub fn n_sensors(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sensor(&self, m: usize) -> &[f64] {
        &self.data[self.offsets[m]..self.offsets[m + 1]]
    }

    pub fn sensor_mut(&mut self, m: usize) -> &mut [f64] {
        let (a, b) = (self.offsets[m], self.offsets[m + 1]);
        &mut self.data[a..b]
    }

    pub fn same_layout(&self, other: &SlopeVector) -> bool {
        self.offsets == other.offsets
    }

    pub fn add_assign(&mut self, other: &SlopeVector) -> Result<()> {
        Error::check_len("slope vector", self.len(), other.len())?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

/// Orthogonal projector onto the uniform-x and uniform-y slope vectors of a
/// sensor with `S` active subapertures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TipTiltProjector {
    pub n_subapertures: usize,
}

impl TipTiltProjector {
    pub fn new(n_subapertures: usize) -> Self {
        TipTiltProjector { n_subapertures }
    }

    /// Per-axis means `(mean s_x, mean s_y)`.
    pub fn tiptilt(&self, s: &[f64]) -> (f64, f64) {
        let n = self.n_subapertures;
        let mx = s[..n].iter().sum::<f64>() / n as f64;
        let my = s[n..2 * n].iter().sum::<f64>() / n as f64;
        (mx, my)
    }

    /// `T s`.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let n = self.n_subapertures;
        let (mx, my) = self.tiptilt(s);
        let mut out = vec![mx; 2 * n];
        out[n..].iter_mut().for_each(|v| *v = my);
        out
    }

    /// `s <- (I - T) s`.
    pub fn remove_in_place(&self, s: &mut [f64]) {
        let n = self.n_subapertures;
        let (mx, my) = self.tiptilt(s);
        s[..n].iter_mut().for_each(|v| *v -= mx);
        s[n..2 * n].iter_mut().for_each(|v| *v -= my);
    }
}

/// `(I - T) s`.
pub fn remove_tiptilt(s: &[f64], t: &TipTiltProjector) -> Result<Vec<f64>> {
    Error::check_len("tip-tilt removal", 2 * t.n_subapertures, s.len())?;
    let mut out = s.to_vec();
    t.remove_in_place(&mut out);
    Ok(out)
}

/// Spot elongation of an LGS sensor: `C_i = sigma^2 (I + tau/f^2 beta_i beta_i^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Elongation {
    /// One elongation vector per active subaperture.
    pub betas: Vec<[f64; 2]>,
    /// FWHM of the non-elongated spot, same units as `beta`.
    pub fwhm: f64,
    pub tau: f64,
}

/// Noise description of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorNoise {
    pub sigma2: f64,
    pub elongation: Option<Elongation>,
    pub tiptilt_removed: bool,
}

impl SensorNoise {
    pub fn isotropic(sigma2: f64) -> Self {
        SensorNoise {
            sigma2,
            elongation: None,
            tiptilt_removed: false,
        }
    }

    pub fn validate(&self, n_sub: usize) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Model(format!("slope variance must be > 0, got {}", self.sigma2)));
        }
        if let Some(e) = &self.elongation {
            if !(0.0..=1.0).contains(&e.tau) {
                return Err(Error::Model(format!("tau must lie in [0, 1], got {}", e.tau)));
            }
            if !(e.fwhm > 0.0 && e.fwhm.is_finite()) {
                return Err(Error::Model("spot FWHM must be > 0".into()));
            }
            if e.betas.len() != n_sub {
                return Err(Error::Model(format!(
                    "{} elongation vectors for {} subapertures",
                    e.betas.len(),
                    n_sub
                )));
            }
            if e.betas.iter().any(|b| !(b[0].is_finite() && b[1].is_finite())) {
                return Err(Error::Model("non-finite elongation vector".into()));
            }
        }
        Ok(())
    }

    /// Rank-one coefficient `tau / f^2` and `beta` for subaperture `i`.
    fn rank_one(&self, i: usize) -> (f64, [f64; 2]) {
        match &self.elongation {
            Some(e) => (e.tau / (e.fwhm * e.fwhm), e.betas[i]),
            None => (0.0, [0.0, 0.0]),
        }
    }

    /// 2x2 covariance block of subaperture `i` as `[cxx, cxy, cyy]`.
    pub fn block(&self, i: usize) -> [f64; 3] {
        let (a, b) = self.rank_one(i);
        let s2 = self.sigma2;
        [s2 * (1.0 + a * b[0] * b[0]), s2 * a * b[0] * b[1], s2 * (1.0 + a * b[1] * b[1])]
    }

    /// `C~^{-1} s` by the Sherman–Morrison formula, without tip–tilt handling.
    pub fn apply_inv_plain(&self, s: &[f64]) -> Vec<f64> {
        let n = s.len() / 2;
        let mut out = vec![0.0; s.len()];
        let inv_s2 = 1.0 / self.sigma2;
        for i in 0..n {
            let (a, b) = self.rank_one(i);
            let (x, y) = (s[i], s[n + i]);
            let bt = b[0] * x + b[1] * y;
            let c = a / (1.0 + a * (b[0] * b[0] + b[1] * b[1]));
            out[i] = inv_s2 * (x - c * b[0] * bt);
            out[n + i] = inv_s2 * (y - c * b[1] * bt);
        }
        out
    }

    /// Draw one zero-mean noise vector for this sensor.
    pub fn sample(&self, n_sub: usize, rng: &mut Rng) -> Vec<f64> {
        let mut out = vec![0.0; 2 * n_sub];
        let sigma = self.sigma2.sqrt();
        for i in 0..n_sub {
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let (a, b) = self.rank_one(i);
            let bb = b[0] * b[0] + b[1] * b[1];
            // symmetric square root sigma (I + c b b^T / |b|^2)
            let (nx, ny) = if bb > 0.0 && a > 0.0 {
                let c = (1.0 + a * bb).sqrt() - 1.0;
                let proj = (b[0] * zx + b[1] * zy) / bb;
                (zx + c * proj * b[0], zy + c * proj * b[1])
            } else {
                (zx, zy)
            };
            out[i] = sigma * nx;
            out[n_sub + i] = sigma * ny;
        }
        out
    }
}

/// Noise description of every sensor, in guide-star order.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sensors: Vec<SensorNoise>,
}

impl NoiseModel {
    pub fn validate(&self, geoms: &[WfsGeometry]) -> Result<()> {
        Error::check_len("noise model sensors", geoms.len(), self.sensors.len())?;
        for (n, g) in self.sensors.iter().zip(geoms) {
            n.validate(g.n_active())?;
        }
        Ok(())
    }

    /// Scales every slope variance by `factor`.
    pub fn scaled(&self, factor: f64) -> NoiseModel {
        NoiseModel {
            sensors: self
                .sensors
                .iter()
                .map(|s| SensorNoise {
                    sigma2: s.sigma2 * factor,
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Slope variance from photon and read-out noise:
/// `kappa_ph / N + kappa_ro * ron^2 / N^2`.
pub fn slope_variance(photons: f64, readout_e: f64, kappa_photon: f64, kappa_readout: f64) -> Result<f64> {
    if !(photons > 0.0 && photons.is_finite()) {
        return Err(Error::config("flux_photons", "photon count must be > 0"));
    }
    Ok(kappa_photon / photons + kappa_readout * readout_e * readout_e / (photons * photons))
}

/// Radial elongation vectors `e_max (r_i - r_launch) / R_pupil`, one per active
/// subaperture of `geom`.
pub fn radial_elongation(geom: &WfsGeometry, e_max: f64, launch: [f64; 2], pupil_radius: f64) -> Vec<[f64; 2]> {
    geom.active()
        .iter()
        .map(|&(ix, iy)| {
            let (x, y) = geom.subaperture_center(ix, iy);
            [e_max * (x - launch[0]) / pupil_radius, e_max * (y - launch[1]) / pupil_radius]
        })
        .collect()
}

/// Zero-mean Gaussian slope noise for all sensors; sensor `m` draws from its
/// own stream derived from `seed`.
pub fn sample_noise(model: &NoiseModel, geoms: &[WfsGeometry], seed: u64) -> Result<SlopeVector> {
    model.validate(geoms)?;
    let parts = model
        .sensors
        .iter()
        .zip(geoms)
        .enumerate()
        .map(|(m, (n, g))| {
            let mut r = rng::stream(seed, "noise", m as u64, 0);
            n.sample(g.n_active(), &mut r)
        })
        .collect();
    Ok(SlopeVector::from_parts(parts))
}

/// Applies `C~^{-1}` per sensor, sandwiched as `(I - T) C~^{-1} (I - T)` for
/// sensors flagged `tiptilt_removed`.
pub fn apply_inv_noise_cov(s: &SlopeVector, model: &NoiseModel) -> Result<SlopeVector> {
    Error::check_len("noise model sensors", s.n_sensors(), model.sensors.len())?;
    let parts = (0..s.n_sensors())
        .map(|m| apply_inv_sensor(s.sensor(m), &model.sensors[m]))
        .collect();
    Ok(SlopeVector::from_parts(parts))
}

/// `C^^{-1} s` for a single sensor.
pub fn apply_inv_sensor(s: &[f64], noise: &SensorNoise) -> Vec<f64> {
    if noise.tiptilt_removed {
        let t = TipTiltProjector::new(s.len() / 2);
        let mut tmp = s.to_vec();
        t.remove_in_place(&mut tmp);
        let mut out = noise.apply_inv_plain(&tmp);
        t.remove_in_place(&mut out);
        out
    } else {
        noise.apply_inv_plain(s)
    }
}

/// Debug dump: `sensor,subap_ix,subap_iy,sx,sy`.
pub fn write_slopes_csv<W: Write>(mut w: W, s: &SlopeVector, geoms: &[WfsGeometry]) -> Result<()> {
    writeln!(w, "sensor,subap_ix,subap_iy,sx,sy")?;
    for (m, g) in geoms.iter().enumerate() {
        let v = s.sensor(m);
        let n = g.n_active();
        for (i, &(ix, iy)) in g.active().iter().enumerate() {
            writeln!(w, "{m},{ix},{iy},{},{}", v[i], v[n + i])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn geom(n: usize) -> WfsGeometry {
        WfsGeometry::new(n, 8.0, 0.3, 0.5, 0).unwrap()
    }

    fn plane(g: &WfsGeometry, a: f64, b: f64, c: f64) -> Vec<f64> {
        let cg = g.corner_grid();
        let mut wf = vec![0.0; cg.len()];
        for iy in 0..cg.n_side {
            for ix in 0..cg.n_side {
                let (x, y) = cg.position_xy(ix, iy);
                wf[iy * cg.n_side + ix] = a * x + b * y + c;
            }
        }
        wf
    }

    #[test]
    fn constant_and_planar_wavefronts() {
        let g = geom(8);
        let s = shack_hartmann(&plane(&g, 0.0, 0.0, 3.7), &g).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
        let s = shack_hartmann(&plane(&g, 0.3, -1.2, 0.5), &g).unwrap();
        let n = g.n_active();
        for i in 0..n {
            assert!((s[i] - 0.3).abs() < 1e-13);
            assert!((s[n + i] + 1.2).abs() < 1e-13);
        }
    }

    #[test]
    fn quadratic_mean_gradient() {
        let d = 0.7;
        let g = WfsGeometry::from_mask(1, d, vec![true], 0).unwrap();
        // corners at x in {0, d} after shifting the origin: use phi = (x - x0)^2
        let cg = g.corner_grid();
        let x0 = cg.origin();
        let mut wf = vec![0.0; 4];
        for iy in 0..2 {
            for ix in 0..2 {
                let (x, _) = cg.position_xy(ix, iy);
                wf[iy * 2 + ix] = (x - x0).powi(2);
            }
        }
        let s = shack_hartmann(&wf, &g).unwrap();
        assert!((s[0] - d).abs() < 1e-14);
        assert!(s[1].abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let g = geom(4);
        assert!(matches!(shack_hartmann(&[0.0; 3], &g), Err(Error::Config { .. })));
    }

    #[test]
    fn activation_threshold() {
        let g = geom(16);
        // the central obstruction switches off the middle subapertures
        assert!(!g.active_mask[8 * 16 + 8]);
        assert!(!g.active_mask[0]);
        assert!(g.n_active() > 150 && g.n_active() < 256);
        let tt = WfsGeometry::new(2, 8.0, 0.3, 0.5, 0).unwrap();
        assert_eq!(tt.n_active(), 4);
    }

    #[test]
    fn elongation_doubles_x_variance() {
        let n = SensorNoise {
            sigma2: 0.5,
            elongation: Some(Elongation {
                betas: vec![[2.0, 0.0]],
                fwhm: 2.0,
                tau: 1.0,
            }),
            tiptilt_removed: false,
        };
        let b = n.block(0);
        assert!((b[0] - 1.0).abs() < 1e-15);
        assert!(b[1].abs() < 1e-15);
        assert!((b[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn isotropic_inverse_is_division() {
        let n = SensorNoise::isotropic(0.25);
        let s = vec![1.0, -2.0, 0.5, 4.0];
        let out = n.apply_inv_plain(&s);
        for (o, v) in out.iter().zip(&s) {
            assert!((o - v / 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn block_inverse_against_direct_inversion() {
        let mut r = rng::from_seed(11);
        for _ in 0..200 {
            let sigma2 = r.random_range(0.01..10.0);
            let fwhm = r.random_range(0.1..3.0);
            let tau = r.random_range(0.0..=1.0);
            let beta = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let n = SensorNoise {
                sigma2,
                elongation: Some(Elongation {
                    betas: vec![beta],
                    fwhm,
                    tau,
                }),
                tiptilt_removed: false,
            };
            let [a, b, d] = n.block(0);
            assert!(a * d - b * b > 0.0 && a > 0.0);
            for e in [[1.0, 0.0], [0.0, 1.0]] {
                let x = n.apply_inv_plain(&e);
                let r = [a * x[0] + b * x[1] - e[0], b * x[0] + d * x[1] - e[1]];
                assert!(r[0].hypot(r[1]) < 1e-12, "{r:?}");
            }
        }
    }

    #[test]
    fn tiptilt_projector_algebra() {
        let t = TipTiltProjector::new(5);
        let mut r = rng::from_seed(2);
        let s: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let once = remove_tiptilt(&s, &t).unwrap();
        let twice = remove_tiptilt(&once, &t).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
        let tip: Vec<f64> = (0..10).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        let tilt: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 1.0 }).collect();
        assert!(crate::dot(&once, &tip).abs() < 1e-14);
        assert!(crate::dot(&once, &tilt).abs() < 1e-14);
        let mut c = vec![0.7; 10];
        c[7] = 1.0;
        let out = remove_tiptilt(&c, &t).unwrap();
        assert!(out[..5].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn pure_tip_vanishes_on_lgs() {
        let g = geom(8);
        let n = g.n_active();
        let noise = SensorNoise {
            sigma2: 1.0,
            elongation: Some(Elongation {
                betas: radial_elongation(&g, 1.0, [0.0, 0.0], 4.0),
                fwhm: 1.0,
                tau: 0.8,
            }),
            tiptilt_removed: true,
        };
        let mut s = vec![0.0; 2 * n];
        s[..n].iter_mut().for_each(|v| *v = 2.5);
        let out = apply_inv_sensor(&s, &noise);
        assert!(out.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn slope_csv_header() {
        let g = geom(2);
        let s = SlopeVector::from_parts(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]]);
        let mut buf = Vec::new();
        write_slopes_csv(&mut buf, &s, &[g]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sensor,subap_ix,subap_iy,sx,sy"));
        assert_eq!(lines.next(), Some("0,0,0,1,5"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn invalid_tau_rejected() {
        let n = SensorNoise {
            sigma2: 1.0,
            elongation: Some(Elongation {
                betas: vec![[0.0, 0.0]],
                fwhm: 1.0,
                tau: 1.5,
            }),
            tiptilt_removed: false,
        };
        assert!(matches!(n.validate(1), Err(Error::Model(_))));
    }
}
