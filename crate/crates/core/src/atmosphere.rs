//! Von Kármán phase screens and frozen-flow evolution.
//!
//! Screens are synthesised with the spectral method: real white noise is
//! Fourier transformed, shaped by the square root of the power spectrum and
//! transformed back. Spatial frequencies are in cycles per metre and the
//! spectrum reads `c * (L0^-2 + |k|^2)^exponent` with `exponent = -11/6`,
//! where `L0` is the outer scale in metres. No subharmonics are added; the
//! outer scale bounds the missing low-order power. The Nyquist row and
//! column of the spectrum are not populated.
//!
//! Phase is stored in radians at the run's reference wavelength.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// One turbulent layer of the simulated atmosphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub altitude_m: f64,
    /// Turbulence strength `c_rho(h)` of this layer.
    pub strength: f64,
    /// Wind velocity in m/s.
    pub wind: [f64; 2],
    pub grid_spacing_m: f64,
    pub grid_size: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.altitude_m >= 0.0 && self.altitude_m.is_finite()) {
            return Err(Error::config("altitude_m", "altitude must be finite and >= 0"));
        }
        if !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(Error::config("strength", "layer strength must be > 0"));
        }
        if !(self.grid_spacing_m > 0.0 && self.grid_spacing_m.is_finite()) {
            return Err(Error::config("grid_spacing_m", "grid spacing must be > 0"));
        }
        if !self.grid_size.is_power_of_two() || self.grid_size < 2 {
            return Err(Error::config(
                "grid_size",
                format!("grid size {} is not a power of two", self.grid_size),
            ));
        }
        if !(self.wind[0].is_finite() && self.wind[1].is_finite()) {
            return Err(Error::config("wind", "wind velocity must be finite"));
        }
        Ok(())
    }
}

/// Checks altitude ordering and rescales strengths so they sum to `total`.
pub fn normalize_layers(layers: &mut [LayerSpec], total: f64) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::config("atmosphere.layers", "at least one layer is required"));
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::config("atmosphere.total_strength", "must be > 0"));
    }
    for (i, l) in layers.iter().enumerate() {
        l.validate().map_err(|e| prefix_field(e, &format!("atmosphere.layers[{i}]")))?;
        if i > 0 && l.altitude_m <= layers[i - 1].altitude_m {
            return Err(Error::config(
                format!("atmosphere.layers[{i}].altitude_m"),
                "altitudes must be strictly increasing",
            ));
        }
    }
    let sum: f64 = layers.iter().map(|l| l.strength).sum();
    for l in layers.iter_mut() {
        l.strength *= total / sum;
    }
    Ok(())
}

pub(crate) fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonKarmanSpectrum {
    /// Outer scale `L0` in metres.
    pub outer_scale_m: f64,
    /// Exponent applied to `(L0^-2 + |k|^2)`.
    pub exponent: f64,
}

impl Default for VonKarmanSpectrum {
    fn default() -> Self {
        VonKarmanSpectrum {
            outer_scale_m: 25.0,
            exponent: -11.0 / 6.0,
        }
    }
}

impl VonKarmanSpectrum {
    pub fn new(outer_scale_m: f64) -> Result<Self> {
        let s = VonKarmanSpectrum {
            outer_scale_m,
            ..Default::default()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.outer_scale_m > 0.0 && self.outer_scale_m.is_finite()) {
            return Err(Error::config("outer_scale_m", "outer scale must be > 0"));
        }
        if !(self.exponent < 0.0 && self.exponent.is_finite()) {
            return Err(Error::config("exponent", "spectral exponent must be negative"));
        }
        Ok(())
    }

    /// Unit-strength power spectral density at squared frequency `k2`
    /// (cycles/m squared). Finite at zero.
    pub fn psd(&self, k2: f64) -> f64 {
        (self.outer_scale_m.powi(-2) + k2).powf(self.exponent)
    }
}

/// Sampled phase of one layer on a periodic square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseScreen {
    pub values: Vec<f64>,
    pub size: usize,
    pub spacing: f64,
    /// Accumulated frozen-flow translation in metres.
    pub origin_offset: [f64; 2],
}

impl PhaseScreen {
    pub fn zeros(size: usize, spacing: f64) -> Self {
        PhaseScreen {
            values: vec![0.0; size * size],
            size,
            spacing,
            origin_offset: [0.0; 2],
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// In-place 2-D FFT of a row-major `n x n` array (unnormalised both ways).
pub fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            data[r * n + c] = col[r];
        }
    }
}

/// Signed frequency index of FFT bin `i` on an `n`-point axis.
pub fn freq_index(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

pub fn generate_screen(spec: &LayerSpec, spectrum: &VonKarmanSpectrum, seed: u64) -> Result<PhaseScreen> {
    spec.validate()?;
    spectrum.validate()?;
    let n = spec.grid_size;
    let dk = 1.0 / (n as f64 * spec.grid_spacing_m);
    let mut r = rng::from_seed(seed);
    let mut field: Vec<Complex64> = (0..n * n)
        .map(|_| Complex64::new(StandardNormal.sample(&mut r), 0.0))
        .collect();
    fft2(&mut field, n, false);
    // E|noise_k|^2 = n^2; target E|a_k|^2 = c * m(k) * dk^2
    // The Nyquist row and column are left empty: they have no well-defined
    // sub-pixel shift, and keeping them out makes frozen flow exactly unitary.
    let norm = dk / n as f64;
    for iy in 0..n {
        let ky = freq_index(iy, n) * dk;
        for ix in 0..n {
            let kx = freq_index(ix, n) * dk;
            let amp = if ix == n / 2 || iy == n / 2 {
                0.0
            } else {
                (spec.strength * spectrum.psd(kx * kx + ky * ky)).sqrt() * norm
            };
            field[iy * n + ix] *= amp;
        }
    }
    fft2(&mut field, n, true);
    let mut screen = PhaseScreen {
        values: field.iter().map(|c| c.re).collect(),
        size: n,
        spacing: spec.grid_spacing_m,
        origin_offset: [0.0; 2],
    };
    let m = screen.mean();
    screen.values.iter_mut().for_each(|v| *v -= m);
    Ok(screen)
}

/// Translate a periodic screen by `wind * dt` metres.
///
/// Whole-cell shifts are exact circular permutations; fractional shifts use
/// the Fourier shift theorem, which keeps the sampled field band-limited
/// and its variance unchanged (only the Nyquist row/column is attenuated).
pub fn advance_frozen_flow(screen: &PhaseScreen, wind: [f64; 2], dt: f64) -> Result<PhaseScreen> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step must be finite and >= 0, got {dt}")));
    }
    if !(wind[0].is_finite() && wind[1].is_finite()) {
        return Err(Error::Domain("wind velocity must be finite".into()));
    }
    let n = screen.size;
    let sx = wind[0] * dt / screen.spacing;
    let sy = wind[1] * dt / screen.spacing;
    let mut out = PhaseScreen {
        values: vec![0.0; n * n],
        size: n,
        spacing: screen.spacing,
        origin_offset: [
            screen.origin_offset[0] + wind[0] * dt,
            screen.origin_offset[1] + wind[1] * dt,
        ],
    };
    let whole = |s: f64| (s - s.round()).abs() < 1e-12;
    if whole(sx) && whole(sy) {
        let ox = (sx.round() as i64).rem_euclid(n as i64) as usize;
        let oy = (sy.round() as i64).rem_euclid(n as i64) as usize;
        for iy in 0..n {
            let src_y = (iy + n - oy) % n;
            for ix in 0..n {
                let src_x = (ix + n - ox) % n;
                out.values[iy * n + ix] = screen.values[src_y * n + src_x];
            }
        }
        return Ok(out);
    }
    let mut f: Vec<Complex64> = screen.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut f, n, false);
    let tau = 2.0 * std::f64::consts::PI / n as f64;
    let phase_factor = |i: usize, s: f64| -> Complex64 {
        if n % 2 == 0 && i == n / 2 {
            // Nyquist bin is its own conjugate partner; keep it real
            Complex64::new((std::f64::consts::PI * s).cos(), 0.0)
        } else {
            Complex64::from_polar(1.0, -tau * freq_index(i, n) * s)
        }
    };
    let px: Vec<Complex64> = (0..n).map(|i| phase_factor(i, sx)).collect();
    let py: Vec<Complex64> = (0..n).map(|i| phase_factor(i, sy)).collect();
    for iy in 0..n {
        for ix in 0..n {
            f[iy * n + ix] *= px[ix] * py[iy];
        }
    }
    fft2(&mut f, n, true);
    let scale = 1.0 / (n * n) as f64;
    for (o, c) in out.values.iter_mut().zip(&f) {
        *o = c.re * scale;
    }
    if out.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("frozen-flow shift produced non-finite values".into()));
    }
    Ok(out)
}

const SCREEN_MAGIC: &[u8; 4] = b"PSCN";
const SCREEN_VERSION: u32 = 1;

/// Writes the binary screen dump: 32-byte little-endian header
/// (`PSCN`, version, rows, cols, spacing, 8 reserved zero bytes) followed by
/// row-major `f64` samples.
pub fn write_screen<W: Write>(mut w: W, screen: &PhaseScreen) -> Result<()> {
    let mut header = [0u8; 32];
    header[0..4].copy_from_slice(SCREEN_MAGIC);
    header[4..8].copy_from_slice(&SCREEN_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&(screen.size as u32).to_le_bytes());
    header[12..16].copy_from_slice(&(screen.size as u32).to_le_bytes());
    header[16..24].copy_from_slice(&screen.spacing.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(screen.values.len() * 8);
    for v in &screen.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_screen<R: Read>(mut r: R) -> Result<PhaseScreen> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[0..4] != SCREEN_MAGIC {
        return Err(Error::Format("bad screen magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SCREEN_VERSION {
        return Err(Error::Format(format!("unsupported screen version {version}")));
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    if rows != cols {
        return Err(Error::Format(format!("non-square screen {rows}x{cols}")));
    }
    let spacing = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let mut raw = vec![0u8; rows * cols * 8];
    r.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(PhaseScreen {
        values,
        size: rows,
        spacing,
        origin_offset: [0.0; 2],
    })
}

/// The simulated atmosphere: layer specifications and their initial screens.
#[derive(Debug, Clone)]
pub struct Atmosphere {
    pub layers: Vec<LayerSpec>,
    pub spectrum: VonKarmanSpectrum,
    pub initial: Vec<PhaseScreen>,
}

impl Atmosphere {
    /// Generates one screen per layer from seeds derived from `master_seed`.
    pub fn generate(layers: Vec<LayerSpec>, spectrum: VonKarmanSpectrum, master_seed: u64) -> Result<Self> {
        let initial = layers
            .iter()
            .enumerate()
            .map(|(i, l)| generate_screen(l, &spectrum, rng::derive_seed(master_seed, "screen", i as u64, 0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Atmosphere {
            layers,
            spectrum,
            initial,
        })
    }

    /// All-zero screens with the given layer geometry.
    pub fn calm(layers: Vec<LayerSpec>, spectrum: VonKarmanSpectrum) -> Self {
        let initial = layers
            .iter()
            .map(|l| PhaseScreen::zeros(l.grid_size, l.grid_spacing_m))
            .collect();
        Atmosphere {
            layers,
            spectrum,
            initial,
        }
    }

    /// Screens after `t` seconds of frozen flow, shifted directly from the
    /// initial screens so interpolation never compounds.
    pub fn at_time(&self, t: f64) -> Result<Vec<PhaseScreen>> {
        self.layers
            .iter()
            .zip(&self.initial)
            .map(|(l, s)| advance_frozen_flow(s, l.wind, t))
            .collect()
    }
}
