#![allow(dead_code)]

use rand::Rng as _;
use rustfft::num_complex::Complex64;
use wavetomo::atmosphere::{fft2, freq_index};
use wavetomo::harness::config::{GuideStarConfig, RunConfig, StarKindConfig};
use wavetomo::harness::tomography_operator;
use wavetomo::rng::from_seed;
use wavetomo::tomography::TomographyOperator;
use wavetomo::wfs::SlopeVector;

/// Small instance for dense comparisons: 2 layers of 32² at 0.5 m,
/// two 16×16 LGS and one 2×2 NGS.
pub fn oracle_config() -> RunConfig {
    let mut c = RunConfig::preset("desk-small").unwrap();
    c.atmosphere.layers.truncate(2);
    c.tomography.layers.truncate(2);
    c.tomography.layers[1].altitude_m = 4000.0;
    c.tomography.grid_size = 32;
    c.tomography.grid_spacing_m = 0.5;
    let lgs = |dx: f64| GuideStarConfig {
        kind: StarKindConfig::Lgs,
        direction_arcsec: [dx, 0.0],
        altitude_m: Some(90_000.0),
        flux_photons: 100.0,
        subapertures: 16,
    };
    c.guide_stars = vec![
        lgs(20.0),
        lgs(-20.0),
        GuideStarConfig {
            kind: StarKindConfig::Ngs,
            direction_arcsec: [0.0, 30.0],
            altitude_m: None,
            flux_photons: 500.0,
            subapertures: 2,
        },
    ];
    c.validate().unwrap();
    c
}

/// Same geometry with unit slope variance at 100 photons; keeps the normal
/// matrix condition number in the low thousands.
pub fn moderate_snr_config() -> RunConfig {
    let mut c = oracle_config();
    c.noise.kappa_photon = 100.0;
    c
}

pub fn oracle_operator() -> TomographyOperator {
    tomography_operator(&oracle_config()).unwrap()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = from_seed(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_slopes(op: &TomographyOperator, seed: u64) -> SlopeVector {
    let parts = op
        .sensors()
        .iter()
        .enumerate()
        .map(|(m, s)| random_vec(s.geometry.n_slopes(), seed * 31 + m as u64))
        .collect();
    SlopeVector::from_parts(parts)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

/// `sum |(K^-2 + |k|^2)^(11/12) F f|^2 / n^2`, the H^{11/6}-type norm the
/// diagonal prior is meant to mimic. `k` counts cycles per domain divided by
/// `unit`; with `unit` equal to half the coarsest wavelet band the octave
/// index of the prior and `log2 |k|` line up.
pub fn sobolev_norm_sq(f: &[f64], n: usize, unit: f64, outer: f64) -> f64 {
    let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft2(&mut buf, n, false);
    let k0 = outer.powi(-2);
    let mut acc = 0.0;
    for iy in 0..n {
        for ix in 0..n {
            let kx = freq_index(ix, n) / unit;
            let ky = freq_index(iy, n) / unit;
            let w = (k0 + kx * kx + ky * ky).powf(11.0 / 6.0);
            acc += w * buf[iy * n + ix].norm_sqr();
        }
    }
    acc / (n * n) as f64
}

/// Random field with white spectrum up to `kmax` cycles per cell and
/// nothing above it.
pub fn band_limited_field(n: usize, kmax: f64, seed: u64) -> Vec<f64> {
    let mut rng = from_seed(seed);
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    for iy in 0..n {
        for ix in 0..n {
            let kx = freq_index(ix, n) / n as f64;
            let ky = freq_index(iy, n) / n as f64;
            let k = (kx * kx + ky * ky).sqrt();
            if k > 0.0 && k <= kmax {
                buf[iy * n + ix] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
    }
    fft2(&mut buf, n, true);
    buf.iter().map(|z| z.re).collect()
}

/// Measurement drawn from the model itself: coefficients from the prior
/// (variance `1/w`), slopes `A c` plus sampled noise.
pub fn prior_sample_slopes(op: &TomographyOperator, cfg: &RunConfig, seed: u64) -> (Vec<f64>, SlopeVector) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = from_seed(seed);
    let c: Vec<f64> = op
        .prior()
        .weights
        .iter()
        .map(|w| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / w.sqrt()
        })
        .collect();
    let mut s = op.forward(&c).unwrap();
    let geoms = op.geometries();
    let model = wavetomo::harness::noise_model(cfg, &geoms, cfg.noise.true_tau).unwrap();
    let noise = wavetomo::wfs::sample_noise(&model, &geoms, seed ^ 0x5eed).unwrap();
    s.add_assign(&noise).unwrap();
    (c, s)
}

/// `(|k| in cycles/m, |F phi|^2 / (n^2 dk)^2)` for every nonzero frequency, so
/// that the expected value is the screen's PSD `c m(k)`.
pub fn periodogram(values: &[f64], n: usize, spacing: f64) -> Vec<(f64, f64)> {
    let mut buf: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft2(&mut buf, n, false);
    let dk = 1.0 / (n as f64 * spacing);
    let scale = 1.0 / (n as f64 * n as f64 * dk * dk);
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let k = (freq_index(ix, n).powi(2) + freq_index(iy, n).powi(2)).sqrt() * dk;
            if k > 0.0 {
                out.push((k, buf[iy * n + ix].norm_sqr() * scale / (n * n) as f64));
            }
        }
    }
    out
}

/// Least-squares slope of `log P` against `log k` over `k_lo <= k <= k_hi`.
pub fn loglog_slope(points: &[(f64, f64)], k_lo: f64, k_hi: f64) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(k, p)| *k >= k_lo && *k <= k_hi && *p > 0.0)
        .map(|(k, p)| (k.ln(), p.ln()))
        .collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    cov / var
}
