//! Run configuration: TOML schema, presets, dotted overrides and validation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub telescope: TelescopeSection,
    pub atmosphere: AtmosphereSection,
    pub guide_stars: Vec<GuideStarConfig>,
    pub noise: NoiseSection,
    pub tomography: TomographySection,
    pub fitting: FittingSection,
    pub dms: DmSection,
    pub evaluation: EvaluationSection,
    pub control: ControlSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Fraction of leading steps excluded from long-exposure averages.
    pub burn_in_fraction: f64,
    /// Write a residual trace of the first reconstruction.
    #[serde(default)]
    pub solver_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelescopeSection {
    pub diameter_m: f64,
    /// Central obstruction as a fraction of the diameter.
    pub obstruction: f64,
    /// Minimum illuminated fraction of an active subaperture.
    pub subaperture_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtmosphereSection {
    /// Fried parameter at `r0_wavelength_m`.
    pub r0_m: f64,
    pub r0_wavelength_m: f64,
    pub outer_scale_m: f64,
    pub screen_size: usize,
    pub screen_spacing_m: f64,
    pub layers: Vec<AtmosphereLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtmosphereLayer {
    pub altitude_m: f64,
    /// Share of the total turbulence strength (normalised over layers).
    pub fraction: f64,
    pub wind: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StarKindConfig {
    Ngs,
    Lgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideStarConfig {
    pub kind: StarKindConfig,
    pub direction_arcsec: [f64; 2],
    /// Sodium-layer altitude (LGS only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_m: Option<f64>,
    /// Photons per subaperture per frame.
    pub flux_photons: f64,
    pub subapertures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// `false` runs noise-free sensors (the reconstructor still weights
    /// with the modelled covariance).
    pub enabled: bool,
    pub readout_e: f64,
    pub kappa_photon: f64,
    pub kappa_readout: f64,
    /// Elongation weight used by the reconstructor.
    pub tau: f64,
    /// Elongation weight of the simulated noise.
    pub true_tau: f64,
    /// Elongation at the pupil edge, in units of `spot_fwhm`'s unit.
    pub elongation_max: f64,
    pub spot_fwhm: f64,
    pub launch_m: [f64; 2],
    /// RMS of the common LGS slope jitter per frame (same units as slopes).
    pub lgs_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverConfig {
    Cg,
    Pcg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographySection {
    pub alpha: f64,
    pub solver: SolverConfig,
    pub iterations: usize,
    pub tol: f64,
    pub warm_restart: bool,
    pub wavelet_order: usize,
    pub coarsest_band: usize,
    /// Wavelength at which phase is expressed internally.
    pub reference_wavelength_m: f64,
    pub grid_size: usize,
    pub grid_spacing_m: f64,
    pub layers: Vec<ReconLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconLayer {
    pub altitude_m: f64,
    /// Relative strength `c_rho` in the prior (normalised over layers).
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FittingModeConfig {
    Fit,
    LayersAtDm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittingSection {
    pub mode: FittingModeConfig,
    pub iterations: usize,
    /// Per-direction weights over the evaluation grid; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmSection {
    pub altitudes_m: Vec<f64>,
    pub grid_size: usize,
    pub spacing_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub grid_points: usize,
    pub field_side_arcsec: f64,
    pub wavelength_m: f64,
    pub pupil_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub gain: f64,
}

pub const PRESETS: &[&str] = &["desk-default", "desk-accelerated", "desk-small"];

/// Ground-heavy nine-layer profile (altitude m, fraction, speed m/s, direction deg).
const PROFILE: [(f64, f64, f64, f64); 9] = [
    (47.0, 0.522, 15.0, 0.0),
    (140.0, 0.026, 13.0, 40.0),
    (281.0, 0.044, 13.0, 80.0),
    (562.0, 0.116, 9.0, 120.0),
    (1125.0, 0.098, 9.0, 160.0),
    (2250.0, 0.029, 15.0, 200.0),
    (4500.0, 0.059, 25.0, 240.0),
    (9000.0, 0.043, 40.0, 280.0),
    (18000.0, 0.067, 21.0, 320.0),
];

const DM_ALTITUDES: [f64; 3] = [0.0, 4000.0, 12700.0];

impl RunConfig {
    /// Named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-default" => Ok(desk_default()),
            "desk-accelerated" => {
                let mut c = desk_default();
                c.tomography.solver = SolverConfig::Pcg;
                c.tomography.iterations = 4;
                c.tomography.layers = DM_ALTITUDES
                    .iter()
                    .map(|&h| ReconLayer {
                        altitude_m: h,
                        weight: PROFILE
                            .iter()
                            .filter(|p| nearest_dm(p.0) == h)
                            .map(|p| p.1)
                            .sum(),
                    })
                    .collect();
                c.fitting.mode = FittingModeConfig::LayersAtDm;
                Ok(c)
            }
            "desk-small" => {
                // quick smoke configuration: fewer, smaller everything
                let mut c = desk_default();
                c.run.steps = 20;
                c.atmosphere.layers.truncate(3);
                c.tomography.layers.truncate(3);
                c.tomography.grid_size = 32;
                c.tomography.grid_spacing_m = 1.0;
                c.dms.grid_size = 32;
                c.dms.spacing_m = 1.0;
                c.evaluation.grid_points = 3;
                c.evaluation.pupil_samples = 17;
                c.evaluation.field_side_arcsec = 60.0;
                for g in &mut c.guide_stars {
                    if g.kind == StarKindConfig::Lgs {
                        g.subapertures = 8;
                    }
                }
                Ok(c)
            }
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (available: {})", PRESETS.join(", ")),
            )),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(toml_path(&e), e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// `preset`, overlaid with `file_text` (tables merge key by key) and then
    /// with `path=value` overrides, validated.
    pub fn compose(preset: &str, file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(preset)?;
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(text) = file_text {
            let file: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::config(toml_path(&e), e.message().to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let text = toml::to_string(&value).map_err(|e| Error::Format(e.to_string()))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every rule that can be checked without building operators.
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, field: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be > 0, got {v}")))
            }
        };
        let pow2 = |n: usize, field: &str| -> Result<()> {
            if n >= 8 && n.is_power_of_two() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a power of two >= 8, got {n}")))
            }
        };
        if self.run.steps == 0 {
            return Err(Error::config("run.steps", "must be >= 1"));
        }
        pos(self.run.dt, "run.dt")?;
        if !(0.0..1.0).contains(&self.run.burn_in_fraction) {
            return Err(Error::config("run.burn_in_fraction", "must lie in [0, 1)"));
        }
        pos(self.telescope.diameter_m, "telescope.diameter_m")?;
        if !(0.0..1.0).contains(&self.telescope.obstruction) {
            return Err(Error::config("telescope.obstruction", "must lie in [0, 1)"));
        }
        if !(self.telescope.subaperture_threshold > 0.0 && self.telescope.subaperture_threshold <= 1.0) {
            return Err(Error::config("telescope.subaperture_threshold", "must lie in (0, 1]"));
        }

        let a = &self.atmosphere;
        pos(a.r0_m, "atmosphere.r0_m")?;
        pos(a.r0_wavelength_m, "atmosphere.r0_wavelength_m")?;
        pos(a.outer_scale_m, "atmosphere.outer_scale_m")?;
        pow2(a.screen_size, "atmosphere.screen_size")?;
        pos(a.screen_spacing_m, "atmosphere.screen_spacing_m")?;
        if a.layers.is_empty() {
            return Err(Error::config("atmosphere.layers", "need at least one layer"));
        }
        for (i, l) in a.layers.iter().enumerate() {
            if !(l.altitude_m >= 0.0 && l.altitude_m.is_finite()) {
                return Err(Error::config(format!("atmosphere.layers[{i}].altitude_m"), "must be >= 0"));
            }
            pos(l.fraction, &format!("atmosphere.layers[{i}].fraction"))?;
            if i > 0 && l.altitude_m <= a.layers[i - 1].altitude_m {
                return Err(Error::config(
                    format!("atmosphere.layers[{i}].altitude_m"),
                    "altitudes must be strictly increasing",
                ));
            }
            if !l.wind.iter().all(|w| w.is_finite()) {
                return Err(Error::config(format!("atmosphere.layers[{i}].wind"), "must be finite"));
            }
        }

        if self.guide_stars.is_empty() {
            return Err(Error::config("guide_stars", "need at least one guide star"));
        }
        for (i, g) in self.guide_stars.iter().enumerate() {
            let f = |k: &str| format!("guide_stars[{i}].{k}");
            pos(g.flux_photons, &f("flux_photons"))?;
            if g.subapertures == 0 {
                return Err(Error::config(f("subapertures"), "must be >= 1"));
            }
            match (g.kind, g.altitude_m) {
                (StarKindConfig::Lgs, None) => return Err(Error::config(f("altitude_m"), "LGS needs an altitude")),
                (StarKindConfig::Lgs, Some(h)) => {
                    pos(h, &f("altitude_m"))?;
                    let top = a.layers.last().unwrap().altitude_m;
                    if h <= top {
                        return Err(Error::config(f("altitude_m"), format!("must lie above the top layer ({top} m)")));
                    }
                }
                (StarKindConfig::Ngs, Some(_)) => {
                    return Err(Error::config(f("altitude_m"), "natural guide stars have no altitude"))
                }
                (StarKindConfig::Ngs, None) => {}
            }
        }

        let n = &self.noise;
        if n.readout_e < 0.0 || !n.readout_e.is_finite() {
            return Err(Error::config("noise.readout_e", "must be >= 0"));
        }
        pos(n.kappa_photon, "noise.kappa_photon")?;
        if n.kappa_readout < 0.0 {
            return Err(Error::config("noise.kappa_readout", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&n.tau) {
            return Err(Error::config("noise.tau", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&n.true_tau) {
            return Err(Error::config("noise.true_tau", "must lie in [0, 1]"));
        }
        if n.elongation_max < 0.0 {
            return Err(Error::config("noise.elongation_max", "must be >= 0"));
        }
        pos(n.spot_fwhm, "noise.spot_fwhm")?;
        if n.lgs_jitter < 0.0 {
            return Err(Error::config("noise.lgs_jitter", "must be >= 0"));
        }

        let t = &self.tomography;
        pos(t.alpha, "tomography.alpha")?;
        if t.iterations == 0 {
            return Err(Error::config("tomography.iterations", "must be >= 1"));
        }
        if !(t.tol >= 0.0) {
            return Err(Error::config("tomography.tol", "must be >= 0"));
        }
        if !(1..=4).contains(&t.wavelet_order) {
            return Err(Error::config("tomography.wavelet_order", "Daubechies order must be 1..=4"));
        }
        if !t.coarsest_band.is_power_of_two() {
            return Err(Error::config("tomography.coarsest_band", "must be a power of two"));
        }
        pos(t.reference_wavelength_m, "tomography.reference_wavelength_m")?;
        pow2(t.grid_size, "tomography.grid_size")?;
        pos(t.grid_spacing_m, "tomography.grid_spacing_m")?;
        if t.layers.is_empty() {
            return Err(Error::config("tomography.layers", "need at least one layer"));
        }
        for (i, l) in t.layers.iter().enumerate() {
            pos(l.weight, &format!("tomography.layers[{i}].weight"))?;
            if i > 0 && l.altitude_m <= t.layers[i - 1].altitude_m {
                return Err(Error::config(
                    format!("tomography.layers[{i}].altitude_m"),
                    "altitudes must be strictly increasing",
                ));
            }
        }

        if self.fitting.iterations == 0 {
            return Err(Error::config("fitting.iterations", "must be >= 1"));
        }
        let n_dirs = self.evaluation.grid_points * self.evaluation.grid_points;
        if let Some(w) = &self.fitting.weights {
            if w.len() != n_dirs {
                return Err(Error::config("fitting.weights", format!("need {n_dirs} weights, got {}", w.len())));
            }
        }
        if self.dms.altitudes_m.is_empty() {
            return Err(Error::config("dms.altitudes_m", "need at least one mirror"));
        }
        pow2(self.dms.grid_size, "dms.grid_size")?;
        pos(self.dms.spacing_m, "dms.spacing_m")?;
        if self.fitting.mode == FittingModeConfig::LayersAtDm {
            let same = t.layers.len() == self.dms.altitudes_m.len()
                && t.layers.iter().zip(&self.dms.altitudes_m).all(|(l, h)| (l.altitude_m - h).abs() < 1e-6);
            if !same {
                return Err(Error::config(
                    "fitting.mode",
                    "layers-at-dm needs reconstruction layers exactly at dms.altitudes_m",
                ));
            }
        }

        let e = &self.evaluation;
        if e.grid_points == 0 {
            return Err(Error::config("evaluation.grid_points", "must be >= 1"));
        }
        if !(e.field_side_arcsec >= 0.0) {
            return Err(Error::config("evaluation.field_side_arcsec", "must be >= 0"));
        }
        pos(e.wavelength_m, "evaluation.wavelength_m")?;
        if e.pupil_samples < 2 {
            return Err(Error::config("evaluation.pupil_samples", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.control.gain) {
            return Err(Error::config("control.gain", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn nearest_dm(h: f64) -> f64 {
    let mut best = DM_ALTITUDES[0];
    for &d in &DM_ALTITUDES {
        if (h - d).abs() < (h - best).abs() {
            best = d;
        }
    }
    best
}

fn desk_default() -> RunConfig {
    let lgs_radius = 60.0;
    let mut guide_stars: Vec<GuideStarConfig> = (0..4)
        .map(|k| {
            let ang = k as f64 * std::f64::consts::FRAC_PI_2;
            GuideStarConfig {
                kind: StarKindConfig::Lgs,
                direction_arcsec: [round6(lgs_radius * ang.cos()), round6(lgs_radius * ang.sin())],
                altitude_m: Some(90_000.0),
                flux_photons: 100.0,
                subapertures: 16,
            }
        })
        .collect();
    let ngs_radius = 80.0;
    for ang in [45.0f64, 225.0] {
        let r = ang.to_radians();
        guide_stars.push(GuideStarConfig {
            kind: StarKindConfig::Ngs,
            direction_arcsec: [round6(ngs_radius * r.cos()), round6(ngs_radius * r.sin())],
            altitude_m: None,
            flux_photons: 500.0,
            subapertures: 2,
        });
    }
    RunConfig {
        run: RunSection {
            steps: 500,
            dt: 1.0 / 500.0,
            seed: 1,
            burn_in_fraction: 0.2,
            solver_trace: false,
        },
        telescope: TelescopeSection {
            diameter_m: 8.0,
            obstruction: 0.3,
            subaperture_threshold: 0.5,
        },
        atmosphere: AtmosphereSection {
            r0_m: 0.15,
            r0_wavelength_m: 500e-9,
            outer_scale_m: 25.0,
            screen_size: 128,
            screen_spacing_m: 0.25,
            layers: PROFILE
                .iter()
                .map(|&(h, f, v, deg)| {
                    let r = deg.to_radians();
                    AtmosphereLayer {
                        altitude_m: h,
                        fraction: f,
                        wind: [round6(v * r.cos()), round6(v * r.sin())],
                    }
                })
                .collect(),
        },
        guide_stars,
        noise: NoiseSection {
            enabled: true,
            readout_e: 3.0,
            kappa_photon: 0.084,
            kappa_readout: 2.3333e-3,
            tau: 0.8,
            true_tau: 1.0,
            elongation_max: 2.0,
            spot_fwhm: 1.0,
            launch_m: [0.0, 0.0],
            lgs_jitter: 0.0,
        },
        tomography: TomographySection {
            alpha: 1.0,
            solver: SolverConfig::Cg,
            iterations: 10,
            tol: 0.0,
            warm_restart: true,
            wavelet_order: 3,
            coarsest_band: 8,
            reference_wavelength_m: 2e-4,
            grid_size: 64,
            grid_spacing_m: 0.5,
            layers: PROFILE
                .iter()
                .map(|&(h, f, _, _)| ReconLayer {
                    altitude_m: h,
                    weight: f,
                })
                .collect(),
        },
        fitting: FittingSection {
            mode: FittingModeConfig::Fit,
            iterations: 4,
            weights: None,
        },
        dms: DmSection {
            altitudes_m: DM_ALTITUDES.to_vec(),
            grid_size: 64,
            spacing_m: 0.5,
        },
        evaluation: EvaluationSection {
            grid_points: 5,
            field_side_arcsec: 120.0,
            wavelength_m: 2.2e-6,
            pupil_samples: 33,
        },
        control: ControlSection { gain: 0.4 },
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn toml_path(e: &toml::de::Error) -> String {
    // toml reports the offending key in its message; the span is all we get
    // structurally, so fall back to a generic field name.
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "config".into()
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b[2].c=value`; the value is parsed as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like path=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let (key, index) = match seg.split_once('[') {
            Some((k, rest)) => {
                let idx: usize = rest
                    .trim_end_matches(']')
                    .parse()
                    .map_err(|_| Error::config(path, "bad array index"))?;
                (k, Some(idx))
            }
            None => (*seg, None),
        };
        let last = i + 1 == segments.len();
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{key}` is not inside a table")))?;
        if !table.contains_key(key) {
            if last && index.is_none() {
                table.insert(key.to_string(), value);
                return Ok(());
            }
            return Err(Error::config(path, format!("unknown key `{key}`")));
        }
        let mut slot = table.get_mut(key).unwrap();
        if let Some(idx) = index {
            let arr = slot
                .as_array_mut()
                .ok_or_else(|| Error::config(path, format!("`{key}` is not an array")))?;
            let len = arr.len();
            slot = arr
                .get_mut(idx)
                .ok_or_else(|| Error::config(path, format!("index {idx} out of range ({len} entries)")))?;
        }
        if last {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Ok(())
}
