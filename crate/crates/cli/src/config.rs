//! TOML experiment description.
//!
//! Every length is a string with a unit: `"250 nm"`, `"0.5 um"` (or `µm`),
//! `"15 lambda"` (or `λ`). Internally everything is converted to wavelengths.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::Deserialize;

use ptyparam::fit::FitOptions;
use ptyparam::forward_dipole::{DarkFieldSetup, Dipole, DipoleScene, Optics, TiltSet};
use ptyparam::forward_rect::{Probe, PtychoSetup, RectParams, ScanPlan};
use ptyparam::recon::{ReconConfig, ViewOrder};
use ptyparam::GridSpec;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unit {
    Nanometre,
    Micrometre,
    Wavelength,
}

/// A length as written in the config file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Length {
    pub value: f64,
    pub unit: Unit,
}

impl Length {
    /// Value in wavelengths, given the wavelength in nanometres.
    pub fn in_wavelengths(&self, wavelength_nm: f64) -> f64 {
        match self.unit {
            Unit::Nanometre => self.value / wavelength_nm,
            Unit::Micrometre => self.value * 1e3 / wavelength_nm,
            Unit::Wavelength => self.value,
        }
    }

    pub fn in_nm(&self, wavelength_nm: f64) -> f64 {
        self.in_wavelengths(wavelength_nm) * wavelength_nm
    }
}

impl std::str::FromStr for Length {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        // longest numeric prefix, so exponents like "1.88e7 nm" survive
        let (value, unit) = s
            .char_indices()
            .map(|(i, _)| i)
            .chain([s.len()])
            .rev()
            .find_map(|i| s[..i].trim().parse::<f64>().ok().map(|v| (v, &s[i..])))
            .ok_or_else(|| format!("cannot parse a number in length '{s}'"))?;
        if unit.trim().is_empty() {
            return Err(format!("length '{s}' has no unit (use nm, um or lambda)"));
        }
        if !value.is_finite() {
            return Err(format!("length '{s}' is not finite"));
        }
        let unit = match unit.trim() {
            "nm" => Unit::Nanometre,
            "um" | "µm" | "μm" => Unit::Micrometre,
            "lambda" | "λ" | "wl" => Unit::Wavelength,
            other => return Err(format!("unknown length unit '{other}' in '{s}' (use nm, um or lambda)")),
        };
        Ok(Self { value, unit })
    }
}

impl fmt::Display for Length {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let u = match self.unit {
            Unit::Nanometre => "nm",
            Unit::Micrometre => "um",
            Unit::Wavelength => "lambda",
        };
        write!(f, "{} {u}", self.value)
    }
}

impl<'de> Deserialize<'de> for Length {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Length;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a length string with a unit, e.g. \"250 nm\"")
            }

            fn visit_str<E: de::Error>(self, s: &str) -> Result<Length, E> {
                s.parse().map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Length, E> {
                Err(E::custom(format!("length {v} has no unit (write e.g. \"{v} nm\")")))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Length, E> {
                Err(E::custom(format!("length {v} has no unit (write e.g. \"{v} nm\")")))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Application {
    DipoleDarkfield,
    RectPtycho,
}

/// Raw file layout; the geometry and scene tables are decoded per application.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    application: Application,
    output: Option<PathBuf>,
    geometry: toml::Table,
    scene: toml::Table,
    #[serde(default)]
    recon: ReconBlock,
    #[serde(default)]
    fit: FitBlock,
    #[serde(default)]
    noise: NoiseBlock,
    #[serde(default)]
    sweep: SweepBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleGeometry {
    pub wavelength: Length,
    pub na: f64,
    pub polar_angle_deg: f64,
    pub tilts: usize,
    pub detector_pixels: usize,
    /// Detector pixel pitch; divided by the magnification to refer it to the object.
    pub pixel_size: Length,
    #[serde(default = "one")]
    pub magnification: f64,
    pub spectrum_samples: usize,
    pub z: Length,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectGeometry {
    pub wavelength: Length,
    pub object_samples: usize,
    pub spacing: Length,
    pub probe_samples: usize,
    /// Intensity FWHM of the Gaussian probe.
    pub probe_fwhm: Length,
    pub probe_radius: Length,
    pub scan_positions: usize,
    pub scan_pitch: Length,
    /// Recorded in the manifest only; the far field is sampled on the FFT grid.
    pub detector_pixel: Option<Length>,
    pub distance: Option<Length>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleEntry {
    /// Polarisability in wavelength-cubed units.
    pub alpha: f64,
    pub x: Length,
    pub y: Length,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleSceneBlock {
    pub dipoles: Vec<DipoleEntry>,
    /// Dipoles to retrieve; defaults to the number in the truth.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectEntry {
    pub a: Length,
    pub b: Length,
    pub x: Length,
    pub y: Length,
    pub amp: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSceneBlock {
    pub truth: RectEntry,
    /// Starting point of the fit; derived from the reconstruction when absent.
    pub guess: Option<RectEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderChoice {
    Raster,
    Shuffled,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconBlock {
    pub max_iters: usize,
    pub beta: f64,
    pub tol: f64,
    pub order: OrderChoice,
    pub order_seed: u64,
}

impl Default for ReconBlock {
    fn default() -> Self {
        let d = ReconConfig::default();
        Self {
            max_iters: d.max_iters,
            beta: d.beta,
            tol: d.tol,
            order: OrderChoice::Raster,
            order_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBlock {
    pub max_iters: usize,
    pub ftol: f64,
    pub gtol: f64,
}

impl Default for FitBlock {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            max_iters: d.max_iters,
            ftol: d.ftol,
            gtol: d.gtol,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBlock {
    /// Photon numbers; the first one sets the flux of `simulate`.
    pub pn: Vec<f64>,
    /// Add Poisson noise to simulated measurements.
    pub poisson: bool,
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for NoiseBlock {
    fn default() -> Self {
        Self {
            pn: vec![1e6],
            poisson: false,
            trials: 200,
            base_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    /// Multipliers of the second dipole's polarisability.
    pub alpha2_factors: Vec<f64>,
    /// Rectangle heights.
    pub b1: Vec<Length>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub enum Scene {
    Dipole {
        geometry: DipoleGeometry,
        scene: DipoleSceneBlock,
    },
    Rect {
        geometry: RectGeometry,
        scene: RectSceneBlock,
    },
}

/// Validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub output: Option<PathBuf>,
    pub scene: Scene,
    pub recon: ReconBlock,
    pub fit: FitBlock,
    pub noise: NoiseBlock,
    pub sweep: SweepBlock,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let scene = match raw.application {
            Application::DipoleDarkfield => Scene::Dipole {
                geometry: decode(raw.geometry, "geometry")?,
                scene: decode(raw.scene, "scene")?,
            },
            Application::RectPtycho => Scene::Rect {
                geometry: decode(raw.geometry, "geometry")?,
                scene: decode(raw.scene, "scene")?,
            },
        };
        let cfg = Self {
            output: raw.output,
            scene,
            recon: raw.recon,
            fit: raw.fit,
            noise: raw.noise,
            sweep: raw.sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.noise.pn.is_empty() || self.noise.pn.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(config_err("noise.pn must be a non-empty list of positive photon numbers"));
        }
        if self.noise.trials == 0 {
            return Err(config_err("noise.trials must be at least 1"));
        }
        if self.sweep.alpha2_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(config_err("sweep.alpha2_factors must be positive"));
        }
        match &self.scene {
            Scene::Dipole { geometry: g, scene: s } => {
                if !self.sweep.b1.is_empty() {
                    return Err(config_err("sweep.b1 applies to rect-ptycho only"));
                }
                if !self.sweep.alpha2_factors.is_empty() && s.dipoles.len() < 2 {
                    return Err(config_err("sweep.alpha2_factors needs at least two dipoles"));
                }
                if s.count.is_some_and(|c| c == 0 || c > s.dipoles.len().max(1)) {
                    return Err(config_err("scene.count must be between 1 and the number of dipoles"));
                }
                if !(g.wavelength.in_nm(1.0) > 0.0) || g.wavelength.unit == Unit::Wavelength {
                    return Err(config_err("geometry.wavelength must be a positive length in nm or um"));
                }
                if !(g.na > 0.0 && g.na < 1.0) {
                    return Err(config_err("geometry.na must lie in (0, 1)"));
                }
                if g.tilts == 0 || g.detector_pixels == 0 || g.spectrum_samples < g.detector_pixels {
                    return Err(config_err(
                        "geometry needs tilts > 0, detector_pixels > 0 and spectrum_samples >= detector_pixels",
                    ));
                }
                if !(g.magnification > 0.0) {
                    return Err(config_err("geometry.magnification must be positive"));
                }
            }
            Scene::Rect { geometry: g, .. } => {
                if !self.sweep.alpha2_factors.is_empty() {
                    return Err(config_err("sweep.alpha2_factors applies to dipole-darkfield only"));
                }
                if !(g.wavelength.in_nm(1.0) > 0.0) || g.wavelength.unit == Unit::Wavelength {
                    return Err(config_err("geometry.wavelength must be a positive length in nm or um"));
                }
            }
        }
        Ok(())
    }

    pub fn wavelength_nm(&self) -> f64 {
        match &self.scene {
            Scene::Dipole { geometry, .. } => geometry.wavelength.in_nm(1.0),
            Scene::Rect { geometry, .. } => geometry.wavelength.in_nm(1.0),
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            max_iters: self.recon.max_iters,
            beta: self.recon.beta,
            tol: self.recon.tol,
            order: match self.recon.order {
                OrderChoice::Raster => ViewOrder::Raster,
                OrderChoice::Shuffled => ViewOrder::Shuffled(self.recon.order_seed),
            },
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.fit.max_iters,
            ftol: self.fit.ftol,
            gtol: self.fit.gtol,
            ..FitOptions::default()
        }
    }
}

fn decode<T: serde::de::DeserializeOwned>(t: toml::Table, block: &str) -> Result<T, CliError> {
    toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("[{block}] {}", e.message())))
}

impl DipoleGeometry {
    pub fn setup(&self) -> Result<DarkFieldSetup, CliError> {
        let wl = self.wavelength.in_nm(1.0);
        let k = 2.0 * PI;
        let pixel = self.pixel_size.in_wavelengths(wl) / self.magnification;
        if !(pixel > 0.0) {
            return Err(config_err("geometry.pixel_size must be positive"));
        }
        let dk = 2.0 * PI / (self.detector_pixels as f64 * pixel);
        let spectrum_grid = GridSpec::square(self.spectrum_samples, dk).map_err(|e| config_err(e.to_string()))?;
        let setup = DarkFieldSetup {
            optics: Optics { na: self.na, k },
            tilts: TiltSet {
                polar: self.polar_angle_deg.to_radians(),
                count: self.tilts,
                k,
            }
            .vectors(),
            spectrum_grid,
            detector: self.detector_pixels,
        };
        setup.views(0.0, 1.0).map_err(|e| config_err(e.to_string()))?;
        Ok(setup)
    }

    pub fn z(&self) -> f64 {
        self.z.in_wavelengths(self.wavelength.in_nm(1.0))
    }
}

impl DipoleSceneBlock {
    pub fn scene(&self, wavelength_nm: f64, z: f64) -> Result<DipoleScene, CliError> {
        let dipoles = self
            .dipoles
            .iter()
            .map(|d| Dipole {
                alpha: d.alpha,
                x: d.x.in_wavelengths(wavelength_nm),
                y: d.y.in_wavelengths(wavelength_nm),
            })
            .collect();
        DipoleScene::new(dipoles, 1.0, z).map_err(|e| config_err(e.to_string()))
    }

    pub fn count(&self) -> usize {
        self.count.unwrap_or(self.dipoles.len())
    }
}

impl RectGeometry {
    pub fn setup(&self) -> Result<PtychoSetup, CliError> {
        let wl = self.wavelength.in_nm(1.0);
        let dx = self.spacing.in_wavelengths(wl);
        if !(dx > 0.0) {
            return Err(config_err("geometry.spacing must be positive"));
        }
        let pitch = self.scan_pitch.in_wavelengths(wl) / dx;
        if (pitch - pitch.round()).abs() > 1e-9 || pitch < 0.0 {
            return Err(config_err(format!(
                "geometry.scan_pitch must be a whole number of object samples, got {pitch} samples"
            )));
        }
        let r0 = self.probe_radius.in_wavelengths(wl);
        let grid = GridSpec::square(self.object_samples, dx).map_err(|e| config_err(e.to_string()))?;
        let probe = Probe::gaussian(self.probe_samples, dx, self.probe_fwhm.in_wavelengths(wl), r0)
            .map_err(|e| config_err(e.to_string()))?;
        let plan = ScanPlan::raster(self.scan_positions, pitch.round() as usize, r0 / dx)
            .map_err(|e| config_err(e.to_string()))?;
        PtychoSetup::new(grid, probe, plan).map_err(|e| config_err(e.to_string()))
    }
}

impl RectEntry {
    pub fn params(&self, wavelength_nm: f64) -> Result<RectParams, CliError> {
        RectParams::new(
            self.a.in_wavelengths(wavelength_nm),
            self.b.in_wavelengths(wavelength_nm),
            self.x.in_wavelengths(wavelength_nm),
            self.y.in_wavelengths(wavelength_nm),
            self.amp,
            self.phase,
        )
        .map_err(|e| config_err(e.to_string()))
    }
}
