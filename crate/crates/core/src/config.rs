//! TOML design files.
//!
//! Relative paths inside a design file (`material_table`, `output_dir`) are
//! resolved against the directory containing the file. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{PlaneGrid, Region};
use crate::materials::DispersionTable;
use crate::network::{DetectorSlab, DiffractiveLayer, OpticalStack, Parametrization, PropagationSettings};
use crate::training::{BandSpec, LossSpec, TrainConfig, WeightedBand};

/// Table name that selects the bundled synthetic dispersion data.
pub const SYNTHETIC_TABLE: &str = "builtin:synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_table")]
    pub material_table: String,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub parametrization: Parametrization,
    #[serde(default)]
    pub propagation: PropagationSettings,
    pub loss: LossSpec,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub tunable: Option<TunableConfig>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_table() -> String {
    SYNTHETIC_TABLE.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpeningConfig {
    pub center: [f64; 2],
    pub width: f64,
}

impl OpeningConfig {
    fn region(&self) -> Result<Region> {
        Region::square((self.center[0], self.center[1]), self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// Features per side of every (square) layer.
    pub features: usize,
    #[serde(default = "default_feature_pitch")]
    pub feature_pitch: f64,
    /// Simulation samples per feature along each axis.
    #[serde(default = "default_oversampling")]
    pub oversampling: usize,
    /// Empty margin around the layers on each side, mm.
    #[serde(default)]
    pub guard: f64,
    pub input_aperture: f64,
    /// Axial layer positions measured from the input aperture, mm.
    pub layer_z: Vec<f64>,
    /// Side of each layer's modulating area, mm. Defaults to the whole layer.
    #[serde(default)]
    pub active_width: Vec<f64>,
    pub output_z: f64,
    pub output_apertures: Vec<OpeningConfig>,
    pub detectors: Vec<OpeningConfig>,
    #[serde(default = "yes")]
    pub use_detector_slab: bool,
    #[serde(default)]
    pub detector_slab: DetectorSlab,
    /// Quantized thickness in simulation and evaluation.
    #[serde(default = "yes")]
    pub quantize: bool,
}

fn default_feature_pitch() -> f64 {
    0.5
}

fn default_oversampling() -> usize {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub step: f64,
    pub detector: usize,
    pub sweep_dz: Vec<f64>,
    pub sweep_widths: Vec<f64>,
    pub xz_frequency: f64,
    pub xz_z_start: f64,
    pub xz_z_stop: Option<f64>,
    pub xz_z_step: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            f_min: 0.25,
            f_max: 1.0,
            step: 0.001,
            detector: 0,
            sweep_dz: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            sweep_widths: vec![2.0, 4.0, 6.0, 8.0],
            xz_frequency: 0.35,
            xz_z_start: 0.0,
            xz_z_stop: None,
            xz_z_step: 1.0,
        }
    }
}

impl AnalysisConfig {
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        crate::analysis::scan_frequencies(self.f_min, self.f_max, self.step)
            .map_err(|e| Error::config("analysis", e.to_string()))
    }
}

/// Retraining over several output-plane displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunableConfig {
    pub dz: Vec<f64>,
    #[serde(default)]
    pub detector: usize,
    #[serde(default = "default_pass_width")]
    pub pass_width: f64,
    /// Gaussian target Q. When absent the mean Q of the pre-retraining sweep is used.
    #[serde(default)]
    pub target_q: Option<f64>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_pass_width() -> f64 {
    0.005
}

fn one() -> f64 {
    1.0
}

impl TunableConfig {
    /// Single-band loss template; the center is replaced per anchor.
    pub fn template(&self, target_q: f64) -> LossSpec {
        LossSpec {
            bands: vec![WeightedBand {
                band: BandSpec {
                    center: 0.35,
                    pass_width: self.pass_width,
                    target_q: (self.beta > 0.0).then_some(target_q),
                    detector: self.detector,
                },
                alpha: self.alpha,
                beta: self.beta,
            }],
        }
    }
}

impl DesignConfig {
    pub fn from_str_in(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: DesignConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| {
                text.get(s)
                    .unwrap_or_default()
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim()
                    .to_string()
            });
            Error::config(field, e.message().to_string())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.training.seed = cfg.seed;
        if let Some(t) = cfg.tunable.as_mut() {
            t.training.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_str_in(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("design config serializes")
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.material_table != SYNTHETIC_TABLE && !self.resolve(Path::new(&self.material_table)).is_file() {
            return Err(Error::config(
                "material_table",
                format!(
                    "{} does not exist",
                    self.resolve(Path::new(&self.material_table)).display()
                ),
            ));
        }
        let g = &self.geometry;
        if g.layer_z.is_empty() {
            return Err(Error::config("geometry.layer_z", "at least one layer is required"));
        }
        if !g.active_width.is_empty() && g.active_width.len() != g.layer_z.len() {
            return Err(Error::config(
                "geometry.active_width",
                format!("{} widths for {} layers", g.active_width.len(), g.layer_z.len()),
            ));
        }
        if g.oversampling == 0 {
            return Err(Error::config("geometry.oversampling", "must be at least 1"));
        }
        if !(g.guard >= 0.0) {
            return Err(Error::config("geometry.guard", "must be non-negative"));
        }
        self.parametrization
            .validate()
            .map_err(|e| Error::config("parametrization", e.to_string()))?;
        let stack = self.build_stack()?;
        let detectors = stack.detectors.len();
        self.loss
            .validate(detectors)
            .map_err(|e| Error::config("loss", e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| Error::config("training", e.to_string()))?;
        self.analysis.frequencies()?;
        if self.analysis.detector >= detectors {
            return Err(Error::config("analysis.detector", "out of range"));
        }
        if let Some(t) = &self.tunable {
            if t.dz.is_empty() {
                return Err(Error::config("tunable.dz", "at least one anchor is required"));
            }
            if t.detector >= detectors {
                return Err(Error::config("tunable.detector", "out of range"));
            }
            t.training
                .validate()
                .map_err(|e| Error::config("tunable.training", e.to_string()))?;
        }
        Ok(())
    }

    pub fn material_table(&self) -> Result<DispersionTable> {
        if self.material_table == SYNTHETIC_TABLE {
            Ok(DispersionTable::synthetic())
        } else {
            DispersionTable::load(self.resolve(Path::new(&self.material_table)))
        }
    }

    /// Grid samples per side: the layer plus its guard margin.
    pub fn samples_per_side(&self) -> usize {
        let g = &self.geometry;
        let pitch = g.feature_pitch / g.oversampling as f64;
        let extent = g.features as f64 * g.feature_pitch + 2.0 * g.guard;
        (extent / pitch - 1e-9).ceil() as usize
    }

    pub fn build_stack(&self) -> Result<OpticalStack> {
        let g = &self.geometry;
        let geo = |e: Error| Error::config("geometry", e.to_string());
        let pitch = g.feature_pitch / g.oversampling as f64;
        let n = self.samples_per_side();
        let grid = PlaneGrid::new(n, n, pitch).map_err(geo)?;
        let full = g.features as f64 * g.feature_pitch;
        let layers = g
            .layer_z
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let active = g.active_width.get(i).copied().unwrap_or(full);
                DiffractiveLayer::new(
                    g.features,
                    g.features,
                    g.feature_pitch,
                    self.parametrization,
                    Region::centered(active)?,
                    z,
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(geo)?;
        let openings = |v: &[OpeningConfig]| v.iter().map(OpeningConfig::region).collect::<Result<Vec<_>>>();
        let stack = OpticalStack {
            grid,
            oversampling: g.oversampling,
            input_aperture: Region::centered(g.input_aperture).map_err(geo)?,
            layers,
            output_apertures: openings(&g.output_apertures).map_err(geo)?,
            output_z: g.output_z,
            detector_slab: g.use_detector_slab.then_some(g.detector_slab),
            detectors: openings(&g.detectors).map_err(geo)?,
            propagation: self.propagation,
            quantize: g.quantize,
        };
        stack.validate().map_err(geo)?;
        Ok(stack)
    }

    /// z planes for the xz projection: from `xz_z_start` to `xz_z_stop`
    /// (default: the detector plane) in `xz_z_step` increments.
    pub fn xz_planes(&self, stack: &OpticalStack) -> Result<Vec<f64>> {
        let a = &self.analysis;
        let end = stack.output_z + stack.detector_slab.map_or(0.0, |s| s.thickness);
        let stop = a.xz_z_stop.unwrap_or(end);
        crate::analysis::scan_frequencies(a.xz_z_start, stop, a.xz_z_step)
            .map_err(|e| Error::config("analysis.xz_z_step", e.to_string()))
    }
}
