use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{McmcSettings, PriorSettings};
use crate::error::{Error, Result};
use crate::galerkin::{DEFAULT_ALPHA_L, DEFAULT_ALPHA_Q};
use crate::ngp::TrainSettings;
use crate::sensors::DEFAULT_ACTIVITY_THRESHOLD;
use crate::swe_sim::SimConfig;

/// Full pipeline configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every random stream in the run derives from it.
    #[serde(default)]
    pub seed: u64,
    /// Output directory; relative artifact paths resolve against it.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub paths: ArtifactPaths,
    /// Reference simulation.
    pub sim: SimConfig,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub pod: PodSettings,
    #[serde(default)]
    pub rom: RomSettings,
    /// Training settings; `dt` is taken from the simulation cadence.
    #[serde(default)]
    pub ngp: TrainSettings,
    #[serde(default)]
    pub prior: PriorSettings,
    /// Sampler schedule; `seed` is derived from the global seed.
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default)]
    pub forecast: ForecastSettings,
}

fn default_out() -> PathBuf {
    PathBuf::from("randprom-out")
}

/// Artifact file names, relative to the output directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub provenance: PathBuf,
    pub reference: PathBuf,
    pub sensors: PathBuf,
    pub members: PathBuf,
    pub series: PathBuf,
    pub basis: PathBuf,
    pub pod_report: PathBuf,
    pub operators: PathBuf,
    pub ngp: PathBuf,
    pub ngp_report: PathBuf,
    pub posterior: PathBuf,
    pub posterior_summary: PathBuf,
    pub calibration_report: PathBuf,
    pub forecast: PathBuf,
    pub plots: PathBuf,
    pub report: PathBuf,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        ArtifactPaths {
            provenance: "provenance.json".into(),
            reference: "reference.snap".into(),
            sensors: "sensors.csv".into(),
            members: "ensemble.csv".into(),
            series: "series".into(),
            basis: "basis.bin".into(),
            pod_report: "pod.json".into(),
            operators: "gprom.ops".into(),
            ngp: "ngp.bin".into(),
            ngp_report: "ngp.json".into(),
            posterior: "posterior.bin".into(),
            posterior_summary: "posterior_summary.csv".into(),
            calibration_report: "calibration.json".into(),
            forecast: "forecast".into(),
            plots: "plots".into(),
            report: "report.md".into(),
        }
    }
}

/// Perturbation ensemble and sensor network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    /// Epicentre longitude offsets (degrees).
    pub lon_offsets: Vec<f64>,
    /// Epicentre latitude offsets (degrees).
    pub lat_offsets: Vec<f64>,
    /// Magnitude offsets.
    pub mag_offsets: Vec<f64>,
    /// Members kept for calibration, alternating lowest and highest total activity.
    pub extreme: usize,
    /// Sensors drawn from the reference amplitude map.
    pub sampled_sensors: usize,
    /// Most active sampled sensors kept.
    pub kept_sensors: usize,
    /// Kept sensors held out for testing.
    pub test_sensors: usize,
    pub activity_threshold: f64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        EnsembleSettings {
            lon_offsets: vec![-1.0, 0.0, 1.0],
            lat_offsets: vec![-1.0, 0.0, 1.0],
            mag_offsets: vec![-1.0, 0.0, 1.0],
            extreme: 15,
            sampled_sensors: 30,
            kept_sensors: 20,
            test_sensors: 4,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
        }
    }
}

/// POD truncation: an explicit rank, a RIC target, or ten percent of the modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodSettings {
    pub rank: Option<usize>,
    pub ric: Option<f64>,
    /// Reconstruction error the report searches the smallest rank for.
    pub error_target: f64,
}

impl Default for PodSettings {
    fn default() -> Self {
        PodSettings {
            rank: None,
            ric: None,
            error_target: 0.08,
        }
    }
}

/// Prescale factors of the Galerkin operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomSettings {
    pub alpha_l: f64,
    pub alpha_q: f64,
}

impl Default for RomSettings {
    fn default() -> Self {
        RomSettings {
            alpha_l: DEFAULT_ALPHA_L,
            alpha_q: DEFAULT_ALPHA_Q,
        }
    }
}

/// Calibration data window and predictive output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSettings {
    /// Fraction of the time axis observed by the calibration sensors.
    pub cutoff: f64,
    /// Central probability of the credible and prediction intervals.
    pub level: f64,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            cutoff: 0.2,
            level: 0.99,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        self.sim.build_grid()?;
        self.sim.frame_count()?;
        let e = &self.ensemble;
        if e.lon_offsets.is_empty() || e.lat_offsets.is_empty() || e.mag_offsets.is_empty() {
            return Err(Error::config(
                "every ensemble offset list needs at least one entry",
            ));
        }
        if e.extreme == 0 || e.extreme > self.member_count() {
            return Err(Error::config(format!(
                "extreme = {} must be in 1..={} members",
                e.extreme,
                self.member_count()
            )));
        }
        if e.test_sensors == 0
            || e.kept_sensors <= e.test_sensors
            || e.kept_sensors > e.sampled_sensors
        {
            return Err(Error::config(
                "sensor counts need 0 < test_sensors < kept_sensors <= sampled_sensors",
            ));
        }
        if !(e.activity_threshold > 0.0) {
            return Err(Error::config("activity_threshold must be positive"));
        }
        if self.pod.rank.is_some() && self.pod.ric.is_some() {
            return Err(Error::config("set at most one of pod.rank and pod.ric"));
        }
        if !(self.pod.error_target > 0.0 && self.pod.error_target < 1.0) {
            return Err(Error::config("pod.error_target must be in (0, 1)"));
        }
        if !(self.rom.alpha_l > 0.0 && self.rom.alpha_q > 0.0) {
            return Err(Error::config("prescale factors must be positive"));
        }
        if self.ngp.dt != TrainSettings::default().dt && self.ngp.dt != self.sim.run.cadence {
            return Err(Error::config(
                "ngp.dt must be left unset; it always equals sim.run.cadence",
            ));
        }
        let f = &self.forecast;
        if !(f.cutoff > 0.0 && f.cutoff <= 1.0) {
            return Err(Error::config("forecast.cutoff must be in (0, 1]"));
        }
        if !(f.level > 0.0 && f.level < 1.0) {
            return Err(Error::config("forecast.level must be in (0, 1)"));
        }
        let m = &self.mcmc;
        if m.chains < 2 {
            return Err(Error::config(
                "the convergence report needs at least two chains",
            ));
        }
        if m.thin == 0 || m.iterations < m.warmup + m.thin {
            return Err(Error::config(
                "mcmc needs thin >= 1 and at least one retained draw",
            ));
        }
        Ok(())
    }

    pub fn member_count(&self) -> usize {
        let e = &self.ensemble;
        e.lon_offsets.len() * e.lat_offsets.len() * e.mag_offsets.len()
    }

    /// Training settings with the step fixed to the snapshot cadence.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            dt: self.sim.run.cadence,
            ..self.ngp.clone()
        }
    }

    /// Resolves an artifact path against the output directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    /// Stream seed for a named consumer, derived from the global seed.
    pub fn derived_seed(&self, label: &str) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        let d = crate::sha256(&bytes);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
