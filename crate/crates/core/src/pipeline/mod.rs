//! The simulate, decompose, build-ROM, train, calibrate and forecast
//! workflow as a sequence of stages over one output directory.
//!
//! Stages exchange data only through files. Each stage verifies its inputs
//! against the checksums in the provenance record and refuses to run on
//! anything stale.

mod config;
pub mod plot;
mod provenance;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    ArtifactPaths, EnsembleSettings, ForecastSettings, PipelineConfig, PodSettings, RomSettings,
};
pub use provenance::{file_digest, Provenance, StageRecord};

use crate::calib::{
    gelman_rubin, posterior_predictive, run_mcmc, Forecast, Hyper, ObservationModel,
    PosteriorSamples, PredictiveLevel, Scenario, Surrogate,
};
use crate::error::{Error, Result};
use crate::galerkin::{
    assemble_operators, blowup_bound, integrate_with, prescale, CoeffTrajectory,
    IntegrationSettings, RomOperators,
};
use crate::ngp::{forward, train, NgpModel};
use crate::pod::{
    assemble, decompose, default_rank, modes_for_ric, reconstruction_error, ric_curve, truncate,
    truncation_error, ModalBasis, Truncation,
};
use crate::sensors::{
    apply_cutoff, extract_series, extreme_members, holdout, max_amplitude, most_active,
    sample_sensors, table_activity, Role, SensorSet,
};
use crate::swe_sim::{run_simulation, Grid, SnapshotSet};
use plot::{Band, Chart, Line, PALETTE};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    Ensemble,
    Pod,
    Rom,
    Ngp,
    Calibrate,
    Forecast,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Simulate,
        Stage::Ensemble,
        Stage::Pod,
        Stage::Rom,
        Stage::Ngp,
        Stage::Calibrate,
        Stage::Forecast,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ensemble => "ensemble",
            Stage::Pod => "pod",
            Stage::Rom => "rom",
            Stage::Ngp => "ngp",
            Stage::Calibrate => "calibrate",
            Stage::Forecast => "forecast",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage `{s}`; expected one of {}",
                    Stage::ALL.map(Stage::name).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Row of the ensemble manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub member: usize,
    pub dlon: f64,
    pub dlat: f64,
    pub dmag: f64,
    /// `ok` or the failure message.
    pub status: String,
    /// Summed activity over the calibration sensors; NaN for failed members.
    pub total_activity: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodReport {
    pub n_modes: usize,
    pub rank: usize,
    pub ric: f64,
    /// Relative Frobenius error at `rank` from the singular values.
    pub relative_error: f64,
    /// The same error computed from the reconstruction.
    pub reconstruction_error: f64,
    pub orthonormality_defect: f64,
    pub default_rank: usize,
    pub error_target: f64,
    /// Smallest rank whose relative error is at most `error_target`.
    pub rank_for_error_target: usize,
    pub rank_ric_80: usize,
    pub rank_ric_95: usize,
    pub ric_curve: Vec<f64>,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgpReport {
    pub k: usize,
    pub iterations: usize,
    pub rejected_steps: usize,
    /// Coefficient MSE over the training window, prescaled GP-ROM and nGP.
    pub gprom_mse: f64,
    pub ngp_mse: f64,
    pub mse_ratio: f64,
    /// Rows integrated for the stability check (twice the window).
    pub horizon_rows: usize,
    pub gprom_blowup: Option<usize>,
    pub ngp_blowup: Option<usize>,
    pub training_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub scenarios: Vec<String>,
    pub cutoff: f64,
    pub observed_entries: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// Post-warmup acceptance per scenario, averaged over chains.
    pub acceptance: Vec<f64>,
    pub mean_acceptance: f64,
    pub rhat_names: Vec<String>,
    pub rhat: Vec<f64>,
    pub rhat_max: f64,
    pub rhat_above_1_1: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorScore {
    pub member: usize,
    pub sensor: usize,
    pub role: Role,
    /// `global` or `local`.
    pub level: String,
    pub pi_coverage: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub level: f64,
    pub cutoff: f64,
    pub draws: usize,
    pub global_excluded_fraction: f64,
    pub local_excluded_fraction: f64,
    pub scores: Vec<SensorScore>,
}

impl ForecastReport {
    /// Mean PI coverage over the test sensors at one level.
    pub fn mean_test_coverage(&self, level: &str) -> f64 {
        mean(
            self.scores
                .iter()
                .filter(|s| s.role == Role::Test && s.level == level)
                .map(|s| s.pi_coverage),
        )
    }

    pub fn mean_test_mae(&self, level: &str) -> f64 {
        mean(
            self.scores
                .iter()
                .filter(|s| s.role == Role::Test && s.level == level)
                .map(|s| s.mean_abs_error),
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn from_json<T: for<'a> Deserialize<'a>>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(format!("{what}: {e}")))
}

/// Inputs read and outputs written by one running stage.
struct StageIo<'a> {
    cfg: &'a PipelineConfig,
    prov: &'a Provenance,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl StageIo<'_> {
    fn read(&mut self, producer: Stage, rel: &Path) -> Result<Vec<u8>> {
        let digest_of = |s: Stage| stage_digest(self.cfg, s);
        let sha = self
            .prov
            .verify_input(producer, &self.cfg.out, rel, &digest_of)?;
        let bytes = std::fs::read(self.cfg.out.join(rel))?;
        if crate::hex_digest(&crate::sha256(&bytes)) != sha {
            return Err(Error::Provenance {
                stage: producer.name().into(),
                message: format!("{} changed while being read", rel.display()),
            });
        }
        self.inputs.insert(provenance::key(rel), sha);
        Ok(bytes)
    }

    fn write(&mut self, rel: &Path, bytes: &[u8]) -> Result<()> {
        let path = self.cfg.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.insert(
            provenance::key(rel),
            crate::hex_digest(&crate::sha256(bytes)),
        );
        Ok(())
    }
}

/// Digest of the configuration sections a stage depends on.
pub fn stage_digest(cfg: &PipelineConfig, stage: Stage) -> String {
    let v = match stage {
        Stage::Simulate => serde_json::json!({ "sim": cfg.sim }),
        Stage::Ensemble => {
            serde_json::json!({ "sim": cfg.sim, "ensemble": cfg.ensemble, "seed": cfg.seed })
        }
        Stage::Pod => serde_json::json!({ "pod": cfg.pod }),
        Stage::Rom => serde_json::json!({ "rom": cfg.rom }),
        Stage::Ngp => serde_json::json!({ "ngp": cfg.train_settings() }),
        Stage::Calibrate => serde_json::json!({
            "prior": cfg.prior, "mcmc": cfg.mcmc, "cutoff": cfg.forecast.cutoff, "seed": cfg.seed
        }),
        Stage::Forecast => serde_json::json!({ "forecast": cfg.forecast, "seed": cfg.seed }),
        Stage::Report => serde_json::json!({}),
    };
    crate::hex_digest(&crate::sha256(v.to_string().as_bytes()))
}

/// Artifact paths, relative to the output directory.
fn rel(cfg: &PipelineConfig, p: &Path) -> PathBuf {
    p.strip_prefix(&cfg.out)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

fn member_file(cfg: &PipelineConfig, m: usize) -> PathBuf {
    rel(cfg, &cfg.paths.series).join(format!("member_{m:02}.csv"))
}

/// Frame times of every run: `t = n * cadence`.
pub fn frame_times(cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let n = cfg.sim.frame_count()?;
    Ok((0..=n).map(|f| f as f64 * cfg.sim.run.cadence).collect())
}

/// One pipeline over one output directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    prov: Provenance,
    grid: Grid,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Pipeline> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out)?;
        let prov = Provenance::load(&cfg.path(&cfg.paths.provenance))?;
        let grid = cfg.sim.build_grid()?;
        Ok(Pipeline { cfg, prov, grid })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn provenance(&self) -> &Provenance {
        &self.prov
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    /// Runs one stage. Its previous record is dropped first, so a failed
    /// stage leaves everything downstream stale.
    pub fn run(&mut self, stage: Stage) -> Result<()> {
        let started = Instant::now();
        info!("stage {stage}: start");
        let prov_path = self.cfg.path(&self.cfg.paths.provenance);
        if self.prov.stages.remove(stage.name()).is_some() {
            self.prov.save(&prov_path)?;
        }
        let mut io = StageIo {
            cfg: &self.cfg,
            prov: &self.prov,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        match stage {
            Stage::Simulate => simulate(&mut io),
            Stage::Ensemble => ensemble(&mut io, &self.grid),
            Stage::Pod => pod(&mut io, &self.grid),
            Stage::Rom => rom(&mut io, &self.grid),
            Stage::Ngp => ngp(&mut io),
            Stage::Calibrate => calibrate(&mut io, &self.grid),
            Stage::Forecast => forecast(&mut io, &self.grid),
            Stage::Report => report(&mut io),
        }?;
        let record = StageRecord {
            config_digest: stage_digest(&self.cfg, stage),
            inputs: io.inputs,
            outputs: io.outputs,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!("stage {stage}: done in {:.1} s", record.seconds);
        self.prov.stages.insert(stage.name().into(), record);
        self.prov.save(&prov_path)?;
        Ok(())
    }
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 4 for missing, stale or unreadable artifacts.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Unattainable { .. } => 2,
        Error::Provenance { .. }
        | Error::Format(_)
        | Error::Structural(_)
        | Error::Csv(_)
        | Error::Io(_) => 4,
        Error::Cfl { .. }
        | Error::Integration { .. }
        | Error::Numerical(_)
        | Error::Degenerate(_)
        | Error::Training { .. }
        | Error::Placement(_)
        | Error::Initialization(_)
        | Error::Diagnostic(_) => 3,
    }
}

/// Library entry point for a single stage.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    Pipeline::new(cfg.clone())?.run(stage)
}

fn simulate(io: &mut StageIo) -> Result<()> {
    let set = run_simulation(&io.cfg.sim)?;
    io.write(&rel(io.cfg, &io.cfg.paths.reference), &set.to_bytes()?)
}

fn read_reference(io: &mut StageIo, grid: &Grid) -> Result<SnapshotSet> {
    let bytes = io.read(Stage::Simulate, &rel(io.cfg, &io.cfg.paths.reference))?;
    SnapshotSet::read_from(&mut bytes.as_slice(), grid)
}

fn offsets(e: &EnsembleSettings) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for &dl in &e.lon_offsets {
        for &dp in &e.lat_offsets {
            for &dm in &e.mag_offsets {
                out.push((dl, dp, dm));
            }
        }
    }
    out
}

fn ensemble(io: &mut StageIo, grid: &Grid) -> Result<()> {
    let cfg = io.cfg;
    let e = &cfg.ensemble;
    let reference = read_reference(io, grid)?;
    let map = max_amplitude(&reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.derived_seed("sensors"));
    let sampled = sample_sensors(&map, grid, e.sampled_sensors, &mut rng)?;
    let ref_series = extract_series(&reference, &sampled)?;
    let keep = most_active(
        &table_activity(&ref_series, e.activity_threshold)?,
        e.kept_sensors,
    );
    let sensors = holdout(&sampled.subset(&keep), e.test_sensors, &mut rng)?;
    drop(reference);

    let mut buf = Vec::new();
    sensors.write_csv(&mut buf)?;
    io.write(&rel(cfg, &cfg.paths.sensors), &buf)?;

    let offs = offsets(e);
    let mut distinct = offs.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite offsets"));
    distinct.dedup();
    if distinct.len() < offs.len() {
        warn!(
            "ensemble offsets repeat: {} members but only {} distinct runs",
            offs.len(),
            distinct.len()
        );
    }
    let cal = sensors.with_role(Role::Calibration);
    let runs: Vec<Result<_>> = offs
        .par_iter()
        .map(|&(dl, dp, dm)| {
            let set = run_simulation(&cfg.sim.perturbed(dl, dp, dm))?;
            extract_series(&set, &sensors)
        })
        .collect();
    let mut records = Vec::with_capacity(offs.len());
    let mut ok = Vec::new();
    let mut totals = Vec::new();
    for (m, (run, &(dlon, dlat, dmag))) in runs.into_iter().zip(&offs).enumerate() {
        let (status, total) = match run {
            Ok(table) => {
                let act = table_activity(&table, e.activity_threshold)?;
                let total: f64 = cal.iter().map(|&s| act[s]).sum();
                let mut buf = Vec::new();
                table
                    .to_scenario(format!("member_{m:02}"))
                    .write_csv(&mut buf)?;
                io.write(&member_file(cfg, m), &buf)?;
                ok.push(m);
                totals.push(total);
                ("ok".to_string(), total)
            }
            Err(err) => {
                warn!("ensemble member {m} failed: {err}");
                (err.to_string(), f64::NAN)
            }
        };
        records.push(MemberRecord {
            member: m,
            dlon,
            dlat,
            dmag,
            status,
            total_activity: total,
            selected: false,
        });
    }
    if ok.len() < e.extreme {
        warn!("only {} members succeeded; selecting all of them", ok.len());
    }
    for p in extreme_members(&totals, e.extreme) {
        records[ok[p]].selected = true;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    io.write(&rel(cfg, &cfg.paths.members), &bytes)?;
    if ok.is_empty() {
        return Err(Error::numerical("every ensemble member failed"));
    }

    let points: Vec<(usize, usize, String)> = sensors
        .sensors
        .iter()
        .map(|s| {
            let tag = if s.role == Role::Test { "T" } else { "C" };
            (s.i, s.j, format!("{tag}{}", s.id))
        })
        .collect();
    let land: Vec<bool> = (0..grid.len()).map(|c| !grid.is_wet(c)).collect();
    let svg = plot::heatmap(
        "Maximum wave amplitude of the reference run",
        grid.nx,
        grid.ny,
        &map.values,
        &land,
        &points,
    );
    io.write(
        &rel(cfg, &cfg.paths.plots).join("amplitude.svg"),
        svg.as_bytes(),
    )
}

fn pod(io: &mut StageIo, grid: &Grid) -> Result<()> {
    let cfg = io.cfg;
    let reference = read_reference(io, grid)?;
    let snap = assemble(&reference)?;
    drop(reference);
    let full = decompose(&snap)?;
    let target = match (cfg.pod.rank, cfg.pod.ric) {
        (Some(k), _) => Truncation::Rank(k),
        (None, Some(r)) => Truncation::Ric(r),
        (None, None) => Truncation::Default,
    };
    let (basis, tr) = truncate(&full, target)?;
    let sv = &basis.singular_values;
    let rank_for_error_target = (1..=sv.len())
        .find(|&k| truncation_error(sv, k) <= cfg.pod.error_target)
        .unwrap_or(sv.len());
    let report = PodReport {
        n_modes: basis.n_modes(),
        rank: tr.rank,
        ric: tr.ric,
        relative_error: tr.relative_error,
        reconstruction_error: reconstruction_error(&basis, &snap),
        orthonormality_defect: basis.orthonormality_defect(),
        default_rank: default_rank(basis.n_modes()),
        error_target: cfg.pod.error_target,
        rank_for_error_target,
        rank_ric_80: modes_for_ric(sv, 0.8)?,
        rank_ric_95: modes_for_ric(sv, 0.95)?,
        ric_curve: ric_curve(sv)?,
        singular_values: sv.clone(),
    };
    io.write(&rel(cfg, &cfg.paths.basis), &basis.to_bytes()?)?;
    io.write(&rel(cfg, &cfg.paths.pod_report), &json(&report)?)?;
    let chart = Chart {
        title: "Relative informational content".into(),
        x_label: "modes".into(),
        y_label: "RIC".into(),
        x: (1..=report.ric_curve.len()).map(|k| k as f64).collect(),
        lines: vec![Line {
            label: "RIC".into(),
            color: PALETTE[0].into(),
            dashed: false,
            y: report.ric_curve.clone(),
        }],
        bands: vec![],
        marker: Some(report.rank as f64),
    };
    io.write(
        &rel(cfg, &cfg.paths.plots).join("ric.svg"),
        chart.to_svg().as_bytes(),
    )
}

fn read_basis(io: &mut StageIo) -> Result<ModalBasis> {
    let bytes = io.read(Stage::Pod, &rel(io.cfg, &io.cfg.paths.basis))?;
    ModalBasis::read_from(&mut bytes.as_slice())
}

fn rom(io: &mut StageIo, grid: &Grid) -> Result<()> {
    let basis = read_basis(io)?;
    let ops = prescale(
        &assemble_operators(&basis, grid)?,
        io.cfg.rom.alpha_l,
        io.cfg.rom.alpha_q,
    )?;
    io.write(&rel(io.cfg, &io.cfg.paths.operators), &ops.to_bytes()?)
}

fn ngp(io: &mut StageIo) -> Result<()> {
    let cfg = io.cfg;
    let basis = read_basis(io)?;
    let bytes = io.read(Stage::Rom, &rel(cfg, &cfg.paths.operators))?;
    let ops = RomOperators::read_from(&mut bytes.as_slice())?;
    let times = frame_times(cfg)?;
    let target = CoeffTrajectory::from_basis(&basis, &times)?;
    let ts = cfg.train_settings();
    let started = Instant::now();
    let model = train(&ops, &target, &ts)?;
    let training_seconds = started.elapsed().as_secs_f64();

    let rows = 2 * (target.len() - 1) + 1;
    let check = IntegrationSettings {
        dt: ts.dt,
        n_steps: rows - 1,
        substeps: ts.substeps,
        bound: blowup_bound(&basis),
    };
    let a0 = target.row(0);
    let gp = integrate_with(&ops, a0, &check)?;
    let ng = forward(&model, a0, &check)?;
    let window = |tr: &CoeffTrajectory| {
        if tr.len() >= target.len() {
            tr.head(target.len()).mse(&target)
        } else {
            f64::INFINITY
        }
    };
    let report = NgpReport {
        k: model.k(),
        iterations: model.record.iterations,
        rejected_steps: model.record.rejected_steps,
        gprom_mse: window(&gp),
        ngp_mse: window(&ng),
        mse_ratio: window(&gp) / window(&ng),
        horizon_rows: rows,
        gprom_blowup: gp.blowup,
        ngp_blowup: ng.blowup,
        training_seconds,
    };
    io.write(&rel(cfg, &cfg.paths.ngp), &model.to_bytes()?)?;
    io.write(&rel(cfg, &cfg.paths.ngp_report), &json(&report)?)?;

    let x: Vec<f64> = (0..rows).map(|r| r as f64 * ts.dt / 3600.0).collect();
    for m in 0..model.k().min(3) {
        let col = |tr: &CoeffTrajectory| {
            (0..rows)
                .map(|r| if r < tr.len() { tr.row(r)[m] } else { f64::NAN })
                .collect::<Vec<_>>()
        };
        let chart = Chart {
            title: format!("Coefficient {m}"),
            x_label: "time (h)".into(),
            y_label: "a(t)".into(),
            x: x.clone(),
            lines: vec![
                Line {
                    label: "POD".into(),
                    color: "black".into(),
                    dashed: false,
                    y: col(&target),
                },
                Line {
                    label: "GP-ROM".into(),
                    color: PALETTE[1].into(),
                    dashed: true,
                    y: col(&gp),
                },
                Line {
                    label: "nGP".into(),
                    color: PALETTE[0].into(),
                    dashed: false,
                    y: col(&ng),
                },
            ],
            bands: vec![],
            marker: Some(*times.last().expect("frames") / 3600.0),
        };
        io.write(
            &rel(cfg, &cfg.paths.plots).join(format!("coefficient_{m}.svg")),
            chart.to_svg().as_bytes(),
        )?;
    }
    Ok(())
}

/// Everything downstream of the ensemble needs: sensors, manifest and the
/// full-horizon series of every selected member.
struct Observations {
    sensors: SensorSet,
    selected: Vec<usize>,
    series: Vec<Scenario>,
}

fn read_observations(io: &mut StageIo) -> Result<Observations> {
    let cfg = io.cfg;
    let bytes = io.read(Stage::Ensemble, &rel(cfg, &cfg.paths.sensors))?;
    let sensors = SensorSet::read_csv(bytes.as_slice())?;
    let bytes = io.read(Stage::Ensemble, &rel(cfg, &cfg.paths.members))?;
    let members: Vec<MemberRecord> = csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let selected: Vec<usize> = members
        .iter()
        .filter(|m| m.selected)
        .map(|m| m.member)
        .collect();
    let times = frame_times(cfg)?;
    let mut series = Vec::with_capacity(selected.len());
    for &m in &selected {
        let bytes = io.read(Stage::Ensemble, &member_file(cfg, m))?;
        series.push(Scenario::read_csv(
            bytes.as_slice(),
            format!("member_{m:02}"),
            &times,
            sensors.len(),
        )?);
    }
    Ok(Observations {
        sensors,
        selected,
        series,
    })
}

fn read_surrogate(
    io: &mut StageIo,
    grid: &Grid,
    sensors: &SensorSet,
) -> Result<(ModalBasis, Surrogate)> {
    let cfg = io.cfg;
    let basis = read_basis(io)?;
    let bytes = io.read(Stage::Ngp, &rel(cfg, &cfg.paths.ngp))?;
    let model = NgpModel::read_from(&mut bytes.as_slice())?;
    let obs = ObservationModel::new(&basis, grid, &sensors.cells(grid))?;
    let sur = Surrogate::new(
        model,
        obs,
        cfg.sim.run.cadence,
        cfg.ngp.substeps,
        blowup_bound(&basis),
    )?;
    Ok((basis, sur))
}

/// Calibration scenarios: selected members on the calibration sensors,
/// cut off at `fraction` of the record.
pub fn calibration_scenarios(
    series: &[Scenario],
    calibration: &[usize],
    fraction: f64,
) -> Result<Vec<Scenario>> {
    series
        .iter()
        .map(|sc| apply_cutoff(&sc.select_sensors(calibration), fraction))
        .collect()
}

fn calibrate(io: &mut StageIo, grid: &Grid) -> Result<()> {
    let cfg = io.cfg;
    let obs = read_observations(io)?;
    let (basis, sur) = read_surrogate(io, grid, &obs.sensors)?;
    let cal = obs.sensors.with_role(Role::Calibration);
    let scenarios = calibration_scenarios(&obs.series, &cal, cfg.forecast.cutoff)?;
    let a0: Vec<f64> = (0..basis.rank).map(|i| basis.coeffs[(0, i)]).collect();
    let hyper = Hyper::from_basis(&basis, &a0, &cfg.prior)?;
    let settings = crate::calib::McmcSettings {
        seed: cfg.derived_seed("mcmc"),
        ..cfg.mcmc.clone()
    };
    let started = Instant::now();
    let post = run_mcmc(&scenarios, &sur.with_sensors(&cal), &hyper, &settings)?;
    let seconds = started.elapsed().as_secs_f64();
    let rhat = gelman_rubin(&post)?;
    let n_sc = scenarios.len();
    let acceptance: Vec<f64> = (0..n_sc)
        .map(|i| mean(post.chains.iter().map(|c| c.acceptance[i])))
        .collect();
    let report = CalibrationReport {
        scenarios: scenarios.iter().map(|s| s.id.clone()).collect(),
        cutoff: cfg.forecast.cutoff,
        observed_entries: scenarios.iter().map(Scenario::observed_count).sum(),
        chains: post.chains.len(),
        draws_per_chain: post.n_draws(),
        mean_acceptance: post.mean_acceptance(),
        acceptance,
        rhat_names: post.layout.names(),
        rhat_max: rhat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rhat_above_1_1: rhat.iter().filter(|&&r| r > 1.1).count(),
        rhat,
        seconds,
    };
    io.write(&rel(cfg, &cfg.paths.posterior), &post.to_bytes()?)?;
    let mut buf = Vec::new();
    post.write_summary(&mut buf)?;
    io.write(&rel(cfg, &cfg.paths.posterior_summary), &buf)?;
    io.write(&rel(cfg, &cfg.paths.calibration_report), &json(&report)?)
}

/// Noise variance index of each sensor: its position among the
/// calibration sensors, or `None` for held-out sensors.
pub fn noise_map(sensors: &SensorSet) -> Vec<Option<usize>> {
    let cal = sensors.with_role(Role::Calibration);
    (0..sensors.len())
        .map(|s| cal.iter().position(|&c| c == s))
        .collect()
}

fn truth(sc: &Scenario, s: usize) -> Vec<f64> {
    (0..sc.n_t())
        .map(|t| sc.values[t * sc.n_sensors + s])
        .collect()
}

fn band_chart(
    title: String,
    f: &Forecast,
    s: usize,
    truths: &[(String, Vec<f64>)],
    cutoff: f64,
) -> Chart {
    let col = |v: &[f64]| {
        (0..f.times.len())
            .map(|t| v[f.idx(t, s)])
            .collect::<Vec<_>>()
    };
    let mut lines = vec![Line {
        label: "posterior mean".into(),
        color: PALETTE[0].into(),
        dashed: false,
        y: col(&f.mean),
    }];
    for (n, (label, y)) in truths.iter().enumerate() {
        lines.push(Line {
            label: label.clone(),
            color: if truths.len() == 1 {
                "black".into()
            } else {
                PALETTE[1 + n % (PALETTE.len() - 1)].into()
            },
            dashed: true,
            y: y.clone(),
        });
    }
    let t_end = *f.times.last().expect("times");
    Chart {
        title,
        x_label: "time (h)".into(),
        y_label: "surface elevation (m)".into(),
        x: f.times.iter().map(|t| t / 3600.0).collect(),
        lines,
        bands: vec![
            Band {
                color: PALETTE[0].into(),
                opacity: 0.15,
                lo: col(&f.pi_lo),
                hi: col(&f.pi_hi),
            },
            Band {
                color: PALETTE[0].into(),
                opacity: 0.3,
                lo: col(&f.ci_lo),
                hi: col(&f.ci_hi),
            },
        ],
        marker: Some(cutoff * t_end / 3600.0),
    }
}

fn forecast(io: &mut StageIo, grid: &Grid) -> Result<()> {
    let cfg = io.cfg;
    let fc = &cfg.forecast;
    let obs = read_observations(io)?;
    let (_, sur) = read_surrogate(io, grid, &obs.sensors)?;
    let bytes = io.read(Stage::Calibrate, &rel(cfg, &cfg.paths.posterior))?;
    let post = PosteriorSamples::read_from(&mut bytes.as_slice())?;
    let times = frame_times(cfg)?;
    let noise = noise_map(&obs.sensors);
    let seed = cfg.derived_seed("forecast");
    let dir = rel(cfg, &cfg.paths.forecast);
    let plots = rel(cfg, &cfg.paths.plots);

    let global = posterior_predictive(
        &post,
        &sur,
        &noise,
        &times,
        PredictiveLevel::Global,
        fc.level,
        seed,
    )?;
    for s in 0..obs.sensors.len() {
        let mut buf = Vec::new();
        global.write_sensor_csv(s, &mut buf)?;
        io.write(&dir.join(format!("global_sensor_{s:02}.csv")), &buf)?;
    }
    let locals = (0..obs.selected.len())
        .into_par_iter()
        .map(|i| {
            posterior_predictive(
                &post,
                &sur,
                &noise,
                &times,
                PredictiveLevel::Scenario(i),
                fc.level,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = Vec::new();
    for (i, (&m, sc)) in obs.selected.iter().zip(&obs.series).enumerate() {
        for (s, sensor) in obs.sensors.sensors.iter().enumerate() {
            let y = truth(sc, s);
            for (level, f) in [("global", &global), ("local", &locals[i])] {
                scores.push(SensorScore {
                    member: m,
                    sensor: s,
                    role: sensor.role,
                    level: level.into(),
                    pi_coverage: f.pi_coverage(s, &y),
                    mean_abs_error: f.mean_abs_error(s, &y),
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &scores {
        w.serialize(r)?;
    }
    io.write(
        &dir.join("scores.csv"),
        &w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
    )?;

    for s in obs.sensors.with_role(Role::Test) {
        for (i, &m) in obs.selected.iter().enumerate().take(3) {
            let mut buf = Vec::new();
            locals[i].write_sensor_csv(s, &mut buf)?;
            io.write(&dir.join(format!("member_{m:02}_sensor_{s:02}.csv")), &buf)?;
            let chart = band_chart(
                format!("Held-out sensor {s}, member {m}"),
                &locals[i],
                s,
                &[("simulated".into(), truth(&obs.series[i], s))],
                fc.cutoff,
            );
            io.write(
                &plots.join(format!("sensor_{s:02}_member_{m:02}.svg")),
                chart.to_svg().as_bytes(),
            )?;
        }
        let truths: Vec<(String, Vec<f64>)> = obs
            .selected
            .iter()
            .zip(&obs.series)
            .take(4)
            .map(|(&m, sc)| (format!("member {m}"), truth(sc, s)))
            .collect();
        let chart = band_chart(
            format!("Held-out sensor {s}, global predictive"),
            &global,
            s,
            &truths,
            fc.cutoff,
        );
        io.write(
            &plots.join(format!("sensor_{s:02}_global.svg")),
            chart.to_svg().as_bytes(),
        )?;
    }

    let local_excluded: usize = locals.iter().map(|f| f.excluded).sum();
    let local_total: usize = locals.iter().map(|f| f.excluded + f.draws_used).sum();
    let report = ForecastReport {
        level: fc.level,
        cutoff: fc.cutoff,
        draws: global.draws_used + global.excluded,
        global_excluded_fraction: global.excluded_fraction(),
        local_excluded_fraction: if local_total == 0 {
            0.0
        } else {
            local_excluded as f64 / local_total as f64
        },
        scores,
    };
    io.write(
        &rel(cfg, &cfg.paths.forecast).join("forecast.json"),
        &json(&report)?,
    )
}

fn report(io: &mut StageIo) -> Result<()> {
    let cfg = io.cfg;
    let pod: PodReport = from_json(
        &io.read(Stage::Pod, &rel(cfg, &cfg.paths.pod_report))?,
        "pod report",
    )?;
    let ngp: NgpReport = from_json(
        &io.read(Stage::Ngp, &rel(cfg, &cfg.paths.ngp_report))?,
        "nGP report",
    )?;
    let cal: CalibrationReport = from_json(
        &io.read(Stage::Calibrate, &rel(cfg, &cfg.paths.calibration_report))?,
        "calibration report",
    )?;
    let fc: ForecastReport = from_json(
        &io.read(
            Stage::Forecast,
            &rel(cfg, &cfg.paths.forecast).join("forecast.json"),
        )?,
        "forecast report",
    )?;
    let text = render_report(cfg, io.prov, &pod, &ngp, &cal, &fc);
    io.write(&rel(cfg, &cfg.paths.report), text.as_bytes())
}

fn render_report(
    cfg: &PipelineConfig,
    prov: &Provenance,
    pod: &PodReport,
    ngp: &NgpReport,
    cal: &CalibrationReport,
    fc: &ForecastReport,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(
        s,
        "Seed {}; grid {}x{}; {} frames every {} s.\n",
        cfg.seed,
        cfg.sim.grid.nx,
        cfg.sim.grid.ny,
        ngp.horizon_rows / 2 + 1,
        cfg.sim.run.cadence
    );

    let _ = writeln!(
        s,
        "## Wall-clock per stage\n\n| stage | seconds |\n|---|---:|"
    );
    let mut total = 0.0;
    for st in Stage::ALL {
        if let Some(r) = prov.record(st) {
            total += r.seconds;
            let _ = writeln!(s, "| {st} | {:.1} |", r.seconds);
        }
    }
    let _ = writeln!(s, "| total before report | {total:.1} |\n");

    let _ = writeln!(s, "## POD\n");
    let _ = writeln!(s, "- modes available: {}", pod.n_modes);
    let _ = writeln!(
        s,
        "- retained rank: {} (ten percent rule gives {})",
        pod.rank, pod.default_rank
    );
    let _ = writeln!(
        s,
        "- relative L2 reconstruction error at rank {}: {:.4} (direct {:.4}); target {:.2} {}",
        pod.rank,
        pod.relative_error,
        pod.reconstruction_error,
        pod.error_target,
        if pod.relative_error < pod.error_target {
            "met"
        } else {
            "missed"
        }
    );
    let _ = writeln!(
        s,
        "- smallest rank reaching the target: {}",
        pod.rank_for_error_target
    );
    let _ = writeln!(s, "- RIC at the retained rank: {:.4}", pod.ric);
    let _ = writeln!(
        s,
        "- rank for 80% RIC: {}; rank for 95% RIC: {}",
        pod.rank_ric_80, pod.rank_ric_95
    );
    let _ = writeln!(
        s,
        "- orthonormality defect: {:.2e}\n",
        pod.orthonormality_defect
    );

    let _ = writeln!(s, "## nGP\n");
    let _ = writeln!(
        s,
        "- coefficient MSE over the training window: GP-ROM {:.4e}, nGP {:.4e}, ratio {:.1}",
        ngp.gprom_mse, ngp.ngp_mse, ngp.mse_ratio
    );
    let _ = writeln!(
        s,
        "- blowup over {} rows (twice the window): GP-ROM {}, nGP {}",
        ngp.horizon_rows,
        ngp.gprom_blowup
            .map_or("none".into(), |r| format!("at row {r}")),
        ngp.ngp_blowup
            .map_or("none".into(), |r| format!("at row {r}"))
    );
    let _ = writeln!(
        s,
        "- {} iterations ({} rejected steps) in {:.1} s\n",
        ngp.iterations, ngp.rejected_steps, ngp.training_seconds
    );

    let _ = writeln!(s, "## Calibration\n");
    let _ = writeln!(
        s,
        "{} scenarios, cutoff {:.0}% of the record, {} observed entries; {} chains of {} retained draws; {:.1} s.\n",
        cal.scenarios.len(),
        100.0 * cal.cutoff,
        cal.observed_entries,
        cal.chains,
        cal.draws_per_chain,
        cal.seconds
    );
    let _ = writeln!(
        s,
        "### R-hat\n\n| block | parameters | max R-hat | above 1.1 |\n|---|---:|---:|---:|"
    );
    for block in ["b0", "mu0", "sigma", "sigma_eps"] {
        let vals: Vec<f64> = cal
            .rhat_names
            .iter()
            .zip(&cal.rhat)
            .filter(|(n, _)| n.split('[').next() == Some(block))
            .map(|(_, r)| *r)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            s,
            "| {block} | {} | {max:.3} | {} |",
            vals.len(),
            vals.iter().filter(|&&r| r > 1.1).count()
        );
    }
    let mut worst: Vec<(f64, &String)> = cal.rhat.iter().copied().zip(&cal.rhat_names).collect();
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    let _ = writeln!(s, "\nLargest values:\n\n| parameter | R-hat |\n|---|---:|");
    for (r, n) in worst.iter().take(10) {
        let _ = writeln!(s, "| {n} | {r:.3} |");
    }
    let _ = writeln!(s, "\n### Acceptance\n\n| scenario | rate |\n|---|---:|");
    for (id, a) in cal.scenarios.iter().zip(&cal.acceptance) {
        let _ = writeln!(s, "| {id} | {a:.3} |");
    }
    let _ = writeln!(s, "| mean | {:.3} |\n", cal.mean_acceptance);

    let _ = writeln!(s, "## Forecast\n");
    let _ = writeln!(
        s,
        "Interval level {:.0}%; {} posterior draws; excluded blowup fraction {:.4} (global), {:.4} (per scenario).\n",
        100.0 * fc.level,
        fc.draws,
        fc.global_excluded_fraction,
        fc.local_excluded_fraction
    );
    let _ = writeln!(s, "| held-out sensor | PI coverage (global) | PI coverage (scenario) | MAE global (m) | MAE scenario (m) |\n|---:|---:|---:|---:|---:|");
    let mut test: Vec<usize> = fc
        .scores
        .iter()
        .filter(|r| r.role == Role::Test)
        .map(|r| r.sensor)
        .collect();
    test.sort_unstable();
    test.dedup();
    for sensor in test {
        let pick = |level: &str, f: fn(&SensorScore) -> f64| {
            mean(
                fc.scores
                    .iter()
                    .filter(|r| r.sensor == sensor && r.level == level)
                    .map(f),
            )
        };
        let _ = writeln!(
            s,
            "| {sensor} | {:.3} | {:.3} | {:.4} | {:.4} |",
            pick("global", |r| r.pi_coverage),
            pick("local", |r| r.pi_coverage),
            pick("global", |r| r.mean_abs_error),
            pick("local", |r| r.mean_abs_error)
        );
    }
    let _ = writeln!(
        s,
        "| mean | {:.3} | {:.3} | {:.4} | {:.4} |\n",
        fc.mean_test_coverage("global"),
        fc.mean_test_coverage("local"),
        fc.mean_test_mae("global"),
        fc.mean_test_mae("local")
    );
    let _ = writeln!(s, "## Plots\n");
    let mut plots: Vec<&String> = prov
        .stages
        .values()
        .flat_map(|r| r.outputs.keys())
        .filter(|k| k.ends_with(".svg"))
        .collect();
    plots.sort();
    for p in plots {
        let _ = writeln!(s, "- {p}");
    }
    s
}
