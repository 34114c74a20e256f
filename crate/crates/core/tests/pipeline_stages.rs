use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use randprom::calib::Scenario;
use randprom::pipeline::{
    exit_code, frame_times, CalibrationReport, ForecastReport, MemberRecord, Pipeline,
    PipelineConfig, PodReport, Stage,
};
use randprom::sensors::{extreme_members, table_activity, Role, SensorSet, SeriesTable};
use randprom::Error;

const TINY: &str = r#"
seed = 11

[sim.grid]
nx = 20
ny = 20
lon_min = 170.0
lon_max = 180.0
lat_min = -25.0
lat_max = -15.0

[sim.bathymetry]
depth = 4000.0
islands = [{ lon = 177.0, lat = -18.0, radius_km = 60.0, peak = 500.0 }]

[sim.ic]
lon0 = 175.0
lat0 = -20.0
mag = 2.0

[sim.run]
duration = 7200.0
cadence = 240.0

[sim.boundaries]
x = "outflow"
y = "outflow"
sponge_cells = 3
sponge_rate = 0.005

[ensemble]
extreme = 5
sampled_sensors = 12
kept_sensors = 8
test_sensors = 2

[ngp]
iterations = 30

[mcmc]
chains = 2
iterations = 400
warmup = 300

[forecast]
cutoff = 0.3
level = 0.99
"#;

fn tiny(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(TINY).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let key = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
}

fn full_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        Pipeline::new(tiny(&out)).unwrap().run_all().unwrap();
        Run { _dir: dir, out }
    })
}

fn members(out: &Path) -> Vec<MemberRecord> {
    csv::Reader::from_path(out.join("ensemble.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

#[test]
fn three_offsets_per_axis_give_27_members() {
    let run = full_run();
    let m = members(&run.out);
    assert_eq!(m.len(), 27);
    assert!(m.iter().all(|r| r.status == "ok"));
    assert_eq!(m.iter().filter(|r| r.selected).count(), 5);
    for r in &m {
        assert!(run
            .out
            .join(format!("series/member_{:02}.csv", r.member))
            .is_file());
    }
    let centre = m
        .iter()
        .find(|r| r.dlon == 0.0 && r.dlat == 0.0 && r.dmag == 0.0)
        .unwrap();
    assert_eq!(centre.member, 13);
}

#[test]
fn manifest_ranking_is_reproducible_from_the_series() {
    let run = full_run();
    let cfg = tiny(&run.out);
    let sensors =
        SensorSet::read_csv(std::fs::File::open(run.out.join("sensors.csv")).unwrap()).unwrap();
    let cal = sensors.with_role(Role::Calibration);
    let times = frame_times(&cfg).unwrap();
    let m = members(&run.out);
    let mut totals = Vec::new();
    for r in &m {
        let f = std::fs::File::open(run.out.join(format!("series/member_{:02}.csv", r.member)))
            .unwrap();
        let sc = Scenario::read_csv(f, "m", &times, sensors.len()).unwrap();
        let act = table_activity(
            &SeriesTable {
                times: sc.times.clone(),
                n_sensors: sc.n_sensors,
                values: sc.values.clone(),
            },
            cfg.ensemble.activity_threshold,
        )
        .unwrap();
        let total: f64 = cal.iter().map(|&s| act[s]).sum();
        assert!((total - r.total_activity).abs() <= 1e-9 * total.abs().max(1.0));
        totals.push(total);
    }
    let picked = extreme_members(&totals, cfg.ensemble.extreme);
    let flagged: Vec<usize> = m.iter().filter(|r| r.selected).map(|r| r.member).collect();
    assert_eq!(picked, flagged);
}

#[test]
fn sensor_manifest_has_the_requested_roles() {
    let run = full_run();
    let sensors =
        SensorSet::read_csv(std::fs::File::open(run.out.join("sensors.csv")).unwrap()).unwrap();
    assert_eq!(sensors.len(), 8);
    assert_eq!(sensors.with_role(Role::Test).len(), 2);
    let head = std::fs::read_to_string(run.out.join("sensors.csv")).unwrap();
    assert!(head.starts_with("id,lon,lat,i,j,role"));
}

#[test]
fn forecast_tables_and_report_are_written() {
    let run = full_run();
    let fc: ForecastReport =
        serde_json::from_slice(&std::fs::read(run.out.join("forecast/forecast.json")).unwrap())
            .unwrap();
    assert_eq!(fc.level, 0.99);
    assert_eq!(fc.draws, 200);
    for s in 0..8 {
        let text =
            std::fs::read_to_string(run.out.join(format!("forecast/global_sensor_{s:02}.csv")))
                .unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,mean,ci_lo,ci_hi,pi_lo,pi_hi"));
        assert_eq!(lines.count(), 31);
    }
    for line in std::fs::read_to_string(run.out.join("forecast/global_sensor_00.csv"))
        .unwrap()
        .lines()
        .skip(1)
    {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[4] <= v[2] && v[2] <= v[3] && v[3] <= v[5]);
    }
    let cal: CalibrationReport =
        serde_json::from_slice(&std::fs::read(run.out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal.scenarios.len(), 5);
    assert_eq!(cal.draws_per_chain, 100);
    assert_eq!(cal.rhat.len(), cal.rhat_names.len());
    let pod: PodReport =
        serde_json::from_slice(&std::fs::read(run.out.join("pod.json")).unwrap()).unwrap();
    assert_eq!(pod.n_modes, 31);
    assert_eq!(pod.rank, pod.default_rank);
    let report = std::fs::read_to_string(run.out.join("report.md")).unwrap();
    for needle in [
        "Wall-clock per stage",
        "R-hat",
        "Acceptance",
        "excluded blowup fraction",
        "plots/amplitude.svg",
    ] {
        assert!(report.contains(needle), "report lacks {needle}");
    }
    for st in Stage::ALL {
        assert!(report.contains(&format!("| {st} |")) || st == Stage::Report);
    }
    assert!(run.out.join("plots/ric.svg").is_file());
}

#[test]
fn rerun_with_the_same_seed_is_byte_identical() {
    let run = full_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again");
    Pipeline::new(tiny(&out)).unwrap().run_all().unwrap();
    let a = tree(&run.out);
    let b = tree(&out);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    // Reports and the provenance record carry wall-clock times.
    let timed = [
        "provenance.json",
        "ngp.json",
        "calibration.json",
        "report.md",
    ];
    for (k, bytes) in &a {
        if !timed.contains(&k.as_str()) {
            assert!(bytes == &b[k], "{k} differs between runs");
        }
    }
}

#[test]
fn a_different_seed_changes_the_posterior() {
    let run = full_run();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("other"));
    cfg.seed = 12;
    let mut p = Pipeline::new(cfg).unwrap();
    for s in [
        Stage::Simulate,
        Stage::Ensemble,
        Stage::Pod,
        Stage::Rom,
        Stage::Ngp,
        Stage::Calibrate,
    ] {
        p.run(s).unwrap();
    }
    let a = std::fs::read(run.out.join("posterior.bin")).unwrap();
    let b = std::fs::read(dir.path().join("other/posterior.bin")).unwrap();
    assert_ne!(a, b);
    // The reference run does not depend on the seed.
    assert_eq!(
        std::fs::read(run.out.join("reference.snap")).unwrap(),
        std::fs::read(dir.path().join("other/reference.snap")).unwrap()
    );
}

#[test]
fn forecast_before_calibration_is_a_provenance_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(dir.path())).unwrap();
    let err = p.run(Stage::Forecast).unwrap_err();
    assert_eq!(exit_code(&err), 4);
    match err {
        Error::Provenance { stage, message } => {
            assert_eq!(stage, "ensemble");
            assert!(message.contains("missing upstream artifact"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn edited_artifacts_and_changed_config_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    for s in [Stage::Simulate, Stage::Pod, Stage::Rom] {
        p.run(s).unwrap();
    }

    // A different truncation invalidates the basis the operators came from.
    let mut changed = cfg.clone();
    changed.pod.rank = Some(2);
    let err = Pipeline::new(changed).unwrap().run(Stage::Ngp).unwrap_err();
    assert!(
        matches!(err, Error::Provenance { ref stage, .. } if stage == "pod"),
        "{err}"
    );

    // So does editing the basis on disk.
    let path = dir.path().join("basis.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    let err = Pipeline::new(cfg.clone())
        .unwrap()
        .run(Stage::Ngp)
        .unwrap_err();
    assert_eq!(exit_code(&err), 4);
    assert!(err.to_string().contains("modified"), "{err}");

    // Rerunning the producer heals the chain; a rewritten basis then makes
    // the old operators stale.
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    p.run(Stage::Pod).unwrap();
    p.run(Stage::Ngp).unwrap();
    let mut other = cfg;
    other.pod.rank = Some(2);
    let mut q = Pipeline::new(other).unwrap();
    q.run(Stage::Pod).unwrap();
    let err = q.run(Stage::Ngp).unwrap_err();
    assert!(
        matches!(err, Error::Provenance { ref stage, .. } if stage == "rom"),
        "{err}"
    );
}

#[test]
fn zero_offsets_give_identical_members() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ensemble.lon_offsets = vec![0.0, 0.0];
    cfg.ensemble.lat_offsets = vec![0.0];
    cfg.ensemble.mag_offsets = vec![0.0, 0.0];
    cfg.ensemble.extreme = 2;
    let mut p = Pipeline::new(cfg).unwrap();
    p.run(Stage::Simulate).unwrap();
    p.run(Stage::Ensemble).unwrap();
    let m = members(dir.path());
    assert_eq!(m.len(), 4);
    let first = std::fs::read(dir.path().join("series/member_00.csv")).unwrap();
    for r in &m[1..] {
        assert_eq!(
            std::fs::read(
                dir.path()
                    .join(format!("series/member_{:02}.csv", r.member))
            )
            .unwrap(),
            first
        );
        assert_eq!(r.total_activity, m[0].total_activity);
    }
}

#[test]
fn stage_names_and_exit_codes() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    let err = "decompose".parse::<Stage>().unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert_eq!(
        exit_code(&PipelineConfig::from_toml("seed = 1").unwrap_err()),
        2
    );
    assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
    assert_eq!(
        exit_code(&Error::Provenance {
            stage: "pod".into(),
            message: "x".into()
        }),
        4
    );
}

#[test]
fn desk_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.member_count(), 27);
    assert_eq!(cfg.sim.frame_count().unwrap(), 200);
    assert_eq!(cfg.train_settings().dt, 216.0);
    let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_ne!(cfg.derived_seed("mcmc"), cfg.derived_seed("forecast"));
}
