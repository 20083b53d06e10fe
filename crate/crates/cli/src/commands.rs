use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use radar_tr::localization::{bootstrap_velocity, ground_truth_errors, initialize, read_error_csv, write_records_csv};
use radar_tr::map_store::{load_map, save_map};
use radar_tr::metrics::{error_histogram, read_error_table, write_drift_csv, write_rmse_csv};
use radar_tr::odometry::reports_to_trajectory;
use radar_tr::registration::RegistrationResult;
use radar_tr::scan_io::{list_scan_files, load_scan, save_scan, scan_file_name};
use radar_tr::sim::{simulate_sequence, simulate_sequence_parallel, SimConfig, World};
use radar_tr::trajectory::{interpolate_pose, load_trajectory, save_trajectory};
use radar_tr::{kitti_drift, localization_rmse, OdometryState, PipelineConfig, PolarScan, TeachGraph, TimedPose};

use crate::manifest::{RunManifest, Timing};
use crate::{EvalCommand, Failure, HeadingUnit, RepeatArgs, RunArgs, ScenarioArgs, SimulateArgs, TeachArgs};

type Outcome = Result<(), Failure>;

fn pipeline_config(run: &RunArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &run.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("configuration {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    run.overrides.apply(&mut cfg).map_err(|e| Failure::Usage(e.into()))?;
    if let Some(a) = run.ablate {
        cfg = cfg.with_ablation(a);
    }
    cfg.validate().map_err(|e| Failure::Usage(e.into()))?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn load_scans(dir: &Path) -> anyhow::Result<Vec<PolarScan>> {
    let files = list_scan_files(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    if files.is_empty() {
        bail!("no scan files (scan_*.rps or scan_*.csv) in {}", dir.display());
    }
    let scans = files
        .iter()
        .map(|f| load_scan(f).with_context(|| format!("scan {}", f.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    for (i, w) in scans.windows(2).enumerate() {
        if w[1].scan_time <= w[0].scan_time {
            bail!("{}: scan times do not increase", files[i + 1].display());
        }
    }
    log::info!("loaded {} scans from {}", scans.len(), dir.display());
    Ok(scans)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let mut out = create(path)?;
    f(&mut out).and_then(|_| out.flush()).with_context(|| format!("cannot write {}", path.display()))
}

fn dump_traces<'a>(path: &Path, traces: impl Iterator<Item = (usize, &'a RegistrationResult)>) -> anyhow::Result<()> {
    write_with(path, |out| {
        writeln!(out, "{}", RegistrationResult::TRACE_CSV_HEADER)?;
        for (frame, r) in traces {
            r.write_trace_csv(frame, &mut *out)?;
        }
        Ok(())
    })
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn strict_check(strict: bool, flagged: usize, n: usize) -> Outcome {
    if strict && flagged > 0 {
        return Err(Failure::Divergence(format!("{flagged} of {n} frames failed to register")));
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Outcome {
    let mut manifest = RunManifest::start("simulate");
    let mut world = World::load(&a.world).map_err(|e| anyhow!(e))?;
    let trajectory = load_trajectory(&a.trajectory).with_context(|| format!("trajectory {}", a.trajectory.display()))?;
    if trajectory.is_empty() {
        return Err(anyhow!("trajectory {} has no poses", a.trajectory.display()).into());
    }
    let sim = match &a.sim_config {
        Some(p) => SimConfig::load(p).with_context(|| format!("simulator configuration {}", p.display()))?,
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        world.rng_seed = seed;
    }
    let (scans, gt) = if a.parallel {
        simulate_sequence_parallel(&world, &trajectory, &sim)
    } else {
        simulate_sequence(&world, &trajectory, &sim)
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (i, scan) in scans.iter().enumerate() {
        save_scan(scan, &a.out.join(scan_file_name(i))).map_err(anyhow::Error::from)?;
    }
    let gt_path = a.out.join("gt.csv");
    save_trajectory(&gt, &gt_path).map_err(anyhow::Error::from)?;

    manifest.input("world", &a.world);
    manifest.input("trajectory", &a.trajectory);
    if let Some(p) = &a.sim_config {
        manifest.input("sim_config", p);
    }
    manifest.output("scans", &a.out);
    manifest.output("ground_truth", &gt_path);
    manifest.seed = Some(world.rng_seed);
    manifest.config = Some(sim.to_text());
    manifest.notes.push(format!("{} scans", scans.len()));
    manifest.finish(&a.out.join("manifest.json")).context("cannot write manifest")?;
    println!("simulate: {} scans written to {}", scans.len(), a.out.display());
    Ok(())
}

pub fn teach(a: TeachArgs) -> Outcome {
    let mut manifest = RunManifest::start("teach");
    let cfg = pipeline_config(&a.run)?;
    let scans = load_scans(&a.scans)?;

    let mut odo = OdometryState::new();
    odo.parallel = a.run.parallel;
    let mut latencies = Vec::with_capacity(scans.len());
    let reports: Vec<_> = scans
        .iter()
        .map(|s| {
            let start = Instant::now();
            let r = odo.step(s, &cfg);
            latencies.push(start.elapsed().as_secs_f64() * 1e3);
            r
        })
        .collect();
    let flagged = reports.iter().filter(|r| r.failure.is_some()).count();

    let created_at = scans.last().map_or(0.0, |s| s.scan_time);
    let graph = TeachGraph::new(odo.all_keyframes, cfg.to_text(), created_at);
    if graph.is_empty() {
        return Err(anyhow!("no keyframes: every scan was empty after preprocessing").into());
    }
    if let Some(parent) = a.map.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    save_map(&graph, &a.map).with_context(|| format!("map {}", a.map.display()))?;
    let trajectory_path = a.trajectory.clone().unwrap_or_else(|| sibling(&a.map, "trajectory.csv"));
    save_trajectory(&reports_to_trajectory(&reports), &trajectory_path).map_err(anyhow::Error::from)?;
    if let Some(p) = &a.run.dump_iterations {
        dump_traces(p, reports.iter().enumerate().filter_map(|(i, r)| r.registration.as_ref().map(|g| (i, g))))?;
        manifest.output("iterations", p);
    }

    manifest.config = Some(cfg.to_text());
    manifest.input("scans", &a.scans);
    if let Some(p) = &a.run.config {
        manifest.input("config", p);
    }
    manifest.output("map", &a.map);
    manifest.output("trajectory", &trajectory_path);
    manifest.timing = Timing::from_latencies(&latencies);
    manifest.notes.push(format!("{} keyframes from {} scans", graph.len(), scans.len()));
    manifest.notes.push(format!("{flagged} frames with failed registration"));
    let manifest_path = a.manifest.clone().unwrap_or_else(|| sibling(&a.map, "manifest.json"));
    manifest.finish(&manifest_path).context("cannot write manifest")?;

    println!(
        "teach: {} scans, {} keyframes, {flagged} failed registrations; map written to {}",
        scans.len(),
        graph.len(),
        a.map.display()
    );
    strict_check(a.run.strict, flagged, scans.len())
}

fn anchored(poses: &[TimedPose], origin: &TimedPose) -> Vec<TimedPose> {
    poses
        .iter()
        .map(|p| TimedPose::new(p.time, origin.pose.between(&p.pose)))
        .collect()
}

fn load_gt(path: &Path) -> anyhow::Result<Vec<TimedPose>> {
    let poses = load_trajectory(path).with_context(|| format!("ground truth {}", path.display()))?;
    if poses.is_empty() {
        bail!("ground truth {} has no poses", path.display());
    }
    Ok(poses)
}

pub fn repeat(a: RepeatArgs) -> Outcome {
    let mut manifest = RunManifest::start("repeat");
    let cfg = pipeline_config(&a.run)?;
    if !(a.bin_width > 0.0) {
        return Err(Failure::Usage(anyhow!("--bin-width must be positive")));
    }
    let graph = load_map(&a.map).with_context(|| format!("map {}", a.map.display()))?;
    let scans = load_scans(&a.scans)?;
    let repeat_gt = a.gt.as_deref().map(load_gt).transpose()?;
    let teach_gt = a.teach_gt.as_deref().map(load_gt).transpose()?;

    let t0 = scans[0].scan_time;
    let first = match (a.init, &repeat_gt) {
        (Some(p), _) => p,
        (None, Some(gt)) => {
            let at = interpolate_pose(gt, t0);
            teach_gt.as_ref().map_or(at, |tg| tg[0].pose.between(&at))
        }
        (None, None) => return Err(Failure::Usage(anyhow!("either --init or --gt is required"))),
    };
    let mut state = initialize(&graph, first, t0).map_err(|e| anyhow!(e))?;
    state.parallel = a.run.parallel;
    if scans.len() > 1 {
        state.velocity = bootstrap_velocity(&graph, &scans, first, &cfg).map_err(|e| anyhow!(e))?;
    }
    let mut latencies = Vec::with_capacity(scans.len());
    let records: Vec<_> = scans
        .iter()
        .map(|s| {
            let start = Instant::now();
            let r = state.step(s, &cfg);
            latencies.push(start.elapsed().as_secs_f64() * 1e3);
            r
        })
        .collect();
    let flagged = records.iter().filter(|r| r.failure.is_some()).count();

    let gt_errors = match (&teach_gt, &repeat_gt) {
        (Some(tg), Some(rg)) => {
            let origin = &tg[0];
            Some(ground_truth_errors(&records, &graph, &anchored(tg, origin), &anchored(rg, origin)))
        }
        _ => None,
    };
    let errors: Vec<_> = gt_errors.clone().unwrap_or_else(|| records.iter().map(|r| r.error).collect());
    let rmse = localization_rmse(&errors).map_err(anyhow::Error::from)?;
    let histogram = error_histogram(&errors, a.bin_width).map_err(anyhow::Error::from)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let records_path = a.out.join("records.csv");
    write_with(&records_path, |out| write_records_csv(&records, gt_errors.as_deref(), out))?;
    let rmse_path = a.out.join("rmse.csv");
    write_with(&rmse_path, |out| write_rmse_csv(&rmse, out))?;
    let histogram_path = a.out.join("histogram.csv");
    write_with(&histogram_path, |out| histogram.write_csv(out))?;
    if let Some(p) = &a.run.dump_iterations {
        dump_traces(p, records.iter().enumerate().filter_map(|(i, r)| r.registration.as_ref().map(|g| (i, g))))?;
        manifest.output("iterations", p);
    }

    manifest.config = Some(cfg.to_text());
    manifest.input("scans", &a.scans);
    manifest.input("map", &a.map);
    for (name, p) in [("config", &a.run.config), ("gt", &a.gt), ("teach_gt", &a.teach_gt)] {
        if let Some(p) = p {
            manifest.input(name, p);
        }
    }
    manifest.output("records", &records_path);
    manifest.output("rmse", &rmse_path);
    manifest.output("histogram", &histogram_path);
    manifest.timing = Timing::from_latencies(&latencies);
    manifest.notes.push(if gt_errors.is_some() {
        "errors are against ground truth".to_string()
    } else {
        "no ground truth for both passes: errors are offsets from the closest node".to_string()
    });
    manifest.notes.push(format!("{flagged} frames with failed registration"));
    manifest.finish(&a.out.join("manifest.json")).context("cannot write manifest")?;

    println!("{rmse}");
    strict_check(a.run.strict, flagged, scans.len())
}

pub fn eval(e: EvalCommand) -> Outcome {
    match e {
        EvalCommand::Drift { est, gt, out } => {
            let est_poses = load_trajectory(&est).with_context(|| format!("estimate {}", est.display()))?;
            let gt_poses = load_trajectory(&gt).with_context(|| format!("ground truth {}", gt.display()))?;
            let report = kitti_drift(&est_poses, &gt_poses).map_err(anyhow::Error::from)?;
            println!("{report}");
            if let Some(path) = out {
                write_with(&path, |w| write_drift_csv(&report, w))?;
            }
        }
        EvalCommand::Rmse {
            errors,
            heading_unit,
            out,
            histogram,
            bin_width,
        } => {
            if !(bin_width > 0.0) {
                return Err(Failure::Usage(anyhow!("--bin-width must be positive")));
            }
            let file = File::open(&errors).with_context(|| format!("cannot open {}", errors.display()))?;
            let values = match heading_unit {
                HeadingUnit::Deg => read_error_table(file).map_err(anyhow::Error::from),
                HeadingUnit::Rad => read_error_csv(file).map_err(anyhow::Error::from),
            }
            .with_context(|| format!("errors {}", errors.display()))?;
            let report = localization_rmse(&values).map_err(anyhow::Error::from)?;
            println!("{report}");
            if let Some(path) = out {
                write_with(&path, |w| write_rmse_csv(&report, w))?;
            }
            if let Some(path) = histogram {
                let h = error_histogram(&values, bin_width).map_err(anyhow::Error::from)?;
                write_with(&path, |w| h.write_csv(w))?;
            }
        }
    }
    Ok(())
}

pub fn scenario(a: ScenarioArgs) -> Outcome {
    let sc = radar_tr::scenarios::by_name(&a.name).ok_or_else(|| Failure::Usage(anyhow!("unknown scenario `{}`", a.name)))?;
    sc.write(&a.out).with_context(|| format!("cannot write scenario to {}", a.out.display()))?;
    println!("scenario {}: written to {}", a.name, a.out.display());
    Ok(())
}

