use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use lattice_core::fixtures::default_feeds;
use lattice_core::mesh::{parse_stl, MeshError};
use lattice_core::sequencer::{plan_build, validate_plan, BuildPlan, Feed, PlanConfig, PlanError};
use lattice_core::simulator::{
    self, calibrate, carrying_study, reference_plan, scaling_study, SimConfig, SimError, StudyError,
};
use lattice_core::study;
use lattice_core::tiler::{check_block_connectivity, parse_pattern_list, tile, TileError, TilingFile};
use lattice_core::twin::{self, SceneFile, ServeError, ServeOptions, Session};
use lattice_core::voxel::{precision, voxelize, Alignment, GridFile, VoxelError, VoxelGrid};

const EXIT_IO: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;
const EXIT_PATTERNS: u8 = 4;
const EXIT_INFEASIBLE: u8 = 5;
const EXIT_DEADLOCK: u8 = 6;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "lattice", version, about = "Mesh to lattice-block assembly planning and simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// STL mesh to voxel grid JSON plus a precision report.
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "pitch-mm", default_value_t = 65.0)]
        pitch_mm: f64,
        #[arg(long, value_enum, default_value_t = Alignment::MinCorner)]
        alignment: Alignment,
        #[arg(long)]
        output: PathBuf,
    },
    /// Voxel grid to block placements.
    Tile {
        #[arg(long)]
        grid: PathBuf,
        /// Comma separated, e.g. "4x2x2,1x1x1". Must include 1x1x1.
        #[arg(long, default_value = "4x2x2,2x3x1,2x2x1,1x1x1")]
        patterns: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Block placements to a validated multi-robot build plan.
    Plan {
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long, default_value_t = 1)]
        robots: usize,
        /// Feed cells "x,y,z;x,y,z", one per robot. Defaults to the sides of the grid.
        #[arg(long, allow_hyphen_values = true)]
        feeds: Option<String>,
        #[arg(long, default_value_t = 3)]
        capacity: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Runs a plan through the discrete-event simulator.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        /// TOML file with SimConfig keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Writes a study table as CSV.
    Study {
        #[arg(long, value_enum)]
        kind: StudyKind,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serves the digital twin over WebSocket until interrupted.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Scene JSON; the 4x4x4 cube scene when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Where to write the edit log and trace on shutdown.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Step time that puts the reference cube on the target throughput.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    Scaling,
    Carrying,
    Pareto,
}

impl StudyKind {
    fn name(self) -> &'static str {
        match self {
            StudyKind::Scaling => "scaling",
            StudyKind::Carrying => "carrying",
            StudyKind::Pareto => "pareto",
        }
    }
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> Failure {
    Failure { code, msg: msg.to_string() }
}

type Res<T> = Result<T, Failure>;

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

/// Inputs, parameters and outputs of one command run.
#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    tool_version: &'static str,
    command: &'static str,
    inputs: Vec<FileHash>,
    parameters: Value,
    outputs: Vec<FileHash>,
    started_unix_s: f64,
    finished_unix_s: f64,
}

struct Run {
    command: &'static str,
    started: f64,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run { command, started: now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    fn read(&mut self, path: &Path) -> Res<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| fail(EXIT_PARSE, format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256(&bytes) });
        Ok(bytes)
    }

    fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Res<T> {
        let bytes = self.read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| fail(EXIT_PARSE, format!("{}: {e}", path.display())))
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Res<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| fail(EXIT_IO, format!("cannot create {}: {e}", dir.display())))?;
        }
        fs::write(path, bytes).map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(FileHash { path: path.display().to_string(), sha256: sha256(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Res<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| fail(EXIT_IO, e))?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    fn finish(self, path: &Path, parameters: Value) -> Res<()> {
        let m = RunManifest {
            schema_version: 1,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            inputs: self.inputs,
            parameters,
            outputs: self.outputs,
            started_unix_s: self.started,
            finished_unix_s: now(),
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| fail(EXIT_IO, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| fail(EXIT_IO, format!("cannot write {}: {e}", path.display())))
    }
}

/// `dir/name.json` -> `dir/name.<tag>.json`
fn sidecar(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{tag}.json"))
}

fn voxel_failure(e: VoxelError) -> Failure {
    match e {
        VoxelError::Mesh(MeshError::EmptyMesh) | VoxelError::DegenerateMesh | VoxelError::ZeroMeshVolume => {
            fail(EXIT_DEGENERATE, e)
        }
        VoxelError::InvalidPitch(_) => fail(EXIT_USAGE, e),
        _ => fail(EXIT_PARSE, e),
    }
}

fn tile_failure(e: TileError) -> Failure {
    fail(EXIT_PATTERNS, e)
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::DeadlockDetected { .. } => fail(EXIT_DEADLOCK, e),
        SimError::InvalidConfig(_) | SimError::BadPlan(_) => fail(EXIT_PARSE, e),
    }
}

fn study_failure(e: StudyError) -> Failure {
    match e {
        StudyError::Sim(e) => sim_failure(e),
        StudyError::Tile(e) => tile_failure(e),
        e => fail(EXIT_INFEASIBLE, e),
    }
}

fn load_config(run: &mut Run, path: Option<&Path>) -> Res<SimConfig> {
    match path {
        Some(p) => {
            let bytes = run.read(p)?;
            let text = String::from_utf8(bytes).map_err(|e| fail(EXIT_PARSE, e))?;
            SimConfig::from_toml(&text).map_err(|e| fail(EXIT_PARSE, e))
        }
        None => Ok(SimConfig::default()),
    }
}

fn parse_feeds(s: &str) -> Res<Vec<[i32; 3]>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<i32> = p
                .split(',')
                .map(|x| x.trim().parse::<i32>())
                .collect::<Result<_, _>>()
                .map_err(|_| fail(EXIT_USAGE, format!("bad feed cell {p:?}")))?;
            <[i32; 3]>::try_from(v).map_err(|_| fail(EXIT_USAGE, format!("feed {p:?} needs three coordinates")))
        })
        .collect()
}

fn cmd_voxelize(input: &Path, pitch_mm: f64, alignment: Alignment, output: &Path) -> Res<()> {
    let mut run = Run::new("voxelize");
    let bytes = run.read(input)?;
    let mesh = parse_stl(&bytes).map_err(|e| match e {
        MeshError::EmptyMesh => fail(EXIT_DEGENERATE, e),
        _ => fail(EXIT_PARSE, e),
    })?;
    let grid = voxelize(&mesh, pitch_mm, alignment).map_err(voxel_failure)?;
    let report = precision(&grid, &mesh).map_err(voxel_failure)?;
    run.write_json(output, &grid.to_file())?;
    run.write_json(&sidecar(output, "report"), &report)?;
    println!("{} voxels, precision {:.4}", report.n_voxel, report.precision);
    run.finish(&sidecar(output, "manifest"), json!({ "pitch_mm": pitch_mm, "alignment": alignment }))
}

fn cmd_tile(grid_path: &Path, patterns: &str, output: &Path) -> Res<()> {
    let mut run = Run::new("tile");
    let file: GridFile = run.read_json(grid_path)?;
    let grid = VoxelGrid::from_file(&file).map_err(|e| fail(EXIT_PARSE, e))?;
    let set = parse_pattern_list(patterns).map_err(tile_failure)?;
    let tiling = tile(&grid, &set).map_err(tile_failure)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &tiling.placements {
        *counts.entry(p.pattern.to_string()).or_default() += 1;
    }
    let report = json!({
        "placement_count": tiling.placements.len(),
        "covered_voxels": tiling.covered_count(),
        "uncovered": tiling.uncovered,
        "stagger_violations": tiling.stagger_violations(),
        "disconnected": check_block_connectivity(&tiling),
        "by_pattern": counts,
    });
    run.write_json(output, &tiling.to_file(&grid))?;
    run.write_json(&sidecar(output, "report"), &report)?;
    println!("{} placements covering {} voxels", tiling.placements.len(), tiling.covered_count());
    run.finish(&sidecar(output, "manifest"), json!({ "patterns": patterns }))
}

fn cmd_plan(blocks: &Path, robots: usize, feeds: Option<&str>, capacity: usize, output: &Path) -> Res<()> {
    if robots == 0 || capacity == 0 {
        return Err(fail(EXIT_USAGE, "--robots and --capacity must be at least 1"));
    }
    let mut run = Run::new("plan");
    let file: TilingFile = run.read_json(blocks)?;
    let grid = file.target_grid();
    let cells = match feeds {
        Some(s) => parse_feeds(s)?,
        None if robots <= 4 => default_feeds(&grid, robots),
        None => return Err(fail(EXIT_USAGE, "more than four robots need explicit --feeds")),
    };
    if cells.len() != robots {
        return Err(fail(EXIT_USAGE, format!("{} feeds given for {robots} robots", cells.len())));
    }
    let cfg = PlanConfig { capacity, ..Default::default() };
    let params = json!({ "robots": robots, "feeds": cells, "capacity": capacity });
    let report_path = sidecar(output, "report");
    let (plan, report) = match plan_build(&grid, &file.tiling(), &Feed::numbered_all(&cells), &cfg) {
        Ok(r) => r,
        Err(e) => {
            run.write_json(&report_path, &json!({ "error": e.to_string() }))?;
            run.finish(&sidecar(output, "manifest"), params)?;
            return Err(fail(EXIT_INFEASIBLE, e));
        }
    };
    run.write_json(output, &plan)?;
    run.write_json(&report_path, &report)?;
    run.finish(&sidecar(output, "manifest"), params)?;
    if !report.is_feasible() {
        return Err(fail(EXIT_INFEASIBLE, format!("plan has {} blocking violations", report.blocking().count())));
    }
    println!(
        "{} placements ({} scaffold), {} barriers",
        plan.placements.len(),
        plan.scaffold.len(),
        plan.barriers.len()
    );
    Ok(())
}

fn cmd_simulate(plan_path: &Path, config: Option<&Path>, seed: u64, trace: &Path, metrics: &Path) -> Res<()> {
    let mut run = Run::new("simulate");
    let plan: BuildPlan = run.read_json(plan_path)?;
    let cfg = load_config(&mut run, config)?;
    let plan_cfg = PlanConfig { capacity: plan.capacity.max(1), ..Default::default() };
    let report = validate_plan(&plan, &plan_cfg).map_err(|e: PlanError| fail(EXIT_INFEASIBLE, e))?;
    if !report.is_feasible() {
        return Err(fail(EXIT_INFEASIBLE, format!("plan has {} blocking violations", report.blocking().count())));
    }
    let out = simulator::run(&plan, &cfg, &plan_cfg, seed).map_err(sim_failure)?;
    run.write(trace, simulator::write_trace_jsonl(&out.trace).as_bytes())?;
    run.write_json(metrics, &out.metrics)?;
    println!(
        "{} placements in {:.1} s, {:.0} mm^3/min",
        out.metrics.placement_count, out.metrics.total_time_s, out.metrics.volumetric_throughput_mm3_per_min
    );
    run.finish(&sidecar(metrics, "manifest"), json!({ "seed": seed, "config": cfg }))
}

fn cmd_study(kind: StudyKind, out_dir: &Path, config: Option<&Path>) -> Res<()> {
    let mut run = Run::new("study");
    let cfg = load_config(&mut run, config)?;
    let path = out_dir.join(format!("{}.csv", kind.name()));
    let mut buf = Vec::new();
    match kind {
        StudyKind::Scaling => {
            let rows = scaling_study(&study::SCALING_SIZES, &study::SCALING_ROBOTS, study::SCALING_CAPACITY, &cfg)
                .map_err(study_failure)?;
            study::write_study_csv(&mut buf, &rows).map_err(|e| fail(EXIT_IO, e))?;
        }
        StudyKind::Carrying => {
            let rows = carrying_study(
                study::CARRYING_SIZE,
                &study::CARRYING_CAPACITIES,
                &study::carrying_pattern_sets(),
                &cfg,
            )
            .map_err(study_failure)?;
            study::write_study_csv(&mut buf, &rows).map_err(|e| fail(EXIT_IO, e))?;
        }
        StudyKind::Pareto => {
            let rows = study::pareto_study(&study::pareto_fixtures(), &study::pareto_pattern_sets()).map_err(voxel_failure)?;
            study::write_pareto_csv(&mut buf, &rows).map_err(|e| fail(EXIT_IO, e))?;
        }
    }
    run.write(&path, &buf)?;
    println!("wrote {}", path.display());
    run.finish(&out_dir.join(format!("{}.manifest.json", kind.name())), json!({ "kind": kind.name(), "config": cfg }))
}

fn cmd_serve(port: u16, scene: Option<&Path>, export: Option<&Path>) -> Res<()> {
    let mut run = Run::new("serve");
    let file = match scene {
        Some(p) => run.read_json::<SceneFile>(p)?,
        None => SceneFile::cube_fixture(),
    };
    let session = Session::new(file).map_err(|e| fail(EXIT_PARSE, e))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| fail(EXIT_IO, e))?;
    let session = rt.block_on(async {
        let listener = twin::bind(port).await?;
        let addr = listener.local_addr()?;
        println!("serving ws://{addr}/twin");
        let stop = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        twin::serve(session, listener, ServeOptions::default(), stop).await
    });
    let session = session.map_err(|e| match e {
        ServeError::PortInUse(_) => fail(EXIT_IO, e),
        ServeError::Io(e) => fail(EXIT_IO, e),
    })?;
    if let Some(p) = export {
        run.write_json(p, &session.export())?;
    }
    Ok(())
}

fn cmd_calibrate(config: Option<&Path>) -> Res<()> {
    let mut run = Run::new("calibrate");
    let base = load_config(&mut run, config)?;
    let t_step = calibrate(&base);
    let cfg = SimConfig { t_step, ..base };
    let (plan, plan_cfg) = reference_plan();
    let out = simulator::run(&plan, &cfg, &plan_cfg, 0).map_err(sim_failure)?;
    let v = json!({
        "t_step_s": t_step,
        "total_time_s": out.metrics.total_time_s,
        "throughput_mm3_per_min": out.metrics.volumetric_throughput_mm3_per_min,
        "target_mm3_per_min": simulator::TARGET_THROUGHPUT_MM3_PER_MIN,
    });
    println!("{}", serde_json::to_string_pretty(&v).map_err(|e| fail(EXIT_IO, e))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Voxelize { input, pitch_mm, alignment, output } => cmd_voxelize(input, *pitch_mm, *alignment, output),
        Cmd::Tile { grid, patterns, output } => cmd_tile(grid, patterns, output),
        Cmd::Plan { blocks, robots, feeds, capacity, output } => {
            cmd_plan(blocks, *robots, feeds.as_deref(), *capacity, output)
        }
        Cmd::Simulate { plan, config, seed, trace, metrics } => {
            cmd_simulate(plan, config.as_deref(), *seed, trace, metrics)
        }
        Cmd::Study { kind, out_dir, config } => cmd_study(*kind, out_dir, config.as_deref()),
        Cmd::Serve { port, scene, export } => cmd_serve(*port, scene.as_deref(), export.as_deref()),
        Cmd::Calibrate { config } => cmd_calibrate(config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
