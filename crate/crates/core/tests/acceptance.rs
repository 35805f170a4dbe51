//! Acceptance suite: one PASS/FAIL line per criterion, each with a wall-time
//! budget. Exits non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lattice_core::fixtures::{bench_grid, cube_mesh, default_feeds, random_blob};
use lattice_core::path::{heuristic, plan_path, PathError, RobotModel};
use lattice_core::sequencer::{plan_build, validate_plan, BuildPlan, Feed, PlanConfig, ViolationKind};
use lattice_core::simulator::{
    self, mutual_exclusion_violations, read_trace_jsonl, reference_plan, write_trace_jsonl, EventKind, Metrics,
    SimConfig, StudyRow,
};
use lattice_core::study::{
    carrying_pattern_sets, pareto_fixtures, pareto_pattern_sets, pareto_study, CARRYING_CAPACITIES, CARRYING_SIZE,
    SCALING_CAPACITY, SCALING_ROBOTS, SCALING_SIZES,
};
use lattice_core::tiler::{default_patterns, tile, BlockPattern, Role};
use lattice_core::voxel::{voxelize, Alignment, Cell, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const THROUGHPUT_TARGET: f64 = 4_394_000.0;
const THROUGHPUT_TOL: f64 = 0.15;
const REFERENCE_VOLUME_MM3: f64 = 17_576_000.0;

fn main() {
    let criteria: [(&str, u64, Check); 9] = [
        ("cube_decomposition", 1, cube_decomposition),
        ("throughput_calibration", 5, throughput_calibration),
        ("scaling_trends", 120, scaling_trends),
        ("carrying_study", 60, carrying),
        ("pareto_study", 30, pareto),
        ("astar_matches_bfs", 60, astar_matches_bfs),
        ("tiling_cover_and_plan_validity", 120, tiling_and_plans),
        ("simulator_invariants", 120, simulator_invariants),
        ("protocol_conformance", 60, protocol::conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let res = match res {
            Ok(d) if took > Duration::from_secs(budget) => Err(format!("over budget; {d}")),
            r => r,
        };
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        println!("{tag} {name} [{:.2}s / {budget}s] {detail}", took.as_secs_f64());
        failed += res.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn cube_decomposition() -> Result<String, String> {
    let grid = voxelize(&cube_mesh(4), 65.0, Alignment::MinCorner).map_err(|e| e.to_string())?;
    ensure!(grid.occupied_count() == 64, "voxel count {}", grid.occupied_count());
    let big = tile(&grid, &default_patterns()).map_err(|e| e.to_string())?;
    let unit = tile(&grid, &[BlockPattern::UNIT]).map_err(|e| e.to_string())?;
    let fours = big.placements.iter().filter(|p| p.pattern == BlockPattern::new(4, 2, 2)).count();
    ensure!(big.placements.len() == 4 && fours == 4, "{} placements, {fours} of 4x2x2", big.placements.len());
    ensure!(unit.placements.len() == 64, "unit placements {}", unit.placements.len());
    Ok("64 voxels -> 4 x 4x2x2 vs 64 x 1x1x1".into())
}

fn throughput_calibration() -> Result<String, String> {
    let (plan, plan_cfg) = reference_plan();
    let out = simulator::run(&plan, &SimConfig::default(), &plan_cfg, 0).map_err(|e| e.to_string())?;
    let m = &out.metrics;
    ensure!(m.placed_volume_mm3 == REFERENCE_VOLUME_MM3, "placed volume {}", m.placed_volume_mm3);
    let rel = (m.volumetric_throughput_mm3_per_min - THROUGHPUT_TARGET).abs() / THROUGHPUT_TARGET;
    ensure!(rel <= THROUGHPUT_TOL, "throughput {:.0} off by {:.1}%", m.volumetric_throughput_mm3_per_min, rel * 100.0);
    Ok(format!("{:.0} mm3/min ({:+.2}%), T = {:.1} s", m.volumetric_throughput_mm3_per_min, rel * 100.0, m.total_time_s))
}

fn time_of(rows: &[StudyRow], size: usize, robots: usize) -> f64 {
    rows.iter().find(|r| r.size == size && r.robots == robots).expect("row present").time_s
}

fn scaling_trends() -> Result<String, String> {
    let rows = simulator::scaling_study(&SCALING_SIZES, &SCALING_ROBOTS, SCALING_CAPACITY, &SimConfig::default())
        .map_err(|e| e.to_string())?;
    for &r in &SCALING_ROBOTS {
        for w in SCALING_SIZES.windows(2) {
            let (a, b) = (time_of(&rows, w[0], r), time_of(&rows, w[1], r));
            ensure!(b > a, "{r} robots: T({}^3) = {b} not above T({}^3) = {a}", w[1], w[0]);
        }
    }
    for &s in &SCALING_SIZES {
        for w in SCALING_ROBOTS.windows(2) {
            let (a, b) = (time_of(&rows, s, w[0]), time_of(&rows, s, w[1]));
            ensure!(b <= a, "{s}^3: {} robots take {b} s, {} robots {a} s", w[1], w[0]);
        }
    }
    let big = *SCALING_SIZES.last().unwrap();
    let speedup = time_of(&rows, big, 1) / time_of(&rows, big, 4);
    ensure!(speedup < 4.0, "speedup {speedup:.2} on {big}^3");
    Ok(format!("{} cells, speedup(4 robots, {big}^3) = {speedup:.2}", rows.len()))
}

fn carrying() -> Result<String, String> {
    let sets = carrying_pattern_sets();
    let rows = simulator::carrying_study(CARRYING_SIZE, &CARRYING_CAPACITIES, &sets, &SimConfig::default())
        .map_err(|e| e.to_string())?;
    let t = |k: usize, c: usize| rows[k * CARRYING_CAPACITIES.len() + c].time_s;
    for k in 0..sets.len() {
        for c in 1..CARRYING_CAPACITIES.len() {
            ensure!(t(k, c) <= t(k, c - 1), "set {k}: capacity {} slower than {}", CARRYING_CAPACITIES[c], CARRYING_CAPACITIES[c - 1]);
        }
    }
    for c in 0..CARRYING_CAPACITIES.len() {
        ensure!(t(1, c) < t(0, c), "capacity {}: 4x2x2 {} s vs unit {} s", CARRYING_CAPACITIES[c], t(1, c), t(0, c));
    }
    let fmt = |k: usize| (0..CARRYING_CAPACITIES.len()).map(|c| format!("{:.0}", t(k, c))).collect::<Vec<_>>().join("/");
    Ok(format!("unit {} s, 4x2x2 {} s", fmt(0), fmt(1)))
}

fn pareto() -> Result<String, String> {
    let fixtures = pareto_fixtures();
    ensure!(fixtures.len() >= 3, "only {} fixtures", fixtures.len());
    let rows = pareto_study(&fixtures, &pareto_pattern_sets()).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (name, _) in &fixtures {
        let r: Vec<_> = rows.iter().filter(|r| r.fixture == *name).map(|r| &r.row).collect();
        let (hier, unit, large) = (r[0], r[1], r[2]);
        ensure!(hier.coverage == 1.0 && unit.coverage == 1.0, "{name}: coverage {} vs {}", hier.coverage, unit.coverage);
        ensure!(hier.placement_count < unit.placement_count, "{name}: {} vs {} placements", hier.placement_count, unit.placement_count);
        ensure!(large.coverage < hier.coverage, "{name}: large-only coverage {}", large.coverage);
        out.push(format!("{name} {}/{}/{:.3}", hier.placement_count, unit.placement_count, large.coverage));
    }
    Ok(out.join(", "))
}

fn astar_matches_bfs() -> Result<String, String> {
    let model = RobotModel::default();
    let (mut solved, mut unreachable) = (0, 0);
    for seed in 0..200u64 {
        let world = common::random_world(seed);
        let stances = common::all_stances(&world);
        ensure!(stances.len() >= 2, "seed {seed}: {} stances", stances.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let start = stances[rng.gen_range(0..stances.len())];
        let goal = stances[rng.gen_range(0..stances.len())];
        let oracle = common::bfs_cost(&world, start, goal, &model);
        match (plan_path(&world, start, goal, &model), oracle) {
            (Ok(p), Some(c)) => {
                ensure!(p.cost == c, "seed {seed}: A* cost {} vs BFS {c}", p.cost);
                ensure!(p.stances.len() as u32 == c + 1, "seed {seed}: path length {}", p.stances.len());
                ensure!(p.stances[0] == start && p.goal() == goal, "seed {seed}: endpoints");
                for w in p.stances.windows(2) {
                    ensure!(common::bfs_cost(&world, w[0], w[1], &model) == Some(1), "seed {seed}: bad step {:?}", w);
                }
                let h = heuristic(start, goal, &model);
                ensure!(h <= c, "seed {seed}: h = {h} > cost {c}");
                solved += 1;
            }
            (Err(PathError::NoPath { .. }), None) => unreachable += 1,
            (a, b) => return Err(format!("seed {seed}: A* {a:?} vs BFS {b:?}")),
        }
    }
    Ok(format!("{solved} solved, {unreachable} unreachable, all equal"))
}

fn tiling_and_plans() -> Result<String, String> {
    let patterns = default_patterns();
    let mut plans = 0;
    let mut scaffolded = 0;
    for seed in 0..100u64 {
        let grid = random_blob(6, seed);
        let a = tile(&grid, &patterns).map_err(|e| e.to_string())?;
        common::exact_cover(&grid, &a).map_err(|e| format!("seed {seed}: {e}"))?;
        let b = tile(&grid.clone(), &patterns).map_err(|e| e.to_string())?;
        ensure!(a == b, "seed {seed}: tiling not deterministic");
        for robots in 1..=2 {
            let feeds = Feed::numbered_all(&default_feeds(&grid, robots));
            let cfg = PlanConfig::default();
            let (plan, report) = plan_build(&grid, &a, &feeds, &cfg).map_err(|e| format!("seed {seed}/{robots}: {e}"))?;
            let check = validate_plan(&plan, &cfg).map_err(|e| format!("seed {seed}/{robots}: {e}"))?;
            for r in [&report, &check] {
                let bad = r.count(ViolationKind::Support) + r.count(ViolationKind::Reachability);
                ensure!(bad == 0, "seed {seed}/{robots}: {:?}", r.violations);
            }
            order_is_partition(&plan).map_err(|e| format!("seed {seed}/{robots}: {e}"))?;
            let unsupported = common::support_failures(&plan);
            ensure!(unsupported.is_empty(), "seed {seed}/{robots}: unsupported {unsupported:?}");
            plans += 1;
            scaffolded += !plan.scaffold.is_empty() as usize;
        }
    }
    Ok(format!("100 blobs exact and deterministic, {plans} plans valid ({scaffolded} with scaffold)"))
}

fn order_is_partition(plan: &BuildPlan) -> Result<(), String> {
    let mut seen = HashSet::new();
    for &i in plan.order.iter().flatten() {
        ensure!(seen.insert(i), "placement {i} ordered twice");
    }
    ensure!(seen.len() == plan.placements.len(), "order holds {} of {}", seen.len(), plan.placements.len());
    Ok(())
}

/// Plans used by the simulator suites: reference cube, two and four robot
/// cubes, the bench with its stairs, and a few blobs.
fn sim_scenarios() -> Vec<(String, BuildPlan, PlanConfig)> {
    let mut out = Vec::new();
    let (plan, cfg) = reference_plan();
    out.push(("reference".to_string(), plan, cfg));
    let mut add = |name: String, grid: &VoxelGrid, robots: usize, capacity: usize| {
        let tiling = tile(grid, &default_patterns()).expect("unit present");
        let cfg = PlanConfig { capacity, ..Default::default() };
        let feeds = Feed::numbered_all(&default_feeds(grid, robots));
        let (plan, report) = plan_build(grid, &tiling, &feeds, &cfg).expect("plan");
        assert!(report.is_feasible(), "{name} infeasible");
        out.push((name, plan, cfg));
    };
    add("cube8x2".into(), &lattice_core::fixtures::cube_grid(8), 2, 2);
    add("cube8x4".into(), &lattice_core::fixtures::cube_grid(8), 4, 3);
    add("bench".into(), &bench_grid(), 1, 2);
    for seed in [3u64, 11, 42] {
        add(format!("blob{seed}"), &random_blob(6, seed), 2, 2);
    }
    out
}

fn simulator_invariants() -> Result<String, String> {
    let mut runs = 0;
    for (name, plan, plan_cfg) in sim_scenarios() {
        for (seed, deviation) in [(0u64, 0.0), (7, 0.15)] {
            let cfg = SimConfig { deviation_rate: deviation, ..Default::default() };
            let tag = format!("{name} seed {seed}");
            let out = simulator::run(&plan, &cfg, &plan_cfg, seed).map_err(|e| format!("{tag}: {e}"))?;
            let again = simulator::run(&plan, &cfg, &plan_cfg, seed).map_err(|e| format!("{tag}: {e}"))?;
            let text = write_trace_jsonl(&out.trace);
            ensure!(text == write_trace_jsonl(&again.trace), "{tag}: traces differ between runs");
            let parsed = read_trace_jsonl(&text).map_err(|e| e.to_string())?;
            ensure!(parsed == out.trace, "{tag}: trace does not round-trip");

            conservation(&plan, &out.trace).map_err(|e| format!("{tag}: {e}"))?;
            let clashes = mutual_exclusion_violations(&out.trace, &plan, &plan_cfg.robot);
            ensure!(clashes.is_empty(), "{tag}: stance overlap {:?}", clashes[0]);
            causality(&out.trace).map_err(|e| format!("{tag}: {e}"))?;
            ensure!(Metrics::from_trace(&out.trace, &plan) == out.metrics, "{tag}: metrics differ from trace");
            runs += 1;
        }
    }
    Ok(format!("{runs} runs: conservation, exclusion, determinism, causality, metrics"))
}

fn conservation(plan: &BuildPlan, trace: &[simulator::SimEvent]) -> Result<(), String> {
    let placed: Vec<usize> = trace.iter().filter(|e| e.kind == EventKind::BlockPlaced).filter_map(|e| e.placement).collect();
    let structure = placed.iter().filter(|&&i| plan.placements[i].role == Role::Structure).count();
    ensure!(structure == plan.structure_count(), "{structure} structure blocks placed of {}", plan.structure_count());
    let unique: HashSet<usize> = placed.iter().copied().collect();
    ensure!(unique.len() == placed.len(), "a placement landed twice");
    ensure!(placed.len() == plan.placements.len(), "{} of {} placements landed", placed.len(), plan.placements.len());
    let occupancy: HashSet<Cell> = placed.iter().flat_map(|&i| plan.placements[i].cells()).collect();
    let expected: HashSet<Cell> = plan.structure_grid().occupied().chain(plan.scaffold.iter().flat_map(|&i| plan.placements[i].cells())).collect();
    ensure!(occupancy == expected, "final occupancy differs from tiling plus scaffold");
    Ok(())
}

/// Per robot: times never go back, every landing follows that robot's
/// drop and stomp of the same block, and `done` comes last.
fn causality(trace: &[simulator::SimEvent]) -> Result<(), String> {
    let mut last: BTreeMap<&str, f64> = BTreeMap::new();
    let mut dropped: BTreeMap<&str, Vec<(usize, EventKind)>> = BTreeMap::new();
    let mut finished: HashSet<&str> = HashSet::new();
    for e in trace {
        let r = e.robot.as_str();
        ensure!(!finished.contains(r), "{r} acts after done");
        let prev = last.insert(r, e.t).unwrap_or(0.0);
        ensure!(e.t >= prev, "{r} goes back in time at {}", e.t);
        let log = dropped.entry(r).or_default();
        match (e.kind, e.placement) {
            (EventKind::Drop | EventKind::Stomp, Some(i)) => log.push((i, e.kind)),
            (EventKind::BlockPlaced, Some(i)) => {
                let d = log.iter().position(|&x| x == (i, EventKind::Drop));
                let s = log.iter().position(|&x| x == (i, EventKind::Stomp));
                ensure!(matches!((d, s), (Some(d), Some(s)) if d < s), "{r} lands {i} without drop then stomp");
            }
            (EventKind::Done, _) => {
                finished.insert(r);
            }
            _ => {}
        }
    }
    ensure!(!last.is_empty() && finished.len() == last.len(), "{} of {} robots finished", finished.len(), last.len());
    Ok(())
}

mod protocol {
    use std::time::Duration;

    use futures::{SinkExt, StreamExt};
    use lattice_core::simulator::SimEvent;
    use lattice_core::twin::{bind, serve, SceneFile, SceneModel, ServeOptions, Session, SCHEMA};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::{json, Value};
    use tokio::net::TcpStream;
    use tokio_tungstenite::tungstenite::Message as Ws;
    use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

    type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

    const JOINERS: usize = 5;

    struct Recording {
        frames: Vec<Value>,
        /// Scene after each folded event, index = event count.
        folds: Vec<SceneModel>,
    }

    pub fn conformance() -> Result<String, String> {
        let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
        rt.block_on(session())
    }

    async fn next(ws: &mut Client) -> Result<Value, String> {
        loop {
            let m = tokio::time::timeout(Duration::from_secs(10), ws.next())
                .await
                .map_err(|_| "no frame within 10 s".to_string())?
                .ok_or("stream ended")?
                .map_err(|e| e.to_string())?;
            match m {
                Ws::Text(t) => return serde_json::from_str(&t).map_err(|e| e.to_string()),
                Ws::Close(_) => return Err("closed".into()),
                _ => {}
            }
        }
    }

    async fn send(ws: &mut Client, v: Value, sent: &mut Vec<Value>) -> Result<(), String> {
        ws.send(Ws::Text(v.to_string())).await.map_err(|e| e.to_string())?;
        sent.push(v);
        Ok(())
    }

    async fn reply(ws: &mut Client, seq: u64, frames: &mut Vec<Value>) -> Result<Value, String> {
        loop {
            let v = next(ws).await?;
            frames.push(v.clone());
            if v["seq"] == json!(seq) {
                return Ok(v);
            }
        }
    }

    async fn session() -> Result<String, String> {
        let schema_json: Value = serde_json::from_str(SCHEMA).map_err(|e| e.to_string())?;
        let schema = jsonschema::JSONSchema::compile(&schema_json).map_err(|e| e.to_string())?;
        let listener = bind(0).await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let session = Session::new(SceneFile::cube_fixture()).map_err(|e| e.to_string())?;
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let opts = ServeOptions { tick: Duration::from_millis(10), ..Default::default() };
        let server = tokio::spawn(serve(session, listener, opts, async move {
            let _ = stop_rx.await;
        }));
        let url = format!("ws://{addr}/twin");

        let (mut rec, _) = connect_async(&url).await.map_err(|e| e.to_string())?;
        let mut frames = vec![next(&mut rec).await?, next(&mut rec).await?];
        let mut sent = Vec::new();
        let (hello, snap) = (&frames[0], &frames[1]);
        if hello["type"] != "hello" || snap["type"] != "snapshot" {
            return Err(format!("handshake {} then {}", hello["type"], snap["type"]));
        }
        let scene0: SceneModel = serde_json::from_value(snap["body"]["scene"].clone()).map_err(|e| e.to_string())?;

        // error paths and a replan before the run
        rec.send(Ws::Text("{not json".into())).await.map_err(|e| e.to_string())?;
        let bad = next(&mut rec).await?;
        frames.push(bad.clone());
        if bad["body"]["code"] != "bad_json" {
            return Err(format!("bad json answered with {bad}"));
        }
        send(&mut rec, json!({"type":"edit","seq":1,"body":{"op":"add_feed","params":{"cell":[-20,0,0]}}}), &mut sent).await?;
        let r = reply(&mut rec, 1, &mut frames).await?;
        if r["body"]["code"] != "out_of_bounds" {
            return Err(format!("out-of-bounds feed answered with {r}"));
        }
        send(&mut rec, json!({"type":"replan","seq":2,"body":{}}), &mut sent).await?;
        if reply(&mut rec, 2, &mut frames).await?["type"] != "ack" {
            return Err("replan not acknowledged".into());
        }
        let scene0 = match frames.iter().rev().find(|f| f["type"] == "snapshot") {
            Some(s) => serde_json::from_value(s["body"]["scene"].clone()).map_err(|e| e.to_string())?,
            None => scene0,
        };
        send(&mut rec, json!({"type":"control","seq":3,"body":{"action":"speed","value":400.0}}), &mut sent).await?;
        reply(&mut rec, 3, &mut frames).await?;
        send(&mut rec, json!({"type":"control","seq":4,"body":{"action":"start"}}), &mut sent).await?;
        reply(&mut rec, 4, &mut frames).await?;

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let delays: Vec<u64> = (0..JOINERS).map(|_| rng.gen_range(0..500)).collect();
        let joiners: Vec<_> = delays.iter().map(|&d| tokio::spawn(join_after(url.clone(), d))).collect();

        let mut fold = scene0.clone();
        let mut folds = vec![fold.clone()];
        loop {
            let v = next(&mut rec).await?;
            frames.push(v.clone());
            match v["type"].as_str() {
                Some("event") => {
                    let e: SimEvent = serde_json::from_value(v["body"].clone()).map_err(|e| e.to_string())?;
                    fold.apply(&e);
                    folds.push(fold.clone());
                }
                Some("snapshot") if v["body"]["session"]["state"] == "finished" => {
                    let last: SceneModel = serde_json::from_value(v["body"]["scene"].clone()).map_err(|e| e.to_string())?;
                    if last != fold {
                        return Err("final snapshot differs from the folded stream".into());
                    }
                    break;
                }
                _ => {}
            }
        }
        let rec_log = Recording { frames, folds };

        let mut joined_at = Vec::new();
        for j in joiners {
            let (seen, snapshot_count, final_scene) = j.await.map_err(|e| e.to_string())??;
            let expect = rec_log.folds.get(snapshot_count.0).ok_or("joiner saw more events than recorder")?;
            if &snapshot_count.1 != expect {
                return Err(format!("joiner snapshot at event {} differs from replay", snapshot_count.0));
            }
            if &final_scene != rec_log.folds.last().unwrap() {
                return Err(format!("joiner from event {} ends on a different scene", snapshot_count.0));
            }
            joined_at.push(snapshot_count.0);
            for f in seen {
                validate(&schema, &f)?;
            }
        }
        let _ = stop_tx.send(());
        let back = server.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
        if back.trace().len() + 1 != rec_log.folds.len() {
            return Err(format!("recorded {} events of {}", rec_log.folds.len() - 1, back.trace().len()));
        }
        for f in rec_log.frames.iter().chain(&sent) {
            validate(&schema, f)?;
        }
        joined_at.sort();
        Ok(format!(
            "{} frames valid, {} events, joins at events {:?}",
            rec_log.frames.len() + sent.len(),
            rec_log.folds.len() - 1,
            joined_at
        ))
    }

    type Joined = (Vec<Value>, (usize, SceneModel), SceneModel);

    /// Connects after `delay_ms`, folds the stream on top of the snapshot
    /// and returns the frames, the snapshot scene and the final scene.
    async fn join_after(url: String, delay_ms: u64) -> Result<Joined, String> {
        tokio::time::sleep(Duration::from_millis(delay_ms)).await;
        let (mut ws, _) = connect_async(&url).await.map_err(|e| e.to_string())?;
        let mut frames = vec![next(&mut ws).await?, next(&mut ws).await?];
        let snap: SceneModel = serde_json::from_value(frames[1]["body"]["scene"].clone()).map_err(|e| e.to_string())?;
        let mut fold = snap.clone();
        if frames[1]["body"]["session"]["state"] != "finished" {
            loop {
                let v = next(&mut ws).await?;
                frames.push(v.clone());
                match v["type"].as_str() {
                    Some("event") => {
                        let e: SimEvent = serde_json::from_value(v["body"].clone()).map_err(|e| e.to_string())?;
                        fold.apply(&e);
                    }
                    Some("snapshot") if v["body"]["session"]["state"] == "finished" => break,
                    _ => {}
                }
            }
        }
        Ok((frames, (snap.event_count, snap), fold))
    }

    fn validate(schema: &jsonschema::JSONSchema, frame: &Value) -> Result<(), String> {
        schema.validate(frame).map_err(|errs| {
            let e: Vec<String> = errs.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            format!("frame {} fails schema: {}", frame["type"], e.join("; "))
        })
    }
}
