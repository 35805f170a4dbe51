use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lattice_core::fixtures::cube_mesh;
use lattice_core::mesh::write_binary_stl;
use lattice_core::simulator::Metrics;
use lattice_core::tiler::TilingFile;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn lattice(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lattice")).args(args).output().expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// STL -> grid -> tiling -> plan for the 260 mm cube.
fn cube_pipeline(dir: &Path) -> PathBuf {
    let stl = dir.join("cube.stl");
    fs::write(&stl, write_binary_stl(&cube_mesh(4))).unwrap();
    let grid = dir.join("cube.grid.json");
    let (code, out) = lattice(&["voxelize", "--input", s(&stl), "--pitch-mm", "65", "--output", s(&grid)]);
    assert_eq!(code, 0, "{out}");
    let tiles = dir.join("cube.tiles.json");
    let (code, out) = lattice(&["tile", "--grid", s(&grid), "--patterns", "4x2x2,1x1x1", "--output", s(&tiles)]);
    assert_eq!(code, 0, "{out}");
    let plan = dir.join("cube.plan.json");
    let (code, out) = lattice(&["plan", "--blocks", s(&tiles), "--robots", "1", "--capacity", "2", "--output", s(&plan)]);
    assert_eq!(code, 0, "{out}");
    plan
}

#[test]
fn cube_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let plan = cube_pipeline(dir.path());
    assert_eq!(json(&dir.path().join("cube.grid.report.json"))["n_voxel"], 64);
    let tiles: TilingFile = serde_json::from_value(json(&dir.path().join("cube.tiles.json"))).unwrap();
    assert_eq!(tiles.placements.len(), 4);

    let trace = dir.path().join("run.trace.jsonl");
    let metrics = dir.path().join("run.metrics.json");
    let (code, out) =
        lattice(&["simulate", "--plan", s(&plan), "--seed", "0", "--trace", s(&trace), "--metrics", s(&metrics)]);
    assert_eq!(code, 0, "{out}");
    let m: Metrics = serde_json::from_value(json(&metrics)).unwrap();
    assert_eq!(m.placed_volume_mm3, 17_576_000.0);
    assert!((m.volumetric_throughput_mm3_per_min - 4_394_000.0).abs() / 4_394_000.0 < 0.15);
}

#[test]
fn simulate_is_reproducible_and_manifest_hashes_match() {
    let dir = tempfile::tempdir().unwrap();
    let plan = cube_pipeline(dir.path());
    let mut traces = Vec::new();
    for k in 0..2 {
        let trace = dir.path().join(format!("r{k}.trace.jsonl"));
        let metrics = dir.path().join(format!("r{k}.json"));
        let (code, out) =
            lattice(&["simulate", "--plan", s(&plan), "--seed", "9", "--trace", s(&trace), "--metrics", s(&metrics)]);
        assert_eq!(code, 0, "{out}");
        let manifest = json(&dir.path().join(format!("r{k}.manifest.json")));
        let plan_hash = hex::encode(Sha256::digest(fs::read(&plan).unwrap()));
        assert_eq!(manifest["inputs"][0]["sha256"], plan_hash.as_str());
        assert_eq!(manifest["command"], "simulate");
        assert_eq!(manifest["parameters"]["seed"], 9);
        let trace_hash = hex::encode(Sha256::digest(fs::read(&trace).unwrap()));
        assert_eq!(manifest["outputs"][0]["sha256"], trace_hash.as_str());
        traces.push(fs::read(&trace).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn missing_input_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let (code, _) = lattice(&["voxelize", "--input", "/nonexistent/mesh.stl", "--output", s(&out)]);
    assert_eq!(code, 2);
}

#[test]
fn empty_mesh_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let stl = dir.path().join("empty.stl");
    fs::write(&stl, "solid empty\nendsolid empty\n").unwrap();
    let (code, out) = lattice(&["voxelize", "--input", s(&stl), "--output", s(&dir.path().join("g.json"))]);
    assert_eq!(code, 3, "{out}");
}

#[test]
fn pattern_set_without_unit_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    cube_pipeline(dir.path());
    let grid = dir.path().join("cube.grid.json");
    let (code, out) = lattice(&["tile", "--grid", s(&grid), "--patterns", "2x2x2", "--output", s(&dir.path().join("t.json"))]);
    assert_eq!(code, 4, "{out}");
}

#[test]
fn floating_blocks_are_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    cube_pipeline(dir.path());
    let mut tiles: TilingFile = serde_json::from_value(json(&dir.path().join("cube.tiles.json"))).unwrap();
    tiles.placements.retain(|p| p.anchor[2] >= 2);
    assert!(!tiles.placements.is_empty());
    let floating = dir.path().join("floating.json");
    fs::write(&floating, serde_json::to_vec(&tiles).unwrap()).unwrap();
    let (code, out) = lattice(&["plan", "--blocks", s(&floating), "--output", s(&dir.path().join("p.json"))]);
    assert_eq!(code, 5, "{out}");
    assert!(dir.path().join("p.report.json").exists());
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    cube_pipeline(dir.path());
    let tiles = dir.path().join("cube.tiles.json");
    let (code, _) = lattice(&["plan", "--blocks", s(&tiles), "--robots", "2", "--feeds", "-1,1,0", "--output", "p.json"]);
    assert_eq!(code, 64);
    assert_eq!(lattice(&["frobnicate"]).0, 64);
    assert_eq!(lattice(&["voxelize"]).0, 64);
    assert_eq!(lattice(&["--help"]).0, 0);
}

#[test]
fn bad_sim_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = cube_pipeline(dir.path());
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "t_step = -1.0\n").unwrap();
    let (code, out) = lattice(&[
        "simulate",
        "--plan",
        s(&plan),
        "--config",
        s(&cfg),
        "--trace",
        s(&dir.path().join("t.jsonl")),
        "--metrics",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(code, 2, "{out}");
}

#[test]
fn calibrate_reports_the_shipped_step_time() {
    let (code, out) = lattice(&["calibrate"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("18.5"), "{out}");
}
