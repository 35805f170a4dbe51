//! C ABI over lattice-core.
//!
//! Every pipeline stage is an opaque handle created by one call and released
//! by its `_free`. Fallible calls return a [`LatticeStatus`] and write the
//! result through an out pointer; on failure [`lattice_last_error`] holds a
//! message for the calling thread. Strings handed out are owned by the caller
//! and released with [`lattice_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lattice_core::fixtures::default_feeds;
use lattice_core::mesh::{parse_stl, Mesh, MeshError};
use lattice_core::sequencer::{plan_build, BuildPlan, Feed, PlanConfig, PlanError};
use lattice_core::simulator::{self, SimConfig, SimError, SimOutput};
use lattice_core::tiler::{parse_pattern_list, tile, Tiling};
use lattice_core::voxel::{voxelize, Alignment, VoxelError, VoxelGrid};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    DegenerateMesh = 4,
    BadPatterns = 5,
    Infeasible = 6,
    Deadlock = 7,
    InvalidArgument = 8,
    Panic = 99,
}

pub const LATTICE_ALIGN_MIN_CORNER: u32 = 0;
pub const LATTICE_ALIGN_CENTERED: u32 = 1;

pub struct LatticeMesh(Mesh);
pub struct LatticeGrid(VoxelGrid);
pub struct LatticeTiling(Tiling);
pub struct LatticePlan {
    plan: BuildPlan,
    cfg: PlanConfig,
}
pub struct LatticeSimResult(SimOutput);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Res<T> = Result<T, (LatticeStatus, String)>;

fn err<T>(status: LatticeStatus, msg: impl ToString) -> Res<T> {
    Err((status, msg.to_string()))
}

/// Runs `f` with panics caught and maps the outcome to a status.
fn guard(f: impl FnOnce() -> Res<()>) -> LatticeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LatticeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            LatticeStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Res<&'a T> {
    p.as_ref().ok_or((LatticeStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out<T>(p: *mut *mut T, value: T) -> Res<()> {
    if p.is_null() {
        return err(LatticeStatus::NullArgument, "out pointer is null");
    }
    *p = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Res<&'a str> {
    if p.is_null() {
        return err(LatticeStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (LatticeStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn out_string(p: *mut *mut c_char, s: String) -> Res<()> {
    if p.is_null() {
        return err(LatticeStatus::NullArgument, "out pointer is null");
    }
    *p = CString::new(s).map_err(|e| (LatticeStatus::Panic, e.to_string()))?.into_raw();
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn json<T: serde::Serialize>(v: &T) -> Res<String> {
    serde_json::to_string(v).map_err(|e| (LatticeStatus::Panic, e.to_string()))
}

fn voxel_status(e: VoxelError) -> (LatticeStatus, String) {
    let s = match e {
        VoxelError::Mesh(MeshError::EmptyMesh) | VoxelError::DegenerateMesh | VoxelError::ZeroMeshVolume => {
            LatticeStatus::DegenerateMesh
        }
        VoxelError::InvalidPitch(_) => LatticeStatus::InvalidArgument,
        _ => LatticeStatus::Parse,
    };
    (s, e.to_string())
}

fn sim_status(e: SimError) -> (LatticeStatus, String) {
    let s = match e {
        SimError::DeadlockDetected { .. } => LatticeStatus::Deadlock,
        _ => LatticeStatus::InvalidArgument,
    };
    (s, e.to_string())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn lattice_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lattice_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn lattice_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses ASCII or binary STL bytes.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out_mesh` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_mesh_from_stl(bytes: *const u8, len: usize, out_mesh: *mut *mut LatticeMesh) -> LatticeStatus {
    guard(|| {
        if bytes.is_null() {
            return err(LatticeStatus::NullArgument, "bytes is null");
        }
        let data = std::slice::from_raw_parts(bytes, len);
        let mesh = parse_stl(data).map_err(|e| match e {
            MeshError::EmptyMesh => (LatticeStatus::DegenerateMesh, e.to_string()),
            _ => (LatticeStatus::Parse, e.to_string()),
        })?;
        out(out_mesh, LatticeMesh(mesh))
    })
}

/// Null yields the zero value.
///
/// # Safety
/// `mesh` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_mesh_triangle_count(mesh: *const LatticeMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.facets().count())
}

/// # Safety
/// `mesh` must come from [`lattice_mesh_from_stl`] or be null.
#[no_mangle]
pub unsafe extern "C" fn lattice_mesh_free(mesh: *mut LatticeMesh) {
    free(mesh)
}

/// `alignment` is `LATTICE_ALIGN_MIN_CORNER` or `LATTICE_ALIGN_CENTERED`.
///
/// # Safety
/// `mesh` must be a live handle; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_voxelize(
    mesh: *const LatticeMesh,
    pitch_mm: f64,
    alignment: u32,
    out_grid: *mut *mut LatticeGrid,
) -> LatticeStatus {
    guard(|| {
        let mesh = deref(mesh, "mesh")?;
        let align = match alignment {
            LATTICE_ALIGN_MIN_CORNER => Alignment::MinCorner,
            LATTICE_ALIGN_CENTERED => Alignment::Centered,
            a => return err(LatticeStatus::InvalidArgument, format!("unknown alignment {a}")),
        };
        let grid = voxelize(&mesh.0, pitch_mm, align).map_err(voxel_status)?;
        out(out_grid, LatticeGrid(grid))
    })
}

/// Null yields the zero value.
///
/// # Safety
/// `grid` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_grid_occupied_count(grid: *const LatticeGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.occupied_count())
}

/// Grid file JSON.
///
/// # Safety
/// `grid` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_grid_to_json(grid: *const LatticeGrid, out_json: *mut *mut c_char) -> LatticeStatus {
    guard(|| out_string(out_json, json(&deref(grid, "grid")?.0.to_file())?))
}

/// # Safety
/// `grid` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lattice_grid_free(grid: *mut LatticeGrid) {
    free(grid)
}

/// `patterns` is a comma list such as `"4x2x2,1x1x1"`; null means the default set.
///
/// # Safety
/// `grid` must be a live handle, `patterns` null or a C string, `out_tiling` writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_tile(
    grid: *const LatticeGrid,
    patterns: *const c_char,
    out_tiling: *mut *mut LatticeTiling,
) -> LatticeStatus {
    guard(|| {
        let grid = deref(grid, "grid")?;
        let set = if patterns.is_null() {
            lattice_core::tiler::default_patterns()
        } else {
            parse_pattern_list(text(patterns, "patterns")?).map_err(|e| (LatticeStatus::BadPatterns, e.to_string()))?
        };
        let tiling = tile(&grid.0, &set).map_err(|e| (LatticeStatus::BadPatterns, e.to_string()))?;
        out(out_tiling, LatticeTiling(tiling))
    })
}

/// Null yields the zero value.
///
/// # Safety
/// `tiling` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_tiling_placement_count(tiling: *const LatticeTiling) -> usize {
    tiling.as_ref().map_or(0, |t| t.0.placements.len())
}

/// Tiling file JSON; needs the grid it was made from for the metadata.
///
/// # Safety
/// Both handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_tiling_to_json(
    tiling: *const LatticeTiling,
    grid: *const LatticeGrid,
    out_json: *mut *mut c_char,
) -> LatticeStatus {
    guard(|| {
        let (t, g) = (deref(tiling, "tiling")?, deref(grid, "grid")?);
        out_string(out_json, json(&t.0.to_file(&g.0))?)
    })
}

/// # Safety
/// `tiling` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lattice_tiling_free(tiling: *mut LatticeTiling) {
    free(tiling)
}

/// Plans with feeds on the sides of the footprint (up to four robots).
/// An infeasible plan returns `Infeasible` and no handle.
///
/// # Safety
/// Both inputs must be live handles; `out_plan` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_plan(
    grid: *const LatticeGrid,
    tiling: *const LatticeTiling,
    robots: usize,
    capacity: usize,
    out_plan: *mut *mut LatticePlan,
) -> LatticeStatus {
    guard(|| {
        let (g, t) = (deref(grid, "grid")?, deref(tiling, "tiling")?);
        if !(1..=4).contains(&robots) || capacity == 0 {
            return err(LatticeStatus::InvalidArgument, "robots must be 1 to 4 and capacity at least 1");
        }
        let cfg = PlanConfig { capacity, ..Default::default() };
        let feeds = Feed::numbered_all(&default_feeds(&g.0, robots));
        let (plan, report) = plan_build(&g.0, &t.0, &feeds, &cfg).map_err(|e: PlanError| (LatticeStatus::Infeasible, e.to_string()))?;
        if !report.is_feasible() {
            return err(LatticeStatus::Infeasible, format!("{} blocking violations", report.blocking().count()));
        }
        out(out_plan, LatticePlan { plan, cfg })
    })
}

/// Null yields the zero value.
///
/// # Safety
/// `plan` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_plan_placement_count(plan: *const LatticePlan) -> usize {
    plan.as_ref().map_or(0, |p| p.plan.placements.len())
}

/// # Safety
/// `plan` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_plan_to_json(plan: *const LatticePlan, out_json: *mut *mut c_char) -> LatticeStatus {
    guard(|| out_string(out_json, json(&deref(plan, "plan")?.plan)?))
}

/// # Safety
/// `plan` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lattice_plan_free(plan: *mut LatticePlan) {
    free(plan)
}

/// Runs the simulator. `config_toml` may be null for the calibrated defaults.
///
/// # Safety
/// `plan` must be a live handle, `config_toml` null or a C string, `out_result` writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_simulate(
    plan: *const LatticePlan,
    config_toml: *const c_char,
    seed: u64,
    out_result: *mut *mut LatticeSimResult,
) -> LatticeStatus {
    guard(|| {
        let p = deref(plan, "plan")?;
        let cfg = if config_toml.is_null() {
            SimConfig::default()
        } else {
            SimConfig::from_toml(text(config_toml, "config_toml")?).map_err(|e| (LatticeStatus::Parse, e.to_string()))?
        };
        let res = simulator::run(&p.plan, &cfg, &p.cfg, seed).map_err(sim_status)?;
        out(out_result, LatticeSimResult(res))
    })
}

/// Null yields the zero value.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_sim_total_time_s(result: *const LatticeSimResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.0.metrics.total_time_s)
}

/// Null yields the zero value.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lattice_sim_throughput_mm3_per_min(result: *const LatticeSimResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.0.metrics.volumetric_throughput_mm3_per_min)
}

/// # Safety
/// `result` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_sim_metrics_json(result: *const LatticeSimResult, out_json: *mut *mut c_char) -> LatticeStatus {
    guard(|| out_string(out_json, json(&deref(result, "result")?.0.metrics)?))
}

/// One JSON event per line.
///
/// # Safety
/// `result` must be a live handle; `out_jsonl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lattice_sim_trace_jsonl(result: *const LatticeSimResult, out_jsonl: *mut *mut c_char) -> LatticeStatus {
    guard(|| out_string(out_jsonl, simulator::write_trace_jsonl(&deref(result, "result")?.0.trace)))
}

/// # Safety
/// `result` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn lattice_sim_free(result: *mut LatticeSimResult) {
    free(result)
}
