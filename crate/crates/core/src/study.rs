//! Study tables: build time trends and pattern-set trade-offs.

use std::io::Write;

use serde::Serialize;

use crate::fixtures::{bench_composite_mesh, cube_mesh, sphere_mesh};
use crate::mesh::Mesh;
use crate::simulator::StudyRow;
use crate::tiler::{default_patterns, pareto_report, BlockPattern, ParetoRow};
use crate::voxel::{voxelize, Alignment, VoxelError, DEFAULT_PITCH_MM};

pub const SCALING_SIZES: [usize; 3] = [4, 8, 16];
pub const SCALING_ROBOTS: [usize; 3] = [1, 2, 4];
pub const SCALING_CAPACITY: usize = 2;
pub const CARRYING_SIZE: usize = 8;
pub const CARRYING_CAPACITIES: [usize; 3] = [1, 2, 3];

/// Unit blocks only versus 4x2x2 blocks with unit infill.
pub fn carrying_pattern_sets() -> Vec<Vec<BlockPattern>> {
    vec![vec![BlockPattern::UNIT], vec![BlockPattern::new(4, 2, 2), BlockPattern::UNIT]]
}

/// Hierarchical, unit-only and large-block-only sets.
pub fn pareto_pattern_sets() -> Vec<Vec<BlockPattern>> {
    vec![default_patterns(), vec![BlockPattern::UNIT], vec![BlockPattern::new(4, 2, 2)]]
}

/// Cube (6 voxels a side), 650 mm sphere and a composite bench.
pub fn pareto_fixtures() -> Vec<(&'static str, Mesh)> {
    vec![("cube", cube_mesh(6)), ("sphere", sphere_mesh()), ("bench", bench_composite_mesh())]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoStudyRow {
    pub fixture: String,
    #[serde(flatten)]
    pub row: ParetoRow,
}

pub fn pareto_study(fixtures: &[(&str, Mesh)], sets: &[Vec<BlockPattern>]) -> Result<Vec<ParetoStudyRow>, VoxelError> {
    let mut out = Vec::new();
    for (name, mesh) in fixtures {
        let grid = voxelize(mesh, DEFAULT_PITCH_MM, Alignment::MinCorner)?;
        out.extend(pareto_report(&grid, mesh, sets).into_iter().map(|row| ParetoStudyRow { fixture: name.to_string(), row }));
    }
    Ok(out)
}

pub fn write_study_csv<W: Write>(w: W, rows: &[StudyRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let with_patterns = rows.iter().any(|r| r.patterns.is_some());
    let mut header = vec!["size", "robots", "capacity", "time_s", "throughput_mm3_min"];
    if with_patterns {
        header.push("patterns");
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.size.to_string(),
            r.robots.to_string(),
            r.capacity.to_string(),
            format!("{:.3}", r.time_s),
            format!("{:.1}", r.throughput_mm3_min),
        ];
        if with_patterns {
            rec.push(r.patterns.clone().unwrap_or_default());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pareto_csv<W: Write>(w: W, rows: &[ParetoStudyRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fixture", "pattern_set", "placement_count", "covered_voxels", "coverage", "precision"])?;
    for r in rows {
        out.write_record([
            r.fixture.clone(),
            r.row.pattern_set.clone(),
            r.row.placement_count.to_string(),
            r.row.covered_voxels.to_string(),
            format!("{:.6}", r.row.coverage),
            format!("{:.6}", r.row.precision),
        ])?;
    }
    out.flush()?;
    Ok(())
}
