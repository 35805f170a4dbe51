//! Reference scenes: cube, sphere, bench, random supported blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::{box_mesh, uv_sphere, Mesh, Point3, StlFormat};
use crate::voxel::{Cell, VoxelGrid, DEFAULT_PITCH_MM};

/// Axis-aligned cube of `n` voxels per side at the default pitch.
pub fn cube_mesh(n: usize) -> Mesh {
    let s = n as f64 * DEFAULT_PITCH_MM;
    box_mesh([0.0; 3], [s, s, s])
}

pub fn cube_grid(n: usize) -> VoxelGrid {
    let mut g = VoxelGrid::new(DEFAULT_PITCH_MM, [0.0; 3], [n, n, n]);
    g.fill_box([0, 0, 0], [n as i32; 3]);
    g
}

/// Sphere of diameter 650 mm sitting on the origin corner of its box.
pub fn sphere_mesh() -> Mesh {
    uv_sphere([325.0, 325.0, 325.0], 325.0, 96, 48)
}

/// Bench outline in voxels: 12 long, 6 deep; a seat 6 high and a back
/// rail 2 deep and 8 high along y = 4..6.
pub const BENCH_LEN: i32 = 12;
pub const BENCH_DEPTH: i32 = 6;
pub const BENCH_SEAT_H: i32 = 6;
pub const BENCH_BACK_H: i32 = 8;
pub const BENCH_BACK_Y: i32 = 4;

pub fn bench_grid() -> VoxelGrid {
    let dims = [BENCH_LEN as usize, BENCH_DEPTH as usize, BENCH_BACK_H as usize];
    let mut g = VoxelGrid::new(DEFAULT_PITCH_MM, [0.0; 3], dims);
    g.fill_box([0, 0, 0], [BENCH_LEN, BENCH_BACK_Y, BENCH_SEAT_H]);
    g.fill_box([0, BENCH_BACK_Y, 0], [BENCH_LEN, BENCH_DEPTH - BENCH_BACK_Y, BENCH_BACK_H]);
    g
}

/// Watertight bench mesh: the L-shaped side profile extruded along x.
pub fn bench_mesh() -> Mesh {
    let p = DEFAULT_PITCH_MM;
    let profile: Vec<[f64; 2]> = [
        (0, 0),
        (BENCH_DEPTH, 0),
        (BENCH_DEPTH, BENCH_BACK_H),
        (BENCH_BACK_Y, BENCH_BACK_H),
        (BENCH_BACK_Y, BENCH_SEAT_H),
        (0, BENCH_SEAT_H),
    ]
    .iter()
    .map(|&(y, z)| [y as f64 * p, z as f64 * p])
    .collect();
    extrude_x(&profile, 0.0, BENCH_LEN as f64 * p)
}

/// Bench assembled from boxes: four 1x1 legs three voxels tall, a 7x4x2
/// seat and a one voxel thick back rail. Sizes are deliberately off the
/// 4x2x2 grid.
pub fn bench_composite_mesh() -> Mesh {
    let p = DEFAULT_PITCH_MM;
    let bx = |min: [i32; 3], max: [i32; 3]| box_mesh(min.map(|v| v as f64 * p), max.map(|v| v as f64 * p));
    let mut m = bx([0, 3, 5], [7, 4, 8]).merged(&bx([0, 0, 3], [7, 4, 5]));
    for (x, y) in [(0, 0), (6, 0), (0, 3), (6, 3)] {
        m = m.merged(&bx([x, y, 0], [x + 1, y + 1, 3]));
    }
    m
}

/// Extrudes a counter-clockwise (y, z) polygon between two x planes.
pub fn extrude_x(profile: &[[f64; 2]], x0: f64, x1: f64) -> Mesh {
    let at = |x: f64, q: [f64; 2]| -> Point3 { [x, q[0], q[1]] };
    let mut tris: Vec<[Point3; 3]> = Vec::new();
    for [a, b, c] in ear_clip(profile) {
        // +x cap keeps the profile winding, -x cap reverses it
        tris.push([at(x1, profile[a]), at(x1, profile[b]), at(x1, profile[c])]);
        tris.push([at(x0, profile[a]), at(x0, profile[c]), at(x0, profile[b])]);
    }
    let n = profile.len();
    for i in 0..n {
        let a = profile[i];
        let b = profile[(i + 1) % n];
        tris.push([at(x0, a), at(x0, b), at(x1, b)]);
        tris.push([at(x0, a), at(x1, b), at(x1, a)]);
    }
    Mesh::from_triangles(&tris, StlFormat::BinaryStl)
}

fn ear_clip(poly: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::new();
    while idx.len() > 3 {
        let n = idx.len();
        let ear = (0..n).find(|&i| {
            let (a, b, c) = (idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]);
            if cross(poly[a], poly[b], poly[c]) <= 0.0 {
                return false;
            }
            idx.iter().filter(|&&j| j != a && j != b && j != c).all(|&j| {
                let p = poly[j];
                !(cross(poly[a], poly[b], p) >= 0.0 && cross(poly[b], poly[c], p) >= 0.0 && cross(poly[c], poly[a], p) >= 0.0)
            })
        });
        let i = ear.expect("simple counter-clockwise polygon");
        out.push([idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]]);
        idx.remove(i);
    }
    out.push([idx[0], idx[1], idx[2]]);
    out
}

/// Random face-connected blob inside an `n`-cube where every voxel above
/// the floor rests on another voxel.
pub fn random_blob(n: usize, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = VoxelGrid::new(DEFAULT_PITCH_MM, [0.0; 3], [n, n, n]);
    let total = n * n * n;
    let target = rng.gen_range(total / 10..=total / 2).max(1);
    let ni = n as i32;
    let mut cells: Vec<Cell> = Vec::new();
    let add_column = |g: &mut VoxelGrid, cells: &mut Vec<Cell>, c: Cell| {
        for z in 0..=c[2] {
            let d = [c[0], c[1], z];
            if !g.get(d) {
                g.set(d, true);
                cells.push(d);
            }
        }
    };
    let start = [rng.gen_range(0..ni), rng.gen_range(0..ni), rng.gen_range(0..ni.min(3))];
    add_column(&mut g, &mut cells, start);
    while cells.len() < target {
        let base = cells[rng.gen_range(0..cells.len())];
        let d = crate::voxel::FACE_NEIGHBORS[rng.gen_range(0..6)];
        let c = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
        if g.in_bounds(c) && !g.get(c) {
            add_column(&mut g, &mut cells, c);
        }
    }
    g
}

/// Feed cells for up to four robots around a grid's footprint: -x, +x, -y, +y,
/// each next to the middle of its side on the floor.
pub fn default_feeds(grid: &VoxelGrid, robots: usize) -> Vec<Cell> {
    let [nx, ny, _] = grid.dims().map(|d| d as i32);
    let sides = [[-1, ny / 2 - 1, 0], [nx, ny / 2, 0], [nx / 2, -1, 0], [nx / 2 - 1, ny, 0]];
    (0..robots).map(|i| sides[i % 4]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::mesh_volume;
    use crate::voxel::{connected_components, voxelize, Alignment};

    #[test]
    fn bench_mesh_is_closed_and_voxelizes_to_grid() {
        let m = bench_mesh();
        let v = mesh_volume(&m);
        assert!(v.watertight);
        let cells = (BENCH_LEN * (BENCH_BACK_Y * BENCH_SEAT_H + (BENCH_DEPTH - BENCH_BACK_Y) * BENCH_BACK_H)) as f64;
        assert!((v.volume_mm3 - cells * DEFAULT_PITCH_MM.powi(3)).abs() < 1e-3 * v.volume_mm3);
        let g = voxelize(&m, DEFAULT_PITCH_MM, Alignment::MinCorner).unwrap();
        assert_eq!(g, bench_grid());
    }

    #[test]
    fn composite_bench_voxelizes_to_its_boxes() {
        let m = bench_composite_mesh();
        let g = voxelize(&m, DEFAULT_PITCH_MM, Alignment::MinCorner).unwrap();
        assert_eq!(g.dims(), [7, 4, 8]);
        assert_eq!(g.occupied_count(), 12 + 56 + 21);
        assert!(g.get([0, 0, 0]) && !g.get([1, 0, 0]) && g.get([3, 3, 7]) && !g.get([3, 2, 7]));
        assert_eq!(connected_components(&g).len(), 1);
    }

    #[test]
    fn blobs_are_connected_and_supported() {
        for seed in 0..20 {
            let g = random_blob(6, seed);
            assert_eq!(connected_components(&g).len(), 1);
            for c in g.occupied() {
                assert!(c[2] == 0 || g.get([c[0], c[1], c[2] - 1]));
            }
        }
        assert_eq!(random_blob(6, 3), random_blob(6, 3));
    }
}
