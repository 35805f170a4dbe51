//! STL mesh input and the volume/bounds queries the voxelizer needs.
//!
//! Units are millimetres. Vertices are kept per facet exactly as read; the
//! watertightness check snaps coordinates to a 1e-6 mm grid before matching
//! edges.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

const BINARY_HEADER_LEN: usize = 80;
const BINARY_FACET_LEN: usize = 50;
const SNAP_PER_MM: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("STL is truncated: {actual} bytes, expected at least {expected}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("malformed ASCII facet at line {line}: {reason}")]
    MalformedFacet { line: usize, reason: String },
    #[error("mesh has no triangles")]
    EmptyMesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StlFormat {
    BinaryStl,
    AsciiStl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    pub source_format: StlFormat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVolume {
    pub volume_mm3: f64,
    pub watertight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Point3,
    pub max: Point3,
}

impl Bounds {
    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

impl Mesh {
    /// Builds a mesh from a flat triangle soup (three vertices per facet).
    pub fn from_triangles(tris: &[[Point3; 3]], source_format: StlFormat) -> Self {
        let mut vertices = Vec::with_capacity(tris.len() * 3);
        let mut triangles = Vec::with_capacity(tris.len());
        for t in tris {
            let base = vertices.len();
            vertices.extend_from_slice(t);
            triangles.push([base, base + 1, base + 2]);
        }
        Mesh { vertices, triangles, source_format }
    }

    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn facets(&self) -> impl Iterator<Item = [Point3; 3]> + '_ {
        (0..self.triangles.len()).map(move |i| self.triangle(i))
    }

    pub fn translated(&self, t: Point3) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]])
                .collect(),
            triangles: self.triangles.clone(),
            source_format: self.source_format,
        }
    }

    /// Concatenates two meshes into one triangle soup.
    pub fn merged(&self, other: &Mesh) -> Mesh {
        let offset = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
        Mesh { vertices, triangles, source_format: self.source_format }
    }
}

/// Parses binary or ASCII STL, auto-detecting the flavour.
///
/// A file that starts with `solid` and parses cleanly as ASCII is ASCII.
/// Otherwise it is read as binary; binary exporters frequently write `solid`
/// into the 80-byte header, so an ASCII grammar failure only surfaces when the
/// binary reading is also inconsistent.
pub fn parse_stl(bytes: &[u8]) -> Result<Mesh, MeshError> {
    if bytes.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let looks_ascii = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .map(|start| bytes[start..].starts_with(b"solid"))
        .unwrap_or(false);
    if looks_ascii {
        let ascii = std::str::from_utf8(bytes)
            .map_err(|e| MeshError::MalformedFacet { line: 0, reason: e.to_string() })
            .and_then(parse_ascii);
        match ascii {
            Ok(mesh) => return Ok(mesh),
            Err(ascii_err) => {
                return match parse_binary(bytes) {
                    Ok(mesh) => Ok(mesh),
                    Err(MeshError::EmptyMesh) => Err(MeshError::EmptyMesh),
                    Err(_) => Err(ascii_err),
                };
            }
        }
    }
    parse_binary(bytes)
}

fn parse_binary(bytes: &[u8]) -> Result<Mesh, MeshError> {
    let count_end = BINARY_HEADER_LEN + 4;
    if bytes.len() < count_end {
        return Err(MeshError::TruncatedFile { expected: count_end, actual: bytes.len() });
    }
    let count = u32::from_le_bytes(bytes[BINARY_HEADER_LEN..count_end].try_into().unwrap()) as usize;
    let expected = count_end + count * BINARY_FACET_LEN;
    if bytes.len() < expected {
        return Err(MeshError::TruncatedFile { expected, actual: bytes.len() });
    }
    if count == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let read_f32 = |at: usize| f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
    let mut tris = Vec::with_capacity(count);
    for i in 0..count {
        // skip the 12-byte normal
        let base = count_end + i * BINARY_FACET_LEN + 12;
        let mut tri = [[0.0; 3]; 3];
        for (v, vert) in tri.iter_mut().enumerate() {
            for (c, coord) in vert.iter_mut().enumerate() {
                *coord = read_f32(base + v * 12 + c * 4);
            }
        }
        tris.push(tri);
    }
    Ok(Mesh::from_triangles(&tris, StlFormat::BinaryStl))
}

struct Tokens<'a> {
    toks: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn peek(&self) -> Option<(usize, &'a str)> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let t = self.peek();
        self.pos += 1;
        t
    }

    fn last_line(&self) -> usize {
        self.toks.last().map(|t| t.0).unwrap_or(0)
    }

    fn expect(&mut self, word: &str) -> Result<(), MeshError> {
        match self.next() {
            Some((_, tok)) if tok == word => Ok(()),
            Some((line, tok)) => Err(MeshError::MalformedFacet {
                line,
                reason: format!("expected '{word}', found '{tok}'"),
            }),
            None => Err(MeshError::MalformedFacet {
                line: self.last_line(),
                reason: format!("unexpected end of file, expected '{word}'"),
            }),
        }
    }

    fn number(&mut self) -> Result<f64, MeshError> {
        match self.next() {
            Some((line, tok)) => tok.parse::<f64>().map_err(|_| MeshError::MalformedFacet {
                line,
                reason: format!("'{tok}' is not a number"),
            }),
            None => Err(MeshError::MalformedFacet {
                line: self.last_line(),
                reason: "unexpected end of file".into(),
            }),
        }
    }
}

fn parse_ascii(text: &str) -> Result<Mesh, MeshError> {
    let mut tokens = Tokens {
        toks: text
            .lines()
            .enumerate()
            .flat_map(|(ln, line)| line.split_whitespace().map(move |tok| (ln + 1, tok)))
            .collect(),
        pos: 0,
    };
    tokens.expect("solid")?;
    // optional solid name
    while let Some((_, tok)) = tokens.peek() {
        if tok == "facet" || tok == "endsolid" {
            break;
        }
        tokens.next();
    }

    let mut tris = Vec::new();
    loop {
        match tokens.next() {
            Some((_, "endsolid")) => break,
            Some((_, "facet")) => {
                tokens.expect("normal")?;
                for _ in 0..3 {
                    tokens.number()?;
                }
                tokens.expect("outer")?;
                tokens.expect("loop")?;
                let mut tri = [[0.0; 3]; 3];
                for vert in tri.iter_mut() {
                    tokens.expect("vertex")?;
                    for coord in vert.iter_mut() {
                        *coord = tokens.number()?;
                    }
                }
                tokens.expect("endloop")?;
                tokens.expect("endfacet")?;
                tris.push(tri);
            }
            Some((line, other)) => {
                return Err(MeshError::MalformedFacet { line, reason: format!("unexpected token '{other}'") })
            }
            None => {
                return Err(MeshError::MalformedFacet {
                    line: tokens.last_line(),
                    reason: "missing 'endsolid'".into(),
                })
            }
        }
    }
    if tris.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    Ok(Mesh::from_triangles(&tris, StlFormat::AsciiStl))
}

fn facet_normal(t: &[Point3; 3]) -> Point3 {
    let n = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        [n[0] / len, n[1] / len, n[2] / len]
    } else {
        [0.0, 0.0, 0.0]
    }
}

pub fn write_binary_stl(mesh: &Mesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + mesh.triangles.len() * BINARY_FACET_LEN);
    let mut header = [0u8; BINARY_HEADER_LEN];
    header[..14].copy_from_slice(b"lattice binary");
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in mesh.facets() {
        for c in facet_normal(&t) {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for v in &t {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn write_ascii_stl(mesh: &Mesh, name: &str) -> String {
    let mut out = format!("solid {name}\n");
    for t in mesh.facets() {
        let n = facet_normal(&t);
        let _ = writeln!(out, "  facet normal {:e} {:e} {:e}", n[0], n[1], n[2]);
        out.push_str("    outer loop\n");
        for v in &t {
            let _ = writeln!(out, "      vertex {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        out.push_str("    endloop\n  endfacet\n");
    }
    let _ = writeln!(out, "endsolid {name}");
    out
}

/// Signed-tetrahedron volume sum (origin apex) and the 2-manifold edge test.
pub fn mesh_volume(mesh: &Mesh) -> MeshVolume {
    let signed: f64 = mesh
        .facets()
        .map(|[a, b, c]| dot(a, cross(b, c)) / 6.0)
        .sum();

    let snap = |p: Point3| -> [i64; 3] {
        [
            (p[0] * SNAP_PER_MM).round() as i64,
            (p[1] * SNAP_PER_MM).round() as i64,
            (p[2] * SNAP_PER_MM).round() as i64,
        ]
    };
    let mut edges: HashMap<([i64; 3], [i64; 3]), u32> = HashMap::new();
    for t in mesh.facets() {
        let s = [snap(t[0]), snap(t[1]), snap(t[2])];
        for (a, b) in [(s[0], s[1]), (s[1], s[2]), (s[2], s[0])] {
            let key = if a <= b { (a, b) } else { (b, a) };
            *edges.entry(key).or_insert(0) += 1;
        }
    }
    let watertight = !edges.is_empty() && edges.values().all(|&n| n == 2);
    MeshVolume { volume_mm3: signed.abs(), watertight }
}

pub fn mesh_bounds(mesh: &Mesh) -> Result<Bounds, MeshError> {
    let first = *mesh.vertices.first().ok_or(MeshError::EmptyMesh)?;
    let mut b = Bounds { min: first, max: first };
    for v in &mesh.vertices {
        b.min = std::array::from_fn(|i| b.min[i].min(v[i]));
        b.max = std::array::from_fn(|i| b.max[i].max(v[i]));
    }
    Ok(b)
}

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Closed axis-aligned box, outward-wound, 12 triangles.
pub fn box_mesh(min: Point3, max: Point3) -> Mesh {
    let [x0, y0, z0] = min;
    let [x1, y1, z1] = max;
    let c = [
        [x0, y0, z0],
        [x1, y0, z0],
        [x1, y1, z0],
        [x0, y1, z0],
        [x0, y0, z1],
        [x1, y0, z1],
        [x1, y1, z1],
        [x0, y1, z1],
    ];
    let quads = [
        [0, 3, 2, 1], // -z
        [4, 5, 6, 7], // +z
        [0, 1, 5, 4], // -y
        [2, 3, 7, 6], // +y
        [0, 4, 7, 3], // -x
        [1, 2, 6, 5], // +x
    ];
    let mut tris = Vec::with_capacity(12);
    for q in quads {
        tris.push([c[q[0]], c[q[1]], c[q[2]]]);
        tris.push([c[q[0]], c[q[2]], c[q[3]]]);
    }
    Mesh::from_triangles(&tris, StlFormat::BinaryStl)
}

/// Latitude/longitude tessellated sphere. The facets lie inside the true
/// sphere; with 96x48 segments the chord sag at r = 325 mm is below 0.5 mm.
pub fn uv_sphere(center: Point3, radius: f64, segments: usize, rings: usize) -> Mesh {
    use std::f64::consts::PI;
    let point = |ring: usize, seg: usize| -> Point3 {
        let theta = PI * ring as f64 / rings as f64;
        let phi = 2.0 * PI * (seg % segments) as f64 / segments as f64;
        [
            center[0] + radius * theta.sin() * phi.cos(),
            center[1] + radius * theta.sin() * phi.sin(),
            center[2] + radius * theta.cos(),
        ]
    };
    let mut tris = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let a = point(r, s);
            let b = point(r + 1, s);
            let c = point(r + 1, s + 1);
            let d = point(r, s + 1);
            if r != 0 {
                tris.push([a, b, d]);
            }
            if r != rings - 1 {
                tris.push([b, c, d]);
            }
        }
    }
    Mesh::from_triangles(&tris, StlFormat::BinaryStl)
}
