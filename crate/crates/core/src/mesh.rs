//! Zero-level-set triangulation, mesh sampling, and PLY/OBJ IO.
//!
//! The cube case table is generated once at startup from first principles:
//! for each of the 256 sign configurations, crossed edges are paired on each
//! face (ambiguous faces resolved by always isolating the inside corners,
//! which depends only on the face's sign pattern and therefore agrees
//! between neighboring cells), chained into loops, fanned into triangles,
//! and wound so normals point toward positive field values.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::geom::{self, Vec3};
use crate::render::DistanceSource;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("mesh has no area to sample")]
    ZeroArea,
    #[error("resolution {got} too small, need at least 8")]
    ResolutionTooSmall { got: usize },
}

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)))
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    /// Apply `f` to every vertex (de-normalization on export).
    pub fn map_vertices(&mut self, f: impl Fn(Vec3) -> Vec3) {
        for v in &mut self.vertices {
            *v = f(*v);
        }
    }
}

// Cube corner i sits at ((i>>0)&1, (i>>1)&1, (i>>2)&1).
const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 3),
    (3, 2),
    (2, 0),
    (4, 5),
    (5, 7),
    (7, 6),
    (6, 4),
    (0, 4),
    (1, 5),
    (3, 7),
    (2, 6),
];

// Each face: 4 corners in cyclic order (outward normal irrelevant here) and
// the 4 edges joining consecutive corners.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2], // z = 0
    [4, 5, 7, 6], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 2, 6, 4], // x = 0
    [1, 3, 7, 5], // x = 1
];

fn corner_pos(i: usize) -> Vec3 {
    [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
}

fn edge_between(a: usize, b: usize) -> usize {
    EDGE_CORNERS
        .iter()
        .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("corners share an edge")
}

/// Triangles (as edge-index triples) for every corner-sign configuration.
fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(build_case).collect())
}

fn build_case(config: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| config >> c & 1 == 1;
    // Segments between crossing points, keyed by edge index.
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for face in &FACES {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let a = face[k];
            let b = face[(k + 1) % 4];
            if inside(a) != inside(b) {
                crossings.push((k, edge_between(a, b)));
            }
        }
        match crossings.len() {
            0 => {}
            2 => segments.push((crossings[0].1, crossings[1].1)),
            4 => {
                // Ambiguous face: opposite corners share a sign. Pair the
                // crossings so each segment cuts off one inside corner.
                // crossings[k].0 is the face-side index; side k runs from
                // corner k to corner k+1, so the segment isolating corner c
                // joins the crossings on sides c-1 and c.
                let seg_for = |c: usize| {
                    let prev = (c + 3) % 4;
                    let e1 = crossings.iter().find(|x| x.0 == prev).unwrap().1;
                    let e2 = crossings.iter().find(|x| x.0 == c).unwrap().1;
                    (e1, e2)
                };
                for c in 0..4 {
                    if inside(face[c]) && !inside(face[(c + 1) % 4]) && !inside(face[(c + 3) % 4])
                    {
                        segments.push(seg_for(c));
                    }
                }
            }
            _ => unreachable!("faces have an even number of crossings"),
        }
    }
    if segments.is_empty() {
        return Vec::new();
    }
    // Chain segments into closed loops; every crossed edge appears in
    // exactly two segments.
    let mut adjacency: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(a, b) in &segments {
        adjacency.entry(a).or_default().push(b);
        adjacency.entry(b).or_default().push(a);
    }
    let mut used: Vec<(usize, usize)> = Vec::new();
    let mut loops: Vec<Vec<usize>> = Vec::new();
    let mut keys: Vec<usize> = adjacency.keys().copied().collect();
    keys.sort_unstable();
    for &start in &keys {
        if used.iter().any(|&(a, _)| a == start) {
            continue;
        }
        let mut path = vec![start];
        let mut current = start;
        loop {
            let next = adjacency[&current]
                .iter()
                .copied()
                .find(|&n| {
                    !used.contains(&(current, n))
                        && !used.contains(&(n, current))
                })
                .expect("crossing graph is 2-regular");
            used.push((current, next));
            used.push((next, current));
            if next == start {
                break;
            }
            path.push(next);
            current = next;
        }
        loops.push(path);
    }
    // Canonical crossing positions: edge midpoints with inside = -1,
    // outside = +1 at corners. Used to fix the winding per case.
    let midpoint = |e: usize| {
        let (a, b) = EDGE_CORNERS[e];
        geom::scale(geom::add(corner_pos(a), corner_pos(b)), 0.5)
    };
    // Trilinear field gradient direction at a point for the canonical corner
    // values (points from inside toward outside).
    let grad = |p: Vec3| {
        let mut g = [0.0; 3];
        for c in 0..8 {
            let v = if inside(c) { -1.0f64 } else { 1.0 };
            let pos = corner_pos(c);
            let w = |axis: usize| {
                if pos[axis] > 0.5 {
                    p[axis]
                } else {
                    1.0 - p[axis]
                }
            };
            let dw = |axis: usize| if pos[axis] > 0.5 { 1.0 } else { -1.0 };
            g[0] += v * dw(0) * w(1) * w(2);
            g[1] += v * w(0) * dw(1) * w(2);
            g[2] += v * w(0) * w(1) * dw(2);
        }
        g
    };
    let mut triangles = Vec::new();
    for mut l in loops {
        // Orient the whole loop at once (Newell normal against the field
        // gradient at the loop centroid), then fan; per-triangle checks can
        // disagree on skewed loops and break the shared-edge convention.
        let pts: Vec<Vec3> = l.iter().map(|&e| midpoint(e)).collect();
        let mut normal = [0.0; 3];
        let mut centroid = [0.0; 3];
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            normal[0] += (a[1] - b[1]) * (a[2] + b[2]);
            normal[1] += (a[2] - b[2]) * (a[0] + b[0]);
            normal[2] += (a[0] - b[0]) * (a[1] + b[1]);
            centroid = geom::add(centroid, a);
        }
        centroid = geom::scale(centroid, 1.0 / pts.len() as f64);
        if geom::dot(normal, grad(centroid)) < 0.0 {
            l.reverse();
        }
        for i in 1..l.len() - 1 {
            triangles.push([l[0], l[i], l[i + 1]]);
        }
    }
    triangles
}

/// Extract the zero-level set of `field` over the axis-aligned box
/// `[min, max]^3` on a grid with `resolution` cells per axis. Emits a
/// warning count of zero when no crossing exists (empty mesh).
pub fn marching_cubes(
    field: &dyn DistanceSource,
    resolution: usize,
    bounds: (Vec3, Vec3),
) -> Result<TriangleMesh, MeshError> {
    if resolution < 8 {
        return Err(MeshError::ResolutionTooSmall { got: resolution });
    }
    let (lo, hi) = bounds;
    let n = resolution;
    let np = n + 1;
    let step = [
        (hi[0] - lo[0]) / n as f64,
        (hi[1] - lo[1]) / n as f64,
        (hi[2] - lo[2]) / n as f64,
    ];
    let pos = |ix: usize, iy: usize, iz: usize| -> Vec3 {
        [
            lo[0] + ix as f64 * step[0],
            lo[1] + iy as f64 * step[1],
            lo[2] + iz as f64 * step[2],
        ]
    };
    // Field values on the corner lattice, batched per z-plane in parallel.
    let planes: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|iz| {
            let mut pts = Tensor::zeros(np * np, 3);
            for iy in 0..np {
                for ix in 0..np {
                    pts.row_mut(iy * np + ix).copy_from_slice(&pos(ix, iy, iz));
                }
            }
            field.values(&pts).data().to_vec()
        })
        .collect();
    let value = |ix: usize, iy: usize, iz: usize| planes[iz][iy * np + ix];

    let table = case_table();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Shared crossing vertices keyed by canonical lattice edge.
    let mut edge_vertex: HashMap<(u8, usize, usize, usize), u32> = HashMap::new();
    let corner_offset = |c: usize| (c & 1, (c >> 1) & 1, (c >> 2) & 1);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let mut config = 0usize;
                for c in 0..8 {
                    let (dx, dy, dz) = corner_offset(c);
                    if value(ix + dx, iy + dy, iz + dz) < 0.0 {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [0u32; 12];
                let mut have = [false; 12];
                for tri in tris {
                    for &e in tri {
                        if have[e] {
                            continue;
                        }
                        let (a, b) = EDGE_CORNERS[e];
                        let (ax, ay, az) = corner_offset(a);
                        let (bx, by, bz) = corner_offset(b);
                        let ga = (ix + ax, iy + ay, iz + az);
                        let gb = (ix + bx, iy + by, iz + bz);
                        // Canonical key: lower corner plus axis.
                        let (axis, key) = if ga.0 != gb.0 {
                            (0u8, (ga.0.min(gb.0), ga.1, ga.2))
                        } else if ga.1 != gb.1 {
                            (1u8, (ga.0, ga.1.min(gb.1), ga.2))
                        } else {
                            (2u8, (ga.0, ga.1, ga.2.min(gb.2)))
                        };
                        let id = *edge_vertex
                            .entry((axis, key.0, key.1, key.2))
                            .or_insert_with(|| {
                                let fa = value(ga.0, ga.1, ga.2);
                                let fb = value(gb.0, gb.1, gb.2);
                                // Keep crossings off the lattice corners so
                                // no triangle degenerates to zero area.
                                let t = (fa / (fa - fb)).clamp(1e-6, 1.0 - 1e-6);
                                let pa = pos(ga.0, ga.1, ga.2);
                                let pb = pos(gb.0, gb.1, gb.2);
                                vertices.push(geom::add(pa, geom::scale(geom::sub(pb, pa), t)));
                                (vertices.len() - 1) as u32
                            });
                        local[e] = id;
                        have[e] = true;
                    }
                    triangles.push([local[tri[0]], local[tri[1]], local[tri[2]]]);
                }
            }
        }
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        normals: None,
    })
}

/// Area-weighted uniform surface sampling.
pub fn sample_mesh(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<Vec3>, MeshError> {
    use rand::SeedableRng;
    if mesh.is_empty() {
        return Err(MeshError::ZeroArea);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for &t in &mesh.triangles {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(MeshError::ZeroArea);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.gen_range(0.0..total);
        let idx = match cumulative.binary_search_by(|c| c.partial_cmp(&pick).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(mesh.triangles.len() - 1),
        };
        let t = mesh.triangles[idx];
        let a = mesh.vertices[t[0] as usize];
        let b = mesh.vertices[t[1] as usize];
        let c = mesh.vertices[t[2] as usize];
        // Uniform barycentric via the square-root trick.
        let r1: f64 = rng.gen_range(0.0..1.0);
        let r2: f64 = rng.gen_range(0.0..1.0);
        let s = r1.sqrt();
        let (u, v, w) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([
            u * a[0] + v * b[0] + w * c[0],
            u * a[1] + v * b[1] + w * c[1],
            u * a[2] + v * b[2] + w * c[2],
        ]);
    }
    Ok(out)
}

/// ASCII PLY export. Floats use shortest round-trip formatting.
pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    let res: std::io::Result<()> = (|| {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        writeln!(out, "element vertex {}", mesh.vertices.len())?;
        writeln!(out, "property double x")?;
        writeln!(out, "property double y")?;
        writeln!(out, "property double z")?;
        writeln!(out, "element face {}", mesh.triangles.len())?;
        writeln!(out, "property list uchar int vertex_indices")?;
        writeln!(out, "end_header")?;
        for v in &mesh.vertices {
            writeln!(out, "{} {} {}", v[0], v[1], v[2])?;
        }
        for t in &mesh.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    })();
    res.map_err(io_err)?;
    fs::write(path, out).map_err(io_err)
}

/// ASCII PLY import (vertices and faces only; triangulates fans).
pub fn read_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let perr = |line: usize, detail: String| MeshError::Parse {
        path: path.display().to_string(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let mut vertex_count = None;
    let mut face_count = None;
    let mut header_end = 0;
    for (i, line) in lines.by_ref() {
        let line = line.trim();
        if i == 0 && line != "ply" {
            return Err(perr(1, "missing ply magic".into()));
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.parse::<usize>()
                    .map_err(|e| perr(i + 1, e.to_string()))?,
            );
        }
        if let Some(rest) = line.strip_prefix("element face ") {
            face_count = Some(
                rest.parse::<usize>()
                    .map_err(|e| perr(i + 1, e.to_string()))?,
            );
        }
        if line == "end_header" {
            header_end = i + 1;
            break;
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| perr(header_end, "no vertex element".into()))?;
    let face_count = face_count.unwrap_or(0);
    let mut mesh = TriangleMesh::default();
    for (i, line) in lines.by_ref().take(vertex_count) {
        let mut toks = line.split_whitespace();
        let mut v = [0.0; 3];
        for slot in &mut v {
            let tok = toks
                .next()
                .ok_or_else(|| perr(i + 1, "vertex row too short".into()))?;
            *slot = tok
                .parse()
                .map_err(|e| perr(i + 1, format!("bad coordinate '{tok}': {e}")))?;
        }
        mesh.vertices.push(v);
    }
    if mesh.vertices.len() != vertex_count {
        return Err(perr(0, "vertex rows truncated".into()));
    }
    for (i, line) in lines.take(face_count) {
        let mut toks = line.split_whitespace();
        let k: usize = toks
            .next()
            .ok_or_else(|| perr(i + 1, "face row empty".into()))?
            .parse()
            .map_err(|e| perr(i + 1, format!("bad face arity: {e}")))?;
        let idx: Vec<u32> = toks
            .take(k)
            .map(|t| t.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(i + 1, format!("bad index: {e}")))?;
        if idx.len() != k || k < 3 {
            return Err(perr(i + 1, "short face row".into()));
        }
        for j in 1..k - 1 {
            mesh.triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(mesh)
}

/// OBJ export (secondary format).
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), MeshError> {
    let io_err = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    let res: std::io::Result<()> = (|| {
        for v in &mesh.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &mesh.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    })();
    res.map_err(io_err)?;
    fs::write(path, out).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::FnField;
    use std::f64::consts::PI;

    #[test]
    fn case_table_basics() {
        let table = case_table();
        assert_eq!(table.len(), 256);
        assert!(table[0].is_empty());
        assert!(table[255].is_empty());
        // A single inside corner yields one triangle; its complement too.
        assert_eq!(table[1].len(), 1);
        assert_eq!(table[254].len(), 1);
        // Two diagonal inside corners on one face: two triangles.
        assert_eq!(table[0b1001].len(), 2);
    }

    #[test]
    fn sphere_mesh_area_and_watertightness() {
        let sdf = FnField(|p: crate::geom::Vec3| geom::norm(p) - 0.5);
        let mesh = marching_cubes(&sdf, 64, ([-0.8, -0.8, -0.8], [0.8, 0.8, 0.8])).unwrap();
        assert!(!mesh.is_empty());
        let area = mesh.total_area();
        let expected = 4.0 * PI * 0.25;
        assert!(
            (area - expected).abs() / expected < 0.03,
            "area {area} vs {expected}"
        );
        // Watertight: every undirected edge is shared by exactly two
        // triangles, and winding is consistent (each directed edge once).
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            assert_eq!(count, 1, "directed edge {a}->{b} repeated");
            assert_eq!(
                directed.get(&(b, a)),
                Some(&1),
                "edge {a}-{b} not shared by two faces"
            );
        }
        // Outward orientation: normals point away from the center
        // (slivers below the area floor carry no reliable normal).
        for t in &mesh.triangles {
            let a = mesh.vertices[t[0] as usize];
            let b = mesh.vertices[t[1] as usize];
            let c = mesh.vertices[t[2] as usize];
            let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
            if 0.5 * geom::norm(n) < 1e-12 {
                continue;
            }
            let centroid = geom::scale(geom::add(geom::add(a, b), c), 1.0 / 3.0);
            assert!(geom::dot(n, centroid) > 0.0, "inward-facing triangle");
        }
    }

    #[test]
    fn positive_field_gives_empty_mesh() {
        let sdf = FnField(|_p: crate::geom::Vec3| 1.0);
        let mesh = marching_cubes(&sdf, 16, ([-1.0; 3], [1.0; 3])).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn vertex_residuals_bounded_by_cells() {
        let sdf = FnField(|p: crate::geom::Vec3| geom::norm(p) - 0.5);
        let res = 32;
        let mesh = marching_cubes(&sdf, res, ([-0.8; 3], [0.8; 3])).unwrap();
        let cell_diag = (1.6 / res as f64) * 3f64.sqrt();
        let mut mean = 0.0;
        for v in &mesh.vertices {
            mean += (geom::norm(*v) - 0.5).abs();
        }
        mean /= mesh.vertices.len() as f64;
        assert!(mean < 2.0 * cell_diag, "mean residual {mean}");
    }

    #[test]
    fn low_resolution_rejected() {
        let sdf = FnField(|p: crate::geom::Vec3| geom::norm(p) - 0.5);
        assert!(matches!(
            marching_cubes(&sdf, 4, ([-1.0; 3], [1.0; 3])),
            Err(MeshError::ResolutionTooSmall { got: 4 })
        ));
    }

    #[test]
    fn torus_has_genus_one_euler_characteristic() {
        let sdf = FnField(|p: crate::geom::Vec3| {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.5;
            (ring * ring + p[2] * p[2]).sqrt() - 0.2
        });
        let mesh = marching_cubes(&sdf, 48, ([-0.9; 3], [0.9; 3])).unwrap();
        let mut edges = std::collections::HashSet::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let euler =
            mesh.vertices.len() as i64 - edges.len() as i64 + mesh.triangles.len() as i64;
        assert_eq!(euler, 0, "torus Euler characteristic");
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            normals: None,
        };
        for p in sample_mesh(&mesh, 500, 3).unwrap() {
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12);
            assert!(p[0] + p[1] <= 1.0 + 1e-12);
            assert!(p[2].abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_respects_area_ratio() {
        // Two triangles with areas 1 and 3.
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [12.0, 0.0, 0.0],
                [10.0, 3.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            normals: None,
        };
        let samples = sample_mesh(&mesh, 10_000, 9).unwrap();
        let in_second = samples.iter().filter(|p| p[0] >= 5.0).count();
        let frac = in_second as f64 / 10_000.0;
        assert!((frac - 0.75).abs() < 0.05 * 0.75, "fraction {frac}");
    }

    #[test]
    fn sampling_deterministic() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            normals: None,
        };
        assert_eq!(
            sample_mesh(&mesh, 64, 5).unwrap(),
            sample_mesh(&mesh, 64, 5).unwrap()
        );
    }

    #[test]
    fn ply_round_trip_exact() {
        let sdf = FnField(|p: crate::geom::Vec3| geom::norm(p) - 0.5);
        let mesh = marching_cubes(&sdf, 16, ([-0.8; 3], [0.8; 3])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&path, &mesh).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            // Shortest round-trip float formatting is lossless.
            assert_eq!(a, b);
        }
    }

    #[test]
    fn obj_export_is_one_indexed() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
            normals: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&path, &mesh).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("f 1 2 3"));
    }
}
