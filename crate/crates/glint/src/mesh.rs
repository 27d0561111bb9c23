//! Isosurface extraction and triangle-mesh utilities.
//!
//! Marching cubes on a uniform grid over the scene bounding cube [-1,1]^3.
//! Instead of the classic 256-entry case tables, each mixed-sign cube traces
//! the zero set of its trilinear interpolant as closed polygons: walk from cut
//! edge to cut edge across faces, resolving saddle faces (four cut edges) by a
//! rule that depends only on the face's corner signs.  Neighbouring cubes see
//! the same signs on a shared face and therefore emit the same contour there,
//! so the mesh is watertight without any table bookkeeping.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::err::{Error, Result};
use crate::rng::{stream, tag};
use crate::vec3::{v3, Vec3};

pub const MIN_RES: usize = 32;
pub const MAX_RES: usize = 512;
/// Grid spans [-GRID_HALF, GRID_HALF]^3 (geometry is normalized inside 0.8).
pub const GRID_HALF: f64 = 1.0;

#[derive(Clone, Debug, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub tris: Vec<[u32; 3]>,
}

// Corner c packs its grid offset bits as (dx, dy, dz) = (c&1, c>>1&1, c>>2&1).
// Edges are grouped by axis: e/4 is the axis, EDGE[e].0 the lower corner.
const EDGE: [(u8, u8); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7), // x
    (0, 2), (1, 3), (4, 6), (5, 7), // y
    (0, 4), (1, 5), (2, 6), (3, 7), // z
];

/// The two cube faces containing an edge, as (axis, side) pairs.
fn adjacent_faces(e: u8) -> [(usize, usize); 2] {
    let a = EDGE[e as usize].0 as usize;
    let ax = (e / 4) as usize;
    let mut out = [(0, 0); 2];
    let mut k = 0;
    for f in 0..3 {
        if f != ax {
            out[k] = (f, (a >> f) & 1);
            k += 1;
        }
    }
    out
}

fn face_edges(face: (usize, usize)) -> [u8; 4] {
    let mut out = [0u8; 4];
    let mut k = 0;
    for e in 0..12u8 {
        let (a, b) = EDGE[e as usize];
        if (a as usize >> face.0) & 1 == face.1 && (b as usize >> face.0) & 1 == face.1 {
            out[k] = e;
            k += 1;
        }
    }
    out
}

fn is_cut(e: u8, inside: u8) -> bool {
    let (a, b) = EDGE[e as usize];
    (inside >> a) & 1 != (inside >> b) & 1
}

/// Continue the contour across `face`: with two cut edges it is the other
/// one; on a saddle face (four cut edges, corner signs alternating) take the
/// other cut edge at this edge's inside corner, which pairs the chords so
/// that they isolate the inside corners.  Both rules read only the face's own
/// signs, which is what makes neighbouring cubes agree.
fn next_on_face(face: (usize, usize), edge: u8, inside: u8) -> u8 {
    let fe = face_edges(face);
    let mut cuts = [0u8; 4];
    let mut n = 0;
    for &e in &fe {
        if is_cut(e, inside) {
            cuts[n] = e;
            n += 1;
        }
    }
    match n {
        2 => {
            if cuts[0] == edge { cuts[1] } else { cuts[0] }
        }
        4 => {
            let (a, b) = EDGE[edge as usize];
            let neg = if (inside >> a) & 1 == 1 { a } else { b };
            *cuts[..4]
                .iter()
                .find(|&&e| {
                    let (x, y) = EDGE[e as usize];
                    e != edge && (x == neg || y == neg)
                })
                .expect("saddle face keeps both edges at an inside corner cut")
        }
        _ => unreachable!("face with {n} cut edges"),
    }
}

/// Closed contours of the trilinear zero set, as lists of cut-edge ids.
fn trace_polygons(inside: u8) -> Vec<Vec<u8>> {
    let mut visited = 0u16;
    let mut polys = Vec::new();
    for start in 0..12u8 {
        if !is_cut(start, inside) || visited >> start & 1 == 1 {
            continue;
        }
        let mut poly = Vec::with_capacity(6);
        let mut face = adjacent_faces(start)[0];
        let mut edge = start;
        loop {
            visited |= 1 << edge;
            poly.push(edge);
            let next = next_on_face(face, edge, inside);
            let [f0, f1] = adjacent_faces(next);
            face = if f0 == face { f1 } else { f0 };
            edge = next;
            if edge == start {
                break;
            }
        }
        polys.push(poly);
    }
    polys
}

/// Gradient of the trilinear interpolant at local coordinates (u,v,w) ∈ [0,1]³.
fn trilinear_grad(vals: &[f64; 8], u: f64, v: f64, w: f64) -> Vec3 {
    let mut g = Vec3::ZERO;
    for (c, &s) in vals.iter().enumerate() {
        let bx = if c & 1 == 1 { u } else { 1.0 - u };
        let by = if c >> 1 & 1 == 1 { v } else { 1.0 - v };
        let bz = if c >> 2 & 1 == 1 { w } else { 1.0 - w };
        let sx = if c & 1 == 1 { 1.0 } else { -1.0 };
        let sy = if c >> 1 & 1 == 1 { 1.0 } else { -1.0 };
        let sz = if c >> 2 & 1 == 1 { 1.0 } else { -1.0 };
        g = g + v3(s * sx * by * bz, s * bx * sy * bz, s * bx * by * sz);
    }
    g
}

/// Extract the zero level set of `field` (batched evaluator, negative inside)
/// on a res³ grid over [-1,1]³.  `field` is called with at most a few thousand
/// points at a time so network-backed evaluators stay within memory.
pub fn extract_mesh<F>(mut field: F, res: usize) -> Result<Mesh>
where
    F: FnMut(&[Vec3]) -> Result<Vec<f64>>,
{
    if !(MIN_RES..=MAX_RES).contains(&res) {
        return Err(Error::Config(format!(
            "mesh resolution {res} outside [{MIN_RES}, {MAX_RES}]"
        )));
    }
    let h = 2.0 * GRID_HALF / (res - 1) as f64;
    let coord = |i: usize| -GRID_HALF + h * i as f64;

    let eval_plane = |field: &mut F, k: usize| -> Result<Vec<f64>> {
        let mut pts = Vec::with_capacity(res * res);
        for j in 0..res {
            for i in 0..res {
                pts.push(v3(coord(i), coord(j), coord(k)));
            }
        }
        let mut vals = Vec::with_capacity(res * res);
        for chunk in pts.chunks(16384) {
            let v = field(chunk)?;
            if v.len() != chunk.len() {
                return Err(Error::contract(
                    "extract_mesh",
                    format!("field returned {} values for {} points", v.len(), chunk.len()),
                ));
            }
            vals.extend(v);
        }
        Ok(vals)
    };

    let mut mesh = Mesh::default();
    // global vertex per cut grid edge: key is (lower corner, axis)
    let mut vert_of: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();
    let mut below = eval_plane(&mut field, 0)?;
    for k in 0..res - 1 {
        let above = eval_plane(&mut field, k + 1)?;
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let at = |c: usize| -> f64 {
                    let plane = if c >> 2 & 1 == 1 { &above } else { &below };
                    plane[(j + (c >> 1 & 1)) * res + i + (c & 1)]
                };
                let vals = [at(0), at(1), at(2), at(3), at(4), at(5), at(6), at(7)];
                let mut inside = 0u8;
                for (c, &s) in vals.iter().enumerate() {
                    if s < 0.0 {
                        inside |= 1 << c;
                    }
                }
                if inside == 0 || inside == 0xff {
                    continue;
                }
                emit_cube(&mut mesh, &mut vert_of, &vals, inside, (i, j, k), h, &coord);
            }
        }
        below = above;
    }
    if mesh.tris.is_empty() {
        return Err(Error::contract(
            "extract_mesh",
            format!("empty surface: the field has no zero crossing on the {res}³ grid"),
        ));
    }
    Ok(mesh)
}

#[allow(clippy::too_many_arguments)]
fn emit_cube(
    mesh: &mut Mesh,
    vert_of: &mut HashMap<(u32, u32, u32, u8), u32>,
    vals: &[f64; 8],
    inside: u8,
    (i, j, k): (usize, usize, usize),
    h: f64,
    coord: &impl Fn(usize) -> f64,
) {
    for poly in trace_polygons(inside) {
        let mut idx = Vec::with_capacity(poly.len());
        let mut pos = Vec::with_capacity(poly.len());
        for &e in &poly {
            let (a, b) = EDGE[e as usize];
            let ax = (e / 4) as usize;
            let (dx, dy, dz) = (a as usize & 1, a as usize >> 1 & 1, a as usize >> 2 & 1);
            let key = ((i + dx) as u32, (j + dy) as u32, (k + dz) as u32, e / 4);
            let id = *vert_of.entry(key).or_insert_with(|| {
                let (sa, sb) = (vals[a as usize], vals[b as usize]);
                // signs differ strictly, so sa − sb ≠ 0; keep vertices a hair
                // off the corners so corner-exact zeros cannot collapse tris
                let t = (sa / (sa - sb)).clamp(1e-6, 1.0 - 1e-6);
                let mut p = v3(coord(i + dx), coord(j + dy), coord(k + dz));
                match ax {
                    0 => p.x += t * h,
                    1 => p.y += t * h,
                    _ => p.z += t * h,
                }
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            });
            idx.push(id);
            pos.push(mesh.vertices[id as usize]);
        }

        // orient the contour so its normal points along the field gradient
        // (negative is inside, so that is outward)
        let c = pos.iter().fold(Vec3::ZERO, |s, &p| s + p) * (1.0 / pos.len() as f64);
        let mut nrm = Vec3::ZERO;
        for t in 0..pos.len() {
            nrm = nrm + (pos[t] - c).cross(pos[(t + 1) % pos.len()] - c);
        }
        let lc = (c - v3(coord(i), coord(j), coord(k))) * (1.0 / h);
        let mut grad = trilinear_grad(vals, lc.x, lc.y, lc.z);
        if grad.norm2() < 1e-30 {
            // saddle fallback: point from the inside corners to the outside ones
            let (mut pin, mut pout, mut nin, mut nout) = (Vec3::ZERO, Vec3::ZERO, 0.0, 0.0);
            for cr in 0..8 {
                let p = v3((cr & 1) as f64, (cr >> 1 & 1) as f64, (cr >> 2 & 1) as f64);
                if inside >> cr & 1 == 1 {
                    pin = pin + p;
                    nin += 1.0;
                } else {
                    pout = pout + p;
                    nout += 1.0;
                }
            }
            grad = pout * (1.0 / nout) - pin * (1.0 / nin);
        }
        if nrm.dot(grad) < 0.0 {
            idx.reverse();
            pos.reverse();
        }

        for t in 1..idx.len() - 1 {
            let tri = [idx[0], idx[t], idx[t + 1]];
            let ab = pos[t] - pos[0];
            let ac = pos[t + 1] - pos[0];
            if ab.cross(ac).norm2() > 1e-28 {
                mesh.tris.push(tri);
            }
        }
    }
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t];
        let (a, b, c) = (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.tris.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (t, tri) in self.tris.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::contract("mesh", format!("triangle {t} references a missing vertex")));
            }
            if self.triangle_area(t) <= 0.0 {
                return Err(Error::contract("mesh", format!("triangle {t} is degenerate")));
            }
        }
        Ok(())
    }

    /// Hash of the full geometry; used to derive sampling seeds so that
    /// sampling depends on the mesh alone, not on argument order.
    pub fn content_seed(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for v in &self.vertices {
            eat(&v.x.to_le_bytes());
            eat(&v.y.to_le_bytes());
            eat(&v.z.to_le_bytes());
        }
        for t in &self.tris {
            for &i in t {
                eat(&i.to_le_bytes());
            }
        }
        h
    }

    /// `n` points drawn uniformly by area (triangle by CDF, then uniform
    /// barycentric).  Deterministic for a fixed mesh and seed.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let mut cdf = Vec::with_capacity(self.tris.len());
        let mut acc = 0.0;
        for t in 0..self.tris.len() {
            acc += self.triangle_area(t);
            cdf.push(acc);
        }
        let total = acc;
        let mut rng = stream(seed, &[tag("mesh-samples")]);
        (0..n)
            .map(|_| {
                let u = rng.gen_range(0.0..total);
                let t = cdf.partition_point(|&c| c < u).min(self.tris.len() - 1);
                let [a, b, c] = self.tris[t];
                let (a, b, c) =
                    (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
                let r1: f64 = rng.gen::<f64>().sqrt();
                let r2: f64 = rng.gen();
                a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
            })
            .collect()
    }

    /// ASCII OBJ (full f64 precision, 1-based indices).
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut put = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
        put(format!("# {} vertices, {} triangles\n", self.vertices.len(), self.tris.len()))?;
        for v in &self.vertices {
            put(format!("v {} {} {}\n", v.x, v.y, v.z))?;
        }
        for t in &self.tris {
            put(format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
