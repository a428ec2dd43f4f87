//! Binary STL export of layer height maps.
//!
//! Each feature becomes a square column from `z = 0` up to its thickness. Side
//! walls are split at every height present around a corner so the mesh has no
//! T-junctions and every edge is shared by exactly two triangles.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};

pub type Vertex = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub normal: [f32; 3],
    pub vertices: [[f32; 3]; 3],
}

const HEADER: &[u8] = b"bdnn diffractive layer, units mm";

/// Triangulates an extruded height map. `heights[[row, col]]` covers
/// `[col·pitch, (col+1)·pitch] × [row·pitch, (row+1)·pitch]`.
pub fn heightfield_mesh(heights: &Array2<f64>, pitch: f64, h_base: f64) -> Result<Vec<[Vertex; 3]>> {
    let (ny, nx) = heights.dim();
    if ny == 0 || nx == 0 {
        return Err(Error::invalid("empty thickness map"));
    }
    if !(pitch.is_finite() && pitch > 0.0) {
        return Err(Error::invalid("feature pitch must be positive"));
    }
    if let Some(h) = heights.iter().find(|h| !(h.is_finite() && **h >= h_base && **h > 0.0)) {
        return Err(Error::invalid(format!(
            "thickness {h} mm is not finite, below the base {h_base} mm, or non-positive"
        )));
    }
    let cell = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= ny as isize || c >= nx as isize {
            0.0
        } else {
            heights[[r as usize, c as usize]]
        }
    };
    let corner = |i: usize, j: usize| -> [f64; 4] {
        let (i, j) = (i as isize, j as isize);
        // NW, NE, SW, SE around corner (i, j)
        [cell(i - 1, j - 1), cell(i - 1, j), cell(i, j - 1), cell(i, j)]
    };
    let mut levels: Vec<Vec<f64>> = Vec::with_capacity((ny + 1) * (nx + 1));
    // (segment low, segment high, canonical cell) for checkerboard corners
    type Pinch = (f64, f64, (usize, usize));
    let mut pinch: HashMap<(usize, usize), Pinch> = HashMap::new();
    for i in 0..=ny {
        for j in 0..=nx {
            let c = corner(i, j);
            let mut h: Vec<f64> = c.to_vec();
            h.sort_by(f64::total_cmp);
            h.dedup();
            levels.push(h);
            if i > 0 && j > 0 && i < ny && j < nx {
                let [nw, ne, sw, se] = c;
                if nw.min(se) > ne.max(sw) {
                    pinch.insert((i, j), (ne.max(sw), nw.min(se), (i - 1, j - 1)));
                } else if ne.min(sw) > nw.max(se) {
                    pinch.insert((i, j), (nw.max(se), ne.min(sw), (i - 1, j)));
                }
            }
        }
    }
    let xy = |i: usize, j: usize| (j as f64 * pitch, i as f64 * pitch);
    // Vertical chain of a wall at corner (i, j) between heights lo and hi.
    let chain = |i: usize, j: usize, lo: f64, hi: f64, cells: [(usize, usize); 2]| -> Vec<Vertex> {
        let (x, y) = xy(i, j);
        let mut zs: Vec<f64> = levels[i * (nx + 1) + j]
            .iter()
            .copied()
            .filter(|&z| z >= lo && z <= hi)
            .collect();
        if let Some(&(a, b, canon)) = pinch.get(&(i, j)) {
            if cells.contains(&canon) {
                let k = zs.iter().position(|&z| z == a).expect("pinch level present");
                zs.insert(k + 1, 0.5 * (a + b));
            }
        }
        zs.into_iter().map(|z| [x, y, z]).collect()
    };

    let mut tris: Vec<[Vertex; 3]> = Vec::new();
    for r in 0..ny {
        for c in 0..nx {
            let h = heights[[r, c]];
            let (x0, y0) = xy(r, c);
            let (x1, y1) = xy(r + 1, c + 1);
            tris.push([[x0, y0, h], [x1, y0, h], [x1, y1, h]]);
            tris.push([[x0, y0, h], [x1, y1, h], [x0, y1, h]]);
            tris.push([[x0, y0, 0.0], [x1, y1, 0.0], [x1, y0, 0.0]]);
            tris.push([[x0, y0, 0.0], [x0, y1, 0.0], [x1, y1, 0.0]]);
        }
    }
    // Walls on vertical grid lines x = j, between cells (r, j-1) and (r, j).
    for r in 0..ny {
        for j in 0..=nx {
            let a = cell(r as isize, j as isize - 1);
            let b = cell(r as isize, j as isize);
            if a == b {
                continue;
            }
            let cells = [(r, j.wrapping_sub(1)), (r, j)];
            let (lo, hi) = (a.min(b), a.max(b));
            let p = chain(r, j, lo, hi, cells);
            let q = chain(r + 1, j, lo, hi, cells);
            let outward = if a > b { [1.0, 0.0, 0.0] } else { [-1.0, 0.0, 0.0] };
            zipper(&p, &q, outward, &mut tris);
        }
    }
    // Walls on horizontal grid lines y = i, between cells (i-1, c) and (i, c).
    for i in 0..=ny {
        for c in 0..nx {
            let a = cell(i as isize - 1, c as isize);
            let b = cell(i as isize, c as isize);
            if a == b {
                continue;
            }
            let cells = [(i.wrapping_sub(1), c), (i, c)];
            let (lo, hi) = (a.min(b), a.max(b));
            let p = chain(i, c, lo, hi, cells);
            let q = chain(i, c + 1, lo, hi, cells);
            let outward = if a > b { [0.0, 1.0, 0.0] } else { [0.0, -1.0, 0.0] };
            zipper(&p, &q, outward, &mut tris);
        }
    }
    Ok(tris)
}

// Strip-triangulates the planar region between two vertical chains sharing
// bottom and top heights, oriented so normals point along `outward`.
fn zipper(p: &[Vertex], q: &[Vertex], outward: Vertex, out: &mut Vec<[Vertex; 3]>) {
    let (mut i, mut j) = (0, 0);
    while i + 1 < p.len() || j + 1 < q.len() {
        let take_p = j + 1 >= q.len() || (i + 1 < p.len() && p[i + 1][2] <= q[j + 1][2]);
        let t = if take_p {
            i += 1;
            [p[i - 1], p[i], q[j]]
        } else {
            j += 1;
            [p[i], q[j], q[j - 1]]
        };
        out.push(orient(t, outward));
    }
}

fn orient(t: [Vertex; 3], outward: Vertex) -> [Vertex; 3] {
    if dot(face_normal(&t), outward) < 0.0 {
        [t[0], t[2], t[1]]
    } else {
        t
    }
}

fn sub(a: Vertex, b: Vertex) -> Vertex {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vertex, b: Vertex) -> Vertex {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vertex, b: Vertex) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn face_normal(t: &[Vertex; 3]) -> Vertex {
    cross(sub(t[1], t[0]), sub(t[2], t[0]))
}

/// Enclosed volume by summed signed tetrahedra.
pub fn mesh_volume(tris: &[[Vertex; 3]]) -> f64 {
    tris.iter().map(|t| dot(t[0], cross(t[1], t[2]))).sum::<f64>() / 6.0
}

/// True when every undirected edge occurs in exactly two triangles, once in
/// each direction (closed and consistently oriented).
pub fn is_watertight(tris: &[[Vertex; 3]]) -> bool {
    let key = |v: &Vertex| [v[0].to_bits(), v[1].to_bits(), v[2].to_bits()];
    let mut edges: HashMap<([u64; 3], [u64; 3]), i32> = HashMap::new();
    let mut uses: HashMap<([u64; 3], [u64; 3]), u32> = HashMap::new();
    for t in tris {
        for k in 0..3 {
            let (a, b) = (key(&t[k]), key(&t[(k + 1) % 3]));
            let (e, s) = if a < b { ((a, b), 1) } else { ((b, a), -1) };
            *edges.entry(e).or_default() += s;
            *uses.entry(e).or_default() += 1;
        }
    }
    uses.values().all(|&n| n == 2) && edges.values().all(|&s| s == 0)
}

/// Axis-aligned bounds `(min, max)`.
pub fn bounding_box(tris: &[[Vertex; 3]]) -> (Vertex, Vertex) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in tris.iter().flatten() {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

/// Binary STL bytes for an extruded thickness map.
pub fn export_stl(thickness: &Array2<f64>, feature_pitch: f64, h_base: f64) -> Result<Vec<u8>> {
    let tris = heightfield_mesh(thickness, feature_pitch, h_base)?;
    Ok(encode(&tris))
}

pub fn encode(tris: &[[Vertex; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * tris.len());
    let mut header = [0u8; 80];
    header[..HEADER.len()].copy_from_slice(HEADER);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tris.len() as u32).to_le_bytes());
    for t in tris {
        let n = face_normal(t);
        let len = dot(n, n).sqrt();
        for c in n {
            out.extend_from_slice(&((c / len) as f32).to_le_bytes());
        }
        for v in t {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

/// Parses binary STL, checking the byte count against the header's triangle count.
pub fn parse_stl(bytes: &[u8]) -> Result<Vec<Triangle>> {
    if bytes.len() < 84 {
        return Err(Error::Parse {
            line: 0,
            message: format!("{} bytes is shorter than the 84-byte STL preamble", bytes.len()),
        });
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
    let expected = 84 + 50 * count;
    if bytes.len() != expected {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "header declares {count} triangles ({expected} bytes) but file has {} bytes",
                bytes.len()
            ),
        });
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    Ok((0..count)
        .map(|k| {
            let o = 84 + 50 * k;
            let v = |s: usize| [f(o + s), f(o + s + 4), f(o + s + 8)];
            Triangle {
                normal: v(0),
                vertices: [v(12), v(24), v(36)],
            }
        })
        .collect())
}

impl Triangle {
    pub fn vertices_f64(&self) -> [Vertex; 3] {
        self.vertices.map(|v| v.map(f64::from))
    }
}
