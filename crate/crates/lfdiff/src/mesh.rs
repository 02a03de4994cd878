//! Deterministic triangulation of a disk and point location.
//!
//! The mesh generator is structured rather than stochastic: nodes are laid out
//! on concentric rings (`6k` nodes on ring `k`, one node at the center), the
//! annuli between consecutive rings are triangulated by an angular merge walk,
//! and a Lawson edge-flip pass restores the Delaunay criterion where the merge
//! leaves skinny triangles. The same inputs therefore always produce the same
//! mesh, bit for bit — no seeds, no randomized insertion order.
//!
//! `h_max` is an upper bound on the triangle side length, in the same sense as
//! the `Hmax` parameter of common mesh generators: the generator refines until
//! every side is comfortably below it (target spacing ≈ `0.45·h_max`), so a
//! disk of unit area meshed at `h_max = 0.05` has roughly two thousand nodes.
//!
//! Point location uses a uniform background grid over the bounding box: each
//! cell stores the triangles whose bounding boxes overlap it, and queries test
//! only those candidates. Queries within `1e-9` of the meshed region are
//! accepted and their barycentric weights clamped back onto the closest
//! triangle; anything farther outside is an error.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Result of locating a query point in the mesh: the containing triangle and
/// the barycentric weights of the point with respect to its three vertices.
///
/// Weights lie in `[0, 1]` and sum to one (up to rounding); for interior
/// points the weighted vertex combination reproduces the query point to
/// `1e-10`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLocation {
    /// Index into the mesh triangle list.
    pub triangle: usize,
    /// Barycentric weights of the query point w.r.t. the triangle's vertices.
    pub weights: [f64; 3],
}

/// Uniform background grid mapping cells to candidate triangles.
#[derive(Debug, Clone)]
struct LocatorGrid {
    x0: f64,
    y0: f64,
    inv_dx: f64,
    inv_dy: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl LocatorGrid {
    fn build(nodes: &[[f64; 2]], triangles: &[[usize; 3]]) -> Self {
        let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
        let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in nodes {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        // Pad so queries on the hull never fall off the grid by rounding.
        let pad = 1e-9 + 1e-12 * (xmax - xmin).abs().max((ymax - ymin).abs());
        xmin -= pad;
        ymin -= pad;
        xmax += pad;
        ymax += pad;

        // Aim for O(1) triangles per cell: a grid of ~#triangles cells.
        let n = ((triangles.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let (nx, ny) = (n, n);
        let dx = (xmax - xmin) / nx as f64;
        let dy = (ymax - ymin) / ny as f64;
        let mut cells = vec![Vec::new(); nx * ny];
        for (t, tri) in triangles.iter().enumerate() {
            let xs = [nodes[tri[0]][0], nodes[tri[1]][0], nodes[tri[2]][0]];
            let ys = [nodes[tri[0]][1], nodes[tri[1]][1], nodes[tri[2]][1]];
            let cx0 = (((xs.iter().cloned().fold(f64::INFINITY, f64::min) - xmin) / dx) as usize)
                .min(nx - 1);
            let cx1 = (((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xmin) / dx)
                as usize)
                .min(nx - 1);
            let cy0 = (((ys.iter().cloned().fold(f64::INFINITY, f64::min) - ymin) / dy) as usize)
                .min(ny - 1);
            let cy1 = (((ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ymin) / dy)
                as usize)
                .min(ny - 1);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    cells[cy * nx + cx].push(t as u32);
                }
            }
        }
        LocatorGrid {
            x0: xmin,
            y0: ymin,
            inv_dx: 1.0 / dx,
            inv_dy: 1.0 / dy,
            nx,
            ny,
            cells,
        }
    }

    fn cell_of(&self, x: [f64; 2]) -> (usize, usize) {
        let cx = (((x[0] - self.x0) * self.inv_dx) as isize).clamp(0, self.nx as isize - 1);
        let cy = (((x[1] - self.y0) * self.inv_dy) as isize).clamp(0, self.ny as isize - 1);
        (cx as usize, cy as usize)
    }
}

/// Conforming P1 triangle mesh with nodes ordered center-out by ring.
///
/// Invariants maintained by the constructors: triangle vertex indices are in
/// range and counterclockwise (positive area), the triangulation is conforming
/// (every interior edge is shared by exactly two triangles), boundary-flagged
/// nodes lie on the analytic boundary circle, and `h_max` equals the maximal
/// triangle side length actually present.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Node coordinates.
    pub nodes: Vec<[f64; 2]>,
    /// Vertex index triples, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
    /// Indices of nodes on the domain boundary.
    pub boundary: Vec<usize>,
    /// Maximal triangle side length of this mesh.
    pub h_max: f64,
    grid: LocatorGrid,
}

/// Serialized form of [`Mesh`] (`{nodes, triangles, boundary, h_max}`).
#[derive(Serialize, Deserialize)]
struct MeshJson {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<usize>,
    h_max: f64,
}

/// Signed twice-area of the triangle `(a, b, c)`; positive iff counterclockwise.
fn cross2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

impl Mesh {
    /// Assembles a mesh from raw arrays, recomputing `h_max` and the locator
    /// grid and checking index ranges and orientation.
    pub fn from_parts(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary: Vec<usize>,
    ) -> Result<Self> {
        if nodes.len() < 3 || triangles.is_empty() {
            return Err(Error::InvalidParameter(
                "mesh needs at least 3 nodes and 1 triangle".into(),
            ));
        }
        for p in &nodes {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::InvalidParameter("non-finite node coordinate".into()));
            }
        }
        let mut h_max = 0.0_f64;
        for tri in &triangles {
            for &v in tri {
                if v >= nodes.len() {
                    return Err(Error::InvalidParameter(format!(
                        "triangle vertex index {v} out of range"
                    )));
                }
            }
            let [a, b, c] = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
            if cross2(a, b, c) <= 0.0 {
                return Err(Error::InvalidParameter(
                    "triangle with nonpositive area (orientation must be CCW)".into(),
                ));
            }
            for (p, q) in [(a, b), (b, c), (c, a)] {
                h_max = h_max.max(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }
        for &v in &boundary {
            if v >= nodes.len() {
                return Err(Error::InvalidParameter(format!(
                    "boundary node index {v} out of range"
                )));
            }
        }
        let grid = LocatorGrid::build(&nodes, &triangles);
        Ok(Mesh {
            nodes,
            triangles,
            boundary,
            h_max,
            grid,
        })
    }

    /// Number of nodes (= dimension of P1 fields on this mesh).
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Coordinates of the three vertices of triangle `t`.
    pub fn triangle_vertices(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.nodes[tri[0]], self.nodes[tri[1]], self.nodes[tri[2]]]
    }

    /// Area of triangle `t` (positive by the orientation invariant).
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * cross2(a, b, c)
    }

    /// Sum of all triangle areas.
    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Checks the structural mesh invariants, returning the first violation.
    ///
    /// Verified: positive areas, conformity (each edge borders one or two
    /// triangles; one-triangle edges form the boundary and their endpoints are
    /// boundary-flagged), and `h_max` consistency.
    pub fn validate(&self) -> Result<()> {
        use std::collections::BTreeMap;
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.triangle_area(t) <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "triangle {t} has nonpositive area"
                )));
            }
            for (u, v) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                *edge_count.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
        let on_boundary: std::collections::BTreeSet<usize> = self.boundary.iter().copied().collect();
        for (&(u, v), &n) in &edge_count {
            if n > 2 {
                return Err(Error::InvalidParameter(format!(
                    "edge ({u}, {v}) shared by {n} > 2 triangles"
                )));
            }
            if n == 1 && !(on_boundary.contains(&u) && on_boundary.contains(&v)) {
                return Err(Error::InvalidParameter(format!(
                    "hull edge ({u}, {v}) has interior endpoints"
                )));
            }
        }
        let recomputed = Mesh::from_parts(
            self.nodes.clone(),
            self.triangles.clone(),
            self.boundary.clone(),
        )?;
        if (recomputed.h_max - self.h_max).abs() > 1e-12 * (1.0 + self.h_max) {
            return Err(Error::InvalidParameter(format!(
                "stored h_max {} differs from recomputed {}",
                self.h_max, recomputed.h_max
            )));
        }
        Ok(())
    }

    /// Serializes the mesh to the JSON schema `{nodes, triangles, boundary, h_max}`.
    pub fn to_json(&self) -> String {
        let doc = MeshJson {
            nodes: self.nodes.clone(),
            triangles: self.triangles.clone(),
            boundary: self.boundary.clone(),
            h_max: self.h_max,
        };
        serde_json::to_string_pretty(&doc).expect("mesh serialization cannot fail")
    }

    /// Deserializes a mesh from [`Mesh::to_json`] output, revalidating it.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MeshJson =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("mesh json: {e}")))?;
        let mesh = Mesh::from_parts(doc.nodes, doc.triangles, doc.boundary)?;
        if (mesh.h_max - doc.h_max).abs() > 1e-9 * (1.0 + doc.h_max) {
            return Err(Error::Format(format!(
                "mesh json h_max {} inconsistent with geometry ({})",
                doc.h_max, mesh.h_max
            )));
        }
        Ok(mesh)
    }

    /// Barycentric weights of `x` in triangle `t` (not clamped; weights are
    /// negative when `x` lies outside the triangle).
    fn barycentric(&self, t: usize, x: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangle_vertices(t);
        let denom = cross2(a, b, c);
        let w0 = cross2(x, b, c) / denom;
        let w1 = cross2(a, x, c) / denom;
        let w2 = cross2(a, b, x) / denom;
        [w0, w1, w2]
    }

    /// Distance-based tolerance for accepting `x` as belonging to triangle
    /// `t`: a barycentric deficit `−w_i` corresponds to a Euclidean distance
    /// `−w_i · 2A / L_i` past the side opposite vertex `i`.
    fn within_tolerance(&self, t: usize, w: [f64; 3], tol: f64) -> bool {
        let [a, b, c] = self.triangle_vertices(t);
        let two_a = cross2(a, b, c);
        let sides = [
            ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt(),
            ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt(),
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt(),
        ];
        (0..3).all(|i| w[i] >= -tol * sides[i] / two_a)
    }

    /// Locates `x` in the mesh.
    ///
    /// Returns the containing triangle with clamped, renormalized barycentric
    /// weights. Points within `1e-9` of the meshed region are snapped to the
    /// nearest qualifying triangle; anything farther out fails with
    /// [`Error::PointOutsideDomain`].
    pub fn locate_point(&self, x: [f64; 2]) -> Result<PointLocation> {
        const GEOM_TOL: f64 = 1e-9;
        if !x[0].is_finite() || !x[1].is_finite() {
            return Err(Error::InvalidParameter("non-finite query point".into()));
        }
        let (cx, cy) = self.grid.cell_of(x);
        let mut best: Option<(usize, [f64; 3], f64)> = None;

        let scan = |tris: &[u32], best: &mut Option<(usize, [f64; 3], f64)>| -> Option<PointLocation> {
            for &t in tris {
                let t = t as usize;
                let w = self.barycentric(t, x);
                let min_w = w[0].min(w[1]).min(w[2]);
                if min_w >= 0.0 {
                    return Some(PointLocation {
                        triangle: t,
                        weights: w,
                    });
                }
                if best.map_or(true, |(_, _, m)| min_w > m) {
                    *best = Some((t, w, min_w));
                }
            }
            None
        };

        // Own cell first, then the 3×3 neighborhood for near-edge queries.
        if let Some(loc) = scan(&self.grid.cells[cy * self.grid.nx + cx], &mut best) {
            return Ok(normalize(loc));
        }
        for dy in -1_isize..=1 {
            for dx in -1_isize..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (cx as isize + dx, cy as isize + dy);
                if nx < 0 || ny < 0 || nx >= self.grid.nx as isize || ny >= self.grid.ny as isize {
                    continue;
                }
                let idx = ny as usize * self.grid.nx + nx as usize;
                if let Some(loc) = scan(&self.grid.cells[idx], &mut best) {
                    return Ok(normalize(loc));
                }
            }
        }
        if let Some((t, w, _)) = best {
            if self.within_tolerance(t, w, GEOM_TOL) {
                return Ok(normalize(PointLocation {
                    triangle: t,
                    weights: w,
                }));
            }
        }
        Err(Error::PointOutsideDomain { point: x })
    }
}

/// Clamps weights to `[0, 1]` and renormalizes them to unit sum.
fn normalize(loc: PointLocation) -> PointLocation {
    let mut w = loc.weights.map(|v| v.clamp(0.0, 1.0));
    let s = w[0] + w[1] + w[2];
    w = w.map(|v| v / s);
    PointLocation {
        triangle: loc.triangle,
        weights: w,
    }
}

/// Builds the deterministic polar-ring triangulation of the disk of the given
/// radius centered at the origin.
///
/// `h_max` bounds the triangle side length from above; the generator targets a
/// spacing of `0.45·h_max`, so node count grows as `Θ(radius²/h_max²)`.
/// Boundary nodes are placed exactly on the circle. A Lawson edge-flip pass
/// makes the triangulation Delaunay up to cocircular ties.
///
/// # Errors
///
/// Nonpositive or non-finite `radius`/`h_max` and `h_max ≥ radius` are
/// rejected as invalid parameters (the latter cannot resolve the geometry).
pub fn build_disk_mesh(radius: f64, h_max: f64) -> Result<Mesh> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "disk radius must be positive and finite, got {radius}"
        )));
    }
    if !h_max.is_finite() || h_max <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "h_max must be positive and finite, got {h_max}"
        )));
    }
    if h_max >= radius {
        return Err(Error::InvalidParameter(format!(
            "degenerate mesh: h_max = {h_max} must be smaller than radius = {radius}"
        )));
    }

    let rings = ((radius / (0.45 * h_max)).ceil() as usize).max(3);
    let dr = radius / rings as f64;

    // Ring k carries 6k nodes at angles 2πi/(6k); ring 0 is the center node.
    let mut nodes: Vec<[f64; 2]> = Vec::with_capacity(1 + 3 * rings * (rings + 1));
    nodes.push([0.0, 0.0]);
    let mut ring_start = vec![0usize; rings + 1]; // index of first node of each ring
    for k in 1..=rings {
        ring_start[k] = nodes.len();
        let n_k = 6 * k;
        let r = if k == rings { radius } else { k as f64 * dr };
        for i in 0..n_k {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n_k as f64;
            nodes.push([r * theta.cos(), r * theta.sin()]);
        }
    }

    let mut triangles: Vec<[usize; 3]> = Vec::with_capacity(6 * rings * rings);
    // Central fan: ring 1 has exactly 6 nodes around the center.
    for i in 0..6 {
        triangles.push([0, ring_start[1] + i, ring_start[1] + (i + 1) % 6]);
    }
    // Annuli: merge ring k (6k nodes) with ring k+1 (6(k+1) nodes) by walking
    // both rings in angular order. The angular comparison (i+1)/a vs (j+1)/b
    // is done in integers, so the walk is exact and deterministic.
    for k in 1..rings {
        let (a, b) = (6 * k, 6 * (k + 1));
        let (inner, outer) = (ring_start[k], ring_start[k + 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < a || j < b {
            let advance_outer = if i == a {
                true
            } else if j == b {
                false
            } else {
                (j + 1) * a <= (i + 1) * b
            };
            if advance_outer {
                triangles.push([inner + i % a, outer + j, outer + (j + 1) % b]);
                j += 1;
            } else {
                triangles.push([outer + j % b, inner + (i + 1) % a, inner + i]);
                i += 1;
            }
        }
    }
    // Enforce counterclockwise orientation.
    for tri in &mut triangles {
        if cross2(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]) < 0.0 {
            tri.swap(1, 2);
        }
    }

    lawson_flip(&nodes, &mut triangles);

    let boundary: Vec<usize> = (ring_start[rings]..nodes.len()).collect();
    let mesh = Mesh::from_parts(nodes, triangles, boundary)?;
    debug_assert!(mesh.h_max <= h_max, "generator exceeded requested h_max");
    Ok(mesh)
}

/// In-circle predicate: positive iff `d` lies strictly inside the circumcircle
/// of the counterclockwise triangle `(a, b, c)`.
fn incircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let (ad2, bd2, cd2) = (
        adx * adx + ady * ady,
        bdx * bdx + bdy * bdy,
        cdx * cdx + cdy * cdy,
    );
    adx * (bdy * cd2 - cdy * bd2) - ady * (bdx * cd2 - cdx * bd2)
        + ad2 * (bdx * cdy - cdx * bdy)
}

/// Lawson edge flipping: repeatedly flips interior edges that violate the
/// Delaunay in-circle criterion until none remain. Cocircular configurations
/// (ubiquitous on the symmetric ring layout) are left untouched via a strict
/// improvement margin, which also guarantees termination.
fn lawson_flip(nodes: &[[f64; 2]], triangles: &mut Vec<[usize; 3]>) {
    use std::collections::BTreeMap;
    let scale = nodes
        .iter()
        .map(|p| p[0].abs().max(p[1].abs()))
        .fold(0.0_f64, f64::max);
    let margin = 1e-12 * scale.powi(4).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        // Edge → adjacent triangles map, rebuilt per sweep (sweep counts are
        // tiny in practice: the ring layout is near-Delaunay already).
        let mut edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for (u, v) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                edges.entry((u.min(v), u.max(v))).or_default().push(t);
            }
        }
        let mut touched = vec![false; triangles.len()];
        let mut flips = 0usize;
        for (&(u, v), ts) in &edges {
            if ts.len() != 2 || touched[ts[0]] || touched[ts[1]] {
                continue;
            }
            let (t1, t2) = (ts[0], ts[1]);
            let c = *triangles[t1].iter().find(|&&w| w != u && w != v).unwrap();
            let d = *triangles[t2].iter().find(|&&w| w != u && w != v).unwrap();
            // Orient the shared edge so that (a, b, c) is counterclockwise.
            let (a, b) = if cross2(nodes[u], nodes[v], nodes[c]) > 0.0 {
                (u, v)
            } else {
                (v, u)
            };
            if incircle(nodes[a], nodes[b], nodes[c], nodes[d]) <= margin {
                continue;
            }
            // Flip is valid only if the replacement triangles are CCW (the
            // quad a-d-b-c is convex).
            let new1 = [a, d, c];
            let new2 = [d, b, c];
            if cross2(nodes[a], nodes[d], nodes[c]) <= 0.0
                || cross2(nodes[d], nodes[b], nodes[c]) <= 0.0
            {
                continue;
            }
            triangles[t1] = new1;
            triangles[t2] = new2;
            touched[t1] = true;
            touched[t2] = true;
            flips += 1;
        }
        if flips == 0 {
            break;
        }
    }
}
