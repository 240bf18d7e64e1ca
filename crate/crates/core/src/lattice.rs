//! Uniform tensor lattices and local Lagrange interpolation of values stored
//! on them.
//!
//! Node `i` (a multi-index) sits at `origin + i·h`. Interpolation of degree
//! `r` uses, per axis, the `r + 1` nodes nearest to the query, shifted inward
//! near the lattice edge, and evaluates the Lagrange basis in barycentric
//! form.

use std::io::{BufRead, Write};

use thiserror::Error;

/// Default cap on the total node count of a lattice.
pub const DEFAULT_MAX_NODES: usize = 100_000_000;

/// Largest supported interpolation degree.
pub const MAX_DEGREE: usize = 32;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("mesh width must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("radius on axis {axis} must be positive and finite, got {value}")]
    InvalidRadius { axis: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lattice would hold {count} nodes, above the cap of {cap}")]
    TooManyNodes { count: u128, cap: usize },
    #[error("axis {axis} has {nodes} nodes but a degree-{degree} stencil needs {}", degree + 1)]
    TooFewNodes { axis: usize, nodes: i64, degree: usize },
    #[error("interpolation degree {0} is outside 1..={MAX_DEGREE}")]
    InvalidDegree(usize),
    #[error("query {query} on axis {axis} lies outside [{lower}, {upper}] by more than h/2")]
    OutOfDomain { axis: usize, query: f64, lower: f64, upper: f64 },
    #[error("value array has length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value stored at node {node}")]
    NonFinite { node: usize },
    #[error("malformed level dump at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    dim: usize,
    h: f64,
    origin: Vec<f64>,
    lo: Vec<i64>,
    hi: Vec<i64>,
}

/// Lattice with origin `center`, spanning at least `center ± radius` per
/// axis, with at least `r + 1` nodes per axis.
pub fn build_lattice(center: &[f64], h: f64, radius: &[f64], r: usize) -> Result<Lattice, LatticeError> {
    build_lattice_capped(center, h, radius, r, DEFAULT_MAX_NODES)
}

pub fn build_lattice_capped(
    center: &[f64],
    h: f64,
    radius: &[f64],
    r: usize,
    max_nodes: usize,
) -> Result<Lattice, LatticeError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(LatticeError::InvalidSpacing(h));
    }
    if radius.len() != center.len() {
        return Err(LatticeError::DimensionMismatch { expected: center.len(), got: radius.len() });
    }
    let mut lo = Vec::with_capacity(center.len());
    let mut hi = Vec::with_capacity(center.len());
    let mut count: u128 = 1;
    for (axis, &rad) in radius.iter().enumerate() {
        if !(rad > 0.0 && rad.is_finite()) {
            return Err(LatticeError::InvalidRadius { axis, value: rad });
        }
        let steps = half_steps(rad, h);
        let nodes = 2 * steps + 1;
        if (nodes as usize) < r + 1 {
            return Err(LatticeError::TooFewNodes { axis, nodes, degree: r });
        }
        count = count.saturating_mul(nodes as u128);
        lo.push(-steps);
        hi.push(steps);
    }
    if count > max_nodes as u128 {
        return Err(LatticeError::TooManyNodes { count, cap: max_nodes });
    }
    Ok(Lattice { dim: center.len(), h, origin: center.to_vec(), lo, hi })
}

/// Nodes per half-axis of a box of half-width `radius`.
pub fn half_steps(radius: f64, h: f64) -> i64 {
    // tolerate rounding noise when the radius is an exact multiple of h
    (radius / h * (1.0 - 4.0 * f64::EPSILON)).ceil() as i64
}

/// Half-width actually covered by a lattice built for `radius`.
pub fn covered_radius(radius: f64, h: f64) -> f64 {
    half_steps(radius, h) as f64 * h
}

impl Lattice {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Inclusive lower index bound per axis.
    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    /// Inclusive upper index bound per axis.
    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn extent(&self, axis: usize) -> usize {
        (self.hi[axis] - self.lo[axis] + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim).map(|a| self.extent(a)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat position of a multi-index, if it lies on the lattice.
    pub fn flat_index(&self, index: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        for axis in 0..self.dim {
            let i = index[axis];
            if i < self.lo[axis] || i > self.hi[axis] {
                return None;
            }
            flat = flat * self.extent(axis) + (i - self.lo[axis]) as usize;
        }
        Some(flat)
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [i64]) {
        for axis in (0..self.dim).rev() {
            let e = self.extent(axis);
            out[axis] = self.lo[axis] + (flat % e) as i64;
            flat /= e;
        }
    }

    /// Coordinates of the node at flat position `flat`.
    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for axis in (0..self.dim).rev() {
            let e = self.extent(axis);
            let i = self.lo[axis] + (rest % e) as i64;
            rest /= e;
            out[axis] = self.origin[axis] + i as f64 * self.h;
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.node_into(flat, &mut out);
        out
    }

    /// Fill `stencil` for a degree-`r` interpolation at `query`.
    pub fn stencil_into(&self, query: &[f64], r: usize, stencil: &mut Stencil) -> Result<(), LatticeError> {
        if r == 0 || r > MAX_DEGREE {
            return Err(LatticeError::InvalidDegree(r));
        }
        if query.len() != self.dim {
            return Err(LatticeError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        stencil.reset(self.dim, r);
        for axis in 0..self.dim {
            if self.extent(axis) < r + 1 {
                return Err(LatticeError::TooFewNodes { axis, nodes: self.extent(axis) as i64, degree: r });
            }
            let mut s = (query[axis] - self.origin[axis]) / self.h;
            // node coordinates do not round-trip exactly through (x - origin) / h
            let nearest = s.round();
            if (s - nearest).abs() <= 16.0 * f64::EPSILON * nearest.abs().max(1.0) {
                s = nearest;
            }
            let (lo, hi) = (self.lo[axis] as f64, self.hi[axis] as f64);
            if !(s >= lo - 0.5 && s <= hi + 0.5) {
                return Err(LatticeError::OutOfDomain {
                    axis,
                    query: query[axis],
                    lower: self.origin[axis] + lo * self.h,
                    upper: self.origin[axis] + hi * self.h,
                });
            }
            // nearest r+1 nodes; an exact tie picks the lower start
            let start = ((s - (r as f64 + 1.0) / 2.0).ceil() as i64).clamp(self.lo[axis], self.hi[axis] - r as i64);
            stencil.start[axis] = start;
            barycentric_basis(s - start as f64, &stencil.bary, &mut stencil.basis[axis * (r + 1)..(axis + 1) * (r + 1)]);
        }
        Ok(())
    }

    pub fn stencil(&self, query: &[f64], r: usize) -> Result<Stencil, LatticeError> {
        let mut st = Stencil::default();
        self.stencil_into(query, r, &mut st)?;
        Ok(st)
    }
}

/// Per-axis Lagrange stencil for one query point.
///
/// Reused across queries as a scratch buffer to avoid allocation in hot
/// loops.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    degree: usize,
    start: Vec<i64>,
    /// Lagrange basis values, `r + 1` per axis, axis-major.
    basis: Vec<f64>,
    bary: Vec<f64>,
}

impl Stencil {
    fn reset(&mut self, dim: usize, r: usize) {
        if self.degree != r || self.bary.len() != r + 1 {
            self.degree = r;
            self.bary = uniform_barycentric_weights(r);
        }
        self.start.resize(dim, 0);
        self.basis.resize(dim * (r + 1), 0.0);
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// First lattice index of the stencil on each axis.
    pub fn start(&self) -> &[i64] {
        &self.start
    }

    /// Lagrange basis values on `axis` at the query.
    pub fn weights(&self, axis: usize) -> &[f64] {
        let n = self.degree + 1;
        &self.basis[axis * n..(axis + 1) * n]
    }
}

/// `(-1)^i C(r, i)`: barycentric weights for `r + 1` equispaced nodes.
fn uniform_barycentric_weights(r: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(r + 1);
    let mut c = 1.0f64;
    for i in 0..=r {
        w.push(if i % 2 == 0 { c } else { -c });
        c = c * (r - i) as f64 / (i + 1) as f64;
    }
    w
}

/// Lagrange basis at local coordinate `s` (nodes at `0..=r`).
fn barycentric_basis(s: f64, bary: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let d = s - i as f64;
        if d == 0.0 {
            out.fill(0.0);
            out[i] = 1.0;
            return;
        }
        *o = bary[i] / d;
    }
    let total: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `Y` and `Z` samples at every node of one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueLevel {
    lattice: Lattice,
    m: usize,
    d: usize,
    /// `len × m`, row-major over nodes.
    y: Vec<f64>,
    /// `len × m × d`, row-major over nodes then `Z` rows.
    z: Vec<f64>,
    time_index: usize,
}

impl ValueLevel {
    pub fn new(
        lattice: Lattice,
        m: usize,
        d: usize,
        y: Vec<f64>,
        z: Vec<f64>,
        time_index: usize,
    ) -> Result<Self, LatticeError> {
        let n = lattice.len();
        if y.len() != n * m {
            return Err(LatticeError::ShapeMismatch { expected: n * m, got: y.len() });
        }
        if z.len() != n * m * d {
            return Err(LatticeError::ShapeMismatch { expected: n * m * d, got: z.len() });
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite { node: pos / m });
        }
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite { node: pos / (m * d) });
        }
        Ok(Self { lattice, m, d, y, z, time_index })
    }

    /// Samples `(y, z)` from functions of the node coordinates.
    pub fn from_fn<F>(lattice: Lattice, m: usize, d: usize, time_index: usize, mut f: F) -> Result<Self, LatticeError>
    where
        F: FnMut(&[f64], &mut [f64], &mut [f64]),
    {
        let n = lattice.len();
        let mut y = vec![0.0; n * m];
        let mut z = vec![0.0; n * m * d];
        let mut x = vec![0.0; lattice.dim()];
        for node in 0..n {
            lattice.node_into(node, &mut x);
            f(&x, &mut y[node * m..(node + 1) * m], &mut z[node * m * d..(node + 1) * m * d]);
        }
        Self::new(lattice, m, d, y, z, time_index)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn y_at(&self, node: usize) -> &[f64] {
        &self.y[node * self.m..(node + 1) * self.m]
    }

    pub fn z_at(&self, node: usize) -> &[f64] {
        let md = self.m * self.d;
        &self.z[node * md..(node + 1) * md]
    }

    /// Interpolated `(y, z)` at `query` with degree `r`.
    pub fn interpolate(&self, query: &[f64], r: usize) -> Result<(Vec<f64>, Vec<f64>), LatticeError> {
        let mut st = Stencil::default();
        self.lattice.stencil_into(query, r, &mut st)?;
        let mut y = vec![0.0; self.m];
        let mut z = vec![0.0; self.m * self.d];
        contract(&self.lattice, &st, &self.y, self.m, &mut y);
        contract(&self.lattice, &st, &self.z, self.m * self.d, &mut z);
        Ok((y, z))
    }

    /// Interpolated `y` only, reusing `scratch`; the hot path of the solver.
    pub fn interpolate_y_into(
        &self,
        query: &[f64],
        r: usize,
        scratch: &mut Stencil,
        out: &mut [f64],
    ) -> Result<(), LatticeError> {
        self.lattice.stencil_into(query, r, scratch)?;
        contract(&self.lattice, scratch, &self.y, self.m, out);
        Ok(())
    }

    /// Writes the level as text: a header line `dim,h,lo,hi,m,d,origin,time_index`,
    /// one line with those values (vector fields separated by spaces), then one
    /// row per node holding its multi-index, `Y` and row-major `Z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), LatticeError> {
        let join_i = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let join_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let lat = &self.lattice;
        writeln!(w, "dim,h,lo,hi,m,d,origin,time_index")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            lat.dim,
            lat.h,
            join_i(&lat.lo),
            join_i(&lat.hi),
            self.m,
            self.d,
            join_f(&lat.origin),
            self.time_index
        )?;
        let mut idx = vec![0i64; lat.dim];
        for node in 0..lat.len() {
            lat.multi_index(node, &mut idx);
            let mut fields: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            fields.extend(self.y_at(node).iter().map(|v| v.to_string()));
            fields.extend(self.z_at(node).iter().map(|v| v.to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, LatticeError> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), LatticeError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(LatticeError::Parse { line: 0, message: format!("missing {what}") }),
            }
        };
        let bad = |line: usize, message: String| LatticeError::Parse { line, message };
        let (ln, header) = next("header")?;
        if header.trim() != "dim,h,lo,hi,m,d,origin,time_index" {
            return Err(bad(ln, format!("unexpected header {header:?}")));
        }
        let (ln, meta) = next("metadata")?;
        let parts: Vec<&str> = meta.split(',').collect();
        if parts.len() != 8 {
            return Err(bad(ln, format!("expected 8 metadata fields, got {}", parts.len())));
        }
        let p_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(ln, e.to_string()));
        let p_vec_i = |s: &str| -> Result<Vec<i64>, LatticeError> {
            s.split_whitespace().map(|t| t.parse::<i64>().map_err(|e| bad(ln, e.to_string()))).collect()
        };
        let p_vec_f = |s: &str| -> Result<Vec<f64>, LatticeError> {
            s.split_whitespace().map(|t| t.parse::<f64>().map_err(|e| bad(ln, e.to_string()))).collect()
        };
        let dim = p_usize(parts[0])?;
        let h: f64 = parts[1].trim().parse().map_err(|e: std::num::ParseFloatError| bad(ln, e.to_string()))?;
        let (lo, hi) = (p_vec_i(parts[2])?, p_vec_i(parts[3])?);
        let (m, d) = (p_usize(parts[4])?, p_usize(parts[5])?);
        let origin = p_vec_f(parts[6])?;
        let time_index = p_usize(parts[7])?;
        if lo.len() != dim || hi.len() != dim || origin.len() != dim {
            return Err(bad(ln, "vector field length differs from dim".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| h < l) {
            return Err(bad(ln, "empty index range".into()));
        }
        let lattice = Lattice { dim, h, origin, lo, hi };
        let n = lattice.len();
        let mut y = vec![0.0; n * m];
        let mut z = vec![0.0; n * m * d];
        let mut idx = vec![0i64; dim];
        for node in 0..n {
            let (ln, row) = next("node row")?;
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != dim + m + m * d {
                return Err(bad(ln, format!("expected {} fields, got {}", dim + m + m * d, fields.len())));
            }
            lattice.multi_index(node, &mut idx);
            for (axis, f) in fields[..dim].iter().enumerate() {
                let i: i64 = f.trim().parse().map_err(|e: std::num::ParseIntError| bad(ln, e.to_string()))?;
                if i != idx[axis] {
                    return Err(bad(ln, format!("node rows out of order at axis {axis}")));
                }
            }
            let values = fields[dim..]
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| bad(ln, e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            y[node * m..(node + 1) * m].copy_from_slice(&values[..m]);
            z[node * m * d..(node + 1) * m * d].copy_from_slice(&values[m..]);
        }
        Self::new(lattice, m, d, y, z, time_index)
    }
}

/// `out[c] = Σ_stencil Π_axis basis · values[node·width + c]`.
fn contract(lattice: &Lattice, st: &Stencil, values: &[f64], width: usize, out: &mut [f64]) {
    let n = st.degree + 1;
    out.fill(0.0);
    match lattice.dim {
        1 => {
            let base = (st.start[0] - lattice.lo[0]) as usize;
            let w = st.weights(0);
            for (i, &wi) in w.iter().enumerate() {
                let row = &values[(base + i) * width..(base + i + 1) * width];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wi * v;
                }
            }
        }
        2 => {
            let e1 = lattice.extent(1);
            let b0 = (st.start[0] - lattice.lo[0]) as usize;
            let b1 = (st.start[1] - lattice.lo[1]) as usize;
            let (w0, w1) = (st.weights(0), st.weights(1));
            if width == 1 {
                let mut acc = 0.0;
                for (i, &wi) in w0.iter().enumerate() {
                    let row = &values[(b0 + i) * e1 + b1..(b0 + i) * e1 + b1 + n];
                    let inner: f64 = row.iter().zip(w1).map(|(v, w)| v * w).sum();
                    acc += wi * inner;
                }
                out[0] = acc;
                return;
            }
            for (i, &wi) in w0.iter().enumerate() {
                for (j, &wj) in w1.iter().enumerate() {
                    let node = (b0 + i) * e1 + b1 + j;
                    let wij = wi * wj;
                    for (o, v) in out.iter_mut().zip(&values[node * width..(node + 1) * width]) {
                        *o += wij * v;
                    }
                }
            }
        }
        dim => {
            let mut offs = vec![0usize; dim];
            loop {
                let mut node = 0usize;
                let mut w = 1.0;
                for axis in 0..dim {
                    node = node * lattice.extent(axis) + (st.start[axis] - lattice.lo[axis]) as usize + offs[axis];
                    w *= st.weights(axis)[offs[axis]];
                }
                for (o, v) in out.iter_mut().zip(&values[node * width..(node + 1) * width]) {
                    *o += w * v;
                }
                let mut axis = dim;
                loop {
                    if axis == 0 {
                        return;
                    }
                    axis -= 1;
                    offs[axis] += 1;
                    if offs[axis] < n {
                        break;
                    }
                    offs[axis] = 0;
                }
            }
        }
    }
}
