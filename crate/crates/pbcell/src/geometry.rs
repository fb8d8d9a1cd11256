//! Meshes of the fluid region of the periodic unit cell: a 1-D slab between
//! two charged walls and a 2-D unit square with a circular inclusion, plus a
//! line-oriented text format for external meshes.
//!
//! Every mesh carries surface markers, periodic node pairing, the distance
//! to the charged surface and the nearest surface facet per node.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("degenerate mesh: {0}")]
    MeshDegenerate(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const NO_NODE: usize = usize::MAX;

/// A boundary facet on the charged surface S: a single node in 1-D
/// (`nodes[1] == usize::MAX`) or an edge in 2-D.
#[derive(Debug, Clone, Copy)]
pub struct Facet {
    pub nodes: [usize; 2],
}

impl Facet {
    pub fn point(n: usize) -> Self {
        Facet { nodes: [n, NO_NODE] }
    }

    pub fn edge(a: usize, b: usize) -> Self {
        Facet { nodes: [a, b] }
    }

    pub fn is_point(&self) -> bool {
        self.nodes[1] == NO_NODE
    }
}

/// Triangulated (2-D) or segmented (1-D) fluid domain with periodic pairing,
/// surface facets and signed-distance data. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CellMesh {
    dim: usize,
    nodes: Vec<[f64; 2]>,
    conn: Vec<usize>,
    facets: Vec<Facet>,
    periodic: Vec<(usize, usize)>,
    distance: Vec<f64>,
    nearest_surface: Vec<usize>,
    node_dof: Vec<usize>,
    n_dofs: usize,
    surface_node: Vec<bool>,
}

impl CellMesh {
    /// 1-D mesh of `(0, width)` with both endpoints on S and node spacing
    /// geometrically graded toward both walls by ratio `grading`.
    pub fn build_slab(width: f64, n_cells: usize, grading: f64) -> Result<Self, MeshError> {
        if !(width > 0.0 && width <= 1.0) {
            return Err(MeshError::BadParameter(format!(
                "slab width must lie in (0, 1], got {width}"
            )));
        }
        if n_cells < 2 {
            return Err(MeshError::BadParameter(format!(
                "slab needs at least 2 cells, got {n_cells}"
            )));
        }
        if !(grading >= 1.0) {
            return Err(MeshError::BadParameter(format!(
                "grading ratio must be >= 1, got {grading}"
            )));
        }
        // cell i gets weight grading^m where m is its distance in cells from
        // the nearest wall
        let weights: Vec<f64> = (0..n_cells)
            .map(|i| grading.powi(i.min(n_cells - 1 - i) as i32))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut xs = Vec::with_capacity(n_cells + 1);
        xs.push(0.0);
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            xs.push(width * acc / total);
        }
        *xs.last_mut().unwrap() = width;

        let nodes: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 0.0]).collect();
        let mut conn = Vec::with_capacity(2 * n_cells);
        for i in 0..n_cells {
            conn.push(i);
            conn.push(i + 1);
        }
        let facets = vec![Facet::point(0), Facet::point(n_cells)];
        let mut mesh = CellMesh {
            dim: 1,
            nodes,
            conn,
            facets,
            periodic: Vec::new(),
            distance: Vec::new(),
            nearest_surface: Vec::new(),
            node_dof: Vec::new(),
            n_dofs: 0,
            surface_node: Vec::new(),
        };
        mesh.distance = mesh.nodes.iter().map(|p| p[0].min(width - p[0])).collect();
        mesh.finish()?;
        Ok(mesh)
    }

    /// 2-D triangulation of the unit square minus the disk of given radius
    /// centered at (0.5, 0.5). A boundary-conforming annular band of
    /// `layer_cells` radial layers, graded toward S, is mated to a structured
    /// outer region of size about `target_h`, with periodic pairing of
    /// opposite square edges.
    pub fn build_disk_cell(
        radius: f64,
        target_h: f64,
        layer_thickness: f64,
        layer_cells: usize,
    ) -> Result<Self, MeshError> {
        if !(radius > 0.0 && radius < 0.5) {
            return Err(MeshError::BadParameter(format!(
                "disk radius must lie in (0, 0.5), got {radius}"
            )));
        }
        if radius + layer_thickness >= 0.5 {
            return Err(MeshError::BadParameter(format!(
                "radius {radius} + layer thickness {layer_thickness} exceeds the half cell"
            )));
        }
        if layer_cells == 0 || !(target_h > 0.0) || !(layer_thickness > 0.0) {
            return Err(MeshError::BadParameter(
                "layer_cells, layer_thickness and target_h must be positive".into(),
            ));
        }
        let center = [0.5, 0.5];

        // Angular resolution: multiple of 8, offset by a half step so that no
        // node falls on a cell corner.
        let per = (2.0 * std::f64::consts::PI * radius).max(4.0);
        let n_theta = (((per / target_h).ceil() as usize).max(16) + 7) / 8 * 8;

        // Radial spacings in the band: geometric toward S, outermost spacing
        // matched to target_h when the grading allows it.
        let band = band_spacings(layer_thickness, layer_cells, target_h);

        let thetas: Vec<f64> = (0..n_theta)
            .map(|i| 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n_theta as f64)
            .collect();
        let dirs: Vec<[f64; 2]> = thetas.iter().map(|t| [t.cos(), t.sin()]).collect();

        // Square perimeter points in the same angular directions.
        let perimeter: Vec<[f64; 2]> = dirs
            .iter()
            .map(|d| {
                let s = 0.5 / d[0].abs().max(d[1].abs());
                [center[0] + s * d[0], center[1] + s * d[1]]
            })
            .collect();

        let r_out = radius + layer_thickness;
        let max_gap = perimeter
            .iter()
            .zip(&dirs)
            .map(|(p, d)| {
                let q = [center[0] + r_out * d[0], center[1] + r_out * d[1]];
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            })
            .fold(0.0_f64, f64::max);
        let outer_levels = ((max_gap / target_h).ceil() as usize).max(2);

        // Node rings: ring 0 on the circle, then band rings, then outer
        // levels ending on the square perimeter.
        let n_rings = 1 + layer_cells + outer_levels;
        let mut nodes: Vec<[f64; 2]> = Vec::with_capacity(n_rings * n_theta);
        let mut band_radii = vec![radius];
        for h in &band {
            band_radii.push(band_radii.last().unwrap() + h);
        }
        for &r in &band_radii {
            for d in &dirs {
                nodes.push([center[0] + r * d[0], center[1] + r * d[1]]);
            }
        }
        for lvl in 1..=outer_levels {
            let t = lvl as f64 / outer_levels as f64;
            for (d, p) in dirs.iter().zip(&perimeter) {
                let q = [center[0] + r_out * d[0], center[1] + r_out * d[1]];
                nodes.push([q[0] + t * (p[0] - q[0]), q[1] + t * (p[1] - q[1])]);
            }
        }

        let mut conn = Vec::new();
        for ring in 0..n_rings - 1 {
            for i in 0..n_theta {
                let j = (i + 1) % n_theta;
                let a = ring * n_theta + i;
                let b = ring * n_theta + j;
                let c = (ring + 1) * n_theta + j;
                let d = (ring + 1) * n_theta + i;
                conn.extend_from_slice(&[a, c, b]);
                conn.extend_from_slice(&[a, d, c]);
            }
        }

        let facets: Vec<Facet> = (0..n_theta)
            .map(|i| Facet::edge(i, (i + 1) % n_theta))
            .collect();

        // Periodic pairing of the perimeter ring: left/bottom nodes are
        // masters; slave coordinates are snapped so pairs differ by exactly
        // one unit vector.
        let first_per = (n_rings - 1) * n_theta;
        let mut periodic = Vec::new();
        let tol = 1e-9;
        for i in 0..n_theta {
            let s = first_per + i;
            let p = nodes[s];
            let shift = if (p[0] - 1.0).abs() < tol {
                [-1.0, 0.0]
            } else if (p[1] - 1.0).abs() < tol {
                [0.0, -1.0]
            } else {
                continue;
            };
            let target = [p[0] + shift[0], p[1] + shift[1]];
            let m = (0..n_theta)
                .map(|j| first_per + j)
                .find(|&j| {
                    (nodes[j][0] - target[0]).abs() < tol && (nodes[j][1] - target[1]).abs() < tol
                })
                .ok_or_else(|| {
                    MeshError::Validation(format!("no periodic partner for perimeter node {s}"))
                })?;
            nodes[s] = [nodes[m][0] - shift[0], nodes[m][1] - shift[1]];
            periodic.push((m, s));
        }

        let mut mesh = CellMesh {
            dim: 2,
            nodes,
            conn,
            facets,
            periodic,
            distance: Vec::new(),
            nearest_surface: Vec::new(),
            node_dof: Vec::new(),
            n_dofs: 0,
            surface_node: Vec::new(),
        };
        mesh.distance = mesh
            .nodes
            .iter()
            .map(|p| {
                (((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - radius).max(0.0)
            })
            .collect();
        mesh.finish()?;
        Ok(mesh)
    }

    /// Shared tail of construction: nearest-facet lookup, dof numbering and
    /// validation.
    fn finish(&mut self) -> Result<(), MeshError> {
        let n = self.nodes.len();
        self.surface_node = vec![false; n];
        for f in &self.facets {
            self.surface_node[f.nodes[0]] = true;
            if !f.is_point() {
                self.surface_node[f.nodes[1]] = true;
            }
        }
        if self.distance.is_empty() {
            self.distance = (0..n)
                .map(|i| {
                    self.facets
                        .iter()
                        .map(|f| self.point_facet_distance(self.nodes[i], f))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
        }
        self.nearest_surface = (0..n)
            .map(|i| {
                let mut best = (f64::INFINITY, 0);
                for (k, f) in self.facets.iter().enumerate() {
                    let d = self.point_facet_distance(self.nodes[i], f);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1
            })
            .collect();

        // dof numbering with periodic slaves folded into masters
        let mut master = (0..n).collect::<Vec<usize>>();
        for &(m, s) in &self.periodic {
            if m >= n || s >= n {
                return Err(MeshError::Validation(format!(
                    "periodic pair ({m}, {s}) out of range"
                )));
            }
            master[s] = m;
        }
        self.node_dof = vec![NO_NODE; n];
        let mut next = 0;
        for i in 0..n {
            if master[i] == i {
                self.node_dof[i] = next;
                next += 1;
            }
        }
        for i in 0..n {
            if master[i] != i {
                let m = master[i];
                if master[m] != m {
                    return Err(MeshError::Validation(format!(
                        "periodic chain through node {i}: slave of a slave"
                    )));
                }
                self.node_dof[i] = self.node_dof[m];
            }
        }
        self.n_dofs = next;
        self.validate()
    }

    fn validate(&self) -> Result<(), MeshError> {
        let n = self.nodes.len();
        let npe = self.dim + 1;
        if self.conn.len() % npe != 0 {
            return Err(MeshError::Validation("ragged element connectivity".into()));
        }
        for (e, el) in self.conn.chunks(npe).enumerate() {
            if el.iter().any(|&i| i >= n) {
                return Err(MeshError::Validation(format!("element {e} references a missing node")));
            }
            let m = self.elem_measure(e);
            if !(m > 1e-14) {
                return Err(MeshError::MeshDegenerate(format!(
                    "element {e} has measure {m}"
                )));
            }
        }
        for (k, f) in self.facets.iter().enumerate() {
            if f.nodes[0] >= n || (!f.is_point() && f.nodes[1] >= n) {
                return Err(MeshError::Validation(format!("surface facet {k} references a missing node")));
            }
        }

        // boundary facets must be exactly S plus periodic outer facets
        let mut slave_count = vec![0usize; n];
        let mut master_count = vec![0usize; n];
        for &(m, s) in &self.periodic {
            master_count[m] += 1;
            slave_count[s] += 1;
            if slave_count[s] > 1 || (slave_count[m] > 0 && master_count[m] > 0) {
                return Err(MeshError::Validation(format!(
                    "node {s} appears in more than one periodic role"
                )));
            }
            let dx = self.nodes[s][0] - self.nodes[m][0];
            let dy = self.nodes[s][1] - self.nodes[m][1];
            let unit = (dx.abs() == 1.0 && dy == 0.0) || (dy.abs() == 1.0 && dx == 0.0);
            if !unit {
                return Err(MeshError::Validation(format!(
                    "periodic pair ({m}, {s}) does not differ by one unit vector"
                )));
            }
        }
        for b in self.boundary_nodes() {
            let paired = master_count[b] + slave_count[b] == 1;
            if !self.surface_node[b] && !paired {
                return Err(MeshError::Validation(format!(
                    "outer boundary node {b} is not in exactly one periodic pair"
                )));
            }
        }

        // distance sanity: nonnegative, zero on S, 1-Lipschitz along edges
        for i in 0..n {
            if self.distance[i] < 0.0 {
                return Err(MeshError::Validation(format!("negative distance at node {i}")));
            }
            if self.surface_node[i] && self.distance[i] > 1e-12 {
                return Err(MeshError::Validation(format!(
                    "surface node {i} has nonzero distance {}",
                    self.distance[i]
                )));
            }
        }
        for el in self.conn.chunks(npe) {
            for a in 0..npe {
                for b in a + 1..npe {
                    let (i, j) = (el[a], el[b]);
                    let len = self.node_distance(i, j);
                    if (self.distance[i] - self.distance[j]).abs() > len * (1.0 + 1e-9) + 1e-12 {
                        return Err(MeshError::Validation(format!(
                            "distance not 1-Lipschitz along edge ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes that lie on the topological boundary (in exactly one element
    /// facet). In 1-D these are the two endpoints.
    fn boundary_nodes(&self) -> Vec<usize> {
        let n = self.nodes.len();
        if self.dim == 1 {
            let mut count = vec![0usize; n];
            for el in self.conn.chunks(2) {
                count[el[0]] += 1;
                count[el[1]] += 1;
            }
            (0..n).filter(|&i| count[i] == 1).collect()
        } else {
            let mut edge_count = std::collections::HashMap::new();
            for el in self.conn.chunks(3) {
                for (a, b) in [(el[0], el[1]), (el[1], el[2]), (el[2], el[0])] {
                    let key = (a.min(b), a.max(b));
                    *edge_count.entry(key).or_insert(0usize) += 1;
                }
            }
            let mut on_boundary = vec![false; n];
            for (&(a, b), &c) in &edge_count {
                if c == 1 {
                    on_boundary[a] = true;
                    on_boundary[b] = true;
                }
            }
            (0..n).filter(|&i| on_boundary[i]).collect()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elems(&self) -> usize {
        self.conn.len() / (self.dim + 1)
    }

    pub fn node(&self, i: usize) -> [f64; 2] {
        self.nodes[i]
    }

    pub fn elem(&self, e: usize) -> &[usize] {
        let npe = self.dim + 1;
        &self.conn[e * npe..(e + 1) * npe]
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn periodic_pairs(&self) -> &[(usize, usize)] {
        &self.periodic
    }

    pub fn distance(&self, node: usize) -> f64 {
        self.distance[node]
    }

    pub fn nearest_surface(&self, node: usize) -> usize {
        self.nearest_surface[node]
    }

    pub fn is_surface_node(&self, node: usize) -> bool {
        self.surface_node[node]
    }

    /// Number of free degrees of freedom (periodic slaves eliminated).
    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    /// Degree of freedom owning a node; slaves map to their master's dof.
    pub fn node_dof(&self, node: usize) -> usize {
        self.node_dof[node]
    }

    /// One representative node per dof, in dof order.
    pub fn dof_nodes(&self) -> Vec<usize> {
        let mut rep = vec![NO_NODE; self.n_dofs];
        for i in 0..self.nodes.len() {
            let d = self.node_dof[i];
            if rep[d] == NO_NODE {
                rep[d] = i;
            }
        }
        rep
    }

    pub fn elem_measure(&self, e: usize) -> f64 {
        let el = self.elem(e);
        if self.dim == 1 {
            self.nodes[el[1]][0] - self.nodes[el[0]][0]
        } else {
            let a = self.nodes[el[0]];
            let b = self.nodes[el[1]];
            let c = self.nodes[el[2]];
            0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        }
    }

    /// Total fluid measure `|Y_F|` from element sums.
    pub fn fluid_measure(&self) -> f64 {
        (0..self.n_elems()).map(|e| self.elem_measure(e)).sum()
    }

    /// Surface measure of a facet: 1 for a 1-D wall point, edge length in 2-D.
    pub fn facet_measure(&self, k: usize) -> f64 {
        let f = self.facets[k];
        if f.is_point() {
            1.0
        } else {
            self.node_distance(f.nodes[0], f.nodes[1])
        }
    }

    pub fn surface_measure(&self) -> f64 {
        (0..self.facets.len()).map(|k| self.facet_measure(k)).sum()
    }

    fn node_distance(&self, i: usize, j: usize) -> f64 {
        let a = self.nodes[i];
        let b = self.nodes[j];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn point_facet_distance(&self, p: [f64; 2], f: &Facet) -> f64 {
        let a = self.nodes[f.nodes[0]];
        if f.is_point() {
            return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
        }
        let b = self.nodes[f.nodes[1]];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    /// Parses the `pbmesh` text format. Distance and nearest-facet data are
    /// recomputed by exact point-to-facet distance.
    pub fn parse(text: &str) -> Result<Self, MeshError> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, msg: String| MeshError::Parse { line: line + 1, msg };
        let (hl, header) = lines
            .next()
            .ok_or_else(|| perr(0, "empty file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "pbmesh" || parts[1] != "1" {
            return Err(perr(hl, format!("expected header 'pbmesh 1 <dim>', got '{header}'")));
        }
        let dim: usize = parts[2]
            .parse()
            .map_err(|_| perr(hl, format!("bad dimension '{}'", parts[2])))?;
        if dim != 1 && dim != 2 {
            return Err(perr(hl, format!("dimension must be 1 or 2, got {dim}")));
        }

        let mut nodes: Vec<[f64; 2]> = Vec::new();
        let mut conn: Vec<usize> = Vec::new();
        let mut facets: Vec<Facet> = Vec::new();
        let mut periodic: Vec<(usize, usize)> = Vec::new();
        let mut seen = std::collections::HashSet::new();

        let mut next = lines.next();
        while let Some((ln, raw)) = next {
            let line = raw.trim();
            if line.is_empty() {
                next = lines.next();
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 2 {
                return Err(perr(ln, format!("expected section header, got '{line}'")));
            }
            let section = toks[0].to_string();
            if !seen.insert(section.clone()) {
                return Err(perr(ln, format!("duplicate section '{section}'")));
            }
            let count: usize = toks[1]
                .parse()
                .map_err(|_| perr(ln, format!("bad count '{}'", toks[1])))?;
            for k in 0..count {
                let (ln2, raw2) = lines
                    .next()
                    .ok_or_else(|| perr(ln, format!("section '{section}' truncated at entry {k}")))?;
                let fields: Vec<&str> = raw2.split_whitespace().collect();
                match section.as_str() {
                    "nodes" => {
                        if fields.len() != 1 + dim {
                            return Err(perr(ln2, format!("expected '<id> <x>{}'", if dim == 2 { " <y>" } else { "" })));
                        }
                        let id: usize = fields[0].parse().map_err(|_| perr(ln2, format!("bad node id '{}'", fields[0])))?;
                        if id != k {
                            return Err(perr(ln2, format!("node ids must be consecutive from 0, got {id}")));
                        }
                        let x: f64 = fields[1].parse().map_err(|_| perr(ln2, format!("bad coordinate '{}'", fields[1])))?;
                        let y: f64 = if dim == 2 {
                            fields[2].parse().map_err(|_| perr(ln2, format!("bad coordinate '{}'", fields[2])))?
                        } else {
                            0.0
                        };
                        if !x.is_finite() || !y.is_finite() {
                            return Err(perr(ln2, "non-finite coordinate".into()));
                        }
                        nodes.push([x, y]);
                    }
                    "elements" => {
                        if fields.len() != 2 + dim {
                            return Err(perr(ln2, format!("expected '<id> <n1> <n2>{}'", if dim == 2 { " <n3>" } else { "" })));
                        }
                        let id: usize = fields[0].parse().map_err(|_| perr(ln2, format!("bad element id '{}'", fields[0])))?;
                        if id != k {
                            return Err(perr(ln2, format!("element ids must be consecutive from 0, got {id}")));
                        }
                        for f in &fields[1..] {
                            conn.push(f.parse().map_err(|_| perr(ln2, format!("bad node index '{f}'")))?);
                        }
                    }
                    "surface" => {
                        if fields.len() != dim {
                            return Err(perr(ln2, format!("surface facet needs {dim} node id(s)")));
                        }
                        let a: usize = fields[0].parse().map_err(|_| perr(ln2, format!("bad node index '{}'", fields[0])))?;
                        if dim == 1 {
                            facets.push(Facet::point(a));
                        } else {
                            let b: usize = fields[1].parse().map_err(|_| perr(ln2, format!("bad node index '{}'", fields[1])))?;
                            facets.push(Facet::edge(a, b));
                        }
                    }
                    "periodic" => {
                        if fields.len() != 2 {
                            return Err(perr(ln2, "expected '<master> <slave>'".into()));
                        }
                        let m: usize = fields[0].parse().map_err(|_| perr(ln2, format!("bad node index '{}'", fields[0])))?;
                        let s: usize = fields[1].parse().map_err(|_| perr(ln2, format!("bad node index '{}'", fields[1])))?;
                        periodic.push((m, s));
                    }
                    other => return Err(perr(ln, format!("unknown section '{other}'"))),
                }
            }
            next = lines.next();
        }
        if nodes.is_empty() {
            return Err(MeshError::Validation("mesh has no nodes".into()));
        }
        if conn.is_empty() {
            return Err(MeshError::Validation("mesh has no elements".into()));
        }
        if facets.is_empty() {
            return Err(MeshError::Validation("mesh has no surface facets".into()));
        }
        for f in &facets {
            if f.nodes[0] >= nodes.len() || (!f.is_point() && f.nodes[1] >= nodes.len()) {
                return Err(MeshError::Validation("surface facet references a missing node".into()));
            }
        }
        let mut mesh = CellMesh {
            dim,
            nodes,
            conn,
            facets,
            periodic,
            distance: Vec::new(),
            nearest_surface: Vec::new(),
            node_dof: Vec::new(),
            n_dofs: 0,
            surface_node: Vec::new(),
        };
        mesh.finish()?;
        Ok(mesh)
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serializes to the `pbmesh` text format.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        writeln!(out, "pbmesh 1 {}", self.dim).unwrap();
        writeln!(out, "nodes {}", self.nodes.len()).unwrap();
        for (i, p) in self.nodes.iter().enumerate() {
            if self.dim == 1 {
                writeln!(out, "{i} {:.17e}", p[0]).unwrap();
            } else {
                writeln!(out, "{i} {:.17e} {:.17e}", p[0], p[1]).unwrap();
            }
        }
        writeln!(out, "elements {}", self.n_elems()).unwrap();
        for e in 0..self.n_elems() {
            let el = self.elem(e);
            let ids: Vec<String> = el.iter().map(|n| n.to_string()).collect();
            writeln!(out, "{e} {}", ids.join(" ")).unwrap();
        }
        writeln!(out, "surface {}", self.facets.len()).unwrap();
        for f in &self.facets {
            if f.is_point() {
                writeln!(out, "{}", f.nodes[0]).unwrap();
            } else {
                writeln!(out, "{} {}", f.nodes[0], f.nodes[1]).unwrap();
            }
        }
        writeln!(out, "periodic {}", self.periodic.len()).unwrap();
        for &(m, s) in &self.periodic {
            writeln!(out, "{m} {s}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}

/// Radial spacings of the boundary-conforming band: geometric toward S with
/// the outermost spacing matched to `target_h` when feasible, uniform
/// otherwise.
fn band_spacings(thickness: f64, cells: usize, target_h: f64) -> Vec<f64> {
    let n = cells as i32;
    let uniform = thickness / cells as f64;
    if uniform >= target_h || cells == 1 {
        return vec![uniform; cells];
    }
    // solve thickness * (g-1) g^(n-1) / (g^n - 1) = target_h for g > 1
    let h_out = |g: f64| thickness * (g - 1.0) * g.powi(n - 1) / (g.powi(n) - 1.0);
    let (mut lo, mut hi) = (1.0 + 1e-12, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h_out(mid) < target_h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g = 0.5 * (lo + hi);
    let h0 = thickness * (g - 1.0) / (g.powi(n) - 1.0);
    (0..cells).map(|k| h0 * g.powi(k as i32)).collect()
}

/// Which boundary datum a `SurfaceData` carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcKind {
    /// Neumann surface charge density.
    Sigma,
    /// Dirichlet zeta potential.
    Zeta,
}

/// Per-facet surface data: exactly one of sigma / zeta is active.
#[derive(Debug, Clone)]
pub struct SurfaceData {
    pub kind: BcKind,
    pub values: Vec<f64>,
}

impl SurfaceData {
    pub fn constant(mesh: &CellMesh, kind: BcKind, value: f64) -> Self {
        SurfaceData {
            kind,
            values: vec![value; mesh.facets().len()],
        }
    }

    /// Slab walls: facet 0 is the left wall, facet 1 the right wall.
    pub fn per_wall(mesh: &CellMesh, kind: BcKind, left: f64, right: f64) -> Result<Self, MeshError> {
        if mesh.dim() != 1 || mesh.facets().len() != 2 {
            return Err(MeshError::BadParameter(
                "per-wall data requires a 1-D slab".into(),
            ));
        }
        Ok(SurfaceData {
            kind,
            values: vec![left, right],
        })
    }

    pub fn from_table(mesh: &CellMesh, kind: BcKind, values: Vec<f64>) -> Result<Self, MeshError> {
        if values.len() != mesh.facets().len() {
            return Err(MeshError::BadParameter(format!(
                "facet table has {} entries, mesh has {} facets",
                values.len(),
                mesh.facets().len()
            )));
        }
        Ok(SurfaceData { kind, values })
    }
}

/// `int_S sigma dS` by the per-facet midpoint rule; in 1-D the sum of the two
/// wall values.
pub fn surface_integral(mesh: &CellMesh, data: &SurfaceData) -> f64 {
    data.values
        .iter()
        .enumerate()
        .map(|(k, v)| v * mesh.facet_measure(k))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_slab() {
        let m = CellMesh::build_slab(1.0, 4, 1.0).unwrap();
        assert_eq!(m.n_nodes(), 5);
        for i in 0..5 {
            assert_abs_diff_eq!(m.node(i)[0], 0.25 * i as f64, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(m.distance(2), 0.5, epsilon = 1e-15);
        assert_eq!(m.n_dofs(), 5);
    }

    #[test]
    fn graded_slab_ratio() {
        let m = CellMesh::build_slab(1.0, 4, 2.0).unwrap();
        let h0 = m.node(1)[0] - m.node(0)[0];
        let h1 = m.node(2)[0] - m.node(1)[0];
        assert_abs_diff_eq!(h1 / h0, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.fluid_measure(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn slab_bad_parameters() {
        assert!(CellMesh::build_slab(1.0, 1, 1.0).is_err());
        assert!(CellMesh::build_slab(0.0, 4, 1.0).is_err());
        assert!(CellMesh::build_slab(1.0, 4, 0.5).is_err());
    }

    #[test]
    fn disk_cell_area_and_distance() {
        let m = CellMesh::build_disk_cell(0.25, 0.02, 0.06, 8).unwrap();
        let exact = 1.0 - std::f64::consts::PI * 0.25 * 0.25;
        assert!((m.fluid_measure() - exact).abs() < 1e-3, "area {}", m.fluid_measure());
        // distance at (0.9, 0.5) is 0.15; find the nearest node to that point
        let p = [0.9, 0.5];
        let i = (0..m.n_nodes())
            .min_by(|&a, &b| {
                let da = (m.node(a)[0] - p[0]).powi(2) + (m.node(a)[1] - p[1]).powi(2);
                let db = (m.node(b)[0] - p[0]).powi(2) + (m.node(b)[1] - p[1]).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let expect = ((m.node(i)[0] - 0.5).powi(2) + (m.node(i)[1] - 0.5).powi(2)).sqrt() - 0.25;
        assert_abs_diff_eq!(m.distance(i), expect, epsilon = 1e-12);
    }

    #[test]
    fn disk_cell_rejects_large_radius() {
        assert!(CellMesh::build_disk_cell(0.6, 0.02, 0.05, 4).is_err());
        assert!(CellMesh::build_disk_cell(0.4, 0.02, 0.2, 4).is_err());
    }

    #[test]
    fn periodic_pairs_are_exact_unit_shifts() {
        let m = CellMesh::build_disk_cell(0.25, 0.05, 0.08, 4).unwrap();
        assert!(!m.periodic_pairs().is_empty());
        for &(a, b) in m.periodic_pairs() {
            let dx = m.node(b)[0] - m.node(a)[0];
            let dy = m.node(b)[1] - m.node(a)[1];
            assert!((dx.abs() == 1.0 && dy == 0.0) || (dy.abs() == 1.0 && dx == 0.0));
        }
    }

    #[test]
    fn nearest_surface_matches_brute_force() {
        let m = CellMesh::build_disk_cell(0.3, 0.05, 0.08, 4).unwrap();
        assert!(m.n_nodes() <= 5000);
        for i in 0..m.n_nodes() {
            let k = m.nearest_surface(i);
            let dk = m.point_facet_distance(m.node(i), &m.facets()[k]);
            for f in m.facets() {
                assert!(dk <= m.point_facet_distance(m.node(i), f) + 1e-12);
            }
        }
    }

    #[test]
    fn surface_integral_examples() {
        let m = CellMesh::build_slab(1.0, 4, 1.0).unwrap();
        let s = SurfaceData::constant(&m, BcKind::Sigma, -1.0);
        assert_abs_diff_eq!(surface_integral(&m, &s), -2.0, epsilon = 1e-15);
        let pw = SurfaceData::per_wall(&m, BcKind::Sigma, 1.0, -1.0).unwrap();
        assert_abs_diff_eq!(surface_integral(&m, &pw), 0.0, epsilon = 1e-15);

        let d = CellMesh::build_disk_cell(0.25, 0.02, 0.06, 8).unwrap();
        let c = SurfaceData::constant(&d, BcKind::Sigma, 0.7);
        let exact = 2.0 * std::f64::consts::PI * 0.25 * 0.7;
        assert!((surface_integral(&d, &c) - exact).abs() < 1e-3);
    }

    #[test]
    fn mesh_roundtrip() {
        let m = CellMesh::build_slab(0.8, 7, 1.5).unwrap();
        let text = m.serialize();
        let m2 = CellMesh::parse(&text).unwrap();
        assert_eq!(m.n_nodes(), m2.n_nodes());
        for i in 0..m.n_nodes() {
            assert_eq!(m.node(i), m2.node(i));
        }
        let d = CellMesh::build_disk_cell(0.25, 0.06, 0.08, 4).unwrap();
        let d2 = CellMesh::parse(&d.serialize()).unwrap();
        assert_eq!(d.n_nodes(), d2.n_nodes());
        assert_eq!(d.n_dofs(), d2.n_dofs());
        for i in 0..d.n_nodes() {
            assert_eq!(d.node(i), d2.node(i));
        }
    }

    #[test]
    fn parse_two_triangle_mesh_with_distances() {
        // unit square split along the diagonal, bottom edge charged,
        // left-right and top-bottom paired
        let text = "pbmesh 1 2\n\
                    nodes 4\n0 0.0 0.0\n1 1.0 0.0\n2 1.0 1.0\n3 0.0 1.0\n\
                    elements 2\n0 0 1 2\n1 0 2 3\n\
                    surface 1\n0 1\n\
                    periodic 2\n0 3\n1 2\n";
        let m = CellMesh::parse(text).unwrap();
        assert_eq!(m.dim(), 2);
        assert_abs_diff_eq!(m.distance(0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.distance(3), 1.0, epsilon = 1e-15);
        assert_eq!(m.n_dofs(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "pbmesh 1 2\nnodes 1\n0 0.0 zzz\n";
        match CellMesh::parse(bad) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unpaired_outer_node_rejected() {
        let text = "pbmesh 1 2\n\
                    nodes 4\n0 0.0 0.0\n1 1.0 0.0\n2 1.0 1.0\n3 0.0 1.0\n\
                    elements 2\n0 0 1 2\n1 0 2 3\n\
                    surface 1\n0 1\n\
                    periodic 1\n0 3\n";
        match CellMesh::parse(text) {
            Err(MeshError::Validation(msg)) => assert!(msg.contains("periodic"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn slab_distance_is_analytic() {
        let m = CellMesh::build_slab(1.0, 64, 1.05).unwrap();
        for i in 0..m.n_nodes() {
            let x = m.node(i)[0];
            assert_abs_diff_eq!(m.distance(i), x.min(1.0 - x), epsilon = 1e-12);
        }
    }
}
