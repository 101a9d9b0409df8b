//! Linear-tetrahedra meshes on structured boxes, element kinematics with
//! one-point quadrature, and the assembly operators (stiffness, internal
//! force, surface traction) plus Dirichlet elimination.

use crate::error::{Error, Result};
use crate::sparse::{solve_spd, Pattern, SparseSym};
use crate::tensor::{ElasticTensor, Matrix6, SymTensor};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::sync::Arc;

/// Axis-aligned face of a box domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Face {
    XNeg,
    XPos,
    YNeg,
    YPos,
    ZNeg,
    ZPos,
}

impl Face {
    pub fn parse(s: &str) -> Result<Face> {
        match s {
            "-x" => Ok(Face::XNeg),
            "+x" => Ok(Face::XPos),
            "-y" => Ok(Face::YNeg),
            "+y" => Ok(Face::YPos),
            "-z" => Ok(Face::ZNeg),
            "+z" => Ok(Face::ZPos),
            other => Err(Error::Parse(format!(
                "unknown face '{other}', expected one of -x +x -y +y -z +z"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Face::XNeg => "-x",
            Face::XPos => "+x",
            Face::YNeg => "-y",
            Face::YPos => "+y",
            Face::ZNeg => "-z",
            Face::ZPos => "+z",
        }
    }

    fn axis(&self) -> usize {
        match self {
            Face::XNeg | Face::XPos => 0,
            Face::YNeg | Face::YPos => 1,
            Face::ZNeg | Face::ZPos => 2,
        }
    }

    fn is_max_side(&self) -> bool {
        matches!(self, Face::XPos | Face::YPos | Face::ZPos)
    }
}

/// Boundary triangle carrying surface load.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriFace {
    pub nodes: [usize; 3],
    pub area: f64,
}

/// Tetrahedral mesh with homogeneous Dirichlet dofs and loaded boundary faces.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 3]>,
    elements: Vec<[usize; 4]>,
    dirichlet_dofs: Vec<usize>,
    neumann_faces: Vec<TriFace>,
}

impl Mesh {
    pub fn new(
        nodes: Vec<[f64; 3]>,
        elements: Vec<[usize; 4]>,
        dirichlet_nodes: &[usize],
        neumann_faces: Vec<TriFace>,
    ) -> Result<Mesh> {
        let n_nodes = nodes.len();
        if n_nodes == 0 || elements.is_empty() {
            return Err(Error::InvalidGeometry("mesh must not be empty".into()));
        }
        for e in &elements {
            for &v in e {
                if v >= n_nodes {
                    return Err(Error::InvalidGeometry(format!(
                        "element references node {v} out of {n_nodes}"
                    )));
                }
            }
        }
        for f in &neumann_faces {
            for &v in &f.nodes {
                if v >= n_nodes {
                    return Err(Error::InvalidGeometry(format!(
                        "loaded face references node {v} out of {n_nodes}"
                    )));
                }
            }
        }
        let mut dirichlet_dofs: Vec<usize> = dirichlet_nodes
            .iter()
            .flat_map(|&n| (0..3).map(move |c| 3 * n + c))
            .collect();
        dirichlet_dofs.sort_unstable();
        dirichlet_dofs.dedup();
        if dirichlet_dofs.last().is_some_and(|&d| d >= 3 * n_nodes) {
            return Err(Error::InvalidGeometry("fixed node out of range".into()));
        }
        Ok(Mesh {
            nodes,
            elements,
            dirichlet_dofs,
            neumann_faces,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn dirichlet_dofs(&self) -> &[usize] {
        &self.dirichlet_dofs
    }

    pub fn neumann_faces(&self) -> &[TriFace] {
        &self.neumann_faces
    }

    pub fn free_dofs(&self) -> Vec<usize> {
        let fixed: std::collections::BTreeSet<usize> =
            self.dirichlet_dofs.iter().copied().collect();
        (0..self.n_dofs()).filter(|d| !fixed.contains(d)).collect()
    }

    pub fn element_centroid(&self, e: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &v in &self.elements[e] {
            for k in 0..3 {
                c[k] += self.nodes[v][k] / 4.0;
            }
        }
        c
    }
}

fn triangle_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let ab = Vector3::new(b[0] - a[0], b[1] - a[1], b[2] - a[2]);
    let ac = Vector3::new(c[0] - a[0], c[1] - a[1], c[2] - a[2]);
    0.5 * ab.cross(&ac).norm()
}

/// Structured box mesh with each grid cell split into six tetrahedra along
/// the main diagonal, so neighbouring cells share face diagonals and the
/// mesh is conforming. `fixed` clamps every dof on that face, `loaded`
/// collects its boundary triangles for surface traction.
pub fn build_box_mesh(
    lengths: [f64; 3],
    divisions: [usize; 3],
    fixed: Face,
    loaded: Face,
) -> Result<Mesh> {
    if lengths.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::InvalidGeometry(format!(
            "box lengths must be positive, got {lengths:?}"
        )));
    }
    if divisions.contains(&0) {
        return Err(Error::InvalidGeometry(format!(
            "divisions must be at least 1 per axis, got {divisions:?}"
        )));
    }
    if fixed == loaded {
        return Err(Error::InvalidGeometry(
            "fixed and loaded faces must differ".into(),
        ));
    }
    let [nx, ny, nz] = divisions;
    let npx = nx + 1;
    let npy = ny + 1;
    let npz = nz + 1;
    let idx = |i: usize, j: usize, k: usize| (k * npy + j) * npx + i;

    let mut nodes = Vec::with_capacity(npx * npy * npz);
    let mut grid = Vec::with_capacity(npx * npy * npz);
    for k in 0..npz {
        for j in 0..npy {
            for i in 0..npx {
                nodes.push([
                    lengths[0] * i as f64 / nx as f64,
                    lengths[1] * j as f64 / ny as f64,
                    lengths[2] * k as f64 / nz as f64,
                ]);
                grid.push([i, j, k]);
            }
        }
    }

    // Kuhn split: one tet per permutation of the axis insertion order,
    // every tet containing the cell's main diagonal (000 -> 111).
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut elements = Vec::with_capacity(6 * nx * ny * nz);
    for ck in 0..nz {
        for cj in 0..ny {
            for ci in 0..nx {
                let corner = |mask: usize| {
                    idx(ci + (mask & 1), cj + ((mask >> 1) & 1), ck + ((mask >> 2) & 1))
                };
                for perm in PERMS {
                    let m1 = 1usize << perm[0];
                    let m2 = m1 | (1usize << perm[1]);
                    let mut tet = [corner(0), corner(m1), corner(m2), corner(7)];
                    if tet_signed_volume(&nodes, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    elements.push(tet);
                }
            }
        }
    }

    let on_face = |node: usize, face: Face| {
        let g = grid[node];
        let axis = face.axis();
        let target = if face.is_max_side() {
            divisions[axis]
        } else {
            0
        };
        g[axis] == target
    };

    let dirichlet_nodes: Vec<usize> = (0..nodes.len()).filter(|&n| on_face(n, fixed)).collect();

    // Boundary triangles = tet faces appearing exactly once, restricted to
    // the loaded plane.
    let mut face_count: std::collections::BTreeMap<[usize; 3], [usize; 3]> =
        std::collections::BTreeMap::new();
    let mut multiplicity: std::collections::BTreeMap<[usize; 3], usize> =
        std::collections::BTreeMap::new();
    for tet in &elements {
        for excl in 0..4 {
            let mut tri = [0usize; 3];
            let mut w = 0;
            for (v, &node) in tet.iter().enumerate() {
                if v != excl {
                    tri[w] = node;
                    w += 1;
                }
            }
            let mut key = tri;
            key.sort_unstable();
            *multiplicity.entry(key).or_insert(0) += 1;
            face_count.entry(key).or_insert(tri);
        }
    }
    let mut neumann_faces = Vec::new();
    for (key, tri) in &face_count {
        if multiplicity[key] == 1 && key.iter().all(|&n| on_face(n, loaded)) {
            let area = triangle_area(&nodes[tri[0]], &nodes[tri[1]], &nodes[tri[2]]);
            neumann_faces.push(TriFace { nodes: *tri, area });
        }
    }

    Mesh::new(nodes, elements, &dirichlet_nodes, neumann_faces)
}

fn tet_signed_volume(nodes: &[[f64; 3]], tet: &[usize; 4]) -> f64 {
    let p = |v: usize| Vector3::from(nodes[tet[v]]);
    let m = Matrix3::from_columns(&[p(1) - p(0), p(2) - p(0), p(3) - p(0)]);
    m.determinant() / 6.0
}

/// Plain-text mesh import.
///
/// Grammar (whitespace separated, no comments):
///   n_nodes, then n_nodes lines "x y z";
///   n_elements, then n_elements lines of four zero-based node ids;
///   n_fixed_nodes, then that many node ids;
///   n_loaded_faces, then that many lines of three node ids per triangle.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut tokens = text.split_whitespace();
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("unexpected end of mesh text, wanted {what}")))?
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
    };

    let n_nodes = next_usize("node count")?;
    let mut raw_nodes = Vec::with_capacity(3 * n_nodes);
    {
        let mut toks = text.split_whitespace().skip(1);
        for k in 0..3 * n_nodes {
            let t = toks
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of node coordinates".into()))?;
            let v: f64 = t
                .parse()
                .map_err(|e| Error::Parse(format!("bad coordinate {k}: {e}")))?;
            raw_nodes.push(v);
        }
    }
    // Re-seek the shared iterator past the coordinates.
    let mut tokens = text.split_whitespace().skip(1 + 3 * n_nodes);
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("unexpected end of mesh text, wanted {what}")))?
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
    };

    let nodes: Vec<[f64; 3]> = raw_nodes
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    let n_elements = next_usize("element count")?;
    let mut elements = Vec::with_capacity(n_elements);
    for _ in 0..n_elements {
        let mut tet = [0usize; 4];
        for slot in &mut tet {
            *slot = next_usize("element node id")?;
        }
        elements.push(tet);
    }

    let n_fixed = next_usize("fixed node count")?;
    let mut fixed = Vec::with_capacity(n_fixed);
    for _ in 0..n_fixed {
        fixed.push(next_usize("fixed node id")?);
    }

    let n_faces = next_usize("loaded face count")?;
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let mut tri = [0usize; 3];
        for slot in &mut tri {
            *slot = next_usize("face node id")?;
        }
        for &v in &tri {
            if v >= nodes.len() {
                return Err(Error::Parse(format!("face node {v} out of range")));
            }
        }
        let area = triangle_area(&nodes[tri[0]], &nodes[tri[1]], &nodes[tri[2]]);
        faces.push(TriFace { nodes: tri, area });
    }

    let mesh = Mesh::new(nodes, elements, &fixed, faces)?;
    // Imported connectivity must already be positively oriented.
    for (e, tet) in mesh.elements.iter().enumerate() {
        if tet_signed_volume(&mesh.nodes, tet) <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "element {e} has non-positive volume"
            )));
        }
    }
    Ok(mesh)
}

/// Per-element constant shape-function gradients and volumes (one-point
/// quadrature on linear tetrahedra is exact for the integrands used here).
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// grads[e][a] = gradient of shape function of local node a.
    grads: Vec<[[f64; 3]; 4]>,
    volumes: Vec<f64>,
}

impl Kinematics {
    pub fn new(mesh: &Mesh) -> Result<Kinematics> {
        let mut grads = Vec::with_capacity(mesh.n_elements());
        let mut volumes = Vec::with_capacity(mesh.n_elements());
        for (e, tet) in mesh.elements().iter().enumerate() {
            let p = |v: usize| Vector3::from(mesh.nodes()[tet[v]]);
            let m = Matrix3::from_columns(&[p(1) - p(0), p(2) - p(0), p(3) - p(0)]);
            let det = m.determinant();
            if !(det > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "element {e} has non-positive volume {}",
                    det / 6.0
                )));
            }
            let inv = m.try_inverse().ok_or_else(|| {
                Error::InvalidGeometry(format!("element {e} is degenerate"))
            })?;
            let mut g = [[0.0; 3]; 4];
            for a in 1..4 {
                for j in 0..3 {
                    g[a][j] = inv[(a - 1, j)];
                }
            }
            for j in 0..3 {
                g[0][j] = -(g[1][j] + g[2][j] + g[3][j]);
            }
            grads.push(g);
            volumes.push(det / 6.0);
        }
        Ok(Kinematics { grads, volumes })
    }

    pub fn volume(&self, e: usize) -> f64 {
        self.volumes[e]
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Small strain of a global displacement vector on element e.
    pub fn strain(&self, mesh: &Mesh, e: usize, u: &[f64]) -> SymTensor {
        let g = &self.grads[e];
        let tet = &mesh.elements()[e];
        let mut h = [[0.0_f64; 3]; 3]; // displacement gradient
        for (a, &node) in tet.iter().enumerate() {
            for i in 0..3 {
                let ua = u[3 * node + i];
                for j in 0..3 {
                    h[i][j] += ua * g[a][j];
                }
            }
        }
        SymTensor::new([
            h[0][0],
            h[1][1],
            h[2][2],
            0.5 * (h[0][1] + h[1][0]),
            0.5 * (h[1][2] + h[2][1]),
            0.5 * (h[0][2] + h[2][0]),
        ])
    }

    /// Engineering strain-displacement matrix (6 x 12) of element e.
    pub fn b_matrix(&self, e: usize) -> nalgebra::SMatrix<f64, 6, 12> {
        let g = &self.grads[e];
        let mut b = nalgebra::SMatrix::<f64, 6, 12>::zeros();
        for a in 0..4 {
            let c = 3 * a;
            b[(0, c)] = g[a][0];
            b[(1, c + 1)] = g[a][1];
            b[(2, c + 2)] = g[a][2];
            b[(3, c)] = g[a][1];
            b[(3, c + 1)] = g[a][0];
            b[(4, c + 1)] = g[a][2];
            b[(4, c + 2)] = g[a][1];
            b[(5, c)] = g[a][2];
            b[(5, c + 2)] = g[a][0];
        }
        b
    }

    /// Scatter vol * B^T sigma of element e into a global force vector.
    pub fn add_internal_force(&self, mesh: &Mesh, e: usize, stress: &SymTensor, out: &mut [f64]) {
        let g = &self.grads[e];
        let s = stress.to_matrix();
        let vol = self.volumes[e];
        for (a, &node) in mesh.elements()[e].iter().enumerate() {
            for i in 0..3 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += s[(i, j)] * g[a][j];
                }
                out[3 * node + i] += vol * acc;
            }
        }
    }
}

/// Per-element strains for a global displacement vector.
pub fn strain_from_displacement(mesh: &Mesh, kin: &Kinematics, u: &[f64]) -> Result<Vec<SymTensor>> {
    if u.len() != mesh.n_dofs() {
        return Err(Error::DimensionMismatch(format!(
            "displacement length {} vs {} dofs",
            u.len(),
            mesh.n_dofs()
        )));
    }
    Ok((0..mesh.n_elements())
        .map(|e| kin.strain(mesh, e, u))
        .collect())
}

/// Assembler bundles the sparsity pattern so repeated assemblies reuse it.
#[derive(Clone, Debug)]
pub struct Assembler {
    pattern: Arc<Pattern>,
}

impl Assembler {
    pub fn new(mesh: &Mesh) -> Assembler {
        let n = mesh.n_dofs();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for tet in mesh.elements() {
            for &a in tet {
                for &b in tet {
                    for i in 0..3 {
                        for j in 0..3 {
                            adj[3 * a + i].push(3 * b + j);
                        }
                    }
                }
            }
        }
        Assembler {
            pattern: Arc::new(Pattern::from_adjacency(n, adj)),
        }
    }

    pub fn pattern(&self) -> Arc<Pattern> {
        self.pattern.clone()
    }

    /// K = sum_e vol_e B_e^T C_e B_e for a per-element 6x6 material matrix.
    pub fn assemble_matrix<F>(&self, mesh: &Mesh, kin: &Kinematics, material: F) -> SparseSym
    where
        F: Fn(usize) -> Matrix6,
    {
        let mut k = SparseSym::zeros(self.pattern.clone());
        self.assemble_matrix_into(mesh, kin, material, &mut k);
        k
    }

    /// Same as `assemble_matrix` but reusing an existing value buffer.
    pub fn assemble_matrix_into<F>(
        &self,
        mesh: &Mesh,
        kin: &Kinematics,
        material: F,
        out: &mut SparseSym,
    ) where
        F: Fn(usize) -> Matrix6,
    {
        out.set_zero();
        for e in 0..mesh.n_elements() {
            let b = kin.b_matrix(e);
            let ke = b.transpose() * material(e) * b * kin.volume(e);
            let tet = &mesh.elements()[e];
            for (la, &na) in tet.iter().enumerate() {
                for (lb, &nb) in tet.iter().enumerate() {
                    for i in 0..3 {
                        for j in 0..3 {
                            out.add(3 * na + i, 3 * nb + j, ke[(3 * la + i, 3 * lb + j)]);
                        }
                    }
                }
            }
        }
    }
}

/// Stiffness for one elastic-tensor field (one affine component of the
/// material). Coefficient fields may be sign-indefinite; only weighted sums
/// fed to the solver need to be definite.
pub fn assemble_component_stiffness(
    mesh: &Mesh,
    kin: &Kinematics,
    assembler: &Assembler,
    c: &[ElasticTensor],
) -> Result<SparseSym> {
    if c.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch(format!(
            "material field length {} vs {} elements",
            c.len(),
            mesh.n_elements()
        )));
    }
    Ok(assembler.assemble_matrix(mesh, kin, |e| c[e].voigt()))
}

/// Internal force vector for a per-element stress field.
pub fn assemble_internal_force(
    mesh: &Mesh,
    kin: &Kinematics,
    stress: &[SymTensor],
) -> Result<Vec<f64>> {
    if stress.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch(format!(
            "stress field length {} vs {} elements",
            stress.len(),
            mesh.n_elements()
        )));
    }
    let mut out = vec![0.0; mesh.n_dofs()];
    for e in 0..mesh.n_elements() {
        kin.add_internal_force(mesh, e, &stress[e], &mut out);
    }
    Ok(out)
}

/// Consistent nodal loads for a uniform traction on the loaded faces. For a
/// constant traction on linear triangles each face node takes area/3.
pub fn assemble_traction_force(mesh: &Mesh, traction: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_dofs()];
    for face in mesh.neumann_faces() {
        let w = face.area / 3.0;
        for &node in &face.nodes {
            for c in 0..3 {
                out[3 * node + c] += w * traction[c];
            }
        }
    }
    out
}

/// Linear system after eliminating constrained dofs.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Sorted free dof ids.
    pub free: Vec<usize>,
    pub n_dofs: usize,
    /// Prescribed values on the constrained dofs (full length, zeros on free).
    pub boundary: Vec<f64>,
}

impl ReducedSystem {
    /// Direct solve; returns the full-length vector including prescribed values.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let x = solve_spd(self.matrix.clone(), &self.rhs)?;
        Ok(self.expand(x.as_slice()))
    }

    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = self.boundary.clone();
        for (i, &dof) in self.free.iter().enumerate() {
            full[dof] = reduced[i];
        }
        full
    }
}

/// Homogeneous Dirichlet elimination.
pub fn apply_dirichlet(k: &SparseSym, f: &[f64], dirichlet: &[usize]) -> Result<ReducedSystem> {
    reduce_with_values(k, f, dirichlet, None)
}

/// Dirichlet elimination with optional prescribed values (same length as
/// `dirichlet`); the right-hand side picks up -K_fc * u_c.
pub fn reduce_with_values(
    k: &SparseSym,
    f: &[f64],
    dirichlet: &[usize],
    values: Option<&[f64]>,
) -> Result<ReducedSystem> {
    let n = k.n();
    if f.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "rhs length {} vs matrix size {n}",
            f.len()
        )));
    }
    let mut fixed = dirichlet.to_vec();
    let perm: Vec<usize> = (0..fixed.len()).collect();
    let mut order = perm;
    order.sort_by_key(|&i| fixed[i]);
    fixed.sort_unstable();
    for w in fixed.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DimensionMismatch("duplicate dirichlet dof".into()));
        }
    }
    if fixed.last().is_some_and(|&d| d >= n) {
        return Err(Error::DimensionMismatch("dirichlet dof out of range".into()));
    }
    let free: Vec<usize> = {
        let set: std::collections::BTreeSet<usize> = fixed.iter().copied().collect();
        (0..n).filter(|d| !set.contains(d)).collect()
    };
    if free.is_empty() {
        return Err(Error::EmptySystem);
    }

    let mut boundary = vec![0.0; n];
    if let Some(vals) = values {
        if vals.len() != dirichlet.len() {
            return Err(Error::DimensionMismatch(
                "prescribed values must match dirichlet dof count".into(),
            ));
        }
        // `order` maps sorted position -> original index.
        for (pos, &orig) in order.iter().enumerate() {
            boundary[fixed[pos]] = vals[orig];
        }
    }

    let matrix = k.reduce_dense(&free);
    let mut rhs = DVector::from_iterator(free.len(), free.iter().map(|&d| f[d]));
    if values.is_some() {
        let kfc = k.gather_rect(&free, &fixed);
        let uc = DVector::from_iterator(fixed.len(), fixed.iter().map(|&d| boundary[d]));
        rhs -= kfc * uc;
    }

    Ok(ReducedSystem {
        matrix,
        rhs,
        free,
        n_dofs: n,
        boundary,
    })
}
