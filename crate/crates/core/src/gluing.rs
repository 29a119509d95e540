//! SPD calculus on the tape and the geometric gluing losses.
//!
//! Square roots use the Denman–Beavers iteration unrolled on the tape, so
//! gradients are exact for the recorded iterate count. Logarithms use
//! inverse scaling and squaring on top of the square root.

use std::collections::{BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::diff::{DiffError, Reduce, Tape, Var};
use crate::linalg::Mat;

pub const SQRT_TOL: f64 = 1e-12;
pub const SQRT_MAX_ITER: usize = 60;
/// Residual accepted once the iteration has stalled at rounding level.
pub const STALL_TOL: f64 = 1e-8;
/// Relative off-diagonal mass below which a metric counts as diagonal.
pub const DIAGONAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlueError {
    #[error("square root did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("no transport for edge ({from}, {to})")]
    MissingTransport { from: usize, to: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// A loop or an adjacent-edge pair `(i, j)`, `(j, k)`; the closing leg is
/// `(k, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrianglePath {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl TrianglePath {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        TrianglePath { i, j, k }
    }
}

/// True when the off-diagonal Frobenius mass is below `DIAGONAL_TOL·tr(G)`.
pub fn is_certified_diagonal(g: &Mat) -> bool {
    let n = g.rows();
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off += g.get(i, j) * g.get(i, j);
            }
        }
    }
    off.sqrt() < DIAGONAL_TOL * g.trace().abs()
}

/// `G^{1/2}` and `G^{-1/2}` by Denman–Beavers on `G/c` with
/// `c = ‖G‖_F/√M` (so the identity is already a fixed point).
pub fn spd_sqrt<'t>(
    g: Var<'t>,
    tol: f64,
    max_iter: usize,
) -> Result<(Var<'t>, Var<'t>), GlueError> {
    let (m, cols) = g.shape();
    assert_eq!(
        m, cols,
        "contract violation: square root of non-square matrix"
    );
    let tape = g.tape();
    let gv = g.value();
    if !g.is_tracked() && is_certified_diagonal(&gv) {
        let d = gv.diagonal();
        if let Some(index) = d.iter().position(|&x| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "sqrt",
                index: index * (m + 1),
                value: d[index],
            }
            .into());
        }
        let s: Vec<f64> = d.iter().map(|x| x.sqrt()).collect();
        let si: Vec<f64> = s.iter().map(|x| 1.0 / x).collect();
        return Ok((tape.constant(Mat::diag(&s)), tape.constant(Mat::diag(&si))));
    }
    let c = (g.frob_sq() * (1.0 / m as f64)).sqrt()?;
    let a = g.scale(c.powf(-1.0));
    let av = a.value();
    let a_norm = av.frob();
    let mut y = a;
    let mut z = tape.constant(Mat::eye(m));
    let mut residual = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let y_inv = y.inverse()?;
        let z_inv = z.inverse()?;
        y = (y + z_inv) * 0.5;
        z = (z + y_inv) * 0.5;
        let yv = y.value();
        residual = yv.matmul(&yv).sub(&av).frob() / a_norm;
        if !residual.is_finite() {
            break;
        }
        // rounding floors the residual; stop once it no longer improves
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if residual < tol || (stalled >= 2 && residual < tol.max(STALL_TOL)) {
            if residual < tol && residual > 4.0 * f64::EPSILON && stalled == 0 {
                // quadratic convergence: one more step reaches rounding level
                let y_inv = y.inverse()?;
                let z_inv = z.inverse()?;
                y = (y + z_inv) * 0.5;
                z = (z + y_inv) * 0.5;
            }
            let root_c = c.sqrt()?;
            return Ok((y.scale(root_c), z.scale(root_c.powf(-1.0))));
        }
    }
    Err(GlueError::NotConverged {
        iterations,
        residual,
    })
}

pub fn sqrt_default<'t>(g: Var<'t>) -> Result<(Var<'t>, Var<'t>), GlueError> {
    spd_sqrt(g, SQRT_TOL, SQRT_MAX_ITER)
}

fn diagonal_col<'t>(g: Var<'t>) -> Var<'t> {
    let eye = g.tape().constant(Mat::eye(g.shape().0));
    (g * eye).sum_along(Reduce::Cols)
}

/// Matrix logarithm of an SPD matrix.
pub fn spd_log<'t>(g: Var<'t>) -> Result<Var<'t>, GlueError> {
    let m = g.shape().0;
    let tape = g.tape();
    let gv = g.value();
    if !g.is_tracked() && is_certified_diagonal(&gv) {
        let d = gv.diagonal();
        if let Some(index) = d.iter().position(|&x| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "log",
                index: index * (m + 1),
                value: d[index],
            }
            .into());
        }
        let l: Vec<f64> = d.iter().map(|x| x.ln()).collect();
        return Ok(tape.constant(Mat::diag(&l)));
    }
    let eye = tape.constant(Mat::eye(m));
    let c = g.trace() * (1.0 / m as f64);
    let mut a = g.scale(c.powf(-1.0));
    let mut squarings = 0u32;
    while a.value().sub(&Mat::eye(m)).frob() > 0.25 {
        if squarings >= 64 {
            return Err(GlueError::NotConverged {
                iterations: 64,
                residual: a.value().sub(&Mat::eye(m)).frob(),
            });
        }
        a = sqrt_default(a)?.0;
        squarings += 1;
    }
    let x = a - eye;
    let mut term = x;
    let mut acc = x;
    for k in 2..200 {
        term = term.matmul(x);
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        acc = acc + term * (sign / k as f64);
        if term.value().frob() / (k as f64) < 1e-18 {
            break;
        }
    }
    let log = acc * f64::powi(2.0, squarings as i32) + eye.scale(c.ln()?);
    Ok((log + log.t()) * 0.5)
}

/// `log G` and `log det G = tr(log G)`.
pub fn spd_log_and_det<'t>(g: Var<'t>) -> Result<(Var<'t>, Var<'t>), GlueError> {
    let log = spd_log(g)?;
    Ok((log, log.trace()))
}

/// `log det G`; elementwise on the diagonal when `G` is certified diagonal.
pub fn spd_logdet<'t>(g: Var<'t>) -> Result<Var<'t>, GlueError> {
    if is_certified_diagonal(&g.value()) {
        return Ok(diagonal_col(g).ln()?.sum());
    }
    Ok(spd_log(g)?.trace())
}

/// Diagonal of `log G` as an `M×1` column; elementwise on the diagonal
/// when `G` is certified diagonal.
pub fn spd_log_diag<'t>(g: Var<'t>) -> Result<Var<'t>, GlueError> {
    if is_certified_diagonal(&g.value()) {
        return Ok(diagonal_col(g).ln()?);
    }
    Ok(diagonal_col(spd_log(g)?))
}

/// Edge translation `P = G_j^{-1/2}(G_j^{1/2} G_i G_j^{1/2})^{1/2} G_j^{-1/2}`,
/// an isometry from `(T_i, G_i)` to `(T_j, G_j)`: `PᵀG_jP = G_i`.
pub fn transport<'t>(gi: Var<'t>, gj: Var<'t>) -> Result<Var<'t>, GlueError> {
    assert_eq!(
        gi.shape(),
        gj.shape(),
        "contract violation: transport between different dimensions"
    );
    let tape = gi.tape();
    if !gi.is_tracked() && !gj.is_tracked() {
        let (a, b) = (gi.value(), gj.value());
        if is_certified_diagonal(&a) && is_certified_diagonal(&b) {
            let d: Vec<f64> = a
                .diagonal()
                .iter()
                .zip(b.diagonal())
                .map(|(x, y)| (x / y).sqrt())
                .collect();
            return Ok(tape.constant(Mat::diag(&d)));
        }
    }
    let (sj, sj_inv) = sqrt_default(gj)?;
    let inner = sj.matmul(gi).matmul(sj);
    let (root, _) = sqrt_default((inner + inner.t()) * 0.5)?;
    Ok(sj_inv.matmul(root).matmul(sj_inv))
}

/// Composition along `cycle` (first node repeated at the end), later edges
/// multiplied on the left.
pub fn holonomy_map<'t>(
    cycle: &[usize],
    transports: &HashMap<(usize, usize), Var<'t>>,
) -> Result<Var<'t>, GlueError> {
    assert!(
        cycle.len() >= 2,
        "contract violation: cycle needs at least one edge"
    );
    let mut h: Option<Var<'t>> = None;
    for w in cycle.windows(2) {
        let p = *transports
            .get(&(w[0], w[1]))
            .ok_or(GlueError::MissingTransport {
                from: w[0],
                to: w[1],
            })?;
        h = Some(match h {
            None => p,
            Some(acc) => p.matmul(acc),
        });
    }
    Ok(h.expect("non-empty cycle"))
}

/// Transports and log-determinants of a fixed metric set, computed lazily.
pub struct GeometryCache<'m, 't> {
    metrics: &'m [Var<'t>],
    transports: HashMap<(usize, usize), Var<'t>>,
    logdets: HashMap<usize, Var<'t>>,
}

impl<'m, 't> GeometryCache<'m, 't> {
    pub fn new(metrics: &'m [Var<'t>]) -> Self {
        GeometryCache {
            metrics,
            transports: HashMap::new(),
            logdets: HashMap::new(),
        }
    }

    pub fn transport(&mut self, i: usize, j: usize) -> Result<Var<'t>, GlueError> {
        if let Some(p) = self.transports.get(&(i, j)) {
            return Ok(*p);
        }
        let p = transport(self.metrics[i], self.metrics[j])?;
        self.transports.insert((i, j), p);
        Ok(p)
    }

    pub fn logdet(&mut self, i: usize) -> Result<Var<'t>, GlueError> {
        if let Some(l) = self.logdets.get(&i) {
            return Ok(*l);
        }
        let l = spd_logdet(self.metrics[i])?;
        self.logdets.insert(i, l);
        Ok(l)
    }

    pub fn triangle_holonomy(&mut self, p: TrianglePath) -> Result<Var<'t>, GlueError> {
        let pij = self.transport(p.i, p.j)?;
        let pjk = self.transport(p.j, p.k)?;
        let pki = self.transport(p.k, p.i)?;
        Ok(pki.matmul(pjk).matmul(pij))
    }

    /// `‖P_ki P_jk P_ij − I‖²_F`.
    pub fn holonomy_term(&mut self, p: TrianglePath) -> Result<Var<'t>, GlueError> {
        let h = self.triangle_holonomy(p)?;
        let eye = h.tape().constant(Mat::eye(h.shape().0));
        Ok((h - eye).frob_sq())
    }

    /// `|log r_ij − log r_jk|²` with `log r_ab = logdet G_a − logdet G_b`.
    pub fn curvature_term(&mut self, p: TrianglePath) -> Result<Var<'t>, GlueError> {
        let (li, lj, lk) = (self.logdet(p.i)?, self.logdet(p.j)?, self.logdet(p.k)?);
        Ok(((li - lj) - (lj - lk)).square())
    }

    /// `‖P_ij − I‖²_F`, the single-edge holonomy surrogate.
    pub fn edge_holonomy_term(&mut self, i: usize, j: usize) -> Result<Var<'t>, GlueError> {
        let p = self.transport(i, j)?;
        let eye = p.tape().constant(Mat::eye(p.shape().0));
        Ok((p - eye).frob_sq())
    }

    /// `|log r_ij|²`, the single-edge curvature surrogate.
    pub fn edge_curvature_term(&mut self, i: usize, j: usize) -> Result<Var<'t>, GlueError> {
        Ok((self.logdet(i)? - self.logdet(j)?).square())
    }
}

fn mean_of<'t>(terms: Vec<Var<'t>>) -> Var<'t> {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().expect("contract violation: empty path set");
    it.fold(first, |acc, t| acc + t) * (1.0 / n)
}

/// Mean over paths of `‖P_ki P_jk P_ij − I‖²_F`. The closing leg always uses
/// the direct transport between the endpoint metrics.
pub fn holonomy_loss<'t>(
    paths: &[TrianglePath],
    metrics: &[Var<'t>],
) -> Result<Var<'t>, GlueError> {
    assert!(!paths.is_empty(), "contract violation: empty path set");
    let mut cache = GeometryCache::new(metrics);
    let terms = paths
        .iter()
        .map(|&p| cache.holonomy_term(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_of(terms))
}

/// Mean over paths of `|log r_ij − log r_jk|²`.
pub fn curvature_loss<'t>(
    paths: &[TrianglePath],
    metrics: &[Var<'t>],
) -> Result<Var<'t>, GlueError> {
    assert!(!paths.is_empty(), "contract violation: empty path set");
    let mut cache = GeometryCache::new(metrics);
    let terms = paths
        .iter()
        .map(|&p| cache.curvature_term(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_of(terms))
}

/// `r = det G_i / det G_j`, evaluated in the log domain.
pub fn curvature_ratio(gi: &Mat, gj: &Mat) -> Result<f64, GlueError> {
    let tape = Tape::new();
    let li = spd_logdet(tape.constant(gi.clone()))?.item();
    let lj = spd_logdet(tape.constant(gj.clone()))?.item();
    Ok((li - lj).exp())
}

/// Ricci estimate `3(1 − r)`.
pub fn ricci_estimate(r: f64) -> f64 {
    3.0 * (1.0 - r)
}

/// Random-walk Laplacian `I − D⁻¹A`; isolated nodes get a zero row so
/// constants stay in the kernel.
pub fn rw_laplacian(n: usize, edges: &[(usize, usize)]) -> Mat {
    let mut a = Mat::zeros(n, n);
    for &(i, j) in edges {
        if i != j {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        if deg == 0.0 {
            continue;
        }
        for j in 0..n {
            let v = if i == j { 1.0 } else { 0.0 } - a.get(i, j) / deg;
            l.set(i, j, v);
        }
    }
    l
}

/// `‖L^k g‖²`.
pub fn dirichlet_energy(g: &[f64], laplacian: &Mat, k: usize) -> f64 {
    assert!(k >= 1, "contract violation: order must be >= 1");
    assert_eq!(
        g.len(),
        laplacian.rows(),
        "contract violation: field length vs node count"
    );
    let mut v = Mat::col_vector(g);
    for _ in 0..k {
        v = laplacian.matmul(&v);
    }
    v.frob_sq()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Triviality {
    /// Some edge lies in no triangle, so the hypothesis is unmet.
    Uncovered { edge: (usize, usize) },
    /// Some triangle has non-trivial holonomy; the implication holds vacuously.
    NontrivialTriangle { triangle: (usize, usize, usize) },
    /// All triangles and all fundamental cycles are trivial.
    Holds { triangles: usize, cycles: usize },
    /// All triangles trivial but this fundamental cycle is not.
    Violated { cycle: Vec<usize> },
}

impl Triviality {
    pub fn implication_holds(&self) -> bool {
        !matches!(self, Triviality::Violated { .. })
    }

    pub fn hypothesis_holds(&self) -> bool {
        matches!(self, Triviality::Holds { .. } | Triviality::Violated { .. })
    }
}

/// Transports for both directions of every edge, `P_ji = P_ij⁻¹`.
pub fn edge_transports(
    edges: &[(usize, usize)],
    metrics: &[Mat],
) -> Result<HashMap<(usize, usize), Mat>, GlueError> {
    let tape = Tape::new();
    let mut out = HashMap::new();
    for &(i, j) in edges {
        let p = transport(
            tape.constant(metrics[i].clone()),
            tape.constant(metrics[j].clone()),
        )?;
        let inv = p.inverse()?;
        out.insert((i, j), p.value().as_ref().clone());
        out.insert((j, i), inv.value().as_ref().clone());
    }
    Ok(out)
}

/// Brute-force check of "trivial triangle holonomy implies trivial cycle
/// holonomy" on a small graph (at most 10 nodes).
pub fn triangle_triviality_oracle(
    n: usize,
    edges: &[(usize, usize)],
    transports: &HashMap<(usize, usize), Mat>,
    tol: f64,
) -> Result<Triviality, GlueError> {
    assert!(
        n <= 10,
        "contract violation: brute-force oracle limited to 10 nodes"
    );
    let edge_set: BTreeSet<(usize, usize)> =
        edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let has = |a: usize, b: usize| edge_set.contains(&(a.min(b), a.max(b)));
    for &(a, b) in &edge_set {
        if !(0..n).any(|c| c != a && c != b && has(a, c) && has(b, c)) {
            return Ok(Triviality::Uncovered { edge: (a, b) });
        }
    }
    let tape = Tape::new();
    let vars: HashMap<(usize, usize), Var<'_>> = transports
        .iter()
        .map(|(&k, m)| (k, tape.constant(m.clone())))
        .collect();
    let trivial = |cycle: &[usize]| -> Result<bool, GlueError> {
        let h = holonomy_map(cycle, &vars)?.value();
        Ok(h.sub(&Mat::eye(h.rows())).frob() < tol)
    };
    let mut triangles = 0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                if has(a, b) && has(b, c) && has(a, c) {
                    triangles += 1;
                    if !trivial(&[a, b, c, a])? {
                        return Ok(Triviality::NontrivialTriangle {
                            triangle: (a, b, c),
                        });
                    }
                }
            }
        }
    }
    let cycles = fundamental_cycles(n, &edge_set);
    for cycle in &cycles {
        if !trivial(cycle)? {
            return Ok(Triviality::Violated {
                cycle: cycle.clone(),
            });
        }
    }
    Ok(Triviality::Holds {
        triangles,
        cycles: cycles.len(),
    })
}

/// One closed walk per non-tree edge of a BFS spanning forest.
fn fundamental_cycles(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut depth = vec![usize::MAX; n];
    let mut tree = BTreeSet::new();
    for root in 0..n {
        if depth[root] != usize::MAX {
            continue;
        }
        depth[root] = 0;
        let mut q = VecDeque::from([root]);
        while let Some(v) = q.pop_front() {
            for &u in &adj[v] {
                if depth[u] == usize::MAX {
                    depth[u] = depth[v] + 1;
                    parent[u] = Some(v);
                    tree.insert((u.min(v), u.max(v)));
                    q.push_back(u);
                }
            }
        }
    }
    let mut cycles = Vec::new();
    for &(u, v) in edges {
        if tree.contains(&(u, v)) {
            continue;
        }
        let (mut a, mut b) = (u, v);
        let mut up_u = vec![u];
        let mut up_v = vec![v];
        while a != b {
            if depth[a] >= depth[b] {
                a = parent[a].expect("connected component");
                up_u.push(a);
            } else {
                b = parent[b].expect("connected component");
                up_v.push(b);
            }
        }
        // u -> v, v up to the common ancestor, then down to u
        let mut cycle = vec![u];
        cycle.extend(up_v.iter().copied());
        cycle.extend(up_u.iter().rev().skip(1).copied());
        cycles.push(cycle);
    }
    cycles
}

#[cfg(test)]
pub(crate) mod tests;
