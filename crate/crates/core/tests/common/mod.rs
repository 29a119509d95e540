//! Independent oracles shared by the integration tests. Everything here is
//! computed with nalgebra or by brute force, never through the tape.
#![allow(dead_code)]

use manifold_glue::graph::{gen_synthetic, DomainDataset, SyntheticSpec};
use manifold_glue::linalg::Mat;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j))
}

pub fn from_na(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    let q = to_na(&gaussian(rng, m, m)).qr().q();
    from_na(&q)
}

/// `Q diag(λ) Qᵀ` whose eigenvalues span exactly `[1, cond]`.
pub fn random_spd(rng: &mut ChaCha8Rng, m: usize, cond: f64) -> Mat {
    let q = random_orthogonal(rng, m);
    let mut lambda: Vec<f64> = (0..m).map(|_| cond.powf(rng.random::<f64>())).collect();
    lambda[0] = 1.0;
    if m > 1 {
        lambda[1] = cond;
    }
    q.matmul(&Mat::diag(&lambda))
        .matmul(&q.transpose())
        .symmetrize()
}

/// `f` applied to the spectrum of a symmetric matrix.
pub fn sym_fn(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let e = SymmetricEigen::new(to_na(&a.symmetrize()));
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    from_na(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

/// `G_j^{-1/2} (G_j^{1/2} G_i G_j^{1/2})^{1/2} G_j^{-1/2}` via eigendecompositions.
pub fn transport_oracle(gi: &Mat, gj: &Mat) -> Mat {
    let sj = sym_fn(gj, f64::sqrt);
    let sj_inv = sym_fn(gj, |x| 1.0 / x.sqrt());
    let inner = sym_fn(&sj.matmul(gi).matmul(&sj), f64::sqrt);
    sj_inv.matmul(&inner).matmul(&sj_inv)
}

pub fn logdet_oracle(g: &Mat) -> f64 {
    SymmetricEigen::new(to_na(g))
        .eigenvalues
        .iter()
        .map(|l| l.ln())
        .sum()
}

/// Random connected graph: a random spanning tree plus extra edges with probability `p`.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p && !edges.contains(&(a, b)) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Random graph on `n` nodes where every edge lies in some triangle.
pub fn random_triangle_covered_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut adj = vec![vec![false; n]; n];
    let add = |adj: &mut Vec<Vec<bool>>, a: usize, b: usize| {
        adj[a][b] = true;
        adj[b][a] = true;
    };
    // seed with a few random triangles, then patch uncovered edges
    for _ in 0..rng.random_range(1..=n) {
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n)) % n;
        let mut c = rng.random_range(0..n);
        while c == a || c == b {
            c = rng.random_range(0..n);
        }
        add(&mut adj, a, b);
        add(&mut adj, b, c);
        add(&mut adj, a, c);
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < 0.2 {
                add(&mut adj, a, b);
            }
        }
    }
    loop {
        let uncovered = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .find(|&(a, b)| adj[a][b] && !(0..n).any(|c| adj[a][c] && adj[b][c]));
        match uncovered {
            None => break,
            Some((a, b)) => {
                let mut c = rng.random_range(0..n);
                while c == a || c == b {
                    c = rng.random_range(0..n);
                }
                add(&mut adj, a, c);
                add(&mut adj, b, c);
            }
        }
    }
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| adj[a][b])
        .collect()
}

/// `exp(−tL)` for a symmetric `L`.
pub fn heat_kernel(l: &Mat, t: f64) -> Mat {
    sym_fn(l, |x| (-t * x).exp())
}

/// Weighted combinatorial Laplacian `D − A`.
pub fn weighted_laplacian(n: usize, edges: &[(usize, usize, f64)]) -> Mat {
    let mut l = Mat::zeros(n, n);
    for &(a, b, w) in edges {
        l.set(a, b, l.get(a, b) - w);
        l.set(b, a, l.get(b, a) - w);
        l.set(a, a, l.get(a, a) + w);
        l.set(b, b, l.get(b, b) + w);
    }
    l
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Reference suite shrunk to `records` per domain of `nodes` nodes.
pub fn small_suite(
    records: usize,
    nodes: (usize, usize),
    feature_dim: usize,
    seed: u64,
) -> Vec<DomainDataset> {
    let mut spec = SyntheticSpec::reference_suite();
    for d in &mut spec.domains {
        d.records = records;
        d.nodes = nodes;
        d.feature_dim = feature_dim;
    }
    gen_synthetic(&spec, seed).expect("valid spec")
}
