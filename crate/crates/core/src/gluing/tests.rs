use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::diff::check_gradient;
use crate::linalg::sym_apply;

pub(crate) fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    let g = nalgebra::DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    Mat::from_fn(m, m, |i, j| q[(i, j)])
}

/// `Q diag(λ) Qᵀ` with log-uniform eigenvalues spanning `cond`.
pub(crate) fn random_spd(rng: &mut ChaCha8Rng, m: usize, cond: f64) -> Mat {
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

/// Transport through eigendecompositions, independent of the tape code.
fn transport_oracle(gi: &Mat, gj: &Mat) -> Mat {
    let sj = sym_apply(gj, f64::sqrt);
    let sj_inv = sym_apply(gj, |x| 1.0 / x.sqrt());
    let inner = sym_apply(&sj.matmul(gi).matmul(&sj), f64::sqrt);
    sj_inv.matmul(&inner).matmul(&sj_inv)
}

/// `exp` by scaling and squaring of a Taylor series.
fn expm_oracle(a: &Mat) -> Mat {
    let n = a.rows();
    let s = (a.frob().log2().ceil().max(0.0) as i32) + 4;
    let x = a.scale(0.5f64.powi(s));
    let mut term = Mat::eye(n);
    let mut acc = Mat::eye(n);
    for k in 1..30 {
        term = term.matmul(&x).scale(1.0 / k as f64);
        acc = acc.add(&term);
    }
    for _ in 0..s {
        acc = acc.matmul(&acc);
    }
    acc
}

fn tp(i: usize, j: usize, k: usize) -> TrianglePath {
    TrianglePath::new(i, j, k)
}

#[test]
fn sqrt_of_diagonal() {
    let tape = Tape::new();
    let g = tape.leaf(Mat::diag(&[4.0, 9.0]));
    let (s, si) = sqrt_default(g).unwrap();
    assert!(s.value().max_abs_diff(&Mat::diag(&[2.0, 3.0])) < 1e-14);
    assert!(si.value().max_abs_diff(&Mat::diag(&[0.5, 1.0 / 3.0])) < 1e-14);
    let (c, _) = sqrt_default(tape.constant(Mat::diag(&[4.0, 9.0]))).unwrap();
    assert_eq!(*c.value(), Mat::diag(&[2.0, 3.0]));
}

#[test]
fn sqrt_of_identity_takes_one_iteration() {
    let tape = Tape::new();
    let (s, si) = spd_sqrt(tape.leaf(Mat::eye(3)), SQRT_TOL, 1).unwrap();
    assert_eq!(*s.value(), Mat::eye(3));
    assert_eq!(*si.value(), Mat::eye(3));
}

#[test]
fn sqrt_residual_on_random_spd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cond in [1.0, 1e2, 1e4, 1e6] {
        for _ in 0..20 {
            let g = random_spd(&mut rng, 6, cond);
            let tape = Tape::new();
            let (s, si) = sqrt_default(tape.leaf(g.clone())).unwrap();
            let s = s.value();
            let res = s.matmul(&s).sub(&g).frob() / g.frob();
            assert!(res < 1e-10, "cond {cond}: residual {res}");
            assert!(s.matmul(&si.value()).max_abs_diff(&Mat::eye(6)) < 1e-6);
        }
    }
}

#[test]
fn sqrt_reports_non_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let g = tape.leaf(random_spd(&mut rng, 4, 1e3));
    match spd_sqrt(g, SQRT_TOL, 1) {
        Err(GlueError::NotConverged {
            iterations: 1,
            residual,
        }) => assert!(residual > SQRT_TOL),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn log_of_diagonal_and_identity() {
    let e = std::f64::consts::E;
    let tape = Tape::new();
    let (l, d) = spd_log_and_det(tape.leaf(Mat::diag(&[e, e * e]))).unwrap();
    assert!(l.value().max_abs_diff(&Mat::diag(&[1.0, 2.0])) < 1e-12);
    assert!((d.item() - 3.0).abs() < 1e-12);
    let (l, d) = spd_log_and_det(tape.leaf(Mat::eye(3))).unwrap();
    assert!(l.value().max_abs_diff(&Mat::zeros(3, 3)) < 1e-15);
    assert_eq!(d.item(), 0.0);
    let fast = spd_log_diag(tape.constant(Mat::diag(&[e, e * e]))).unwrap();
    assert!((fast.value().as_slice()[1] - 2.0).abs() < 1e-15);
}

#[test]
fn exp_of_log_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let g = random_spd(&mut rng, 4, 1e3);
        let tape = Tape::new();
        let l = spd_log(tape.leaf(g.clone())).unwrap().value();
        let back = expm_oracle(&l);
        assert!(back.sub(&g).frob() / g.frob() < 1e-8);
        let ld = spd_logdet(tape.leaf(g.clone())).unwrap().item();
        let det = g.to_nalgebra().determinant();
        assert!((ld - det.ln()).abs() < 1e-9, "{} {}", ld, det.ln());
    }
}

#[test]
fn transport_examples() {
    let tape = Tape::new();
    let p = transport(tape.leaf(Mat::diag(&[4.0, 1.0])), tape.leaf(Mat::eye(2)))
        .unwrap()
        .value();
    assert!(p.max_abs_diff(&Mat::diag(&[2.0, 1.0])) < 1e-12);
    let iso = p.transpose().matmul(&p);
    assert!(iso.max_abs_diff(&Mat::diag(&[4.0, 1.0])) < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_spd(&mut rng, 3, 10.0);
    let p = transport(tape.leaf(g.clone()), tape.leaf(g))
        .unwrap()
        .value();
    assert!(p.max_abs_diff(&Mat::eye(3)) < 1e-10);
}

#[test]
fn transport_is_an_isometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let gi = random_spd(&mut rng, 5, 1e4);
        let gj = random_spd(&mut rng, 5, 1e4);
        let tape = Tape::new();
        let p = transport(tape.leaf(gi.clone()), tape.leaf(gj.clone()))
            .unwrap()
            .value();
        let err = p.transpose().matmul(&gj).matmul(&p).sub(&gi).frob() / gi.frob();
        assert!(err < 1e-6, "{err}");
        assert!(p.sub(&p.transpose()).frob() < 1e-8 * p.frob());
    }
}

#[test]
fn holonomy_of_identities_is_identity() {
    let tape = Tape::new();
    let mut t = HashMap::new();
    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
        t.insert((a, b), tape.constant(Mat::eye(2)));
    }
    assert_eq!(
        *holonomy_map(&[0, 1, 2, 0], &t).unwrap().value(),
        Mat::eye(2)
    );
    assert_eq!(
        holonomy_map(&[0, 2, 0], &t).unwrap_err(),
        GlueError::MissingTransport { from: 0, to: 2 }
    );
}

fn non_commuting() -> Vec<Mat> {
    vec![
        Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]),
        Mat::eye(2),
        Mat::diag(&[4.0, 1.0]),
    ]
}

#[test]
fn non_commuting_triangle_matches_direct_product() {
    let g = non_commuting();
    let oracle = transport_oracle(&g[2], &g[0])
        .matmul(&transport_oracle(&g[1], &g[2]))
        .matmul(&transport_oracle(&g[0], &g[1]));
    let tape = Tape::new();
    let metrics: Vec<Var<'_>> = g.iter().map(|m| tape.leaf(m.clone())).collect();
    let h = GeometryCache::new(&metrics)
        .triangle_holonomy(tp(0, 1, 2))
        .unwrap()
        .value();
    assert!(h.max_abs_diff(&oracle) < 1e-10);
    assert!(h.max_abs_diff(&Mat::eye(2)) > 1e-3);
    let loss = holonomy_loss(&[tp(0, 1, 2)], &metrics).unwrap().item();
    assert!((loss - oracle.sub(&Mat::eye(2)).frob_sq()).abs() < 1e-10);
    assert!(loss > 0.0);
}

#[test]
fn diagonal_and_equal_metrics_have_zero_holonomy() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let tape = Tape::new();
        let metrics: Vec<Var<'_>> = (0..3)
            .map(|_| {
                tape.leaf(Mat::diag(
                    &(0..4)
                        .map(|_| rng.random_range(0.1..10.0))
                        .collect::<Vec<_>>(),
                ))
            })
            .collect();
        let h = GeometryCache::new(&metrics)
            .triangle_holonomy(tp(0, 1, 2))
            .unwrap()
            .value();
        assert!(h.sub(&Mat::eye(4)).frob() < 1e-10);
        assert!(holonomy_loss(&[tp(0, 1, 2)], &metrics).unwrap().item() < 1e-12);
    }
    let tape = Tape::new();
    let g = random_spd(&mut rng, 3, 50.0);
    let metrics: Vec<Var<'_>> = (0..3).map(|_| tape.leaf(g.clone())).collect();
    assert!(holonomy_loss(&[tp(0, 1, 2)], &metrics).unwrap().item() < 1e-18);
}

#[test]
fn holonomy_preserves_start_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let g: Vec<Mat> = (0..4).map(|_| random_spd(&mut rng, 3, 100.0)).collect();
        let tape = Tape::new();
        let mut t = HashMap::new();
        for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            t.insert(
                (a, b),
                transport(tape.leaf(g[a].clone()), tape.leaf(g[b].clone())).unwrap(),
            );
        }
        let h = holonomy_map(&[0, 1, 2, 3, 0], &t).unwrap().value();
        let err = h.transpose().matmul(&g[0]).matmul(&h).sub(&g[0]).frob() / g[0].frob();
        assert!(err < 1e-6);
    }
}

#[test]
fn curvature_ratio_examples() {
    assert!(
        (curvature_ratio(&Mat::diag(&[2.0, 3.0]), &Mat::diag(&[3.0, 2.0])).unwrap() - 1.0).abs()
            < 1e-15
    );
    let r = curvature_ratio(&Mat::eye(2), &Mat::diag(&[0.9, 1.0])).unwrap();
    assert!((r - 1.0 / 0.9).abs() < 1e-12);
    assert!((ricci_estimate(r) + 1.0 / 3.0).abs() < 1e-12);
    // numerator metric carries g(t) = 1 - (Ric/3) t^2 along directions
    // orthogonal to the geodesic, denominator is the expansion point
    let ric = 0.3;
    let num = Mat::diag(&[1.0, 1.0 - ric / 3.0]);
    assert!(ricci_estimate(curvature_ratio(&num, &Mat::eye(2)).unwrap()) > 0.0);
}

#[test]
fn curvature_loss_examples() {
    let tape = Tape::new();
    let same: Vec<Var<'_>> = (0..3).map(|_| tape.leaf(Mat::diag(&[2.0, 3.0]))).collect();
    assert_eq!(curvature_loss(&[tp(0, 1, 2)], &same).unwrap().item(), 0.0);
    let c: f64 = 1.7;
    let geo: Vec<Var<'_>> = [1.0, c, c * c]
        .iter()
        .map(|&d| tape.leaf(Mat::diag(&[d, 1.0])))
        .collect();
    assert!(curvature_loss(&[tp(0, 1, 2)], &geo).unwrap().item() < 1e-28);
    let dets: Vec<Var<'_>> = [1.0, 2.0, 1.0]
        .iter()
        .map(|&d| tape.leaf(Mat::diag(&[d, 1.0])))
        .collect();
    let v = curvature_loss(&[tp(0, 1, 2)], &dets).unwrap().item();
    assert!((v - (2.0 * 2f64.ln()).powi(2)).abs() < 1e-12);
    assert!((v - 1.9218).abs() < 1e-4);
}

fn dense_energy(g: &[f64], l: &Mat, k: usize) -> f64 {
    let nl = l.to_nalgebra();
    let p = (0..k).fold(nalgebra::DMatrix::identity(g.len(), g.len()), |acc, _| {
        acc * &nl
    });
    (p * nalgebra::DVector::from_column_slice(g)).norm_squared()
}

#[test]
fn dirichlet_energy_examples() {
    let tri = rw_laplacian(3, &[(0, 1), (1, 2), (0, 2)]);
    assert!(dirichlet_energy(&[2.5, 2.5, 2.5], &tri, 3) < 1e-28);
    let pair = rw_laplacian(2, &[(0, 1)]);
    assert!(
        (dirichlet_energy(&[1.0, 0.0], &pair, 1) - dense_energy(&[1.0, 0.0], &pair, 1)).abs()
            < 1e-14
    );
    assert_eq!(dirichlet_energy(&[1.0, 0.0], &pair, 1), 2.0);
    let path = rw_laplacian(3, &[(0, 1), (1, 2)]);
    let g = [0.0, 1.0, 0.0];
    assert!((dirichlet_energy(&g, &path, 2) - dense_energy(&g, &path, 2)).abs() < 1e-14);
}

fn complete(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect()
}

#[test]
fn triviality_oracle_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k4 = complete(4);
    let diag: Vec<Mat> = (0..4)
        .map(|_| {
            Mat::diag(
                &(0..3)
                    .map(|_| rng.random_range(0.5..4.0))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let t = edge_transports(&k4, &diag).unwrap();
    let report = triangle_triviality_oracle(4, &k4, &t, 1e-8).unwrap();
    assert!(
        matches!(
            report,
            Triviality::Holds {
                triangles: 4,
                cycles: 3
            }
        ),
        "{report:?}"
    );

    let mut mixed = diag.clone();
    mixed[2] = random_spd(&mut rng, 3, 20.0);
    let t = edge_transports(&k4, &mixed).unwrap();
    let report = triangle_triviality_oracle(4, &k4, &t, 1e-8).unwrap();
    assert!(
        matches!(report, Triviality::NontrivialTriangle { .. }),
        "{report:?}"
    );
    assert!(report.implication_holds());

    let square = [(0, 1), (1, 2), (2, 3), (3, 0)];
    let t = edge_transports(&square, &diag).unwrap();
    let report = triangle_triviality_oracle(4, &square, &t, 1e-8).unwrap();
    assert!(matches!(report, Triviality::Uncovered { .. }));
}

#[test]
fn gradient_of_holonomy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let leaves: Vec<Mat> = (0..3).map(|_| random_spd(&mut rng, 3, 10.0)).collect();
    let check = check_gradient(|_, v| holonomy_loss(&[tp(0, 1, 2)], v), &leaves, 1e-5);
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn gradient_of_logdet_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = random_spd(&mut rng, 4, 20.0);
    let check = check_gradient(
        |_, v| Ok::<_, GlueError>(spd_log(v[0])?.trace()),
        &[g],
        1e-5,
    );
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn gradient_of_curvature_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let leaves: Vec<Mat> = (0..3).map(|_| random_spd(&mut rng, 3, 10.0)).collect();
    let check = check_gradient(|_, v| curvature_loss(&[tp(0, 1, 2)], v), &leaves, 1e-5);
    assert!(check.passes(1e-4), "{check:?}");
}
