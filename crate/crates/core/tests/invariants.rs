//! Property tests for the cross-module invariants. Inputs are drawn from
//! seeded generators so failures shrink to a seed plus a few sizes.

mod common;

use std::collections::{BTreeMap, HashMap};

use common::*;
use manifold_glue::adapt::{gtm, prompt_adapt, ProtoTable, TransferGraph};
use manifold_glue::checkpoint::Checkpoint;
use manifold_glue::config::{config_hash, PretrainConfig};
use manifold_glue::diff::Tape;
use manifold_glue::encoder::{gcn_forward, mean_pool, normalized_adjacency, EncoderParams};
use manifold_glue::frame::{local_metric, orthogonal_frame, LengthMode, JITTER};
use manifold_glue::gluing::{holonomy_map, sqrt_default, transport, GeometryCache};
use manifold_glue::linalg::Mat;
use manifold_glue::pretrain::{init_state, knn_graph, sample_triangle_paths};
use manifold_glue::prototypes::{proto_contrastive_loss, Prototypes, RiemannianPrototype};
use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: &Mat, b: &Mat) -> f64 {
    a.sub(b).frob() / b.frob().max(f64::MIN_POSITIVE)
}

fn min_eigenvalue(g: &Mat) -> f64 {
    SymmetricEigen::new(to_na(g))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn random_edges(r: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if r.random::<f64>() < 0.4 {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn prototype(name: &str, z: Vec<f64>, log_g: Mat) -> RiemannianPrototype {
    let m = log_g.rows();
    let mut p = RiemannianPrototype::new(name, z.len(), m);
    p.ema_update(&z, &log_g, 0.5);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_matches_tangent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let a = tape.leaf(gaussian(&mut r, 3, 4));
        let b = tape.leaf(gaussian(&mut r, 4, 3));
        let m = a.matmul(b);
        let p = (m.matmul(m.t()) + tape.constant(Mat::eye(3))).inverse().unwrap();
        let y = m.softmax_rows() * p + m.square().add_scalar(1.0).ln().unwrap() - m.relu().exp().t();
        let (ua, ub, v) = (gaussian(&mut r, 3, 4), gaussian(&mut r, 4, 3), gaussian(&mut r, 3, 3));
        let tangents = tape.jvp(&[(a, ua.clone()), (b, ub.clone())]);
        let ju = tangents[y.id()].clone().unwrap();
        let grads = tape.backward((y * tape.constant(v.clone())).sum()).unwrap();
        let lhs = ju.dot(&v);
        let rhs = grads.wrt(a).dot(&ua) + grads.wrt(b).dot(&ub);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn replay_reproduces_every_value(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let a = tape.leaf(gaussian(&mut r, 4, 4));
        let g = a.matmul(a.t()) + tape.constant(Mat::eye(4));
        let (s, _) = sqrt_default(g).unwrap();
        let _ = (s.frob_sq() + g.inverse().unwrap().trace()).sqrt().unwrap();
        prop_assert_eq!(tape.replay(), tape.values());
    }

    #[test]
    fn gcn_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let mut r = rng(seed);
        let edges = random_edges(&mut r, n);
        let x = gaussian(&mut r, n, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let weighted = |e: &[(usize, usize)]| e.iter().map(|&(a, b)| (a, b, 1.0)).collect::<Vec<_>>();
        let permuted_edges: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut xp = Mat::zeros(n, 4);
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..4 {
                xp.set(pi, j, x.get(i, j));
            }
        }
        let params = EncoderParams::init(4, 6, 5, 0.0, seed);
        let tape = Tape::new();
        let enc = params.on(&tape, false);
        let h = gcn_forward(&enc, &normalized_adjacency(n, &weighted(&edges)), tape.constant(x), None);
        let hp = gcn_forward(&enc, &normalized_adjacency(n, &weighted(&permuted_edges)), tape.constant(xp), None);
        let (hv, hpv) = (h.value(), hp.value());
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..5 {
                prop_assert!((hv.get(i, j) - hpv.get(pi, j)).abs() < 1e-12);
            }
        }
        let pooled = mean_pool(h, n).value();
        let pooled_p = mean_pool(hp, n).value();
        prop_assert!(pooled.max_abs_diff(&pooled_p) < 1e-12);
    }

    #[test]
    fn frames_are_orthogonal_norm_preserving_and_idempotent(seed in any::<u64>(), d in 3usize..10, m in 1usize..4) {
        prop_assume!(m <= d);
        let mut r = rng(seed);
        let v = gaussian(&mut r, d, m);
        let tape = Tape::new();
        let (w, degenerate) = orthogonal_frame(tape.constant(v.clone()), LengthMode::TangentNorm).unwrap();
        prop_assert_eq!(degenerate, 0);
        let wv = w.value();
        for a in 0..m {
            let (va, wa) = (Mat::col_vector(&v.col(a)), Mat::col_vector(&wv.col(a)));
            prop_assert!((wa.frob() - va.frob()).abs() <= 1e-12 * va.frob());
            for b in a + 1..m {
                let wb = Mat::col_vector(&wv.col(b));
                prop_assert!(wa.dot(&wb).abs() <= 1e-8 * wa.frob() * wb.frob());
            }
        }
        let (again, _) = orthogonal_frame(w, LengthMode::TangentNorm).unwrap();
        prop_assert!(rel(&again.value(), &wv) < 1e-10);
        let g = local_metric(w).value();
        prop_assert!(min_eigenvalue(&g) > 0.0);
        let gram = wv.transpose().matmul(&wv).add(&Mat::eye(m).scale(JITTER));
        prop_assert!(rel(&g, &gram) < 1e-10);
    }

    #[test]
    fn sqrt_residual_is_small_up_to_cond_1e6(seed in any::<u64>(), m in 2usize..9, log_cond in 0.0f64..6.0) {
        let mut r = rng(seed);
        let g = random_spd(&mut r, m, 10f64.powf(log_cond));
        let tape = Tape::new();
        let (s, s_inv) = sqrt_default(tape.leaf(g.clone())).unwrap();
        let s = s.value();
        prop_assert!(rel(&s.matmul(&s), &g) < 1e-10);
        prop_assert!(rel(&s.matmul(&s_inv.value()), &Mat::eye(m)) < 1e-6);
    }

    #[test]
    fn transport_is_an_isometry(seed in any::<u64>(), m in 2usize..9, log_cond in 0.0f64..4.0) {
        let mut r = rng(seed);
        let cond = 10f64.powf(log_cond);
        let (gi, gj) = (random_spd(&mut r, m, cond), random_spd(&mut r, m, cond));
        let tape = Tape::new();
        let p = transport(tape.leaf(gi.clone()), tape.leaf(gj.clone())).unwrap().value();
        prop_assert!(rel(&p.transpose().matmul(&gj).matmul(&p), &gi) < 1e-6);
        prop_assert!(rel(&p, &transport_oracle(&gi, &gj)) < 1e-6);
    }

    #[test]
    fn holonomy_preserves_the_start_metric(seed in any::<u64>(), m in 2usize..6, len in 3usize..7) {
        let mut r = rng(seed);
        let mats: Vec<Mat> = (0..len).map(|_| random_spd(&mut r, m, 100.0)).collect();
        let tape = Tape::new();
        let vars: Vec<_> = mats.iter().map(|g| tape.constant(g.clone())).collect();
        let mut cache = GeometryCache::new(&vars);
        let cycle: Vec<usize> = (0..len).chain([0]).collect();
        let mut transports = HashMap::new();
        for w in cycle.windows(2) {
            transports.insert((w[0], w[1]), cache.transport(w[0], w[1]).unwrap());
        }
        let h = holonomy_map(&cycle, &transports).unwrap().value();
        prop_assert!(rel(&h.transpose().matmul(&mats[0]).matmul(&h), &mats[0]) < 1e-6);
    }

    #[test]
    fn diagonal_triangles_have_trivial_holonomy(seed in any::<u64>(), m in 1usize..8) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let vars: Vec<_> = (0..3)
            .map(|_| tape.constant(Mat::diag(&(0..m).map(|_| r.random_range(0.01..100.0)).collect::<Vec<_>>())))
            .collect();
        let mut cache = GeometryCache::new(&vars);
        let cycle = [0, 1, 2, 0];
        let mut transports = HashMap::new();
        for w in cycle.windows(2) {
            transports.insert((w[0], w[1]), cache.transport(w[0], w[1]).unwrap());
        }
        let h = holonomy_map(&cycle, &transports).unwrap().value();
        prop_assert!(h.sub(&Mat::eye(m)).frob() < 1e-10);
    }

    #[test]
    fn ema_keeps_log_metric_symmetric_and_contracts(seed in any::<u64>(), steps in 1usize..30, beta in 0.05f64..0.95) {
        let mut r = rng(seed);
        let mut p = RiemannianPrototype::new("d", 3, 3);
        let start = gaussian(&mut r, 1, 3).row(0).to_vec();
        p.ema_update(&start, &gaussian(&mut r, 3, 3), beta);
        prop_assert_eq!(&p.log_g, &p.log_g.transpose());
        let target = gaussian(&mut r, 1, 3).row(0).to_vec();
        let dist = |z: &[f64]| z.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&p.z);
        for t in 1..=steps {
            p.ema_update(&target, &gaussian(&mut r, 3, 3), beta);
            prop_assert_eq!(&p.log_g, &p.log_g.transpose());
            let expected = beta.powi(t as i32) * d0;
            prop_assert!((dist(&p.z) - expected).abs() <= 1e-9 * d0.max(1e-300));
        }
    }

    #[test]
    fn prototype_loss_is_non_negative(seed in any::<u64>(), b in 1usize..6, k in 1usize..5, temperature in 0.05f64..2.0) {
        let mut r = rng(seed);
        let names: Vec<String> = (0..k).map(|i| format!("d{i}")).collect();
        let protos: Prototypes = names
            .iter()
            .map(|n| (n.clone(), prototype(n, gaussian(&mut r, 1, 4).row(0).to_vec(), Mat::zeros(2, 2))))
            .collect();
        let domains: Vec<&str> = (0..b).map(|_| names[r.random_range(0..k)].as_str()).collect();
        let tape = Tape::new();
        let loss = proto_contrastive_loss(tape.leaf(gaussian(&mut r, b, 4)), &domains, &protos, temperature).unwrap();
        prop_assert!(loss.item() >= -1e-12);
        if k == 1 {
            prop_assert!(loss.item().abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_prompts_preserve_metric_volume(seed in any::<u64>(), d in 3usize..8, m in 1usize..4) {
        prop_assume!(m <= d);
        let mut r = rng(seed);
        let tape = Tape::new();
        let (w, _) = orthogonal_frame(tape.constant(gaussian(&mut r, d, m)), LengthMode::TangentNorm).unwrap();
        let z = tape.constant(gaussian(&mut r, 1, d));
        let q = tape.constant(random_orthogonal(&mut r, d));
        let (_, _, g_adapt) = prompt_adapt(z, w, q, LengthMode::TangentNorm).unwrap();
        let before = logdet_oracle(&local_metric(w).value());
        let after = logdet_oracle(&g_adapt.value());
        prop_assert!((before.exp() - after.exp()).abs() <= 1e-8 * before.exp());
    }

    #[test]
    fn gtm_components_are_non_negative(seed in any::<u64>(), k in 1usize..5, neighbours in 1usize..5, m in 1usize..5) {
        let mut r = rng(seed);
        let protos: Prototypes = (0..k)
            .map(|i| {
                let a = gaussian(&mut r, m, m).scale(0.5);
                let name = format!("d{i}");
                (name.clone(), prototype(&name, gaussian(&mut r, 1, 3).row(0).to_vec(), a.symmetrize()))
            })
            .collect();
        let table = ProtoTable::new(&protos).unwrap();
        let z = gaussian(&mut r, 1, 3).row(0).to_vec();
        let graph = TransferGraph::build(&z, &table, neighbours);
        let report = gtm(&graph, &random_spd(&mut r, m, 50.0), &table).unwrap();
        prop_assert!(report.delta_h >= 0.0 && report.delta_c >= 0.0);
        prop_assert_eq!(report.gtm, report.delta_h + report.delta_c);
    }

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 2usize..14, k in 1usize..5) {
        let mut r = rng(seed);
        // coarse grid values make distance ties common
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| r.random_range(0..4) as f64).collect()).collect();
        let sq = |a: usize, b: usize| -> f64 { points[a].iter().zip(&points[b]).map(|(x, y)| (x - y) * (x - y)).sum() };
        let rank = |i: usize, j: usize| (0..n).filter(|&l| l != i && l != j && (sq(i, l), l) < (sq(i, j), j)).count();
        let mut expected = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rank(a, b) < k || rank(b, a) < k {
                    expected.push((a, b));
                }
            }
        }
        let skeleton = knn_graph(&points, k);
        prop_assert_eq!(&skeleton.edges, &expected);
        for p in sample_triangle_paths(&skeleton, 16, seed) {
            prop_assert!(p.i < p.k);
            prop_assert!(skeleton.edges.contains(&(p.i.min(p.j), p.i.max(p.j))));
            prop_assert!(skeleton.edges.contains(&(p.j.min(p.k), p.j.max(p.k))));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), extremes in prop::collection::vec(any::<f64>(), 1..8)) {
        let datasets = small_suite(4, (4, 6), 3, seed);
        let cfg = PretrainConfig { manifold_dim: 2, k_perturb: 2, feature_dim: 4, hidden_dim: 5, embed_dim: 3, seed, ..PretrainConfig::default() };
        let mut state = init_state(&datasets, &cfg);
        // awkward floats (subnormals, NaN payloads, infinities) must survive byte-exactly
        for (slot, x) in state.adam.m[0].as_mut_slice().iter_mut().zip(&extremes) {
            *slot = *x;
        }
        let config = serde_json::to_value(&cfg).unwrap();
        let ck = Checkpoint { state, config_hash: config_hash(&cfg), config, seed };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let bits = |c: &Checkpoint| c.state.adam.m[0].as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(back.config_hash, ck.config_hash);
    }
}

#[test]
fn prototype_tables_are_name_ordered() {
    let protos: Prototypes = BTreeMap::from([
        (
            "b".to_string(),
            prototype("b", vec![0.0, 1.0], Mat::zeros(1, 1)),
        ),
        (
            "a".to_string(),
            prototype("a", vec![1.0, 0.0], Mat::zeros(1, 1)),
        ),
    ]);
    assert_eq!(ProtoTable::new(&protos).unwrap().names, ["a", "b"]);
}
