use gamreid::acl::{
    acl_loss, auto_lambda, balanced_distance, cluster_floor, merges_per_stage, p_cluster, pairwise_d0, MemoryBank,
};
use gamreid::idl::Reduction;
use gamreid::tensor::{grad_check, Tape, Tensor};
use gamreid::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
    for i in 0..n {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn eye(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |k| if k / d == k % d { 1.0 } else { 0.0 })
}

fn loss_value(emb: &Tensor, assign: &[usize], bank: &MemoryBank, tau: f64, r: Reduction) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let l = acl_loss(&mut tape, e, assign, bank, tau, r).unwrap();
    tape.value(l).item()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn on_circle(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

#[test]
fn cluster_probabilities_by_hand() {
    let one = MemoryBank::singletons(&eye(1, 3)).unwrap();
    assert_eq!(p_cluster(&[0.0, 1.0, 0.0], &one, 0.1).unwrap(), vec![1.0]);

    let two = MemoryBank::singletons(&eye(2, 3)).unwrap();
    let p = p_cluster(&[1.0, 0.0, 0.0], &two, 0.1).unwrap();
    assert!((p[0] - 0.9999546).abs() < 1e-7 && (p[1] - 4.54e-5).abs() < 1e-7);
    assert!((p[1] - 1.0 / (1.0 + 10f64.exp())).abs() < 1e-15);

    let same = MemoryBank::singletons(&Tensor::from_fn(&[4, 2], |k| [0.6, 0.8][k % 2])).unwrap();
    let p = p_cluster(&[1.0, 0.0], &same, 0.05).unwrap();
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    assert!(matches!(p_cluster(&[1.0, 0.0], &same, 0.0), Err(Error::Config(_))));
}

#[test]
fn cluster_argmax_ignores_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bank = MemoryBank::singletons(&unit_rows(7, 5, &mut rng)).unwrap();
    let argmax = |p: Vec<f64>| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    for _ in 0..20 {
        let f = unit_rows(1, 5, &mut rng);
        let reference = argmax(p_cluster(f.row(0), &bank, 1.0).unwrap());
        for tau in [0.05, 0.1, 0.5, 3.0] {
            let p = p_cluster(f.row(0), &bank, tau).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(argmax(p), reference);
        }
    }
}

#[test]
fn loss_by_hand() {
    let one = MemoryBank::singletons(&eye(1, 2)).unwrap();
    assert_eq!(loss_value(&eye(1, 2), &[0], &one, 0.1, Reduction::Mean), 0.0);

    let two = MemoryBank::singletons(&eye(2, 2)).unwrap();
    let sum = loss_value(&eye(2, 2), &[0, 1], &two, 0.1, Reduction::Sum);
    let want = 2.0 * (1.0 + (-10f64).exp()).ln();
    assert!((sum - want).abs() < 1e-15);
    assert!((sum - 9.08e-5).abs() < 1e-7);
    let mean = loss_value(&eye(2, 2), &[0, 1], &two, 0.1, Reduction::Mean);
    assert!((mean - want / 2.0).abs() < 1e-15);
}

#[test]
fn stale_assignment_is_an_integrity_error() {
    let two = MemoryBank::singletons(&eye(2, 2)).unwrap();
    let mut tape = Tape::new();
    let e = tape.constant(eye(1, 2));
    assert!(matches!(acl_loss(&mut tape, e, &[2], &two, 0.1, Reduction::Sum), Err(Error::Integrity(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tau = 0.1;
    let mut bank = MemoryBank::singletons(&unit_rows(8, 6, &mut rng)).unwrap();
    bank.merge_step(3, 0.0).unwrap();
    let emb = Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0));
    let emb = Tensor::from_fn(&[4, 6], |k| {
        let r = k / 6;
        let n = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        emb.data()[k] / n * 3.0 * tau
    });
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let err = grad_check(|tape, v| acl_loss(tape, v, &[0, 3, 1, 3], &bank, tau, reduction), &emb, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn moving_toward_own_centroid_lowers_loss() {
    // Other centroids orthogonal to the motion plane keep their logits fixed.
    let centroids = Tensor::new(vec![3, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap();
    let bank = MemoryBank::from_parts(centroids, vec![1, 1, 1], vec![0, 1, 2]).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..=30 {
        let angle = 3.0 * (1.0 - step as f64 / 30.0);
        let e = Tensor::new(vec![1, 4], vec![angle.cos(), angle.sin(), 0.0, 0.0]).unwrap();
        let l = loss_value(&e, &[0], &bank, 0.1, Reduction::Sum);
        assert!(l < last);
        last = l;
    }
}

#[test]
fn euclidean_distance() {
    assert_eq!(pairwise_d0(&[0.3, -0.2, 0.9], &[0.3, -0.2, 0.9]), 0.0);
    assert!((pairwise_d0(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..17).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..17).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut s = 0.0;
    for k in 0..17 {
        s += (a[k] - b[k]).powi(2);
    }
    assert!((pairwise_d0(&a, &b) - s.sqrt()).abs() < 1e-12);
}

#[test]
fn balanced_distance_arithmetic() {
    assert_eq!(balanced_distance(0.7, 4, 9, 0.0), 0.7);
    assert!((balanced_distance(0.7, 1, 1, 0.1) - 0.9).abs() < 1e-15);
    assert!((balanced_distance(1.0, 3, 5, 0.1) - 1.8).abs() < 1e-15);
    for s in 2..40 {
        assert!(balanced_distance(0.5, s, 1, 0.01) > balanced_distance(0.5, s - 1, 1, 0.01));
    }
}

#[test]
fn closest_pair_merges_first() {
    // mutual distances 0.1, 1.0, 1.0 on the unit sphere
    let sa = 0.05f64;
    let ca = (1.0 - sa * sa).sqrt();
    let cb = 0.5 / ca;
    let x = Tensor::new(vec![3, 3], vec![sa, 0.0, ca, -sa, 0.0, ca, 0.0, (1.0 - cb * cb).sqrt(), cb]).unwrap();
    let d01 = pairwise_d0(x.row(0), x.row(1));
    let d02 = pairwise_d0(x.row(0), x.row(2));
    let d12 = pairwise_d0(x.row(1), x.row(2));
    assert!((d01 - 0.1).abs() < 1e-12);
    assert!((d02 - 1.0).abs() < 1e-9 && (d12 - 1.0).abs() < 1e-9, "{d02} {d12}");
    for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
        let rows: Vec<f64> = order.iter().flat_map(|&i| x.row(i).to_vec()).collect();
        let mut bank = MemoryBank::singletons(&Tensor::new(vec![3, 3], rows).unwrap()).unwrap();
        let pos = |v: usize| order.iter().position(|&o| o == v).unwrap();
        let (a, b) = (pos(0).min(pos(1)), pos(0).max(pos(1)));
        assert_eq!(bank.merge_step(1, 0.0).unwrap(), vec![(a, b)]);
        assert_eq!(bank.num_clusters(), 2);
    }
}

#[test]
fn identical_points_merge_lowest_pair() {
    let x = Tensor::from_fn(&[5, 3], |k| [0.0, 0.6, 0.8][k % 3]);
    let mut bank = MemoryBank::singletons(&x).unwrap();
    assert_eq!(bank.merge_step(1, 0.0).unwrap(), vec![(0, 1)]);
    assert_eq!(bank.assignment(), &[0, 0, 1, 2, 3]);
    assert_eq!(bank.sizes(), &[2, 1, 1, 1]);
}

#[test]
fn balancing_weight_flips_the_choice() {
    // A (size 2), B, C on the unit circle: d(A,B) = 0.500, d(B,C) = 0.503.
    let ab = 2.0 * (0.25f64).asin();
    let bc = 2.0 * (0.2515f64).asin();
    let (a, b, c) = (on_circle(0.0), on_circle(ab), on_circle(ab + bc));
    let centroids = Tensor::new(vec![3, 2], [a, b, c].concat()).unwrap();
    let bank = MemoryBank::from_parts(centroids, vec![2, 1, 1], vec![0, 0, 1, 2]).unwrap();

    let brute = |lambda: f64| -> (usize, usize) {
        let mut best = (f64::INFINITY, (0, 0));
        for i in 0..3 {
            for j in i + 1..3 {
                let d = pairwise_d0(bank.centroids().row(i), bank.centroids().row(j));
                let cost = d + lambda * (bank.sizes()[i] + bank.sizes()[j]) as f64;
                if cost < best.0 {
                    best = (cost, (i, j));
                }
            }
        }
        best.1
    };
    assert_eq!(brute(0.0), (0, 1));
    assert_eq!(brute(0.005), (1, 2));
    for lambda in [0.0, 0.005] {
        let mut m = bank.clone();
        assert_eq!(m.merge_step(1, lambda).unwrap(), vec![brute(lambda)]);
    }
    let mut m = bank.clone();
    m.merge_step(1, 0.005).unwrap();
    assert_eq!(m.assignment(), &[0, 0, 1, 1]);
    assert_eq!(m.sizes(), &[2, 2]);
}

#[test]
fn too_many_merges_is_a_usage_error() {
    let mut bank = MemoryBank::singletons(&eye(3, 3)).unwrap();
    assert!(matches!(bank.merge_step(3, 0.0), Err(Error::Usage(_))));
    assert!(matches!(bank.merge_step(1, -1.0), Err(Error::Config(_))));
    assert_eq!(bank.num_clusters(), 3);
}

/// Textbook greedy centroid linkage, recomputing every distance from scratch.
fn oracle_merges(x: &Tensor, k: usize) -> (Vec<(usize, usize)>, Vec<Vec<usize>>) {
    let n = x.shape()[0];
    let mut clusters: Vec<(Vec<usize>, Vec<f64>)> = (0..n).map(|i| (vec![i], unit(x.row(i)))).collect();
    let mut pairs = Vec::new();
    for _ in 0..k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = clusters[i].1.iter().zip(&clusters[j].1).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (_, i, j) = best;
        let (mj, cj) = clusters.remove(j);
        let (mi, ci) = &mut clusters[i];
        let (si, sj) = (mi.len() as f64, mj.len() as f64);
        let mean: Vec<f64> = ci.iter().zip(&cj).map(|(p, q)| (si * p + sj * q) / (si + sj)).collect();
        *ci = unit(&mean);
        mi.extend(mj);
        pairs.push((i, j));
    }
    (pairs, clusters.into_iter().map(|(m, _)| m).collect())
}

#[test]
fn greedy_merge_matches_cubic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, k) in [(12, 11), (40, 25), (64, 63)] {
        let x = unit_rows(n, 6, &mut rng);
        let (want_pairs, members) = oracle_merges(&x, k);
        let mut bank = MemoryBank::singletons(&x).unwrap();
        assert_eq!(bank.merge_step(k, 0.0).unwrap(), want_pairs);
        for (c, m) in members.iter().enumerate() {
            for &i in m {
                assert_eq!(bank.assignment()[i], c);
            }
        }
        // one merge at a time gives the same sequence
        let mut step = MemoryBank::singletons(&x).unwrap();
        let one_by_one: Vec<(usize, usize)> = (0..k).flat_map(|_| step.merge_step(1, 0.0).unwrap()).collect();
        assert_eq!(one_by_one, want_pairs);
        assert_eq!(step.assignment(), bank.assignment());
    }
}

#[test]
fn centroid_update_matches_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let assignment = vec![0, 2, 1, 0, 2, 2, 1, 0];
    let bank0 = MemoryBank::from_parts(unit_rows(3, 5, &mut rng), vec![3, 2, 3], assignment.clone()).unwrap();
    let emb = unit_rows(8, 5, &mut rng);
    let mut bank = bank0.clone();
    bank.update(&emb).unwrap();
    assert_eq!(bank.sizes(), bank0.sizes());
    assert_eq!(bank.assignment(), bank0.assignment());
    for c in 0..3 {
        let mut mean = vec![0.0; 5];
        let members: Vec<usize> = (0..8).filter(|&i| assignment[i] == c).collect();
        for &i in &members {
            for k in 0..5 {
                mean[k] += emb.row(i)[k] / members.len() as f64;
            }
        }
        let want = unit(&mean);
        for k in 0..5 {
            assert!((bank.centroids().row(c)[k] - want[k]).abs() < 1e-12);
        }
    }

    let mut singles = MemoryBank::singletons(&eye(3, 3)).unwrap();
    let raw = Tensor::new(vec![3, 3], vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, -3.0]).unwrap();
    singles.update(&raw).unwrap();
    for i in 0..3 {
        assert_eq!(singles.centroids().row(i), unit(raw.row(i)).as_slice());
    }

    let twin = Tensor::from_fn(&[2, 2], |k| [0.6, 0.8][k % 2]);
    let mut pair = MemoryBank::from_parts(eye(1, 2), vec![2], vec![0, 0]).unwrap();
    pair.update(&twin).unwrap();
    assert!((pair.centroids().row(0)[0] - 0.6).abs() < 1e-15);
}

#[test]
fn schedule_helpers() {
    assert_eq!(merges_per_stage(0.04, 256), 11);
    assert_eq!(merges_per_stage(0.04, 100), 4);
    assert_eq!(cluster_floor(256), 26);
    assert_eq!(cluster_floor(3), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = unit_rows(20, 4, &mut rng);
    let mut total = 0.0;
    for i in 0..20 {
        for j in i + 1..20 {
            total += pairwise_d0(x.row(i), x.row(j));
        }
    }
    let avg = total / 190.0;
    assert!((auto_lambda(&x) * 20.0 - 0.1 * avg).abs() < 1e-12);
}

#[test]
fn assignment_text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bank = MemoryBank::singletons(&unit_rows(9, 3, &mut rng)).unwrap();
    bank.merge_step(4, 0.01).unwrap();
    let text = bank.assignment_text();
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    assert_eq!(MemoryBank::parse_assignment(&text).unwrap(), bank.assignment());
    assert!(MemoryBank::parse_assignment("0\t1\n2\t0\n").is_err());
}

proptest! {
    #[test]
    fn merge_keeps_bank_consistent(seed in 0u64..10_000, n in 2usize..30, frac in 0.0f64..1.0, lambda in 0.0f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = unit_rows(n, 4, &mut rng);
        let mut bank = MemoryBank::singletons(&x).unwrap();
        let k = ((n - 1) as f64 * frac) as usize;
        bank.merge_step(k, lambda).unwrap();
        prop_assert_eq!(bank.num_clusters(), n - k);
        prop_assert_eq!(bank.sizes().iter().sum::<usize>(), n);
        prop_assert!(bank.check().is_ok());
        for c in 0..bank.num_clusters() {
            let norm = bank.centroids().row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
