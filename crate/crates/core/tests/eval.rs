use gamreid::eval::{cmc, evaluate, mean_average_precision, nmi, rank_all, rank_gallery, ItemSet, Metrics, RankedQuery};
use gamreid::tensor::Tensor;
use gamreid::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set<'a>(e: &'a Tensor, ids: &'a [i64], cams: &'a [u32]) -> ItemSet<'a> {
    ItemSet { embeddings: e, identities: ids, cameras: cams }
}

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// AP straight from the definition over a full ranked relevance list.
fn brute_ap(relevant: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = (0..relevant.len()).filter(|&r| relevant[r]).collect();
    if positions.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &r in &positions {
        let hits = relevant[..=r].iter().filter(|&&x| x).count();
        total += hits as f64 / (r + 1) as f64;
    }
    Some(total / positions.len() as f64)
}

#[test]
fn exact_match_from_another_camera_ranks_first() {
    let g = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.2, 0.1, 0.9, -0.3]).unwrap();
    let r = rank_gallery(&[0.2, 0.1], 7, 0, &set(&g, &[3, 7, 4], &[1, 1, 0])).unwrap();
    assert_eq!(r.order[0], 1);
    assert_eq!(r.distances[0], 0.0);
    assert_eq!(r.first_hit(), Some(1));
}

#[test]
fn same_camera_match_is_excluded_and_query_skipped() {
    let g = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    let (ids, cams) = ([5, 6, 8], [2, 0, 1]);
    let q = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let ranked = rank_all(&set(&q, &[5], &[2]), &set(&g, &ids, &cams)).unwrap();
    assert!(ranked[0].is_none());
    let m = evaluate(&set(&q, &[5], &[2]), &set(&g, &ids, &cams)).unwrap();
    assert_eq!((m.num_queries, m.num_skipped), (0, 1));
    let r = rank_gallery(&[0.0], 5, 2, &set(&g, &ids, &cams)).unwrap();
    assert_eq!(r.order, vec![1, 2]);
}

#[test]
fn junk_items_never_ranked() {
    let g = Tensor::new(vec![4, 1], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
    let r = rank_gallery(&[0.0], 1, 0, &set(&g, &[-1, 1, -1, 2], &[1, 1, 1, 1])).unwrap();
    assert_eq!(r.order, vec![1, 3]);
}

#[test]
fn five_item_ordering_matches_sort_oracle() {
    let g = Tensor::new(vec![5, 2], vec![3.0, 0.0, -1.0, 1.0, 0.5, 0.5, 0.0, -2.0, 1.0, 1.0]).unwrap();
    let q = [0.4, 0.2];
    let ids = [1, 2, 3, 4, 5];
    let cams = [0, 0, 0, 0, 0];
    let r = rank_gallery(&q, 9, 1, &set(&g, &ids, &cams)).unwrap();
    let mut oracle: Vec<usize> = (0..5).collect();
    oracle.sort_by(|&a, &b| dist(&q, g.row(a)).partial_cmp(&dist(&q, g.row(b))).unwrap());
    assert_eq!(r.order, oracle);
    assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn equal_distances_break_ties_by_index() {
    let g = Tensor::new(vec![4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let r = rank_gallery(&[0.0], 0, 0, &set(&g, &[1, 2, 3, 4], &[1, 1, 1, 1])).unwrap();
    assert_eq!(r.order, vec![0, 1, 2, 3]);
}

fn ranked(relevant: &[bool]) -> Option<RankedQuery> {
    Some(RankedQuery {
        order: (0..relevant.len()).collect(),
        distances: (0..relevant.len()).map(|i| i as f64).collect(),
        relevant: relevant.to_vec(),
    })
}

#[test]
fn cmc_hand_counts() {
    assert_eq!(cmc(&[ranked(&[true, false])], &[1, 5]).unwrap(), vec![1.0, 1.0]);
    let two = [ranked(&[true]), ranked(&[false, false, true])];
    assert_eq!(cmc(&two, &[1, 5]).unwrap(), vec![0.5, 1.0]);
    let mut six = vec![false; 12];
    six[5] = true;
    assert_eq!(cmc(&[ranked(&six)], &[5, 10]).unwrap(), vec![0.0, 1.0]);
    assert!(matches!(cmc(&two, &[0]), Err(Error::Usage(_))));
}

#[test]
fn average_precision_by_hand() {
    assert_eq!(mean_average_precision(&[ranked(&[true, true, false, false])]), 1.0);
    let ap = mean_average_precision(&[ranked(&[true, false, true])]);
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((ap - 0.8333).abs() < 1e-4);
}

#[test]
fn random_gallery_ap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let g = random_rows(20, 4, &mut rng);
        let ids: Vec<i64> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let cams: Vec<u32> = (0..20).map(|_| rng.random_range(0..3)).collect();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (qid, qcam) = (rng.random_range(0..4), rng.random_range(0..3));
        let r = rank_gallery(&q, qid, qcam, &set(&g, &ids, &cams)).unwrap();
        // oracle: filter, sort, mark relevance independently
        let mut valid: Vec<usize> = (0..20).filter(|&i| !(ids[i] == qid && cams[i] == qcam)).collect();
        valid.sort_by(|&a, &b| dist(&q, g.row(a)).total_cmp(&dist(&q, g.row(b))).then(a.cmp(&b)));
        let relevant: Vec<bool> = valid.iter().map(|&i| ids[i] == qid).collect();
        assert_eq!(r.order, valid);
        match (r.average_precision(), brute_ap(&relevant)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            (a, b) => assert_eq!(a, b),
        }
    }
}

fn scenario(seed: u64) -> (Tensor, Vec<i64>, Vec<u32>, Tensor, Vec<i64>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nq, ng, d) = (12, 30, 5);
    let centers = random_rows(6, d, &mut rng);
    let noisy = |id: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centers.row(id).iter().map(|c| c + rng.random_range(-0.6..0.6)).collect()
    };
    let qid: Vec<i64> = (0..nq).map(|i| (i % 6) as i64).collect();
    let gid: Vec<i64> = (0..ng).map(|i| (i % 6) as i64).collect();
    let qcam: Vec<u32> = (0..nq).map(|i| (i % 2) as u32).collect();
    let gcam: Vec<u32> = (0..ng).map(|i| (i % 3) as u32).collect();
    let q: Vec<f64> = qid.iter().flat_map(|&i| noisy(i as usize, &mut rng)).collect();
    let g: Vec<f64> = gid.iter().flat_map(|&i| noisy(i as usize, &mut rng)).collect();
    (
        Tensor::new(vec![nq, d], q).unwrap(),
        qid,
        qcam,
        Tensor::new(vec![ng, d], g).unwrap(),
        gid,
        gcam,
    )
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn transform(t: &Tensor, rot: &[Vec<f64>], shift: &[f64]) -> Tensor {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[n, d], |k| {
        let (i, o) = (k / d, k % d);
        rot[o].iter().zip(t.row(i)).map(|(r, x)| r * x).sum::<f64>() + shift[o]
    })
}

fn close(a: &Metrics, b: &Metrics) -> bool {
    (a.rank1 - b.rank1).abs() < 1e-12
        && (a.rank5 - b.rank5).abs() < 1e-12
        && (a.rank10 - b.rank10).abs() < 1e-12
        && (a.map - b.map).abs() < 1e-12
        && a.num_queries == b.num_queries
}

#[test]
fn metrics_survive_a_global_isometry() {
    let (q, qid, qcam, g, gid, gcam) = scenario(2);
    let base = evaluate(&set(&q, &qid, &qcam), &set(&g, &gid, &gcam)).unwrap();
    assert!(base.map < 1.0, "scenario should not be trivially separable");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rot = random_rotation(5, &mut rng);
    let shift: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (q2, g2) = (transform(&q, &rot, &shift), transform(&g, &rot, &shift));
    let moved = evaluate(&set(&q2, &qid, &qcam), &set(&g2, &gid, &gcam)).unwrap();
    assert!(close(&base, &moved), "{base:?} vs {moved:?}");
}

#[test]
fn gallery_permutation_changes_nothing() {
    let (q, qid, qcam, g, gid, gcam) = scenario(3);
    let base = evaluate(&set(&q, &qid, &qcam), &set(&g, &gid, &gcam)).unwrap();
    let mut perm: Vec<usize> = (0..g.shape()[0]).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let d = g.shape()[1];
    let g2 = Tensor::from_fn(g.shape(), |k| g.row(perm[k / d])[k % d]);
    let gid2: Vec<i64> = perm.iter().map(|&i| gid[i]).collect();
    let gcam2: Vec<u32> = perm.iter().map(|&i| gcam[i]).collect();
    let shuffled = evaluate(&set(&q, &qid, &qcam), &set(&g2, &gid2, &gcam2)).unwrap();
    assert!(close(&base, &shuffled));
}

#[test]
fn far_irrelevant_item_changes_nothing() {
    let (q, qid, qcam, g, mut gid, mut gcam) = scenario(4);
    let base = evaluate(&set(&q, &qid, &qcam), &set(&g, &gid, &gcam)).unwrap();
    let (n, d) = (g.shape()[0], g.shape()[1]);
    let mut data = g.data().to_vec();
    data.extend(std::iter::repeat_n(1e6, d));
    let g2 = Tensor::new(vec![n + 1, d], data).unwrap();
    gid.push(99);
    gcam.push(0);
    let more = evaluate(&set(&q, &qid, &qcam), &set(&g2, &gid, &gcam)).unwrap();
    assert!(close(&base, &more));
}

#[test]
fn rank_k_is_monotone_and_reaches_one() {
    let (q, qid, qcam, g, gid, gcam) = scenario(5);
    let rankings = rank_all(&set(&q, &qid, &qcam), &set(&g, &gid, &gcam)).unwrap();
    let ks: Vec<usize> = (1..=31).collect();
    let acc = cmc(&rankings, &ks).unwrap();
    assert!(acc.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*acc.last().unwrap(), 1.0);
}

#[test]
fn mismatched_widths_are_shape_errors() {
    let g = Tensor::zeros(&[2, 3]);
    assert!(matches!(rank_gallery(&[0.0, 0.0], 1, 0, &set(&g, &[1, 2], &[0, 1])), Err(Error::Shape(_))));
    assert!(matches!(rank_gallery(&[0.0, 0.0, 0.0], 1, 0, &set(&g, &[1], &[0, 1])), Err(Error::Shape(_))));
}

#[test]
fn key_value_report() {
    let (q, qid, qcam, g, gid, gcam) = scenario(6);
    let m = evaluate(&set(&q, &qid, &qcam), &set(&g, &gid, &gcam)).unwrap();
    let kv = m.to_key_values();
    for key in ["rank1=", "rank5=", "rank10=", "mAP=", "num_queries=", "num_skipped="] {
        assert!(kv.lines().any(|l| l.starts_with(key)), "{key}");
    }
    assert_eq!(Metrics::from_key_values(&kv).unwrap(), m);
    let dir = tempfile::tempdir().unwrap();
    m.write(dir.path()).unwrap();
    assert!(std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap().contains("rank-1"));
}

#[test]
fn nmi_against_hand_values() {
    assert!((nmi(&[1, 1, 2, 2], &["a", "a", "b", "b"]).unwrap() - 1.0).abs() < 1e-12);
    assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    // a = [0,0,0,1], b = [0,0,1,1]: H(a)=h(1/4), H(b)=ln 2, I = H(b) - H(b|a)
    let (a, b) = ([0, 0, 0, 1], [0, 0, 1, 1]);
    let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    let hb_given_a = 0.75 * h(2.0 / 3.0);
    let mi = 2f64.ln() - hb_given_a;
    let want = 2.0 * mi / (h(0.25) + 2f64.ln());
    assert!((nmi(&a, &b).unwrap() - want).abs() < 1e-12);
    assert!(nmi::<i32, i32>(&[], &[]).is_err());
}
