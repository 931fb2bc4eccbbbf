//! Agglomerative clustering over a centroid memory bank: cluster
//! probabilities, the clustering loss, balanced merge distances and the
//! greedy bottom-up merge.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::idl::{row_softmax, Reduction};
use crate::tensor::{normalize_in_place, Tape, Tensor, Var};

/// Cluster centroids, their sizes and the instance-to-cluster assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    centroids: Tensor,
    sizes: Vec<usize>,
    assignment: Vec<usize>,
}

impl MemoryBank {
    /// One singleton cluster per instance row of `features`.
    pub fn singletons(features: &Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(format!("features must be [n,D], got {:?}", features.shape())));
        }
        let n = features.shape()[0];
        let mut centroids = features.clone();
        for i in 0..n {
            normalize_in_place(centroids.row_mut(i));
        }
        Ok(MemoryBank { centroids, sizes: vec![1; n], assignment: (0..n).collect() })
    }

    /// Assemble a bank from explicit parts; invariants are checked and
    /// centroid rows normalised.
    pub fn from_parts(centroids: Tensor, sizes: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        let mut centroids = centroids;
        if centroids.rank() != 2 || centroids.shape()[0] != sizes.len() {
            return Err(Error::integrity("centroid rows must match the cluster count"));
        }
        for c in 0..sizes.len() {
            normalize_in_place(centroids.row_mut(c));
        }
        let bank = MemoryBank { centroids, sizes, assignment };
        bank.check()?;
        Ok(bank)
    }

    /// Like [`MemoryBank::from_parts`] but keeps saved centroids bit-for-bit.
    pub fn restore(centroids: Tensor, sizes: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        if centroids.rank() != 2 || centroids.shape()[0] != sizes.len() {
            return Err(Error::integrity("centroid rows must match the cluster count"));
        }
        crate::idl::check_unit_rows(&centroids, "centroid")?;
        let bank = MemoryBank { centroids, sizes, assignment };
        bank.check()?;
        Ok(bank)
    }

    /// Verify sizes against the assignment and that no cluster is empty.
    pub fn check(&self) -> Result<()> {
        let m = self.sizes.len();
        let mut counts = vec![0usize; m];
        for (i, &c) in self.assignment.iter().enumerate() {
            if c >= m {
                return Err(Error::integrity(format!("instance {i} assigned to cluster {c} of {m}")));
            }
            counts[c] += 1;
        }
        if counts != self.sizes {
            return Err(Error::integrity("cluster sizes disagree with the assignment"));
        }
        if counts.contains(&0) {
            return Err(Error::integrity("empty cluster"));
        }
        Ok(())
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.assignment.len()
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Recompute every centroid as the normalised mean of its members.
    pub fn update(&mut self, embeddings: &Tensor) -> Result<()> {
        let n = self.num_instances();
        let d = self.centroids.shape()[1];
        if embeddings.shape() != [n, d] {
            return Err(Error::shape(format!("expected [{n}, {d}] embeddings, got {:?}", embeddings.shape())));
        }
        let mut sums = Tensor::zeros(self.centroids.shape());
        for (i, &c) in self.assignment.iter().enumerate() {
            for (s, x) in sums.row_mut(c).iter_mut().zip(embeddings.row(i)) {
                *s += x;
            }
        }
        for (c, &size) in self.sizes.iter().enumerate() {
            let row = sums.row_mut(c);
            for s in row.iter_mut() {
                *s /= size as f64;
            }
            normalize_in_place(row);
        }
        self.centroids = sums;
        Ok(())
    }

    /// Perform `merges` sequential greedy pair merges, each joining the pair
    /// with the smallest balanced distance (ties: smallest `(i, j)`). The
    /// surviving cluster keeps the lower index; higher indices shift down.
    /// Returns the merged index pairs in order.
    pub fn merge_step(&mut self, merges: usize, lambda: f64) -> Result<Vec<(usize, usize)>> {
        if merges >= self.num_clusters() {
            return Err(Error::usage(format!(
                "cannot perform {merges} merges on {} clusters",
                self.num_clusters()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be a finite value >= 0, got {lambda}")));
        }
        let d = self.centroids.shape()[1];
        let mut rows: Vec<Vec<f64>> = (0..self.num_clusters()).map(|c| self.centroids.row(c).to_vec()).collect();
        let mut dist: Vec<Vec<f64>> = (0..rows.len())
            .map(|i| (0..rows.len()).map(|j| if j > i { pairwise_d0(&rows[i], &rows[j]) } else { 0.0 }).collect())
            .collect();
        let mut pairs = Vec::with_capacity(merges);
        for _ in 0..merges {
            let m = rows.len();
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..m {
                for j in i + 1..m {
                    let cost = balanced_distance(dist[i][j], self.sizes[i], self.sizes[j], lambda);
                    if cost < best.0 {
                        best = (cost, i, j);
                    }
                }
            }
            let (_, a, b) = best;
            let (sa, sb) = (self.sizes[a] as f64, self.sizes[b] as f64);
            let mut merged: Vec<f64> =
                rows[a].iter().zip(&rows[b]).map(|(x, y)| (sa * x + sb * y) / (sa + sb)).collect();
            normalize_in_place(&mut merged);
            rows[a] = merged;
            rows.remove(b);
            self.sizes[a] += self.sizes[b];
            self.sizes.remove(b);
            for c in self.assignment.iter_mut() {
                if *c == b {
                    *c = a;
                } else if *c > b {
                    *c -= 1;
                }
            }
            dist.remove(b);
            for row in dist.iter_mut() {
                row.remove(b);
            }
            for j in 0..rows.len() {
                if j < a {
                    dist[j][a] = pairwise_d0(&rows[j], &rows[a]);
                } else if j > a {
                    dist[a][j] = pairwise_d0(&rows[a], &rows[j]);
                }
            }
            pairs.push((a, b));
        }
        let m = rows.len();
        self.centroids = Tensor::new(vec![m, d], rows.concat())?;
        Ok(pairs)
    }

    /// `instance_index<TAB>cluster_id` lines.
    pub fn assignment_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.assignment.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{c}");
        }
        s
    }

    /// Parse [`MemoryBank::assignment_text`] output back into an assignment.
    pub fn parse_assignment(text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Parse(format!("assignment line {}: {line:?}", lineno + 1));
            let (i, c) = line.split_once('\t').ok_or_else(bad)?;
            let i: usize = i.parse().map_err(|_| bad())?;
            if i != out.len() {
                return Err(bad());
            }
            out.push(c.parse().map_err(|_| bad())?);
        }
        Ok(out)
    }
}

/// Euclidean distance.
pub fn pairwise_d0(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `d0 + lambda * (size_i + size_j)`.
pub fn balanced_distance(d0: f64, size_i: usize, size_j: usize, lambda: f64) -> f64 {
    d0 + lambda * (size_i + size_j) as f64
}

/// Default balancing weight: `lambda * n` equals a tenth of the average
/// pairwise distance between the given unit rows.
pub fn auto_lambda(features: &Tensor) -> f64 {
    let n = features.shape()[0];
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += pairwise_d0(features.row(i), features.row(j));
        }
    }
    let avg = total / (n * (n - 1) / 2) as f64;
    0.1 * avg / n as f64
}

/// Number of pair merges per stage: `ceil(fraction * n)`.
pub fn merges_per_stage(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).ceil() as usize
}

/// Smallest cluster count the schedule merges down to: `ceil(0.1 n)`.
pub fn cluster_floor(n: usize) -> usize {
    ((n as f64) * 0.1).ceil().max(1.0) as usize
}

/// Cluster-membership probabilities `softmax(M f / tau)`.
pub fn p_cluster(f: &[f64], bank: &MemoryBank, tau: f64) -> Result<Vec<f64>> {
    row_softmax(&bank.centroids, f, tau)
}

/// `-sum_b log P(assignments[b] | embeddings[b])` against constant centroids.
pub fn acl_loss(
    tape: &mut Tape,
    embeddings: Var,
    assignments: &[usize],
    bank: &MemoryBank,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let b = assignments.len();
    if b == 0 {
        return Err(Error::usage("empty batch"));
    }
    let m = bank.num_clusters();
    if let Some(&bad) = assignments.iter().find(|&&c| c >= m) {
        return Err(Error::integrity(format!("stale cluster index {bad} for a bank of {m} clusters")));
    }
    let d = bank.centroids.shape()[1];
    if tape.value(embeddings).shape() != [b, d] {
        return Err(Error::shape(format!(
            "embeddings {:?}, expected [{b}, {d}]",
            tape.value(embeddings).shape()
        )));
    }
    let centroids = tape.constant(bank.centroids.clone());
    let logits = tape.matmul_nt(embeddings, centroids)?;
    let logp = tape.log_softmax_rows(logits, tau)?;
    let picks: Vec<(usize, usize)> = assignments.iter().cloned().enumerate().collect();
    let picked = tape.gather(logp, &picks)?;
    let total = tape.sum(picked);
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / b as f64,
    };
    Ok(tape.affine(total, scale, 0.0))
}
