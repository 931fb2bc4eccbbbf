//! Cross-camera retrieval evaluation (CMC and mAP) and clustering NMI.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::acl::pairwise_d0;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Embedding rows with identity and camera labels. Identity `-1` is junk.
#[derive(Clone, Copy, Debug)]
pub struct ItemSet<'a> {
    pub embeddings: &'a Tensor,
    pub identities: &'a [i64],
    pub cameras: &'a [u32],
}

impl ItemSet<'_> {
    fn check(&self) -> Result<()> {
        let n = self.identities.len();
        if self.embeddings.rank() != 2 || self.embeddings.shape()[0] != n || self.cameras.len() != n {
            return Err(Error::shape(format!(
                "{n} identities, {} cameras, embeddings {:?}",
                self.cameras.len(),
                self.embeddings.shape()
            )));
        }
        Ok(())
    }
}

/// Ranked valid gallery for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    /// Gallery indices, ascending distance, ties by index.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    /// Whether `order[r]` shares the query identity.
    pub relevant: Vec<bool>,
}

impl RankedQuery {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first correct match.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    /// Mean over relevant positions `r` of `hits_in_top_r / r`.
    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut total = 0.0;
        for (r, &rel) in self.relevant.iter().enumerate() {
            if rel {
                hits += 1;
                total += hits as f64 / (r + 1) as f64;
            }
        }
        (hits > 0).then(|| total / hits as f64)
    }
}

/// Rank the gallery for one query, dropping junk items and items that share
/// both identity and camera with the query.
pub fn rank_gallery(query: &[f64], identity: i64, camera: u32, gallery: &ItemSet) -> Result<RankedQuery> {
    gallery.check()?;
    if gallery.embeddings.shape()[1] != query.len() {
        return Err(Error::shape("query and gallery embedding widths differ"));
    }
    let mut items: Vec<(f64, usize)> = (0..gallery.identities.len())
        .filter(|&g| {
            let gid = gallery.identities[g];
            gid != -1 && !(gid == identity && gallery.cameras[g] == camera)
        })
        .map(|g| (pairwise_d0(query, gallery.embeddings.row(g)), g))
        .collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedQuery {
        relevant: items.iter().map(|&(_, g)| identity != -1 && gallery.identities[g] == identity).collect(),
        order: items.iter().map(|&(_, g)| g).collect(),
        distances: items.into_iter().map(|(d, _)| d).collect(),
    })
}

/// Rankings for every query; queries without a relevant valid match are `None`.
pub fn rank_all(queries: &ItemSet, gallery: &ItemSet) -> Result<Vec<Option<RankedQuery>>> {
    queries.check()?;
    (0..queries.identities.len())
        .map(|q| {
            let r = rank_gallery(queries.embeddings.row(q), queries.identities[q], queries.cameras[q], gallery)?;
            Ok((r.num_relevant() > 0).then_some(r))
        })
        .collect()
}

/// Fraction of counted queries whose first correct match is within `k`.
pub fn cmc(rankings: &[Option<RankedQuery>], ks: &[usize]) -> Result<Vec<f64>> {
    if let Some(&k) = ks.iter().find(|&&k| k < 1) {
        return Err(Error::usage(format!("rank cutoff must be >= 1, got {k}")));
    }
    let firsts: Vec<usize> = rankings.iter().flatten().filter_map(RankedQuery::first_hit).collect();
    if firsts.is_empty() {
        return Ok(vec![0.0; ks.len()]);
    }
    Ok(ks
        .iter()
        .map(|&k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64)
        .collect())
}

pub fn mean_average_precision(rankings: &[Option<RankedQuery>]) -> f64 {
    let aps: Vec<f64> = rankings.iter().flatten().filter_map(RankedQuery::average_precision).collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub num_queries: usize,
    pub num_skipped: usize,
}

pub fn evaluate(queries: &ItemSet, gallery: &ItemSet) -> Result<Metrics> {
    let rankings = rank_all(queries, gallery)?;
    let ranks = cmc(&rankings, &[1, 5, 10])?;
    let skipped = rankings.iter().filter(|r| r.is_none()).count();
    Ok(Metrics {
        rank1: ranks[0],
        rank5: ranks[1],
        rank10: ranks[2],
        map: mean_average_precision(&rankings),
        num_queries: rankings.len() - skipped,
        num_skipped: skipped,
    })
}

impl Metrics {
    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rank-1  {:.6}", self.rank1);
        let _ = writeln!(s, "rank-5  {:.6}", self.rank5);
        let _ = writeln!(s, "rank-10 {:.6}", self.rank10);
        let _ = writeln!(s, "mAP     {:.6}", self.map);
        let _ = writeln!(s, "queries {} (skipped {})", self.num_queries, self.num_skipped);
        s
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "rank1={:.17e}\nrank5={:.17e}\nrank10={:.17e}\nmAP={:.17e}\nnum_queries={}\nnum_skipped={}\n",
            self.rank1, self.rank5, self.rank10, self.map, self.num_queries, self.num_skipped
        )
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse(format!("metrics line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Parse(format!("metrics lack {k}")));
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad {k}"))) };
        Ok(Metrics {
            rank1: float("rank1")?,
            rank5: float("rank5")?,
            rank10: float("rank10")?,
            map: float("mAP")?,
            num_queries: int("num_queries")?,
            num_skipped: int("num_skipped")?,
        })
    }

    /// Writes `metrics.txt` and `metrics.kv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("metrics.txt"), self.to_text())?;
        std::fs::write(dir.join("metrics.kv"), self.to_key_values())?;
        Ok(())
    }
}

/// Normalised mutual information `2 I(A;B) / (H(A) + H(B))`. Two constant
/// labelings count as identical (1.0).
pub fn nmi<A: Eq + std::hash::Hash + Copy, B: Eq + std::hash::Hash + Copy>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("nmi needs two equally long, non-empty labelings"));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<A, f64> = HashMap::new();
    let mut cb: HashMap<B, f64> = HashMap::new();
    let mut joint: HashMap<(A, B), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *joint.entry((x, y)).or_default() += 1.0;
    }
    let entropy = |counts: Vec<f64>| -> f64 {
        let mut v = counts;
        v.sort_by(f64::total_cmp);
        -v.iter().map(|c| (c / n) * (c / n).ln()).sum::<f64>()
    };
    let (ha, hb) = (entropy(ca.values().cloned().collect()), entropy(cb.values().cloned().collect()));
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|((x, y), &c)| (c / n) * ((c * n) / (ca[x] * cb[y])).ln())
        .collect();
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}
