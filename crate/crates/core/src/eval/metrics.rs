use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::substrate::Tensor;

/// Ranks reported by default.
pub const MAX_RANK: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// `1 - <q, g>` on L2-normalized rows.
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            other => Err(Error::Parse(format!("unknown distance '{other}'"))),
        }
    }
}

/// Identity and camera of one query or gallery row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowMeta {
    pub identity: usize,
    pub camera: usize,
}

/// Gallery items never counted for a query: same identity and same camera,
/// and same identity seen from any listed `(query camera, gallery camera)`
/// pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub extra_camera_pairs: Vec<(usize, usize)>,
}

impl ExclusionRule {
    pub fn excludes(&self, q: RowMeta, g: RowMeta) -> bool {
        q.identity == g.identity && (q.camera == g.camera || self.extra_camera_pairs.contains(&(q.camera, g.camera)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    /// `cmc[r - 1]` = fraction of evaluated queries with a match in the top `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub num_queries_evaluated: usize,
    /// Queries without any valid relevant gallery item.
    pub num_queries_skipped: usize,
}

impl RankingResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r.min(self.cmc.len()) - 1]
    }

    /// Arithmetic mean of CMC and mAP over repetitions or trials; per-query
    /// APs and counts are concatenated / summed.
    pub fn mean(results: &[RankingResult]) -> Result<RankingResult> {
        let first = results.first().ok_or(Error::EmptyProtocol)?;
        let n = results.len() as f64;
        let mut cmc = vec![0.0; first.cmc.len()];
        for r in results {
            for (acc, v) in cmc.iter_mut().zip(&r.cmc) {
                *acc += v / n;
            }
        }
        Ok(RankingResult {
            cmc,
            map: results.iter().map(|r| r.map).sum::<f64>() / n,
            per_query_ap: results.iter().flat_map(|r| r.per_query_ap.iter().copied()).collect(),
            num_queries_evaluated: results.iter().map(|r| r.num_queries_evaluated).sum(),
            num_queries_skipped: results.iter().map(|r| r.num_queries_skipped).sum(),
        })
    }
}

/// Scales each row to unit L2 norm (zero rows stay zero).
pub fn l2_normalize_rows(m: &mut Tensor<f32>) {
    let d = m.dim(1);
    for row in m.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
}

/// `[queries, gallery]` distances. Every entry is one sequential `f64`
/// reduction over the feature dimension, so results do not depend on how
/// the work is split.
pub fn distance_matrix(q: &Tensor<f32>, g: &Tensor<f32>, metric: DistanceMetric) -> Result<Tensor<f64>> {
    let (nq, dq) = q.dims2()?;
    let (ng, dg) = g.dims2()?;
    ensure_shape!(dq == dg, "query features have {dq} dims, gallery {dg}");
    let mut out = Tensor::zeros(vec![nq, ng]);
    for i in 0..nq {
        let a = q.row(i);
        for j in 0..ng {
            let b = g.row(j);
            out.data_mut()[i * ng + j] = match metric {
                DistanceMetric::Cosine => 1.0 - a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>(),
                DistanceMetric::Euclidean => a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
        }
    }
    Ok(out)
}

/// CMC over ranks `1..=max_rank` and mean average precision. Gallery items
/// are ranked by ascending distance, ties by gallery index.
pub fn cmc_map(
    dist: &Tensor<f64>,
    q_meta: &[RowMeta],
    g_meta: &[RowMeta],
    rule: &ExclusionRule,
    max_rank: usize,
) -> Result<RankingResult> {
    let (nq, ng) = dist.dims2()?;
    ensure_shape!(
        q_meta.len() == nq && g_meta.len() == ng,
        "metadata ({} queries, {} gallery) does not match distances {nq}x{ng}",
        q_meta.len(),
        g_meta.len()
    );
    let mut hits = vec![0usize; max_rank];
    let mut aps = Vec::new();
    let mut skipped = 0;
    for (qi, &q) in q_meta.iter().enumerate() {
        let row = dist.row(qi);
        let mut order: Vec<usize> = (0..ng).filter(|&j| !rule.excludes(q, g_meta[j])).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| g_meta[j].identity == q.identity).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            skipped += 1;
            continue;
        }
        let first = relevant.iter().position(|&r| r).unwrap();
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (k, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                ap += found as f64 / (k + 1) as f64;
            }
        }
        aps.push(ap / total as f64);
    }
    if aps.is_empty() {
        return Err(Error::EmptyProtocol);
    }
    let n = aps.len() as f64;
    Ok(RankingResult {
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        map: aps.iter().sum::<f64>() / n,
        num_queries_evaluated: aps.len(),
        per_query_ap: aps,
        num_queries_skipped: skipped,
    })
}
