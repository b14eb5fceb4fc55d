//! Retrieval evaluation: CMC rank-k and mAP with box correctness judged by
//! the IoU >= 0.5 detection criterion.
//!
//! Gallery candidates are ranked per query by embedding similarity (negative
//! squared Euclidean distance; with unit-norm embeddings rankings match the
//! cosine ordering). A candidate is a true positive iff it overlaps an
//! unmatched same-identity ground-truth box in its own scene with IoU >= 0.5;
//! ground truths are consumed greedily in rank order. AP comes from the
//! precision values at true-positive ranks over the query's positive count.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::Grid2D;
use crate::embed::EmbedNet;
use crate::proxy::squared_euclidean;
use crate::roi::BBox;

/// Rectangle intersection-over-union in [0, 1], continuous-area convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.m2.min(b.m2) - a.m1.max(b.m1)).max(0.0);
    let ih = (a.n2.min(b.n2) - a.n1.max(b.n1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// A query person: the crop to embed and its labeled identity.
#[derive(Debug, Clone)]
pub struct QueryInput {
    pub crop: Grid2D,
    pub identity: usize,
}

/// A gallery detection: which scene it came from, its box, and its crop.
#[derive(Debug, Clone)]
pub struct CandidateInput {
    pub scene: usize,
    pub bbox: BBox,
    pub crop: Grid2D,
}

/// A gallery ground-truth instance.
#[derive(Debug, Clone, Copy)]
pub struct GtBox {
    pub scene: usize,
    pub identity: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Candidate indices per query in rank order.
    pub rankings: Vec<Vec<usize>>,
    /// True-positive flag per query per rank.
    pub tp_flags: Vec<Vec<bool>>,
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    /// CMC curve; entry k-1 is the rank-k value.
    pub cmc: Vec<f64>,
    pub gallery_size: usize,
}

impl RetrievalResult {
    pub fn rank_k(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Candidate order by descending similarity, ties broken by index.
pub fn rank_by_similarity(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("similarities must be finite")
            .then(a.cmp(&b))
    });
    order
}

/// AP from the true-positive flags of a ranked candidate list: precision at
/// each true-positive rank, averaged over the `n_gt` positives.
pub fn ap_from_ranked(tp_flags: &[bool], n_gt: usize) -> f64 {
    assert!(n_gt > 0);
    let mut ap = 0.0;
    let mut tp = 0usize;
    for (rank0, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
            ap += tp as f64 / (rank0 + 1) as f64;
        }
    }
    ap / n_gt as f64
}

/// Marks true positives in rank order: a candidate matches the first
/// unclaimed same-scene same-identity ground truth with IoU >= 0.5.
fn mark_true_positives(
    order: &[usize],
    candidates: &[CandidateInput],
    gts: &[GtBox],
    identity: usize,
) -> Vec<bool> {
    let positives: Vec<usize> = (0..gts.len())
        .filter(|&g| gts[g].identity == identity)
        .collect();
    let mut claimed = vec![false; positives.len()];
    order
        .iter()
        .map(|&ci| {
            let cand = &candidates[ci];
            for (slot, &g) in positives.iter().enumerate() {
                if claimed[slot] || gts[g].scene != cand.scene {
                    continue;
                }
                if iou(&cand.bbox, &gts[g].bbox) >= 0.5 {
                    claimed[slot] = true;
                    return true;
                }
            }
            false
        })
        .collect()
}

/// Ranks every gallery candidate for every query and scores AP, mAP, and the
/// CMC curve. Per-query work is data-parallel; aggregation is sequential.
pub fn evaluate(
    net: &EmbedNet,
    queries: &[QueryInput],
    candidates: &[CandidateInput],
    gts: &[GtBox],
    cmc_depth: usize,
) -> Result<RetrievalResult> {
    for q in queries {
        if !gts.iter().any(|g| g.identity == q.identity) {
            return Err(Error::QueryNotInGallery { id: q.identity });
        }
    }

    let cand_embeds = exec::map_indexed(candidates.len(), |i| {
        let (e, _, _) = net
            .forward(&candidates[i].crop)
            .expect("candidate forward failed");
        e.0
    });
    let query_embeds = exec::map_indexed(queries.len(), |i| {
        let (e, _, _) = net.forward(&queries[i].crop).expect("query forward failed");
        e.0
    });

    let per_query = exec::map_indexed(queries.len(), |qi| {
        let sims: Vec<f64> = cand_embeds
            .iter()
            .map(|ce| -squared_euclidean(&query_embeds[qi], ce))
            .collect();
        let order = rank_by_similarity(&sims);
        let flags = mark_true_positives(&order, candidates, gts, queries[qi].identity);
        let n_gt = gts
            .iter()
            .filter(|g| g.identity == queries[qi].identity)
            .count();
        let ap = ap_from_ranked(&flags, n_gt);
        (order, flags, ap)
    });

    let mut rankings = Vec::with_capacity(queries.len());
    let mut tp_flags = Vec::with_capacity(queries.len());
    let mut per_query_ap = Vec::with_capacity(queries.len());
    for (order, flags, ap) in per_query {
        rankings.push(order);
        tp_flags.push(flags);
        per_query_ap.push(ap);
    }
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len().max(1) as f64;

    let depth = cmc_depth.min(candidates.len()).max(1);
    let mut cmc = Vec::with_capacity(depth);
    let mut hits_by_first_rank = vec![0usize; candidates.len() + 1];
    for flags in &tp_flags {
        if let Some(first) = flags.iter().position(|&t| t) {
            hits_by_first_rank[first] += 1;
        }
    }
    let mut cum = 0usize;
    for k in 0..depth {
        cum += hits_by_first_rank[k];
        cmc.push(cum as f64 / queries.len().max(1) as f64);
    }
    // CMC is cumulative beyond the stored depth by construction.

    Ok(RetrievalResult {
        rankings,
        tp_flags,
        per_query_ap,
        map,
        cmc,
        gallery_size: candidates.len(),
    })
}

/// Summary written as `metrics.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub cmc: Vec<f64>,
    pub gallery_size: usize,
    pub seed: u64,
}

impl Metrics {
    pub fn from_result(result: &RetrievalResult, seed: u64) -> Self {
        Metrics {
            map: result.map,
            rank1: result.rank_k(1),
            rank5: result.rank_k(5),
            cmc: result.cmc.clone(),
            gallery_size: result.gallery_size,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Writes `pr_query_%d.csv` files: rank, precision, recall at every cutoff.
pub fn write_pr_curves(result: &RetrievalResult, gts_per_query: &[usize], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (qi, flags) in result.tp_flags.iter().enumerate() {
        let mut csv = String::from("rank,precision,recall\n");
        let mut tp = 0usize;
        for (rank0, &is_tp) in flags.iter().enumerate() {
            if is_tp {
                tp += 1;
            }
            let rank = rank0 + 1;
            let precision = tp as f64 / rank as f64;
            let recall = tp as f64 / gts_per_query[qi] as f64;
            csv.push_str(&format!("{rank},{precision},{recall}\n"));
        }
        std::fs::write(dir.join(format!("pr_query_{qi}.csv")), csv)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(m1: f64, n1: f64, m2: f64, n2: f64) -> BBox {
        BBox { m1, n1, m2, n2 }
    }

    #[test]
    fn iou_identical_boxes() {
        let b = bx(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        assert_eq!(iou(&bx(0.0, 0.0, 5.0, 5.0), &bx(10.0, 10.0, 15.0, 15.0)), 0.0);
    }

    #[test]
    fn iou_half_overlap_rectangles() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let sims = vec![0.5, 0.9, 0.5, 0.1];
        assert_eq!(rank_by_similarity(&sims), vec![1, 0, 2, 3]);
    }

    #[test]
    fn ap_perfect_retrieval() {
        assert_eq!(ap_from_ranked(&[true, false, false], 1), 1.0);
    }

    #[test]
    fn ap_single_positive_at_rank_two() {
        assert_eq!(ap_from_ranked(&[false, true], 1), 0.5);
    }

    #[test]
    fn ap_two_positives_interleaved() {
        // Positives at ranks 1 and 3 of 4: (1/1 + 2/3) / 2.
        let ap = ap_from_ranked(&[true, false, true, false], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn monotone_transform_leaves_ranking_unchanged() {
        let sims: Vec<f64> = vec![-0.3, 0.2, -1.5, 0.9, 0.0];
        let transformed: Vec<f64> = sims.iter().map(|&s| (2.0 * s).exp() + 3.0).collect();
        assert_eq!(rank_by_similarity(&sims), rank_by_similarity(&transformed));
    }

    #[test]
    fn improving_a_true_positive_rank_never_decreases_ap() {
        // Move the single positive one rank earlier at every step.
        let n = 6;
        let mut prev = 0.0;
        for pos in (0..n).rev() {
            let mut flags = vec![false; n];
            flags[pos] = true;
            let ap = ap_from_ranked(&flags, 1);
            assert!(ap >= prev);
            prev = ap;
        }
    }

    #[test]
    fn greedy_matching_claims_each_gt_once() {
        // Two candidates both overlap the same single gt; only the first
        // ranked one may count.
        let gts = vec![GtBox {
            scene: 0,
            identity: 3,
            bbox: bx(10.0, 10.0, 30.0, 50.0),
        }];
        let candidates = vec![
            CandidateInput {
                scene: 0,
                bbox: bx(11.0, 11.0, 31.0, 51.0),
                crop: Grid2D::zeros(1, 1, 1),
            },
            CandidateInput {
                scene: 0,
                bbox: bx(9.0, 9.0, 29.0, 49.0),
                crop: Grid2D::zeros(1, 1, 1),
            },
        ];
        let flags = mark_true_positives(&[0, 1], &candidates, &gts, 3);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn matching_requires_same_scene() {
        let gts = vec![GtBox {
            scene: 1,
            identity: 0,
            bbox: bx(10.0, 10.0, 30.0, 50.0),
        }];
        let candidates = vec![CandidateInput {
            scene: 0,
            bbox: bx(10.0, 10.0, 30.0, 50.0),
            crop: Grid2D::zeros(1, 1, 1),
        }];
        let flags = mark_true_positives(&[0], &candidates, &gts, 0);
        assert_eq!(flags, vec![false]);
    }
}
