//! Retrieval metrics (CMC, mAP) and neighbor-selection quality.

use crate::error::Result;
use crate::losses::NeighborSet;
use crate::numerics::{dot, Matrix};
use serde::{Deserialize, Serialize};

/// A query's gallery sorted by descending cosine similarity, ties by
/// ascending gallery index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub gallery_order: Vec<usize>,
    pub relevance: Vec<bool>,
}

impl RankedList {
    pub fn from_relevance(query: usize, relevance: Vec<bool>) -> Self {
        Self {
            query,
            gallery_order: (0..relevance.len()).collect(),
            relevance,
        }
    }

    fn has_relevant(&self) -> bool {
        self.relevance.iter().any(|&r| r)
    }
}

/// Ranks `gallery` rows against `query`. `same_identity(g)` decides relevance;
/// `skip(g)` drops a gallery item from this query's list entirely.
pub fn rank_gallery(
    query_index: usize,
    query: &[f64],
    gallery: &Matrix,
    same_identity: impl Fn(usize) -> bool,
    skip: impl Fn(usize) -> bool,
) -> RankedList {
    // `+ 0.0` folds −0 into +0 so that equal scores tie under `total_cmp`.
    let scores: Vec<f64> = gallery.row_iter().map(|g| dot(g, query) + 0.0).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).filter(|&g| !skip(g)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let relevance = order.iter().map(|&g| same_identity(g)).collect();
    RankedList {
        query: query_index,
        gallery_order: order,
        relevance,
    }
}

/// Per-rank matching accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmc {
    pub ranks: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Queries without any relevant gallery item; left out of the averages.
    pub excluded: usize,
}

pub fn cmc(lists: &[RankedList], ranks: &[usize]) -> Cmc {
    let mut hits = vec![0usize; ranks.len()];
    let mut counted = 0;
    for list in lists {
        let Some(first) = list.relevance.iter().position(|&r| r) else {
            continue;
        };
        counted += 1;
        for (h, &r) in hits.iter_mut().zip(ranks) {
            if first < r {
                *h += 1;
            }
        }
    }
    Cmc {
        ranks: ranks.to_vec(),
        accuracy: hits
            .iter()
            .map(|&h| if counted == 0 { 0.0 } else { h as f64 / counted as f64 })
            .collect(),
        excluded: lists.len() - counted,
    }
}

/// Mean over relevant positions `r` of `precision@r`.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    for (pos, &rel) in relevance.iter().enumerate() {
        if rel {
            found += 1;
            total += found as f64 / (pos + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        total / found as f64
    }
}

/// Mean AP over queries that have at least one relevant item; the second
/// value counts the excluded queries.
pub fn mean_average_precision(lists: &[RankedList]) -> (f64, usize) {
    let aps: Vec<f64> = lists
        .iter()
        .filter(|l| l.has_relevant())
        .map(|l| average_precision(&l.relevance))
        .collect();
    let excluded = lists.len() - aps.len();
    if aps.is_empty() {
        return (0.0, excluded);
    }
    (aps.iter().sum::<f64>() / aps.len() as f64, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborQuality {
    pub precision: f64,
    pub recall: f64,
}

/// Raw counts behind [`NeighborQuality`]; summing them over many anchors
/// gives micro-averaged precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeighborCounts {
    pub true_positives: usize,
    pub selected: usize,
    pub positives: usize,
}

impl NeighborCounts {
    pub fn add(&mut self, other: NeighborCounts) {
        self.true_positives += other.true_positives;
        self.selected += other.selected;
        self.positives += other.positives;
    }

    /// Precision is 1 when nothing was selected; recall is 0 when there is
    /// nothing to find.
    pub fn quality(&self) -> NeighborQuality {
        NeighborQuality {
            precision: if self.selected == 0 {
                1.0
            } else {
                self.true_positives as f64 / self.selected as f64
            },
            recall: if self.positives == 0 {
                0.0
            } else {
                self.true_positives as f64 / self.positives as f64
            },
        }
    }
}

pub fn neighbor_counts(selected: &NeighborSet, truth: &[u32]) -> NeighborCounts {
    let anchor = selected.anchor();
    let id = truth[anchor];
    let positives = truth
        .iter()
        .enumerate()
        .filter(|&(j, &t)| j != anchor && t == id)
        .count();
    let chosen = selected.neighbors();
    NeighborCounts {
        true_positives: chosen.iter().filter(|&&j| truth[j] == id).count(),
        selected: chosen.len(),
        positives,
    }
}

/// Precision and recall of the non-anchor members of `selected` against
/// ground-truth identities (`truth[j]` for every memory index `j`). An empty
/// selection has precision 1 and recall 0.
pub fn neighbor_quality(selected: &NeighborSet, truth: &[u32]) -> NeighborQuality {
    neighbor_counts(selected, truth).quality()
}

/// Retrieval summary of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
}

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Evaluates unit-norm `query_features` against `gallery_features`.
/// With `cross_camera` set, gallery items sharing both identity and camera
/// with the query are dropped from its list.
pub fn evaluate_retrieval(
    query_features: &Matrix,
    query_meta: &[(u32, u16)],
    gallery_features: &Matrix,
    gallery_meta: &[(u32, u16)],
    cross_camera: bool,
) -> Result<RetrievalMetrics> {
    let lists: Vec<RankedList> = (0..query_features.rows())
        .map(|q| {
            let (qid, qcam) = query_meta[q];
            rank_gallery(
                q,
                query_features.row(q),
                gallery_features,
                |g| gallery_meta[g].0 == qid,
                |g| cross_camera && gallery_meta[g] == (qid, qcam),
            )
        })
        .collect();
    let c = cmc(&lists, &CMC_RANKS);
    let (map, _) = mean_average_precision(&lists);
    Ok(RetrievalMetrics {
        rank1: c.accuracy[0],
        rank5: c.accuracy[1],
        rank10: c.accuracy[2],
        rank20: c.accuracy[3],
        map,
    })
}
