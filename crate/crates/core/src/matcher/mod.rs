//! Descriptor matching, the ratio test, mutual cross-checking and the
//! image-level "Lowe" similarity score.

pub mod kdtree;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{root_normalize, Descriptor};
use kdtree::{KdTree, TwoNearest, DEFAULT_LEAF_SIZE};

/// Best and second-best neighbour of one query descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub query_idx: usize,
    pub train_idx: usize,
    pub dist_best: f64,
    /// `+inf` when the train set holds a single descriptor.
    pub dist_second: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnFlag {
    Ok,
    /// Query or train set was empty; no pairs produced.
    EmptyInput,
    /// Only one train descriptor: every pair has ratio 0.
    SingletonTrain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnMatches {
    pub pairs: Vec<MatchPair>,
    pub flag: KnnFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherKind {
    Brute,
    Approx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub ratio_threshold: f64,
    /// Apply [`root_normalize`] to both sides before matching.
    pub root_kernel: bool,
    /// Keep only mutual matches; off means one-directional A -> B matching.
    pub cross_check: bool,
    pub matcher: MatcherKind,
    /// Leaf visits allowed per query by the approximate matcher.
    pub leaf_budget: usize,
    pub leaf_size: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.7,
            root_kernel: true,
            cross_check: true,
            matcher: MatcherKind::Brute,
            leaf_budget: 200,
            leaf_size: DEFAULT_LEAF_SIZE,
        }
    }
}

/// Euclidean distance, accumulated in f64 in component order.
#[inline]
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn pair_from(query_idx: usize, nn: TwoNearest) -> Option<MatchPair> {
    let (dist_best, train_idx) = nn.best?;
    let dist_second = nn.second.map_or(f64::INFINITY, |s| s.0);
    let ratio = if dist_second.is_infinite() || dist_second == 0.0 {
        0.0
    } else {
        dist_best / dist_second
    };
    Some(MatchPair {
        query_idx,
        train_idx,
        dist_best,
        dist_second,
        ratio,
    })
}

fn flag_for(query: &[Descriptor], train: &[Descriptor]) -> KnnFlag {
    if query.is_empty() || train.is_empty() {
        KnnFlag::EmptyInput
    } else if train.len() == 1 {
        KnnFlag::SingletonTrain
    } else {
        KnnFlag::Ok
    }
}

/// Exhaustive 2-NN; ties go to the lower train index.
pub fn brute_force_knn(query: &[Descriptor], train: &[Descriptor]) -> KnnMatches {
    let flag = flag_for(query, train);
    if flag == KnnFlag::EmptyInput {
        return KnnMatches {
            pairs: Vec::new(),
            flag,
        };
    }
    let pairs = query
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut best = (f64::INFINITY, usize::MAX);
            let mut second = (f64::INFINITY, usize::MAX);
            for (ti, t) in train.iter().enumerate() {
                let d = descriptor_distance(q, t);
                if d < best.0 {
                    second = best;
                    best = (d, ti);
                } else if d < second.0 {
                    second = (d, ti);
                }
            }
            let nn = TwoNearest {
                best: Some(best),
                second: (second.1 != usize::MAX).then_some(second),
            };
            pair_from(qi, nn).expect("train is non-empty")
        })
        .collect();
    KnnMatches { pairs, flag }
}

/// k-d tree 2-NN with at most `leaf_budget` leaves visited per query
/// (`None` searches exhaustively and agrees with [`brute_force_knn`]).
pub fn approx_knn(
    query: &[Descriptor],
    train: &[Descriptor],
    leaf_budget: Option<usize>,
    leaf_size: usize,
) -> KnnMatches {
    let flag = flag_for(query, train);
    if flag == KnnFlag::EmptyInput {
        return KnnMatches {
            pairs: Vec::new(),
            flag,
        };
    }
    let tree = KdTree::build(train, leaf_size);
    let pairs = query
        .par_iter()
        .enumerate()
        .map(|(qi, q)| pair_from(qi, tree.two_nearest(q, leaf_budget)).expect("train is non-empty"))
        .collect();
    KnnMatches { pairs, flag }
}

/// Keeps pairs with `ratio < threshold`.
pub fn ratio_test(matches: &[MatchPair], threshold: f64) -> Vec<MatchPair> {
    matches
        .iter()
        .filter(|m| m.ratio < threshold)
        .copied()
        .collect()
}

/// Keeps `(i, j)` from `ab` only when `(j, i)` is in `ba`; ordered by query index.
pub fn cross_check(ab: &[MatchPair], ba: &[MatchPair]) -> Vec<MatchPair> {
    let reverse: HashMap<usize, Vec<usize>> = ba.iter().fold(HashMap::new(), |mut acc, m| {
        acc.entry(m.query_idx).or_default().push(m.train_idx);
        acc
    });
    let mut out: Vec<MatchPair> = ab
        .iter()
        .filter(|m| {
            reverse
                .get(&m.train_idx)
                .is_some_and(|back| back.contains(&m.query_idx))
        })
        .copied()
        .collect();
    out.sort_by_key(|m| (m.query_idx, m.train_idx));
    out
}

/// Fraction of keypoints with a surviving good match:
/// `good_matches / max(|A|, |B|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub good_matches: usize,
    pub denom: usize,
    /// Both descriptor sets were empty.
    pub degenerate: bool,
}

impl SimilarityScore {
    /// `1 - value`, for callers that want distance semantics.
    pub fn distance(&self) -> f64 {
        1.0 - self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Good matches, A-indexed as query.
    pub pairs: Vec<MatchPair>,
    pub score: SimilarityScore,
}

fn knn(query: &[Descriptor], train: &[Descriptor], params: &MatchParams) -> KnnMatches {
    match params.matcher {
        MatcherKind::Brute => brute_force_knn(query, train),
        MatcherKind::Approx => approx_knn(query, train, Some(params.leaf_budget), params.leaf_size),
    }
}

pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], params: &MatchParams) -> MatchOutcome {
    let denom = a.len().max(b.len());
    if a.is_empty() || b.is_empty() {
        return MatchOutcome {
            pairs: Vec::new(),
            score: SimilarityScore {
                value: 0.0,
                good_matches: 0,
                denom,
                degenerate: denom == 0,
            },
        };
    }
    let rooted;
    let (a, b) = if params.root_kernel {
        rooted = (
            a.iter().map(root_normalize).collect::<Vec<_>>(),
            b.iter().map(root_normalize).collect::<Vec<_>>(),
        );
        (&rooted.0[..], &rooted.1[..])
    } else {
        (a, b)
    };
    let ab = ratio_test(&knn(a, b, params).pairs, params.ratio_threshold);
    let pairs = if params.cross_check {
        let ba = ratio_test(&knn(b, a, params).pairs, params.ratio_threshold);
        cross_check(&ab, &ba)
    } else {
        ab
    };
    let good_matches = pairs.len();
    MatchOutcome {
        pairs,
        score: SimilarityScore {
            value: good_matches as f64 / denom as f64,
            good_matches,
            denom,
            degenerate: false,
        },
    }
}

pub fn lowe_similarity(a: &[Descriptor], b: &[Descriptor], params: &MatchParams) -> SimilarityScore {
    match_descriptors(a, b, params).score
}
