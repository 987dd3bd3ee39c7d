//! Full-gallery cosine ranking, ITM reranking of the leading window, and the
//! multi-query fusion rules.
//!
//! Every ordering is total: equal scores fall back to ascending video id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmbeddingMatrix;
use crate::gateway::{GatewayError, ModelGateway};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CosineOnly,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub video_id: String,
    pub cosine_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub stage: Stage,
    /// Number of leading entries reordered by ITM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_window: Option<usize>,
}

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("query has {actual} dimensions, index has {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("rerank window {k} is outside 1..={len}")]
    WindowOutOfRange { k: usize, len: usize },
    #[error("list is already reranked")]
    AlreadyReranked,
    #[error("ITM for video {video_id:?} failed: {source}")]
    Provider {
        video_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("video {0:?} is not in the ranking")]
    UnknownTarget(String),
    #[error("nothing to aggregate")]
    NoPieces,
}

fn by_score_then_id(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

impl RankedList {
    #[must_use]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.video_id.as_str())
    }

    /// Ids of the first `n` entries.
    #[must_use]
    pub fn top_ids(&self, n: usize) -> Vec<String> {
        self.entries
            .iter()
            .take(n)
            .map(|e| e.video_id.clone())
            .collect()
    }

    /// Cosine-stage list from unsorted (id, score) pairs.
    #[must_use]
    pub fn from_scores(scores: Vec<(String, f64)>) -> Self {
        let mut entries: Vec<RankedEntry> = scores
            .into_iter()
            .map(|(video_id, cosine_score)| RankedEntry {
                video_id,
                cosine_score,
                itm_score: None,
            })
            .collect();
        entries.sort_by(|a, b| by_score_then_id(a.cosine_score, &a.video_id, b.cosine_score, &b.video_id));
        Self {
            entries,
            stage: Stage::CosineOnly,
            rerank_window: None,
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Score every whole-video row against a unit query vector.
pub fn rank_cosine(query: &[f32], index: &EmbeddingMatrix) -> Result<RankedList, RankingError> {
    if query.len() != index.dimension() {
        return Err(RankingError::DimensionMismatch {
            expected: index.dimension(),
            actual: query.len(),
        });
    }
    let scores = index
        .whole_rows()
        .map(|(id, row)| (id.to_string(), dot(query, row)))
        .collect();
    Ok(RankedList::from_scores(scores))
}

/// Reorder the first `k` entries of a cosine list by ITM score, descending.
/// The tail is left untouched. At most `parallelism` ITM calls run at once.
pub fn rerank_itm(
    list: &RankedList,
    query_text: &str,
    k: usize,
    gateway: &dyn ModelGateway,
    parallelism: usize,
) -> Result<RankedList, RankingError> {
    if list.stage != Stage::CosineOnly {
        return Err(RankingError::AlreadyReranked);
    }
    if k == 0 || k > list.len() {
        return Err(RankingError::WindowOutOfRange { k, len: list.len() });
    }
    let window = &list.entries[..k];
    let scores = itm_scores(window, query_text, gateway, parallelism.max(1))?;

    let mut head: Vec<RankedEntry> = window
        .iter()
        .map(|e| RankedEntry {
            itm_score: Some(scores[&e.video_id]),
            ..e.clone()
        })
        .collect();
    head.sort_by(|a, b| {
        by_score_then_id(
            a.itm_score.unwrap_or_default(),
            &a.video_id,
            b.itm_score.unwrap_or_default(),
            &b.video_id,
        )
    });
    head.extend_from_slice(&list.entries[k..]);
    Ok(RankedList {
        entries: head,
        stage: Stage::Reranked,
        rerank_window: Some(k),
    })
}

fn itm_scores(
    window: &[RankedEntry],
    text: &str,
    gateway: &dyn ModelGateway,
    parallelism: usize,
) -> Result<HashMap<String, f64>, RankingError> {
    let score = |e: &RankedEntry| {
        gateway
            .itm(&e.video_id, text)
            .map(|s| (e.video_id.clone(), s))
            .map_err(|source| RankingError::Provider {
                video_id: e.video_id.clone(),
                source,
            })
    };
    if parallelism == 1 || window.len() == 1 {
        return window.iter().map(score).collect();
    }
    let results = Mutex::new(Vec::with_capacity(window.len()));
    let chunk = window.len().div_ceil(parallelism);
    thread::scope(|scope| {
        for part in window.chunks(chunk) {
            let results = &results;
            let score = &score;
            scope.spawn(move || {
                let scored: Vec<_> = part.iter().map(score).collect();
                results.lock().expect("itm results").extend(scored);
            });
        }
    });
    let mut results = results.into_inner().expect("itm results");
    // Report the failure of the best-ranked video when several fail.
    let position: HashMap<&str, usize> = window
        .iter()
        .enumerate()
        .map(|(i, e)| (e.video_id.as_str(), i))
        .collect();
    results.sort_by_key(|r| match r {
        Ok((id, _)) => position[id.as_str()],
        Err(RankingError::Provider { video_id, .. }) => position[video_id.as_str()],
        Err(_) => usize::MAX,
    });
    results.into_iter().collect()
}

/// 1-based position of `target`.
pub fn rank_of(list: &RankedList, target: &str) -> Result<usize, RankingError> {
    list.ids()
        .position(|id| id == target)
        .map(|i| i + 1)
        .ok_or_else(|| RankingError::UnknownTarget(target.to_string()))
}

/// Per-video mean cosine over several lists of the same gallery.
fn mean_cosines(lists: &[RankedList]) -> HashMap<&str, f64> {
    let mut sums: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for e in &list.entries {
            *sums.entry(e.video_id.as_str()).or_default() += e.cosine_score;
        }
    }
    let n = lists.len() as f64;
    sums.values_mut().for_each(|s| *s /= n);
    sums
}

/// Similarity aggregation: rank by the mean of per-piece cosine scores.
pub fn similarity_aggregate(lists: &[RankedList]) -> Result<RankedList, RankingError> {
    if lists.is_empty() {
        return Err(RankingError::NoPieces);
    }
    let scores = mean_cosines(lists)
        .into_iter()
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    Ok(RankedList::from_scores(scores))
}

/// Rank aggregation: order by mean per-piece rank, ascending. The stored
/// score is the mean cosine.
pub fn rank_aggregate(lists: &[RankedList]) -> Result<RankedList, RankingError> {
    if lists.is_empty() {
        return Err(RankingError::NoPieces);
    }
    let mut rank_sums: HashMap<&str, usize> = HashMap::new();
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            *rank_sums.entry(e.video_id.as_str()).or_default() += i + 1;
        }
    }
    let cosines = mean_cosines(lists);
    let n = lists.len() as f64;
    let mut keyed: Vec<(f64, RankedEntry)> = rank_sums
        .into_iter()
        .map(|(id, sum)| {
            (
                sum as f64 / n,
                RankedEntry {
                    video_id: id.to_string(),
                    cosine_score: cosines[id],
                    itm_score: None,
                },
            )
        })
        .collect();
    keyed.sort_by(|(ra, a), (rb, b)| ra.total_cmp(rb).then_with(|| a.video_id.cmp(&b.video_id)));
    Ok(RankedList {
        entries: keyed.into_iter().map(|(_, e)| e).collect(),
        stage: Stage::CosineOnly,
        rerank_window: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RowKey, Segment};
    use crate::gateway::Endpoint;
    use crate::corpus::Segment as Seg;

    fn index(rows: &[(&str, [f32; 2])]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            2,
            rows.iter()
                .map(|(id, v)| (RowKey::new(*id, Segment::Whole), v.to_vec())),
        )
        .unwrap()
    }

    struct FixedItm(HashMap<&'static str, f64>);

    impl ModelGateway for FixedItm {
        fn dimension(&self) -> usize {
            2
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>, GatewayError> {
            unimplemented!()
        }
        fn embed_video(&self, _: &str, _: Seg) -> Result<Vec<f32>, GatewayError> {
            unimplemented!()
        }
        fn caption(&self, _: &str) -> Result<String, GatewayError> {
            unimplemented!()
        }
        fn vqa(&self, _: &str, _: &str, _: Seg) -> Result<String, GatewayError> {
            unimplemented!()
        }
        fn itm(&self, id: &str, _: &str) -> Result<f64, GatewayError> {
            self.0.get(id).copied().ok_or(GatewayError::Unsupported {
                endpoint: Endpoint::Itm,
            })
        }
        fn lm_generate(&self, _: &str, _: usize) -> Result<String, GatewayError> {
            unimplemented!()
        }
    }

    #[test]
    fn orthogonal_and_tie_cases() {
        let l = rank_cosine(&[1.0, 0.0], &index(&[("a", [1.0, 0.0]), ("b", [0.0, 1.0])])).unwrap();
        assert_eq!(l.top_ids(2), ["a", "b"]);
        assert_eq!(l.entries[0].cosine_score, 1.0);
        assert_eq!(l.entries[1].cosine_score, 0.0);
        let l = rank_cosine(&[1.0, 0.0], &index(&[("b", [1.0, 0.0]), ("a", [1.0, 0.0])])).unwrap();
        assert_eq!(l.top_ids(2), ["a", "b"]);
    }

    #[test]
    fn dimension_mismatch() {
        let idx = index(&[("a", [1.0, 0.0])]);
        assert!(matches!(
            rank_cosine(&[1.0, 0.0, 0.0], &idx),
            Err(RankingError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    fn abc() -> RankedList {
        RankedList::from_scores(vec![("a".into(), 0.9), ("b".into(), 0.8), ("c".into(), 0.7)])
    }

    #[test]
    fn rerank_swaps_within_window() {
        let gw = FixedItm([("a", 0.2), ("b", 0.9), ("c", 1.0)].into_iter().collect());
        let r = rerank_itm(&abc(), "q", 2, &gw, 2).unwrap();
        assert_eq!(r.top_ids(3), ["b", "a", "c"]);
        assert_eq!(r.stage, Stage::Reranked);
        assert_eq!(r.entries[2].itm_score, None);
        let r = rerank_itm(&abc(), "q", 1, &gw, 1).unwrap();
        assert_eq!(r.top_ids(3), ["a", "b", "c"]);
    }

    #[test]
    fn rerank_errors() {
        let gw = FixedItm([("a", 0.2)].into_iter().collect());
        assert!(matches!(
            rerank_itm(&abc(), "q", 4, &gw, 1),
            Err(RankingError::WindowOutOfRange { k: 4, len: 3 })
        ));
        assert!(matches!(
            rerank_itm(&abc(), "q", 0, &gw, 1),
            Err(RankingError::WindowOutOfRange { .. })
        ));
        match rerank_itm(&abc(), "q", 3, &gw, 3) {
            Err(RankingError::Provider { video_id, .. }) => assert_eq!(video_id, "b"),
            other => panic!("{other:?}"),
        }
        let full = FixedItm([("a", 0.2), ("b", 0.3), ("c", 0.1)].into_iter().collect());
        let r = rerank_itm(&abc(), "q", 2, &full, 1).unwrap();
        assert!(matches!(
            rerank_itm(&r, "q", 2, &full, 1),
            Err(RankingError::AlreadyReranked)
        ));
    }

    #[test]
    fn rank_of_positions() {
        assert_eq!(rank_of(&abc(), "a").unwrap(), 1);
        assert_eq!(rank_of(&abc(), "c").unwrap(), 3);
        assert!(matches!(rank_of(&abc(), "z"), Err(RankingError::UnknownTarget(_))));
    }

    #[test]
    fn rank_aggregation_tie_goes_to_lower_id() {
        // Target "t" ranks (1, 3); competitor "c" ranks (2, 2): both mean 2.
        let p1 = RankedList::from_scores(vec![("t".into(), 0.9), ("c".into(), 0.5), ("x".into(), 0.1)]);
        let p2 = RankedList::from_scores(vec![("x".into(), 0.9), ("c".into(), 0.5), ("t".into(), 0.1)]);
        let ra = rank_aggregate(&[p1, p2]).unwrap();
        assert_eq!(ra.top_ids(2), ["c", "t"]);
        assert!((ra.entries[1].cosine_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_aggregation_of_identical_pieces() {
        let sa = similarity_aggregate(&[abc(), abc()]).unwrap();
        assert_eq!(sa.top_ids(3), abc().top_ids(3));
        assert!(matches!(similarity_aggregate(&[]), Err(RankingError::NoPieces)));
    }
}
