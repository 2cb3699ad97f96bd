//! Choosing which conversations of an intent feed workflow generation.
//!
//! Four selectors:
//!
//! * `proc_sim`: top-k by cosine similarity to the intent centroid of the
//!   procedural-element embeddings;
//! * `conv_sim`: the same ranking over whole-conversation embeddings;
//! * `proc_div`: drop the `floor(0.1 n)` members least similar to the
//!   centroid, seed with the least similar survivor, then repeatedly add the
//!   survivor least similar to the centroid of what has been picked so far;
//! * `random`: seeded uniform sample without replacement.
//!
//! Every similarity tie is broken by ascending conversation id.
//!
//! The greedy step of `proc_div` compares against the centroid of the picked
//! set. Classic farthest-point sampling (max-min distance to the nearest
//! picked point) is a different algorithm and is not what runs here.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_conversation, Conversation};
use crate::elements::{canonical_text, ProceduralElements};
use crate::gateway::{EmbeddingModel, GatewayError};
use crate::rng::sample_indices;

pub const NOISE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("embedding set is empty")]
    EmptySet,
    #[error("cosine similarity of a zero vector{}", .0.as_deref().map(|id| format!(" ({id})")).unwrap_or_default())]
    ZeroVector(Option<String>),
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("duplicate id {0:?} in embedding set")]
    DuplicateId(String),
    #[error("{ids} ids but {rows} vectors")]
    Shape { ids: usize, rows: usize },
    #[error("no conversations left after noise filtering")]
    EmptyAfterFilter,
    #[error("k must be positive")]
    ZeroK,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    ProceduralElements,
    FullConversation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>, source: EmbeddingSource) -> Result<Self, RetrievalError> {
        if ids.len() != vectors.len() {
            return Err(RetrievalError::Shape { ids: ids.len(), rows: vectors.len() });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
                return Err(RetrievalError::LengthMismatch(first.len(), bad.len()));
            }
        }
        Ok(Self { ids, vectors, source })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    ProcSim,
    ConvSim,
    ProcDiv,
    Random,
}

impl SelectionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::ProcSim => "proc_sim",
            SelectionStrategy::ConvSim => "conv_sim",
            SelectionStrategy::ProcDiv => "proc_div",
            SelectionStrategy::Random => "random",
        }
    }

    /// Which embeddings the strategy needs, if any.
    pub fn source(self) -> Option<EmbeddingSource> {
        match self {
            SelectionStrategy::ProcSim | SelectionStrategy::ProcDiv => Some(EmbeddingSource::ProceduralElements),
            SelectionStrategy::ConvSim => Some(EmbeddingSource::FullConversation),
            SelectionStrategy::Random => None,
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proc_sim" => Ok(SelectionStrategy::ProcSim),
            "conv_sim" => Ok(SelectionStrategy::ConvSim),
            "proc_div" => Ok(SelectionStrategy::ProcDiv),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(format!("unknown retrieval strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: SelectionStrategy,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub selected_ids: Vec<String>,
    /// Similarity that decided each pick, aligned with `selected_ids`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

pub fn centroid(vectors: &[Vec<f64>]) -> Result<Vec<f64>, RetrievalError> {
    let first = vectors.first().ok_or(RetrievalError::EmptySet)?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != sum.len() {
            return Err(RetrievalError::LengthMismatch(sum.len(), v.len()));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::LengthMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector(None));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn similarities(set: &EmbeddingSet, target: &[f64], rows: &[usize]) -> Result<Vec<f64>, RetrievalError> {
    rows.iter()
        .map(|&i| {
            cosine_similarity(&set.vectors[i], target).map_err(|e| match e {
                RetrievalError::ZeroVector(_) => RetrievalError::ZeroVector(Some(set.ids[i].clone())),
                other => other,
            })
        })
        .collect()
}

/// Ranks by descending similarity to the centroid and keeps the first `k`.
pub fn select_top_k(set: &EmbeddingSet, k: usize) -> Result<SelectionResult, RetrievalError> {
    if set.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let center = centroid(&set.vectors)?;
    let rows: Vec<usize> = (0..set.len()).collect();
    let sims = similarities(set, &center, &rows)?;
    let mut order = rows;
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| set.ids[a].cmp(&set.ids[b])));
    order.truncate(k);
    let strategy = match set.source {
        EmbeddingSource::ProceduralElements => SelectionStrategy::ProcSim,
        EmbeddingSource::FullConversation => SelectionStrategy::ConvSim,
    };
    Ok(SelectionResult {
        strategy,
        k,
        seed: None,
        selected_ids: order.iter().map(|&i| set.ids[i].clone()).collect(),
        scores: Some(order.iter().map(|&i| sims[i]).collect()),
    })
}

/// Least similar row among `candidates` (ties to the smaller id).
fn least_similar(set: &EmbeddingSet, candidates: &[usize], sims: &[f64]) -> usize {
    let mut best = 0;
    for pos in 1..candidates.len() {
        let (a, b) = (candidates[pos], candidates[best]);
        let ord = sims[pos].total_cmp(&sims[best]).then_with(|| set.ids[a].cmp(&set.ids[b]));
        if ord == Ordering::Less {
            best = pos;
        }
    }
    best
}

pub fn select_diverse(set: &EmbeddingSet, k: usize) -> Result<SelectionResult, RetrievalError> {
    if set.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let n = set.len();
    let center = centroid(&set.vectors)?;
    let all: Vec<usize> = (0..n).collect();
    let global = similarities(set, &center, &all)?;

    // Noise filter: ascending similarity, larger ids first among ties, so that
    // the ascending-id preference holds for the survivors.
    let drop = (NOISE_FRACTION * n as f64).floor() as usize;
    let mut by_sim = all.clone();
    by_sim.sort_by(|&a, &b| global[a].total_cmp(&global[b]).then_with(|| set.ids[b].cmp(&set.ids[a])));
    let dropped: HashSet<usize> = by_sim[..drop].iter().copied().collect();
    let mut remaining: Vec<usize> = all.into_iter().filter(|i| !dropped.contains(i)).collect();
    if remaining.is_empty() {
        return Err(RetrievalError::EmptyAfterFilter);
    }

    let seed_sims: Vec<f64> = remaining.iter().map(|&i| global[i]).collect();
    let pos = least_similar(set, &remaining, &seed_sims);
    let mut selected = vec![remaining.remove(pos)];
    let mut scores = vec![seed_sims[pos]];

    while selected.len() < k && !remaining.is_empty() {
        let picked: Vec<Vec<f64>> = selected.iter().map(|&i| set.vectors[i].clone()).collect();
        let local = centroid(&picked)?;
        let sims = similarities(set, &local, &remaining)?;
        let pos = least_similar(set, &remaining, &sims);
        selected.push(remaining.remove(pos));
        scores.push(sims[pos]);
    }

    Ok(SelectionResult {
        strategy: SelectionStrategy::ProcDiv,
        k,
        seed: None,
        selected_ids: selected.iter().map(|&i| set.ids[i].clone()).collect(),
        scores: Some(scores),
    })
}

/// Uniform sample without replacement (ChaCha8, see [`crate::rng`]), in draw order.
pub fn select_random(ids: &[String], k: usize, seed: u64) -> Result<SelectionResult, RetrievalError> {
    if ids.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let picks = sample_indices(ids.len(), k, seed);
    Ok(SelectionResult {
        strategy: SelectionStrategy::Random,
        k,
        seed: Some(seed),
        selected_ids: picks.into_iter().map(|i| ids[i].clone()).collect(),
        scores: None,
    })
}

/// Keeps the first `max_chars` characters; reports whether it cut anything.
pub fn truncate_head(text: &str, max_chars: usize) -> (&str, bool) {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => (&text[..byte], true),
        None => (text, false),
    }
}

pub fn embed_elements(
    items: &[(String, ProceduralElements)],
    model: &EmbeddingModel,
) -> Result<EmbeddingSet, RetrievalError> {
    if items.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    let texts: Vec<String> = items.iter().map(|(_, e)| canonical_text(e)).collect();
    let vectors = model.embed(&texts)?;
    EmbeddingSet::new(
        items.iter().map(|(id, _)| id.clone()).collect(),
        vectors.into_iter().map(|v| v.values).collect(),
        EmbeddingSource::ProceduralElements,
    )
}

/// Whole-conversation embeddings; each rendering is head-truncated to
/// `max_chars` characters.
pub fn embed_conversations(
    convs: &[&Conversation],
    model: &EmbeddingModel,
    max_chars: usize,
) -> Result<EmbeddingSet, RetrievalError> {
    if convs.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    let texts: Vec<String> = convs
        .iter()
        .map(|c| {
            let rendered = render_conversation(c);
            let (kept, cut) = truncate_head(&rendered, max_chars);
            if cut {
                tracing::info!(conversation = %c.id, max_chars, "conversation truncated for embedding");
            }
            kept.to_string()
        })
        .collect();
    let vectors = model.embed(&texts)?;
    EmbeddingSet::new(
        convs.iter().map(|c| c.id.clone()).collect(),
        vectors.into_iter().map(|v| v.values).collect(),
        EmbeddingSource::FullConversation,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rows: &[(&str, &[f64])]) -> EmbeddingSet {
        EmbeddingSet::new(
            rows.iter().map(|(id, _)| id.to_string()).collect(),
            rows.iter().map(|(_, v)| v.to_vec()).collect(),
            EmbeddingSource::ProceduralElements,
        )
        .unwrap()
    }

    #[test]
    fn centroid_cases() {
        assert_eq!(centroid(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(centroid(&[vec![3.0, -2.0]]).unwrap(), vec![3.0, -2.0]);
        assert_eq!(centroid(&[]), Err(RetrievalError::EmptySet));
        let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![-2.0, 0.5, 9.0]];
        let c = centroid(&rows).unwrap();
        for d in 0..3 {
            let oracle = (rows[0][d] + rows[1][d] + rows[2][d]) / 3.0;
            assert!((c[d] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector(_))));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(RetrievalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn top_k_hand_example() {
        let s = set(&[("A", &[1.0, 0.0]), ("B", &[0.9, 0.1]), ("C", &[0.0, 1.0])]);
        let r = select_top_k(&s, 2).unwrap();
        assert_eq!(r.selected_ids, ["B", "A"]);
        let scores = r.scores.unwrap();
        let (cx, cy) = (1.9 / 3.0, 1.1 / 3.0);
        let norm_c = (cx * cx + cy * cy as f64).sqrt();
        let oracle_b = (0.9 * cx + 0.1 * cy) / ((0.81f64 + 0.01).sqrt() * norm_c);
        let oracle_a = cx / norm_c;
        assert!((scores[0] - oracle_b).abs() < 1e-12);
        assert!((scores[1] - oracle_a).abs() < 1e-12);
        assert!((scores[0] - 0.9155).abs() < 1e-4 && (scores[1] - 0.8654).abs() < 1e-4);
        assert_eq!(select_top_k(&s, 10).unwrap().selected_ids, ["B", "A", "C"]);
    }

    #[test]
    fn top_k_ties_go_to_smaller_id() {
        let s = set(&[("z", &[1.0, 1.0]), ("a", &[1.0, 1.0]), ("m", &[1.0, 1.0])]);
        assert_eq!(select_top_k(&s, 3).unwrap().selected_ids, ["a", "m", "z"]);
    }

    #[test]
    fn diverse_hand_example() {
        let s = set(&[("v1", &[1.0, 0.0]), ("v2", &[0.9, 0.1]), ("v3", &[0.0, 1.0]), ("v4", &[0.7, 0.3])]);
        assert_eq!(select_diverse(&s, 2).unwrap().selected_ids, ["v3", "v1"]);
        assert_eq!(select_diverse(&s, 1).unwrap().selected_ids, ["v3"]);
    }

    #[test]
    fn diverse_filters_lowest_decile() {
        // Ten near-identical rows plus one outlier: n=11 drops exactly the outlier.
        let mut rows: Vec<(String, Vec<f64>)> = (0..10).map(|i| (format!("c{i:02}"), vec![1.0, 0.01 * i as f64])).collect();
        rows.push(("out".into(), vec![-1.0, 0.2]));
        let s = EmbeddingSet::new(
            rows.iter().map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1.clone()).collect(),
            EmbeddingSource::ProceduralElements,
        )
        .unwrap();
        let r = select_diverse(&s, 11).unwrap();
        assert_eq!(r.selected_ids.len(), 10);
        assert!(!r.selected_ids.contains(&"out".to_string()));
    }

    #[test]
    fn random_is_repeatable_and_bounded() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        assert_eq!(select_random(&ids, 4, 7).unwrap(), select_random(&ids, 4, 7).unwrap());
        let all = select_random(&ids, 20, 7).unwrap().selected_ids;
        let mut sorted = all.clone();
        sorted.sort();
        let mut expect = ids.clone();
        expect.sort();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn random_single_draw_is_uniform() {
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let pick = &select_random(&ids, 1, seed).unwrap().selected_ids[0];
            counts[pick.parse::<usize>().unwrap()] += 1;
        }
        // Binomial(10000, 1/4): sigma = sqrt(10000 * 0.25 * 0.75) ~ 43.3.
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 2500.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn head_truncation() {
        assert_eq!(truncate_head("héllo", 2), ("hé", true));
        assert_eq!(truncate_head("abc", 3), ("abc", false));
    }

    #[test]
    fn set_validation() {
        let err = EmbeddingSet::new(vec!["a".into(), "a".into()], vec![vec![1.0], vec![1.0]], EmbeddingSource::ProceduralElements);
        assert_eq!(err, Err(RetrievalError::DuplicateId("a".into())));
        let err = EmbeddingSet::new(vec!["a".into()], vec![], EmbeddingSource::ProceduralElements);
        assert!(matches!(err, Err(RetrievalError::Shape { .. })));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-1.0f64..1.0, 1..16), b in prop::collection::vec(-1.0f64..1.0, 1..16)) {
            let n = a.len().min(b.len());
            if let (Ok(x), Ok(y)) = (cosine_similarity(&a[..n], &b[..n]), cosine_similarity(&b[..n], &a[..n])) {
                prop_assert_eq!(x, y);
            }
        }

        #[test]
        fn selectors_are_pure(rows in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 4), 1..30), k in 1usize..10) {
            let s = EmbeddingSet::new((0..rows.len()).map(|i| format!("c{i:03}")).collect(), rows, EmbeddingSource::ProceduralElements).unwrap();
            prop_assert_eq!(select_top_k(&s, k).unwrap(), select_top_k(&s, k).unwrap());
            let d = select_diverse(&s, k).unwrap();
            prop_assert_eq!(&d, &select_diverse(&s, k).unwrap());
            let survivors = s.len() - (s.len() as f64 * NOISE_FRACTION).floor() as usize;
            prop_assert_eq!(d.selected_ids.len(), k.min(survivors));
        }
    }
}
