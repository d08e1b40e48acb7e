//! Retrieval evaluation: answer index, ranking, MRR, Recall@K and SSE.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::batch::TokenBatch;
use crate::data::corpus::{group_sizes, CorpusRecord};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, Side};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const ENCODE_CHUNK: usize = 64;
const TOP_N: usize = 10;

/// Eval-mode latent means for `texts`, l2-normalized, one row each.
pub fn encode_texts(model: &Model<f32>, vocab: &Vocabulary, texts: &[&str], side: Side) -> Result<Vec<Vec<f32>>> {
    let max_len = model.config().max_len;
    let d = model.config().latent_dim;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(ENCODE_CHUNK) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|t| vocab.encode(t, max_len)).collect();
        let tokens = TokenBatch::from_sequences(&seqs);
        let mut s = model.session();
        let enc = s.encode(&tokens, side)?;
        let mu = s.graph.value(enc.gaussian.mu);
        for (i, row) in mu.chunks(d).enumerate() {
            out.push(unit(row).ok_or(Error::ZeroNormEmbedding(out.len() + i))?);
        }
    }
    Ok(out)
}

fn unit(row: &[f32]) -> Option<Vec<f32>> {
    let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| row.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Unit-norm answer embeddings, one row per distinct answer_id.
#[derive(Clone, Debug)]
pub struct AnswerIndex {
    pub answer_ids: Vec<String>,
    pub texts: Vec<String>,
    pub rows: Vec<Vec<f32>>,
}

impl AnswerIndex {
    /// Normalizes `rows`; zero rows are rejected.
    pub fn from_embeddings(answer_ids: Vec<String>, texts: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let rows = rows
            .iter()
            .enumerate()
            .map(|(i, r)| unit(r).ok_or(Error::ZeroNormEmbedding(i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            answer_ids,
            texts,
            rows,
        })
    }

    /// Encodes the distinct answers of `records` (first occurrence wins).
    pub fn build(model: &Model<f32>, vocab: &Vocabulary, records: &[CorpusRecord]) -> Result<Self> {
        let mut seen = HashMap::new();
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        for r in records {
            if seen.insert(r.answer_id.as_str(), ()).is_none() {
                ids.push(r.answer_id.clone());
                texts.push(r.answer.clone());
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let rows = encode_texts(model, vocab, &refs, Side::Answer)?;
        Ok(Self {
            answer_ids: ids,
            texts,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn position(&self, answer_id: &str) -> Option<usize> {
        self.answer_ids.iter().position(|a| a == answer_id)
    }

    /// Cosine of `query` against every row.
    pub fn scores(&self, query: &[f32]) -> Vec<f64> {
        let qn = dot(query, query).sqrt();
        let qn = if qn > 0.0 { qn } else { 1.0 };
        self.rows.iter().map(|r| dot(query, r) / qn).collect()
    }

    /// Candidate order: descending score, ties by ascending answer_id.
    fn before(&self, scores: &[f64], i: usize, j: usize) -> Ordering {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.answer_ids[i].cmp(&self.answer_ids[j]))
    }

    /// All candidates in ranked order with their cosine scores.
    pub fn ranking(&self, query: &[f32]) -> Vec<(usize, f64)> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| self.before(&scores, i, j));
        order.into_iter().map(|i| (i, scores[i])).collect()
    }

    /// Ranks `query` whose correct answer is `correct_id`; keeps the top ten.
    pub fn rank(&self, pair_id: &str, query: &[f32], correct_id: &str) -> Result<RankedResult> {
        let correct = self
            .position(correct_id)
            .ok_or_else(|| Error::Config(format!("answer {correct_id} is not in the index")))?;
        let scores = self.scores(query);
        let rank = 1 + (0..self.len())
            .filter(|&j| j != correct && self.before(&scores, j, correct) == Ordering::Less)
            .count();
        let mut order: Vec<usize> = (0..self.len()).collect();
        let n = TOP_N.min(order.len());
        if n < order.len() {
            order.select_nth_unstable_by(n, |&i, &j| self.before(&scores, i, j));
            order.truncate(n);
        }
        order.sort_by(|&i, &j| self.before(&scores, i, j));
        Ok(RankedResult {
            pair_id: pair_id.to_string(),
            correct_answer_id: correct_id.to_string(),
            rank_of_correct: rank,
            top: order
                .into_iter()
                .map(|i| Candidate {
                    answer_id: self.answer_ids[i].clone(),
                    score: scores[i],
                })
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub pair_id: String,
    pub correct_answer_id: String,
    pub rank_of_correct: usize,
    /// Leading candidates in ranked order.
    pub top: Vec<Candidate>,
}

pub fn mrr(results: &[RankedResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let sum: f64 = results.iter().map(|r| 1.0 / r.rank_of_correct as f64).sum();
    Ok(sum / results.len() as f64)
}

pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let hits = results.iter().filter(|r| r.rank_of_correct <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean squared distance over unordered pairs within each answer group,
/// averaged over groups with at least two members.
pub fn sse(embeddings: &[Vec<f32>], groups: &[&str]) -> Result<f64> {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for members in by_group.values().filter(|m| m.len() >= 2) {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += embeddings[i]
                    .iter()
                    .zip(&embeddings[j])
                    .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                    .sum::<f64>();
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoEligibleGroups);
    }
    Ok(total / n as f64)
}

/// Pairs whose answer group has at least `min_questions` members.
pub fn subset_filter(records: &[CorpusRecord], min_questions: usize) -> Vec<CorpusRecord> {
    let sizes = group_sizes(records);
    records
        .iter()
        .filter(|r| sizes[r.answer_id.as_str()] >= min_questions)
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub recall_at: BTreeMap<String, f64>,
    /// `None` when no answer has two or more questions.
    pub sse: Option<f64>,
    pub n_questions: usize,
    pub n_answers: usize,
    pub subset_threshold: Option<usize>,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at[&k.to_string()]
    }
}

/// Ranks every question of `records` against the pool of its distinct answers.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    subset_min: Option<usize>,
) -> Result<(MetricsReport, Vec<RankedResult>)> {
    let filtered;
    let records = match subset_min {
        Some(k) => {
            filtered = subset_filter(records, k);
            &filtered[..]
        }
        None => records,
    };
    if records.is_empty() {
        return Err(Error::EmptyResults);
    }
    let index = AnswerIndex::build(model, vocab, records)?;
    let questions: Vec<&str> = records.iter().map(|r| r.question.as_str()).collect();
    let q_emb = encode_texts(model, vocab, &questions, Side::Question)?;
    let results = records
        .iter()
        .zip(&q_emb)
        .map(|(r, q)| index.rank(&r.pair_id, q, &r.answer_id))
        .collect::<Result<Vec<_>>>()?;
    let groups: Vec<&str> = records.iter().map(|r| r.answer_id.as_str()).collect();
    let sse = match sse(&q_emb, &groups) {
        Ok(v) => Some(v),
        Err(Error::NoEligibleGroups) => None,
        Err(e) => return Err(e),
    };
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| Ok((k.to_string(), recall_at_k(&results, k)?)))
        .collect::<Result<_>>()?;
    let report = MetricsReport {
        mrr: mrr(&results)?,
        recall_at,
        sse,
        n_questions: results.len(),
        n_answers: index.len(),
        subset_threshold: subset_min,
    };
    Ok((report, results))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn result(rank: usize) -> RankedResult {
        RankedResult {
            pair_id: String::new(),
            correct_answer_id: String::new(),
            rank_of_correct: rank,
            top: vec![],
        }
    }

    fn index(rows: Vec<Vec<f32>>) -> AnswerIndex {
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("a{i:02}")).collect();
        AnswerIndex::from_embeddings(ids.clone(), ids, rows).unwrap()
    }

    #[test]
    fn hand_metrics() {
        let rs: Vec<_> = [1, 2, 4].map(result).into();
        assert!((mrr(&rs).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!((recall_at_k(&rs, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(&[result(10)]).unwrap(), 0.1);
        assert_eq!(recall_at_k(&[result(3)], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[result(3)], 5).unwrap(), 1.0);
        assert!(matches!(mrr(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn rank_sorts_by_cosine() {
        // Cosines with the query (1, 0): 0.2, 0.9, 0.5.
        let rows = [0.2f32, 0.9, 0.5].map(|c| vec![c, (1.0 - c * c).sqrt()]).to_vec();
        let idx = index(rows);
        let order: Vec<usize> = idx.ranking(&[1.0, 0.0]).into_iter().map(|(i, _)| i).collect();
        assert_eq!(order, vec![1, 2, 0]);
        let r = idx.rank("q", &[1.0, 0.0], "a00").unwrap();
        assert_eq!(r.rank_of_correct, 3);
        assert_eq!(r.top.iter().map(|c| c.answer_id.as_str()).collect::<Vec<_>>(), ["a01", "a02", "a00"]);
    }

    #[test]
    fn ties_break_by_answer_id() {
        let idx = AnswerIndex::from_embeddings(
            vec!["c".into(), "a".into(), "b".into()],
            vec![String::new(); 3],
            vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 2.0]],
        )
        .unwrap();
        let order: Vec<usize> = idx.ranking(&[1.0, 0.0]).into_iter().map(|(i, _)| i).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!(idx.rank("q", &[1.0, 0.0], "c").unwrap().rank_of_correct, 3);
    }

    #[test]
    fn own_direction_ranks_first() {
        let idx = index(vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.3, 2.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(idx.rank("q", &[2.0, 4.0, 1.0], "a00").unwrap().rank_of_correct, 1);
        assert!(idx.rows.iter().all(|r| (dot(r, r) - 1.0).abs() < 1e-6));
    }

    fn brute_force_ranks(q: &[Vec<f32>], a: &[Vec<f32>], ids: &[String], correct: &[usize]) -> Vec<usize> {
        let cos = |x: &[f32], y: &[f32]| dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
        let mut ranks = Vec::new();
        for (qi, qv) in q.iter().enumerate() {
            let c = correct[qi];
            let sc = cos(qv, &a[c]);
            let mut rank = 1;
            for j in 0..a.len() {
                let s = cos(qv, &a[j]);
                if j != c && (s > sc || (s == sc && ids[j] < ids[c])) {
                    rank += 1;
                }
            }
            ranks.push(rank);
        }
        ranks
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=20);
            let m = rng.random_range(1..=30);
            let d = rng.random_range(2..=6);
            let vec = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
                (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            };
            let a: Vec<Vec<f32>> = (0..n).map(|_| vec(&mut rng)).collect();
            let q: Vec<Vec<f32>> = (0..m).map(|_| vec(&mut rng)).collect();
            let correct: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("a{i:02}")).collect();
            let idx = AnswerIndex::from_embeddings(ids.clone(), ids.clone(), a.clone()).unwrap();
            let results: Vec<_> = q
                .iter()
                .zip(&correct)
                .map(|(qv, &c)| idx.rank("q", qv, &ids[c]).unwrap())
                .collect();
            let oracle = brute_force_ranks(&q, &idx.rows, &ids, &correct);
            let got: Vec<usize> = results.iter().map(|r| r.rank_of_correct).collect();
            assert_eq!(got, oracle);
            let o_mrr = oracle.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / m as f64;
            assert_eq!(mrr(&results).unwrap(), o_mrr);
            for k in [1, 5, 10, n] {
                let o = oracle.iter().filter(|&&r| r <= k).count() as f64 / m as f64;
                assert_eq!(recall_at_k(&results, k).unwrap(), o);
            }
            assert_eq!(recall_at_k(&results, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn sse_cases() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((sse(&e, &["g", "g"]).unwrap() - 2.0).abs() < 1e-12);
        let same = vec![vec![0.6, 0.8]; 3];
        assert_eq!(sse(&same, &["g", "g", "g"]).unwrap(), 0.0);
        assert!(matches!(sse(&e, &["g", "h"]), Err(Error::NoEligibleGroups)));
    }

    #[test]
    fn sse_averages_groups() {
        // Group x: one pair at squared distance 0.2; group y: one pair at 0.4.
        let x = 0.2f32.sqrt();
        let y = 0.4f32.sqrt();
        let e = vec![vec![0.0, 0.0], vec![x, 0.0], vec![0.0, 0.0], vec![0.0, y], vec![5.0, 5.0]];
        let got = sse(&e, &["x", "x", "y", "y", "solo"]).unwrap();
        assert!((got - 0.3).abs() < 1e-6);
    }

    #[test]
    fn subset_threshold() {
        let mk = |g: &str, i: usize| CorpusRecord {
            pair_id: format!("{g}{i}"),
            question: "q".into(),
            answer: "a".into(),
            answer_id: g.into(),
        };
        let recs: Vec<_> = [("s", 3), ("m", 8), ("l", 17)]
            .iter()
            .flat_map(|&(g, n)| (0..n).map(move |i| mk(g, i)))
            .collect();
        assert_eq!(subset_filter(&recs, 1), recs);
        let kept = subset_filter(&recs, 8);
        assert_eq!(kept.len(), 25);
        assert_eq!(subset_filter(&recs, 10).len(), 17);
    }

    proptest! {
        #[test]
        fn rank_is_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 2..8),
            q in prop::collection::vec(-1.0f32..1.0, 3),
            c in 0.01f32..50.0,
        ) {
            prop_assume!(rows.iter().all(|r| dot(r, r) > 1e-4) && dot(&q, &q) > 1e-4);
            let idx = index(rows);
            let scaled: Vec<f32> = q.iter().map(|x| x * c).collect();
            let a: Vec<usize> = idx.ranking(&q).into_iter().map(|(i, _)| i).collect();
            let b: Vec<usize> = idx.ranking(&scaled).into_iter().map(|(i, _)| i).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sse_is_rotation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..10),
            angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 3),
        ) {
            prop_assume!(pts.iter().all(|p| p.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let unit_pts: Vec<Vec<f32>> = pts.iter().map(|p| {
                let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                p.iter().map(|x| (x / n) as f32).collect()
            }).collect();
            let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let rotated: Vec<Vec<f32>> = unit_pts.iter().map(|p| {
                let v = rot * nalgebra::Vector3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
                v.iter().map(|&x| x as f32).collect()
            }).collect();
            let groups: Vec<&str> = (0..unit_pts.len()).map(|i| if i % 2 == 0 { "e" } else { "o" }).collect();
            let a = sse(&unit_pts, &groups).unwrap();
            let b = sse(&rotated, &groups).unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn recall_is_monotone(ranks in prop::collection::vec(1usize..30, 1..20)) {
            let rs: Vec<_> = ranks.into_iter().map(result).collect();
            let r: Vec<f64> = RECALL_KS.iter().map(|&k| recall_at_k(&rs, k).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
