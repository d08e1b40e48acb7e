use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

use super::corpus::CorpusRecord;
use super::vocab::{Vocabulary, BOS, PAD};

/// A tokenized question/answer pair; stored pairs are positives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub pair_id: String,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub answer_id: String,
}

pub fn encode_pairs(records: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<QaPair>> {
    records
        .iter()
        .map(|r| {
            let question = vocab.encode(&r.question, max_len);
            let answer = vocab.encode(&r.answer, max_len);
            if question.len() < 2 || answer.len() < 2 {
                return Err(Error::EmptyText(r.pair_id.clone()));
            }
            Ok(QaPair {
                pair_id: r.pair_id.clone(),
                question,
                answer,
                answer_id: r.answer_id.clone(),
            })
        })
        .collect()
}

/// Right-padded token ids, batch-major (`ids[b * len + t]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * len];
        let mut mask = vec![false; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.as_ref().iter().enumerate() {
                ids[b * len + t] = id;
                mask[b * len + t] = true;
            }
        }
        Self {
            batch,
            len,
            ids,
            mask,
        }
    }

    fn to_time_major<X: Copy>(&self, v: &[X]) -> Vec<X> {
        let mut out = Vec::with_capacity(v.len());
        for t in 0..self.len {
            for b in 0..self.batch {
                out.push(v[b * self.len + t]);
            }
        }
        out
    }

    /// Ids reordered so that row `t * batch + b` holds step `t` of sequence `b`.
    pub fn time_major_ids(&self) -> Vec<usize> {
        self.to_time_major(&self.ids)
    }

    pub fn time_major_mask(&self) -> Vec<bool> {
        self.to_time_major(&self.mask)
    }

    /// Teacher-forcing inputs: BOS followed by the targets shifted right, time-major.
    pub fn decoder_inputs_time_major(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ids.len());
        for t in 0..self.len {
            for b in 0..self.batch {
                out.push(if t == 0 { BOS } else { self.ids[b * self.len + t - 1] });
            }
        }
        out
    }

    pub fn row(&self, b: usize) -> Vec<usize> {
        (0..self.len)
            .filter(|&t| self.mask[b * self.len + t])
            .map(|t| self.ids[b * self.len + t])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub questions: TokenBatch,
    pub answers: TokenBatch,
    pub answer_ids: Vec<String>,
    pub pair_indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[QaPair], indices: &[usize]) -> Self {
        let qs: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].question.as_slice()).collect();
        let ans: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].answer.as_slice()).collect();
        Self {
            questions: TokenBatch::from_sequences(&qs),
            answers: TokenBatch::from_sequences(&ans),
            answer_ids: indices.iter().map(|&i| pairs[i].answer_id.clone()).collect(),
            pair_indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.pair_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_indices.is_empty()
    }
}

/// Shuffles pairs by `(seed, epoch)` and packs them into batches whose rows
/// all have distinct answer ids, so every off-diagonal cell is a true negative.
///
/// Every pair appears once as a regular row. When the remaining pairs cannot
/// fill a batch with distinct answers (e.g. one dominant answer group), the
/// batch is topped up with re-drawn pairs from other groups. Batches hold
/// `min(batch_size, #answer groups)` rows.
pub fn make_batches(pairs: &[QaPair], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let groups: HashSet<&str> = pairs.iter().map(|p| p.answer_id.as_str()).collect();
    if groups.len() < 2 {
        return Err(Error::TooFewAnswerGroups(groups.len()));
    }
    let width = batch_size.min(groups.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, "batch", epoch));
    let mut fill: Vec<usize> = (0..pairs.len()).collect();
    fill.shuffle(&mut rng::stream(seed, "batch-fill", epoch));

    let mut used = vec![false; order.len()];
    let mut head = 0;
    let mut fill_cursor = 0;
    let mut batches = Vec::with_capacity(pairs.len().div_ceil(width));
    while head < order.len() {
        let mut rows = Vec::with_capacity(width);
        let mut seen: HashMap<&str, ()> = HashMap::with_capacity(width);
        for pos in head..order.len() {
            if rows.len() == width {
                break;
            }
            let i = order[pos];
            if used[pos] || seen.contains_key(pairs[i].answer_id.as_str()) {
                continue;
            }
            used[pos] = true;
            seen.insert(pairs[i].answer_id.as_str(), ());
            rows.push(i);
        }
        let mut scanned = 0;
        while rows.len() < width && scanned < fill.len() {
            let i = fill[fill_cursor % fill.len()];
            fill_cursor += 1;
            scanned += 1;
            if seen.insert(pairs[i].answer_id.as_str(), ()).is_none() {
                rows.push(i);
            }
        }
        while head < used.len() && used[head] {
            head += 1;
        }
        batches.push(Batch::from_pairs(pairs, &rows));
    }
    Ok(batches)
}
