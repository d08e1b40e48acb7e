use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One line of a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub pair_id: String,
    pub question: String,
    pub answer: String,
    pub answer_id: String,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Number of records per answer id.
pub fn group_sizes(records: &[CorpusRecord]) -> HashMap<&str, usize> {
    let mut sizes = HashMap::new();
    for r in records {
        *sizes.entry(r.answer_id.as_str()).or_insert(0) += 1;
    }
    sizes
}

/// Histogram `group size -> number of groups`.
pub fn group_size_histogram(records: &[CorpusRecord]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for (_, n) in group_sizes(records) {
        *hist.entry(n).or_insert(0) += 1;
    }
    hist
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

/// Partitions whole answer groups into train/dev/test.
///
/// Groups are shuffled with `seed` and dealt out until each split holds its
/// fraction of the *pairs*. Records keep their corpus order inside a split.
pub fn split_corpus(records: &[CorpusRecord], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(Error::InvalidFractions(sum));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        members
            .entry(r.answer_id.as_str())
            .or_insert_with(|| {
                order.push(r.answer_id.as_str());
                Vec::new()
            })
            .push(i);
    }
    order.shuffle(&mut rng::stream(seed, "split", 0));

    let n = records.len() as f64;
    let cut_train = fractions[0] * n;
    let cut_dev = (fractions[0] + fractions[1]) * n;
    let mut assigned = [Vec::new(), Vec::new(), Vec::new()];
    let mut groups = [0usize; 3];
    let mut seen = 0usize;
    for id in order {
        let pos = seen as f64;
        let which = if pos < cut_train {
            0
        } else if pos < cut_dev {
            1
        } else {
            2
        };
        let m = &members[id];
        seen += m.len();
        groups[which] += 1;
        assigned[which].extend_from_slice(m);
    }
    for (k, name) in ["train", "dev", "test"].into_iter().enumerate() {
        if fractions[k] > 0.0 && groups[k] == 0 && !records.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    let take = |mut idx: Vec<usize>| -> Vec<CorpusRecord> {
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect()
    };
    let [a, b, c] = assigned;
    Ok(Splits {
        train: take(a),
        dev: take(b),
        test: take(c),
    })
}
