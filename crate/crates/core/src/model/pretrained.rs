//! Plain-text embedding tables (`token f1 f2 ... fd` per line).

use std::collections::HashMap;
use std::path::Path;

use crate::data::vocab::{Vocabulary, RESERVED, UNK};
use crate::error::{Error, Result};
use crate::numeric::Real;

use super::params::ParamStore;

/// Parses an embedding table. Lines with the wrong width are rejected.
pub fn parse_table(raw: &str, dim: usize, context: &str) -> Result<HashMap<String, Vec<f32>>> {
    let mut out = HashMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f32> = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("{context}:{}: {e}", lineno + 1)))?;
        if values.len() != dim || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "{context}:{}: expected {dim} finite values, found {}",
                lineno + 1,
                values.len()
            )));
        }
        out.entry(token.to_string()).or_insert(values);
    }
    Ok(out)
}

/// Overwrites embedding rows for tokens present in `table`. Vocabulary tokens
/// missing from the table copy the table's `<unk>` row when it has one and
/// otherwise keep their initialization. Returns the number of covered tokens.
pub fn apply_table<T: Real>(
    params: &mut ParamStore<T>,
    vocab: &Vocabulary,
    table: &HashMap<String, Vec<f32>>,
) -> Result<usize> {
    let id = params
        .id("embedding")
        .ok_or_else(|| Error::Config("model has no embedding table".into()))?;
    let emb = params.get_mut(id);
    let dim = emb.shape()[1];
    if emb.shape()[0] != vocab.len() {
        return Err(Error::Config(format!(
            "embedding has {} rows but the vocabulary has {} ids",
            emb.shape()[0],
            vocab.len()
        )));
    }
    let unk = table.get("<unk>").cloned();
    let data = emb.data_mut();
    let mut write = |row: usize, v: &[f32]| {
        for (d, &x) in data[row * dim..(row + 1) * dim].iter_mut().zip(v) {
            *d = T::from_f64_lossy(f64::from(x));
        }
    };
    if let Some(u) = &unk {
        write(UNK, u);
    }
    let mut covered = 0;
    for (i, tok) in vocab.tokens().iter().enumerate() {
        match table.get(tok) {
            Some(v) => {
                write(i + RESERVED, v);
                covered += 1;
            }
            None => {
                if let Some(u) = &unk {
                    write(i + RESERVED, u);
                }
            }
        }
    }
    Ok(covered)
}

pub fn load_into<T: Real>(params: &mut ParamStore<T>, vocab: &Vocabulary, path: &Path) -> Result<usize> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dim = params
        .by_name("embedding")
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::Config("model has no embedding table".into()))?;
    let table = parse_table(&raw, dim, &path.display().to_string())?;
    apply_table(params, vocab, &table)
}
