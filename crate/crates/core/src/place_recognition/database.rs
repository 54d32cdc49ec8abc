use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{BowVector, PlaceError};

/// `1 - ||a - b||_1 / 2` over the sparse union, clamped to `[0, 1]`.
pub fn bow_score(a: &BowVector, b: &BowVector) -> f64 {
    let words: BTreeSet<&u32> = a.keys().chain(b.keys()).collect();
    let l1: f64 = words
        .into_iter()
        .map(|w| (a.get(w).copied().unwrap_or(0.0) - b.get(w).copied().unwrap_or(0.0)).abs())
        .sum();
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

/// BOW entries of local-map images with an inverted index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowDatabase {
    entries: BTreeMap<u64, BowVector>,
    /// Word to `(map id, weight)`, sorted by map id.
    inverted: BTreeMap<u32, Vec<(u64, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    id: u64,
    words: Vec<(u32, f64)>,
}

impl BowDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entries(&self) -> &BTreeMap<u64, BowVector> {
        &self.entries
    }

    pub fn inverted(&self) -> &BTreeMap<u32, Vec<(u64, f64)>> {
        &self.inverted
    }

    pub fn add(&mut self, id: u64, bow: BowVector) -> Result<(), PlaceError> {
        if self.entries.contains_key(&id) {
            return Err(PlaceError::DuplicateId(id));
        }
        for (&w, &x) in &bow {
            let list = self.inverted.entry(w).or_default();
            let pos = list.partition_point(|(i, _)| *i < id);
            list.insert(pos, (id, x));
        }
        self.entries.insert(id, bow);
        Ok(())
    }

    pub fn remove(&mut self, id: u64) -> Result<BowVector, PlaceError> {
        let bow = self.entries.remove(&id).ok_or(PlaceError::UnknownId(id))?;
        for w in bow.keys() {
            if let Some(list) = self.inverted.get_mut(w) {
                list.retain(|(i, _)| *i != id);
                if list.is_empty() {
                    self.inverted.remove(w);
                }
            }
        }
        Ok(bow)
    }

    /// Inverted index recomputed from the entries alone.
    pub fn rebuilt_index(&self) -> BTreeMap<u32, Vec<(u64, f64)>> {
        let mut inv: BTreeMap<u32, Vec<(u64, f64)>> = BTreeMap::new();
        for (&id, bow) in &self.entries {
            for (&w, &x) in bow {
                inv.entry(w).or_default().push((id, x));
            }
        }
        inv
    }

    pub fn rebuild(&mut self) {
        self.inverted = self.rebuilt_index();
    }

    /// Replaces every entry through `f`, e.g. after a vocabulary retrain.
    pub fn requantize(&mut self, mut f: impl FnMut(u64) -> BowVector) {
        for (id, bow) in self.entries.iter_mut() {
            *bow = f(*id);
        }
        self.rebuild();
    }

    /// Entries sharing at least one word with `bow`, scored with
    /// [`bow_score`], best first and lower id on ties.
    pub fn query(&self, bow: &BowVector, max_results: usize) -> Vec<(u64, f64)> {
        let mut touched = BTreeSet::new();
        for w in bow.keys() {
            if let Some(list) = self.inverted.get(w) {
                touched.extend(list.iter().map(|(id, _)| *id));
            }
        }
        let mut scored: Vec<(u64, f64)> = touched.into_iter().map(|id| (id, bow_score(bow, &self.entries[&id]))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(max_results);
        scored
    }

    /// One JSON object per line: `{"id": .., "words": [[word, weight], ..]}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), PlaceError> {
        for (&id, bow) in &self.entries {
            let e = JsonEntry {
                id,
                words: bow.iter().map(|(&k, &v)| (k, v)).collect(),
            };
            serde_json::to_writer(&mut w, &e).map_err(|e| PlaceError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, PlaceError> {
        let mut db = Self::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: JsonEntry = serde_json::from_str(&line).map_err(|e| PlaceError::Format(e.to_string()))?;
            db.add(e.id, e.words.into_iter().collect())?;
        }
        Ok(db)
    }
}
