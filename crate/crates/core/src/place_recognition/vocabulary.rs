use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PlaceError;
use crate::features::{hamming, BinaryDescriptor, FeatureSet};
use crate::par::*;

/// Sparse tf-idf vector, word id to weight. L1-normalized when nonempty.
pub type BowVector = BTreeMap<u32, f64>;

const MAX_ROUNDS: usize = 20;
const RECORD_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct VocNode {
    pub center: BinaryDescriptor,
    /// Index of the first of `k` contiguous children, 0 for leaves.
    pub first_child: u32,
    /// False for degenerate centers that received no descriptors.
    pub used: bool,
    pub word: Option<u32>,
    pub idf: f64,
}

/// Hierarchical k-median tree over binary descriptors. Node 0 is the root;
/// used nodes at depth `depth` are the words.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTree {
    pub k: usize,
    pub depth: usize,
    pub nodes: Vec<VocNode>,
    /// Node index of each word.
    pub words: Vec<u32>,
}

/// Bitwise majority; ties resolve to 0.
pub fn majority(descs: &[&BinaryDescriptor]) -> BinaryDescriptor {
    let mut out = BinaryDescriptor::default();
    let n = descs.len();
    for bit in 0..256 {
        let ones = descs.iter().filter(|d| d.bit(bit)).count();
        if 2 * ones > n {
            out.set_bit(bit, true);
        }
    }
    out
}

fn nearest(centers: &[BinaryDescriptor], d: &BinaryDescriptor) -> usize {
    let mut best = (u32::MAX, 0);
    for (i, c) in centers.iter().enumerate() {
        let h = hamming(c, d);
        if h < best.0 {
            best = (h, i);
        }
    }
    best.1
}

/// Farthest-point seeding: first center uniform, then each next center drawn
/// with probability proportional to squared distance to the chosen ones.
/// Returns fewer than `k` centers when the data has fewer distinct points.
fn seed_centers(data: &[&BinaryDescriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<BinaryDescriptor> {
    let mut centers = vec![*data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|d| (hamming(d, &centers[0]) as f64).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = data.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        let c = *data[pick];
        centers.push(c);
        for (w, d) in d2.iter_mut().zip(data) {
            *w = w.min((hamming(d, &c) as f64).powi(2));
        }
    }
    centers
}

/// One k-median clustering. Returns `k` centers with a flag telling whether
/// the cluster is nonempty, and the final assignment.
fn kmedian(data: &[&BinaryDescriptor], k: usize, rng: &mut ChaCha8Rng) -> (Vec<(BinaryDescriptor, bool)>, Vec<usize>) {
    let mut centers = seed_centers(data, k, rng);
    let mut assign: Vec<usize> = data.par_iter().map(|d| nearest(&centers, d)).collect();
    for _ in 0..MAX_ROUNDS {
        let mut next = centers.clone();
        for (c, slot) in next.iter_mut().enumerate() {
            let members: Vec<&BinaryDescriptor> = data.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(d, _)| *d).collect();
            if !members.is_empty() {
                *slot = majority(&members);
            }
        }
        let reassign: Vec<usize> = data.par_iter().map(|d| nearest(&next, d)).collect();
        let stable = reassign == assign && next == centers;
        centers = next;
        assign = reassign;
        if stable {
            break;
        }
    }
    let mut out: Vec<(BinaryDescriptor, bool)> = centers.iter().enumerate().map(|(c, d)| (*d, assign.contains(&c))).collect();
    out.resize(k, (BinaryDescriptor::default(), false));
    (out, assign)
}

impl VocabularyTree {
    /// Builds a tree of branching `k` and depth `depth` from training sets.
    /// The idf of a word is `ln(N / n_w)` where `n_w` counts the sets that
    /// contain it.
    pub fn build(sets: &[Vec<BinaryDescriptor>], k: usize, depth: usize, seed: u64) -> Result<Self, PlaceError> {
        let total: usize = sets.iter().map(Vec::len).sum();
        if k < 2 || depth == 0 || total < k {
            return Err(PlaceError::InsufficientData { found: total, required: k.max(2) });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = VocabularyTree {
            k,
            depth,
            nodes: vec![VocNode {
                center: BinaryDescriptor::default(),
                first_child: 0,
                used: true,
                word: None,
                idf: 0.0,
            }],
            words: Vec::new(),
        };
        let all: Vec<&BinaryDescriptor> = sets.iter().flatten().collect();
        // Breadth-first so node layout and rng consumption are fixed by seed.
        let mut frontier = vec![(0usize, all)];
        for _level in 0..depth {
            let mut next = Vec::new();
            for (node, data) in frontier {
                let first = tree.nodes.len();
                tree.nodes[node].first_child = first as u32;
                let (centers, assign) = kmedian(&data, k, &mut rng);
                let mut groups: Vec<Vec<&BinaryDescriptor>> = vec![Vec::new(); k];
                for (d, a) in data.iter().zip(&assign) {
                    groups[*a].push(d);
                }
                for (c, (center, used)) in centers.into_iter().enumerate() {
                    tree.nodes.push(VocNode {
                        center,
                        first_child: 0,
                        used,
                        word: None,
                        idf: 0.0,
                    });
                    if used {
                        next.push((first + c, std::mem::take(&mut groups[c])));
                    }
                }
            }
            frontier = next;
        }
        for (node, _) in &frontier {
            tree.nodes[*node].word = Some(tree.words.len() as u32);
            tree.words.push(*node as u32);
        }
        let n = sets.len() as f64;
        let mut doc_freq = vec![0usize; tree.words.len()];
        for set in sets {
            let mut seen: Vec<u32> = set.iter().map(|d| tree.word_of(d)).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                doc_freq[w as usize] += 1;
            }
        }
        for (w, &node) in tree.words.iter().enumerate() {
            tree.nodes[node as usize].idf = if doc_freq[w] > 0 { (n / doc_freq[w] as f64).ln() } else { 0.0 };
        }
        Ok(tree)
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn idf(&self, word: u32) -> f64 {
        self.nodes[self.words[word as usize] as usize].idf
    }

    /// Greedy descent: nearest used child by Hamming distance, lower index on ties.
    pub fn word_of(&self, d: &BinaryDescriptor) -> u32 {
        let mut node = 0usize;
        loop {
            if let Some(w) = self.nodes[node].word {
                return w;
            }
            let first = self.nodes[node].first_child as usize;
            let mut best = (u32::MAX, first);
            for c in first..first + self.k {
                let n = &self.nodes[c];
                if !n.used {
                    continue;
                }
                let h = hamming(&n.center, d);
                if h < best.0 {
                    best = (h, c);
                }
            }
            node = best.1;
        }
    }

    /// tf-idf vector with tf = count / |features|, L1-normalized. Words with
    /// zero weight are dropped.
    pub fn quantize(&self, features: &FeatureSet) -> BowVector {
        self.quantize_descriptors(&features.descriptors)
    }

    pub fn quantize_descriptors(&self, descs: &[BinaryDescriptor]) -> BowVector {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let words: Vec<u32> = descs.par_iter().map(|d| self.word_of(d)).collect();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let n = descs.len() as f64;
        let mut v: BowVector = counts
            .into_iter()
            .map(|(w, c)| (w, c as f64 / n * self.idf(w)))
            .filter(|(_, x)| *x > 0.0)
            .collect();
        let sum: f64 = v.values().sum();
        if sum > 0.0 {
            for x in v.values_mut() {
                *x /= sum;
            }
        }
        v
    }

    /// Header `k`, `depth`, node count as little-endian `u32`, then 50-byte
    /// node records: center (32), first child `u32`, flags `u8`, padding `u8`,
    /// word id `u32` (`u32::MAX` if none), idf `f64`.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for x in [self.k as u32, self.depth as u32, self.nodes.len() as u32] {
            w.write_all(&x.to_le_bytes())?;
        }
        for n in &self.nodes {
            let mut rec = [0u8; RECORD_LEN];
            rec[..32].copy_from_slice(&n.center.to_bytes());
            rec[32..36].copy_from_slice(&n.first_child.to_le_bytes());
            rec[36] = n.used as u8 | (n.word.is_some() as u8) << 1;
            rec[38..42].copy_from_slice(&n.word.unwrap_or(u32::MAX).to_le_bytes());
            rec[42..50].copy_from_slice(&n.idf.to_le_bytes());
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + RECORD_LEN * self.nodes.len());
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, PlaceError> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        let field = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (k, depth, count) = (field(0), field(1), field(2));
        let mut nodes = Vec::with_capacity(count.min(1 << 20));
        let mut words = Vec::new();
        for i in 0..count {
            let mut rec = [0u8; RECORD_LEN];
            r.read_exact(&mut rec)?;
            let word = u32::from_le_bytes(rec[38..42].try_into().unwrap());
            let has_word = rec[36] & 2 != 0;
            if has_word {
                if word as usize != words.len() {
                    return Err(PlaceError::Format(format!("node {i}: word ids out of order")));
                }
                words.push(i as u32);
            }
            nodes.push(VocNode {
                center: BinaryDescriptor::from_bytes(rec[..32].try_into().unwrap()),
                first_child: u32::from_le_bytes(rec[32..36].try_into().unwrap()),
                used: rec[36] & 1 != 0,
                word: has_word.then_some(word),
                idf: f64::from_le_bytes(rec[42..50].try_into().unwrap()),
            });
        }
        let tree = VocabularyTree { k, depth, nodes, words };
        tree.validate()?;
        Ok(tree)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PlaceError> {
        let mut cur = std::io::Cursor::new(bytes);
        let tree = Self::read(&mut cur)?;
        if cur.position() as usize != bytes.len() {
            return Err(PlaceError::Format("trailing bytes".into()));
        }
        Ok(tree)
    }

    fn validate(&self) -> Result<(), PlaceError> {
        let bad = |m: String| Err(PlaceError::Format(m));
        if self.nodes.is_empty() || self.k < 2 {
            return bad("empty tree".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.word.is_some() || !n.used {
                continue;
            }
            let first = n.first_child as usize;
            if first <= i || first + self.k > self.nodes.len() {
                return bad(format!("node {i}: child range out of bounds"));
            }
            if !self.nodes[first..first + self.k].iter().any(|c| c.used) {
                return bad(format!("node {i}: no used child"));
            }
        }
        if self.nodes.iter().any(|n| !(n.idf >= 0.0)) {
            return bad("negative idf".into());
        }
        Ok(())
    }
}
