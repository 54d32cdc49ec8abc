//! Corner detection, oriented binary descriptors and matching on raster
//! images.

mod detect;
mod matching;
mod pattern;

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pixel, Point3};

pub use detect::{detect, fast_corners, lift, DetectorConfig, GrayImage};
pub use matching::{
    match_features, match_with_points, ransac_filter, MatchConfig, RansacConfig,
};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image is {width}x{height}, smaller than the 32x32 minimum")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("only {found} features after relaxing the threshold (need {required})")]
    TooFewFeatures { found: usize, required: usize },
    #[error("best consensus has {found} inliers (need {required})")]
    NoConsensus { found: usize, required: usize },
    #[error("malformed feature blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A detected corner; `u`, `v` are full-resolution pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    pub u: f64,
    pub v: f64,
    pub score: f32,
    pub level: u8,
    /// Intensity-centroid orientation, radians.
    pub angle: f32,
}

impl Corner {
    /// Nearest full-resolution pixel.
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.u.round().max(0.0) as u32, self.v.round().max(0.0) as u32)
    }
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub const BITS: usize = 256;

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, on: bool) {
        let mask = 1u64 << (i % 64);
        if on {
            self.0[i / 64] |= mask;
        } else {
            self.0[i / 64] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (chunk, word) in out.chunks_exact_mut(8).zip(self.0) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (w, chunk) in words.iter_mut().zip(b.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        Self(words)
    }
}

/// Number of differing bits.
#[inline]
pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Corners with their descriptors and optional 3D lifts, index-aligned.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub corners: Vec<Corner>,
    pub descriptors: Vec<BinaryDescriptor>,
    /// Camera-frame point behind each corner, when its pixel is lit.
    pub points3d: Vec<Option<Point3>>,
}

/// One accepted correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub hamming: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks index validity and one-to-one use of every index.
    pub fn is_valid_for(&self, len_a: usize, len_b: usize) -> bool {
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        self.pairs.iter().all(|m| {
            m.index_a < len_a && m.index_b < len_b && seen_a.insert(m.index_a) && seen_b.insert(m.index_b)
        })
    }
}

const RECORD_LEN: usize = 8 + 8 + 4 + 1 + 4 + 32 + 1 + 24;

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.corners.len() == self.descriptors.len() && self.corners.len() == self.points3d.len()
    }

    pub fn push(&mut self, corner: Corner, desc: BinaryDescriptor, point: Option<Point3>) {
        self.corners.push(corner);
        self.descriptors.push(desc);
        self.points3d.push(point);
    }

    /// Number of features that carry a 3D point.
    pub fn lifted_count(&self) -> usize {
        self.points3d.iter().filter(|p| p.is_some()).count()
    }

    /// Keeps only the features for which `keep` returns true.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> FeatureSet {
        let mut out = FeatureSet::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.push(self.corners[i], self.descriptors[i], self.points3d[i]);
        }
        out
    }

    /// Binary blob: `u32` count, then fixed 82-byte little-endian records
    /// `(f64 u, f64 v, f32 score, u8 level, f32 angle, [u8; 32] descriptor,
    /// u8 has_point, f64 x, f64 y, f64 z)`.
    pub fn write_blob<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for i in 0..self.len() {
            let c = &self.corners[i];
            let mut rec = Vec::with_capacity(RECORD_LEN);
            rec.extend_from_slice(&c.u.to_le_bytes());
            rec.extend_from_slice(&c.v.to_le_bytes());
            rec.extend_from_slice(&c.score.to_le_bytes());
            rec.push(c.level);
            rec.extend_from_slice(&c.angle.to_le_bytes());
            rec.extend_from_slice(&self.descriptors[i].to_bytes());
            let p = self.points3d[i];
            rec.push(p.is_some() as u8);
            let p = p.unwrap_or(Point3::origin());
            for c in [p.x, p.y, p.z] {
                rec.extend_from_slice(&c.to_le_bytes());
            }
            debug_assert_eq!(rec.len(), RECORD_LEN);
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.len() * RECORD_LEN);
        self.write_blob(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut out = FeatureSet::default();
        let mut rec = [0u8; RECORD_LEN];
        for _ in 0..n {
            r.read_exact(&mut rec)?;
            let f64_at = |o: usize| f64::from_le_bytes(rec[o..o + 8].try_into().unwrap());
            let f32_at = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            let corner = Corner {
                u: f64_at(0),
                v: f64_at(8),
                score: f32_at(16),
                level: rec[20],
                angle: f32_at(21),
            };
            let desc = BinaryDescriptor::from_bytes(rec[25..57].try_into().unwrap());
            let point = match rec[57] {
                0 => None,
                1 => Some(Point3::new(f64_at(58), f64_at(66), f64_at(74))),
                other => return Err(FeatureError::Format(format!("bad point flag {other}"))),
            };
            out.push(corner, desc, point);
        }
        Ok(out)
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self, FeatureError> {
        Self::read_blob(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
        (0..256).filter(|&i| a.bit(i) != b.bit(i)).count() as u32
    }

    fn random_desc(rng: &mut impl Rng) -> BinaryDescriptor {
        BinaryDescriptor([rng.random(), rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn hamming_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_desc(&mut rng);
        assert_eq!(hamming(&d, &d), 0);
        let mut e = d;
        for bit in [3, 77, 200] {
            e.flip(bit);
        }
        assert_eq!(hamming(&d, &e), 3);
        for _ in 0..200 {
            let (a, b) = (random_desc(&mut rng), random_desc(&mut rng));
            assert_eq!(hamming(&a, &b), naive_hamming(&a, &b));
        }
    }

    fn desc_strategy() -> impl Strategy<Value = BinaryDescriptor> {
        prop::array::uniform4(any::<u64>()).prop_map(BinaryDescriptor)
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a in desc_strategy(), b in desc_strategy(), c in desc_strategy()) {
            prop_assert_eq!(hamming(&a, &a), 0);
            prop_assert_eq!(hamming(&a, &b), hamming(&b, &a));
            prop_assert_eq!(hamming(&a, &b) == 0, a == b);
            prop_assert!(hamming(&a, &c) <= hamming(&a, &b) + hamming(&b, &c));
        }

        #[test]
        fn blob_round_trip(n in 0usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fs = FeatureSet::default();
            for i in 0..n {
                let corner = Corner {
                    u: rng.random_range(0.0..300.0),
                    v: rng.random_range(0.0..300.0),
                    score: rng.random_range(0.0..100.0),
                    level: (i % 8) as u8,
                    angle: rng.random_range(-3.0..3.0),
                };
                let p = (i % 3 != 0).then(|| Point3::new(rng.random(), rng.random(), rng.random()));
                fs.push(corner, random_desc(&mut rng), p);
            }
            let blob = fs.to_blob();
            prop_assert_eq!(blob.len(), 4 + n * RECORD_LEN);
            prop_assert_eq!(FeatureSet::from_blob(&blob).unwrap(), fs);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut blob = 3u32.to_le_bytes().to_vec();
        blob.extend_from_slice(&[0u8; 10]);
        assert!(FeatureSet::from_blob(&blob).is_err());
    }
}
