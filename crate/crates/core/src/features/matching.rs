use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hamming, FeatureError, FeatureSet, Match, MatchSet};
use crate::geometry::{Point3, Pose};
use crate::odometry::estimate_rigid_transform;
use crate::par::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub max_dist: u32,
    /// Best over second-best distance must not exceed this, on both sides.
    pub ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_dist: 64,
            ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_3d: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_3d: 0.3,
            min_inliers: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Nearest {
    index: usize,
    best: u32,
    second: u32,
}

fn nearest(from: &FeatureSet, to: &FeatureSet) -> Vec<Nearest> {
    from.descriptors
        .par_iter()
        .map(|d| {
            let mut n = Nearest {
                index: usize::MAX,
                best: u32::MAX,
                second: u32::MAX,
            };
            for (j, e) in to.descriptors.iter().enumerate() {
                let h = hamming(d, e);
                if h < n.best {
                    n.second = n.best;
                    n.best = h;
                    n.index = j;
                } else if h < n.second {
                    n.second = h;
                }
            }
            n
        })
        .collect()
}

fn distinctive(n: &Nearest, ratio: f64) -> bool {
    // A lone candidate has no competitor; an exact tie is ambiguous.
    n.second == u32::MAX || (n.best < n.second && n.best as f64 <= ratio * n.second as f64)
}

/// Mutual nearest neighbours under Hamming distance, gated by `max_dist`
/// and a ratio test applied from both sides, so that swapping the
/// arguments yields the same pairs.
pub fn match_features(a: &FeatureSet, b: &FeatureSet, cfg: &MatchConfig) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let pairs = ab
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            let back = &ba[n.index];
            (back.index == i
                && n.best <= cfg.max_dist
                && distinctive(n, cfg.ratio)
                && distinctive(back, cfg.ratio))
                .then_some(Match {
                    index_a: i,
                    index_b: n.index,
                    hamming: n.best,
                })
        })
        .collect();
    MatchSet { pairs }
}

/// Matches restricted to features lifted to 3D on both sides, with the
/// point lists aligned to the returned pairs.
pub fn match_with_points(
    a: &FeatureSet,
    b: &FeatureSet,
    cfg: &MatchConfig,
) -> (MatchSet, Vec<Point3>, Vec<Point3>) {
    let all = match_features(a, b, cfg);
    let mut out = MatchSet::default();
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for m in all.pairs {
        if let (Some(p), Some(q)) = (a.points3d[m.index_a], b.points3d[m.index_b]) {
            out.pairs.push(m);
            pa.push(p);
            pb.push(q);
        }
    }
    (out, pa, pb)
}

fn inliers_of(pose: &Pose, pa: &[Point3], pb: &[Point3], thr: f64) -> Vec<usize> {
    (0..pa.len())
        .filter(|&i| (pose.apply(&pa[i]) - pb[i]).norm() < thr)
        .collect()
}

fn fit(idx: &[usize], pa: &[Point3], pb: &[Point3]) -> Option<Pose> {
    let p: Vec<Point3> = idx.iter().map(|&i| pa[i]).collect();
    let q: Vec<Point3> = idx.iter().map(|&i| pb[i]).collect();
    estimate_rigid_transform(&p, &q).ok()
}

/// Keeps the largest subset of `matches` explained by one rigid motion
/// taking `pts_a[k]` to `pts_b[k]`.
///
/// Hypotheses come from seeded minimal samples. The winning consensus is
/// refit on its inliers and then trimmed until the refit transform keeps
/// every retained pair under `inlier_3d`.
pub fn ransac_filter(
    matches: &MatchSet,
    pts_a: &[Point3],
    pts_b: &[Point3],
    cfg: &RansacConfig,
) -> Result<MatchSet, FeatureError> {
    assert_eq!(matches.len(), pts_a.len());
    assert_eq!(matches.len(), pts_b.len());
    let n = matches.len();
    let no_consensus = |found| FeatureError::NoConsensus {
        found,
        required: cfg.min_inliers,
    };
    if n < 3 {
        return Err(no_consensus(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<Vec<usize>> = (0..cfg.iterations)
        .map(|_| rand::seq::index::sample(&mut rng, n, 3).into_vec())
        .collect();
    let scored: Vec<(usize, Vec<usize>)> = samples
        .par_iter()
        .enumerate()
        .filter_map(|(k, s)| {
            let pose = fit(s, pts_a, pts_b)?;
            Some((k, inliers_of(&pose, pts_a, pts_b, cfg.inlier_3d)))
        })
        .collect();
    let mut best: Vec<usize> = Vec::new();
    for (_, inl) in scored {
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < 3 {
        return Err(no_consensus(best.len()));
    }
    // Grow while the refit explains more pairs.
    for _ in 0..5 {
        let Some(pose) = fit(&best, pts_a, pts_b) else { break };
        let grown = inliers_of(&pose, pts_a, pts_b, cfg.inlier_3d);
        if grown.len() <= best.len() {
            break;
        }
        best = grown;
    }
    // Shrink until self-consistent; terminates since the set only loses pairs.
    loop {
        let Some(pose) = fit(&best, pts_a, pts_b) else {
            return Err(no_consensus(0));
        };
        let kept: Vec<usize> = best
            .iter()
            .copied()
            .filter(|&i| (pose.apply(&pts_a[i]) - pts_b[i]).norm() < cfg.inlier_3d)
            .collect();
        if kept.len() == best.len() {
            break;
        }
        if kept.len() < 3 {
            return Err(no_consensus(kept.len()));
        }
        best = kept;
    }
    if best.len() < cfg.min_inliers {
        return Err(no_consensus(best.len()));
    }
    Ok(MatchSet {
        pairs: best.iter().map(|&i| matches.pairs[i]).collect(),
    })
}
