use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use super::BenchError;

/// Frame pairs `(i, j)` whose ground-truth path distance first reaches `length`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePairSet {
    pub length: f64,
    /// Indices into the trajectory with the actual path length between them.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl FramePairSet {
    /// For each start `i`, the first `j` whose path length from `i`, summed
    /// step by step, reaches `length`.
    pub fn build(gt: &Trajectory, length: f64) -> Self {
        let p = gt.poses();
        let steps: Vec<f64> = (0..p.len())
            .map(|j| if j == 0 { 0.0 } else { (p[j].pose.translation - p[j - 1].pose.translation).norm() })
            .collect();
        let tol = 1e-9 * length.max(1.0);
        let mut pairs = Vec::new();
        for i in 0..p.len() {
            let mut d = 0.0;
            for j in i + 1..p.len() {
                d += steps[j];
                if d >= length - tol {
                    pairs.push((i, j, d));
                    break;
                }
            }
        }
        Self { length, pairs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthError {
    pub length: f64,
    pub pairs: usize,
    /// Mean rotation error per meter, rad/m.
    pub rot: f64,
    /// Mean translation error per meter, a ratio.
    pub trans: f64,
}

fn check_aligned(gt: &Trajectory, est: &Trajectory) -> Result<(), BenchError> {
    if gt.len() != est.len() || gt.poses().iter().zip(est.poses()).any(|(a, b)| a.frame_id != b.frame_id) {
        return Err(BenchError::Config("trajectories are not aligned by frame id".into()));
    }
    Ok(())
}

/// Relative pose errors per evaluation length: for each pair, the
/// estimated relative motion against the ground-truth one,
/// `(est_i^-1 est_j)^-1 (gt_i^-1 gt_j)`, averaged and divided by the length.
pub fn relative_errors(gt: &Trajectory, est: &Trajectory, lengths: &[f64]) -> Result<Vec<LengthError>, BenchError> {
    check_aligned(gt, est)?;
    let (g, e) = (gt.poses(), est.poses());
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let set = FramePairSet::build(gt, len);
        if set.pairs.is_empty() {
            return Err(BenchError::NoPairs(len));
        }
        let (mut r, mut t) = (0.0, 0.0);
        for &(i, j, _) in &set.pairs {
            let d_gt = g[i].pose.between(&g[j].pose);
            let d_est = e[i].pose.between(&e[j].pose);
            let err = d_est.between(&d_gt);
            r += err.rotation_angle();
            t += err.translation.norm();
        }
        let n = set.pairs.len() as f64;
        out.push(LengthError {
            length: len,
            pairs: set.pairs.len(),
            rot: r / n / len,
            trans: t / n / len,
        });
    }
    Ok(out)
}

/// Ground-truth revisits among keyframes: pairs closer than `r_pos` and
/// more than `gap` keyframe ids apart. Stored symmetrically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTruth {
    pub r_pos: f64,
    pub gap: u64,
    pub pairs: BTreeSet<(u64, u64)>,
    /// Ground-truth position of every keyframe considered.
    #[serde(skip)]
    pub positions: BTreeMap<u64, Vector3<f64>>,
}

impl LoopTruth {
    pub const R_POS: f64 = 4.0;
    pub const GAP: u64 = 30;

    pub fn build(keyframes: &[(u64, Vector3<f64>)], r_pos: f64, gap: u64) -> Self {
        let mut pairs = BTreeSet::new();
        for (a, pa) in keyframes {
            for (b, pb) in keyframes {
                if a.abs_diff(*b) > gap && (pa - pb).norm() < r_pos {
                    pairs.insert((*a, *b));
                }
            }
        }
        Self {
            r_pos,
            gap,
            pairs,
            positions: keyframes.iter().copied().collect(),
        }
    }

    /// Keyframes that revisit an earlier place; the ones a per-keyframe
    /// detector is expected to flag.
    pub fn queries(&self) -> BTreeSet<u64> {
        self.pairs.iter().filter(|(a, b)| a > b).map(|(a, _)| *a).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopPr {
    pub recall: f64,
    pub precision: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub truth_queries: usize,
    pub detected_queries: usize,
    /// Precision had no declarations to divide by and is reported as 1.
    pub precision_undefined: bool,
}

/// A declared `(query, matched)` pair is a true positive when the two
/// keyframes' ground-truth positions lie within `r_pos`. Recall is over
/// truth query keyframes with at least one true-positive declaration.
pub fn loop_pr(declared: &[(u64, u64)], truth: &LoopTruth) -> LoopPr {
    let near = |a: u64, b: u64| match (truth.positions.get(&a), truth.positions.get(&b)) {
        (Some(pa), Some(pb)) => (pa - pb).norm() <= truth.r_pos,
        _ => truth.pairs.contains(&(a, b)),
    };
    let mut tp = 0;
    let mut hit = BTreeSet::new();
    for &(q, m) in declared {
        if near(q, m) {
            tp += 1;
            hit.insert(q);
        }
    }
    let queries = truth.queries();
    let detected = queries.intersection(&hit).count();
    let fp = declared.len() - tp;
    LoopPr {
        recall: if queries.is_empty() { 1.0 } else { detected as f64 / queries.len() as f64 },
        precision: if declared.is_empty() { 1.0 } else { tp as f64 / declared.len() as f64 },
        true_positives: tp,
        false_positives: fp,
        truth_queries: queries.len(),
        detected_queries: detected,
        precision_undefined: declared.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Pose;

    fn random_walk(rng: &mut impl Rng, n: usize) -> Vec<Pose> {
        let mut p = Pose::identity();
        let mut out = vec![p];
        for _ in 1..n {
            let step = Pose::from_axis_angle(
                &Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0),
                rng.random_range(-0.1..0.1),
                Vector3::new(rng.random_range(0.2..1.0), rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05)),
            );
            p = p.compose(&step);
            out.push(p);
        }
        out
    }

    /// All pairs independently: path length by direct summation, errors by
    /// explicit inverses.
    fn oracle(gt: &[Pose], est: &[Pose], len: f64) -> Option<(f64, f64)> {
        let tol = 1e-9 * len.max(1.0);
        let (mut r, mut t, mut n) = (0.0, 0.0, 0usize);
        for i in 0..gt.len() {
            let mut d = 0.0;
            for j in i + 1..gt.len() {
                d += (gt[j].translation - gt[j - 1].translation).norm();
                if d >= len - tol {
                    let err = (est[i].inverse() * est[j]).inverse() * (gt[i].inverse() * gt[j]);
                    r += err.rotation_angle();
                    t += err.translation.norm();
                    n += 1;
                    break;
                }
            }
        }
        (n > 0).then(|| (r / n as f64 / len, t / n as f64 / len))
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Trajectory::from_sequence(&random_walk(&mut rng, 200), 10.0);
        for e in relative_errors(&gt, &gt, &[5.0, 20.0]).unwrap() {
            assert_eq!((e.rot, e.trans), (0.0, 0.0));
        }
    }

    #[test]
    fn globally_transformed_estimate_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Trajectory::from_sequence(&random_walk(&mut rng, 200), 10.0);
        let g = Pose::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8), 1.1, Vector3::new(40.0, -7.0, 3.0));
        for e in relative_errors(&gt, &gt.transformed(&g), &[5.0, 20.0]).unwrap() {
            assert!(e.rot < 1e-9 && e.trans < 1e-9, "{e:?}");
        }
    }

    #[test]
    fn stretched_straight_line() {
        let gt: Vec<Pose> = (0..101).map(|i| Pose::from_translation(Vector3::new(0.5 * i as f64, 0.0, 0.0))).collect();
        let est: Vec<Pose> = (0..101).map(|i| Pose::from_translation(Vector3::new(0.505 * i as f64, 0.0, 0.0))).collect();
        let r = relative_errors(
            &Trajectory::from_sequence(&gt, 10.0),
            &Trajectory::from_sequence(&est, 10.0),
            &[5.0, 10.0, 20.0],
        )
        .unwrap();
        for e in r {
            assert!((e.trans - 0.01).abs() < 1e-6, "{e:?}");
            assert_eq!(e.rot, 0.0);
        }
    }

    #[test]
    fn length_beyond_path_has_no_pairs() {
        let gt: Vec<Pose> = (0..11).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))).collect();
        let t = Trajectory::from_sequence(&gt, 10.0);
        assert!(matches!(relative_errors(&t, &t, &[10.0, 10.5]), Err(BenchError::NoPairs(l)) if l == 10.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn matches_all_pairs_oracle(seed in any::<u64>(), n in 30usize..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_walk(&mut rng, n);
            let est: Vec<Pose> = gt
                .iter()
                .map(|p| p.compose(&Pose::from_yaw(rng.random_range(-0.02..0.02), Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.0))))
                .collect();
            let lengths = [3.0, 7.5, 12.0];
            let got = relative_errors(&Trajectory::from_sequence(&gt, 10.0), &Trajectory::from_sequence(&est, 10.0), &lengths);
            for (k, &len) in lengths.iter().enumerate() {
                match (&got, oracle(&gt, &est, len)) {
                    (Ok(v), Some((r, t))) => {
                        prop_assert_eq!(v[k].rot, r);
                        prop_assert_eq!(v[k].trans, t);
                    }
                    (Err(BenchError::NoPairs(_)), None) => {}
                    (Err(BenchError::NoPairs(l)), Some(_)) => prop_assert!(*l > len),
                    (g, o) => prop_assert!(false, "{g:?} vs {o:?}"),
                }
            }
        }
    }

    fn line_truth(n: u64) -> LoopTruth {
        // Out and back along x: keyframe k and 2n-1-k share a position.
        let kfs: Vec<(u64, Vector3<f64>)> = (0..2 * n)
            .map(|k| {
                let x = if k < n { k as f64 * 5.0 } else { (2 * n - 1 - k) as f64 * 5.0 };
                (k, Vector3::new(x, 0.0, 0.0))
            })
            .collect();
        LoopTruth::build(&kfs, LoopTruth::R_POS, 30)
    }

    #[test]
    fn loop_truth_is_symmetric_and_irreflexive() {
        let t = line_truth(40);
        for &(a, b) in &t.pairs {
            assert_ne!(a, b);
            assert!(t.pairs.contains(&(b, a)));
        }
        assert!(!t.queries().is_empty());
    }

    #[test]
    fn loop_pr_examples() {
        let t = line_truth(40);
        let declared: Vec<(u64, u64)> = t.pairs.iter().filter(|(a, b)| a > b).copied().collect();
        let pr = loop_pr(&declared, &t);
        assert_eq!((pr.recall, pr.precision), (1.0, 1.0));

        let empty = loop_pr(&[], &t);
        assert_eq!(empty.recall, 0.0);
        assert!(empty.precision_undefined);
        assert_eq!(empty.precision, 1.0);

        // Ten truth queries, nine found, plus one false declaration.
        let queries: Vec<u64> = t.queries().into_iter().collect();
        let mut small = t.clone();
        small.pairs.retain(|(a, b)| queries[..10].contains(a.max(b)));
        let q = small.queries();
        assert_eq!(q.len(), 10);
        let mut declared: Vec<(u64, u64)> = q.iter().take(9).map(|&a| (a, 2 * 40 - 1 - a)).collect();
        declared.push((q.iter().next().copied().unwrap(), 0));
        let pr = loop_pr(&declared, &small);
        assert!((pr.recall - 0.9).abs() < 1e-12);
        assert!((pr.precision - 0.9).abs() < 1e-12);
    }
}
