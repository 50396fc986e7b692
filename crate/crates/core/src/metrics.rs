//! Evaluation metrics over scored trial sets: equal error rate, minimum
//! detection cost, the calibration cost, and DET-curve operating points.
//!
//! All sweeps share one convention: a trial is *accepted* when its score is
//! greater than or equal to the threshold, and candidate thresholds are the
//! observed scores plus the two infinities — exact optima for the
//! step-constant error curves these metrics minimize over.

use crate::error::{Error, Result};
use crate::tape::softplus;

/// Scores paired with ground-truth labels (`true` = target trial).
#[derive(Debug, Clone)]
pub struct ScoredTrialSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredTrialSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput);
        }
        if scores.len() != labels.len() {
            return Err(Error::Misaligned(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("trial score at index {i}"),
            });
        }
        Ok(ScoredTrialSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_target(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.labels.len() - self.n_target()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.n_target() == 0 || self.n_nontarget() == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }
}

/// Detection-cost parameters. Defaults: 1% target prior, unit costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidConfig("p_target must be in (0, 1)".into()));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("costs must be > 0".into()));
        }
        Ok(())
    }
}

/// One DET operating point: the error rates of "accept iff score >=
/// threshold".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub p_fa: f64,
    pub p_miss: f64,
    pub threshold: f64,
}

/// Full threshold sweep, sorted by ascending threshold.
///
/// The first point is the accept-everything end `(P_fa, P_miss) = (1, 0)`
/// at threshold −∞; the last is the reject-everything end `(0, 1)` at +∞.
/// One point per distinct-score boundary in between, so a set with `n`
/// distinct scores yields at most `n + 1` points.
pub fn det_points(set: &ScoredTrialSet) -> Result<Vec<DetPoint>> {
    set.require_both_classes()?;
    let n_tar = set.n_target() as f64;
    let n_non = set.n_nontarget() as f64;

    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .expect("scores validated finite")
    });

    let mut points = vec![DetPoint {
        p_fa: 1.0,
        p_miss: 0.0,
        threshold: f64::NEG_INFINITY,
    }];
    // Walking thresholds upward: each distinct score boundary moves every
    // trial below it from "accepted" to "rejected".
    let mut missed_tar = 0usize;
    let mut rejected_non = 0usize;
    let mut i = 0;
    while i < order.len() {
        let boundary = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == boundary {
            if set.labels[order[i]] {
                missed_tar += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        let (p_fa, p_miss, threshold) = if i < order.len() {
            (
                (n_non - rejected_non as f64) / n_non,
                missed_tar as f64 / n_tar,
                set.scores[order[i]],
            )
        } else {
            (0.0, 1.0, f64::INFINITY)
        };
        points.push(DetPoint {
            p_fa,
            p_miss,
            threshold,
        });
    }
    Ok(points)
}

/// Equal error rate: the common error value where the false-accept and
/// miss curves cross, linearly interpolated between the two adjacent
/// operating points straddling the crossing.
pub fn eer(set: &ScoredTrialSet) -> Result<f64> {
    let points = det_points(set)?;
    Ok(eer_from_points(&points))
}

/// The interpolation step, shared with the self-consistency tests.
pub fn eer_from_points(points: &[DetPoint]) -> f64 {
    // d = P_fa − P_miss runs monotonically from +1 down to −1.
    for w in points.windows(2) {
        let d0 = w[0].p_fa - w[0].p_miss;
        let d1 = w[1].p_fa - w[1].p_miss;
        if d1 <= 0.0 {
            if d0 == d1 {
                return w[0].p_fa;
            }
            let alpha = d0 / (d0 - d1);
            return w[0].p_fa + alpha * (w[1].p_fa - w[0].p_fa);
        }
    }
    // Unreachable: the final point always has d = −1.
    1.0
}

/// Minimum normalized detection cost over all thresholds:
/// `min_t (c_miss·p_tgt·P_miss + c_fa·(1−p_tgt)·P_fa) / min(c_miss·p_tgt,
/// c_fa·(1−p_tgt))`. The two degenerate endpoints cap it at 1.
pub fn min_dcf(set: &ScoredTrialSet, p: &DcfParams) -> Result<f64> {
    p.validate()?;
    let points = det_points(set)?;
    let miss_cost = p.c_miss * p.p_target;
    let fa_cost = p.c_fa * (1.0 - p.p_target);
    let norm = miss_cost.min(fa_cost);
    let best = points
        .iter()
        .map(|pt| miss_cost * pt.p_miss + fa_cost * pt.p_fa)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// Calibration cost of the scores read as log-likelihood ratios:
/// `(1/(2 ln 2)) · [mean softplus(−s) over targets + mean softplus(s) over
/// non-targets]`. Zero only for perfectly calibrated, perfectly separating
/// scores; exactly 1 for all-zero scores.
pub fn cllr_metric(set: &ScoredTrialSet) -> Result<f64> {
    set.require_both_classes()?;
    let mut tar = 0.0;
    let mut non = 0.0;
    for (s, &l) in set.scores.iter().zip(&set.labels) {
        if l {
            tar += softplus(-s);
        } else {
            non += softplus(*s);
        }
    }
    let n_tar = set.n_target() as f64;
    let n_non = set.n_nontarget() as f64;
    Ok((tar / n_tar + non / n_non) / (2.0 * std::f64::consts::LN_2))
}

/// Format with 9 significant digits in plain decimal, the fixed width used
/// by every emitted score and metric.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0.00000000".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

/// Render DET points as CSV: `p_fa,p_miss,threshold`, one row per point.
pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("p_fa,p_miss,threshold\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            format_sig9(p.p_fa),
            format_sig9(p.p_miss),
            format_sig9(p.threshold)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};

    fn set(tar: &[f64], non: &[f64]) -> ScoredTrialSet {
        let mut scores = tar.to_vec();
        scores.extend_from_slice(non);
        let mut labels = vec![true; tar.len()];
        labels.extend(vec![false; non.len()]);
        ScoredTrialSet::new(scores, labels).unwrap()
    }

    #[test]
    fn eer_perfect_separation_is_zero() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer(&s).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, &DcfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn eer_random_labels_near_half() {
        let mut rng = Rng::new(101, Stream::Synth);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        let s = ScoredTrialSet::new(scores, labels).unwrap();
        let e = eer(&s).unwrap();
        assert!((e - 0.5).abs() < 0.02, "random-label EER was {e}");
    }

    #[test]
    fn eer_inverted_pair_hits_one() {
        let s = set(&[0.6], &[0.7]);
        let e = eer(&s).unwrap();
        assert!(e >= 0.5);
        assert_eq!(e, 1.0);
    }

    #[test]
    fn eer_errors_on_single_class() {
        let s = ScoredTrialSet::new(vec![0.1, 0.2], vec![true, true]).unwrap();
        assert!(matches!(eer(&s), Err(Error::SingleClass)));
        assert!(matches!(
            min_dcf(&s, &DcfParams::default()),
            Err(Error::SingleClass)
        ));
        assert!(matches!(cllr_metric(&s), Err(Error::SingleClass)));
        assert!(matches!(det_points(&s), Err(Error::SingleClass)));
    }

    #[test]
    fn min_dcf_never_exceeds_default_decision() {
        let mut rng = Rng::new(102, Stream::Synth);
        for _ in 0..20 {
            let n = 2 + rng.below(50);
            let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredTrialSet::new(scores, labels).unwrap();
            let d = min_dcf(&s, &DcfParams::default()).unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&d), "minDCF {d} out of envelope");
        }
    }

    #[test]
    fn min_dcf_matches_threshold_enumeration() {
        // Six fixed trials; the oracle enumerates every midpoint threshold
        // plus the two infinities and counts errors directly.
        let tar = [0.82, 0.41, 0.67];
        let non = [0.55, 0.12, 0.44];
        let s = set(&tar, &non);
        let p = DcfParams::default();

        let mut candidates: Vec<f64> = vec![f64::NEG_INFINITY, f64::INFINITY];
        let mut all: Vec<f64> = tar.iter().chain(non.iter()).cloned().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in all.windows(2) {
            candidates.push((w[0] + w[1]) / 2.0);
        }
        candidates.extend_from_slice(&all);
        let mut best = f64::INFINITY;
        for &t in &candidates {
            let p_miss = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
            let p_fa = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
            let cost = p.c_miss * p.p_target * p_miss + p.c_fa * (1.0 - p.p_target) * p_fa;
            best = best.min(cost);
        }
        let expect = best / (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
        let got = min_dcf(&s, &p).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, oracle {expect}");
    }

    #[test]
    fn cllr_of_all_zero_scores_is_exactly_one() {
        let s = ScoredTrialSet::new(vec![0.0; 6], vec![true, false, true, false, true, false])
            .unwrap();
        assert_eq!(cllr_metric(&s).unwrap(), 1.0);
    }

    #[test]
    fn cllr_of_calibrated_llrs_beats_default() {
        // Two unit-variance Gaussians at ±2; the true log-likelihood ratio
        // of an observation x is 4x. Well-calibrated scores must land below
        // the all-zero reference cost of 1 — comfortably below 0.5 here.
        let mut rng = Rng::new(103, Stream::Synth);
        let n = 100_000;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let target = i % 2 == 0;
            let x = rng.normal() + if target { 2.0 } else { -2.0 };
            scores.push(4.0 * x);
            labels.push(target);
        }
        let s = ScoredTrialSet::new(scores, labels).unwrap();
        let c = cllr_metric(&s).unwrap();
        assert!(c < 0.5, "calibrated CLLR was {c}");
        assert!(c > 0.0);
    }

    #[test]
    fn det_endpoints_and_count() {
        let s = set(&[0.9, 0.5, 0.5], &[0.1, 0.3]);
        let pts = det_points(&s).unwrap();
        let first = pts.first().unwrap();
        assert_eq!((first.p_fa, first.p_miss), (1.0, 0.0));
        assert_eq!(first.threshold, f64::NEG_INFINITY);
        let last = pts.last().unwrap();
        assert_eq!((last.p_fa, last.p_miss), (0.0, 1.0));
        assert_eq!(last.threshold, f64::INFINITY);
        // 4 distinct scores → at most 5 operating points.
        assert!(pts.len() <= 5);
        // thresholds strictly ascending
        for w in pts.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
        }
    }

    #[test]
    fn eer_recomputed_from_det_points_is_self_consistent() {
        let mut rng = Rng::new(104, Stream::Synth);
        for _ in 0..10 {
            let tar: Vec<f64> = (0..40).map(|_| rng.normal() + 1.0).collect();
            let non: Vec<f64> = (0..60).map(|_| rng.normal() - 1.0).collect();
            let s = set(&tar, &non);
            let direct = eer(&s).unwrap();
            // Independent interpolation over the emitted points.
            let pts = det_points(&s).unwrap();
            let mut recomputed = None;
            for w in pts.windows(2) {
                let (d0, d1) = (w[0].p_fa - w[0].p_miss, w[1].p_fa - w[1].p_miss);
                if d0 >= 0.0 && d1 <= 0.0 {
                    let v = if d0 == d1 {
                        w[0].p_fa
                    } else {
                        let a = d0 / (d0 - d1);
                        w[0].p_miss + a * (w[1].p_miss - w[0].p_miss)
                    };
                    recomputed = Some(v);
                    break;
                }
            }
            assert!((direct - recomputed.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_warps() {
        let mut rng = Rng::new(105, Stream::Synth);
        let tar: Vec<f64> = (0..30).map(|_| rng.normal() * 0.8 + 0.7).collect();
        let non: Vec<f64> = (0..50).map(|_| rng.normal() * 0.8 - 0.7).collect();
        let base = set(&tar, &non);
        let p = DcfParams::default();
        let e0 = eer(&base).unwrap();
        let d0 = min_dcf(&base, &p).unwrap();
        for warp in [|x: f64| 3.0 * x + 7.0, |x: f64| x.tanh()] {
            let warped = ScoredTrialSet::new(
                base.scores().iter().map(|&s| warp(s)).collect(),
                base.labels().to_vec(),
            )
            .unwrap();
            assert!((eer(&warped).unwrap() - e0).abs() < 1e-9);
            assert!((min_dcf(&warped, &p).unwrap() - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn cllr_is_calibration_sensitive() {
        // Same ranking, different calibration: squashing through tanh
        // shifts the cost by far more than the 0.1 sensitivity bound while
        // EER stays fixed.
        let s = set(&[2.0, 3.0, 4.0], &[-2.0, -3.0, -4.0]);
        let warped = set(
            &[2.0f64.tanh(), 3.0f64.tanh(), 4.0f64.tanh()],
            &[(-2.0f64).tanh(), (-3.0f64).tanh(), (-4.0f64).tanh()],
        );
        let c0 = cllr_metric(&s).unwrap();
        let c1 = cllr_metric(&warped).unwrap();
        assert!((c0 - c1).abs() > 0.1, "CLLR moved only {} -> {}", c0, c1);
        assert_eq!(eer(&s).unwrap(), eer(&warped).unwrap());
    }

    #[test]
    fn eer_symmetric_under_label_flip_and_negation() {
        let mut rng = Rng::new(106, Stream::Synth);
        for _ in 0..10 {
            let n = 30 + rng.below(40);
            // Quantized scores so ties occur.
            let scores: Vec<f64> = (0..n).map(|_| (rng.normal() * 4.0).round() / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let a = ScoredTrialSet::new(scores.clone(), labels.clone()).unwrap();
            let b = ScoredTrialSet::new(
                scores.iter().map(|s| -s).collect(),
                labels.iter().map(|l| !l).collect(),
            )
            .unwrap();
            let ea = eer(&a).unwrap();
            let eb = eer(&b).unwrap();
            assert!((ea - eb).abs() < 1e-12, "EER {ea} vs flipped {eb}");
        }
    }

    #[test]
    fn cllr_nonnegative_on_random_sets() {
        let mut rng = Rng::new(107, Stream::Synth);
        for _ in 0..20 {
            let n = 2 + rng.below(64);
            let scores: Vec<f64> = (0..n).map(|_| rng.normal() * 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let s = ScoredTrialSet::new(scores, labels).unwrap();
            assert!(cllr_metric(&s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn set_construction_rejects_bad_input() {
        assert!(matches!(
            ScoredTrialSet::new(vec![], vec![]),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            ScoredTrialSet::new(vec![0.1], vec![true, false]),
            Err(Error::Misaligned(_))
        ));
        assert!(matches!(
            ScoredTrialSet::new(vec![f64::NAN], vec![true]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn dcf_params_validate() {
        assert!(DcfParams::default().validate().is_ok());
        let bad = DcfParams {
            p_target: 0.0,
            ..DcfParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = DcfParams {
            c_miss: -1.0,
            ..DcfParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0.00000000");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.123456789123), "0.123456789");
        assert_eq!(format_sig9(12345.6789123), "12345.6789");
        assert_eq!(format_sig9(f64::INFINITY), "inf");
        assert_eq!(format_sig9(f64::NEG_INFINITY), "-inf");
        assert_eq!(format_sig9(-0.5), "-0.500000000");
    }

    #[test]
    fn det_csv_shape() {
        let s = set(&[0.9], &[0.1]);
        let csv = det_csv(&det_points(&s).unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "p_fa,p_miss,threshold");
        let first = lines.next().unwrap();
        assert_eq!(first, "1.00000000,0.00000000,-inf");
        assert!(csv.trim_end().ends_with("0.00000000,1.00000000,inf"));
    }
}
