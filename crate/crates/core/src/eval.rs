//! One-pass evaluation: center-error precision, normalized precision and
//! overlap success.
//!
//! Normalized precision divides the center error per axis by the
//! ground-truth width and height and counts frames whose normalized
//! distance is at most 0.2. This is the convention used by common tracking
//! benchmarks; no other definition is implied.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tracker::{track_sequence, Tracker, Variant};

/// Center-error thresholds `0..=50` pixels.
pub const PRECISION_THRESHOLDS: usize = 51;
pub const PRECISION_PIXELS: usize = 20;
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;
/// Overlap thresholds `i / 20` for `i in 0..=20`.
pub const SUCCESS_STEPS: usize = 20;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    // Areas from the same corner arithmetic as the overlap, so identical
    // boxes give exactly 1.
    let area = |r: &BBox| (r.right() - r.x) * (r.bottom() - r.y);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        (inter / union).min(1.0)
    } else {
        0.0
    }
}

/// Center location error in pixels.
pub fn cle(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

fn check_lengths(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} boxes, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(())
}

fn fraction(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

/// Fraction of frames with CLE at most `tau`, for `tau = 0, 1, ..., 50`.
pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| cle(p, g)).collect();
    Ok(curve_from_errors(&errs))
}

fn curve_from_errors(errs: &[f64]) -> Vec<f64> {
    (0..PRECISION_THRESHOLDS)
        .map(|tau| fraction(errs.iter().filter(|&&e| e <= tau as f64).count(), errs.len()))
        .collect()
}

pub fn precision_at_20(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    Ok(precision_curve(pred, gt)?[PRECISION_PIXELS])
}

/// Per-axis normalized center distance `sqrt((dx/w)^2 + (dy/h)^2)`.
pub fn normalized_error(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::InvalidArgument(format!("ground-truth box {gt:?} has zero size")));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

/// Fraction of frames with normalized error at most 0.2.
pub fn norm_precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let mut hits = 0;
    for (p, g) in pred.iter().zip(gt) {
        if normalized_error(p, g)? <= NORM_PRECISION_THRESHOLD {
            hits += 1;
        }
    }
    Ok(fraction(hits, gt.len()))
}

/// Fraction of frames with IoU strictly above `i / 20`, for `i = 0..=20`.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    Ok(success_from_ious(&ious))
}

fn success_from_ious(ious: &[f64]) -> Vec<f64> {
    (0..=SUCCESS_STEPS)
        .map(|i| {
            let thr = i as f64 / SUCCESS_STEPS as f64;
            fraction(ious.iter().filter(|&&v| v > thr).count(), ious.len())
        })
        .collect()
}

/// Mean of the success curve. Because the comparison is strict, a perfect
/// trajectory scores 20/21, not 1.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let curve = success_curve(pred, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub precision_at_20: f64,
    pub norm_precision_at_02: f64,
    pub success_auc: f64,
    pub mean_iou: f64,
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub per_frame_cle: Vec<f64>,
    pub per_frame_iou: Vec<f64>,
}

impl MetricReport {
    pub fn new(pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let precision_curve = precision_curve(pred, gt)?;
        let success_curve = success_curve(pred, gt)?;
        let per_frame_iou: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
        Ok(Self {
            frames: gt.len(),
            precision_at_20: precision_curve[PRECISION_PIXELS],
            norm_precision_at_02: norm_precision(pred, gt)?,
            success_auc: success_curve.iter().sum::<f64>() / success_curve.len() as f64,
            mean_iou: per_frame_iou.iter().sum::<f64>() / gt.len() as f64,
            precision_curve,
            success_curve,
            per_frame_cle: pred.iter().zip(gt).map(|(p, g)| cle(p, g)).collect(),
            per_frame_iou,
        })
    }

    /// Curves as CSV rows `curve,threshold,value`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        for (tau, v) in self.precision_curve.iter().enumerate() {
            s.push_str(&format!("precision,{tau},{v}\n"));
        }
        for (i, v) in self.success_curve.iter().enumerate() {
            s.push_str(&format!("success,{},{v}\n", i as f64 / SUCCESS_STEPS as f64));
        }
        s
    }
}

/// Per-sequence reports and the frame-weighted aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub sequences: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

impl OpeReport {
    /// Aggregate by pooling every frame of every sequence, so longer
    /// sequences weigh more.
    pub fn from_trajectories(preds: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<Self> {
        if preds.len() != gts.len() || gts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} predicted trajectories for {} sequences",
                preds.len(),
                gts.len()
            )));
        }
        let sequences = preds.iter().zip(gts).map(|(p, g)| MetricReport::new(p, g)).collect::<Result<_>>()?;
        let aggregate = MetricReport::new(&preds.concat(), &gts.concat())?;
        Ok(Self { sequences, aggregate })
    }
}

/// Anything that produces a trajectory from frames and a first-frame box.
pub trait SequenceTracker: Sync {
    fn track(&self, seq: &Sequence, init: BBox) -> Result<Vec<BBox>>;
}

/// The learned tracker, with or without prompts.
pub struct ModelTracker<'a> {
    pub model: &'a Tracker,
    pub store: &'a ParamStore<f32>,
    pub variant: Variant,
}

impl SequenceTracker for ModelTracker<'_> {
    fn track(&self, seq: &Sequence, init: BBox) -> Result<Vec<BBox>> {
        track_sequence(self.model, self.store, &seq.frames, init, self.variant)
    }
}

/// Track every sequence from its first ground-truth box without
/// re-initialization and report. Up to `workers` sequences run at once; the
/// result does not depend on `workers`.
pub fn run_ope(tracker: &dyn SequenceTracker, sequences: &[Sequence], workers: usize) -> Result<OpeReport> {
    for (k, s) in sequences.iter().enumerate() {
        if s.boxes.is_empty() || s.boxes.len() != s.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "sequence {k} has {} frames but {} ground-truth boxes",
                s.frames.len(),
                s.boxes.len()
            )));
        }
    }
    let run = |s: &Sequence| tracker.track(s, s.boxes[0]);
    let preds: Vec<Vec<BBox>> = track_all(sequences, workers, run)?;
    let gts: Vec<Vec<BBox>> = sequences.iter().map(|s| s.boxes.clone()).collect();
    OpeReport::from_trajectories(&preds, &gts)
}

#[cfg(feature = "parallel")]
fn track_all<F>(sequences: &[Sequence], workers: usize, run: F) -> Result<Vec<Vec<BBox>>>
where
    F: Fn(&Sequence) -> Result<Vec<BBox>> + Sync,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return sequences.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| sequences.par_iter().map(&run).collect())
}

#[cfg(not(feature = "parallel"))]
fn track_all<F>(sequences: &[Sequence], _workers: usize, run: F) -> Result<Vec<Vec<BBox>>>
where
    F: Fn(&Sequence) -> Result<Vec<BBox>> + Sync,
{
    sequences.iter().map(run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn random_pair(rng: &mut Rng, n: usize) -> (Vec<BBox>, Vec<BBox>) {
        let gt: Vec<BBox> = (0..n)
            .map(|_| BBox::new(rng.uniform_range(0.0, 200.0), rng.uniform_range(0.0, 200.0), rng.uniform_range(5.0, 60.0), rng.uniform_range(5.0, 60.0)))
            .collect();
        let pred = gt
            .iter()
            .map(|g| {
                let s = rng.uniform_range(0.0, 40.0);
                BBox::new(g.x + rng.symmetric(s), g.y + rng.symmetric(s), g.w * rng.uniform_range(0.5, 1.5), g.h * rng.uniform_range(0.5, 1.5))
            })
            .collect();
        (pred, gt)
    }

    // Independent recount: per threshold, walk every frame again.
    fn brute(pred: &[BBox], gt: &[BBox]) -> (f64, f64, f64) {
        let n = gt.len() as f64;
        let mut prec20 = 0.0;
        let mut norm = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            let dx = (p.x + p.w / 2.0) - (g.x + g.w / 2.0);
            let dy = (p.y + p.h / 2.0) - (g.y + g.h / 2.0);
            if (dx * dx + dy * dy).sqrt() <= 20.0 {
                prec20 += 1.0;
            }
            if ((dx / g.w).powi(2) + (dy / g.h).powi(2)).sqrt() <= 0.2 {
                norm += 1.0;
            }
        }
        let mut auc = 0.0;
        for i in 0..=20 {
            let thr = i as f64 / 20.0;
            let mut hits = 0.0;
            for (p, g) in pred.iter().zip(gt) {
                let x1 = p.x.max(g.x);
                let y1 = p.y.max(g.y);
                let x2 = (p.x + p.w).min(g.x + g.w);
                let y2 = (p.y + p.h).min(g.y + g.h);
                let inter = if x2 > x1 && y2 > y1 { (x2 - x1) * (y2 - y1) } else { 0.0 };
                let u = p.w * p.h + g.w * g.h - inter;
                if u > 0.0 && (inter / u).min(1.0) > thr {
                    hits += 1.0;
                }
            }
            auc += hits / n;
        }
        (prec20 / n, norm / n, auc / 21.0)
    }

    #[test]
    fn hand_examples() {
        assert_eq!(iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 2.0, 2.0)), 1.0 / 7.0);
        assert_eq!(cle(&BBox::from_center(10.0, 10.0, 4.0, 4.0), &BBox::from_center(13.0, 14.0, 2.0, 2.0)), 5.0);
        let a = BBox::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(100.0, 100.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 0.0, 0.0), &BBox::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn perfect_and_disjoint_trajectories() {
        let gt = vec![BBox::new(1.0, 2.0, 10.0, 12.0); 7];
        assert!(precision_curve(&gt, &gt).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(norm_precision(&gt, &gt).unwrap(), 1.0);
        assert_eq!(success_auc(&gt, &gt).unwrap(), 20.0 / 21.0);
        let far = vec![BBox::new(500.0, 500.0, 10.0, 12.0); 7];
        assert_eq!(success_auc(&far, &gt).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let gt = vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3];
        assert!(precision_curve(&gt[..2], &gt).is_err());
        assert!(success_auc(&[], &[]).is_err());
        let zero = vec![BBox::new(0.0, 0.0, 0.0, 1.0)];
        assert!(norm_precision(&zero, &zero).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_trajectories() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let n = 1 + rng.below(60);
            let (pred, gt) = random_pair(&mut rng, n);
            let (p, np, auc) = brute(&pred, &gt);
            assert!((precision_at_20(&pred, &gt).unwrap() - p).abs() <= 1e-12);
            assert!((norm_precision(&pred, &gt).unwrap() - np).abs() <= 1e-12);
            assert!((success_auc(&pred, &gt).unwrap() - auc).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn curves_are_monotone(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = Rng::new(seed);
            let (pred, gt) = random_pair(&mut rng, n);
            let p = precision_curve(&pred, &gt).unwrap();
            prop_assert!(p.windows(2).all(|w| w[0] <= w[1]));
            let s = success_curve(&pred, &gt).unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(p.iter().chain(&s).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn frame_order_does_not_matter(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = Rng::new(seed);
            let (pred, gt) = random_pair(&mut rng, n);
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let rp: Vec<BBox> = order.iter().map(|&i| pred[i]).collect();
            let rg: Vec<BBox> = order.iter().map(|&i| gt[i]).collect();
            let (a, b) = (MetricReport::new(&pred, &gt).unwrap(), MetricReport::new(&rp, &rg).unwrap());
            prop_assert_eq!(a.precision_curve, b.precision_curve);
            prop_assert_eq!(a.success_curve, b.success_curve);
            prop_assert_eq!(a.norm_precision_at_02, b.norm_precision_at_02);
        }

        #[test]
        fn norm_precision_is_scale_invariant(seed in any::<u64>(), n in 1usize..30) {
            let mut rng = Rng::new(seed);
            let (pred, gt) = random_pair(&mut rng, n);
            let x2 = |v: &[BBox]| v.iter().map(|b| BBox::new(2.0 * b.x, 2.0 * b.y, 2.0 * b.w, 2.0 * b.h)).collect::<Vec<_>>();
            prop_assert_eq!(norm_precision(&pred, &gt).unwrap(), norm_precision(&x2(&pred), &x2(&gt)).unwrap());
        }

        #[test]
        fn cle_is_symmetric(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (p, g) = random_pair(&mut rng, 1);
            prop_assert_eq!(cle(&p[0], &g[0]), cle(&g[0], &p[0]));
        }
    }

    struct Oracle;
    impl SequenceTracker for Oracle {
        fn track(&self, seq: &Sequence, _init: BBox) -> Result<Vec<BBox>> {
            Ok(seq.boxes.clone())
        }
    }

    struct Frozen;
    impl SequenceTracker for Frozen {
        fn track(&self, seq: &Sequence, init: BBox) -> Result<Vec<BBox>> {
            Ok(vec![init; seq.len()])
        }
    }

    fn fake_sequence(n: usize, seed: u64) -> Sequence {
        let mut rng = Rng::new(seed);
        let (_, boxes) = random_pair(&mut rng, n);
        Sequence { frames: vec![Tensor::zeros(&[3, 4, 4]); n], boxes }
    }

    #[test]
    fn oracle_tracker_scores_maximum() {
        let seqs = vec![fake_sequence(5, 1), fake_sequence(9, 2)];
        let r = run_ope(&Oracle, &seqs, 1).unwrap();
        let a = &r.aggregate;
        assert_eq!((a.precision_at_20, a.norm_precision_at_02, a.success_auc, a.mean_iou), (1.0, 1.0, 20.0 / 21.0, 1.0));
        assert_eq!(a.frames, 14);
    }

    #[test]
    fn identical_sequences_aggregate_to_single_report() {
        let s = fake_sequence(11, 3);
        let single = run_ope(&Frozen, std::slice::from_ref(&s), 1).unwrap().aggregate;
        let triple = run_ope(&Frozen, &[s.clone(), s.clone(), s], 1).unwrap().aggregate;
        assert_eq!(single.precision_curve, triple.precision_curve);
        assert_eq!(single.success_curve, triple.success_curve);
        assert_eq!(single.norm_precision_at_02, triple.norm_precision_at_02);
        assert_eq!(single.success_auc, triple.success_auc);
    }

    #[test]
    fn workers_do_not_change_the_report() {
        let seqs: Vec<Sequence> = (0..6).map(|k| fake_sequence(4 + k, k as u64)).collect();
        let a = run_ope(&Frozen, &seqs, 1).unwrap();
        let b = run_ope(&Frozen, &seqs, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_ground_truth_is_rejected() {
        let mut s = fake_sequence(4, 0);
        s.boxes.pop();
        assert!(run_ope(&Oracle, &[s], 1).is_err());
    }

    #[test]
    fn csv_has_both_curves() {
        let gt = vec![BBox::new(1.0, 2.0, 10.0, 12.0); 2];
        let csv = MetricReport::new(&gt, &gt).unwrap().curves_csv();
        assert_eq!(csv.lines().count(), 1 + PRECISION_THRESHOLDS + SUCCESS_STEPS + 1);
        assert!(csv.contains("success,0.05,1\n"));
    }
}
