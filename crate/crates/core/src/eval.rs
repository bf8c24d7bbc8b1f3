//! Frame-level detection metrics and confidence analytics.
//!
//! Matching is greedy in descending detection score with one-to-one
//! ground-truth assignment; AP is the area under the all-point interpolated
//! precision-recall curve. Classes without any ground truth are excluded
//! from the class mean rather than counted as zero.

use crate::dataset::{BoundingBox, Dataset, Split};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

/// The three reporting thresholds and their mean define the metric suite.
pub const IOU_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];

/// Intersection over union of two valid boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// One scored detection, referenced to a frame.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video_id: String,
    pub t: usize,
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

/// Ground-truth instance, referenced to a frame.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub video_id: String,
    pub t: usize,
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Outcome of greedy matching for one class at one threshold.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Per detection (in ranked order): true positive flag and the index of
    /// the matched ground truth, if any.
    pub detections: Vec<(bool, Option<usize>)>,
    /// Ranked order: `order[i]` is the original index of the i-th ranked
    /// detection.
    pub order: Vec<usize>,
    /// Per ground truth: whether some detection claimed it.
    pub gt_matched: Vec<bool>,
}

/// Ranks detections by descending score; ties break on frame order
/// (video id, then t) and then lexicographic box coordinates.
pub fn rank_detections(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &detections[i];
        let b = &detections[j];
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.t.cmp(&b.t))
            .then_with(|| a.bbox.lex_key().partial_cmp(&b.bbox.lex_key()).unwrap())
    });
    order
}

/// Greedy one-to-one matching of same-class detections to ground truths at
/// IoU threshold `tau`. Inputs must already be restricted to a single class.
pub fn match_greedy(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    tau: f64,
) -> Result<MatchResult> {
    let order = rank_detections(detections);
    let mut gt_matched = vec![false; ground_truths.len()];
    let mut flags = Vec::with_capacity(detections.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truths.iter().enumerate() {
            if gt_matched[gi] || gt.video_id != det.video_id || gt.t != det.t {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox)?;
            if overlap >= tau {
                let better = match best {
                    Some((_, b)) => overlap > b,
                    None => true,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                flags.push((true, Some(gi)));
            }
            None => flags.push((false, None)),
        }
    }
    Ok(MatchResult {
        detections: flags,
        order,
        gt_matched,
    })
}

/// Average precision for one class at one threshold.
///
/// Returns `None` when the class has no ground truth (such classes are
/// excluded from the mean); zero detections with ground truth present give
/// AP 0.
pub fn match_and_ap(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    tau: f64,
) -> Result<Option<f64>> {
    if ground_truths.is_empty() {
        return Ok(None);
    }
    if detections.is_empty() {
        return Ok(Some(0.0));
    }
    let matched = match_greedy(detections, ground_truths, tau)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let n_gt = ground_truths.len();
    let mut precision = Vec::with_capacity(detections.len());
    let mut recall = Vec::with_capacity(detections.len());
    for &(is_tp, _) in &matched.detections {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    Ok(Some(all_point_ap(&precision, &recall)))
}

/// Area under the all-point interpolated precision-recall curve. The
/// envelope takes the running maximum precision from the right; the area is
/// summed over recall increments left to right.
fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let n = precision.len();
    let mut envelope = precision.to_vec();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// mAP at the three reporting thresholds plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSuite {
    pub map10: f64,
    pub map30: f64,
    pub map50: f64,
    pub map_mean: f64,
    /// Per-threshold, per-class AP for the report CSV. Classes without
    /// ground truth are absent.
    pub per_class: Vec<(f64, usize, f64)>,
}

/// Ground truths of one dataset split as flat eval records.
pub fn split_ground_truths(dataset: &Dataset, split: Split) -> Vec<GroundTruth> {
    dataset
        .frames_in_split(split)
        .iter()
        .flat_map(|f| {
            f.ground_truth.iter().map(|g| GroundTruth {
                video_id: f.video_id.clone(),
                t: f.t,
                bbox: g.bbox,
                class_id: g.class_id,
            })
        })
        .collect()
}

/// Frame-level mAP of `predictions` against `ground_truths`.
///
/// Every prediction must reference a frame present in `dataset`.
pub fn map_suite(
    predictions: &[Detection],
    ground_truths: &[GroundTruth],
    dataset: &Dataset,
) -> Result<MapSuite> {
    if dataset.frames.is_empty() {
        return Err(Error::config("cannot evaluate against an empty dataset"));
    }
    for det in predictions {
        if !dataset.has_frame(&det.video_id, det.t) {
            return Err(Error::validation(format!(
                "prediction references unknown frame {}/t={}",
                det.video_id, det.t
            )));
        }
    }

    let classes: BTreeSet<usize> = ground_truths.iter().map(|g| g.class_id).collect();
    let mut per_class = Vec::new();
    let mut means = Vec::new();
    for &tau in &IOU_THRESHOLDS {
        let mut aps = Vec::new();
        for &class in &classes {
            let dets: Vec<Detection> = predictions
                .iter()
                .filter(|d| d.class_id == class)
                .cloned()
                .collect();
            let gts: Vec<GroundTruth> = ground_truths
                .iter()
                .filter(|g| g.class_id == class)
                .cloned()
                .collect();
            if let Some(ap) = match_and_ap(&dets, &gts, tau)? {
                per_class.push((tau, class, ap));
                aps.push(ap);
            }
        }
        let mean = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        means.push(mean);
    }
    Ok(MapSuite {
        map10: means[0],
        map30: means[1],
        map50: means[2],
        map_mean: means.iter().sum::<f64>() / means.len() as f64,
        per_class,
    })
}

/// Metrics report: per-threshold per-class AP rows plus a summary block.
pub fn metrics_csv(suite: &MapSuite, class_names: &[String]) -> String {
    let mut out = String::from("threshold,class,AP\n");
    for &(tau, class, ap) in &suite.per_class {
        let name = class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"));
        out.push_str(&format!("{tau},{name},{ap}\n"));
    }
    out.push_str("mAP10,mAP30,mAP50,mAPmean\n");
    out.push_str(&format!(
        "{},{},{},{}\n",
        suite.map10, suite.map30, suite.map50, suite.map_mean
    ));
    out
}

/// One scored prediction matched to its ground-truth class, carrying the
/// interval width at the true class.
#[derive(Debug, Clone)]
pub struct ConfidenceRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    /// Interval width evaluated at the true class (raw scale, not x100).
    pub iw_true_class: f64,
}

/// Per-class confidence summary mirroring the instance-accuracy layout.
#[derive(Debug, Clone)]
pub struct ConfidenceRow {
    pub class_id: usize,
    pub instances: usize,
    pub accuracy: f64,
    /// Mean interval width over correct predictions, x100, with count.
    pub mean_iw_correct: Option<(f64, usize)>,
    /// Mean interval width over incorrect predictions, x100, with count.
    pub mean_iw_incorrect: Option<(f64, usize)>,
}

/// Groups records by true class, splitting interval widths by correctness.
/// Rows are sorted by accuracy descending (class id breaks ties); classes
/// with zero instances are simply absent. Interval widths are scaled x100
/// in the emitted rows.
pub fn confidence_report(records: &[ConfidenceRecord]) -> Vec<ConfidenceRow> {
    let mut by_class: BTreeMap<usize, Vec<&ConfidenceRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.true_class).or_default().push(r);
    }
    let mut rows: Vec<ConfidenceRow> = by_class
        .into_iter()
        .map(|(class_id, recs)| {
            let instances = recs.len();
            let correct: Vec<f64> = recs
                .iter()
                .filter(|r| r.predicted_class == r.true_class)
                .map(|r| r.iw_true_class)
                .collect();
            let incorrect: Vec<f64> = recs
                .iter()
                .filter(|r| r.predicted_class != r.true_class)
                .map(|r| r.iw_true_class)
                .collect();
            let accuracy = correct.len() as f64 / instances as f64;
            let side = |vals: &[f64]| {
                if vals.is_empty() {
                    None
                } else {
                    Some((
                        100.0 * vals.iter().sum::<f64>() / vals.len() as f64,
                        vals.len(),
                    ))
                }
            };
            ConfidenceRow {
                class_id,
                instances,
                accuracy,
                mean_iw_correct: side(&correct),
                mean_iw_incorrect: side(&incorrect),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .unwrap()
            .then_with(|| a.class_id.cmp(&b.class_id))
    });
    rows
}

pub fn confidence_csv(rows: &[ConfidenceRow], class_names: &[String]) -> String {
    let mut out = String::from(
        "class,instances,accuracy,mean_iw_correct,n_correct,mean_iw_incorrect,n_incorrect\n",
    );
    for row in rows {
        let name = class_names
            .get(row.class_id)
            .cloned()
            .unwrap_or_else(|| format!("class{}", row.class_id));
        let (cw, cn) = row
            .mean_iw_correct
            .map(|(w, n)| (w.to_string(), n.to_string()))
            .unwrap_or_default();
        let (iw, inn) = row
            .mean_iw_incorrect
            .map(|(w, n)| (w.to_string(), n.to_string()))
            .unwrap_or_default();
        out.push_str(&format!(
            "{name},{},{},{cw},{cn},{iw},{inn}\n",
            row.instances, row.accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FrameRecord, GridDims, GroundTruthAction, Manifest, VideoEntry};
    use crate::tensor::Tensor;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(t: usize, b: BoundingBox, class_id: usize, score: f64) -> Detection {
        Detection {
            video_id: "v".into(),
            t,
            bbox: b,
            class_id,
            score,
        }
    }

    fn gt(t: usize, b: BoundingBox, class_id: usize) -> GroundTruth {
        GroundTruth {
            video_id: "v".into(),
            t,
            bbox: b,
            class_id,
        }
    }

    #[test]
    fn iou_identical_boxes() {
        let b = bx(1.0, 1.0, 3.0, 4.0);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        assert_eq!(
            iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn iou_hand_case_one_third() {
        // Intersection 2, union 6.
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 0.0, 3.0, 2.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate_box() {
        let bad = BoundingBox {
            x1: 2.0,
            y1: 0.0,
            x2: 2.0,
            y2: 1.0,
        };
        assert!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn perfect_detector_gets_ap_one() {
        let g = vec![
            gt(1, bx(0.0, 0.0, 2.0, 2.0), 0),
            gt(2, bx(1.0, 1.0, 3.0, 3.0), 0),
        ];
        let d = vec![
            det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.9),
            det(2, bx(1.0, 1.0, 3.0, 3.0), 0, 0.8),
        ];
        assert_eq!(match_and_ap(&d, &g, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn no_detections_gets_ap_zero() {
        let g = vec![gt(1, bx(0.0, 0.0, 2.0, 2.0), 0)];
        assert_eq!(match_and_ap(&[], &g, 0.5).unwrap(), Some(0.0));
    }

    #[test]
    fn no_ground_truth_is_excluded() {
        let d = vec![det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.9)];
        assert_eq!(match_and_ap(&d, &[], 0.5).unwrap(), None);
    }

    #[test]
    fn middle_rank_hit_hand_case() {
        // Three detections at .9/.8/.7; only the .8 one overlaps a ground
        // truth. PR points by hand: (0,0), (1/2,1/2), (1/2,1/3); the
        // envelope at the single recall step 1/2 is 1/2, so AP = 1/4.
        let g = vec![
            gt(1, bx(0.0, 0.0, 2.0, 2.0), 0),
            gt(1, bx(5.0, 5.0, 7.0, 7.0), 0),
        ];
        let d = vec![
            det(1, bx(10.0, 10.0, 12.0, 12.0), 0, 0.9),
            det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.8),
            det(1, bx(20.0, 20.0, 22.0, 22.0), 0, 0.7),
        ];
        assert_eq!(match_and_ap(&d, &g, 0.5).unwrap(), Some(0.25));
    }

    #[test]
    fn each_gt_matched_at_most_once() {
        let g = vec![gt(1, bx(0.0, 0.0, 2.0, 2.0), 0)];
        let d = vec![
            det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.9),
            det(1, bx(0.1, 0.0, 2.1, 2.0), 0, 0.8),
        ];
        let m = match_greedy(&d, &g, 0.5).unwrap();
        let tps = m.detections.iter().filter(|(tp, _)| *tp).count();
        assert_eq!(tps, 1);
        assert_eq!(m.gt_matched, vec![true]);
    }

    fn two_frame_dataset() -> Dataset {
        let manifest = Manifest {
            grid: GridDims { c: 1, h: 8, w: 8 },
            num_classes: 2,
            class_names: vec!["a".into(), "b".into()],
            image_to_grid_scale: 1.0,
            videos: vec![VideoEntry {
                id: "v".into(),
                frames: 2,
                split: Split::Test,
            }],
            generator: None,
        };
        let frames = (1..=2)
            .map(|t| FrameRecord {
                video_id: "v".into(),
                t,
                feature_map: Tensor::filled(vec![1, 8, 8], 0.0),
                anchors: vec![],
                ground_truth: vec![GroundTruthAction {
                    bbox: bx(1.0, 1.0, 3.0, 3.0),
                    class_id: (t - 1) % 2,
                }],
            })
            .collect();
        Dataset { manifest, frames }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let ds = two_frame_dataset();
        let gts = split_ground_truths(&ds, Split::Test);
        let preds: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                video_id: g.video_id.clone(),
                t: g.t,
                bbox: g.bbox,
                class_id: g.class_id,
                score: 1.0,
            })
            .collect();
        let suite = map_suite(&preds, &gts, &ds).unwrap();
        assert_eq!(
            (suite.map10, suite.map30, suite.map50, suite.map_mean),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn moderate_overlap_counts_below_its_iou_only() {
        // IoU 0.4 against the ground truth: matched at 0.1 and 0.3, missed
        // at 0.5, so the suite reads (1, 1, 0, 2/3).
        let ds = two_frame_dataset();
        let gts = vec![gt(1, bx(0.0, 0.0, 2.0, 2.5), 0)];
        // Overlap 1x2.5 = 2.5, union 5 + 3.75 - 2.5 = 6.25, IoU 0.4.
        let preds = vec![det(1, bx(1.0, 0.0, 2.5, 2.5), 0, 0.9)];
        let suite = map_suite(&preds, &gts, &ds).unwrap();
        assert_eq!(suite.map10, 1.0);
        assert_eq!(suite.map30, 1.0);
        assert_eq!(suite.map50, 0.0);
        assert!((suite.map_mean - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn predictions_must_reference_known_frames() {
        let ds = two_frame_dataset();
        let gts = split_ground_truths(&ds, Split::Test);
        let preds = vec![det(9, bx(0.0, 0.0, 1.0, 1.0), 0, 0.5)];
        assert!(map_suite(&preds, &gts, &ds).is_err());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let ds = Dataset {
            manifest: Manifest {
                grid: GridDims { c: 1, h: 4, w: 4 },
                num_classes: 1,
                class_names: vec!["a".into()],
                image_to_grid_scale: 1.0,
                videos: vec![],
                generator: None,
            },
            frames: vec![],
        };
        assert!(matches!(
            map_suite(&[], &[], &ds).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn ap_monotone_in_threshold() {
        let g = vec![
            gt(1, bx(0.0, 0.0, 2.0, 2.0), 0),
            gt(1, bx(4.0, 4.0, 6.0, 6.0), 0),
            gt(2, bx(1.0, 1.0, 3.0, 3.0), 0),
        ];
        let d = vec![
            det(1, bx(0.4, 0.0, 2.4, 2.0), 0, 0.9),
            det(1, bx(4.0, 4.3, 6.0, 6.3), 0, 0.7),
            det(2, bx(1.9, 1.0, 3.9, 3.0), 0, 0.8),
        ];
        let mut last = f64::INFINITY;
        for tau in [0.1, 0.3, 0.5, 0.7] {
            let ap = match_and_ap(&d, &g, tau).unwrap().unwrap();
            assert!(ap <= last + 1e-15);
            last = ap;
        }
    }

    #[test]
    fn low_score_false_positive_never_raises_ap() {
        let g = vec![gt(1, bx(0.0, 0.0, 2.0, 2.0), 0)];
        let mut d = vec![det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.9)];
        let base = match_and_ap(&d, &g, 0.5).unwrap().unwrap();
        d.push(det(1, bx(5.0, 5.0, 6.0, 6.0), 0, 0.1));
        let with_fp = match_and_ap(&d, &g, 0.5).unwrap().unwrap();
        assert!(with_fp <= base);
    }

    #[test]
    fn perfect_extra_detection_never_lowers_ap() {
        let g = vec![
            gt(1, bx(0.0, 0.0, 2.0, 2.0), 0),
            gt(2, bx(0.0, 0.0, 2.0, 2.0), 0),
        ];
        let d = vec![det(1, bx(0.0, 0.0, 2.0, 2.0), 0, 0.9)];
        let base = match_and_ap(&d, &g, 0.5).unwrap().unwrap();
        let mut more = d.clone();
        more.push(det(2, bx(0.0, 0.0, 2.0, 2.0), 0, 0.95));
        let improved = match_and_ap(&more, &g, 0.5).unwrap().unwrap();
        assert!(improved >= base);
    }

    #[test]
    fn confidence_report_hand_case() {
        // Two instances of one class, interval widths 0.01 and 0.03 at the
        // true class, one predicted right and one wrong. After x100 the row
        // reads (2, 0.5, 1.0, 3.0).
        let records = vec![
            ConfidenceRecord {
                true_class: 0,
                predicted_class: 0,
                iw_true_class: 0.01,
            },
            ConfidenceRecord {
                true_class: 0,
                predicted_class: 1,
                iw_true_class: 0.03,
            },
        ];
        let rows = confidence_report(&records);
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.instances, 2);
        assert_eq!(row.accuracy, 0.5);
        let (cw, cn) = row.mean_iw_correct.unwrap();
        assert!((cw - 1.0).abs() < 1e-12);
        assert_eq!(cn, 1);
        let (iw, inn) = row.mean_iw_incorrect.unwrap();
        assert!((iw - 3.0).abs() < 1e-12);
        assert_eq!(inn, 1);
    }

    #[test]
    fn all_correct_leaves_incorrect_side_empty() {
        let records = vec![ConfidenceRecord {
            true_class: 2,
            predicted_class: 2,
            iw_true_class: 0.02,
        }];
        let rows = confidence_report(&records);
        assert!(rows[0].mean_iw_incorrect.is_none());
        let csv = confidence_csv(&rows, &["a".into(), "b".into(), "c".into()]);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn rows_sorted_by_accuracy_descending() {
        let records = vec![
            ConfidenceRecord {
                true_class: 0,
                predicted_class: 1,
                iw_true_class: 0.1,
            },
            ConfidenceRecord {
                true_class: 1,
                predicted_class: 1,
                iw_true_class: 0.1,
            },
        ];
        let rows = confidence_report(&records);
        assert_eq!(rows[0].class_id, 1);
        assert_eq!(rows[1].class_id, 0);
    }

    #[test]
    fn accuracy_matches_direct_recount() {
        let records: Vec<ConfidenceRecord> = (0..97)
            .map(|i| ConfidenceRecord {
                true_class: 0,
                predicted_class: if i % 3 == 0 { 0 } else { 1 },
                iw_true_class: 0.01 * (i as f64 + 1.0),
            })
            .collect();
        let rows = confidence_report(&records);
        let correct = records
            .iter()
            .filter(|r| r.predicted_class == r.true_class)
            .count();
        assert!((rows[0].accuracy - correct as f64 / 97.0).abs() < 1e-12);
    }
}
