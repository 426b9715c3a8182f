//! Evaluation metrics: overall / mean IoU, Precision@ζ, mAP over IoU
//! thresholds 0.50:0.05:0.95, region similarity J, contour accuracy F and
//! their mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const BOUNDARY_TOLERANCE: usize = 1;

/// One evaluated frame: the prediction for the referred object, its ground
/// truth and the confidence of the chosen candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pred: Mask,
    pub gt: Mask,
    pub confidence: f64,
}

/// `|∩| / |∪|`; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = pred.overlap(gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn non_empty<T>(op: &'static str, xs: &[T]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::contract(op, "no samples"));
    }
    Ok(())
}

/// Fraction of IoUs strictly above `zeta`.
pub fn precision_at(ious: &[f64], zeta: f64) -> Result<f64> {
    non_empty("precision_at", ious)?;
    Ok(ious.iter().filter(|&&v| v > zeta).count() as f64 / ious.len() as f64)
}

/// Ten IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// 101-point interpolated average precision for a single class where every
/// sample has exactly one ground truth. Precision/recall points are taken
/// after each group of equal confidence, so ties are order independent.
pub fn average_precision(ious: &[f64], confidences: &[f64], threshold: f64) -> Result<f64> {
    non_empty("average_precision", ious)?;
    if ious.len() != confidences.len() {
        return Err(Error::shape("average_precision", &[ious.len()], &[confidences.len()]));
    }
    let n = ious.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += (ious[i] > threshold) as usize;
        let last_of_group = order.get(rank + 1).is_none_or(|&j| confidences[j] != confidences[i]);
        if last_of_group {
            points.push((tp as f64 / n as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= level)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        sum += best;
    }
    Ok(sum / 101.0)
}

pub fn mean_average_precision(ious: &[f64], confidences: &[f64]) -> Result<f64> {
    let t = map_thresholds();
    let mut sum = 0.0;
    for th in t {
        sum += average_precision(ious, confidences, th)?;
    }
    Ok(sum / t.len() as f64)
}

/// Foreground pixels with at least one 4-neighbour outside the mask (the
/// image border counts as outside).
pub fn boundary(m: &Mask) -> Mask {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < m.height && (x as usize) < m.width && m.get(y as usize, x as usize)
    };
    Mask::from_fn(m.height, m.width, |y, x| {
        let (yi, xi) = (y as isize, x as isize);
        m.get(y, x) && !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1))
    })
}

/// Fraction of `from`'s pixels within Euclidean distance `tol` of a pixel of
/// `to`; `None` when `from` is empty.
fn matched_fraction(from: &Mask, to: &Mask, tol: usize) -> Option<f64> {
    let t = tol as isize;
    let mut total = 0usize;
    let mut hit = 0usize;
    for y in 0..from.height {
        for x in 0..from.width {
            if !from.get(y, x) {
                continue;
            }
            total += 1;
            let found = (-t..=t).any(|dy| {
                (-t..=t).any(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    dy * dy + dx * dx <= t * t
                        && yy >= 0
                        && xx >= 0
                        && (yy as usize) < to.height
                        && (xx as usize) < to.width
                        && to.get(yy as usize, xx as usize)
                })
            });
            hit += found as usize;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Boundary F-measure with a `tol`-pixel matching radius.
pub fn contour_accuracy(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("contour_accuracy", &[pred.height, pred.width], &[gt.height, gt.width]));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    Ok(match (matched_fraction(&bp, &bg, tol), matched_fraction(&bg, &bp, tol)) {
        (None, None) => 1.0,
        (None, Some(_)) | (Some(_), None) => 0.0,
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    })
}

/// Mean IoU over samples.
pub fn region_similarity(ious: &[f64]) -> Result<f64> {
    non_empty("region_similarity", ious)?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// Precision at 0.5, 0.6, 0.7, 0.8, 0.9.
    pub precision: [f64; 5],
    pub map: f64,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl MetricsReport {
    fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("overall_iou".to_string(), self.overall_iou),
            ("mean_iou".to_string(), self.mean_iou),
        ];
        for (z, p) in PRECISION_THRESHOLDS.iter().zip(self.precision) {
            out.push((format!("precision@{z:.1}"), p));
        }
        out.extend([
            ("map".to_string(), self.map),
            ("j".to_string(), self.j),
            ("f".to_string(), self.f),
            ("jf".to_string(), self.jf),
        ]);
        out
    }

    /// One `key: value` line per metric, six decimals.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}: {v:.6}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::format("metrics report", format!("bad line `{line}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format("metrics report", format!("bad value in `{line}`")))?;
            values.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::format("metrics report", format!("missing `{k}`")))
        };
        let mut precision = [0.0; 5];
        for (p, z) in precision.iter_mut().zip(PRECISION_THRESHOLDS) {
            *p = get(&format!("precision@{z:.1}"))?;
        }
        Ok(MetricsReport {
            overall_iou: get("overall_iou")?,
            mean_iou: get("mean_iou")?,
            precision,
            map: get("map")?,
            j: get("j")?,
            f: get("f")?,
            jf: get("jf")?,
        })
    }
}

pub fn evaluate(samples: &[Sample]) -> Result<MetricsReport> {
    non_empty("evaluate", samples)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut ious = Vec::with_capacity(samples.len());
    let mut fs = Vec::with_capacity(samples.len());
    for s in samples {
        let (i, u) = s.pred.overlap(&s.gt)?;
        inter += i;
        union += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        fs.push(contour_accuracy(&s.pred, &s.gt, BOUNDARY_TOLERANCE)?);
    }
    let confidences: Vec<f64> = samples.iter().map(|s| s.confidence).collect();
    let mut precision = [0.0; 5];
    for (p, z) in precision.iter_mut().zip(PRECISION_THRESHOLDS) {
        *p = precision_at(&ious, z)?;
    }
    let j = region_similarity(&ious)?;
    let f = fs.iter().sum::<f64>() / fs.len() as f64;
    Ok(MetricsReport {
        overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        mean_iou: j,
        precision,
        map: mean_average_precision(&ious, &confidences)?,
        j,
        f,
        jf: (j + f) / 2.0,
    })
}
