//! Pixel-level segmentation metrics, an optional target-level detection
//! mode, and ROC sweeps.
//!
//! Masks are byte slices holding 0 or 1. Probability maps are `f64` slices.
//! All counting is exact; floating point enters only in the final ratios.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("mask value {value} at index {index} is not binary; threshold first")]
    NonBinary { index: usize, value: u8 },
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    Length { pred: usize, gt: usize },
    #[error("{0} maps but {1} ground-truth masks")]
    Count(usize, usize),
    #[error("threshold list is empty")]
    NoThresholds,
    #[error("thresholds must be strictly descending (index {0})")]
    Order(usize),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Ground-truth positives `T`.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Predicted positives `P`.
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for v in [p, g] {
            if v > 1 {
                return Err(MetricsError::NonBinary { index: i, value: v });
            }
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `prob ≥ threshold` → 1.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p >= threshold) as u8).collect()
}

/// `TP / (T + P − TP)`; 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

/// Mean per-image IoU over images whose ground truth has a positive pixel.
/// `None` when there are no such images.
pub fn niou(per_image: &[ConfusionCounts]) -> Option<f64> {
    let ious: Vec<f64> = per_image
        .iter()
        .filter(|c| c.positives() > 0)
        .map(iou)
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// `TP / (TP + FN)`; undefined without ground-truth positives.
pub fn pd(c: &ConfusionCounts) -> Option<f64> {
    (c.positives() > 0).then(|| c.tp as f64 / c.positives() as f64)
}

/// False-positive pixels per image pixel.
pub fn fa(c: &ConfusionCounts, total_pixels: u64) -> f64 {
    if total_pixels == 0 {
        0.0
    } else {
        c.fp as f64 / total_pixels as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub pd: f64,
    pub fa: f64,
}

/// Binarize every map at each threshold and report aggregate `(Pd, Fa)`.
/// Pd is 0 when the ground truth has no positive pixels at all.
pub fn roc_sweep(maps: &[&[f64]], gts: &[&[u8]], thresholds: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::NoThresholds);
    }
    if let Some(i) = thresholds.windows(2).position(|w| w[1] >= w[0]) {
        return Err(MetricsError::Order(i + 1));
    }
    if maps.len() != gts.len() {
        return Err(MetricsError::Count(maps.len(), gts.len()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let mut total = ConfusionCounts::default();
            for (m, g) in maps.iter().zip(gts) {
                total.add(&confusion(&binarize(m, t), g)?);
            }
            Ok(RocPoint {
                threshold: t,
                pd: pd(&total).unwrap_or(0.0),
                fa: fa(&total, total.total()),
            })
        })
        .collect()
}

/// `n` evenly spaced thresholds from 1 down to 0 inclusive.
pub fn default_thresholds(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| 1.0 - i as f64 / (n - 1) as f64).collect()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,pd,fa\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.pd, p.fa);
    }
    out
}

/// 8-connected components of a binary mask: (centroid y, centroid x,
/// member indices).
fn components(mask: &[u8], h: usize, w: usize) -> Vec<(f64, f64, Vec<usize>)> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        members.sort_unstable();
        let n = members.len() as f64;
        let cy = members.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
        let cx = members.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
        out.push((cy, cx, members));
    }
    out
}

/// Target-level detection counts: a ground-truth component is detected
/// when an unmatched predicted component's centroid lies within `max_dist`
/// px of its centroid; pixels of predicted components left unmatched are
/// false alarms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TargetCounts {
    pub targets: u64,
    pub detected: u64,
    pub false_pixels: u64,
    pub pixels: u64,
}

impl TargetCounts {
    pub fn add(&mut self, o: &TargetCounts) {
        self.targets += o.targets;
        self.detected += o.detected;
        self.false_pixels += o.false_pixels;
        self.pixels += o.pixels;
    }

    pub fn pd(&self) -> Option<f64> {
        (self.targets > 0).then(|| self.detected as f64 / self.targets as f64)
    }

    pub fn fa(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.false_pixels as f64 / self.pixels as f64
        }
    }
}

pub fn target_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, max_dist: f64) -> TargetCounts {
    let truth = components(gt, h, w);
    let found = components(pred, h, w);
    let mut used = vec![false; found.len()];
    let mut detected = 0;
    for (gy, gx, _) in &truth {
        let hit = found.iter().enumerate().find(|(j, (py, px, _))| {
            !used[*j] && ((py - gy).powi(2) + (px - gx).powi(2)).sqrt() <= max_dist
        });
        if let Some((j, _)) = hit {
            used[j] = true;
            detected += 1;
        }
    }
    let false_pixels = found
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|((_, _, m), _)| m.len() as u64)
        .sum();
    TargetCounts {
        targets: truth.len() as u64,
        detected,
        false_pixels,
        pixels: (h * w) as u64,
    }
}

/// Centroid distance used by the target-level mode.
pub const TARGET_MATCH_DIST: f64 = 3.0;

/// Aggregate evaluation at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub images: usize,
    pub counts: ConfusionCounts,
    pub iou: f64,
    /// 0 when no image contains a target.
    pub niou: f64,
    /// 0 when no image contains a target.
    pub pd: f64,
    /// Raw per-pixel rate (multiply by 10⁶ for tables).
    pub fa: f64,
    /// Images without ground-truth positives, excluded from Pd and nIoU.
    pub pd_undefined: usize,
    pub target: Option<TargetCounts>,
}

/// Evaluate binarized probability maps against masks. Each entry of `maps`
/// pairs a probability map with its mask and extents `(h, w)`.
pub fn evaluate(
    maps: &[(&[f64], &[u8], usize, usize)],
    threshold: f64,
    target_level: bool,
) -> Result<MetricsReport, MetricsError> {
    let mut per_image = Vec::with_capacity(maps.len());
    let mut total = ConfusionCounts::default();
    let mut target = target_level.then(TargetCounts::default);
    for &(probs, gt, h, w) in maps {
        let pred = binarize(probs, threshold);
        let c = confusion(&pred, gt)?;
        total.add(&c);
        per_image.push(c);
        if let Some(t) = target.as_mut() {
            t.add(&target_counts(&pred, gt, h, w, TARGET_MATCH_DIST));
        }
    }
    Ok(MetricsReport {
        threshold,
        images: maps.len(),
        counts: total,
        iou: iou(&total),
        niou: niou(&per_image).unwrap_or(0.0),
        pd: pd(&total).unwrap_or(0.0),
        fa: fa(&total, total.total()),
        pd_undefined: per_image.iter().filter(|c| c.positives() == 0).count(),
        target,
    })
}

impl MetricsReport {
    /// `metric,value` rows; every value is written in shortest round-trip
    /// form.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("threshold", self.threshold.to_string()),
            ("images", self.images.to_string()),
            ("iou", self.iou.to_string()),
            ("niou", self.niou.to_string()),
            ("pd", self.pd.to_string()),
            ("fa_e6", (self.fa * 1e6).to_string()),
            ("tp", self.counts.tp.to_string()),
            ("fp", self.counts.fp.to_string()),
            ("fn", self.counts.fn_.to_string()),
            ("tn", self.counts.tn.to_string()),
            ("pd_undefined_images", self.pd_undefined.to_string()),
        ];
        if let Some(t) = &self.target {
            rows.push(("target_pd", t.pd().unwrap_or(0.0).to_string()));
            rows.push(("target_fa_e6", (t.fa() * 1e6).to_string()));
            rows.push(("targets", t.targets.to_string()));
            rows.push(("targets_detected", t.detected.to_string()));
            rows.push(("target_false_pixels", t.false_pixels.to_string()));
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    /// Inverse of [`MetricsReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(',').ok_or(MetricsError::Parse {
                line: i + 1,
                message: "expected metric,value".into(),
            })?;
            map.insert(k.to_string(), (i + 1, v.to_string()));
        }
        fn get<V: std::str::FromStr>(
            map: &std::collections::HashMap<String, (usize, String)>,
            key: &str,
        ) -> Result<V, MetricsError> {
            let (line, v) = map.get(key).ok_or(MetricsError::Parse {
                line: 0,
                message: format!("missing {key}"),
            })?;
            v.parse().map_err(|_| MetricsError::Parse {
                line: *line,
                message: format!("bad value for {key}"),
            })
        }
        let target = if map.contains_key("targets") {
            Some(TargetCounts {
                targets: get(&map, "targets")?,
                detected: get(&map, "targets_detected")?,
                false_pixels: get(&map, "target_false_pixels")?,
                pixels: 0,
            })
        } else {
            None
        };
        let counts = ConfusionCounts {
            tp: get(&map, "tp")?,
            fp: get(&map, "fp")?,
            fn_: get(&map, "fn")?,
            tn: get(&map, "tn")?,
        };
        let mut target = target;
        if let Some(t) = target.as_mut() {
            t.pixels = counts.total();
        }
        Ok(MetricsReport {
            threshold: get(&map, "threshold")?,
            images: get(&map, "images")?,
            counts,
            iou: get(&map, "iou")?,
            niou: get(&map, "niou")?,
            pd: get(&map, "pd")?,
            fa: get::<f64>(&map, "fa_e6")? / 1e6,
            pd_undefined: get(&map, "pd_undefined_images")?,
            target,
        })
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("IoU".to_string(), format!("{:.4}", self.iou)),
            ("nIoU".to_string(), format!("{:.4}", self.niou)),
            ("Pd".to_string(), format!("{:.4}", self.pd)),
            ("Fa (x1e-6)".to_string(), format!("{:.2}", self.fa * 1e6)),
        ];
        if let Some(t) = &self.target {
            rows.push(("target Pd".into(), format!("{:.4}", t.pd().unwrap_or(0.0))));
            rows.push(("target Fa (x1e-6)".into(), format!("{:.2}", t.fa() * 1e6)));
        }
        rows.push(("images".into(), self.images.to_string()));
        rows.push(("threshold".into(), self.threshold.to_string()));
        if self.pd_undefined > 0 {
            rows.push(("images without targets".into(), self.pd_undefined.to_string()));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>10}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extra_pixels_halve_iou() {
        let mut gt = vec![0u8; 16];
        let mut pred = vec![0u8; 16];
        for i in 0..4 {
            gt[i] = 1;
            pred[i] = 1;
            pred[8 + i] = 1;
        }
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(iou(&c), 0.5);
        assert_eq!(pd(&c), Some(1.0));
    }

    #[test]
    fn non_binary_rejected() {
        assert_eq!(
            confusion(&[0, 2], &[0, 1]),
            Err(MetricsError::NonBinary { index: 1, value: 2 })
        );
    }

    #[test]
    fn target_level_matching() {
        // 8×8 with two targets; prediction finds one and adds a far blob.
        let (h, w) = (8, 8);
        let mut gt = vec![0u8; 64];
        let mut pred = vec![0u8; 64];
        gt[9] = 1;
        gt[54] = 1;
        pred[10] = 1;
        pred[7] = 1;
        pred[15] = 1;
        let t = target_counts(&pred, &gt, h, w, TARGET_MATCH_DIST);
        assert_eq!(t.targets, 2);
        assert_eq!(t.detected, 1);
        assert_eq!(t.false_pixels, 2);
    }

    #[test]
    fn csv_round_trip() {
        let probs = [0.9, 0.2, 0.7, 0.1];
        let gt = [1, 0, 0, 1];
        let r = evaluate(&[(&probs[..], &gt[..], 2, 2)], 0.5, true).unwrap();
        let back = MetricsReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_table(), r.to_table());
    }

    #[test]
    fn threshold_validation() {
        let m = [0.5];
        let g = [1u8];
        assert_eq!(roc_sweep(&[&m], &[&g], &[]), Err(MetricsError::NoThresholds));
        assert_eq!(roc_sweep(&[&m], &[&g], &[0.5, 0.5]), Err(MetricsError::Order(1)));
    }
}
