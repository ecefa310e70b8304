//! Evaluation harness: grid-anchor candidate generation, the `ACC_{K/N}`
//! accuracy family over MOS-ranked annotations, and dataset-level IoU /
//! boundary-displacement reports on the top-i proposals.
//!
//! Two crops count as equivalent when their IoU is at least `eps` (closed
//! comparison; the threshold is exposed as a flag). Within an image each
//! annotation can satisfy at most one prediction, matched greedily in
//! prediction rank order, so a single annotation cannot inflate `hits/K`.
//! `mean_acc` averages `ACC_{K/N}` over `K = 1..4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{disp_unchecked, iou_unchecked, CropBox, ImageSize};
use crate::model::CropProposal;
use crate::par;

/// Reference crop with its mean opinion score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedCandidate {
    pub bbox: CropBox,
    pub mos: f64,
}

/// One crop entry in the annotation JSONL format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CropEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub mos: f64,
}

/// One image row in the annotation JSONL format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRow {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub crops: Vec<CropEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl AnnotationRow {
    pub fn candidates(&self) -> Result<Vec<AnnotatedCandidate>> {
        self.crops
            .iter()
            .map(|c| {
                Ok(AnnotatedCandidate {
                    bbox: CropBox::new(c.bbox[0], c.bbox[1], c.bbox[2], c.bbox[3])?,
                    mos: c.mos,
                })
            })
            .collect()
    }
}

/// Read JSON-lines annotations; blank lines are ignored.
pub fn read_annotations(path: &std::path::Path) -> Result<Vec<AnnotationRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: AnnotationRow = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_annotations(path: &std::path::Path, rows: &[AnnotationRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

const ANCHOR_FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
/// Offsets per fraction: small crops get more placements.
const ANCHOR_STEPS: [usize; 5] = [3, 2, 2, 1, 1];
const ASPECT_MIN: f64 = 0.5;
const ASPECT_MAX: f64 = 2.0;

/// Deterministic grid-anchor candidates: width/height fractions 0.5..0.9 at
/// uniform offsets, pixel aspect ratio clipped to `[0.5, 2.0]`, uniformly
/// subsampled when the count exceeds `max_candidates`.
pub fn generate_grid_anchors(size: &ImageSize, max_candidates: usize) -> Vec<CropBox> {
    let mut out = Vec::new();
    let (w, h) = (f64::from(size.width), f64::from(size.height));
    let offsets = |f: f64, steps: usize| -> Vec<f64> {
        if steps == 1 {
            vec![(1.0 - f) / 2.0]
        } else {
            (0..steps)
                .map(|i| i as f64 * (1.0 - f) / (steps - 1) as f64)
                .collect()
        }
    };
    for (fi, &fw) in ANCHOR_FRACTIONS.iter().enumerate() {
        for (fj, &fh) in ANCHOR_FRACTIONS.iter().enumerate() {
            let aspect = (fw * w) / (fh * h);
            if !(ASPECT_MIN - 1e-9..=ASPECT_MAX + 1e-9).contains(&aspect) {
                continue;
            }
            for &ox in &offsets(fw, ANCHOR_STEPS[fi]) {
                for &oy in &offsets(fh, ANCHOR_STEPS[fj]) {
                    out.push(CropBox {
                        x1: ox,
                        y1: oy,
                        x2: ox + fw,
                        y2: oy + fh,
                    });
                }
            }
        }
    }
    if out.len() > max_candidates && max_candidates > 0 {
        let total = out.len();
        out = (0..max_candidates)
            .map(|i| out[i * total / max_candidates])
            .collect();
    }
    out
}

/// Crop equivalence at threshold `eps` (closed: IoU >= eps).
pub fn is_equivalent(pred: &CropBox, reference: &CropBox, eps: f64) -> Result<bool> {
    Ok(crate::geometry::iou(pred, reference)? >= eps)
}

/// Aligned predictions and annotations for one image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    pub predictions: Vec<CropProposal>,
    pub annotations: Vec<AnnotatedCandidate>,
}

fn sorted_predictions(img: &EvalImage) -> Vec<CropProposal> {
    let mut p = img.predictions.clone();
    p.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    p
}

/// MOS-descending annotation order; ties keep file order.
fn sorted_annotations(img: &EvalImage) -> Vec<AnnotatedCandidate> {
    let mut a = img.annotations.clone();
    a.sort_by(|x, y| y.mos.partial_cmp(&x.mos).unwrap_or(std::cmp::Ordering::Equal));
    a
}

/// Per-image `ACC_{K/N}`: of the top-K predictions, the fraction equivalent
/// to some top-N annotation, each annotation usable once.
fn acc_single_image(img: &EvalImage, k: usize, n: usize, eps: f64) -> Option<f64> {
    if img.annotations.len() < n || img.predictions.len() < k {
        return None;
    }
    let preds = sorted_predictions(img);
    let anns = sorted_annotations(img);
    let mut used = vec![false; n];
    let mut hits = 0usize;
    for p in preds.iter().take(k) {
        let mut best: Option<(usize, f64)> = None;
        for (ai, a) in anns.iter().take(n).enumerate() {
            if used[ai] {
                continue;
            }
            let v = iou_unchecked(&p.bbox, &a.bbox);
            if v >= eps && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ai, v));
            }
        }
        if let Some((ai, _)) = best {
            used[ai] = true;
            hits += 1;
        }
    }
    Some(hits as f64 / k as f64)
}

/// Dataset `ACC_{K/N}`: mean of per-image values. Images with fewer than N
/// annotations or fewer than K predictions are excluded with a warning.
/// Returns `(accuracy, images_used)`; accuracy is `None` when nothing
/// qualified.
pub fn acc_k_n(images: &[EvalImage], k: usize, n: usize, eps: f64) -> (Option<f64>, usize) {
    let per_image = par::map_slice(images, |img| acc_single_image(img, k, n, eps));
    let mut sum = 0.0;
    let mut used = 0usize;
    for (img, v) in images.iter().zip(per_image) {
        match v {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => log::warn!(
                "image `{}` excluded from ACC_{{{k}/{n}}}: needs >= {n} annotations and >= {k} predictions",
                img.id
            ),
        }
    }
    if used == 0 {
        (None, 0)
    } else {
        (Some(sum / used as f64), used)
    }
}

/// Average of `ACC_{K/N}` over `K in 1..=4`.
pub fn mean_acc(images: &[EvalImage], n: usize, eps: f64) -> Option<f64> {
    let mut sum = 0.0;
    for k in 1..=4 {
        sum += acc_k_n(images, k, n, eps).0?;
    }
    Some(sum / 4.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccCell {
    pub k: usize,
    pub n: usize,
    pub value: Option<f64>,
    pub images_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerImageRow {
    pub id: String,
    /// Best IoU within the top-i proposals, i = 1..3.
    pub iou: [f64; 3],
    /// Best (lowest) displacement within the top-i proposals.
    pub disp: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub eps: f64,
    pub image_count: usize,
    /// `iou[i-1]` is the dataset mean of the best IoU over the top-i
    /// proposals; non-decreasing in i.
    pub iou: [f64; 3],
    pub disp: [f64; 3],
    pub acc: Vec<AccCell>,
    pub mean_acc_5: Option<f64>,
    pub mean_acc_10: Option<f64>,
    pub per_image: Vec<PerImageRow>,
}

/// Full dataset evaluation: top-i IoU/Disp plus the ACC table for
/// `K in 1..4`, `N in {5, 10}`.
pub fn evaluate_dataset(images: &[EvalImage], eps: f64) -> Result<EvalReport> {
    for img in images {
        if img.predictions.is_empty() || img.annotations.is_empty() {
            return Err(Error::Validation(format!(
                "image `{}` needs at least one prediction and one annotation",
                img.id
            )));
        }
        for p in &img.predictions {
            p.bbox.validate()?;
        }
        for a in &img.annotations {
            a.bbox.validate()?;
        }
    }

    let rows: Vec<PerImageRow> = par::map_slice(images, |img| {
        let preds = sorted_predictions(img);
        let mut iou = [0.0f64; 3];
        let mut dsp = [0.0f64; 3];
        for i in 0..3 {
            let take = (i + 1).min(preds.len());
            let mut best_iou = 0.0f64;
            let mut best_disp = f64::INFINITY;
            for p in preds.iter().take(take) {
                for a in &img.annotations {
                    best_iou = best_iou.max(iou_unchecked(&p.bbox, &a.bbox));
                    best_disp = best_disp.min(disp_unchecked(&p.bbox, &a.bbox));
                }
            }
            iou[i] = best_iou;
            dsp[i] = best_disp;
        }
        PerImageRow {
            id: img.id.clone(),
            iou,
            disp: dsp,
        }
    });

    let n_img = rows.len();
    let mut iou = [0.0f64; 3];
    let mut dsp = [0.0f64; 3];
    if n_img > 0 {
        for r in &rows {
            for i in 0..3 {
                iou[i] += r.iou[i];
                dsp[i] += r.disp[i];
            }
        }
        for i in 0..3 {
            iou[i] /= n_img as f64;
            dsp[i] /= n_img as f64;
        }
    }

    let mut acc = Vec::new();
    for n in [5usize, 10] {
        for k in 1..=4 {
            let (value, images_used) = acc_k_n(images, k, n, eps);
            acc.push(AccCell {
                k,
                n,
                value,
                images_used,
            });
        }
    }

    Ok(EvalReport {
        eps,
        image_count: n_img,
        iou,
        disp: dsp,
        acc,
        mean_acc_5: mean_acc(images, 5, eps),
        mean_acc_10: mean_acc(images, 10, eps),
        per_image: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> CropBox {
        CropBox::new(x1, y1, x2, y2).unwrap()
    }

    fn prop(b: CropBox, score: f64) -> CropProposal {
        CropProposal { bbox: b, score }
    }

    fn ann(b: CropBox, mos: f64) -> AnnotatedCandidate {
        AnnotatedCandidate { bbox: b, mos }
    }

    #[test]
    fn anchors_capped_and_valid() {
        for (w, h) in [(100u32, 100u32), (640, 480), (300, 613), (2000, 1000)] {
            let anchors = generate_grid_anchors(&ImageSize::new(w, h).unwrap(), 90);
            assert!(anchors.len() <= 90, "{}x{} gave {}", w, h, anchors.len());
            assert!(!anchors.is_empty());
            for a in &anchors {
                a.validate().unwrap();
            }
        }
        // A sliver image admits no candidate within the aspect limits.
        assert!(generate_grid_anchors(&ImageSize::new(37, 613).unwrap(), 90).is_empty());
    }

    #[test]
    fn anchors_square_image_symmetric_under_axis_swap() {
        let anchors = generate_grid_anchors(&ImageSize::new(500, 500).unwrap(), 90);
        let key = |b: &CropBox| {
            (
                (b.x1 * 1e9).round() as i64,
                (b.y1 * 1e9).round() as i64,
                (b.x2 * 1e9).round() as i64,
                (b.y2 * 1e9).round() as i64,
            )
        };
        let set: std::collections::HashSet<_> = anchors.iter().map(key).collect();
        for b in &anchors {
            let swapped = bx(b.y1, b.x1, b.y2, b.x2);
            assert!(set.contains(&key(&swapped)), "missing swap of {b:?}");
        }
    }

    #[test]
    fn anchors_respect_aspect_limits_on_panorama() {
        let anchors = generate_grid_anchors(&ImageSize::new(1000, 500).unwrap(), 90);
        for a in &anchors {
            let aspect = (a.width() * 1000.0) / (a.height() * 500.0);
            assert!(
                (0.5 - 1e-9..=2.0 + 1e-9).contains(&aspect),
                "aspect {aspect} outside [0.5, 2]"
            );
        }
    }

    #[test]
    fn anchors_size_covariant() {
        let a = generate_grid_anchors(&ImageSize::new(120, 90).unwrap(), 90);
        let b = generate_grid_anchors(&ImageSize::new(480, 360).unwrap(), 90);
        assert_eq!(a, b);
    }

    #[test]
    fn anchors_subsample_when_over_cap() {
        let full = generate_grid_anchors(&ImageSize::new(500, 500).unwrap(), 90);
        let capped = generate_grid_anchors(&ImageSize::new(500, 500).unwrap(), 10);
        assert_eq!(capped.len(), 10);
        for c in &capped {
            assert!(full.contains(c));
        }
    }

    #[test]
    fn equivalence_threshold_fixtures() {
        assert!(is_equivalent(&bx(0.1, 0.1, 0.9, 0.9), &bx(0.1, 0.1, 0.9, 0.9), 0.85).unwrap());
        // IoU 0.92 counts as equivalent, IoU 0.80 does not.
        assert!(is_equivalent(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.0, 0.0, 0.92, 1.0), 0.85).unwrap());
        assert!(!is_equivalent(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.0, 0.0, 0.8, 1.0), 0.85).unwrap());
    }

    fn toy_images() -> Vec<EvalImage> {
        // Image A: top prediction matches the best annotation exactly.
        // Image B: nothing overlaps enough.
        vec![
            EvalImage {
                id: "a".into(),
                predictions: vec![
                    prop(bx(0.1, 0.1, 0.6, 0.6), 0.9),
                    prop(bx(0.3, 0.3, 0.9, 0.9), 0.5),
                ],
                annotations: vec![
                    ann(bx(0.1, 0.1, 0.6, 0.6), 5.0),
                    ann(bx(0.3, 0.3, 0.9, 0.9), 4.0),
                ],
            },
            EvalImage {
                id: "b".into(),
                predictions: vec![
                    prop(bx(0.0, 0.0, 0.3, 0.3), 1.0),
                    prop(bx(0.7, 0.7, 1.0, 1.0), 0.2),
                ],
                annotations: vec![
                    ann(bx(0.4, 0.4, 0.6, 0.6), 3.0),
                    ann(bx(0.2, 0.5, 0.5, 0.9), 2.0),
                ],
            },
        ]
    }

    #[test]
    fn acc_identity_and_disjoint() {
        let images = toy_images();
        let (v, used) = acc_k_n(&images[..1], 2, 2, 0.85);
        assert_eq!(used, 1);
        assert_eq!(v.unwrap(), 1.0);
        let (v, _) = acc_k_n(&images[1..], 2, 2, 0.85);
        assert_eq!(v.unwrap(), 0.0);
        let (v, _) = acc_k_n(&images, 2, 2, 0.85);
        assert_eq!(v.unwrap(), 0.5);
    }

    #[test]
    fn acc_excludes_underpopulated_images() {
        let images = toy_images();
        // N=5 exceeds both images' annotation counts.
        let (v, used) = acc_k_n(&images, 1, 5, 0.85);
        assert_eq!(used, 0);
        assert!(v.is_none());
    }

    #[test]
    fn annotation_reuse_is_forbidden() {
        // Two predictions both match the single good annotation; only one hit.
        let images = vec![EvalImage {
            id: "x".into(),
            predictions: vec![
                prop(bx(0.1, 0.1, 0.9, 0.9), 1.0),
                prop(bx(0.1, 0.1, 0.9, 0.9), 0.9),
            ],
            annotations: vec![ann(bx(0.1, 0.1, 0.9, 0.9), 5.0), ann(bx(0.0, 0.0, 0.2, 0.2), 1.0)],
        }];
        let (v, _) = acc_k_n(&images, 2, 2, 0.85);
        assert_eq!(v.unwrap(), 0.5);
    }

    #[test]
    fn mean_acc_is_arithmetic_mean_over_k() {
        // Construct one image where top-1 hits, top-2 has 1 hit, etc. giving
        // acc values 1, 0.5, 1/3, 0.25 over K=1..4 -> mean 0.52083...
        let images = vec![EvalImage {
            id: "m".into(),
            predictions: vec![
                prop(bx(0.1, 0.1, 0.9, 0.9), 4.0),
                prop(bx(0.0, 0.0, 0.2, 0.2), 3.0),
                prop(bx(0.0, 0.8, 0.2, 1.0), 2.0),
                prop(bx(0.8, 0.0, 1.0, 0.2), 1.0),
            ],
            annotations: (0..5)
                .map(|i| {
                    let off = i as f64 * 0.002;
                    ann(bx(0.1 + off, 0.1, 0.9, 0.9), 5.0 - i as f64)
                })
                .collect(),
        }];
        let expect = (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0;
        let got = mean_acc(&images, 5, 0.85).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn evaluate_dataset_perfect_predictions() {
        let anns: Vec<AnnotatedCandidate> = (0..10)
            .map(|i| {
                let o = i as f64 * 0.05;
                ann(bx(0.0 + o, 0.0, 0.5 + o, 0.5), 10.0 - i as f64)
            })
            .collect();
        let preds: Vec<CropProposal> = anns
            .iter()
            .map(|a| prop(a.bbox, a.mos))
            .collect();
        let images = vec![EvalImage {
            id: "p".into(),
            predictions: preds,
            annotations: anns,
        }];
        let rep = evaluate_dataset(&images, 0.85).unwrap();
        for i in 0..3 {
            assert_eq!(rep.iou[i], 1.0);
            assert_eq!(rep.disp[i], 0.0);
        }
        for cell in &rep.acc {
            assert_eq!(cell.value.unwrap(), 1.0, "K={} N={}", cell.k, cell.n);
        }
        assert_eq!(rep.mean_acc_5.unwrap(), 1.0);
        assert_eq!(rep.mean_acc_10.unwrap(), 1.0);
    }

    #[test]
    fn evaluate_dataset_topi_monotone() {
        let images = toy_images();
        let rep = evaluate_dataset(&images, 0.85).unwrap();
        assert!(rep.iou[0] <= rep.iou[1] && rep.iou[1] <= rep.iou[2]);
        assert!(rep.disp[0] >= rep.disp[1] && rep.disp[1] >= rep.disp[2]);
    }

    #[test]
    fn evaluate_dataset_matches_hand_computation() {
        let images = toy_images();
        let rep = evaluate_dataset(&images, 0.85).unwrap();
        // Image a: top-1 IoU = 1.0. Image b: best IoU of pred0 over both
        // annotations: vs (0.4..0.6): no overlap = 0; vs (0.2,0.5,0.5,0.9):
        // inter = 0.1*0 -> boxes (0,0,.3,.3) vs (.2,.5,.5,.9): y ranges
        // disjoint -> 0. So iou_1 = (1.0 + 0.0)/2 = 0.5.
        assert!((rep.iou[0] - 0.5).abs() < 1e-12);
        // disp image a top-1: exact match -> 0. Image b pred0 vs ann0:
        // (|0-.4|+|0-.4|+|.3-.6|+|.3-.6|)/4 = 0.35; vs ann1:
        // (|0-.2|+|0-.5|+|.3-.5|+|.3-.9|)/4 = 0.375 -> min 0.35.
        assert!((rep.disp[0] - (0.0 + 0.35) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn annotations_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let rows = vec![AnnotationRow {
            id: "img0".into(),
            width: 640,
            height: 480,
            crops: vec![CropEntry {
                bbox: [0.1, 0.2, 0.9, 0.8],
                mos: 4.25,
            }],
            caption: Some("a boat on a lake".into()),
        }];
        write_annotations(&path, &rows).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(rows, back);
    }
}
