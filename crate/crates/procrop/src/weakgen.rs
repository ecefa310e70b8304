//! Weak dataset generation: embed a well-composed source image inside a
//! larger procedurally expanded canvas (mirror extension, blur, low noise)
//! so the source acts as the known good crop, sample random crop/label
//! pairs around it, and refine pseudo labels with the model in the loop.
//!
//! Everything is a pure function of `(sources, config, seed)`: each pair
//! derives its own seed from the global seed and source id, so output is
//! independent of scheduling.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, WeakGenConfig};
use crate::embed::{hex_string, EmbeddingIndex};
use crate::error::{Error, Result};
use crate::eval::{AnnotationRow, CropEntry};
use crate::geometry::{contains_unchecked, iou_unchecked, CropBox};
use crate::model::{CropProposal, ProposalModel};
use crate::par;

const SURROUND_BLUR_SIGMA: f32 = 3.0;
const SURROUND_NOISE_AMP: i16 = 6;
const CROP_ASPECT_MIN: f64 = 0.5;
const CROP_ASPECT_MAX: f64 = 2.0;

/// Expanded canvas plus the embedded ground-truth region and its evolving
/// pseudo-label set (label #1 is always the ground-truth region).
#[derive(Debug, Clone)]
pub struct WeakPair {
    pub canvas: RgbImage,
    pub gt_region: CropBox,
    pub pseudo_labels: Vec<CropProposal>,
    pub source_id: String,
    pub seed: u64,
}

/// Deterministic per-pair seed from `(global seed, source id, canvas index)`.
pub fn pair_seed(global: u64, source_id: &str, canvas_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(source_id.as_bytes());
    h.update((canvas_index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[0..8].try_into().unwrap())
}

fn reflect(t: i64, n: i64) -> usize {
    let m = t.rem_euclid(2 * n);
    if m < n {
        m as usize
    } else {
        (2 * n - 1 - m) as usize
    }
}

/// Expand one source image onto a larger canvas. The canvas side lengths are
/// uniform in `[canvas_min, canvas_max]`, the source keeps its aspect ratio
/// and covers a uniform random area fraction in `[area_min, area_max]`, and
/// the surround is mirror-extended, blurred, and lightly noised. The
/// placement is recorded exactly in `gt_region`.
pub fn expand_canvas(image: &RgbImage, cfg: &WeakGenConfig, seed: u64) -> Result<WeakPair> {
    expand_canvas_with_id(image, cfg, seed, "source")
}

pub fn expand_canvas_with_id(
    image: &RgbImage,
    cfg: &WeakGenConfig,
    seed: u64,
    source_id: &str,
) -> Result<WeakPair> {
    if image.width() < 16 || image.height() < 16 {
        return Err(Error::Validation(format!(
            "source `{source_id}` must be at least 16x16, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64_compat(seed);

    let r = f64::from(image.width()) / f64::from(image.height());
    let a = if (cfg.area_max - cfg.area_min).abs() < 1e-15 {
        cfg.area_min
    } else {
        rng.gen_range(cfg.area_min..cfg.area_max)
    };

    // The canvas aspect q = W/H must satisfy a*r <= q <= r/a so the region
    // fits; intersect with what the side bounds allow.
    let q_attain_lo = f64::from(cfg.canvas_min) / f64::from(cfg.canvas_max);
    let q_attain_hi = f64::from(cfg.canvas_max) / f64::from(cfg.canvas_min);
    let q_lo = q_attain_lo.max(a * r);
    let q_hi = q_attain_hi.min(r / a);
    if q_lo > q_hi {
        return Err(Error::Validation(format!(
            "canvas range {}..{} with area {:.2}..{:.2} is infeasible for source aspect ratio {r:.3}",
            cfg.canvas_min, cfg.canvas_max, cfg.area_min, cfg.area_max
        )));
    }
    let q = if q_hi - q_lo < 1e-12 {
        q_lo
    } else {
        rng.gen_range(q_lo..q_hi)
    };
    let h_lo = (f64::from(cfg.canvas_min) / q).max(f64::from(cfg.canvas_min));
    let h_hi = (f64::from(cfg.canvas_max) / q).min(f64::from(cfg.canvas_max));
    let hh = if h_hi - h_lo < 1.0 {
        h_lo
    } else {
        rng.gen_range(h_lo..h_hi)
    };
    let canvas_h = (hh.round() as u32).clamp(cfg.canvas_min, cfg.canvas_max);
    let canvas_w = ((q * f64::from(canvas_h)).round() as u32).clamp(cfg.canvas_min, cfg.canvas_max);

    let (rw, rh) = if (1.0 - a).abs() < 1e-12 {
        (canvas_w, canvas_h)
    } else {
        let area = a * f64::from(canvas_w) * f64::from(canvas_h);
        let rh = (area / r).sqrt();
        let rw = r * rh;
        (
            (rw.round() as u32).clamp(8, canvas_w),
            (rh.round() as u32).clamp(8, canvas_h),
        )
    };
    let x0 = if canvas_w > rw {
        rng.gen_range(0..=(canvas_w - rw))
    } else {
        0
    };
    let y0 = if canvas_h > rh {
        rng.gen_range(0..=(canvas_h - rh))
    } else {
        0
    };

    let resized = image::imageops::resize(image, rw, rh, image::imageops::FilterType::Triangle);

    // Mirror-extend the placed region over the whole canvas.
    let mut canvas = RgbImage::new(canvas_w, canvas_h);
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let u = reflect(x as i64 - x0 as i64, rw as i64);
            let v = reflect(y as i64 - y0 as i64, rh as i64);
            canvas.put_pixel(x, y, *resized.get_pixel(u as u32, v as u32));
        }
    }
    let mut canvas = image::imageops::blur(&canvas, SURROUND_BLUR_SIGMA);
    // The original content stays sharp.
    for y in 0..rh {
        for x in 0..rw {
            canvas.put_pixel(x0 + x, y0 + y, *resized.get_pixel(x, y));
        }
    }
    // Low-amplitude noise on the surround only; row-major draw order keeps
    // this independent of any parallel caller.
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let inside = x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh;
            if inside {
                continue;
            }
            let p = canvas.get_pixel_mut(x, y);
            for c in 0..3 {
                let d: i16 = rng.gen_range(-SURROUND_NOISE_AMP..=SURROUND_NOISE_AMP);
                p.0[c] = (i16::from(p.0[c]) + d).clamp(0, 255) as u8;
            }
        }
    }

    let gt_region = CropBox::new(
        f64::from(x0) / f64::from(canvas_w),
        f64::from(y0) / f64::from(canvas_h),
        f64::from(x0 + rw) / f64::from(canvas_w),
        f64::from(y0 + rh) / f64::from(canvas_h),
    )?;
    Ok(WeakPair {
        canvas,
        gt_region,
        pseudo_labels: vec![CropProposal {
            bbox: gt_region,
            score: 1.0,
        }],
        source_id: source_id.to_string(),
        seed,
    })
}

trait SeedFromU64 {
    fn seed_from_u64_compat(seed: u64) -> Self;
}

impl SeedFromU64 for ChaCha8Rng {
    fn seed_from_u64_compat(seed: u64) -> Self {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(seed)
    }
}

/// Re-express `inner` in the coordinate frame of `crop` (both in the same
/// outer frame; `crop` must contain `inner`).
pub fn reframe_into(crop: &CropBox, inner: &CropBox) -> CropBox {
    let w = crop.width();
    let h = crop.height();
    CropBox {
        x1: ((inner.x1 - crop.x1) / w).clamp(0.0, 1.0),
        y1: ((inner.y1 - crop.y1) / h).clamp(0.0, 1.0),
        x2: ((inner.x2 - crop.x1) / w).clamp(0.0, 1.0),
        y2: ((inner.y2 - crop.y1) / h).clamp(0.0, 1.0),
    }
}

/// Random training crops around the embedded region: every crop contains
/// `gt_region`, pixel aspect stays in `[0.5, 2]`, and the returned label is
/// the region re-expressed in the crop frame.
pub fn sample_random_crops(
    pair: &WeakPair,
    n: usize,
    seed: u64,
) -> Result<Vec<(CropBox, CropBox)>> {
    if n == 0 {
        return Err(Error::Validation("crop count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64_compat(seed);
    let g = pair.gt_region;
    let (cw, ch) = (f64::from(pair.canvas.width()), f64::from(pair.canvas.height()));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = CropBox {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        for _attempt in 0..64 {
            let x1 = if g.x1 > 0.0 { rng.gen_range(0.0..g.x1) } else { 0.0 };
            let y1 = if g.y1 > 0.0 { rng.gen_range(0.0..g.y1) } else { 0.0 };
            let x2 = if g.x2 < 1.0 { rng.gen_range(g.x2..1.0) } else { 1.0 };
            let y2 = if g.y2 < 1.0 { rng.gen_range(g.y2..1.0) } else { 1.0 };
            let aspect = ((x2 - x1) * cw) / ((y2 - y1) * ch);
            if (CROP_ASPECT_MIN..=CROP_ASPECT_MAX).contains(&aspect) {
                chosen = CropBox { x1, y1, x2, y2 };
                break;
            }
        }
        let label = reframe_into(&chosen, &g);
        out.push((chosen, label));
    }
    Ok(out)
}

/// Greedy non-maximum suppression: keep highest-scored boxes whose IoU with
/// everything already kept stays below `iou_threshold`, up to `keep` boxes.
/// The output is a subset of the input.
pub fn nms(proposals: &[CropProposal], iou_threshold: f64, keep: usize) -> Vec<CropProposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .partial_cmp(&proposals[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<CropProposal> = Vec::new();
    for i in order {
        if kept.len() >= keep {
            break;
        }
        let p = proposals[i];
        if kept
            .iter()
            .all(|q| iou_unchecked(&p.bbox, &q.bbox) < iou_threshold)
        {
            kept.push(p);
        }
    }
    kept
}

/// One model-in-the-loop refinement pass over every pair: predict on the
/// canvas, keep proposals that contain the ground-truth region and have sane
/// aspect, merge with the existing labels under NMS diversity, keep the top
/// k by score. The ground-truth region always stays label #1.
pub fn refine_labels(
    model: &ProposalModel,
    index: Option<&EmbeddingIndex>,
    pairs: &mut [WeakPair],
    cfg: &WeakGenConfig,
) -> Result<()> {
    if model.epochs_trained == 0 {
        return Err(Error::Validation(
            "refinement requires a model trained through stage 1".into(),
        ));
    }
    let refined: Vec<Result<Vec<CropProposal>>> = par::map_slice(pairs, |pair| {
        let proposals = model.predict(&pair.canvas, index, None)?;
        let (cw, ch) = (
            f64::from(pair.canvas.width()),
            f64::from(pair.canvas.height()),
        );
        let mut candidates: Vec<CropProposal> = pair
            .pseudo_labels
            .iter()
            .skip(1)
            .copied()
            .chain(proposals.into_iter().filter(|p| {
                let aspect = (p.bbox.width() * cw) / (p.bbox.height() * ch);
                contains_unchecked(&p.bbox, &pair.gt_region)
                    && (CROP_ASPECT_MIN..=CROP_ASPECT_MAX).contains(&aspect)
            }))
            .collect();
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        // Seed NMS with the ground truth so it can never be displaced.
        let gt = CropProposal {
            bbox: pair.gt_region,
            score: 1.0,
        };
        let mut pool = vec![gt];
        pool.extend(candidates);
        let kept = nms(&pool, cfg.diversity_iou, cfg.labels_per_image);
        let mut labels = vec![gt];
        labels.extend(kept.into_iter().filter(|p| p.bbox != pair.gt_region));
        labels.truncate(cfg.labels_per_image.max(1));
        Ok(labels)
    });
    for (pair, labels) in pairs.iter_mut().zip(refined) {
        pair.pseudo_labels = labels?;
    }
    Ok(())
}

/// A weak dataset on disk: `images/` canvases, shared-format annotations,
/// and a manifest recording seeds, the config hash, and content hashes.
pub struct WeakDataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub pairs: Vec<WeakPair>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn annotations_path(dir: &Path) -> PathBuf {
    dir.join("annotations.jsonl")
}

fn canvas_sha(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.as_raw());
    hex_string(&h.finalize())
}

/// Generate the weak dataset for every readable image in `source_dir`.
/// Unreadable sources are skipped with a logged id. Returns the pair ids.
pub fn build_weak_dataset(
    source_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<String>> {
    let mut sources: Vec<PathBuf> = std::fs::read_dir(source_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::Validation(format!(
            "no source images (png/jpg) in {}",
            source_dir.display()
        )));
    }

    std::fs::create_dir_all(out_dir.join("images"))?;
    let cfg = &config.weakgen;

    struct Job {
        source: PathBuf,
        stem: String,
        canvas_index: usize,
    }
    let jobs: Vec<Job> = sources
        .iter()
        .flat_map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "src".into());
            (0..cfg.canvases_per_source).map(move |i| Job {
                source: p.clone(),
                stem: stem.clone(),
                canvas_index: i,
            })
        })
        .collect();

    let results: Vec<Option<(String, WeakPair)>> = par::map_slice(&jobs, |job| {
        let image = match image::open(&job.source) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable source `{}`: {e}", job.source.display());
                return None;
            }
        };
        let s = pair_seed(seed, &job.stem, job.canvas_index);
        match expand_canvas_with_id(&image, cfg, s, &job.stem) {
            Ok(pair) => Some((format!("{}_{:02}", job.stem, job.canvas_index), pair)),
            Err(e) => {
                log::warn!("skipping `{}` canvas {}: {e}", job.stem, job.canvas_index);
                None
            }
        }
    });

    let mut rows = Vec::new();
    let mut manifest = String::new();
    manifest.push_str("kind=weak-dataset\n");
    manifest.push_str(&format!("config_hash={}\n", config.hash()));
    manifest.push_str(&format!("seed={seed}\n"));
    let mut ids = Vec::new();
    for item in results.into_iter().flatten() {
        let (id, pair) = item;
        let file = out_dir.join("images").join(format!("{id}.png"));
        pair.canvas.save(&file)?;
        rows.push(AnnotationRow {
            id: id.clone(),
            width: pair.canvas.width(),
            height: pair.canvas.height(),
            crops: pair
                .pseudo_labels
                .iter()
                .map(|p| CropEntry {
                    bbox: p.bbox.as_array(),
                    mos: p.score,
                })
                .collect(),
            caption: None,
        });
        manifest.push_str(&format!(
            "pair id={id} source={} seed={} gt={:.6},{:.6},{:.6},{:.6} sha256={}\n",
            pair.source_id,
            pair.seed,
            pair.gt_region.x1,
            pair.gt_region.y1,
            pair.gt_region.x2,
            pair.gt_region.y2,
            canvas_sha(&pair.canvas)
        ));
        ids.push(id);
    }
    manifest.push_str(&format!("pairs={}\n", ids.len()));
    crate::eval::write_annotations(&annotations_path(out_dir), &rows)?;
    std::fs::write(manifest_path(out_dir), manifest)?;
    Ok(ids)
}

/// Load a weak dataset directory back into memory. The first crop of each
/// row is the ground-truth region.
pub fn load_weak_dataset(dir: &Path) -> Result<WeakDataset> {
    let rows = crate::eval::read_annotations(&annotations_path(dir))?;
    let manifest = std::fs::read_to_string(manifest_path(dir)).map_err(|e| Error::Format {
        path: manifest_path(dir).display().to_string(),
        reason: format!("missing weak-dataset manifest: {e}"),
    })?;
    let mut seeds = std::collections::HashMap::new();
    let mut source_ids = std::collections::HashMap::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("pair ") {
            let mut id = None;
            let mut seed = None;
            let mut source = None;
            for field in rest.split_whitespace() {
                if let Some(v) = field.strip_prefix("id=") {
                    id = Some(v.to_string());
                } else if let Some(v) = field.strip_prefix("seed=") {
                    seed = v.parse::<u64>().ok();
                } else if let Some(v) = field.strip_prefix("source=") {
                    source = Some(v.to_string());
                }
            }
            if let Some(id) = id {
                seeds.insert(id.clone(), seed.unwrap_or(0));
                source_ids.insert(id, source.unwrap_or_default());
            }
        }
    }

    let mut ids = Vec::with_capacity(rows.len());
    let mut pairs = Vec::with_capacity(rows.len());
    for row in rows {
        let img_path = dir.join("images").join(format!("{}.png", row.id));
        let canvas = image::open(&img_path)?.to_rgb8();
        let cands = row.candidates()?;
        if cands.is_empty() {
            return Err(Error::Validation(format!(
                "weak pair `{}` has no labels",
                row.id
            )));
        }
        pairs.push(WeakPair {
            canvas,
            gt_region: cands[0].bbox,
            pseudo_labels: cands
                .iter()
                .map(|c| CropProposal {
                    bbox: c.bbox,
                    score: c.mos,
                })
                .collect(),
            source_id: source_ids.get(&row.id).cloned().unwrap_or_default(),
            seed: seeds.get(&row.id).copied().unwrap_or(0),
        });
        ids.push(row.id);
    }
    Ok(WeakDataset {
        root: dir.to_path_buf(),
        ids,
        pairs,
    })
}

/// Rewrite the annotations of a weak dataset after refinement.
pub fn save_refined_annotations(ds: &WeakDataset) -> Result<()> {
    let rows: Vec<AnnotationRow> = ds
        .ids
        .iter()
        .zip(&ds.pairs)
        .map(|(id, pair)| AnnotationRow {
            id: id.clone(),
            width: pair.canvas.width(),
            height: pair.canvas.height(),
            crops: pair
                .pseudo_labels
                .iter()
                .map(|p| CropEntry {
                    bbox: p.bbox.as_array(),
                    mos: p.score,
                })
                .collect(),
            caption: None,
        })
        .collect();
    crate::eval::write_annotations(&annotations_path(&ds.root), &rows)
}
