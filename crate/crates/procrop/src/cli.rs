//! Command-line entry point: one binary with subcommands for index building,
//! retrieval, training, prediction, evaluation, weak-data generation,
//! pseudo-label refinement, and report printing.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical
//! failure. Every subcommand taking `--seed` is bit-deterministic across
//! runs on the same platform.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::embed::{EmbedCache, EmbeddingIndex, Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, read_annotations, AnnotationRow, CropEntry, EvalImage};
use crate::fusion::FusionMode;
use crate::model::{CropProposal, PredictSession, ProposalModel};
use crate::render::{render_overlay, report_summary};
use crate::train::{load_train_data, train};
use crate::weakgen::{build_weak_dataset, load_weak_dataset, refine_labels, save_refined_annotations};

#[derive(Parser)]
#[command(name = "procrop", version, about = "Retrieval-augmented aesthetic image cropping")]
pub struct Cli {
    /// Shared TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit machine-readable JSON on stdout where applicable.
    #[arg(long, global = true)]
    json: bool,
    /// Verbose logging.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an embedding index from images or a precomputed embedding file.
    BuildIndex {
        #[arg(long, conflicts_with = "embeddings")]
        images: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Encoder spec (`line-hist:GxG,B` or `file:PATH`); defaults to the
        /// configured retrieval encoder.
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the top-K most similar records for a query image.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict ranked crop proposals for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        /// Write a crop-overlay PNG here.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Optional caption for multi-modal fusion.
        #[arg(long)]
        caption: Option<String>,
    },
    /// Evaluate predictions against annotations (both in the shared JSONL
    /// format; prediction `mos` carries the model score).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        /// IoU equivalence threshold; defaults to the configured value.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a weak dataset by canvas expansion.
    Genweak {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine the pseudo labels of a weak dataset with a trained model.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Pretty-print a stored evaluation report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Command::BuildIndex {
            images,
            embeddings,
            encoder,
            out,
        } => cmd_build_index(&config, images, embeddings, encoder, &out),
        Command::Retrieve { index, query, k } => cmd_retrieve(&index, &query, k, cli.json),
        Command::Train { data, index, out } => cmd_train(&config, &data, index.as_deref(), &out),
        Command::Predict {
            ckpt,
            index,
            image,
            topk,
            render,
            caption,
        } => cmd_predict(
            &ckpt,
            index.as_deref(),
            &image,
            topk,
            render.as_deref(),
            caption.as_deref(),
            cli.json,
        ),
        Command::Evaluate { pred, ann, eps, out } => cmd_evaluate(
            &config,
            &pred,
            &ann,
            eps,
            out.as_deref(),
            cli.json,
        ),
        Command::Genweak { src, out } => {
            let ids = build_weak_dataset(&src, &out, &config, config.seed)?;
            println!("generated {} weak pairs in {}", ids.len(), out.display());
            Ok(())
        }
        Command::Refine {
            ckpt,
            data,
            rounds,
            index,
        } => cmd_refine(&config, &ckpt, &data, rounds, index.as_deref()),
        Command::Report { report } => cmd_report(&report, cli.json),
    }
}

fn cmd_build_index(
    config: &RunConfig,
    images: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    encoder: Option<String>,
    out: &Path,
) -> Result<()> {
    let index = match (images, embeddings) {
        (Some(dir), None) => {
            let spec_str = encoder.unwrap_or_else(|| config.retrieval.encoder.clone());
            let spec: EncoderSpec = spec_str.parse()?;
            let enc = Encoder::from_spec(&spec)?;
            let cache = EmbedCache::new(config.paths.cache_dir.as_deref().map(Path::new));
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("png") | Some("jpg") | Some("jpeg")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Validation(format!(
                    "no images (png/jpg) in {}",
                    dir.display()
                )));
            }
            let mut records = Vec::with_capacity(files.len());
            for f in &files {
                let id = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let bytes = std::fs::read(f)?;
                let record = cache.get_or_compute(&id, &bytes, &spec.to_string(), || {
                    let img = image::load_from_memory(&bytes)?.to_rgb8();
                    enc.encode(&id, &img)
                })?;
                records.push(record);
            }
            EmbeddingIndex::build(records, &spec.to_string())?
        }
        (None, Some(file)) => {
            let records = crate::embed::read_cache_file(&file)?;
            EmbeddingIndex::build(records, &format!("file:{}", file.display()))?
        }
        _ => {
            return Err(Error::Validation(
                "build-index needs exactly one of --images DIR or --embeddings FILE".into(),
            ))
        }
    };
    index.save(out)?;
    println!(
        "indexed {} records (m={}, d={}) -> {}",
        index.len(),
        index.m(),
        index.d(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RetrieveOutput<'a> {
    query: &'a str,
    k: usize,
    neighbors: Vec<NeighborOut>,
}

#[derive(Serialize)]
struct NeighborOut {
    image_id: String,
    similarity: f64,
}

fn cmd_retrieve(index_path: &Path, query: &Path, k: usize, json: bool) -> Result<()> {
    let index = EmbeddingIndex::load(index_path)?;
    let spec: EncoderSpec = index.metadata().encoder_id.parse().map_err(|_| {
        Error::Validation(format!(
            "index encoder `{}` cannot encode new queries; rebuild with a line-hist encoder",
            index.metadata().encoder_id
        ))
    })?;
    if matches!(spec, EncoderSpec::File(_)) {
        return Err(Error::Validation(
            "file-backed index cannot encode a query image; query embeddings must come from the same file".into(),
        ));
    }
    let enc = Encoder::from_spec(&spec)?;
    let img = image::open(query)?.to_rgb8();
    let record = enc.encode("query", &img)?;
    let result = index.retrieve(&record, k)?;
    if json {
        let out = RetrieveOutput {
            query: query.to_str().unwrap_or("query"),
            k: result.k(),
            neighbors: result
                .neighbors
                .iter()
                .map(|n| NeighborOut {
                    image_id: n.image_id.clone(),
                    similarity: n.similarity,
                })
                .collect(),
        };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for (i, n) in result.neighbors.iter().enumerate() {
            println!("{:>3}. {}  similarity {:.6}", i + 1, n.image_id, n.similarity);
        }
    }
    Ok(())
}

fn cmd_train(config: &RunConfig, data: &Path, index: Option<&Path>, out: &Path) -> Result<()> {
    let index = index.map(EmbeddingIndex::load).transpose()?;
    if config.fusion.mode != FusionMode::None && index.is_none() {
        return Err(Error::Validation(format!(
            "fusion mode `{}` requires --index",
            config.fusion.mode
        )));
    }
    let mut dataset = load_train_data(data)?;
    let (model, log) = train(&mut dataset, index.as_ref(), config)?;
    model.save(out)?;
    let log_path = PathBuf::from(format!("{}.log.json", out.display()));
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    println!(
        "trained {} epochs on {} samples -> {} (log: {})",
        model.epochs_trained,
        dataset.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    image: &'a str,
    proposals: Vec<ProposalOut>,
}

#[derive(Serialize)]
struct ProposalOut {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

fn cmd_predict(
    ckpt: &Path,
    index: Option<&Path>,
    image_path: &Path,
    topk: usize,
    render: Option<&Path>,
    caption: Option<&str>,
    json: bool,
) -> Result<()> {
    let model = ProposalModel::load(ckpt)?;
    let index = index.map(EmbeddingIndex::load).transpose()?;
    let session = PredictSession::new(model, index)?;
    let img = image::open(image_path)?.to_rgb8();
    let proposals = session.predict(&img, caption)?;
    let top: Vec<CropProposal> = proposals.iter().take(topk).copied().collect();

    if let Some(out) = render {
        render_overlay(&img, &top, topk, out)?;
    }
    if json {
        let out = PredictOutput {
            image: image_path.to_str().unwrap_or("image"),
            proposals: top
                .iter()
                .map(|p| ProposalOut {
                    bbox: p.bbox.as_array(),
                    score: p.score,
                })
                .collect(),
        };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else if render.is_none() {
        for (i, p) in top.iter().enumerate() {
            let b = p.bbox;
            println!(
                "{:>3}. box [{:.4}, {:.4}, {:.4}, {:.4}]  score {:.4}",
                i + 1,
                b.x1,
                b.y1,
                b.x2,
                b.y2,
                p.score
            );
        }
    }
    Ok(())
}

fn rows_to_eval_images(
    preds: &[AnnotationRow],
    anns: &[AnnotationRow],
) -> Result<Vec<EvalImage>> {
    let ann_by_id: std::collections::HashMap<&str, &AnnotationRow> =
        anns.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let ann = ann_by_id.get(p.id.as_str()).ok_or_else(|| {
            Error::Validation(format!("prediction id `{}` missing from annotations", p.id))
        })?;
        let predictions = p
            .candidates()?
            .into_iter()
            .map(|c| CropProposal {
                bbox: c.bbox,
                score: c.mos,
            })
            .collect();
        out.push(EvalImage {
            id: p.id.clone(),
            predictions,
            annotations: ann.candidates()?,
        });
    }
    Ok(out)
}

fn cmd_evaluate(
    config: &RunConfig,
    pred: &Path,
    ann: &Path,
    eps: Option<f64>,
    out: Option<&Path>,
    json: bool,
) -> Result<()> {
    let eps = eps.unwrap_or(config.evaluation.eps);
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Validation(format!(
            "--eps must be in (0, 1], got {eps}"
        )));
    }
    let preds = read_annotations(pred)?;
    let anns = read_annotations(ann)?;
    let images = rows_to_eval_images(&preds, &anns)?;
    let report = evaluate_dataset(&images, eps)?;
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report_summary(&report));
    }
    Ok(())
}

fn cmd_refine(
    config: &RunConfig,
    ckpt: &Path,
    data: &Path,
    rounds: usize,
    index: Option<&Path>,
) -> Result<()> {
    let model = ProposalModel::load(ckpt)?;
    let index = index.map(EmbeddingIndex::load).transpose()?;
    if model.dims.mode != FusionMode::None && index.is_none() {
        return Err(Error::Validation(format!(
            "checkpoint fusion mode `{}` requires --index",
            model.dims.mode
        )));
    }
    let mut ds = load_weak_dataset(data)?;
    for _ in 0..rounds {
        refine_labels(&model, index.as_ref(), &mut ds.pairs, &config.weakgen)?;
    }
    save_refined_annotations(&ds)?;
    let mean_labels: f64 = ds
        .pairs
        .iter()
        .map(|p| p.pseudo_labels.len() as f64)
        .sum::<f64>()
        / ds.pairs.len().max(1) as f64;
    println!(
        "refined {} pairs over {} round(s); mean labels/image {:.2}",
        ds.pairs.len(),
        rounds,
        mean_labels
    );
    Ok(())
}

fn cmd_report(report: &Path, json: bool) -> Result<()> {
    let text = std::fs::read_to_string(report)?;
    let parsed: crate::eval::EvalReport = serde_json::from_str(&text)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&parsed)?);
    } else {
        print!("{}", report_summary(&parsed));
    }
    Ok(())
}

/// Write predictions for a set of images in the shared annotation format,
/// usable directly by `evaluate`.
pub fn predictions_to_rows(
    ids: &[String],
    sizes: &[(u32, u32)],
    predictions: &[Vec<CropProposal>],
) -> Vec<AnnotationRow> {
    ids.iter()
        .zip(sizes)
        .zip(predictions)
        .map(|((id, (w, h)), props)| AnnotationRow {
            id: id.clone(),
            width: *w,
            height: *h,
            crops: props
                .iter()
                .map(|p| CropEntry {
                    bbox: p.bbox.as_array(),
                    mos: p.score,
                })
                .collect(),
            caption: None,
        })
        .collect()
}
