//! Compositional embeddings and the similarity index over a professional
//! image database: encoding, the binary cache format, and exact top-K cosine
//! retrieval.
//!
//! The built-in encoder is an oriented-gradient line histogram on a `g x g`
//! grid (composition is treated as line structure, not semantics). Records
//! can also be loaded from a precomputed embedding file, which keeps the
//! encoder pluggable. Similarity is cosine over mean-pooled, L2-normalized
//! tokens; retrieval is an exact scan with ties broken by ascending image id
//! so results are reproducible across runs and platforms.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;

pub const CACHE_MAGIC: &[u8; 7] = b"PCEMB1\0";

/// Per-image token matrix (`m x d`) of compositional features plus the
/// mean-pooled unit vector used for similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub tokens: Array2<f32>,
    pub pooled: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(image_id: impl Into<String>, tokens: Array2<f32>) -> Result<Self> {
        let image_id = image_id.into();
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::Validation(format!(
                "embedding for `{image_id}` must have m >= 1 and d >= 1"
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "embedding for `{image_id}` contains non-finite values"
            )));
        }
        let pooled = pool_tokens(&tokens);
        Ok(EmbeddingRecord {
            image_id,
            tokens,
            pooled,
        })
    }

    pub fn m(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Mean over token rows, L2-normalized. An all-zero mean (e.g. a constant
/// image under the gradient encoder) falls back to the uniform unit vector so
/// the unit-norm invariant always holds.
fn pool_tokens(tokens: &Array2<f32>) -> Vec<f32> {
    let d = tokens.ncols();
    let m = tokens.nrows() as f64;
    let mut mean = vec![0f64; d];
    for row in tokens.rows() {
        for (j, v) in row.iter().enumerate() {
            mean[j] += f64::from(*v) / m;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.iter().map(|v| (v / norm) as f32).collect()
    } else {
        let u = 1.0 / (d as f64).sqrt();
        vec![u as f32; d]
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// Parsed `--encoder` specification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderSpec {
    /// `line-hist:GxG,B` oriented-gradient histogram, `m = G*G`, `d = B`.
    LineHist { grid: usize, bins: usize },
    /// `file:PATH` precomputed records in the embedding cache format.
    File(PathBuf),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::LineHist { grid: 8, bins: 8 }
    }
}

impl fmt::Display for EncoderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderSpec::LineHist { grid, bins } => write!(f, "line-hist:{grid}x{grid},{bins}"),
            EncoderSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for EncoderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "line-hist" {
            return Ok(EncoderSpec::default());
        }
        if let Some(rest) = s.strip_prefix("line-hist:") {
            let (grid_part, bins_part) = rest.split_once(',').ok_or_else(|| {
                Error::Validation(format!(
                    "encoder `{s}`: expected line-hist:GxG,B (e.g. line-hist:8x8,8)"
                ))
            })?;
            let (ga, gb) = grid_part.split_once('x').ok_or_else(|| {
                Error::Validation(format!("encoder `{s}`: grid must look like 8x8"))
            })?;
            let g: usize = ga
                .parse()
                .map_err(|_| Error::Validation(format!("encoder `{s}`: bad grid size")))?;
            let g2: usize = gb
                .parse()
                .map_err(|_| Error::Validation(format!("encoder `{s}`: bad grid size")))?;
            if g != g2 || g == 0 {
                return Err(Error::Validation(format!(
                    "encoder `{s}`: grid must be square and positive"
                )));
            }
            let bins: usize = bins_part
                .parse()
                .map_err(|_| Error::Validation(format!("encoder `{s}`: bad bin count")))?;
            if bins == 0 {
                return Err(Error::Validation(format!("encoder `{s}`: bins must be >= 1")));
            }
            Ok(EncoderSpec::LineHist { grid: g, bins })
        } else if let Some(p) = s.strip_prefix("file:") {
            Ok(EncoderSpec::File(PathBuf::from(p)))
        } else {
            Err(Error::Validation(format!(
                "unknown encoder `{s}`: expected `line-hist:GxG,B` or `file:PATH`"
            )))
        }
    }
}

/// Ready-to-use encoder; the `file:` variant holds its records in memory.
pub enum Encoder {
    LineHist { grid: usize, bins: usize },
    File { records: HashMap<String, EmbeddingRecord> },
}

impl Encoder {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::LineHist { grid, bins } => Ok(Encoder::LineHist {
                grid: *grid,
                bins: *bins,
            }),
            EncoderSpec::File(path) => {
                let records = read_cache_file(path)?;
                let map = records
                    .into_iter()
                    .map(|r| (r.image_id.clone(), r))
                    .collect();
                Ok(Encoder::File { records: map })
            }
        }
    }

    /// Encode one image. Deterministic for a fixed input and spec.
    pub fn encode(&self, image_id: &str, image: &RgbImage) -> Result<EmbeddingRecord> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Validation(format!("image `{image_id}` is empty")));
        }
        match self {
            Encoder::LineHist { grid, bins } => {
                let tokens = line_histogram(image, *grid, *bins);
                EmbeddingRecord::new(image_id, tokens)
            }
            Encoder::File { records } => records.get(image_id).cloned().ok_or_else(|| {
                Error::Validation(format!(
                    "no precomputed embedding for image id `{image_id}` in file encoder"
                ))
            }),
        }
    }
}

/// Oriented-gradient line histogram: grayscale central-difference gradients,
/// unsigned orientation binned over `[0, pi)`, magnitude accumulated per grid
/// cell, and the whole matrix L1-normalized so token scale is independent of
/// image size.
fn line_histogram(image: &RgbImage, grid: usize, bins: usize) -> Array2<f32> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut gray = vec![0f64; w * h];
    for (x, y, p) in image.enumerate_pixels() {
        let [r, g, b] = p.0;
        gray[y as usize * w + x as usize] =
            (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0;
    }

    let mut tokens = Array2::<f64>::zeros((grid * grid, bins));
    let at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w as i64 - 1) as usize;
        let yc = y.clamp(0, h as i64 - 1) as usize;
        gray[yc * w + xc]
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
            let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let bin = ((theta / std::f64::consts::PI) * bins as f64) as usize;
            let bin = bin.min(bins - 1);
            let cx = (x as usize * grid / w).min(grid - 1);
            let cy = (y as usize * grid / h).min(grid - 1);
            tokens[(cy * grid + cx, bin)] += mag;
        }
    }
    let total = tokens.sum();
    if total > 0.0 {
        tokens.mapv_inplace(|v| v / total);
    }
    tokens.mapv(|v| v as f32)
}

/// Index metadata persisted in the sidecar file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMetadata {
    pub m: usize,
    pub d: usize,
    pub encoder_id: String,
    pub build_timestamp: String,
}

/// Immutable collection of dimension-consistent records with unique ids.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
    metadata: IndexMetadata,
}

/// One retrieved neighbor, in similarity rank order.
#[derive(Debug, Clone)]
pub struct Neighbor {
    pub image_id: String,
    pub similarity: f64,
    pub tokens: Array2<f32>,
}

/// Exact top-K retrieval output; similarities are non-increasing and `K`
/// shrinks to the index size when the index is smaller than the request.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
    pub m: usize,
    pub d: usize,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    /// Stacked `(K*m) x d` view of all neighbor tokens in rank order.
    pub fn stacked(&self) -> Array2<f64> {
        let k = self.neighbors.len();
        let mut out = Array2::zeros((k * self.m, self.d));
        for (i, n) in self.neighbors.iter().enumerate() {
            for (r, row) in n.tokens.rows().into_iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    out[(i * self.m + r, c)] = f64::from(*v);
                }
            }
        }
        out
    }
}

impl EmbeddingIndex {
    /// Build from records. Fails on empty input, duplicate ids, or
    /// inconsistent `(m, d)`.
    pub fn build(records: Vec<EmbeddingRecord>, encoder_id: &str) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let m = records[0].m();
        let d = records[0].d();
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.m() != m || r.d() != d {
                return Err(Error::DimMismatch {
                    context: format!("record `{}` in index", r.image_id),
                    expected: format!("{m}x{d}"),
                    got: format!("{}x{}", r.m(), r.d()),
                });
            }
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
        }
        let build_timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_else(|_| "0".to_string());
        Ok(EmbeddingIndex {
            records,
            by_id,
            metadata: IndexMetadata {
                m,
                d,
                encoder_id: encoder_id.to_string(),
                build_timestamp,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn m(&self) -> usize {
        self.metadata.m
    }

    pub fn d(&self) -> usize {
        self.metadata.d
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, image_id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(image_id).map(|&i| &self.records[i])
    }

    /// Exact top-K by cosine similarity of pooled vectors. Ties break by
    /// ascending image id; the scan parallelizes but the result is
    /// scheduling-independent.
    pub fn retrieve(&self, query: &EmbeddingRecord, k: usize) -> Result<RetrievalResult> {
        if self.records.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::Validation("retrieval count K must be >= 1".into()));
        }
        if query.m() != self.m() || query.d() != self.d() {
            return Err(Error::DimMismatch {
                context: format!("query `{}` vs index", query.image_id),
                expected: format!("{}x{}", self.m(), self.d()),
                got: format!("{}x{}", query.m(), query.d()),
            });
        }
        let sims: Vec<f64> = par::map_slice(&self.records, |r| cosine(&query.pooled, &r.pooled));
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.records[a].image_id.cmp(&self.records[b].image_id))
        });
        let k = k.min(self.records.len());
        let neighbors = order[..k]
            .iter()
            .map(|&i| Neighbor {
                image_id: self.records[i].image_id.clone(),
                similarity: sims[i],
                tokens: self.records[i].tokens.clone(),
            })
            .collect();
        Ok(RetrievalResult {
            neighbors,
            m: self.m(),
            d: self.d(),
        })
    }

    /// Persist to the binary cache format plus the metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_cache_file(path, &self.records)?;
        let meta = format!(
            "m={}\nd={}\ncount={}\nencoder_id={}\nbuild_timestamp={}\n",
            self.metadata.m,
            self.metadata.d,
            self.records.len(),
            self.metadata.encoder_id,
            self.metadata.build_timestamp
        );
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_cache_file(path)?;
        let meta_path = sidecar_path(path);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::Format {
            path: meta_path.display().to_string(),
            reason: format!("missing metadata sidecar: {e}"),
        })?;
        let mut kv = HashMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let encoder_id = kv.get("encoder_id").cloned().unwrap_or_default();
        let build_timestamp = kv.get("build_timestamp").cloned().unwrap_or_default();
        let mut index = EmbeddingIndex::build(records, &encoder_id)?;
        index.metadata.build_timestamp = build_timestamp;
        Ok(index)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Binary layout: magic `PCEMB1\0`, u32 count, u32 m, u32 d, then per record
/// a u16 id length, the UTF-8 id, and `m*d` little-endian f32 tokens.
pub fn write_cache_file(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let m = records[0].m();
    let d = records[0].d();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.write_u32::<LittleEndian>(records.len() as u32)?;
    out.write_u32::<LittleEndian>(m as u32)?;
    out.write_u32::<LittleEndian>(d as u32)?;
    for r in records {
        let id = r.image_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "image id `{}` exceeds {} bytes",
                r.image_id,
                u16::MAX
            )));
        }
        out.write_u16::<LittleEndian>(id.len() as u16)?;
        out.extend_from_slice(id);
        for v in r.tokens.iter() {
            out.write_f32::<LittleEndian>(*v)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_cache_file(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 7];
    cur.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("bad magic, not an embedding cache file"));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let m = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let d = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    if m == 0 || d == 0 {
        return Err(bad("m and d must be >= 1"));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = cur.read_u16::<LittleEndian>().map_err(|_| bad("truncated record"))? as usize;
        let mut id = vec![0u8; id_len];
        cur.read_exact(&mut id).map_err(|_| bad("truncated id"))?;
        let id = String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?;
        let mut tok = Vec::with_capacity(m * d);
        for _ in 0..m * d {
            tok.push(
                cur.read_f32::<LittleEndian>()
                    .map_err(|_| bad("truncated tokens"))?,
            );
        }
        let tokens = Array2::from_shape_vec((m, d), tok).expect("shape checked");
        records.push(EmbeddingRecord::new(id, tokens)?);
    }
    Ok(records)
}

/// Content-addressed cache of computed embeddings. The directory comes from
/// config, overridden by the `PROCROP_CACHE` environment variable; with no
/// directory the cache is a no-op.
pub struct EmbedCache {
    dir: Option<PathBuf>,
}

impl EmbedCache {
    pub fn new(config_dir: Option<&Path>) -> Self {
        let dir = std::env::var_os("PROCROP_CACHE")
            .map(PathBuf::from)
            .or_else(|| config_dir.map(Path::to_path_buf));
        EmbedCache { dir }
    }

    pub fn disabled() -> Self {
        EmbedCache { dir: None }
    }

    /// Look up by the hash of `(image bytes, encoder id)`, computing and
    /// storing on miss.
    pub fn get_or_compute(
        &self,
        image_id: &str,
        image_bytes: &[u8],
        encoder_id: &str,
        compute: impl FnOnce() -> Result<EmbeddingRecord>,
    ) -> Result<EmbeddingRecord> {
        let Some(dir) = &self.dir else {
            return compute();
        };
        let mut h = Sha256::new();
        h.update(image_bytes);
        h.update(encoder_id.as_bytes());
        let key = hex_string(&h.finalize());
        let path = dir.join(format!("{key}.emb"));
        if path.exists() {
            let mut records = read_cache_file(&path)?;
            if records.len() == 1 {
                let mut r = records.remove(0);
                r.image_id = image_id.to_string();
                return Ok(r);
            }
        }
        let record = compute()?;
        std::fs::create_dir_all(dir)?;
        write_cache_file(&path, std::slice::from_ref(&record))?;
        Ok(record)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
