//! Feature fusion: a learnable projection head that maps retrieved tokens to
//! the model width, single-head cross-attention from the query feature onto
//! the retrieved (or caption) tokens, and the three alignment variants
//! `none`, `concat`, and `concat+CA`.
//!
//! The fused sequence for `concat+CA` is `[query | projected | cross]` along
//! the token axis, with segment boundaries recorded. Neighbor tokens keep
//! retrieval rank order in the projected segment, so the full fused feature
//! is rank-sensitive while the cross-attended segment is a set operation
//! over the kv tokens.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::embed::RetrievalResult;
use crate::error::{Error, Result};
use crate::nn::{Attention, BoundParams, Linear, ParamSet};

/// Token sequence produced by the query encoder, `p x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature {
    pub tokens: Array2<f64>,
}

impl QueryFeature {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::Validation("query feature needs p >= 1 tokens".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("query feature contains non-finite values".into()));
        }
        Ok(QueryFeature { tokens })
    }

    pub fn p(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Caption token matrix (`m' x d`) plus its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalEmbedding {
    pub tokens: Array2<f64>,
    pub caption: String,
}

/// Vocabulary-free caption embedder: each word hashes to a token row and a
/// signed value pattern over the channels. Deterministic across platforms.
pub fn caption_embedding(caption: &str, m_tokens: usize, d: usize) -> MultiModalEmbedding {
    assert!(m_tokens >= 1 && d >= 1);
    let mut tokens = Array2::<f64>::zeros((m_tokens, d));
    let words: Vec<String> = caption
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    let scale = 1.0 / (words.len().max(1) as f64).sqrt();
    for w in &words {
        let h = Sha256::digest(w.as_bytes());
        let row = (u64::from_le_bytes(h[0..8].try_into().unwrap()) % m_tokens as u64) as usize;
        for j in 0..d {
            let byte = h[8 + (j % 24)];
            tokens[(row, j)] += (f64::from(byte) - 127.5) / 127.5 * scale;
        }
    }
    MultiModalEmbedding {
        tokens,
        caption: caption.to_string(),
    }
}

/// Feature alignment variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FusionMode {
    /// Query tokens only; no retrieved features enter the decoder.
    #[serde(rename = "none")]
    None,
    /// Query tokens concatenated with projected retrieved tokens.
    #[serde(rename = "concat")]
    Concat,
    /// Concatenation plus the cross-attended feature.
    #[serde(rename = "concat+CA", alias = "concat+ca")]
    #[default]
    ConcatCa,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionMode::None => "none",
            FusionMode::Concat => "concat",
            FusionMode::ConcatCa => "concat+CA",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "concat" => Ok(FusionMode::Concat),
            "concat+CA" | "concat+ca" => Ok(FusionMode::ConcatCa),
            other => Err(Error::Validation(format!(
                "fusion.mode `{other}` is not one of `none`, `concat`, `concat+CA`"
            ))),
        }
    }
}

/// Which slice of a fused sequence a token range came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Query,
    Projected,
    Cross,
}

/// Fused token sequence with recorded segment boundaries.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub tokens: Array2<f64>,
    pub segments: Vec<(SegmentKind, std::ops::Range<usize>)>,
}

impl FusedFeature {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<ndarray::ArrayView2<'_, f64>> {
        self.segments
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, r)| self.tokens.slice(ndarray::s![r.clone(), ..]))
    }
}

/// Parameters for one fusion path (retrieval or multi-modal): the projection
/// head and the cross-attention maps over raw `d_in` tokens.
#[derive(Debug, Clone, Copy)]
pub struct FusionPath {
    pub d_in: usize,
    pub proj: Linear,
    pub attn: Attention,
}

impl FusionPath {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FusionPath {
            d_in,
            proj: Linear::new(ps, &format!("{name}.proj"), d_in, d_model, rng, false),
            attn: Attention::new(ps, &format!("{name}.ca"), d_model, d_in, d_model, rng, false),
        }
    }

    /// Tape-level fusion. Returns the fused tokens, segment layout, and the
    /// attention matrix var when cross-attention participated.
    pub fn fuse_on_tape(
        &self,
        t: &mut Tape,
        bp: &BoundParams,
        query: Var,
        kv: Var,
        mode: FusionMode,
    ) -> (Var, Vec<(SegmentKind, std::ops::Range<usize>)>, Option<Var>) {
        let p = t.shape(query).0;
        match mode {
            FusionMode::None => (query, vec![(SegmentKind::Query, 0..p)], None),
            FusionMode::Concat => {
                let n = t.shape(kv).0;
                let projected = self.proj.forward(t, bp, kv);
                let fused = t.concat_rows(&[query, projected]);
                (
                    fused,
                    vec![
                        (SegmentKind::Query, 0..p),
                        (SegmentKind::Projected, p..p + n),
                    ],
                    None,
                )
            }
            FusionMode::ConcatCa => {
                let n = t.shape(kv).0;
                let projected = self.proj.forward(t, bp, kv);
                let (cross, attn) = self.attn.forward(t, bp, query, kv);
                let fused = t.concat_rows(&[query, projected, cross]);
                (
                    fused,
                    vec![
                        (SegmentKind::Query, 0..p),
                        (SegmentKind::Projected, p..p + n),
                        (SegmentKind::Cross, p + n..p + n + p),
                    ],
                    Some(attn),
                )
            }
        }
    }
}

/// Standalone fusion component with its own parameters. The crop model embeds
/// the same [`FusionPath`] structure inside its parameter set; this wrapper
/// gives the fusion operations a direct, value-level surface.
pub struct Fusion {
    pub params: ParamSet,
    pub path: FusionPath,
    pub d_model: usize,
}

impl Fusion {
    pub fn new(d_in: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let path = FusionPath::new(&mut params, "fusion", d_in, d_model, rng);
        Fusion {
            params,
            path,
            d_model,
        }
    }

    fn check_kv(&self, kv: &Array2<f64>) -> Result<()> {
        if kv.nrows() == 0 {
            return Err(Error::Validation("kv token matrix is empty".into()));
        }
        if kv.ncols() != self.path.d_in {
            return Err(Error::DimMismatch {
                context: "fusion kv tokens".into(),
                expected: format!("d = {}", self.path.d_in),
                got: format!("d = {}", kv.ncols()),
            });
        }
        Ok(())
    }

    /// Row-wise affine projection of stacked `(K*m) x d` tokens to
    /// `(K*m) x d_model`.
    pub fn project(&self, stacked: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_kv(stacked)?;
        let mut t = Tape::new();
        let bp = self.params.bind(&mut t);
        let kv = t.leaf(stacked.clone());
        let out = self.path.proj.forward(&mut t, &bp, kv);
        Ok(t.value(out).clone())
    }

    /// Single-head cross-attention: query tokens attend over `kv`. Returns
    /// `(output, attention)`; each attention row sums to one.
    pub fn cross_attend(
        &self,
        query: &QueryFeature,
        kv: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_kv(kv)?;
        self.check_query(query)?;
        let mut t = Tape::new();
        let bp = self.params.bind(&mut t);
        let q = t.leaf(query.tokens.clone());
        let k = t.leaf(kv.clone());
        let (out, attn) = self.path.attn.forward(&mut t, &bp, q, k);
        Ok((t.value(out).clone(), t.value(attn).clone()))
    }

    fn check_query(&self, query: &QueryFeature) -> Result<()> {
        if query.tokens.ncols() != self.d_model {
            return Err(Error::DimMismatch {
                context: "query feature".into(),
                expected: format!("d_model = {}", self.d_model),
                got: format!("d_model = {}", query.tokens.ncols()),
            });
        }
        Ok(())
    }

    /// Retrieval fusion over stacked neighbor tokens in rank order.
    pub fn fuse_retrieval(
        &self,
        query: &QueryFeature,
        retrieved: &RetrievalResult,
        mode: FusionMode,
    ) -> Result<FusedFeature> {
        self.check_query(query)?;
        let stacked = retrieved.stacked();
        if mode != FusionMode::None {
            self.check_kv(&stacked)?;
        }
        self.fuse_tokens(query, &stacked, mode)
    }

    /// Multi-modal fusion over caption tokens; same layout with the caption
    /// projection head.
    pub fn fuse_multimodal(
        &self,
        query: &QueryFeature,
        embedding: &MultiModalEmbedding,
        mode: FusionMode,
    ) -> Result<FusedFeature> {
        self.check_query(query)?;
        if mode != FusionMode::None {
            self.check_kv(&embedding.tokens)?;
        }
        self.fuse_tokens(query, &embedding.tokens, mode)
    }

    fn fuse_tokens(
        &self,
        query: &QueryFeature,
        kv: &Array2<f64>,
        mode: FusionMode,
    ) -> Result<FusedFeature> {
        let mut t = Tape::new();
        let bp = self.params.bind(&mut t);
        let q = t.leaf(query.tokens.clone());
        let kv_var = if mode == FusionMode::None {
            // Unused; a one-row placeholder keeps the tape well-formed.
            t.leaf(Array2::zeros((1, self.path.d_in)))
        } else {
            t.leaf(kv.clone())
        };
        let (fused, segments, _) = self.path.fuse_on_tape(&mut t, &bp, q, kv_var, mode);
        Ok(FusedFeature {
            tokens: t.value(fused).clone(),
            segments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Neighbor;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
    }

    fn query(r: &mut ChaCha8Rng, p: usize, d: usize) -> QueryFeature {
        QueryFeature::new(rand_mat(r, p, d)).unwrap()
    }

    fn retrieval_from(tokens: Vec<Array2<f32>>) -> RetrievalResult {
        let m = tokens[0].nrows();
        let d = tokens[0].ncols();
        RetrievalResult {
            neighbors: tokens
                .into_iter()
                .enumerate()
                .map(|(i, t)| Neighbor {
                    image_id: format!("n{i}"),
                    similarity: 1.0 - i as f64 * 0.1,
                    tokens: t,
                })
                .collect(),
            m,
            d,
        }
    }

    #[test]
    fn project_identity_and_bias_cases() {
        let mut r = rng(1);
        let d = 4;
        let mut fusion = Fusion::new(d, d, &mut r);
        // Identity weight, zero bias: output equals input.
        *fusion.params.value_mut(fusion.path.proj.w) = Array2::eye(d);
        *fusion.params.value_mut(fusion.path.proj.b) = Array2::zeros((1, d));
        let x = rand_mat(&mut r, 6, d);
        let y = fusion.project(&x).unwrap();
        assert!(y.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        // Zero weight, bias b: every row equals b.
        *fusion.params.value_mut(fusion.path.proj.w) = Array2::zeros((d, d));
        let bias = ndarray::arr2(&[[0.5, -1.0, 2.0, 0.25]]);
        *fusion.params.value_mut(fusion.path.proj.b) = bias.clone();
        let y = fusion.project(&x).unwrap();
        for row in y.rows() {
            for (a, b) in row.iter().zip(bias.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_matches_reference_matmul() {
        let mut r = rng(2);
        let (k, m, d, dm) = (2, 3, 4, 5);
        let fusion = Fusion::new(d, dm, &mut r);
        let stacked = rand_mat(&mut r, k * m, d);
        let got = fusion.project(&stacked).unwrap();

        let w = fusion.params.value(fusion.path.proj.w);
        let b = fusion.params.value(fusion.path.proj.b);
        for i in 0..k * m {
            for j in 0..dm {
                let mut acc = b[(0, j)];
                for l in 0..d {
                    acc += stacked[(i, l)] * w[(l, j)];
                }
                assert!((got[(i, j)] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_attend_singleton_kv_ignores_query() {
        let mut r = rng(3);
        let fusion = Fusion::new(3, 4, &mut r);
        let kv = rand_mat(&mut r, 1, 3);
        let q1 = query(&mut r, 2, 4);
        let q2 = query(&mut r, 2, 4);
        let (o1, a1) = fusion.cross_attend(&q1, &kv).unwrap();
        let (o2, _) = fusion.cross_attend(&q2, &kv).unwrap();
        assert!(o1.iter().zip(o2.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(a1.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        // All output rows equal the value-mapped token.
        for i in 1..o1.nrows() {
            for j in 0..o1.ncols() {
                assert!((o1[(i, j)] - o1[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attend_duplicating_kv_tokens_is_invariant() {
        let mut r = rng(4);
        let fusion = Fusion::new(3, 4, &mut r);
        let kv = rand_mat(&mut r, 5, 3);
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[kv.view(), kv.view()]).unwrap();
        let q = query(&mut r, 3, 4);
        let (o1, _) = fusion.cross_attend(&q, &kv).unwrap();
        let (o2, _) = fusion.cross_attend(&q, &doubled).unwrap();
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_attend_matches_manual_softmax_sum() {
        let mut r = rng(5);
        let fusion = Fusion::new(3, 2, &mut r);
        let q = query(&mut r, 2, 2);
        let kv = rand_mat(&mut r, 3, 3);
        let (out, attn) = fusion.cross_attend(&q, &kv).unwrap();

        // By-hand attention with the same parameters.
        let p = &fusion.params;
        let lin = |x: &Array2<f64>, l: &Linear| x.dot(p.value(l.w)) + p.value(l.b);
        let qm = lin(&q.tokens, &fusion.path.attn.q);
        let km = lin(&kv, &fusion.path.attn.k);
        let vm = lin(&kv, &fusion.path.attn.v);
        let scores = qm.dot(&km.t()) / (2f64).sqrt();
        let mut weights = scores.clone();
        for mut row in weights.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let expect = lin(&weights.dot(&vm), &fusion.path.attn.o);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in attn.iter().zip(weights.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_attend_rejects_empty_kv() {
        let mut r = rng(6);
        let fusion = Fusion::new(3, 4, &mut r);
        let q = query(&mut r, 2, 4);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(fusion.cross_attend(&q, &empty).is_err());
    }

    #[test]
    fn fusion_mode_token_counts() {
        let mut r = rng(7);
        let (p, m, d, dm) = (49, 64, 8, 16);
        let fusion = Fusion::new(d, dm, &mut r);
        let q = query(&mut r, p, dm);
        let tokens: Vec<Array2<f32>> = (0..10)
            .map(|_| Array2::from_shape_fn((m, d), |_| r.gen_range(-1.0..1.0f32)))
            .collect();
        let res = retrieval_from(tokens);

        let f = fusion.fuse_retrieval(&q, &res, FusionMode::None).unwrap();
        assert_eq!(f.token_count(), p);
        assert_eq!(f.tokens, q.tokens);

        let single = retrieval_from(vec![Array2::zeros((m, d))]);
        let f = fusion.fuse_retrieval(&q, &single, FusionMode::Concat).unwrap();
        assert_eq!(f.token_count(), p + m);

        let f = fusion.fuse_retrieval(&q, &res, FusionMode::ConcatCa).unwrap();
        assert_eq!(f.token_count(), 49 + 640 + 49);
    }

    #[test]
    fn projected_segment_follows_neighbor_rank() {
        let mut r = rng(8);
        let (m, d, dm) = (4, 3, 5);
        let fusion = Fusion::new(d, dm, &mut r);
        let q = query(&mut r, 2, dm);
        let t0 = Array2::from_shape_fn((m, d), |_| r.gen_range(-1.0..1.0f32));
        let t1 = Array2::from_shape_fn((m, d), |_| r.gen_range(-1.0..1.0f32));
        let fwd = fusion
            .fuse_retrieval(&q, &retrieval_from(vec![t0.clone(), t1.clone()]), FusionMode::ConcatCa)
            .unwrap();
        let rev = fusion
            .fuse_retrieval(&q, &retrieval_from(vec![t1, t0]), FusionMode::ConcatCa)
            .unwrap();
        let seg_f = fwd.segment(SegmentKind::Projected).unwrap();
        let seg_r = rev.segment(SegmentKind::Projected).unwrap();
        // Swapping the two neighbors swaps the two m-row blocks.
        for i in 0..m {
            for j in 0..dm {
                assert!((seg_f[(i, j)] - seg_r[(m + i, j)]).abs() < 1e-12);
                assert!((seg_f[(m + i, j)] - seg_r[(i, j)]).abs() < 1e-12);
            }
        }
        // The cross segment is order-free.
        let cf = fwd.segment(SegmentKind::Cross).unwrap();
        let cr = rev.segment(SegmentKind::Cross).unwrap();
        for (a, b) in cf.iter().zip(cr.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn multimodal_identical_captions_differ_only_through_query_segments() {
        let mut r = rng(9);
        let (d, dm) = (6, 4);
        let fusion = Fusion::new(d, dm, &mut r);
        let emb = caption_embedding("a river below snowy mountains", 16, d);
        assert_eq!(emb.tokens.nrows(), 16);
        let q1 = query(&mut r, 3, dm);
        let q2 = query(&mut r, 3, dm);
        let f1 = fusion.fuse_multimodal(&q1, &emb, FusionMode::ConcatCa).unwrap();
        let f2 = fusion.fuse_multimodal(&q2, &emb, FusionMode::ConcatCa).unwrap();
        assert_eq!(f1.token_count(), 3 + 16 + 3);
        let p1 = f1.segment(SegmentKind::Projected).unwrap();
        let p2 = f2.segment(SegmentKind::Projected).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a, b);
        }
        let q1s = f1.segment(SegmentKind::Query).unwrap();
        let q2s = f2.segment(SegmentKind::Query).unwrap();
        assert!(q1s.iter().zip(q2s.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn caption_embedding_is_deterministic() {
        let a = caption_embedding("Sunset Over Dunes", 8, 4);
        let b = caption_embedding("Sunset Over Dunes", 8, 4);
        assert_eq!(a.tokens, b.tokens);
        let c = caption_embedding("sunset over dunes", 8, 4);
        // Case-insensitive by construction.
        assert_eq!(a.tokens, c.tokens);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        // Covers project and cross_attend analytic gradients.
        let mut r = rng(10);
        let fusion = Fusion::new(3, 4, &mut r);
        let q = query(&mut r, 2, 4);
        let kv = rand_mat(&mut r, 5, 3);

        let loss_value = |params: &ParamSet| -> f64 {
            let mut t = Tape::new();
            let bp = params.bind(&mut t);
            let qv = t.leaf(q.tokens.clone());
            let kvv = t.leaf(kv.clone());
            let (fused, _, _) = fusion.path.fuse_on_tape(&mut t, &bp, qv, kvv, FusionMode::ConcatCa);
            let s = t.sigmoid(fused);
            let l = t.sum_all(s);
            t.scalar(l)
        };

        let mut t = Tape::new();
        let bp = fusion.params.bind(&mut t);
        let qv = t.leaf(q.tokens.clone());
        let kvv = t.leaf(kv.clone());
        let (fused, _, _) = fusion.path.fuse_on_tape(&mut t, &bp, qv, kvv, FusionMode::ConcatCa);
        let s = t.sigmoid(fused);
        let l = t.sum_all(s);
        let grads = t.backward(l);
        let analytic = fusion.params.collect_grads(&t, &bp, &grads);

        let eps = 1e-5;
        for (i, id) in fusion.params.ids().enumerate() {
            let base = fusion.params.value(id).clone();
            let mut num = Array2::zeros(base.dim());
            for idx in 0..base.len() {
                let (rr, cc) = (idx / base.ncols(), idx % base.ncols());
                let mut p_plus = fusion.params.clone();
                p_plus.value_mut(id)[(rr, cc)] += eps;
                let mut p_minus = fusion.params.clone();
                p_minus.value_mut(id)[(rr, cc)] -= eps;
                num[(rr, cc)] = (loss_value(&p_plus) - loss_value(&p_minus)) / (2.0 * eps);
            }
            let a = &analytic[i];
            let diff = (a - &num).mapv(f64::abs).sum();
            let scale = a.mapv(f64::abs).sum().max(num.mapv(f64::abs).sum()).max(1e-9);
            assert!(
                diff / scale < 1e-4,
                "param {i} gradient mismatch: rel {}",
                diff / scale
            );
        }
    }
}
