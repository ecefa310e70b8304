//! Building blocks for the crop model: named parameter storage, linear and
//! single-head attention layers, a 3x3 strided convolution expressed through
//! im2col, fixed 2-D sinusoidal position encodings, and AdamW.
//!
//! Parameters live in a [`ParamSet`] (ordered, named, serializable); each
//! forward pass binds them onto a fresh [`Tape`] so gradients come back in
//! parameter order.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. `backbone` marks the convolutional
/// encoder group, which trains at the reduced learning rate.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    backbone: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, backbone: bool) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.backbone.push(backbone);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn is_backbone(&self, i: usize) -> bool {
        self.backbone[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn set_by_name(&mut self, name: &str, value: Array2<f64>) -> Option<()> {
        let i = self.names.iter().position(|n| n == name)?;
        if self.values[i].dim() != value.dim() {
            return None;
        }
        self.values[i] = value;
        Some(())
    }

    /// Insert every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        BoundParams { vars }
    }

    /// Gradients for every parameter, in storage order.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        grads: &crate::autodiff::Gradients,
    ) -> Vec<Array2<f64>> {
        bound.vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Symmetric uniform init scaled by `1 / sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        backbone: bool,
    ) -> Self {
        let w = ps.add(&format!("{name}.w"), uniform_init(rng, d_in, d_out, d_in), backbone);
        let b = ps.add(&format!("{name}.b"), Array2::zeros((1, d_out)), backbone);
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, bp: &BoundParams, x: Var) -> Var {
        let m = t.matmul(x, bp.var(self.w));
        t.add_row(m, bp.var(self.b))
    }
}

/// Single-head scaled dot-product attention with learned Q/K/V/output maps.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    d_model: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_query_in: usize,
        d_kv_in: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
        backbone: bool,
    ) -> Self {
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), d_query_in, d_model, rng, backbone),
            k: Linear::new(ps, &format!("{name}.k"), d_kv_in, d_model, rng, backbone),
            v: Linear::new(ps, &format!("{name}.v"), d_kv_in, d_model, rng, backbone),
            o: Linear::new(ps, &format!("{name}.o"), d_model, d_model, rng, backbone),
            d_model,
        }
    }

    /// Returns `(output, attention)`; each attention row is a probability
    /// distribution over the kv tokens.
    pub fn forward(&self, t: &mut Tape, bp: &BoundParams, queries: Var, kv: Var) -> (Var, Var) {
        let q = self.q.forward(t, bp, queries);
        let k = self.k.forward(t, bp, kv);
        let v = self.v.forward(t, bp, kv);
        let kt = t.transpose(k);
        let scores = t.matmul(q, kt);
        let scaled = t.scale(scores, 1.0 / (self.d_model as f64).sqrt());
        let attn = t.softmax_rows(scaled);
        let ctx = t.matmul(attn, v);
        let out = self.o.forward(t, bp, ctx);
        (out, attn)
    }
}

/// Two-layer feed-forward with relu, used inside decoder layers.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_model: usize,
        d_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), d_model, d_hidden, rng, false),
            l2: Linear::new(ps, &format!("{name}.l2"), d_hidden, d_model, rng, false),
        }
    }

    pub fn forward(&self, t: &mut Tape, bp: &BoundParams, x: Var) -> Var {
        let h = self.l1.forward(t, bp, x);
        let h = t.relu(h);
        self.l2.forward(t, bp, h)
    }
}

/// 3x3 convolution, stride 2, zero padding 1, realized as im2col + matmul.
/// Input and output activations are `(h*w) x channels` matrices in row-major
/// pixel order.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3s2 {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3s2 {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        backbone: bool,
    ) -> Self {
        let fan_in = 9 * c_in;
        let w = ps.add(
            &format!("{name}.w"),
            uniform_init(rng, fan_in, c_out, fan_in),
            backbone,
        );
        let b = ps.add(&format!("{name}.b"), Array2::zeros((1, c_out)), backbone);
        Conv3x3s2 { w, b, c_in, c_out }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        bp: &BoundParams,
        x: Var,
        map: &Im2ColMap,
    ) -> Var {
        debug_assert_eq!(t.shape(x), (map.in_h * map.in_w, self.c_in));
        let patches = t.gather_flat(
            x,
            Arc::clone(&map.map),
            (map.out_h * map.out_w, 9 * self.c_in),
        );
        let m = t.matmul(patches, bp.var(self.w));
        t.add_row(m, bp.var(self.b))
    }
}

/// Precomputed flat gather indices for one conv geometry.
#[derive(Debug, Clone)]
pub struct Im2ColMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    map: Arc<Vec<i64>>,
}

/// Kernel 3, stride 2, pad 1: output side is `ceil(side / 2)`.
pub fn im2col_map_3x3s2(in_h: usize, in_w: usize, c_in: usize) -> Im2ColMap {
    let out_h = (in_h + 1) / 2;
    let out_w = (in_w + 1) / 2;
    let mut map = Vec::with_capacity(out_h * out_w * 9 * c_in);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let iy = (oy * 2 + ky) as i64 - 1;
                    let ix = (ox * 2 + kx) as i64 - 1;
                    for ci in 0..c_in {
                        if iy >= 0 && iy < in_h as i64 && ix >= 0 && ix < in_w as i64 {
                            map.push((iy * in_w as i64 + ix) * c_in as i64 + ci as i64);
                        } else {
                            map.push(-1);
                        }
                    }
                }
            }
        }
    }
    Im2ColMap {
        in_h,
        in_w,
        out_h,
        out_w,
        map: Arc::new(map),
    }
}

/// Fixed sinusoidal 2-D position encoding for a `gh x gw` token grid; the
/// first half of the channels encodes x, the second half y.
pub fn pos_encoding_2d(gh: usize, gw: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((gh * gw, d));
    let half = d / 2;
    for y in 0..gh {
        for x in 0..gw {
            let row = y * gw + x;
            for k in 0..half {
                let omega = 1.0 / 10000f64.powf(2.0 * ((k / 2) as f64) / half.max(1) as f64);
                let vx = x as f64 * omega;
                out[(row, k)] = if k % 2 == 0 { vx.sin() } else { vx.cos() };
            }
            for k in half..d {
                let j = k - half;
                let omega = 1.0 / 10000f64.powf(2.0 * ((j / 2) as f64) / (d - half).max(1) as f64);
                let vy = y as f64 * omega;
                out[(row, k)] = if j % 2 == 0 { vy.sin() } else { vy.cos() };
            }
        }
    }
    out
}

/// AdamW: adaptive moments with decoupled weight decay. The backbone group
/// uses its own learning rate.
pub struct AdamW {
    lr: f64,
    backbone_lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(ps: &ParamSet, lr: f64, backbone_lr: f64, weight_decay: f64) -> Self {
        let m = ps.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        let v = ps.values.iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamW {
            lr,
            backbone_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), ps.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i] = &self.m[i] * self.beta1 + g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let lr = if ps.backbone[i] { self.backbone_lr } else { self.lr };
            let mhat = &self.m[i] / bc1;
            let vhat = self.v[i].mapv(|x| (x / bc2).sqrt() + self.eps);
            let update = &mhat / &vhat;
            let p = &mut ps.values[i];
            let decay = &*p * self.weight_decay;
            *p -= &((update + decay) * lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_output_shapes() {
        let map = im2col_map_3x3s2(64, 64, 3);
        assert_eq!((map.out_h, map.out_w), (32, 32));
        let map = im2col_map_3x3s2(5, 7, 2);
        assert_eq!((map.out_h, map.out_w), (3, 4));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, cin, cout) = (6, 6, 2, 3);
        let mut ps = ParamSet::new();
        let conv = Conv3x3s2::new(&mut ps, "c", cin, cout, &mut rng, false);
        let x = Array2::from_shape_fn((h * w, cin), |_| rng.gen_range(-1.0..1.0f64));

        let map = im2col_map_3x3s2(h, w, cin);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = conv.forward(&mut tape, &bp, xv, &map);
        let got = tape.value(y).clone();

        // Direct nested-loop convolution as the oracle.
        let wmat = ps.value(conv.w);
        let bias = ps.value(conv.b);
        for oy in 0..map.out_h {
            for ox in 0..map.out_w {
                for co in 0..cout {
                    let mut acc = bias[(0, co)];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy as i64 * 2 + ky - 1;
                            let ix = ox as i64 * 2 + kx - 1;
                            if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let wrow = (ky as usize * 3 + kx as usize) * cin + ci;
                                acc += x[((iy as usize) * w + ix as usize, ci)] * wmat[(wrow, co)];
                            }
                        }
                    }
                    let diff = (got[(oy * map.out_w + ox, co)] - acc).abs();
                    assert!(diff < 1e-12, "mismatch at ({oy},{ox},{co}): {diff}");
                }
            }
        }
    }

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", ndarray::arr2(&[[2.0, -3.0]]), false);
        let mut opt = AdamW::new(&ps, 0.05, 0.05, 0.0);
        for _ in 0..400 {
            let g = ps.value(p).clone() * 2.0;
            opt.step(&mut ps, &[g]);
        }
        let v = ps.value(p);
        assert!(v[(0, 0)].abs() < 1e-2 && v[(0, 1)].abs() < 1e-2);
    }

    #[test]
    fn pos_encoding_distinguishes_positions() {
        let pe = pos_encoding_2d(4, 4, 16);
        assert_eq!(pe.dim(), (16, 16));
        // No two grid positions share an encoding.
        for i in 0..16 {
            for j in (i + 1)..16 {
                let d: f64 = (&pe.row(i) - &pe.row(j)).mapv(f64::abs).sum();
                assert!(d > 1e-6, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let attn = Attention::new(&mut ps, "a", 4, 6, 8, &mut rng, false);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape);
        let q = tape.leaf(Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0)));
        let kv = tape.leaf(Array2::from_shape_fn((5, 6), |_| rng.gen_range(-2.0..2.0)));
        let (_, a) = attn.forward(&mut tape, &bp, q, kv);
        for row in tape.value(a).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}
