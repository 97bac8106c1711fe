//! Fixed-length token compression by learned-query cross-attention.
//!
//! Inputs of any length `N >= 1` are adapted to `model_dim`, projected to
//! keys and values, and attended by a bank of `num_queries` learned queries
//! split over `num_heads` heads:
//!
//! ```text
//! Xa = X·Aᵀ + a        Q = B·Wq   K = Xa·Wk   V = Xa·Wv
//! O_h = softmax(Q_h·K_hᵀ / sqrt(d_head)) · V_h
//! Y = [O_1 .. O_H] · Wo                         (num_queries x model_dim)
//! ```
//!
//! No positional encoding is applied to the inputs, so the output depends on
//! the set of input rows, not their order.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::feature::{FeatureMatrix, Provenance};
use crate::linalg::{softmax_in_place, Mat};
use crate::{Error, Result};

pub const DEFAULT_NUM_QUERIES: usize = 1152;
pub const DEFAULT_NUM_HEADS: usize = 8;
pub const DEFAULT_MODEL_DIM: usize = 256;
pub const QUERY_INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: [u8; 4] = *b"TQCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub num_queries: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub in_dim: usize,
}

impl CompressorConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            num_queries: DEFAULT_NUM_QUERIES,
            model_dim: DEFAULT_MODEL_DIM,
            num_heads: DEFAULT_NUM_HEADS,
            in_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.model_dim == 0 || self.num_heads == 0 || self.in_dim == 0 {
            return Err(Error::InvalidParameter(format!("compressor dims must be >= 1: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidParameter(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressorState {
    pub config: CompressorConfig,
    /// `num_queries x model_dim`
    pub query_bank: Mat,
    /// `model_dim x model_dim`, applied on the right of row vectors.
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    /// `model_dim x in_dim`
    pub adapter_w: Mat,
    pub adapter_b: Vec<f64>,
}

/// Gradients with the same layout as [`CompressorState`], plus the input.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressorGrads {
    pub query_bank: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub adapter_w: Mat,
    pub adapter_b: Vec<f64>,
    pub input: Mat,
}

struct ForwardCache {
    adapted: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per head, `num_queries x N` attention weights.
    attention: Vec<Mat>,
    concat: Mat,
}

impl CompressorState {
    /// Query bank ~ N(0, 0.02²); square projections ~ N(0, 1/model_dim);
    /// adapter ~ N(0, 1/in_dim) with zero bias.
    pub fn init(config: CompressorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let proj_std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            config,
            query_bank: Mat::randn(config.num_queries, d, QUERY_INIT_STD, &mut rng),
            w_q: Mat::randn(d, d, proj_std, &mut rng),
            w_k: Mat::randn(d, d, proj_std, &mut rng),
            w_v: Mat::randn(d, d, proj_std, &mut rng),
            w_o: Mat::randn(d, d, proj_std, &mut rng),
            adapter_w: Mat::randn(d, config.in_dim, 1.0 / (config.in_dim as f64).sqrt(), &mut rng),
            adapter_b: vec![0.0; d],
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.model_dim;
        let ok = self.query_bank.shape() == (c.num_queries, d)
            && [&self.w_q, &self.w_k, &self.w_v, &self.w_o].iter().all(|m| m.shape() == (d, d))
            && self.adapter_w.shape() == (d, c.in_dim)
            && self.adapter_b.len() == d;
        if !ok {
            return Err(Error::shape("CompressorState", format!("{c:?}"), "inconsistent tensors"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput("compress: no input tokens"));
        }
        if x.cols() != self.config.in_dim {
            return Err(Error::shape("compress input dim", self.config.in_dim, x.cols()));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Mat) -> ForwardCache {
        let c = &self.config;
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut adapted = x.matmul_t(&self.adapter_w);
        adapted.add_row_vector(&self.adapter_b);
        let q = self.query_bank.matmul(&self.w_q);
        let k = adapted.matmul(&self.w_k);
        let v = adapted.matmul(&self.w_v);
        let mut concat = Mat::zeros(c.num_queries, c.model_dim);
        let mut attention = Vec::with_capacity(c.num_heads);
        for h in 0..c.num_heads {
            let qh = q.column_block(h * dh, dh);
            let kh = k.column_block(h * dh, dh);
            let vh = v.column_block(h * dh, dh);
            let mut a = qh.matmul_t(&kh);
            a.scale(scale);
            for r in 0..a.rows() {
                softmax_in_place(a.row_mut(r));
            }
            concat.set_column_block(h * dh, &a.matmul(&vh));
            attention.push(a);
        }
        ForwardCache {
            adapted,
            q,
            k,
            v,
            attention,
            concat,
        }
    }

    /// Full-precision forward pass on an `N x in_dim` input.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_shapes()?;
        self.check_input(x)?;
        Ok(self.forward_cached(x).concat.matmul(&self.w_o))
    }

    /// Per-head attention weights (`num_queries x N` each).
    pub fn attention_weights(&self, x: &Mat) -> Result<Vec<Mat>> {
        self.check_shapes()?;
        self.check_input(x)?;
        Ok(self.forward_cached(x).attention)
    }

    /// Exact gradients of `sum(upstream ⊙ forward(x))` for every weight and
    /// the input.
    pub fn backward(&self, x: &Mat, upstream: &Mat) -> Result<CompressorGrads> {
        self.check_shapes()?;
        self.check_input(x)?;
        let c = &self.config;
        if upstream.shape() != (c.num_queries, c.model_dim) {
            return Err(Error::shape(
                "compress_backward upstream",
                format!("{}x{}", c.num_queries, c.model_dim),
                format!("{:?}", upstream.shape()),
            ));
        }
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cache = self.forward_cached(x);

        let w_o = cache.concat.t_matmul(upstream);
        let d_concat = upstream.matmul_t(&self.w_o);
        let mut dq = Mat::zeros(c.num_queries, c.model_dim);
        let mut dk = Mat::zeros(x.rows(), c.model_dim);
        let mut dv = Mat::zeros(x.rows(), c.model_dim);
        for (h, a) in cache.attention.iter().enumerate() {
            let d_out = d_concat.column_block(h * dh, dh);
            let qh = cache.q.column_block(h * dh, dh);
            let kh = cache.k.column_block(h * dh, dh);
            let vh = cache.v.column_block(h * dh, dh);
            dv.set_column_block(h * dh, &a.t_matmul(&d_out));
            let da = d_out.matmul_t(&vh);
            // Softmax Jacobian per row: dS = A ⊙ (dA - <dA, A>).
            let mut ds = Mat::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let inner: f64 = a.row(r).iter().zip(da.row(r)).map(|(p, g)| p * g).sum();
                for (j, out) in ds.row_mut(r).iter_mut().enumerate() {
                    *out = a[(r, j)] * (da[(r, j)] - inner) * scale;
                }
            }
            dq.set_column_block(h * dh, &ds.matmul(&kh));
            dk.set_column_block(h * dh, &ds.t_matmul(&qh));
        }

        let query_bank = dq.matmul_t(&self.w_q);
        let w_q = self.query_bank.t_matmul(&dq);
        let w_k = cache.adapted.t_matmul(&dk);
        let w_v = cache.adapted.t_matmul(&dv);
        let mut d_adapted = dk.matmul_t(&self.w_k);
        d_adapted.add_assign(&dv.matmul_t(&self.w_v));
        Ok(CompressorGrads {
            query_bank,
            w_q,
            w_k,
            w_v,
            w_o,
            adapter_w: d_adapted.t_matmul(x),
            adapter_b: d_adapted.column_sums(),
            input: d_adapted.matmul(&self.adapter_w),
        })
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.query_bank.as_slice(),
            self.w_q.as_slice(),
            self.w_k.as_slice(),
            self.w_v.as_slice(),
            self.w_o.as_slice(),
            self.adapter_w.as_slice(),
            &self.adapter_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.query_bank.as_mut_slice(),
            self.w_q.as_mut_slice(),
            self.w_k.as_mut_slice(),
            self.w_v.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.adapter_w.as_mut_slice(),
            &mut self.adapter_b,
        ]
    }

    /// Versioned checkpoint: magic, version, then `num_queries`,
    /// `model_dim`, `num_heads`, `in_dim` as `u32`, then every tensor as
    /// little-endian `f32` in [`Self::tensors`] order.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        self.check_shapes()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.config.num_queries, self.config.model_dim, self.config.num_heads, self.config.in_dim] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for &x in t {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 24 || buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a compressor checkpoint".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        if word(4) != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", word(4))));
        }
        let config = CompressorConfig {
            num_queries: word(8) as usize,
            model_dim: word(12) as usize,
            num_heads: word(16) as usize,
            in_dim: word(20) as usize,
        };
        config.validate()?;
        let mut state = Self {
            config,
            query_bank: Mat::zeros(config.num_queries, config.model_dim),
            w_q: Mat::zeros(config.model_dim, config.model_dim),
            w_k: Mat::zeros(config.model_dim, config.model_dim),
            w_v: Mat::zeros(config.model_dim, config.model_dim),
            w_o: Mat::zeros(config.model_dim, config.model_dim),
            adapter_w: Mat::zeros(config.model_dim, config.in_dim),
            adapter_b: vec![0.0; config.model_dim],
        };
        let total: usize = state.tensors().iter().map(|t| t.len()).sum();
        if buf.len() != 24 + 4 * total {
            return Err(Error::Format(format!(
                "checkpoint body is {} bytes, expected {}",
                buf.len() - 24,
                4 * total
            )));
        }
        let mut values = buf[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for t in state.tensors_mut() {
            for x in t.iter_mut() {
                *x = values.next().expect("length checked");
            }
        }
        if state.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("compressor checkpoint".into()));
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

/// Compresses `N` region features into `num_queries` tokens. Accumulation
/// is `f64`; the result is stored as `f32`.
pub fn compress(state: &CompressorState, region_features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let out = state.forward(&region_features.to_mat())?;
    if !out.is_finite() {
        return Err(Error::NonFinite("compressed tokens".into()));
    }
    FeatureMatrix::from_mat(&out, Provenance::Compressed)
}

/// Like [`compress`], but first sorts input rows by their bit patterns so
/// the result is bit-identical for any permutation of the input.
pub fn compress_canonical(state: &CompressorState, region_features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut order: Vec<usize> = (0..region_features.rows()).collect();
    order.sort_by(|&a, &b| {
        let key = |r: usize| region_features.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        key(a).cmp(&key(b))
    });
    let x = region_features.to_mat().select_rows(&order);
    let out = state.forward(&x)?;
    FeatureMatrix::from_mat(&out, Provenance::Compressed)
}

pub fn compress_backward(state: &CompressorState, region_features: &Mat, upstream: &Mat) -> Result<CompressorGrads> {
    state.backward(region_features, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(seed: u64) -> CompressorState {
        let cfg = CompressorConfig {
            num_queries: 3,
            model_dim: 8,
            num_heads: 2,
            in_dim: 8,
        };
        let mut s = CompressorState::init(cfg, seed).unwrap();
        // Larger queries than the production init so attention is not flat.
        s.query_bank.scale(32.0);
        s
    }

    fn input(n: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Unvectorised triple-loop attention.
    fn naive_forward(s: &CompressorState, x: &Mat) -> Mat {
        let c = s.config;
        let (d, dh) = (c.model_dim, c.head_dim());
        let n = x.rows();
        let lin = |row: &[f64], w: &Mat, j: usize| (0..d).map(|i| row[i] * w[(i, j)]).sum::<f64>();
        let adapted: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                (0..d)
                    .map(|o| s.adapter_b[o] + (0..c.in_dim).map(|i| s.adapter_w[(o, i)] * x[(r, i)]).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut out = Mat::zeros(c.num_queries, d);
        for qi in 0..c.num_queries {
            let q: Vec<f64> = (0..d).map(|j| lin(s.query_bank.row(qi), &s.w_q, j)).collect();
            let mut concat = vec![0.0; d];
            for h in 0..c.num_heads {
                let cols = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = adapted
                    .iter()
                    .map(|a| {
                        cols.clone().map(|j| q[j] * lin(a, &s.w_k, j)).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (a, l) in adapted.iter().zip(&logits) {
                    let w = (l - m).exp() / z;
                    for j in cols.clone() {
                        concat[j] += w * lin(a, &s.w_v, j);
                    }
                }
            }
            for j in 0..d {
                out[(qi, j)] = (0..d).map(|i| concat[i] * s.w_o[(i, j)]).sum();
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let s = small(4);
        let x = input(5, 8, 5);
        let fast = s.forward(&x).unwrap();
        let slow = naive_forward(&s, &x);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12) + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn single_key_broadcasts_its_value() {
        let s = small(1);
        let x = input(1, 8, 2);
        let out = s.forward(&x).unwrap();
        for a in s.attention_weights(&x).unwrap() {
            assert!(a.as_slice().iter().all(|&w| w == 1.0));
        }
        let mut xa = x.matmul_t(&s.adapter_w);
        xa.add_row_vector(&s.adapter_b);
        let expected = xa.matmul(&s.w_v).matmul(&s.w_o);
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_input_and_bad_dims() {
        let s = small(1);
        assert!(matches!(s.forward(&Mat::zeros(0, 8)), Err(Error::EmptyInput(_))));
        assert!(s.forward(&Mat::zeros(2, 7)).is_err());
        let bad = CompressorConfig {
            num_queries: 2,
            model_dim: 10,
            num_heads: 3,
            in_dim: 4,
        };
        assert!(CompressorState::init(bad, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = small(2);
        let x = input(4, 8, 3);
        let g = s.backward(&x, &Mat::zeros(3, 8)).unwrap();
        for m in [&g.query_bank, &g.w_q, &g.w_k, &g.w_v, &g.w_o, &g.adapter_w, &g.input] {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(g.adapter_b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canonical_order_is_bit_exact() {
        let cfg = CompressorConfig {
            num_queries: 4,
            model_dim: 8,
            num_heads: 2,
            in_dim: 6,
        };
        let s = CompressorState::init(cfg, 9).unwrap();
        let x = input(12, 6, 1);
        let fm = FeatureMatrix::from_mat(&x, Provenance::Region).unwrap();
        let mut perm: Vec<usize> = (0..12).rev().collect();
        perm.swap(3, 7);
        let fp = FeatureMatrix::from_mat(&fm.to_mat().select_rows(&perm), Provenance::Region).unwrap();
        assert_eq!(compress_canonical(&s, &fm).unwrap(), compress_canonical(&s, &fp).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = small(8);
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = CompressorState::read_checkpoint(&buf[..]).unwrap();
        // The power-of-two rescale is exact in f32, so nothing is lost.
        assert_eq!(back, s);
        buf.truncate(buf.len() - 4);
        assert!(CompressorState::read_checkpoint(&buf[..]).is_err());
        let mut wrong = Vec::new();
        s.write_checkpoint(&mut wrong).unwrap();
        wrong[4] = 9;
        assert!(CompressorState::read_checkpoint(&wrong[..]).is_err());
    }
}
