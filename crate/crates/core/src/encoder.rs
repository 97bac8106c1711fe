//! Tile encoders, dual-encoder concatenation, region pooling and the
//! two-layer projector.
//!
//! Real vision towers plug in through [`TileEncoder`] or by writing
//! [`FeatureMatrix`] files; the seeded [`StubEncoder`] stands in for them at
//! desk scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::feature::{FeatureMatrix, Provenance};
use crate::linalg::Mat;
use crate::tiler::TILES_PER_REGION;
use crate::{par_map, Error, Result};

/// Output widths of the two production towers; concatenated they give the
/// 3328-wide slide feature.
pub const PRIMARY_TOWER_DIM: usize = 2560;
pub const SECONDARY_TOWER_DIM: usize = 768;
pub const DEFAULT_INPUT_SIZE: u32 = 224;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub input_size_px: u32,
    pub output_dim: usize,
}

/// An RGB tile as read from a slide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbTile {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// A square tile resampled to an encoder's input size; channel values stay
/// in `[0, 255]` but are no longer quantised.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedTile {
    pub size: u32,
    pub data: Vec<f32>,
}

/// Box-filter resample to `size x size`. Each output pixel averages the
/// source pixels whose index range maps onto it (at least one pixel).
pub fn resize_box(tile: &RgbTile, size: u32) -> ResizedTile {
    let (w, h) = (tile.width as usize, tile.height as usize);
    let s = size as usize;
    let span = |o: usize, n: usize| {
        let a = o * n / s;
        let b = ((o + 1) * n / s).max(a + 1).min(n);
        (a, b)
    };
    let mut data = Vec::with_capacity(s * s * 3);
    for oy in 0..s {
        let (y0, y1) = span(oy, h);
        for ox in 0..s {
            let (x0, x1) = span(ox, w);
            let mut acc = [0u64; 3];
            for y in y0..y1 {
                let row = &tile.data[(y * w + x0) * 3..(y * w + x1) * 3];
                for p in row.chunks_exact(3) {
                    acc[0] += p[0] as u64;
                    acc[1] += p[1] as u64;
                    acc[2] += p[2] as u64;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            data.extend(acc.iter().map(|&a| (a as f64 / n) as f32));
        }
    }
    ResizedTile { size, data }
}

pub trait TileEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Embeds a tile already resized to `spec().input_size_px`.
    fn encode(&self, tile: &ResizedTile) -> std::result::Result<Vec<f32>, String>;
}

/// Number of channel statistics the stub projects.
const STUB_STATS: usize = 18;

/// Deterministic stand-in encoder: a seeded Gaussian projection of channel
/// statistics (per-channel mean and std, plus per-quadrant channel means).
#[derive(Clone, Debug)]
pub struct StubEncoder {
    spec: EncoderSpec,
    seed: u64,
    projection: Mat,
}

pub fn make_stub_encoder(seed: u64, output_dim: usize) -> StubEncoder {
    StubEncoder::new(seed, output_dim, DEFAULT_INPUT_SIZE)
}

impl StubEncoder {
    pub fn new(seed: u64, output_dim: usize, input_size_px: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Mat::randn(output_dim, STUB_STATS, 1.0, &mut rng);
        Self {
            spec: EncoderSpec {
                name: format!("stub-{seed}-{output_dim}"),
                input_size_px,
                output_dim,
            },
            seed,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Channel statistics scaled to `[0, 1]`.
    pub fn channel_stats(tile: &ResizedTile) -> [f64; STUB_STATS] {
        let s = tile.size as usize;
        let half = (s / 2).max(1);
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut quad = [[0.0f64; 3]; 4];
        let mut quad_n = [0usize; 4];
        for y in 0..s {
            for x in 0..s {
                let q = usize::from(y >= half) * 2 + usize::from(x >= half);
                quad_n[q] += 1;
                let p = &tile.data[(y * s + x) * 3..(y * s + x) * 3 + 3];
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                    quad[q][c] += v;
                }
            }
        }
        let n = (s * s) as f64;
        let mut out = [0.0; STUB_STATS];
        for c in 0..3 {
            let mean = sum[c] / n;
            out[c] = mean;
            out[3 + c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
            for q in 0..4 {
                out[6 + q * 3 + c] = if quad_n[q] > 0 { quad[q][c] / quad_n[q] as f64 } else { mean };
            }
        }
        out
    }
}

impl TileEncoder for StubEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, tile: &ResizedTile) -> std::result::Result<Vec<f32>, String> {
        if tile.size != self.spec.input_size_px {
            return Err(format!("expected {} px input, got {}", self.spec.input_size_px, tile.size));
        }
        let stats = Self::channel_stats(tile);
        Ok((0..self.spec.output_dim)
            .map(|o| {
                let p = self.projection.row(o);
                p.iter().zip(&stats).map(|(w, s)| w * (s - 0.5)).sum::<f64>() as f32
            })
            .collect())
    }
}

/// Always returns zeros.
#[derive(Clone, Debug)]
pub struct ZeroEncoder {
    pub spec: EncoderSpec,
}

impl TileEncoder for ZeroEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, _tile: &ResizedTile) -> std::result::Result<Vec<f32>, String> {
        Ok(vec![0.0; self.spec.output_dim])
    }
}

fn encode_one(tile: &RgbTile, enc: &dyn TileEncoder, index: usize) -> Result<Vec<f32>> {
    let spec = enc.spec();
    let fail = |reason: String| Error::Encoder {
        encoder: spec.name.clone(),
        index,
        reason,
    };
    if tile.width == 0 || tile.height == 0 || tile.data.len() != tile.width as usize * tile.height as usize * 3 {
        return Err(fail("malformed tile buffer".into()));
    }
    let v = enc.encode(&resize_box(tile, spec.input_size_px)).map_err(fail)?;
    if v.len() != spec.output_dim {
        return Err(fail(format!("returned {} values, spec says {}", v.len(), spec.output_dim)));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(fail("non-finite output".into()));
    }
    Ok(v)
}

/// Row `i` is `[enc_a(tile_i), enc_b(tile_i)]`. Each encoder sees the tile
/// resized to its own input size. The first failing tile (by index) aborts
/// the batch.
pub fn encode_tiles(tiles: &[RgbTile], enc_a: &dyn TileEncoder, enc_b: &dyn TileEncoder) -> Result<FeatureMatrix> {
    let dim = enc_a.spec().output_dim + enc_b.spec().output_dim;
    let indexed: Vec<(usize, &RgbTile)> = tiles.iter().enumerate().collect();
    let rows = par_map(&indexed, |&(i, t)| -> Result<Vec<f32>> {
        let mut row = encode_one(t, enc_a, i)?;
        row.extend(encode_one(t, enc_b, i)?);
        Ok(row)
    });
    let mut data = Vec::with_capacity(tiles.len() * dim);
    for r in rows {
        data.extend(r?);
    }
    FeatureMatrix::new(tiles.len(), dim, data, Provenance::Tile)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Plain mean over all 21 tiles.
    #[default]
    Uniform,
    /// Mean of the three per-scale means.
    ScaleBalanced,
}

/// Pools the 21 tile rows of one region (manifest order: 1 x 2048,
/// 4 x 1024, 16 x 512) into a single region vector.
pub fn aggregate_region(tile_features: &FeatureMatrix, mode: AggregationMode) -> Result<Vec<f32>> {
    if tile_features.rows() != TILES_PER_REGION {
        return Err(Error::ManifestMismatch {
            expected: TILES_PER_REGION,
            got: tile_features.rows(),
        });
    }
    let mean = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut acc = vec![0.0f64; tile_features.dim()];
        let n = range.len() as f64;
        for r in range {
            for (a, &x) in acc.iter_mut().zip(tile_features.row(r)) {
                *a += x as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let pooled = match mode {
        AggregationMode::Uniform => mean(0..TILES_PER_REGION),
        AggregationMode::ScaleBalanced => {
            let parts = [mean(0..1), mean(1..5), mean(5..21)];
            (0..tile_features.dim())
                .map(|d| parts.iter().map(|p| p[d]).sum::<f64>() / 3.0)
                .collect()
        }
    };
    Ok(pooled.into_iter().map(|x| x as f32).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh-approximated GELU.
    #[default]
    Gelu,
    Identity,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = W2 · act(W1 · x + b1) + b2`, applied to each row independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorWeights {
    /// `hidden x in_dim`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `out_dim x hidden`
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorGrads {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub input: Mat,
}

impl ProjectorWeights {
    pub fn new(w1: Mat, b1: Vec<f64>, w2: Mat, b2: Vec<f64>, activation: Activation) -> Result<Self> {
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::shape(
                "ProjectorWeights",
                format!("w1 {:?} / b1 {} / w2 (_, {}) / b2 {}", w1.shape(), w1.rows(), w1.rows(), w2.rows()),
                format!("b1 {} / w2 {:?} / b2 {}", b1.len(), w2.shape(), b2.len()),
            ));
        }
        Ok(Self { w1, b1, w2, b2, activation })
    }

    /// Uniform init in `±1/sqrt(fan_in)`, zero biases.
    pub fn random(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: Mat::rand_uniform(hidden, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng),
            b1: vec![0.0; hidden],
            w2: Mat::rand_uniform(out_dim, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng),
            b2: vec![0.0; out_dim],
            activation: Activation::Gelu,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w1: Mat::identity(dim),
            b1: vec![0.0; dim],
            w2: Mat::identity(dim),
            b2: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Returns `(pre-activation, output)`.
    fn forward_parts(&self, x: &Mat) -> (Mat, Mat) {
        let mut pre = x.matmul_t(&self.w1);
        pre.add_row_vector(&self.b1);
        let act = pre.map(|v| self.activation.apply(v));
        let mut out = act.matmul_t(&self.w2);
        out.add_row_vector(&self.b2);
        (pre, out)
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("project", self.in_dim(), x.cols()));
        }
        Ok(self.forward_parts(x).1)
    }

    /// Exact gradients of `sum(upstream ⊙ forward(x))`.
    pub fn backward(&self, x: &Mat, upstream: &Mat) -> Result<ProjectorGrads> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("project_backward input", self.in_dim(), x.cols()));
        }
        if upstream.shape() != (x.rows(), self.out_dim()) {
            return Err(Error::shape(
                "project_backward upstream",
                format!("{}x{}", x.rows(), self.out_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let (pre, _) = self.forward_parts(x);
        let act = pre.map(|v| self.activation.apply(v));
        let w2 = upstream.t_matmul(&act);
        let b2 = upstream.column_sums();
        let d_act = upstream.matmul(&self.w2);
        let d_pre = Mat::from_fn(pre.rows(), pre.cols(), |r, c| {
            d_act[(r, c)] * self.activation.derivative(pre[(r, c)])
        });
        Ok(ProjectorGrads {
            w1: d_pre.t_matmul(x),
            b1: d_pre.column_sums(),
            w2,
            b2,
            input: d_pre.matmul(&self.w1),
        })
    }
}

/// Applies the projector to every row of `features`.
pub fn project(features: &FeatureMatrix, weights: &ProjectorWeights) -> Result<FeatureMatrix> {
    let out = weights.forward(&features.to_mat())?;
    FeatureMatrix::from_mat(&out, features.provenance())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(seed: u8, w: u32, h: u32) -> RgbTile {
        let data = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        RgbTile { width: w, height: h, data }
    }

    #[test]
    fn concat_dims() {
        let a = StubEncoder::new(1, 4, 16);
        let b = StubEncoder::new(2, 3, 8);
        let m = encode_tiles(&[tile(0, 64, 64), tile(9, 64, 64)], &a, &b).unwrap();
        assert_eq!((m.rows(), m.dim()), (2, 7));
        assert_eq!(m.provenance(), Provenance::Tile);
    }

    #[test]
    fn zero_second_encoder_pads_with_zeros() {
        let a = StubEncoder::new(5, 6, 32);
        let z = ZeroEncoder {
            spec: EncoderSpec {
                name: "zero".into(),
                input_size_px: 8,
                output_dim: 2,
            },
        };
        let t = tile(3, 40, 40);
        let m = encode_tiles(std::slice::from_ref(&t), &a, &z).unwrap();
        let alone = a.encode(&resize_box(&t, 32)).unwrap();
        assert_eq!(&m.row(0)[..6], alone.as_slice());
        assert_eq!(&m.row(0)[6..], &[0.0, 0.0]);
    }

    struct Failing;
    impl TileEncoder for Failing {
        fn spec(&self) -> &EncoderSpec {
            static SPEC: std::sync::OnceLock<EncoderSpec> = std::sync::OnceLock::new();
            SPEC.get_or_init(|| EncoderSpec {
                name: "failing".into(),
                input_size_px: 4,
                output_dim: 1,
            })
        }
        fn encode(&self, t: &ResizedTile) -> std::result::Result<Vec<f32>, String> {
            if t.data[0] > 100.0 {
                Err("too bright".into())
            } else {
                Ok(vec![1.0])
            }
        }
    }

    #[test]
    fn encoder_failure_reports_tile_index() {
        let dark = RgbTile { width: 4, height: 4, data: vec![0; 48] };
        let bright = RgbTile { width: 4, height: 4, data: vec![255; 48] };
        let a = StubEncoder::new(1, 2, 4);
        let err = encode_tiles(&[dark.clone(), dark, bright], &a, &Failing).unwrap_err();
        assert!(matches!(err, Error::Encoder { index: 2, .. }), "{err}");
    }

    #[test]
    fn stub_is_deterministic_and_seed_sensitive() {
        let t = resize_box(&tile(1, 50, 50), 24);
        let a = StubEncoder::new(11, 8, 24);
        assert_eq!(a.encode(&t).unwrap(), StubEncoder::new(11, 8, 24).encode(&t).unwrap());
        assert_ne!(a.encode(&t).unwrap(), StubEncoder::new(12, 8, 24).encode(&t).unwrap());
    }

    #[test]
    fn one_pixel_change_moves_the_embedding() {
        let a = StubEncoder::new(3, 16, 64);
        let base = tile(7, 512, 512);
        let mut changed = base.clone();
        changed.data[3 * (100 * 512 + 200)] ^= 0x80;
        let stats_a = StubEncoder::channel_stats(&resize_box(&base, 64));
        let stats_b = StubEncoder::channel_stats(&resize_box(&changed, 64));
        assert_ne!(stats_a, stats_b);
        let ea = a.encode(&resize_box(&base, 64)).unwrap();
        let eb = a.encode(&resize_box(&changed, 64)).unwrap();
        assert_ne!(ea, eb);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = tile(5, 8, 8);
        let r = resize_box(&t, 8);
        assert!(r.data.iter().zip(&t.data).all(|(a, &b)| *a == b as f32));
        let flat = RgbTile { width: 30, height: 17, data: vec![77; 30 * 17 * 3] };
        assert!(resize_box(&flat, 9).data.iter().all(|&v| v == 77.0));
        // Upsampling repeats source pixels.
        assert_eq!(resize_box(&flat, 64).data.len(), 64 * 64 * 3);
    }

    #[test]
    fn aggregate_examples() {
        let v: Vec<f32> = vec![0.5, -1.0, 2.0];
        let same = FeatureMatrix::from_rows(&vec![v.clone(); 21], Provenance::Tile).unwrap();
        assert_eq!(aggregate_region(&same, AggregationMode::Uniform).unwrap(), v);
        assert_eq!(aggregate_region(&same, AggregationMode::ScaleBalanced).unwrap(), v);

        let basis: Vec<Vec<f32>> = (0..21).map(|i| (0..21).map(|j| f32::from(i == j)).collect()).collect();
        let m = FeatureMatrix::from_rows(&basis, Provenance::Tile).unwrap();
        let out = aggregate_region(&m, AggregationMode::Uniform).unwrap();
        assert!(out.iter().all(|&x| x == (1.0f64 / 21.0) as f32));

        let short = FeatureMatrix::from_rows(&vec![v; 20], Provenance::Tile).unwrap();
        assert!(matches!(
            aggregate_region(&short, AggregationMode::Uniform),
            Err(Error::ManifestMismatch { expected: 21, got: 20 })
        ));
    }

    #[test]
    fn scale_balanced_weights_scales_equally() {
        let mut rows = vec![vec![0.0f32]; 21];
        rows[0] = vec![3.0];
        let m = FeatureMatrix::from_rows(&rows, Provenance::Tile).unwrap();
        assert_eq!(aggregate_region(&m, AggregationMode::ScaleBalanced).unwrap(), vec![1.0]);
        assert_eq!(aggregate_region(&m, AggregationMode::Uniform).unwrap(), vec![(3.0f64 / 21.0) as f32]);
    }

    #[test]
    fn identity_projector_and_zero_second_layer() {
        let x = Mat::from_fn(3, 4, |r, c| r as f64 - c as f64 * 0.5);
        assert_eq!(ProjectorWeights::identity(4).forward(&x).unwrap(), x);

        let mut p = ProjectorWeights::random(4, 5, 2, 1);
        p.w2 = Mat::zeros(2, 5);
        p.b2 = vec![0.25, -1.0];
        let y = p.forward(&x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.25, -1.0]);
        }
        assert!(p.forward(&Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
