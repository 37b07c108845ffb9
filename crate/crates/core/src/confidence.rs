//! Per-tile confidence maps `Ĥ ∈ [0, 1]` and their mapping to quantile levels.
//!
//! Two sources feed the map: a proxy built from the gradient magnitude of
//! the channel-mean latent, and the per-query entropy of an attention probe.
//! Both are pooled onto the same tile grid used for corridor estimation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::npy::Array;
use crate::stats::{entropy_unchecked, softmax_in_place, QuantilePair};
use crate::tensor::LatentTensor;
use crate::tiler::TileGrid;

const PROXY_FLOOR: f64 = 1e-12;
const ENTROPY_SPREAD_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConfidenceKind {
    Proxy,
    Attention,
    Uniform,
}

/// One `Ĥ` value per tile, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    tiles_y: usize,
    tiles_x: usize,
    values: Vec<f32>,
    kind: ConfidenceKind,
}

impl ConfidenceMap {
    pub fn new(grid: &TileGrid, values: Vec<f32>, kind: ConfidenceKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                expected: format!("{} tile values", grid.len()),
                got: format!("{}", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "confidence value {v} outside [0, 1]"
            )));
        }
        let (tiles_y, tiles_x) = grid.dims();
        Ok(ConfidenceMap {
            tiles_y,
            tiles_x,
            values,
            kind,
        })
    }

    pub fn uniform(grid: &TileGrid, value: f32) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()], ConfidenceKind::Uniform)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn kind(&self) -> ConfidenceKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.tiles_y, self.tiles_x)
    }

    /// `1 − Ĥ` per tile.
    pub fn inverted(&self) -> ConfidenceMap {
        ConfidenceMap {
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }
}

/// Maps a confidence to asymmetric quantile levels:
/// `q_ℓ = 0.5·Ĥ²`, `q_h = 1 − 0.5·(1 − Ĥ)²`.
pub fn quantile_map(h_hat: f64) -> Result<QuantilePair> {
    if !(0.0..=1.0).contains(&h_hat) {
        return Err(Error::invalid(format!("confidence {h_hat} outside [0, 1]")));
    }
    let q_low = 0.5 * h_hat * h_hat;
    let q_high = 1.0 - 0.5 * (1.0 - h_hat) * (1.0 - h_hat);
    QuantilePair::new(q_low, q_high)
}

/// Gradient magnitude of a plane: central differences inside, one-sided at
/// the borders, zero along an axis of length one.
pub(crate) fn gradient_magnitude(plane: &[f64], height: usize, width: usize) -> Vec<f64> {
    let diff = |get: &dyn Fn(usize) -> f64, i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            0.5 * (get(i + 1) - get(i - 1))
        }
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let gx = diff(&|j| plane[y * width + j], x, width);
            let gy = diff(&|i| plane[i * width + x], y, height);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Mean of a per-pixel field over every tile window of the grid.
pub(crate) fn pool_tiles(field: &[f64], grid: &TileGrid) -> Vec<f64> {
    let (t, w) = (grid.tile(), grid.width());
    let area = (t * t) as f64;
    (0..grid.len())
        .map(|k| {
            let (oy, ox) = grid.origin(k);
            let mut acc = 0.0;
            for y in oy..oy + t {
                acc += field[y * w + ox..y * w + ox + t].iter().sum::<f64>();
            }
            acc / area
        })
        .collect()
}

fn channel_mean(z: &LatentTensor, b: usize) -> Vec<f64> {
    let shape = z.shape();
    let mut mean = vec![0.0f64; shape.plane_len()];
    for c in 0..shape.channels {
        for (m, &v) in mean.iter_mut().zip(z.plane(b, c)) {
            *m += v as f64;
        }
    }
    let inv = 1.0 / shape.channels as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Proxy confidence: pooled gradient magnitude of the channel-mean latent,
/// divided by its largest tile value. One map per sample.
pub fn proxy_confidence(z: &LatentTensor, grid: &TileGrid) -> Result<Vec<ConfidenceMap>> {
    let shape = z.shape();
    grid.check(shape)?;
    (0..shape.batch)
        .into_par_iter()
        .map(|b| {
            let mean = channel_mean(z, b);
            let grad = gradient_magnitude(&mean, shape.height, shape.width);
            let pooled = pool_tiles(&grad, grid);
            let max = pooled.iter().copied().fold(0.0, f64::max);
            let values = if max < PROXY_FLOOR {
                vec![0.0; pooled.len()]
            } else {
                pooled.iter().map(|g| (g / max) as f32).collect()
            };
            ConfidenceMap::new(grid, values, ConfidenceKind::Proxy)
        })
        .collect()
}

/// Queries and keys captured from one attention layer for a single sample.
///
/// `queries` is `(heads, n_q, d)` and `keys` is `(heads, n_k, d)`, row-major.
/// Query `i` sits at `(i / w_t, i % w_t)` on the `h_t × w_t` token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbe {
    heads: usize,
    n_q: usize,
    n_k: usize,
    head_dim: usize,
    queries: Vec<f32>,
    keys: Vec<f32>,
    token_grid: (usize, usize),
    head_stride: usize,
    token_stride: usize,
}

impl AttentionProbe {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        n_q: usize,
        n_k: usize,
        head_dim: usize,
        queries: Vec<f32>,
        keys: Vec<f32>,
        token_grid: (usize, usize),
    ) -> Result<Self> {
        if heads == 0 || n_q == 0 || n_k == 0 || head_dim == 0 {
            return Err(Error::invalid("attention probe dimensions must be >= 1"));
        }
        if queries.len() != heads * n_q * head_dim || keys.len() != heads * n_k * head_dim {
            return Err(Error::Shape {
                expected: format!("Q {heads}x{n_q}x{head_dim}, K {heads}x{n_k}x{head_dim}"),
                got: format!("{} query and {} key values", queries.len(), keys.len()),
            });
        }
        if token_grid.0 * token_grid.1 != n_q {
            return Err(Error::Shape {
                expected: format!("token grid with {n_q} cells"),
                got: format!("{}x{}", token_grid.0, token_grid.1),
            });
        }
        Ok(AttentionProbe {
            heads,
            n_q,
            n_k,
            head_dim,
            queries,
            keys,
            token_grid,
            head_stride: 1,
            token_stride: 1,
        })
    }

    /// Builds a probe from `(n, d)` or `(heads, n, d)` arrays.
    pub fn from_arrays(q: &Array, k: &Array, token_grid: (usize, usize)) -> Result<Self> {
        let split = |a: &Array, name: &str| -> Result<(usize, usize, usize)> {
            match a.shape[..] {
                [n, d] => Ok((1, n, d)),
                [h, n, d] => Ok((h, n, d)),
                _ => Err(Error::invalid(format!(
                    "{name} must have rank 2 or 3, got shape {:?}",
                    a.shape
                ))),
            }
        };
        let (hq, n_q, dq) = split(q, "Q")?;
        let (hk, n_k, dk) = split(k, "K")?;
        if hq != hk || dq != dk {
            return Err(Error::Shape {
                expected: format!("K with {hq} heads of dim {dq}"),
                got: format!("{hk} heads of dim {dk}"),
            });
        }
        Self::new(hq, n_q, n_k, dq, q.data.clone(), k.data.clone(), token_grid)
    }

    /// Keeps every `head_stride`-th head and every `token_stride`-th query
    /// row and column of the token grid.
    pub fn with_subsample(mut self, head_stride: usize, token_stride: usize) -> Result<Self> {
        if head_stride == 0 || token_stride == 0 {
            return Err(Error::invalid("subsample strides must be >= 1"));
        }
        self.head_stride = head_stride;
        self.token_stride = token_stride;
        Ok(self)
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.token_grid
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn query_entropy(&self, head: usize, i: usize) -> f64 {
        let d = self.head_dim;
        let q = &self.queries[(head * self.n_q + i) * d..(head * self.n_q + i + 1) * d];
        let keys = &self.keys[head * self.n_k * d..(head + 1) * self.n_k * d];
        let scale = 1.0 / (d as f64).sqrt();
        let mut row: Vec<f64> = keys
            .chunks_exact(d)
            .map(|k| {
                scale
                    * q.iter()
                        .zip(k)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut row);
        entropy_unchecked(&row)
    }

    /// Per-token attention entropy on the token grid, averaged over the kept
    /// heads. Skipped tokens take the value of the nearest kept token.
    pub fn entropy_map(&self) -> EntropyMap {
        let (ht, wt) = self.token_grid;
        let s = self.token_stride;
        let kept_rows: Vec<usize> = (0..ht).step_by(s).collect();
        let kept_cols: Vec<usize> = (0..wt).step_by(s).collect();
        let heads: Vec<usize> = (0..self.heads).step_by(self.head_stride).collect();

        let mut sampled = vec![0.0f64; kept_rows.len() * kept_cols.len()];
        for &head in &heads {
            for (ri, &r) in kept_rows.iter().enumerate() {
                for (ci, &c) in kept_cols.iter().enumerate() {
                    sampled[ri * kept_cols.len() + ci] += self.query_entropy(head, r * wt + c);
                }
            }
        }
        let inv = 1.0 / heads.len() as f64;
        let nearest = |p: usize, n_kept: usize| -> usize {
            // ties resolve to the lower kept index
            let lower = p / s;
            let upper = lower + 1;
            if upper < n_kept && (upper * s - p) < (p - lower * s) {
                upper
            } else {
                lower.min(n_kept - 1)
            }
        };
        let mut values = Vec::with_capacity(ht * wt);
        for r in 0..ht {
            let ri = nearest(r, kept_rows.len());
            for c in 0..wt {
                let ci = nearest(c, kept_cols.len());
                values.push(sampled[ri * kept_cols.len() + ci] * inv);
            }
        }
        EntropyMap {
            height: ht,
            width: wt,
            values,
        }
    }
}

/// Per-token entropy on a `height × width` token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    pub fn from_array(a: &Array) -> Result<Self> {
        let (height, width) = match a.shape[..] {
            [h, w] => (h, w),
            [1, h, w] => (h, w),
            _ => {
                return Err(Error::invalid(format!(
                    "entropy map must be (h, w), got shape {:?}",
                    a.shape
                )))
            }
        };
        if height == 0 || width == 0 {
            return Err(Error::invalid("entropy map must be non-empty"));
        }
        Ok(EntropyMap {
            height,
            width,
            values: a.data.iter().map(|&v| v as f64).collect(),
        })
    }

    /// Min–max normalization to `[0, 1]`; a flat map becomes all 0.5.
    pub fn normalized(&self) -> Vec<f64> {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let spread = max - min;
        if spread < ENTROPY_SPREAD_FLOOR {
            vec![0.5; self.values.len()]
        } else {
            self.values
                .iter()
                .map(|v| ((v - min) / spread).clamp(0.0, 1.0))
                .collect()
        }
    }
}

/// Bilinear resize (half-pixel centres, edge clamped).
pub(crate) fn resample_bilinear(
    src: &[f64],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<f64> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let coord = |d: usize, n_src: usize, n_dst: usize| -> (usize, usize, f64) {
        let s =
            ((d as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..dw).map(|x| coord(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Confidence from a per-token entropy map: normalize, resample to the
/// latent plane when the resolutions differ, and average over each tile.
pub fn entropy_map_confidence(map: &EntropyMap, grid: &TileGrid) -> Result<ConfidenceMap> {
    let normalized = map.normalized();
    let field = resample_bilinear(
        &normalized,
        map.height,
        map.width,
        grid.height(),
        grid.width(),
    );
    let values = pool_tiles(&field, grid)
        .into_iter()
        .map(|v| (v as f32).clamp(0.0, 1.0))
        .collect();
    ConfidenceMap::new(grid, values, ConfidenceKind::Attention)
}

/// Attention-entropy confidence for one sample.
pub fn attention_confidence(probe: &AttentionProbe, grid: &TileGrid) -> Result<ConfidenceMap> {
    entropy_map_confidence(&probe.entropy_map(), grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::tiler::plan_grid;
    use proptest::prelude::*;

    #[test]
    fn quantile_map_examples() {
        let q = quantile_map(0.0).unwrap();
        assert_eq!((q.low(), q.high()), (0.0, 0.5));
        let q = quantile_map(1.0).unwrap();
        assert_eq!((q.low(), q.high()), (0.5, 1.0));
        let q = quantile_map(0.5).unwrap();
        assert_eq!((q.low(), q.high()), (0.125, 0.875));
        assert!(quantile_map(1.01).is_err());
        assert!(quantile_map(-0.01).is_err());
    }

    #[test]
    fn constant_latent_has_zero_proxy_confidence() {
        let z = LatentTensor::new(Shape::new(2, 4, 16, 16), vec![3.0; 2048]).unwrap();
        let g = plan_grid(16, 16, 8, 4).unwrap();
        for map in proxy_confidence(&z, &g).unwrap() {
            assert!(map.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ramp_has_unit_proxy_confidence_everywhere() {
        let z = LatentTensor::from_fn(Shape::new(1, 3, 20, 24), |[_, c, _, x]| x as f32 + c as f32)
            .unwrap();
        let g = plan_grid(20, 24, 8, 4).unwrap();
        let map = &proxy_confidence(&z, &g).unwrap()[0];
        assert!(map.values().iter().all(|&v| v == 1.0), "{:?}", map.values());
    }

    #[test]
    fn edge_tile_has_peak_confidence() {
        // vertical step edge between x = 21 and x = 22, inside only the tiles spanning it
        let z = LatentTensor::from_fn(
            Shape::new(1, 2, 32, 32),
            |[_, _, _, x]| if x >= 22 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let g = plan_grid(32, 32, 8, 8).unwrap();
        let map = &proxy_confidence(&z, &g).unwrap()[0];
        // brute force: edge columns 21 and 22 both have |∇| = 0.5, all in tile column 2
        let (_, nx) = g.dims();
        for (k, &v) in map.values().iter().enumerate() {
            let tile_col = k % nx;
            assert_eq!(v, if tile_col == 2 { 1.0 } else { 0.0 });
        }
    }

    fn probe_2x(q: Vec<f32>, k: Vec<f32>, n_k: usize, d: usize) -> AttentionProbe {
        let n_q = q.len() / d;
        AttentionProbe::new(1, n_q, n_k, d, q, k, (1, n_q)).unwrap()
    }

    #[test]
    fn peaked_vs_uniform_attention() {
        // query 0 attends sharply to key 0; query 1 has zero logits
        let probe = probe_2x(vec![1000.0, 0.0], vec![1.0, 0.0], 2, 1);
        let em = probe.entropy_map();
        assert_eq!(em.values[0], 0.0);
        assert!((em.values[1] - 2f64.ln()).abs() < 1e-12);
        let g = plan_grid(1, 2, 1, 1).unwrap();
        let map = attention_confidence(&probe, &g).unwrap();
        assert_eq!(map.values(), &[0.0, 1.0]);
    }

    #[test]
    fn degenerate_attention_is_half() {
        let g = plan_grid(4, 4, 2, 2).unwrap();
        let same = AttentionProbe::new(
            1,
            16,
            3,
            2,
            [0.3, -0.2].repeat(16),
            [1.0, 0.5].repeat(3),
            (4, 4),
        )
        .unwrap();
        assert!(attention_confidence(&same, &g)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.5));
        let zero_q = AttentionProbe::new(
            1,
            16,
            3,
            2,
            vec![0.0; 32],
            vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0],
            (4, 4),
        )
        .unwrap();
        assert!(attention_confidence(&zero_q, &g)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn probe_rejects_inconsistent_grid() {
        assert!(AttentionProbe::new(1, 6, 2, 1, vec![0.0; 6], vec![0.0; 2], (2, 2)).is_err());
        assert!(AttentionProbe::new(1, 4, 2, 1, vec![0.0; 3], vec![0.0; 2], (2, 2)).is_err());
    }

    #[test]
    fn token_subsampling_fills_from_nearest_kept_token() {
        // 1x5 token grid, stride 2 keeps columns 0, 2, 4
        let q: Vec<f32> = vec![0.0, 50.0, 1.0, 50.0, 2.0];
        let probe = AttentionProbe::new(1, 5, 2, 1, q, vec![1.0, -1.0], (1, 5))
            .unwrap()
            .with_subsample(1, 2)
            .unwrap();
        let em = probe.entropy_map();
        let full = AttentionProbe::new(
            1,
            5,
            2,
            1,
            vec![0.0, 50.0, 1.0, 50.0, 2.0],
            vec![1.0, -1.0],
            (1, 5),
        )
        .unwrap()
        .entropy_map();
        assert_eq!(em.values[0], full.values[0]);
        assert_eq!(em.values[1], full.values[0]);
        assert_eq!(em.values[2], full.values[2]);
        assert_eq!(em.values[3], full.values[2]);
        assert_eq!(em.values[4], full.values[4]);
    }

    #[test]
    fn heads_are_averaged_and_subsampled() {
        let q = vec![1000.0, 0.0, 0.0, 0.0]; // head 0: [peaked, flat]; head 1: [flat, flat]
        let k = vec![1.0, 0.0, 1.0, 0.0];
        let probe = AttentionProbe::new(2, 2, 2, 1, q.clone(), k.clone(), (1, 2)).unwrap();
        let em = probe.entropy_map();
        assert!((em.values[0] - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((em.values[1] - 2f64.ln()).abs() < 1e-12);
        let first_only = AttentionProbe::new(2, 2, 2, 1, q, k, (1, 2))
            .unwrap()
            .with_subsample(2, 1)
            .unwrap();
        assert_eq!(first_only.entropy_map().values[0], 0.0);
    }

    #[test]
    fn coarse_token_grid_is_resampled() {
        let map = EntropyMap {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0, 0.0, 1.0],
        };
        let g = plan_grid(8, 8, 4, 4).unwrap();
        let conf = entropy_map_confidence(&map, &g).unwrap();
        let v = conf.values();
        assert_eq!(v[0], v[2]);
        assert_eq!(v[1], v[3]);
        assert!(v[0] < v[1]);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn proxy_invariant_to_affine_maps(
            seed in any::<u64>(),
            scale in prop::sample::select(vec![0.25f32, 0.5, 1.0, 2.0, 3.0, 8.0]),
            shift in -50i32..50,
        ) {
            // values on a 1/256 lattice so that scale·z + shift is exact in f32
            let shape = Shape::new(2, 3, 12, 10);
            let z = LatentTensor::from_fn(shape, |[b, c, y, x]| {
                let h = (seed ^ ((b * 1000 + c * 100 + y * 10 + x) as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                ((h >> 54) as i32 - 512) as f32 / 256.0
            }).unwrap();
            let zz = z.with_data(z.data().iter().map(|v| scale * v + shift as f32).collect()).unwrap();
            let g = plan_grid(12, 10, 4, 3).unwrap();
            let (a, b) = (proxy_confidence(&z, &g).unwrap(), proxy_confidence(&zz, &g).unwrap());
            for (ma, mb) in a.iter().zip(&b) {
                prop_assert!(ma.values().contains(&1.0));
                for (&x, &y) in ma.values().iter().zip(mb.values()) {
                    prop_assert!((0.0..=1.0).contains(&x));
                    prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
                }
            }
        }

        #[test]
        fn attention_invariant_to_key_permutation(
            q in prop::collection::vec(-3f32..3.0, 12),
            k in prop::collection::vec(-3f32..3.0, 10),
            rot in 0usize..5,
        ) {
            // 6 queries on a 2x3 grid, 5 keys, head dim 2
            let mut rows: Vec<Vec<f32>> = k.chunks(2).map(|c| c.to_vec()).collect();
            rows.rotate_left(rot);
            rows.swap(0, 4);
            let k2: Vec<f32> = rows.concat();
            let g = plan_grid(2, 3, 1, 1).unwrap();
            let a = attention_confidence(&AttentionProbe::new(1, 6, 5, 2, q.clone(), k, (2, 3)).unwrap(), &g).unwrap();
            let b = attention_confidence(&AttentionProbe::new(1, 6, 5, 2, q, k2, (2, 3)).unwrap(), &g).unwrap();
            for (&x, &y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn quantile_map_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (qa, qb) = (quantile_map(lo).unwrap(), quantile_map(hi).unwrap());
            prop_assert!(qa.low() <= qb.low() && qa.high() <= qb.high());
            prop_assert!(qa.low() <= 0.5 && 0.5 <= qa.high());
        }
    }
}
