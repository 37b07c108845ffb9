//! Adaptive per-tile quantile clipping for one denoising step.
//!
//! The step runs in this order:
//!
//! 1. confidence `Ĥ` per tile (gradient proxy or attention entropy),
//! 2. quantile levels from `Ĥ`,
//! 3. per-tile mean and standard deviation over all channels,
//! 4. a Gaussian corridor `ℓ = μ + σ·Φ⁻¹(q_ℓ)`, `h = μ + σ·Φ⁻¹(q_h)`,
//! 5. EMA of `(ℓ, h)` against the session's previous step,
//! 6. tanh soft clip of every tile into its corridor,
//! 7. overlap-add with coverage normalization.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::confidence::{
    attention_confidence, entropy_map_confidence, proxy_confidence, quantile_map, AttentionProbe,
    ConfidenceMap, EntropyMap,
};
use crate::error::{Error, Result};
use crate::stats::{ndtri, soft_clip_elem, QuantilePair};
use crate::tensor::{LatentTensor, Shape};
use crate::tiler::{overlap_add, plan_grid, unfold, PatchStack, TileGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AqClipMode {
    #[default]
    Lite,
    Attn,
}

impl std::str::FromStr for AqClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(AqClipMode::Lite),
            "attn" => Ok(AqClipMode::Attn),
            other => Err(Error::invalid(format!(
                "unknown aqclip mode {other:?} (lite|attn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AqClipConfig {
    pub tile: usize,
    pub stride: usize,
    pub alpha: f32,
    pub ema_beta: f32,
    pub eps: f32,
    /// Quantile levels are clamped to `[floor, 1 − floor]` before `Φ⁻¹`.
    pub quantile_floor: f64,
    pub mode: AqClipMode,
    /// Use `1 − Ĥ` in place of `Ĥ`.
    pub invert_confidence: bool,
}

impl Default for AqClipConfig {
    fn default() -> Self {
        AqClipConfig {
            tile: 32,
            stride: 16,
            alpha: 2.0,
            ema_beta: 0.8,
            eps: 1e-6,
            quantile_floor: 1e-4,
            mode: AqClipMode::Lite,
            invert_confidence: false,
        }
    }
}

impl AqClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.stride == 0 || self.stride > self.tile {
            return Err(Error::invalid(format!(
                "need 1 <= stride <= tile, got tile {} stride {}",
                self.tile, self.stride
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::invalid(format!(
                "ema beta must lie in [0, 1], got {}",
                self.ema_beta
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.quantile_floor > 0.0 && self.quantile_floor < 0.5) {
            return Err(Error::invalid(format!(
                "quantile floor must lie in (0, 0.5), got {}",
                self.quantile_floor
            )));
        }
        Ok(())
    }

    /// Stable 64-bit hash of every field, stored in session files.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"aqclip-config-v1");
        h.update((self.tile as u64).to_le_bytes());
        h.update((self.stride as u64).to_le_bytes());
        h.update(self.alpha.to_bits().to_le_bytes());
        h.update(self.ema_beta.to_bits().to_le_bytes());
        h.update(self.eps.to_bits().to_le_bytes());
        h.update(self.quantile_floor.to_bits().to_le_bytes());
        h.update([self.mode as u8, self.invert_confidence as u8]);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// Mean and population standard deviation per `(sample, tile)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TileStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

fn mean_std<'a>(values: impl Iterator<Item = &'a [f32]> + Clone) -> (f32, f32) {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for row in values.clone() {
        n += row.len();
        sum += row.iter().map(|&v| v as f64).sum::<f64>();
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for row in values {
        ss += row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
    }
    (mean as f32, (ss / n as f64).sqrt() as f32)
}

/// Statistics of every patch, pooling the `T·T` values of all channels.
pub fn tile_stats(patches: &PatchStack) -> TileStats {
    let (batch, channels, tiles) = (patches.batch(), patches.channels(), patches.grid().len());
    let (mu, sigma) = (0..batch * tiles)
        .into_par_iter()
        .map(|i| {
            let (b, k) = (i / tiles, i % tiles);
            mean_std((0..channels).map(|c| patches.patch(b, c, k)))
        })
        .unzip();
    TileStats { mu, sigma }
}

/// Same statistics read straight from the latent, without materializing patches.
pub(crate) fn tile_stats_direct(z: &LatentTensor, grid: &TileGrid) -> TileStats {
    let shape = z.shape();
    let (tiles, t) = (grid.len(), grid.tile());
    let (mu, sigma) = (0..shape.batch * tiles)
        .into_par_iter()
        .map(|i| {
            let (b, k) = (i / tiles, i % tiles);
            let (oy, ox) = grid.origin(k);
            let rows = (0..shape.channels).flat_map(|c| {
                let plane = z.plane(b, c);
                (oy..oy + t).map(move |y| &plane[y * shape.width + ox..y * shape.width + ox + t])
            });
            mean_std(rows)
        })
        .unzip();
    TileStats { mu, sigma }
}

/// Gaussian corridor for one tile: `ℓ = μ + σ·Φ⁻¹(q̃_ℓ)`, `h = μ + σ·Φ⁻¹(q̃_h)`
/// with both levels clamped to `[floor, 1 − floor]`.
pub fn corridor(mu: f32, sigma: f32, q: QuantilePair, floor: f64) -> Result<(f32, f32)> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let clamp = |p: f64| p.clamp(floor, 1.0 - floor);
    let z_lo = ndtri(clamp(q.low()))?;
    let z_hi = ndtri(clamp(q.high()))?;
    let (mu, sigma) = (mu as f64, sigma as f64);
    Ok(((mu + sigma * z_lo) as f32, (mu + sigma * z_hi) as f32))
}

/// Per-tile corridor statistics, indexed `(sample, tile)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorridorGrid {
    pub batch: usize,
    pub tiles_y: usize,
    pub tiles_x: usize,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl CorridorGrid {
    pub fn tiles(&self) -> usize {
        self.tiles_y * self.tiles_x
    }

    /// Every tile of every sample shares one corridor.
    pub fn shared(grid: &TileGrid, batch: usize, lo: f32, hi: f32) -> CorridorGrid {
        let (tiles_y, tiles_x) = grid.dims();
        let n = batch * grid.len();
        CorridorGrid {
            batch,
            tiles_y,
            tiles_x,
            mu: vec![0.5 * (lo + hi); n],
            sigma: vec![0.0; n],
            lo: vec![lo; n],
            hi: vec![hi; n],
        }
    }

    fn matches(&self, other: &Self) -> bool {
        (self.batch, self.tiles_y, self.tiles_x) == (other.batch, other.tiles_y, other.tiles_x)
    }
}

/// Geometry a session is bound to after its first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SessionGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
}

impl SessionGeometry {
    pub fn grid(&self) -> Result<TileGrid> {
        plan_grid(self.height, self.width, self.tile, self.stride)
    }
}

/// State carried across denoising steps: bound geometry, the EMA-smoothed
/// `(ℓ, h)` grids and a step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepSession {
    pub(crate) geometry: Option<SessionGeometry>,
    pub(crate) fingerprint: Option<u64>,
    pub(crate) ema_lo: Vec<f32>,
    pub(crate) ema_hi: Vec<f32>,
    pub(crate) step_index: u64,
}

impl StepSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn geometry(&self) -> Option<SessionGeometry> {
        self.geometry
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    pub fn is_fresh(&self) -> bool {
        self.geometry.is_none()
    }

    /// Smoothed `(ℓ, h)` per `(sample, tile)`; empty before the first step.
    pub fn ema_corridor(&self) -> (&[f32], &[f32]) {
        (&self.ema_lo, &self.ema_hi)
    }

    fn bind(&mut self, shape: Shape, cfg: &AqClipConfig) -> Result<TileGrid> {
        let want = SessionGeometry {
            batch: shape.batch,
            height: shape.height,
            width: shape.width,
            tile: cfg.tile,
            stride: cfg.stride,
        };
        match self.geometry {
            None => {
                let grid = want.grid()?;
                self.geometry = Some(want);
                self.fingerprint = Some(cfg.fingerprint());
                Ok(grid)
            }
            Some(have) => {
                if have != want {
                    return Err(Error::Session(format!(
                        "expected {}x{} latent (batch {}, tile {}, stride {}), got {}x{} (batch {}, tile {}, stride {})",
                        have.height, have.width, have.batch, have.tile, have.stride,
                        want.height, want.width, want.batch, want.tile, want.stride,
                    )));
                }
                let fp = cfg.fingerprint();
                if self.fingerprint != Some(fp) {
                    return Err(Error::Session(format!(
                        "expected config fingerprint {:016x}, got {fp:016x}",
                        self.fingerprint.unwrap_or_default()
                    )));
                }
                have.grid()
            }
        }
    }
}

/// Blends `current` into the session's smoothed corridor and stores the result.
///
/// On the first call the state is simply `current`; afterwards
/// `new = β·previous + (1 − β)·current` for `ℓ` and `h` independently.
pub fn ema_update(
    session: &mut StepSession,
    current: &CorridorGrid,
    beta: f32,
) -> Result<CorridorGrid> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "ema beta must lie in [0, 1], got {beta}"
        )));
    }
    let n = current.batch * current.tiles();
    let mut out = current.clone();
    if session.ema_lo.is_empty() {
        session.ema_lo = current.lo.clone();
        session.ema_hi = current.hi.clone();
        return Ok(out);
    }
    if session.ema_lo.len() != n {
        return Err(Error::Session(format!(
            "EMA state holds {} tiles, current corridor has {n}",
            session.ema_lo.len()
        )));
    }
    let (b, a) = (beta as f64, 1.0 - beta as f64);
    let blend = |prev: f32, cur: f32| (b * prev as f64 + a * cur as f64) as f32;
    for i in 0..n {
        out.lo[i] = blend(session.ema_lo[i], current.lo[i]);
        out.hi[i] = blend(session.ema_hi[i], current.hi[i]);
    }
    session.ema_lo.clone_from(&out.lo);
    session.ema_hi.clone_from(&out.hi);
    Ok(out)
}

/// Soft-clips every tile into its own corridor and reassembles with
/// overlap-add. Reads the latent directly; produces the same bits as
/// [`apply_corridors_unfolded`].
pub fn apply_corridors(
    z: &LatentTensor,
    grid: &TileGrid,
    corridors: &CorridorGrid,
    alpha: f32,
    eps: f32,
) -> Result<LatentTensor> {
    let shape = z.shape();
    check_corridors(shape, grid, corridors)?;
    let (t, tiles, nx) = (grid.tile(), grid.len(), grid.dims().1);
    let (py, px) = (grid.positions_y(), grid.positions_x());
    let cover_x: Vec<_> = (0..shape.width)
        .map(|x| TileGrid::covering(px, t, x))
        .collect();
    let mut out = vec![0.0f32; shape.len()];
    out.par_chunks_mut(shape.width)
        .zip(z.data().par_chunks(shape.width))
        .enumerate()
        .for_each(|(row_idx, (dst, src))| {
            let y = row_idx % shape.height;
            let b = row_idx / (shape.height * shape.channels);
            let lo = &corridors.lo[b * tiles..(b + 1) * tiles];
            let hi = &corridors.hi[b * tiles..(b + 1) * tiles];
            let cy = TileGrid::covering(py, t, y);
            for (x, (o, &v)) in dst.iter_mut().zip(src).enumerate() {
                let mut acc = 0.0f64;
                let mut count = 0u32;
                for ky in cy.clone() {
                    for kx in cover_x[x].clone() {
                        let k = ky * nx + kx;
                        acc += soft_clip_elem(v, lo[k], hi[k], alpha, eps) as f64;
                        count += 1;
                    }
                }
                *o = (acc / count as f64) as f32;
            }
        });
    LatentTensor::new(shape, out)
}

/// Reference path for [`apply_corridors`]: unfold, clip each patch, fold.
pub fn apply_corridors_unfolded(
    z: &LatentTensor,
    grid: &TileGrid,
    corridors: &CorridorGrid,
    alpha: f32,
    eps: f32,
) -> Result<LatentTensor> {
    let shape = z.shape();
    check_corridors(shape, grid, corridors)?;
    let mut patches = unfold(z, grid)?;
    let tiles = grid.len();
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            for k in 0..tiles {
                let (lo, hi) = (corridors.lo[b * tiles + k], corridors.hi[b * tiles + k]);
                for v in patches.patch_mut(b, c, k) {
                    *v = soft_clip_elem(*v, lo, hi, alpha, eps);
                }
            }
        }
    }
    overlap_add(&patches)
}

fn check_corridors(shape: Shape, grid: &TileGrid, corridors: &CorridorGrid) -> Result<()> {
    grid.check(shape)?;
    if (corridors.batch, corridors.tiles_y, corridors.tiles_x)
        != (shape.batch, grid.dims().0, grid.dims().1)
    {
        return Err(Error::Shape {
            expected: format!(
                "corridors for batch {} on a {:?} tile grid",
                shape.batch,
                grid.dims()
            ),
            got: format!(
                "batch {} on ({}, {})",
                corridors.batch, corridors.tiles_y, corridors.tiles_x
            ),
        });
    }
    Ok(())
}

/// Confidence input for attention mode: one entry per sample, or a single
/// entry shared by the whole batch.
#[derive(Clone, Debug)]
pub enum AttentionSource {
    Probes(Vec<AttentionProbe>),
    EntropyMaps(Vec<EntropyMap>),
}

impl AttentionSource {
    fn len(&self) -> usize {
        match self {
            AttentionSource::Probes(p) => p.len(),
            AttentionSource::EntropyMaps(m) => m.len(),
        }
    }

    fn confidence(&self, grid: &TileGrid, batch: usize) -> Result<Vec<ConfidenceMap>> {
        let n = self.len();
        if n != 1 && n != batch {
            return Err(Error::Shape {
                expected: format!("1 or {batch} attention inputs"),
                got: format!("{n}"),
            });
        }
        let one = |i: usize| match self {
            AttentionSource::Probes(p) => attention_confidence(&p[i], grid),
            AttentionSource::EntropyMaps(m) => entropy_map_confidence(&m[i], grid),
        };
        if n == 1 {
            let shared = one(0)?;
            Ok(vec![shared; batch])
        } else {
            (0..n).map(one).collect()
        }
    }
}

/// Everything one step produced.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub latent: LatentTensor,
    pub confidence: Vec<ConfidenceMap>,
    /// Raw per-step corridor, before smoothing.
    pub raw: CorridorGrid,
    /// Corridor after EMA; this is what the clip used.
    pub smoothed: CorridorGrid,
}

/// One denoising step. Attention mode requires `attention`; lite mode ignores it.
pub fn aqclip_step(
    z: &LatentTensor,
    cfg: &AqClipConfig,
    session: &mut StepSession,
    attention: Option<&AttentionSource>,
) -> Result<StepOutput> {
    cfg.validate()?;
    let shape = z.shape();
    let grid = plan_grid(shape.height, shape.width, cfg.tile, cfg.stride)?;
    let confidence = match cfg.mode {
        AqClipMode::Lite => proxy_confidence(z, &grid)?,
        AqClipMode::Attn => attention
            .ok_or_else(|| {
                Error::invalid("attention mode requires an attention probe or entropy map")
            })?
            .confidence(&grid, shape.batch)?,
    };
    aqclip_step_with_confidence(z, cfg, session, confidence)
}

/// One step with a caller-supplied confidence map per sample.
pub fn aqclip_step_with_confidence(
    z: &LatentTensor,
    cfg: &AqClipConfig,
    session: &mut StepSession,
    confidence: Vec<ConfidenceMap>,
) -> Result<StepOutput> {
    cfg.validate()?;
    let shape = z.shape();
    // validate against a scratch copy so a failed step leaves the session untouched
    let mut next = session.clone();
    let grid = next.bind(shape, cfg)?;
    if confidence.len() != shape.batch || confidence.iter().any(|m| m.dims() != grid.dims()) {
        return Err(Error::Shape {
            expected: format!(
                "{} confidence maps on a {:?} grid",
                shape.batch,
                grid.dims()
            ),
            got: format!("{} maps", confidence.len()),
        });
    }
    let confidence: Vec<ConfidenceMap> = if cfg.invert_confidence {
        confidence.iter().map(ConfidenceMap::inverted).collect()
    } else {
        confidence
    };

    let stats = tile_stats_direct(z, &grid);
    let tiles = grid.len();
    let mut lo = Vec::with_capacity(shape.batch * tiles);
    let mut hi = Vec::with_capacity(shape.batch * tiles);
    for (b, map) in confidence.iter().enumerate() {
        for (k, &h_hat) in map.values().iter().enumerate() {
            let q = quantile_map(h_hat as f64)?;
            let i = b * tiles + k;
            let (l, h) = corridor(stats.mu[i], stats.sigma[i], q, cfg.quantile_floor)?;
            lo.push(l);
            hi.push(h);
        }
    }
    let (tiles_y, tiles_x) = grid.dims();
    let raw = CorridorGrid {
        batch: shape.batch,
        tiles_y,
        tiles_x,
        mu: stats.mu,
        sigma: stats.sigma,
        lo,
        hi,
    };
    let smoothed = ema_update(&mut next, &raw, cfg.ema_beta)?;
    debug_assert!(smoothed.matches(&raw));
    let latent = apply_corridors(z, &grid, &smoothed, cfg.alpha, cfg.eps)?;
    next.step_index += 1;
    *session = next;
    Ok(StepOutput {
        latent,
        confidence,
        raw,
        smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(shape: Shape, seed: u64) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::new(
            shape,
            (0..shape.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tile_stats_examples() {
        let z = LatentTensor::new(Shape::new(1, 2, 4, 4), vec![2.5; 32]).unwrap();
        let g = plan_grid(4, 4, 2, 2).unwrap();
        let s = tile_stats(&unfold(&z, &g).unwrap());
        assert!(s.mu.iter().all(|&m| m == 2.5));
        assert!(s.sigma.iter().all(|&v| v == 0.0));

        let z = LatentTensor::from_fn(Shape::new(1, 1, 2, 2), |[_, _, y, x]| {
            if (x + y) % 2 == 0 {
                -1.0
            } else {
                1.0
            }
        })
        .unwrap();
        let g = plan_grid(2, 2, 2, 2).unwrap();
        let s = tile_stats(&unfold(&z, &g).unwrap());
        assert_eq!((s.mu[0], s.sigma[0]), (0.0, 1.0));
    }

    #[test]
    fn tile_stats_match_two_pass_oracle() {
        let z = normal(Shape::new(2, 4, 48, 40), 5);
        let g = plan_grid(48, 40, 32, 16).unwrap();
        let s = tile_stats(&unfold(&z, &g).unwrap());
        assert_eq!(s, tile_stats_direct(&z, &g));
        for b in 0..2 {
            for k in 0..g.len() {
                let (oy, ox) = g.origin(k);
                let mut vals = Vec::new();
                for c in 0..4 {
                    for y in oy..oy + 32 {
                        for x in ox..ox + 32 {
                            vals.push(z.get(b, c, y, x) as f64);
                        }
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                let i = b * g.len() + k;
                assert!((s.mu[i] as f64 - mean).abs() <= 1e-6 * mean.abs().max(1e-3));
                assert!((s.sigma[i] as f64 - var.sqrt()).abs() <= 1e-6 * var.sqrt());
            }
        }
    }

    #[test]
    fn corridor_examples() {
        let q = quantile_map(0.5).unwrap();
        let (lo, hi) = corridor(0.0, 1.0, q, 1e-4).unwrap();
        assert!((lo as f64 + 1.150_349_380_376_008).abs() < 1e-6);
        assert!((hi as f64 - 1.150_349_380_376_008).abs() < 1e-6);

        assert_eq!(corridor(3.0, 0.0, q, 1e-4).unwrap(), (3.0, 3.0));

        let (lo, hi) = corridor(2.0, 0.5, quantile_map(1.0).unwrap(), 1e-4).unwrap();
        assert_eq!(lo, 2.0);
        assert!((hi as f64 - (2.0 + 0.5 * 3.719_016_485_455_709)).abs() < 1e-6);
        assert!(corridor(0.0, -1.0, q, 1e-4).is_err());
    }

    fn corridor_grid(lo: f32, hi: f32) -> CorridorGrid {
        CorridorGrid {
            batch: 1,
            tiles_y: 1,
            tiles_x: 2,
            mu: vec![0.0; 2],
            sigma: vec![1.0; 2],
            lo: vec![lo; 2],
            hi: vec![hi; 2],
        }
    }

    #[test]
    fn ema_examples() {
        let first = corridor_grid(-1.0, 1.0);
        let second = corridor_grid(-3.0, 2.0);

        let mut s = StepSession::new();
        ema_update(&mut s, &first, 0.0).unwrap();
        assert_eq!(ema_update(&mut s, &second, 0.0).unwrap().lo, second.lo);

        let mut s = StepSession::new();
        ema_update(&mut s, &first, 1.0).unwrap();
        let frozen = ema_update(&mut s, &second, 1.0).unwrap();
        assert_eq!((frozen.lo[0], frozen.hi[0]), (-1.0, 1.0));

        let mut s = StepSession::new();
        for _ in 0..10 {
            let out = ema_update(&mut s, &first, 0.8).unwrap();
            assert_eq!((out.lo[1], out.hi[1]), (-1.0, 1.0));
        }

        let mut s = StepSession::new();
        ema_update(&mut s, &first, 0.8).unwrap();
        let out = ema_update(&mut s, &second, 0.8).unwrap();
        assert!((out.lo[0] - (-1.4)).abs() < 1e-6 && (out.hi[0] - 1.2).abs() < 1e-6);

        let mut wrong = corridor_grid(0.0, 1.0);
        wrong.tiles_x = 3;
        wrong.lo.push(0.0);
        wrong.hi.push(1.0);
        assert!(matches!(
            ema_update(&mut s, &wrong, 0.8),
            Err(Error::Session(_))
        ));
    }

    #[test]
    fn constant_latent_is_a_fixed_point() {
        let z = LatentTensor::new(Shape::new(2, 4, 64, 64), vec![-0.37; 2 * 4 * 64 * 64]).unwrap();
        let mut s = StepSession::new();
        let out = aqclip_step(&z, &AqClipConfig::default(), &mut s, None).unwrap();
        for (&a, &b) in out.latent.data().iter().zip(z.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(s.step_index(), 1);
    }

    #[test]
    fn fused_and_unfolded_paths_agree_bitwise() {
        let z = normal(Shape::new(2, 3, 37, 29), 9);
        let g = plan_grid(37, 29, 12, 5).unwrap();
        let stats = tile_stats_direct(&z, &g);
        let (ty, tx) = g.dims();
        let lo: Vec<f32> = stats
            .mu
            .iter()
            .zip(&stats.sigma)
            .map(|(m, s)| m - 0.7 * s)
            .collect();
        let hi: Vec<f32> = stats
            .mu
            .iter()
            .zip(&stats.sigma)
            .map(|(m, s)| m + 1.1 * s)
            .collect();
        let cg = CorridorGrid {
            batch: 2,
            tiles_y: ty,
            tiles_x: tx,
            mu: stats.mu,
            sigma: stats.sigma,
            lo,
            hi,
        };
        let a = apply_corridors(&z, &g, &cg, 2.0, 1e-6).unwrap();
        let b = apply_corridors_unfolded(&z, &g, &cg, 2.0, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_mode_requires_probe() {
        let z = normal(Shape::new(1, 4, 32, 32), 1);
        let cfg = AqClipConfig {
            mode: AqClipMode::Attn,
            ..Default::default()
        };
        let mut s = StepSession::new();
        assert!(aqclip_step(&z, &cfg, &mut s, None).is_err());
        assert!(s.is_fresh());

        let map = EntropyMap {
            height: 4,
            width: 4,
            values: (0..16).map(|i| i as f64).collect(),
        };
        let src = AttentionSource::EntropyMaps(vec![map]);
        let out = aqclip_step(&z, &cfg, &mut s, Some(&src)).unwrap();
        assert_eq!(out.latent.shape(), z.shape());
        assert_eq!(s.step_index(), 1);
    }

    #[test]
    fn session_rejects_shape_drift() {
        let cfg = AqClipConfig {
            tile: 8,
            stride: 4,
            ..Default::default()
        };
        let mut s = StepSession::new();
        aqclip_step(&normal(Shape::new(1, 4, 16, 16), 1), &cfg, &mut s, None).unwrap();
        let before = s.clone();
        let err =
            aqclip_step(&normal(Shape::new(1, 4, 24, 16), 2), &cfg, &mut s, None).unwrap_err();
        assert!(matches!(err, Error::Session(_)));
        assert_eq!(s, before);

        let other = AqClipConfig { alpha: 1.5, ..cfg };
        assert!(matches!(
            aqclip_step(&normal(Shape::new(1, 4, 16, 16), 3), &other, &mut s, None),
            Err(Error::Session(_))
        ));
    }

    #[test]
    fn invert_flips_confidence() {
        let z = normal(Shape::new(1, 2, 16, 16), 4);
        let base = AqClipConfig {
            tile: 8,
            stride: 4,
            ..Default::default()
        };
        let inv = AqClipConfig {
            invert_confidence: true,
            ..base
        };
        let a = aqclip_step(&z, &base, &mut StepSession::new(), None).unwrap();
        let b = aqclip_step(&z, &inv, &mut StepSession::new(), None).unwrap();
        for (x, y) in a.confidence[0]
            .values()
            .iter()
            .zip(b.confidence[0].values())
        {
            assert_eq!(*y, 1.0 - x);
        }
    }

    #[test]
    fn config_validation_and_fingerprint() {
        assert!(AqClipConfig::default().validate().is_ok());
        for bad in [
            AqClipConfig {
                ema_beta: 1.5,
                ..Default::default()
            },
            AqClipConfig {
                alpha: 0.0,
                ..Default::default()
            },
            AqClipConfig {
                quantile_floor: 0.5,
                ..Default::default()
            },
            AqClipConfig {
                stride: 40,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let a = AqClipConfig::default().fingerprint();
        assert_eq!(a, AqClipConfig::default().fingerprint());
        assert_ne!(
            a,
            AqClipConfig {
                ema_beta: 0.9,
                ..Default::default()
            }
            .fingerprint()
        );
    }

    #[test]
    fn ema_damps_iid_corridor_noise() {
        // 50 steps of i.i.d. corridors around a fixed centre
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let steps: Vec<CorridorGrid> = (0..50)
            .map(|_| {
                let mut c = corridor_grid(-1.0, 1.0);
                for k in 0..2 {
                    let n: f32 = StandardNormal.sample(&mut rng);
                    c.lo[k] += 0.2 * n;
                    c.hi[k] += 0.2 * n;
                }
                c
            })
            .collect();
        let series = |beta: f32| {
            let mut s = StepSession::new();
            steps
                .iter()
                .map(|c| ema_update(&mut s, c, beta).unwrap().lo[0] as f64)
                .collect::<Vec<_>>()
        };
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let ratio = var(&series(0.8)) / var(&series(0.0));
        assert!(ratio < 0.6, "{ratio}");
    }

    #[test]
    fn spike_lands_in_its_corridor() {
        let z = LatentTensor::from_fn(Shape::new(1, 4, 64, 64), |[_, c, y, x]| {
            let t = 0.5 * ((y as f32 * 0.3 + c as f32).sin() + (x as f32 * 0.2).cos());
            if (c, y, x) == (1, 5, 5) {
                t + 50.0
            } else {
                t
            }
        })
        .unwrap();
        let step =
            aqclip_step(&z, &AqClipConfig::default(), &mut StepSession::new(), None).unwrap();
        // (5, 5) is covered by the top-left tile alone
        let (lo, hi) = (step.smoothed.lo[0], step.smoothed.hi[0]);
        let v = step.latent.get(0, 1, 5, 5);
        assert!(lo <= v && v <= hi, "{v} outside [{lo}, {hi}]");
        assert!(v < 0.2 * 50.0);
    }

    #[test]
    fn monotone_within_fixed_corridors() {
        let g = plan_grid(16, 16, 8, 4).unwrap();
        let mut cg = CorridorGrid::shared(&g, 1, -0.5, 1.5);
        cg.lo[4] = -2.0;
        cg.hi[7] = 0.25;
        let base = normal(Shape::new(1, 2, 16, 16), 21);
        let shifted = base
            .with_data(base.data().iter().map(|v| v + 0.125).collect())
            .unwrap();
        let a = apply_corridors(&base, &g, &cg, 2.0, 1e-6).unwrap();
        let b = apply_corridors(&shifted, &g, &cg, 2.0, 1e-6).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| y >= x));
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let z = normal(Shape::new(3, 4, 80, 72), 17);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut s = StepSession::new();
                let first = aqclip_step(&z, &AqClipConfig::default(), &mut s, None).unwrap();
                let second =
                    aqclip_step(&first.latent, &AqClipConfig::default(), &mut s, None).unwrap();
                (second.latent, s.to_bytes().unwrap())
            })
        };
        let one = run(1);
        for threads in [2, 4, 7] {
            assert_eq!(run(threads), one);
        }
    }
}
