//! Overlapping square tiles: grid planning, unfold, fold and overlap-add.
//!
//! Dimensions that are not covered by whole strides get one extra
//! tail-aligned tile at `dim − T`; the latent is never padded.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

/// Offsets of `T×T` windows at stride `S` over an `H×W` plane.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TileGrid {
    tile: usize,
    stride: usize,
    height: usize,
    width: usize,
    positions_y: Vec<usize>,
    positions_x: Vec<usize>,
}

fn axis_positions(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = dim - tile;
    let mut positions: Vec<usize> = (0..=last).step_by(stride).collect();
    if positions.last() != Some(&last) {
        positions.push(last);
    }
    positions
}

/// Plans the tile grid for an `height×width` plane.
pub fn plan_grid(height: usize, width: usize, tile: usize, stride: usize) -> Result<TileGrid> {
    if tile == 0 || stride == 0 {
        return Err(Error::invalid("tile and stride must be >= 1"));
    }
    if stride > tile {
        return Err(Error::invalid(format!(
            "stride {stride} exceeds tile {tile}; windows would leave gaps"
        )));
    }
    if tile > height || tile > width {
        return Err(Error::invalid(format!(
            "tile {tile} larger than plane {height}x{width}"
        )));
    }
    Ok(TileGrid {
        tile,
        stride,
        height,
        width,
        positions_y: axis_positions(height, tile, stride),
        positions_x: axis_positions(width, tile, stride),
    })
}

impl TileGrid {
    pub fn tile(&self) -> usize {
        self.tile
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions_y(&self) -> &[usize] {
        &self.positions_y
    }

    pub fn positions_x(&self) -> &[usize] {
        &self.positions_x
    }

    /// Tiles along y and x.
    pub fn dims(&self) -> (usize, usize) {
        (self.positions_y.len(), self.positions_x.len())
    }

    pub fn len(&self) -> usize {
        self.positions_y.len() * self.positions_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner of tile `k` (row-major over the grid).
    pub fn origin(&self, k: usize) -> (usize, usize) {
        let nx = self.positions_x.len();
        (self.positions_y[k / nx], self.positions_x[k % nx])
    }

    pub fn matches(&self, shape: Shape) -> bool {
        shape.height == self.height && shape.width == self.width
    }

    pub(crate) fn check(&self, shape: Shape) -> Result<()> {
        if self.matches(shape) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!("plane {}x{}", self.height, self.width),
                got: format!("plane {}x{}", shape.height, shape.width),
            })
        }
    }

    /// Indices of the windows along one axis that contain coordinate `p`.
    pub(crate) fn covering(positions: &[usize], tile: usize, p: usize) -> std::ops::Range<usize> {
        // positions are increasing, so the covering windows are contiguous
        let start = positions.partition_point(|&o| o + tile <= p);
        let end = positions.partition_point(|&o| o <= p);
        start..end
    }

    /// Number of tiles containing each pixel, row-major `H×W`.
    pub fn coverage(&self) -> Vec<u32> {
        let count_y: Vec<u32> = (0..self.height)
            .map(|y| Self::covering(&self.positions_y, self.tile, y).len() as u32)
            .collect();
        let count_x: Vec<u32> = (0..self.width)
            .map(|x| Self::covering(&self.positions_x, self.tile, x).len() as u32)
            .collect();
        count_y
            .iter()
            .flat_map(|&cy| count_x.iter().map(move |&cx| cy * cx))
            .collect()
    }
}

/// Unfolded windows, indexed `(b, c, tile, ty, tx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    grid: TileGrid,
    batch: usize,
    channels: usize,
    patches: Vec<f32>,
}

impl PatchStack {
    pub fn new(grid: TileGrid, batch: usize, channels: usize, patches: Vec<f32>) -> Result<Self> {
        let expected = batch * channels * grid.len() * grid.tile * grid.tile;
        if patches.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected} patch values"),
                got: format!("{}", patches.len()),
            });
        }
        Ok(PatchStack {
            grid,
            batch,
            channels,
            patches,
        })
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.patches
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.patches
    }

    fn patch_len(&self) -> usize {
        self.grid.tile * self.grid.tile
    }

    /// The `T×T` window of tile `k` in plane `(b, c)`.
    pub fn patch(&self, b: usize, c: usize, k: usize) -> &[f32] {
        let n = self.patch_len();
        let start = ((b * self.channels + c) * self.grid.len() + k) * n;
        &self.patches[start..start + n]
    }

    pub fn patch_mut(&mut self, b: usize, c: usize, k: usize) -> &mut [f32] {
        let n = self.patch_len();
        let start = ((b * self.channels + c) * self.grid.len() + k) * n;
        &mut self.patches[start..start + n]
    }

    fn shape(&self) -> Shape {
        Shape::new(self.batch, self.channels, self.grid.height, self.grid.width)
    }
}

/// Copies every window of `z` into a patch stack.
pub fn unfold(z: &LatentTensor, grid: &TileGrid) -> Result<PatchStack> {
    let shape = z.shape();
    grid.check(shape)?;
    let t = grid.tile;
    let per_plane = grid.len() * t * t;
    let mut patches = vec![0.0f32; shape.batch * shape.channels * per_plane];
    patches
        .par_chunks_mut(per_plane)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let src = &z.data()[plane_idx * shape.plane_len()..(plane_idx + 1) * shape.plane_len()];
            for (k, window) in dst.chunks_mut(t * t).enumerate() {
                let (oy, ox) = grid.origin(k);
                for ty in 0..t {
                    let row = (oy + ty) * shape.width + ox;
                    window[ty * t..(ty + 1) * t].copy_from_slice(&src[row..row + t]);
                }
            }
        });
    PatchStack::new(grid.clone(), shape.batch, shape.channels, patches)
}

/// Overlap-add sums (accumulated in `f64`) and per-pixel coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Folded {
    pub shape: Shape,
    pub sum: Vec<f64>,
    pub weight: Vec<u32>,
}

fn fold_sums(patches: &PatchStack) -> Vec<f64> {
    let shape = patches.shape();
    let grid = &patches.grid;
    let t = grid.tile;
    let mut sum = vec![0.0f64; shape.len()];
    // fixed tile order inside each plane keeps the reduction deterministic
    sum.par_chunks_mut(shape.plane_len())
        .enumerate()
        .for_each(|(plane_idx, acc)| {
            let (b, c) = (plane_idx / shape.channels, plane_idx % shape.channels);
            for k in 0..grid.len() {
                let (oy, ox) = grid.origin(k);
                let window = patches.patch(b, c, k);
                for ty in 0..t {
                    let row = (oy + ty) * shape.width + ox;
                    for (a, &v) in acc[row..row + t]
                        .iter_mut()
                        .zip(&window[ty * t..(ty + 1) * t])
                    {
                        *a += v as f64;
                    }
                }
            }
        });
    sum
}

/// Sums the patches back onto the plane and counts how many tiles cover each pixel.
pub fn fold(patches: &PatchStack) -> Folded {
    Folded {
        shape: patches.shape(),
        sum: fold_sums(patches),
        weight: patches.grid.coverage(),
    }
}

impl Folded {
    /// `sum / weight`, elementwise.
    pub fn normalize(&self) -> Vec<f32> {
        let plane = self.shape.plane_len();
        self.sum
            .iter()
            .enumerate()
            .map(|(i, &s)| (s / self.weight[i % plane] as f64) as f32)
            .collect()
    }
}

/// Seam-free reassembly: `fold(U) / fold(1)`.
pub fn overlap_add(patches: &PatchStack) -> Result<LatentTensor> {
    let folded = fold(patches);
    LatentTensor::new(folded.shape, folded.normalize())
}
