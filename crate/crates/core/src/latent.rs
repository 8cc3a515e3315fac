//! Latent block algebra.
//!
//! A latent tensor of shape `C_L x H_L x W_L` is cut into square blocks of
//! side `l` on its spatial grid. Every block carries all channels. A binary
//! block mask marks each block as transmitted (`false`, i.e. `0`) or withheld
//! (`true`, i.e. `1`); lifting it by a Kronecker product with an `l x l`
//! all-ones matrix gives the cell-level mask used by the inpainting sampler.
//!
//! Block indices are zero-based `(row, col)` pairs. Their derived ordering is
//! row-major, which is also the serialization order of block payloads: blocks
//! in list order, and inside a block channel-major, then row, then column.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("block side {side} does not divide latent grid {height}x{width}")]
    BlockSide {
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("dimension `{0}` must be strictly positive")]
    ZeroDimension(&'static str),
    #[error("latent value grid has {found} entries, shape requires {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("latent entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("block index {index} outside {rows}x{cols} grid")]
    OutOfRange {
        index: BlockIndex,
        rows: usize,
        cols: usize,
    },
    #[error("block {0} listed more than once")]
    DuplicateBlock(BlockIndex),
    #[error("block {0} is not a transmitted block of the mask")]
    NotTransmitted(BlockIndex),
    #[error("block {0} is not in the withheld set")]
    NotWithheld(BlockIndex),
    #[error("payload has {found} coefficients, {expected} expected")]
    PayloadLength { expected: usize, found: usize },
    #[error("transmitted blocks cover {covered} of {expected} unmasked cells")]
    Coverage { expected: usize, covered: usize },
    #[error(
        "mask grid {mask_rows}x{mask_cols} (side {side}) does not match latent {height}x{width}"
    )]
    MaskMismatch {
        mask_rows: usize,
        mask_cols: usize,
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("{name} * N = {value} is not a whole number of blocks")]
    FractionalBudget { name: &'static str, value: f64 },
}

/// Image and latent sizes of one link configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
}

impl TensorDims {
    pub fn new(image: [usize; 3], latent: [usize; 3]) -> Result<Self, CodecError> {
        let names = ["C", "H", "W", "C_L", "H_L", "W_L"];
        let all = [
            image[0], image[1], image[2], latent[0], latent[1], latent[2],
        ];
        if let Some(pos) = all.iter().position(|&v| v == 0) {
            return Err(CodecError::ZeroDimension(names[pos]));
        }
        Ok(Self {
            channels: image[0],
            height: image[1],
            width: image[2],
            latent_channels: latent[0],
            latent_height: latent[1],
            latent_width: latent[2],
        })
    }

    /// `3x512x512` images with a `4x64x64` latent.
    pub fn reference() -> Self {
        Self::new([3, 512, 512], [4, 64, 64]).expect("static dims")
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            channels: self.latent_channels,
            height: self.latent_height,
            width: self.latent_width,
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().len()
    }

    /// `C_L H_L W_L / (C H W)`; multiply by the sending rate to get kappa.
    pub fn volume_ratio(&self) -> f64 {
        self.latent_len() as f64 / self.image_len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real-valued `C_L x H_L x W_L` grid, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    values: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: LatentShape, value: f64) -> Self {
        Self {
            shape,
            values: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, values: Vec<f64>) -> Result<Self, CodecError> {
        if values.len() != shape.len() {
            return Err(CodecError::ShapeMismatch {
                expected: shape.len(),
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite { index });
        }
        Ok(Self { shape, values })
    }

    pub fn from_fn(shape: LatentShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for u in 0..shape.height {
                for v in 0..shape.width {
                    values.push(f(c, u, v));
                }
            }
        }
        Self { shape, values }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn offset(&self, c: usize, u: usize, v: usize) -> usize {
        (c * self.shape.height + u) * self.shape.width + v
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.values[self.offset(c, u, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: f64) {
        let i = self.offset(c, u, v);
        self.values[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Zero-based block coordinate; ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockIndex {
    pub row: usize,
    pub col: usize,
}

impl BlockIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for BlockIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Block counts of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
}

impl BlockGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, index: BlockIndex) -> bool {
        index.row < self.rows && index.col < self.cols
    }

    pub fn indices(&self) -> impl Iterator<Item = BlockIndex> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| BlockIndex { row, col }))
    }

    fn check(&self, index: BlockIndex) -> Result<(), CodecError> {
        if self.contains(index) {
            Ok(())
        } else {
            Err(CodecError::OutOfRange {
                index,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }
}

/// Splits an `H_L x W_L` grid into `l x l` blocks.
pub fn partition(
    latent_height: usize,
    latent_width: usize,
    side: usize,
) -> Result<BlockGrid, CodecError> {
    if side == 0 || latent_height % side != 0 || latent_width % side != 0 {
        return Err(CodecError::BlockSide {
            side,
            height: latent_height,
            width: latent_width,
        });
    }
    Ok(BlockGrid {
        rows: latent_height / side,
        cols: latent_width / side,
        side,
    })
}

/// Returns `(N_H, N_W, N)` for the latent grid of `dims`.
pub fn partition_dims(dims: &TensorDims, side: usize) -> Result<(usize, usize, usize), CodecError> {
    let grid = partition(dims.latent_height, dims.latent_width, side)?;
    Ok((grid.rows, grid.cols, grid.count()))
}

/// Block-level mask `M^b`; `true` marks a withheld block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    grid: BlockGrid,
    withheld: Vec<bool>,
}

impl BlockMask {
    pub fn new(grid: BlockGrid, withheld: Vec<bool>) -> Result<Self, CodecError> {
        if withheld.len() != grid.count() {
            return Err(CodecError::ShapeMismatch {
                expected: grid.count(),
                found: withheld.len(),
            });
        }
        Ok(Self { grid, withheld })
    }

    pub fn all(grid: BlockGrid, withheld: bool) -> Self {
        Self {
            grid,
            withheld: vec![withheld; grid.count()],
        }
    }

    /// Builds the mask whose withheld blocks are exactly `withheld`.
    pub fn from_withheld<'a>(
        grid: BlockGrid,
        withheld: impl IntoIterator<Item = &'a BlockIndex>,
    ) -> Result<Self, CodecError> {
        let mut mask = Self::all(grid, false);
        for &index in withheld {
            grid.check(index)?;
            mask.withheld[index.row * grid.cols + index.col] = true;
        }
        Ok(mask)
    }

    /// Parses rows of `0`/`1`, e.g. `[[0, 1], [1, 0]]`.
    pub fn from_rows(rows: &[&[u8]], side: usize) -> Result<Self, CodecError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let grid = BlockGrid {
            rows: rows.len(),
            cols,
            side,
        };
        let mut withheld = Vec::with_capacity(grid.count());
        for row in rows {
            if row.len() != cols {
                return Err(CodecError::ShapeMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            withheld.extend(row.iter().map(|&b| b != 0));
        }
        Self::new(grid, withheld)
    }

    pub fn grid(&self) -> BlockGrid {
        self.grid
    }

    pub fn side(&self) -> usize {
        self.grid.side
    }

    pub fn is_withheld(&self, index: BlockIndex) -> bool {
        self.withheld[index.row * self.grid.cols + index.col]
    }

    /// Row-major flags, `true` = withheld.
    pub fn bits(&self) -> &[bool] {
        &self.withheld
    }

    pub fn withheld_count(&self) -> usize {
        self.withheld.iter().filter(|&&w| w).count()
    }

    /// Checks that the mask tiles the latent grid of `dims`.
    pub fn check_dims(&self, dims: &TensorDims) -> Result<(), CodecError> {
        if self.grid.rows * self.grid.side != dims.latent_height
            || self.grid.cols * self.grid.side != dims.latent_width
        {
            return Err(CodecError::MaskMismatch {
                mask_rows: self.grid.rows,
                mask_cols: self.grid.cols,
                side: self.grid.side,
                height: dims.latent_height,
                width: dims.latent_width,
            });
        }
        Ok(())
    }
}

/// Cell-level mask `M` on the latent grid; `true` marks a withheld cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self, CodecError> {
        if cells.len() != height * width {
            return Err(CodecError::ShapeMismatch {
                expected: height * width,
                found: cells.len(),
            });
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn all(height: usize, width: usize, withheld: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![withheld; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_withheld(&self, u: usize, v: usize) -> bool {
        self.cells[u * self.width + v]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn withheld_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// `M = M^b ⊗ 1_{l×l}`.
pub fn lift_mask(mask: &BlockMask) -> PixelMask {
    let side = mask.grid.side;
    let height = mask.grid.rows * side;
    let width = mask.grid.cols * side;
    let mut cells = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            cells.push(mask.withheld[(u / side) * mask.grid.cols + v / side]);
        }
    }
    PixelMask {
        height,
        width,
        cells,
    }
}

/// Withheld ratio, sending rate and pixel-domain compression ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub d: f64,
    pub q: f64,
    pub kappa: f64,
}

impl RateReport {
    pub fn from_counts(withheld: usize, total: usize, dims: &TensorDims) -> Self {
        let d = withheld as f64 / total as f64;
        let q = (total - withheld) as f64 / total as f64;
        Self {
            d,
            q,
            kappa: dims.volume_ratio() * q,
        }
    }
}

pub fn rate_report(mask: &BlockMask, dims: &TensorDims) -> Result<RateReport, CodecError> {
    mask.check_dims(dims)?;
    Ok(RateReport::from_counts(
        mask.withheld_count(),
        mask.grid.count(),
        dims,
    ))
}

/// Transmitted (`P`) and withheld (`Q`) block sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSets {
    pub transmitted: BTreeSet<BlockIndex>,
    pub withheld: BTreeSet<BlockIndex>,
}

impl IndexSets {
    pub fn total(&self) -> usize {
        self.transmitted.len() + self.withheld.len()
    }

    pub fn mask(&self, grid: BlockGrid) -> Result<BlockMask, CodecError> {
        BlockMask::from_withheld(grid, &self.withheld)
    }
}

pub fn split_sets(mask: &BlockMask) -> IndexSets {
    let mut sets = IndexSets::default();
    for index in mask.grid.indices() {
        if mask.is_withheld(index) {
            sets.withheld.insert(index);
        } else {
            sets.transmitted.insert(index);
        }
    }
    sets
}

fn check_unique(indices: &[BlockIndex]) -> Result<(), CodecError> {
    let mut seen = BTreeSet::new();
    for &index in indices {
        if !seen.insert(index) {
            return Err(CodecError::DuplicateBlock(index));
        }
    }
    Ok(())
}

/// Collects the coefficients of `indices` (in list order), each block
/// channel-major. Output length is `indices.len() * C_L * l * l`.
pub fn extract_blocks(
    z: &LatentTensor,
    indices: &[BlockIndex],
    side: usize,
) -> Result<Vec<f64>, CodecError> {
    let shape = z.shape();
    let grid = partition(shape.height, shape.width, side)?;
    let mut out = Vec::with_capacity(indices.len() * shape.channels * side * side);
    for &index in indices {
        grid.check(index)?;
        let (u0, v0) = (index.row * side, index.col * side);
        for c in 0..shape.channels {
            for u in u0..u0 + side {
                let start = z.offset(c, u, v0);
                out.extend_from_slice(&z.values()[start..start + side]);
            }
        }
    }
    Ok(out)
}

/// The embed operator: places the payload of `indices` on their cells and
/// zeros everywhere else. `indices` must list exactly the blocks that are
/// unmasked (`M = 0`) in `mask`, each once.
pub fn embed(
    payload: &[f64],
    indices: &[BlockIndex],
    mask: &PixelMask,
    shape: LatentShape,
    side: usize,
) -> Result<LatentTensor, CodecError> {
    if mask.height != shape.height || mask.width != shape.width {
        return Err(CodecError::MaskMismatch {
            mask_rows: mask.height,
            mask_cols: mask.width,
            side: 1,
            height: shape.height,
            width: shape.width,
        });
    }
    let grid = partition(shape.height, shape.width, side)?;
    let per_block = shape.channels * side * side;
    if payload.len() != indices.len() * per_block {
        return Err(CodecError::PayloadLength {
            expected: indices.len() * per_block,
            found: payload.len(),
        });
    }
    check_unique(indices)?;

    let mut out = LatentTensor::zeros(shape);
    for (k, &index) in indices.iter().enumerate() {
        grid.check(index)?;
        let (u0, v0) = (index.row * side, index.col * side);
        if (u0..u0 + side).any(|u| (v0..v0 + side).any(|v| mask.is_withheld(u, v))) {
            return Err(CodecError::NotTransmitted(index));
        }
        let block = &payload[k * per_block..(k + 1) * per_block];
        let mut it = block.iter();
        for c in 0..shape.channels {
            for u in u0..u0 + side {
                for v in v0..v0 + side {
                    out.set(c, u, v, *it.next().expect("block length checked"));
                }
            }
        }
    }
    let expected = mask.cells.len() - mask.withheld_count();
    let covered = indices.len() * side * side;
    if covered != expected {
        return Err(CodecError::Coverage { expected, covered });
    }
    Ok(out)
}

/// Number of blocks corresponding to a ratio of `n` blocks; the product must
/// be a whole number.
pub fn blocks_for_ratio(name: &'static str, ratio: f64, n: usize) -> Result<usize, CodecError> {
    let value = ratio * n as f64;
    let rounded = value.round();
    if !value.is_finite() || value < 0.0 || (value - rounded).abs() > 1e-9 {
        return Err(CodecError::FractionalBudget { name, value });
    }
    Ok(rounded as usize)
}

/// Draws `min(budget, |Q|)` blocks uniformly without replacement from the
/// withheld set. The result is sorted row-major.
pub fn select_request<R: Rng + ?Sized>(
    withheld: &BTreeSet<BlockIndex>,
    budget: usize,
    rng: &mut R,
) -> Vec<BlockIndex> {
    let pool: Vec<BlockIndex> = withheld.iter().copied().collect();
    let amount = budget.min(pool.len());
    let mut picked: Vec<BlockIndex> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// `Q' = Q \ Δ`, `P' = P ∪ Δ`.
pub fn update_sets(sets: &IndexSets, delta: &[BlockIndex]) -> Result<IndexSets, CodecError> {
    check_unique(delta)?;
    let mut next = sets.clone();
    for index in delta {
        if !next.withheld.remove(index) {
            return Err(CodecError::NotWithheld(*index));
        }
        next.transmitted.insert(*index);
    }
    Ok(next)
}
