//! Region grid over an image catalog and the labeled/unlabeled pool.
//!
//! Images are tiled into non-overlapping `N×N` regions. Tiles on the right and
//! bottom border are clipped to the image bounds when a dimension is not a
//! multiple of `N`; they stay selectable like any other region.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Address of a region: its image and the pixel position of its top-left corner.
///
/// Ordering is lexicographic on `(image_index, row, col)` and is the tie-break
/// order used everywhere a selection has to choose between equal candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionId {
    pub image_index: u32,
    pub row: u32,
    pub col: u32,
}

impl RegionId {
    pub fn new(image_index: u32, row: u32, col: u32) -> Self {
        RegionId {
            image_index,
            row,
            col,
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.image_index, self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub index: u32,
    #[serde(rename = "h")]
    pub height: u32,
    #[serde(rename = "w")]
    pub width: u32,
}

impl ImageDims {
    pub fn new(index: u32, height: u32, width: u32) -> Self {
        ImageDims {
            index,
            height,
            width,
        }
    }

    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }
}

/// A region together with its actual pixel extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub height: u32,
    pub width: u32,
}

impl Region {
    /// Center used for spatial distances: top-left plus half the extent, floored.
    pub fn center(&self) -> [i64; 2] {
        [
            self.id.row as i64 + (self.height / 2) as i64,
            self.id.col as i64 + (self.width / 2) as i64,
        ]
    }

    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.id.row as usize..(self.id.row + self.height) as usize
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.id.col as usize..(self.id.col + self.width) as usize
    }
}

/// Immutable tiling of every catalog image into regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    region_size: u32,
    images: Vec<ImageDims>,
    regions: Vec<Region>,
    // half-open range into `regions` for each entry of `images`
    spans: Vec<(usize, usize)>,
}

impl RegionGrid {
    /// Tiles every image of `catalog` with `region_size × region_size` regions.
    pub fn build(catalog: &[ImageDims], region_size: u32) -> Result<Self> {
        if region_size == 0 {
            return Err(Error::invalid("region_size must be at least 1"));
        }
        let mut images = catalog.to_vec();
        images.sort_by_key(|d| d.index);
        for pair in images.windows(2) {
            if pair[0].index == pair[1].index {
                return Err(Error::invalid(format!(
                    "duplicate image index {} in catalog",
                    pair[0].index
                )));
            }
        }
        let mut regions = Vec::new();
        let mut spans = Vec::with_capacity(images.len());
        for img in &images {
            if img.height == 0 || img.width == 0 {
                return Err(Error::invalid(format!(
                    "image {} has zero size ({}x{})",
                    img.index, img.height, img.width
                )));
            }
            let start = regions.len();
            for row in (0..img.height).step_by(region_size as usize) {
                let height = region_size.min(img.height - row);
                for col in (0..img.width).step_by(region_size as usize) {
                    let width = region_size.min(img.width - col);
                    regions.push(Region {
                        id: RegionId::new(img.index, row, col),
                        height,
                        width,
                    });
                }
            }
            spans.push((start, regions.len()));
        }
        Ok(RegionGrid {
            region_size,
            images,
            regions,
            spans,
        })
    }

    pub fn region_size(&self) -> u32 {
        self.region_size
    }

    /// Catalog entries, sorted by image index.
    pub fn images(&self) -> &[ImageDims] {
        &self.images
    }

    pub fn image(&self, image_index: u32) -> Option<&ImageDims> {
        self.image_position(image_index).map(|p| &self.images[p])
    }

    fn image_position(&self, image_index: u32) -> Option<usize> {
        self.images
            .binary_search_by_key(&image_index, |d| d.index)
            .ok()
    }

    /// All regions in `RegionId` order.
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, idx: usize) -> &Region {
        &self.regions[idx]
    }

    /// Position of `id` in [`regions`](Self::regions).
    pub fn index_of(&self, id: RegionId) -> Option<usize> {
        self.regions.binary_search_by_key(&id, |r| r.id).ok()
    }

    /// Regions of one image, or `None` if the image is not in the catalog.
    pub fn regions_of_image(&self, image_index: u32) -> Option<&[Region]> {
        self.image_position(image_index).map(|p| {
            let (s, e) = self.spans[p];
            &self.regions[s..e]
        })
    }

    /// Index range of one image's regions within the grid.
    pub fn image_span(&self, image_index: u32) -> Option<std::ops::Range<usize>> {
        self.image_position(image_index).map(|p| {
            let (s, e) = self.spans[p];
            s..e
        })
    }
}

/// Outcome of [`PoolState::commit_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitStatus {
    Committed {
        regions: usize,
    },
    /// Nothing was staged; state is unchanged.
    EmptyBatch,
}

/// Labeled set, staged batch and unlabeled set over one grid.
///
/// The three sets always partition the grid's regions.
#[derive(Debug, Clone)]
pub struct PoolState {
    grid: Arc<RegionGrid>,
    labeled: BTreeSet<RegionId>,
    batch: Vec<RegionId>,
    unlabeled: BTreeSet<RegionId>,
    iteration: u32,
}

impl PoolState {
    /// Initial labeled set of `count` regions drawn uniformly without replacement.
    pub fn init_labeled_pool(grid: Arc<RegionGrid>, count: usize, seed: u64) -> Result<Self> {
        let n = grid.len();
        if count > n {
            return Err(Error::invalid(format!(
                "cannot label {count} regions from a grid of {n}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::InitialPool);
        let picked = index::sample(&mut rng, n, count);
        let labeled = picked.iter().map(|i| grid.region(i).id).collect();
        Self::with_labeled(grid, labeled, 0)
    }

    /// Rebuilds a pool from an explicit labeled set; every other region is unlabeled.
    pub fn from_labeled(
        grid: Arc<RegionGrid>,
        labeled: impl IntoIterator<Item = RegionId>,
        iteration: u32,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for id in labeled {
            if grid.index_of(id).is_none() {
                return Err(Error::invalid(format!("region {id} is not in the grid")));
            }
            if !set.insert(id) {
                return Err(Error::invalid(format!("region {id} listed twice")));
            }
        }
        Self::with_labeled(grid, set, iteration)
    }

    fn with_labeled(
        grid: Arc<RegionGrid>,
        labeled: BTreeSet<RegionId>,
        iteration: u32,
    ) -> Result<Self> {
        let unlabeled = grid
            .regions()
            .iter()
            .map(|r| r.id)
            .filter(|id| !labeled.contains(id))
            .collect();
        Ok(PoolState {
            grid,
            labeled,
            batch: Vec::new(),
            unlabeled,
            iteration,
        })
    }

    pub fn grid(&self) -> &Arc<RegionGrid> {
        &self.grid
    }

    pub fn labeled(&self) -> &BTreeSet<RegionId> {
        &self.labeled
    }

    pub fn batch(&self) -> &[RegionId] {
        &self.batch
    }

    pub fn unlabeled(&self) -> &BTreeSet<RegionId> {
        &self.unlabeled
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    /// Moves `ids` from the unlabeled set into the staged batch, in order.
    ///
    /// Either all ids are staged or none are.
    pub fn stage_batch(&mut self, ids: &[RegionId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !self.unlabeled.contains(id) {
                return Err(Error::invalid(format!(
                    "region {id} is not in the unlabeled set"
                )));
            }
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("region {id} staged twice")));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.batch.push(*id);
        }
        Ok(())
    }

    /// Labels the staged batch and advances the iteration counter.
    pub fn commit_batch(&mut self) -> CommitStatus {
        if self.batch.is_empty() {
            log::warn!("commit_batch called with an empty batch; pool unchanged");
            return CommitStatus::EmptyBatch;
        }
        let regions = self.batch.len();
        self.labeled.extend(self.batch.drain(..));
        self.iteration += 1;
        CommitStatus::Committed { regions }
    }

    /// Verifies that labeled, batch and unlabeled partition the grid.
    pub fn check_partition(&self) -> Result<()> {
        let batch: BTreeSet<_> = self.batch.iter().copied().collect();
        if batch.len() != self.batch.len() {
            return Err(Error::invalid("batch contains duplicates"));
        }
        let total = self.labeled.len() + batch.len() + self.unlabeled.len();
        if total != self.grid.len() {
            return Err(Error::invalid(format!(
                "pool sets hold {total} regions, grid has {}",
                self.grid.len()
            )));
        }
        for r in self.grid.regions() {
            let hits = self.labeled.contains(&r.id) as u8
                + batch.contains(&r.id) as u8
                + self.unlabeled.contains(&r.id) as u8;
            if hits != 1 {
                return Err(Error::invalid(format!(
                    "region {} appears in {hits} pool sets",
                    r.id
                )));
            }
        }
        Ok(())
    }

    /// Number of distinct images with at least one labeled region.
    pub fn images_touched(&self) -> usize {
        let mut images: Vec<u32> = self.labeled.iter().map(|id| id.image_index).collect();
        images.dedup();
        images.len()
    }

    /// Fraction of catalog pixels that are labeled.
    pub fn labeled_pixel_fraction(&self) -> f64 {
        let total: u64 = self.grid.images().iter().map(|d| d.pixel_count()).sum();
        let labeled: u64 = self
            .labeled
            .iter()
            .filter_map(|id| self.grid.index_of(*id))
            .map(|i| self.grid.region(i).pixel_count())
            .sum();
        labeled as f64 / total as f64
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            region_size: self.grid.region_size(),
            images: self.grid.images().to_vec(),
            labeled: self
                .labeled
                .iter()
                .map(|id| [id.image_index, id.row, id.col])
                .collect(),
            iteration: self.iteration,
            batch: self
                .batch
                .iter()
                .map(|id| [id.image_index, id.row, id.col])
                .collect(),
        }
    }
}

/// Serialized grid and pool state.
///
/// Field order is fixed so that snapshots diff cleanly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub region_size: u32,
    pub images: Vec<ImageDims>,
    pub labeled: Vec<[u32; 3]>,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batch: Vec<[u32; 3]>,
}

impl PoolSnapshot {
    pub fn restore(&self) -> Result<PoolState> {
        let grid = Arc::new(RegionGrid::build(&self.images, self.region_size)?);
        let to_id = |t: &[u32; 3]| RegionId::new(t[0], t[1], t[2]);
        let mut pool =
            PoolState::from_labeled(grid, self.labeled.iter().map(to_id), self.iteration)?;
        let batch: Vec<RegionId> = self.batch.iter().map(to_id).collect();
        pool.stage_batch(&batch)?;
        Ok(pool)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Number of regions selected at AL iteration `t`: `base` for the initial batch,
/// `(2^t - 2^(t-1)) * base` afterwards, so that `2^t * base` are labeled after batch `t`.
pub fn batch_schedule(t: u32, base: u64) -> u64 {
    if t == 0 {
        base
    } else {
        ((1u64 << t) - (1u64 << (t - 1))) * base
    }
}

/// Total labeled regions after batch `t` has been committed.
pub fn cumulative_budget(t: u32, base: u64) -> u64 {
    (0..=t).map(|s| batch_schedule(s, base)).sum()
}
