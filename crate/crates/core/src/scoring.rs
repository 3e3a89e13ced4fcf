//! Per-pixel entropy and per-region uncertainty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{RegionGrid, RegionId};

/// Allowed deviation of a pixel's class posterior sum from 1.
pub const POSTERIOR_SUM_TOLERANCE: f64 = 1e-4;

/// Class posteriors for one image, stored class-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTensor {
    pub image_index: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl PosteriorTensor {
    pub fn new(
        image_index: u32,
        num_classes: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let t = PosteriorTensor {
            image_index,
            num_classes,
            height,
            width,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    /// Posterior of class `c` at pixel `(y, x)`.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Checks shape, value range and per-pixel normalization.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "posterior shape {}x{}x{} is degenerate",
                self.num_classes, self.height, self.width
            )));
        }
        if self.values.len() != self.num_classes * self.plane() {
            return Err(Error::invalid(format!(
                "posterior holds {} values, shape needs {}",
                self.values.len(),
                self.num_classes * self.plane()
            )));
        }
        if let Some((i, v)) = self
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!(
                "posterior value {v} at flat offset {i} outside [0, 1]"
            )));
        }
        if let Some((y, x, sum)) = self.first_unnormalized_pixel() {
            return Err(Error::invalid(format!(
                "posterior at pixel (row {y}, col {x}) sums to {sum}"
            )));
        }
        Ok(())
    }

    /// First pixel whose class sum leaves `1 ± POSTERIOR_SUM_TOLERANCE`.
    pub fn first_unnormalized_pixel(&self) -> Option<(usize, usize, f64)> {
        let plane = self.plane();
        (0..plane).find_map(|p| {
            let sum: f64 = (0..self.num_classes)
                .map(|c| self.values[c * plane + p] as f64)
                .sum();
            ((sum - 1.0).abs() > POSTERIOR_SUM_TOLERANCE)
                .then(|| (p / self.width, p % self.width, sum))
        })
    }
}

/// Per-pixel entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Shannon entropy `-Σ p ln p` of every pixel; `0 ln 0` counts as 0.
pub fn pixel_entropy(posterior: &PosteriorTensor) -> Result<EntropyMap> {
    posterior.validate()?;
    let plane = posterior.height * posterior.width;
    let max = (posterior.num_classes as f64).ln();
    let mut values = vec![0.0f64; plane];
    for c in 0..posterior.num_classes {
        let slice = &posterior.values[c * plane..(c + 1) * plane];
        for (h, &p) in values.iter_mut().zip(slice) {
            if p > 0.0 {
                let p = p as f64;
                *h -= p * p.ln();
            }
        }
    }
    for h in &mut values {
        *h = h.clamp(0.0, max);
    }
    Ok(EntropyMap {
        height: posterior.height,
        width: posterior.width,
        values,
    })
}

/// Raw (nats) and normalized (`raw / ln C`, clamped to `[0, 1]`) region uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub raw: f64,
    pub normalized: f64,
}

/// Mean pixel entropy of every region of one image.
pub fn region_uncertainty(
    entropy: &EntropyMap,
    grid: &RegionGrid,
    image_index: u32,
    num_classes: usize,
) -> Result<Vec<(RegionId, RegionScore)>> {
    let dims = grid
        .image(image_index)
        .ok_or_else(|| Error::invalid(format!("image {image_index} not in grid")))?;
    if dims.height as usize != entropy.height || dims.width as usize != entropy.width {
        return Err(Error::invalid(format!(
            "entropy map is {}x{}, image {image_index} is {}x{}",
            entropy.height, entropy.width, dims.height, dims.width
        )));
    }
    if num_classes < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    let norm = (num_classes as f64).ln();
    let regions = grid.regions_of_image(image_index).unwrap_or(&[]);
    Ok(regions
        .iter()
        .map(|r| {
            let mut sum = 0.0;
            for y in r.rows() {
                let row = &entropy.values[y * entropy.width..(y + 1) * entropy.width];
                sum += row[r.cols()].iter().sum::<f64>();
            }
            let raw = sum / r.pixel_count() as f64;
            (
                r.id,
                RegionScore {
                    raw,
                    normalized: (raw / norm).clamp(0.0, 1.0),
                },
            )
        })
        .collect())
}

/// Entropy and region aggregation for one posterior tensor.
pub fn score_image(
    posterior: &PosteriorTensor,
    grid: &RegionGrid,
) -> Result<Vec<(RegionId, RegionScore)>> {
    let entropy = pixel_entropy(posterior)?;
    region_uncertainty(&entropy, grid, posterior.image_index, posterior.num_classes)
}

/// Uncertainty of every grid region, aligned with [`RegionGrid::regions`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    ids: Vec<RegionId>,
    entries: Vec<RegionScore>,
}

impl ScoreTable {
    /// Builds the table from per-image partial results. Every grid region must
    /// appear exactly once.
    pub fn assemble(
        grid: &RegionGrid,
        partials: impl IntoIterator<Item = (RegionId, RegionScore)>,
    ) -> Result<Self> {
        let mut slots: Vec<Option<RegionScore>> = vec![None; grid.len()];
        for (id, score) in partials {
            let i = grid
                .index_of(id)
                .ok_or_else(|| Error::invalid(format!("scored region {id} is not in the grid")))?;
            if slots[i].replace(score).is_some() {
                return Err(Error::invalid(format!("region {id} scored twice")));
            }
        }
        let entries = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::invalid(format!("region {} has no score", grid.region(i).id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreTable {
            ids: grid.regions().iter().map(|r| r.id).collect(),
            entries,
        })
    }

    /// Table from raw scores divided by `normalizer` and clamped to `[0, 1]`.
    pub fn from_raw(grid: &RegionGrid, raw: &[f64], normalizer: f64) -> Result<Self> {
        Self::from_raw_range(grid, raw, 0.0, normalizer)
    }

    /// Table from raw scores mapped linearly so that `lo -> 0` and `hi -> 1`,
    /// then clamped to `[0, 1]`.
    pub fn from_raw_range(grid: &RegionGrid, raw: &[f64], lo: f64, hi: f64) -> Result<Self> {
        if raw.len() != grid.len() {
            return Err(Error::invalid(format!(
                "{} scores for {} regions",
                raw.len(),
                grid.len()
            )));
        }
        let span = hi - lo;
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::invalid(format!("score range [{lo}, {hi}] is empty")));
        }
        Ok(ScoreTable {
            ids: grid.regions().iter().map(|r| r.id).collect(),
            entries: raw
                .iter()
                .map(|&raw| RegionScore {
                    raw,
                    normalized: ((raw - lo) / span).clamp(0.0, 1.0),
                })
                .collect(),
        })
    }

    /// Table whose raw and normalized values coincide.
    pub fn from_normalized(grid: &RegionGrid, normalized: &[f64]) -> Result<Self> {
        Self::from_raw(grid, normalized, 1.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Score of the region at grid position `idx`.
    #[inline]
    pub fn at(&self, idx: usize) -> RegionScore {
        self.entries[idx]
    }

    pub fn get(&self, id: RegionId) -> Option<RegionScore> {
        self.ids.binary_search(&id).ok().map(|i| self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (RegionId, RegionScore)> + '_ {
        self.ids.iter().copied().zip(self.entries.iter().copied())
    }

    pub(crate) fn matches_grid(&self, grid: &RegionGrid) -> bool {
        self.ids.len() == grid.len() && self.ids.iter().zip(grid.regions()).all(|(a, r)| *a == r.id)
    }

    /// Region ids by descending normalized score, ties by ascending id.
    pub fn ranked(&self) -> Vec<RegionId> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            self.entries[b]
                .normalized
                .total_cmp(&self.entries[a].normalized)
                .then(a.cmp(&b))
        });
        order.into_iter().map(|i| self.ids[i]).collect()
    }
}
