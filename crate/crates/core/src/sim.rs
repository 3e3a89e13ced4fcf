//! Synthetic segmentation data, a nearest-centroid pixel classifier and the
//! active learning loop that ties selection to them.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    fit_pca, pca_project, pool_region_features, FeatureMapTensor, FeatureMatrix,
};
use crate::region::{batch_schedule, cumulative_budget, ImageDims, PoolState, RegionGrid};
use crate::rng::{derive_seed, stream_rng, RunRng, Stream};
use crate::scoring::{score_image, PosteriorTensor, ScoreTable};
use crate::selection::{select_batch, SelectionConfig};

// Expected distance between two unrelated class prototypes.
const PROTOTYPE_SEPARATION: f64 = 4.0;
// Offset of a rare prototype from the midpoint of its two parents, relative
// to the separation.
const RARE_OFFSET: f64 = 0.3;
// Per-image and per-object feature shifts, relative to noise_sigma.
const IMAGE_SHIFT: f64 = 0.5;
const INSTANCE_SHIFT: f64 = 1.0;
// Chance that an image holds a given medium or rare class.
const MEDIUM_PRESENCE: f64 = 0.5;
const RARE_PRESENCE: f64 = 0.1;
// A present rare class is a cluster of small blobs around one point.
const RARE_BLOBS: std::ops::RangeInclusive<usize> = 3..=5;
const RARE_SPREAD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLayout {
    /// Background bands of a few common classes, medium blobs and small rare blobs.
    ImbalancedScenes,
    /// One to three large objects per image on a background class.
    DominantObjects,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_train_images: u32,
    pub num_eval_images: u32,
    pub height: u32,
    pub width: u32,
    pub num_classes: usize,
    pub layout: ClassLayout,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    /// 40 training and 40 evaluation images of 128×128 with 8 imbalanced classes.
    pub fn imbalanced(seed: u64) -> Self {
        SyntheticDatasetSpec {
            num_train_images: 40,
            num_eval_images: 40,
            height: 128,
            width: 128,
            num_classes: 8,
            layout: ClassLayout::ImbalancedScenes,
            feature_dim: 16,
            noise_sigma: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.num_train_images == 0
            || self.height == 0
            || self.width == 0
            || self.feature_dim == 0
        {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Ground truth and per-pixel features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub labels: Vec<u8>,
    pub features: FeatureMapTensor,
}

impl SyntheticImage {
    pub fn index(&self) -> u32 {
        self.features.image_index
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::new(
            self.features.image_index,
            self.features.height as u32,
            self.features.width as u32,
        )
    }

    #[inline]
    fn feature(&self, p: usize, out: &mut [f64]) {
        let plane = self.labels.len();
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.features.values[k * plane + p] as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    /// `num_classes × feature_dim`, row-major.
    pub prototypes: Vec<f64>,
    pub train: Vec<SyntheticImage>,
    pub eval: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn train_catalog(&self) -> Vec<ImageDims> {
        self.train.iter().map(SyntheticImage::dims).collect()
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        let d = self.spec.feature_dim;
        &self.prototypes[c * d..(c + 1) * d]
    }

    /// Pixel count per class over the training images.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.spec.num_classes];
        for img in &self.train {
            for &l in &img.labels {
                hist[l as usize] += 1;
            }
        }
        hist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Common,
    Medium,
    Rare,
}

fn class_roles(c: usize, layout: ClassLayout) -> Vec<Role> {
    match layout {
        ClassLayout::DominantObjects => {
            let mut roles = vec![Role::Medium; c];
            roles[0] = Role::Common;
            roles
        }
        ClassLayout::ImbalancedScenes => {
            let common = (3 * c).div_ceil(8).clamp(1, c - 1);
            let rest = c - common;
            let medium = rest / 2;
            (0..c)
                .map(|k| {
                    if k < common {
                        Role::Common
                    } else if k < common + medium {
                        Role::Medium
                    } else {
                        Role::Rare
                    }
                })
                .collect()
        }
    }
}

fn normal_vec(rng: &mut impl RngCore, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn make_prototypes(spec: &SyntheticDatasetSpec, roles: &[Role], rng: &mut RunRng) -> Vec<f64> {
    let d = spec.feature_dim;
    let scale = PROTOTYPE_SEPARATION / (2.0 * d as f64).sqrt();
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(roles.len());
    for (c, role) in roles.iter().enumerate() {
        let p = if *role == Role::Rare && c >= 2 {
            // sits between two non-rare classes, so an unseen rare class is ambiguous
            let parents: Vec<usize> = (0..c).filter(|&k| roles[k] != Role::Rare).collect();
            let i = parents[rng.random_range(0..parents.len())];
            let j = loop {
                let j = parents[rng.random_range(0..parents.len())];
                if j != i || parents.len() == 1 {
                    break j;
                }
            };
            let offset = normal_vec(rng, d, scale * RARE_OFFSET);
            (0..d)
                .map(|k| 0.5 * (protos[i][k] + protos[j][k]) + offset[k])
                .collect()
        } else {
            normal_vec(rng, d, scale)
        };
        protos.push(p);
    }
    protos.concat()
}

struct Blob {
    class: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn blob(rng: &mut RunRng, class: usize, h: f64, w: f64, radius: (f64, f64)) -> Blob {
    let ry = (h * rng.random_range(radius.0..radius.1)).max(1.0);
    let rx = (w * rng.random_range(radius.0..radius.1)).max(1.0);
    Blob {
        class: class as u8,
        cy: rng.random_range(0.0..h),
        cx: rng.random_range(0.0..w),
        ry,
        rx,
    }
}

// Classes placed in every image of a set: each medium or rare class shows up
// in at least one image.
fn presence(roles: &[Role], n_images: usize, rng: &mut RunRng) -> Vec<Vec<usize>> {
    let mut present = vec![Vec::new(); n_images];
    for (c, role) in roles.iter().enumerate() {
        let prob = match role {
            Role::Common => continue,
            Role::Medium => MEDIUM_PRESENCE,
            Role::Rare => RARE_PRESENCE,
        };
        let mut any = false;
        for p in present.iter_mut() {
            if rng.random_bool(prob) {
                p.push(c);
                any = true;
            }
        }
        if !any {
            present[rng.random_range(0..n_images)].push(c);
        }
    }
    present
}

fn layout_labels(
    spec: &SyntheticDatasetSpec,
    roles: &[Role],
    classes: &[usize],
    rng: &mut RunRng,
) -> (Vec<u8>, Vec<u16>) {
    let (h, w) = (spec.height as usize, spec.width as usize);
    let (hf, wf) = (h as f64, w as f64);
    let common: Vec<usize> = (0..roles.len())
        .filter(|&c| roles[c] == Role::Common)
        .collect();
    let mut labels = vec![0u8; h * w];
    let mut instances = vec![0u16; h * w];
    let mut blobs = Vec::new();
    match spec.layout {
        ClassLayout::ImbalancedScenes => {
            // wavy horizontal bands, one per common class
            let n = common.len();
            let cuts: Vec<(f64, f64, f64)> = (1..n)
                .map(|k| {
                    let base = hf * k as f64 / n as f64 + rng.random_range(-0.1..0.1) * hf;
                    (
                        base,
                        rng.random_range(0.02..0.08) * hf,
                        rng.random_range(1.0..3.0),
                    )
                })
                .collect();
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let t = x as f64 / wf * std::f64::consts::TAU;
                    let band = cuts
                        .iter()
                        .filter(|(base, amp, freq)| {
                            y as f64 > base + amp * (freq * t + phase).sin()
                        })
                        .count();
                    labels[y * w + x] = common[band] as u8;
                    instances[y * w + x] = band as u16;
                }
            }
            for &c in classes {
                if roles[c] == Role::Medium {
                    blobs.push(blob(rng, c, hf, wf, (0.08, 0.16)));
                } else {
                    // a loose cluster of small blobs
                    let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                    for _ in 0..rng.random_range(RARE_BLOBS) {
                        let mut b = blob(rng, c, hf, wf, (0.025, 0.05));
                        b.cy =
                            (cy + rng.random_range(-RARE_SPREAD..=RARE_SPREAD) * hf).clamp(0.0, hf);
                        b.cx =
                            (cx + rng.random_range(-RARE_SPREAD..=RARE_SPREAD) * wf).clamp(0.0, wf);
                        blobs.push(b);
                    }
                }
            }
        }
        ClassLayout::DominantObjects => {
            let objects = rng.random_range(1..=3usize);
            for _ in 0..objects {
                let c = rng.random_range(1..roles.len());
                blobs.push(blob(rng, c, hf, wf, (0.15, 0.3)));
            }
        }
    }
    let first = instances.iter().max().map_or(0, |&m| m + 1);
    for (i, b) in blobs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if b.contains(y, x) {
                    labels[y * w + x] = b.class;
                    instances[y * w + x] = first + i as u16;
                }
            }
        }
    }
    (labels, instances)
}

fn render_image(
    spec: &SyntheticDatasetSpec,
    index: u32,
    labels: Vec<u8>,
    instances: &[u16],
    prototypes: &[f64],
    seed: u64,
    stream: Stream,
) -> Result<SyntheticImage> {
    let d = spec.feature_dim;
    let plane = labels.len();
    let sigma = spec.noise_sigma;
    let mut rng = stream_rng(seed, stream);
    let mut values = vec![0f32; d * plane];
    if sigma == 0.0 {
        for (p, &l) in labels.iter().enumerate() {
            for k in 0..d {
                values[k * plane + p] = prototypes[l as usize * d + k] as f32;
            }
        }
    } else {
        let image_shift = normal_vec(&mut rng, d, sigma * IMAGE_SHIFT);
        let n_instances = instances.iter().max().map_or(0, |&m| m as usize + 1);
        let instance: Vec<Vec<f64>> = (0..n_instances)
            .map(|_| normal_vec(&mut rng, d, sigma * INSTANCE_SHIFT))
            .collect();
        for (p, &l) in labels.iter().enumerate() {
            let l = l as usize;
            let shift = &instance[instances[p] as usize];
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                let v = prototypes[l * d + k] + image_shift[k] + shift[k] + sigma * noise;
                values[k * plane + p] = v as f32;
            }
        }
    }
    let features =
        FeatureMapTensor::new(index, d, spec.height as usize, spec.width as usize, values)?;
    Ok(SyntheticImage { labels, features })
}

fn generate_split(
    spec: &SyntheticDatasetSpec,
    roles: &[Role],
    prototypes: &[f64],
    n: u32,
    stream: Stream,
) -> Result<Vec<SyntheticImage>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(spec.seed, stream);
    let present = presence(roles, n as usize, &mut rng);
    let image_seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = image_seeds[i as usize];
            let mut layout_rng = stream_rng(seed, Stream::Instances);
            let (labels, instances) =
                layout_labels(spec, roles, &present[i as usize], &mut layout_rng);
            render_image(spec, i, labels, &instances, prototypes, seed, stream)
        })
        .collect()
}

/// Deterministic synthetic dataset. Pixel features are the class prototype
/// plus noise whose image, object and pixel components all scale with
/// `noise_sigma`; the evaluation split shares the prototypes.
pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let roles = class_roles(spec.num_classes, spec.layout);
    let mut rng = stream_rng(spec.seed, Stream::Instances);
    let prototypes = make_prototypes(spec, &roles, &mut rng);
    let train = generate_split(
        spec,
        &roles,
        &prototypes,
        spec.num_train_images,
        Stream::TrainData,
    )?;
    let eval = generate_split(
        spec,
        &roles,
        &prototypes,
        spec.num_eval_images,
        Stream::EvalData,
    )?;
    Ok(SyntheticDataset {
        spec: *spec,
        prototypes,
        train,
        eval,
    })
}

/// Soft nearest-centroid classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub num_classes: usize,
    pub dim: usize,
    /// `num_classes × dim`; rows of untrained classes are unused.
    pub centroids: Vec<f64>,
    pub trained: Vec<bool>,
    pub temperature: f64,
    pub trained_pixel_count: u64,
}

impl ToyModel {
    pub fn is_degenerate(&self) -> bool {
        self.trained.iter().filter(|&&t| t).count() < 2
    }

    /// Class posterior of one feature vector. Untrained classes get exactly 0.
    pub fn posterior(&self, feature: &[f64], out: &mut [f64]) {
        if self.is_degenerate() {
            out.fill(1.0 / self.num_classes as f64);
            return;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..self.num_classes {
            out[c] = if self.trained[c] {
                let centroid = &self.centroids[c * self.dim..(c + 1) * self.dim];
                let d2: f64 = feature
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -d2 / self.temperature
            } else {
                f64::NEG_INFINITY
            };
            best = best.max(out[c]);
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - best).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }

    /// Most probable class, ties to the lower index.
    pub fn predict(&self, feature: &[f64], scratch: &mut [f64]) -> u8 {
        self.posterior(feature, scratch);
        let mut best = 0;
        for c in 1..self.num_classes {
            if scratch[c] > scratch[best] {
                best = c;
            }
        }
        best as u8
    }
}

/// Fits centroids to every pixel of the labeled regions.
pub fn train_toy_model(
    pool: &PoolState,
    dataset: &SyntheticDataset,
    temperature: f64,
) -> Result<ToyModel> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (c, d) = (dataset.spec.num_classes, dataset.spec.feature_dim);
    let grid = pool.grid();
    let mut sums = vec![0.0f64; c * d];
    let mut counts = vec![0u64; c];
    let mut f = vec![0.0; d];
    for id in pool.labeled() {
        let img = dataset
            .train
            .get(id.image_index as usize)
            .ok_or_else(|| Error::invalid(format!("region {id} has no training image")))?;
        let region = grid.region(grid.index_of(*id).expect("labeled region is in the grid"));
        let w = img.features.width;
        for y in region.rows() {
            for x in region.cols() {
                let p = y * w + x;
                let l = img.labels[p] as usize;
                img.feature(p, &mut f);
                for k in 0..d {
                    sums[l * d + k] += f[k];
                }
                counts[l] += 1;
            }
        }
    }
    let trained: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    for (cls, &n) in counts.iter().enumerate() {
        if n > 0 {
            for k in 0..d {
                sums[cls * d + k] /= n as f64;
            }
        }
    }
    let model = ToyModel {
        num_classes: c,
        dim: d,
        centroids: sums,
        trained,
        temperature,
        trained_pixel_count: counts.iter().sum(),
    };
    if model.is_degenerate() {
        log::warn!(
            "toy model trained on {} class(es); posteriors are uniform",
            model.trained.iter().filter(|&&t| t).count()
        );
    }
    Ok(model)
}

pub fn predict_posteriors(model: &ToyModel, image: &SyntheticImage) -> Result<PosteriorTensor> {
    let fm = &image.features;
    if fm.dim != model.dim {
        return Err(Error::invalid(format!(
            "image features have dimension {}, model expects {}",
            fm.dim, model.dim
        )));
    }
    let plane = fm.height * fm.width;
    let c = model.num_classes;
    let mut values = vec![0f32; c * plane];
    let mut f = vec![0.0; fm.dim];
    let mut post = vec![0.0; c];
    for p in 0..plane {
        image.feature(p, &mut f);
        model.posterior(&f, &mut post);
        for k in 0..c {
            values[k * plane + p] = post[k] as f32;
        }
    }
    PosteriorTensor::new(fm.image_index, c, fm.height, fm.width, values)
}

/// `C × C` pixel counts, rows by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn merge(mut self, other: &ConfusionMatrix) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from both
    /// truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let row: u64 = self.counts[c * n..(c + 1) * n].iter().sum();
                let col: u64 = (0..n).map(|r| self.counts[r * n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_iou(&self.iou())
    }
}

pub fn mean_iou(iou: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn confusion_matrix(model: &ToyModel, images: &[SyntheticImage]) -> ConfusionMatrix {
    let c = model.num_classes;
    images
        .par_iter()
        .map(|img| {
            let mut m = ConfusionMatrix::new(c);
            let mut f = vec![0.0; model.dim];
            let mut scratch = vec![0.0; c];
            for (p, &l) in img.labels.iter().enumerate() {
                img.feature(p, &mut f);
                m.add(l as usize, model.predict(&f, &mut scratch) as usize);
            }
            m
        })
        .reduce(|| ConfusionMatrix::new(c), |a, b| a.merge(&b))
}

pub fn evaluate_miou(model: &ToyModel, images: &[SyntheticImage]) -> MiouReport {
    let per_class = confusion_matrix(model, images).iou();
    MiouReport {
        miou: mean_iou(&per_class),
        per_class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Index of the last batch; batches `0..=iterations` are selected.
    pub iterations: u32,
    pub base: u64,
    pub region_size: u32,
    pub seed: u64,
    pub temperature: f64,
    #[serde(default)]
    pub pca_dim: Option<usize>,
}

impl LoopConfig {
    pub fn new(iterations: u32, base: u64, region_size: u32, seed: u64) -> Self {
        LoopConfig {
            iterations,
            base,
            region_size,
            seed,
            temperature: 1.0,
            pca_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopRecord {
    pub iteration: u32,
    pub labeled_regions: usize,
    pub labeled_pixel_fraction: f64,
    pub images_touched: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub selection_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopHistory {
    pub method: String,
    pub seed: u64,
    pub records: Vec<LoopRecord>,
}

impl LoopHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,pixels_pct,miou,images_touched\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.iteration,
                100.0 * r.labeled_pixel_fraction,
                r.miou,
                r.images_touched
            ));
        }
        out
    }
}

/// Per-region features of the training images, optionally reduced by PCA.
pub fn region_features(
    dataset: &SyntheticDataset,
    grid: &RegionGrid,
    pca_dim: Option<usize>,
) -> Result<FeatureMatrix> {
    let parts = dataset
        .train
        .par_iter()
        .map(|img| pool_region_features(&img.features, grid))
        .collect::<Result<Vec<_>>>()?;
    let matrix = FeatureMatrix::stack(parts)?;
    match pca_dim {
        Some(k) if k < matrix.dim() => {
            let (model, _) = fit_pca(&matrix, k)?;
            pca_project(&model, &matrix)
        }
        _ => Ok(matrix),
    }
}

fn score_pool(
    model: &ToyModel,
    dataset: &SyntheticDataset,
    grid: &RegionGrid,
) -> Result<ScoreTable> {
    let partials = dataset
        .train
        .par_iter()
        .map(|img| score_image(&predict_posteriors(model, img)?, grid))
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::assemble(grid, partials.into_iter().flatten())
}

/// The first `iterations + 1` labeled sets: a shared random initial batch and
/// then one batch per iteration chosen by `method`.
pub fn run_al_loop(
    dataset: &SyntheticDataset,
    method: &SelectionConfig,
    config: &LoopConfig,
) -> Result<LoopHistory> {
    let grid = Arc::new(RegionGrid::build(
        &dataset.train_catalog(),
        config.region_size,
    )?);
    if config.base == 0 {
        return Err(Error::Config("schedule base must be at least 1".into()));
    }
    let total = cumulative_budget(config.iterations, config.base);
    if total > grid.len() as u64 {
        return Err(Error::Config(format!(
            "schedule needs {total} regions after {} iterations, pool holds {}",
            config.iterations,
            grid.len()
        )));
    }
    method.with_batch_size(1).validate()?;
    let needs_features = method.distance.lambda_f > 0.0;
    let features = if needs_features {
        Some(region_features(dataset, &grid, config.pca_dim)?)
    } else {
        None
    };

    let mut pool = PoolState::init_labeled_pool(grid.clone(), config.base as usize, config.seed)?;
    let mut model = train_toy_model(&pool, dataset, config.temperature)?;
    let mut records = vec![record(&pool, &model, dataset, 0.0)];
    for t in 1..=config.iterations {
        let scores = score_pool(&model, dataset, &grid)?;
        let cfg = method
            .with_batch_size(batch_schedule(t, config.base) as usize)
            .with_seed(derive_seed(config.seed, t as u64));
        let start = Instant::now();
        let result = select_batch(&pool, &scores, features.as_ref(), &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        pool.stage_batch(&result.batch)?;
        pool.commit_batch();
        model = train_toy_model(&pool, dataset, config.temperature)?;
        records.push(record(&pool, &model, dataset, secs));
        log::debug!(
            "{} t={t} labeled={} miou={:.4}",
            cfg.label(),
            pool.labeled().len(),
            records[records.len() - 1].miou
        );
    }
    Ok(LoopHistory {
        method: method.label(),
        seed: config.seed,
        records,
    })
}

fn record(pool: &PoolState, model: &ToyModel, dataset: &SyntheticDataset, secs: f64) -> LoopRecord {
    let eval = if dataset.eval.is_empty() {
        &dataset.train
    } else {
        &dataset.eval
    };
    let report = evaluate_miou(model, eval);
    LoopRecord {
        iteration: pool.iteration(),
        labeled_regions: pool.labeled().len(),
        labeled_pixel_fraction: pool.labeled_pixel_fraction(),
        images_touched: pool.images_touched(),
        per_class_iou: report.per_class,
        miou: report.miou,
        selection_seconds: secs,
    }
}

/// Distinct classes among the labeled pixels.
pub fn labeled_classes(pool: &PoolState, dataset: &SyntheticDataset) -> BTreeSet<u8> {
    let grid = pool.grid();
    let mut out = BTreeSet::new();
    for id in pool.labeled() {
        let img = &dataset.train[id.image_index as usize];
        let r = grid.region(grid.index_of(*id).expect("labeled region is in the grid"));
        for y in r.rows() {
            for x in r.cols() {
                out.insert(img.labels[y * img.features.width + x]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{preset, Method};

    fn small(seed: u64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_train_images: 4,
            num_eval_images: 2,
            height: 32,
            width: 32,
            num_classes: 8,
            layout: ClassLayout::ImbalancedScenes,
            feature_dim: 4,
            noise_sigma: 1.0,
            seed,
        }
    }

    #[test]
    fn zero_noise_features_equal_prototypes() {
        let mut spec = small(3);
        spec.noise_sigma = 0.0;
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let mut f = vec![0.0; 4];
        for img in ds.train.iter().chain(&ds.eval) {
            for (p, &l) in img.labels.iter().enumerate() {
                img.feature(p, &mut f);
                let proto: Vec<f64> = ds
                    .prototype(l as usize)
                    .iter()
                    .map(|&v| v as f32 as f64)
                    .collect();
                assert_eq!(f, proto);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small(9)).unwrap();
        let b = generate_synthetic_dataset(&small(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(10)).unwrap();
        assert_ne!(a.train[0].labels, c.train[0].labels);
    }

    #[test]
    fn imbalanced_histogram_ratio() {
        for seed in 0..3 {
            let ds = generate_synthetic_dataset(&SyntheticDatasetSpec::imbalanced(seed)).unwrap();
            let hist = ds.class_histogram();
            let max = *hist.iter().max().unwrap() as f64;
            let min = *hist.iter().min().unwrap() as f64;
            assert!(min > 0.0, "every class present: {hist:?}");
            assert!(max / min >= 20.0, "ratio {} for {hist:?}", max / min);
        }
    }

    #[test]
    fn dominant_objects_layout() {
        let mut spec = small(4);
        spec.layout = ClassLayout::DominantObjects;
        spec.num_classes = 5;
        let ds = generate_synthetic_dataset(&spec).unwrap();
        for img in &ds.train {
            let objects: BTreeSet<u8> = img.labels.iter().copied().filter(|&l| l != 0).collect();
            assert!(objects.len() <= 3);
        }
        assert!(ds.class_histogram()[0] > 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small(0);
        spec.num_classes = 1;
        assert!(generate_synthetic_dataset(&spec).is_err());
        let mut spec = small(0);
        spec.noise_sigma = -1.0;
        assert!(generate_synthetic_dataset(&spec).is_err());
    }

    #[test]
    fn posteriors_sum_to_one_and_skip_untrained_classes() {
        let ds = generate_synthetic_dataset(&small(1)).unwrap();
        let grid = Arc::new(RegionGrid::build(&ds.train_catalog(), 8).unwrap());
        let pool = PoolState::init_labeled_pool(grid, 10, 1).unwrap();
        let model = train_toy_model(&pool, &ds, 1.0).unwrap();
        let mut post = vec![0.0; 8];
        let mut f = vec![0.0; 4];
        let img = &ds.train[0];
        for p in 0..img.labels.len() {
            img.feature(p, &mut f);
            model.posterior(&f, &mut post);
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for c in 0..8 {
                if !model.trained[c] {
                    assert_eq!(post[c], 0.0);
                }
            }
        }
        let seen = labeled_classes(&pool, &ds);
        assert_eq!(seen.len(), model.trained.iter().filter(|&&t| t).count());
        assert!(predict_posteriors(&model, img).is_ok());
    }

    #[test]
    fn single_class_model_is_uniform() {
        let ds = generate_synthetic_dataset(&small(1)).unwrap();
        let grid = Arc::new(RegionGrid::build(&ds.train_catalog(), 8).unwrap());
        // a region fully inside one class
        let id = grid
            .regions()
            .iter()
            .find(|r| {
                let img = &ds.train[r.id.image_index as usize];
                let l0 = img.labels[r.rows().start * 32 + r.cols().start];
                r.rows()
                    .all(|y| r.cols().all(|x| img.labels[y * 32 + x] == l0))
            })
            .unwrap()
            .id;
        let pool = PoolState::from_labeled(grid, [id], 0).unwrap();
        let model = train_toy_model(&pool, &ds, 1.0).unwrap();
        assert!(model.is_degenerate());
        let t = predict_posteriors(&model, &ds.train[1]).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.125));
    }

    #[test]
    fn noiseless_fully_covered_model_is_perfect() {
        let mut spec = small(5);
        spec.noise_sigma = 0.0;
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let grid = Arc::new(RegionGrid::build(&ds.train_catalog(), 8).unwrap());
        let all = grid.regions().iter().map(|r| r.id);
        let pool = PoolState::from_labeled(grid.clone(), all, 0).unwrap();
        let model = train_toy_model(&pool, &ds, 1.0).unwrap();
        assert!(model.trained.iter().all(|&t| t));
        assert_eq!(evaluate_miou(&model, &ds.train).miou, 1.0);
        assert_eq!(evaluate_miou(&model, &ds.eval).miou, 1.0);
    }

    #[test]
    fn confusion_hand_case() {
        // 4x4 image, truth rows: 0 0 1 1 / 0 0 1 1 / 2 2 2 2 / 2 2 2 2
        let truth = [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2];
        let pred = [0, 1, 1, 1, 0, 0, 1, 2, 2, 2, 0, 2, 2, 2, 2, 2];
        let mut m = ConfusionMatrix::new(4);
        for (t, p) in truth.iter().zip(&pred) {
            m.add(*t, *p);
        }
        let iou = m.iou();
        // class 0: tp 3, fn 1, fp 1; class 1: tp 3, fn 1, fp 1; class 2: tp 7, fn 1, fp 1
        assert!((iou[0].unwrap() - 3.0 / 5.0).abs() < 1e-9);
        assert!((iou[1].unwrap() - 3.0 / 5.0).abs() < 1e-9);
        assert!((iou[2].unwrap() - 7.0 / 9.0).abs() < 1e-9);
        assert_eq!(iou[3], None);
        assert!((m.miou() - (0.6 + 0.6 + 7.0 / 9.0) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn complement_mask_scores_zero() {
        let mut m = ConfusionMatrix::new(2);
        for t in [0, 1, 1, 0, 1] {
            m.add(t, 1 - t);
        }
        assert_eq!(m.iou(), vec![Some(0.0), Some(0.0)]);
        let mut perfect = ConfusionMatrix::new(3);
        for t in [0, 1, 2, 2] {
            perfect.add(t, t);
        }
        assert_eq!(perfect.miou(), 1.0);
    }

    #[test]
    fn loop_follows_schedule_and_shares_batch_zero() {
        let ds = generate_synthetic_dataset(&small(2)).unwrap();
        let cfg = LoopConfig::new(3, 5, 8, 11);
        let mut first = None;
        for m in [
            Method::Random,
            Method::Entropy,
            Method::EntropySpatial,
            Method::CoreSet,
        ] {
            let h = run_al_loop(&ds, &preset(m, 8), &cfg).unwrap();
            let counts: Vec<usize> = h.records.iter().map(|r| r.labeled_regions).collect();
            assert_eq!(counts, vec![5, 10, 20, 40]);
            for w in h.records.windows(2) {
                assert!(w[1].labeled_pixel_fraction >= w[0].labeled_pixel_fraction);
            }
            let r0 = h.records[0].clone();
            match &first {
                None => first = Some(r0),
                Some(f) => assert_eq!(f, &r0),
            }
            let csv = h.to_csv();
            assert_eq!(csv.lines().count(), 5);
            assert!(csv.starts_with("iteration,pixels_pct,miou,images_touched\n0,"));
        }
    }

    #[test]
    fn infeasible_schedule_fails_up_front() {
        let ds = generate_synthetic_dataset(&small(2)).unwrap();
        // 4 images of 16 regions
        let err = run_al_loop(
            &ds,
            &preset(Method::Entropy, 8),
            &LoopConfig::new(3, 9, 8, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(run_al_loop(
            &ds,
            &preset(Method::Entropy, 8),
            &LoopConfig::new(2, 16, 8, 0)
        )
        .is_ok());
    }
}
