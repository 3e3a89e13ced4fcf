//! File formats: binary tensors, region features, JSON sidecars, selection
//! manifests and the run configuration.
//!
//! All binary formats are little-endian:
//!
//! ```text
//! posterior   "RALP" u32 version=1, u32 C, u32 H, u32 W, C·H·W × f32 (class-major, row-major)
//! feature map "RALM" u32 version=1, u32 D, u32 H, u32 W, D·H·W × f32
//! features    "RALF" u32 version=1, u32 n_regions, u32 D,
//!             n_regions × (u32 image_index, u32 row, u32 col, D × f32)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::features::{FeatureMapTensor, FeatureMatrix};
use crate::region::RegionId;
use crate::scoring::{PosteriorTensor, POSTERIOR_SUM_TOLERANCE};
use crate::selection::{SelectionConfig, SelectionResult};

pub const POSTERIOR_MAGIC: [u8; 4] = *b"RALP";
pub const FEATURE_MAP_MAGIC: [u8; 4] = *b"RALM";
pub const REGION_FEATURES_MAGIC: [u8; 4] = *b"RALF";
pub const FORMAT_VERSION: u32 = 1;

const TENSOR_HEADER: usize = 20;
const FEATURES_HEADER: usize = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.offset;
        if left < n {
            return Err(FormatError::Truncated {
                offset: self.offset,
                expected: n,
                found: left,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let b = self.take(4)?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(())
    }

    /// Checks that exactly `n` bytes remain.
    fn expect_remaining(&self, n: usize) -> std::result::Result<(), FormatError> {
        let left = self.bytes.len() - self.offset;
        if left < n {
            Err(FormatError::Truncated {
                offset: self.offset,
                expected: n,
                found: left,
            })
        } else if left > n {
            Err(FormatError::TrailingBytes {
                offset: self.offset + n,
                extra: left - n,
            })
        } else {
            Ok(())
        }
    }
}

fn dim(field: &'static str, v: u32) -> std::result::Result<usize, FormatError> {
    if v == 0 {
        Err(FormatError::InvalidHeader {
            field,
            value: v as u64,
        })
    } else {
        Ok(v as usize)
    }
}

fn payload_len(field: &'static str, parts: &[usize]) -> std::result::Result<usize, FormatError> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or(FormatError::InvalidHeader {
            field,
            value: u64::MAX,
        })
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

// (dim0, H, W, values)
fn decode_tensor(
    bytes: &[u8],
    magic: [u8; 4],
    dim0_name: &'static str,
) -> std::result::Result<(usize, usize, usize, Vec<f32>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    let d0 = dim(dim0_name, r.u32()?)?;
    let h = dim("height", r.u32()?)?;
    let w = dim("width", r.u32()?)?;
    let len = payload_len(dim0_name, &[d0, h, w, 4])?;
    r.expect_remaining(len)?;
    let values = f32s(r.take(len)?);
    Ok((d0, h, w, values))
}

fn encode_tensor(magic: [u8; 4], d0: usize, h: usize, w: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER + values.len() * 4);
    out.extend_from_slice(&magic);
    for v in [FORMAT_VERSION, d0 as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_posterior(t: &PosteriorTensor) -> Vec<u8> {
    encode_tensor(POSTERIOR_MAGIC, t.num_classes, t.height, t.width, &t.values)
}

/// Decodes and validates a posterior tensor.
pub fn decode_posterior(bytes: &[u8], image_index: u32) -> Result<PosteriorTensor> {
    let (c, h, w, values) = decode_tensor(bytes, POSTERIOR_MAGIC, "classes")?;
    if c < 2 {
        return Err(FormatError::InvalidHeader {
            field: "classes",
            value: c as u64,
        }
        .into());
    }
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(FormatError::ValueOutOfRange {
            index: i,
            value: *v as f64,
        }
        .into());
    }
    let t = PosteriorTensor {
        image_index,
        num_classes: c,
        height: h,
        width: w,
        values,
    };
    if let Some((row, col, sum)) = t.first_unnormalized_pixel() {
        debug_assert!((sum - 1.0).abs() > POSTERIOR_SUM_TOLERANCE);
        return Err(FormatError::NotNormalized { row, col, sum }.into());
    }
    Ok(t)
}

pub fn read_posterior_file(path: impl AsRef<Path>, image_index: u32) -> Result<PosteriorTensor> {
    decode_posterior(&fs::read(path)?, image_index)
}

pub fn write_posterior_file(path: impl AsRef<Path>, t: &PosteriorTensor) -> Result<()> {
    write_atomic(path, &encode_posterior(t))
}

pub fn encode_feature_map(t: &FeatureMapTensor) -> Vec<u8> {
    encode_tensor(FEATURE_MAP_MAGIC, t.dim, t.height, t.width, &t.values)
}

pub fn decode_feature_map(bytes: &[u8], image_index: u32) -> Result<FeatureMapTensor> {
    let (d, h, w, values) = decode_tensor(bytes, FEATURE_MAP_MAGIC, "dim")?;
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(FormatError::ValueOutOfRange {
            index: i,
            value: *v as f64,
        }
        .into());
    }
    FeatureMapTensor::new(image_index, d, h, w, values)
}

pub fn read_feature_map_file(path: impl AsRef<Path>, image_index: u32) -> Result<FeatureMapTensor> {
    decode_feature_map(&fs::read(path)?, image_index)
}

pub fn write_feature_map_file(path: impl AsRef<Path>, t: &FeatureMapTensor) -> Result<()> {
    write_atomic(path, &encode_feature_map(t))
}

/// Encodes region features; values are stored as f32.
pub fn encode_region_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURES_HEADER + m.len() * (12 + 4 * m.dim()));
    out.extend_from_slice(&REGION_FEATURES_MAGIC);
    for v in [FORMAT_VERSION, m.len() as u32, m.dim() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, id) in m.ids().iter().enumerate() {
        for v in [id.image_index, id.row, id.col] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in m.row(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_region_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(REGION_FEATURES_MAGIC)?;
    let n = dim("n_regions", r.u32()?)?;
    let d = dim("dim", r.u32()?)?;
    let record =
        payload_len("dim", &[d, 4])?
            .checked_add(12)
            .ok_or(FormatError::InvalidHeader {
                field: "dim",
                value: d as u64,
            })?;
    r.expect_remaining(payload_len("n_regions", &[n, record])?)?;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let id = RegionId::new(r.u32()?, r.u32()?, r.u32()?);
        ids.push(id);
        for v in f32s(r.take(4 * d)?) {
            if !v.is_finite() {
                return Err(FormatError::ValueOutOfRange {
                    index: data.len(),
                    value: v as f64,
                }
                .into());
            }
            data.push(v as f64);
        }
    }
    FeatureMatrix::from_parts(ids, d, data)
}

pub fn read_region_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_region_features(&fs::read(path)?)
}

pub fn write_region_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_region_features(m))
}

/// JSON sidecar listing one tensor file per image. Relative paths resolve
/// against the directory holding the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub files: Vec<TensorIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub image_index: u32,
    pub path: PathBuf,
}

impl TensorIndex {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let index: TensorIndex = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((index, base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Reads every posterior listed in an index file, in parallel.
pub fn load_posteriors(index_path: impl AsRef<Path>) -> Result<Vec<PosteriorTensor>> {
    let (index, base) = TensorIndex::load(index_path)?;
    index
        .files
        .par_iter()
        .map(|e| read_posterior_file(base.join(&e.path), e.image_index))
        .collect()
}

/// Reads every feature map listed in an index file, in parallel.
pub fn load_feature_maps(index_path: impl AsRef<Path>) -> Result<Vec<FeatureMapTensor>> {
    let (index, base) = TensorIndex::load(index_path)?;
    index
        .files
        .par_iter()
        .map(|e| read_feature_map_file(base.join(&e.path), e.image_index))
        .collect()
}

/// One line of a selection manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub batch_index: u32,
    pub pick_index: usize,
    pub image: u32,
    pub row: u32,
    pub col: u32,
    pub potential: f64,
    pub u_term: f64,
    pub d_term: f64,
    pub method: String,
}

pub fn manifest_records(result: &SelectionResult, batch_index: u32) -> Vec<ManifestRecord> {
    result
        .picks
        .iter()
        .enumerate()
        .map(|(i, p)| ManifestRecord {
            batch_index,
            pick_index: i,
            image: p.region.image_index,
            row: p.region.row,
            col: p.region.col,
            potential: p.potential,
            u_term: p.u_term,
            d_term: p.d_term,
            method: result.label.clone(),
        })
        .collect()
}

pub fn encode_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_selection_manifest(
    path: impl AsRef<Path>,
    result: &SelectionResult,
    batch_index: u32,
) -> Result<()> {
    write_atomic(
        path,
        encode_manifest(&manifest_records(result, batch_index))?.as_bytes(),
    )
}

pub fn read_selection_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    decode_manifest(&fs::read_to_string(path)?)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Inputs and settings of a `select` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pool_state: PathBuf,
    pub posterior_index: PathBuf,
    #[serde(default)]
    pub features: Option<PathBuf>,
    pub output_manifest: PathBuf,
    pub selection: SelectionConfig,
    pub region_size: u32,
    pub schedule_base: u64,
    pub seed: u64,
    #[serde(default)]
    pub pca_dim: Option<usize>,
}

impl RunConfig {
    /// Parses a config and checks that every input path exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn check_inputs(&self) -> Result<()> {
        let inputs = [
            Some(&self.pool_state),
            Some(&self.posterior_index),
            self.features.as_ref(),
        ];
        for p in inputs.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
        }
        self.selection.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::pixel_entropy;
    use crate::selection::{preset, Method, Objective, PickDiagnostics, SelectionStats};
    use proptest::prelude::*;
    use std::time::Duration;

    fn half_half() -> PosteriorTensor {
        PosteriorTensor::new(0, 2, 1, 1, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn posterior_file_round_trip_and_entropy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ralp");
        write_posterior_file(&path, &half_half()).unwrap();
        let t = read_posterior_file(&path, 0).unwrap();
        assert_eq!(t, half_half());
        let h = pixel_entropy(&t).unwrap().values[0];
        assert!((h - 2f64.ln()).abs() < 1e-12);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RALP");
        assert_eq!(bytes.len(), 20 + 8);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_posterior(&half_half());
        let err = decode_posterior(&bytes[..26], 0).unwrap_err();
        match err {
            Error::Format(FormatError::Truncated {
                offset,
                expected,
                found,
            }) => assert_eq!((offset, expected, found), (20, 8, 6)),
            other => panic!("unexpected {other:?}"),
        }
        let err = decode_posterior(&bytes[..3], 0).unwrap_err();
        assert_eq!(err.code(), "truncated");
    }

    #[test]
    fn bad_magic_and_other_codes() {
        let mut bytes = encode_posterior(&half_half());
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_posterior(&bytes, 0).unwrap_err().code(), "bad_magic");

        let mut bytes = encode_posterior(&half_half());
        bytes.push(0);
        assert_eq!(
            decode_posterior(&bytes, 0).unwrap_err().code(),
            "trailing_bytes"
        );

        let mut t = half_half();
        t.values = vec![0.5, 0.4];
        let bytes = encode_posterior(&t);
        assert_eq!(
            decode_posterior(&bytes, 0).unwrap_err().code(),
            "not_normalized"
        );

        t.values = vec![1.5, -0.5];
        let bytes = encode_posterior(&t);
        assert_eq!(
            decode_posterior(&bytes, 0).unwrap_err().code(),
            "value_out_of_range"
        );

        let mut bytes = encode_posterior(&half_half());
        bytes[4] = 2;
        assert_eq!(
            decode_posterior(&bytes, 0).unwrap_err().code(),
            "unsupported_version"
        );
    }

    #[test]
    fn every_single_byte_header_corruption_is_rejected() {
        let posterior = encode_posterior(
            &PosteriorTensor::new(
                0,
                2,
                2,
                3,
                vec![
                    0.25, 0.5, 0.75, 1.0, 0.0, 0.5, 0.75, 0.5, 0.25, 0.0, 1.0, 0.5,
                ],
            )
            .unwrap(),
        );
        let features = encode_region_features(
            &FeatureMatrix::from_rows(vec![
                (RegionId::new(0, 0, 0), vec![1.0, 2.0]),
                (RegionId::new(0, 0, 8), vec![-1.0, 0.5]),
            ])
            .unwrap(),
        );
        let map = encode_feature_map(
            &FeatureMapTensor::new(0, 2, 1, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );
        for (bytes, header, kind) in [(&posterior, 20, 0), (&features, 16, 1), (&map, 20, 2)] {
            for pos in 0..header {
                for val in 0..=255u8 {
                    if val == bytes[pos] {
                        continue;
                    }
                    let mut b = bytes.clone();
                    b[pos] = val;
                    let rejected = match kind {
                        0 => decode_posterior(&b, 0).is_err(),
                        1 => decode_region_features(&b).is_err(),
                        _ => decode_feature_map(&b, 0).is_err(),
                    };
                    assert!(rejected, "format {kind}: byte {pos} -> {val} accepted");
                }
            }
        }
    }

    #[test]
    fn huge_header_dimensions_do_not_allocate() {
        let mut bytes = encode_posterior(&half_half());
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_posterior(&bytes, 0).is_err());
    }

    #[test]
    fn index_loading_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_posterior_file(dir.path().join("a.ralp"), &half_half()).unwrap();
        let idx = TensorIndex {
            files: vec![TensorIndexEntry {
                image_index: 7,
                path: "a.ralp".into(),
            }],
        };
        idx.save(dir.path().join("index.json")).unwrap();
        let loaded = load_posteriors(dir.path().join("index.json")).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].image_index, 7);
    }

    #[test]
    fn manifest_round_trip_preserves_order() {
        let picks: Vec<PickDiagnostics> = (0..4)
            .map(|i| PickDiagnostics {
                region: RegionId::new(i % 2, 8 * i, 16),
                potential: 1.0 / (i as f64 + 3.0),
                u_term: 0.1 * i as f64,
                d_term: 0.5,
            })
            .collect();
        let result = SelectionResult {
            batch: picks.iter().map(|p| p.region).collect(),
            picks,
            objective: Objective::MaxMin,
            label: "entropy-spatial".into(),
            stats: SelectionStats::default(),
            wall_time: Duration::ZERO,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_selection_manifest(&path, &result, 2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            r#"{"batch_index":2,"pick_index":0,"image":0,"row":0,"col":16,"potential":"#
        ));
        let back = read_selection_manifest(&path).unwrap();
        assert_eq!(back, manifest_records(&result, 2));
        assert_eq!(encode_manifest(&back).unwrap(), text);
    }

    #[test]
    fn run_config_round_trip_and_path_checks() {
        let dir = tempfile::tempdir().unwrap();
        let pool = dir.path().join("pool.json");
        let index = dir.path().join("index.json");
        fs::write(&pool, "{}").unwrap();
        fs::write(&index, "{}").unwrap();
        let cfg = RunConfig {
            pool_state: pool,
            posterior_index: index,
            features: None,
            output_manifest: dir.path().join("out.jsonl"),
            selection: preset(Method::EntropySpatial, 32)
                .with_batch_size(10)
                .with_seed(3),
            region_size: 32,
            schedule_base: 1000,
            seed: 3,
            pca_dim: Some(16),
        };
        let path = dir.path().join("run.json");
        fs::write(&path, cfg.to_json().unwrap()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        let mut missing = cfg.clone();
        missing.features = Some(dir.path().join("nope.ralf"));
        fs::write(&path, missing.to_json().unwrap()).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn region_feature_codec_round_trips(
            rows in prop::collection::btree_map(
                (0u32..3, 0u32..4, 0u32..4),
                prop::collection::vec(-1e3f32..1e3, 3),
                1..12,
            )
        ) {
            let m = FeatureMatrix::from_rows(rows.into_iter().map(|((i, r, c), v)| {
                (RegionId::new(i, r * 8, c * 8), v.into_iter().map(f64::from).collect())
            }))
            .unwrap();
            let bytes = encode_region_features(&m);
            let back = decode_region_features(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode_region_features(&back), bytes);
        }

        #[test]
        fn posterior_codec_round_trips(
            h in 1usize..5,
            w in 1usize..5,
            weights in prop::collection::vec(0u8..=4, 3 * 16),
        ) {
            // quarter steps sum exactly to 1 in f32
            let plane = h * w;
            let mut values = vec![0.0f32; 3 * plane];
            for p in 0..plane {
                let a = weights[p] as f32 / 4.0;
                let b = (1.0 - a) * (weights[16 + p] % 2) as f32;
                values[p] = a;
                values[plane + p] = b;
                values[2 * plane + p] = 1.0 - a - b;
            }
            let t = PosteriorTensor::new(1, 3, h, w, values).unwrap();
            let bytes = encode_posterior(&t);
            let back = decode_posterior(&bytes, 1).unwrap();
            prop_assert_eq!(encode_posterior(&back), bytes);
        }
    }
}
