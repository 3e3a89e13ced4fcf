//! Spatial and feature distances between regions.
//!
//! The piece-wise spatial distance takes four values: `0` for a region and
//! itself, `a` for two regions of one image whose centers lie within `tau`,
//! `b` for two regions of one image further apart, and `c` for regions of
//! different images. It is a metric whenever `c >= b >= a > 0` and `b <= 2a`.
//!
//! Before entering the selection objective every distance term is scaled to
//! `[0, 1]`: the piece-wise term by `c`, the linear term by the largest image
//! diagonal, and the feature term by a divisor fixed at the start of a batch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::region::{ImageDims, Region, RegionGrid, RegionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialForm {
    Piecewise,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Inf,
}

impl PNorm {
    #[inline]
    pub fn norm(self, dy: i64, dx: i64) -> f64 {
        let (dy, dx) = (dy.unsigned_abs() as f64, dx.unsigned_abs() as f64);
        match self {
            PNorm::L1 => dy + dx,
            PNorm::L2 => (dy * dy + dx * dx).sqrt(),
            PNorm::Inf => dy.max(dx),
        }
    }
}

impl std::str::FromStr for PNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "l1" | "L1" => Ok(PNorm::L1),
            "2" | "l2" | "L2" => Ok(PNorm::L2),
            "inf" | "linf" | "Linf" | "max" => Ok(PNorm::Inf),
            other => Err(Error::Config(format!("unknown p-norm {other:?}"))),
        }
    }
}

/// Parameters of the diversity term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub spatial_form: SpatialForm,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Neighborhood radius in pixels.
    pub tau: f64,
    pub p_norm: PNorm,
    pub lambda_f: f64,
    pub lambda_s: f64,
}

impl DistanceSpec {
    /// Piece-wise distance with `a=1, b=2, c=2`, `tau` equal to the region size
    /// and the L∞ norm. Both weights start at zero.
    pub fn piecewise_defaults(region_size: u32) -> Self {
        DistanceSpec {
            spatial_form: SpatialForm::Piecewise,
            a: 1.0,
            b: 2.0,
            c: 2.0,
            tau: region_size as f64,
            p_norm: PNorm::Inf,
            lambda_f: 0.0,
            lambda_s: 0.0,
        }
    }

    pub fn with_weights(mut self, lambda_f: f64, lambda_s: f64) -> Self {
        self.lambda_f = lambda_f;
        self.lambda_s = lambda_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !finite_nonneg(self.lambda_f) || !finite_nonneg(self.lambda_s) {
            return Err(Error::Config(
                "distance weights must be finite and >= 0".into(),
            ));
        }
        if ![self.a, self.b, self.c].into_iter().all(finite_nonneg) {
            return Err(Error::Config("a, b, c must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Metric-condition report for this spec's `(a, b, c)`.
    pub fn metric_report(&self) -> MetricReport {
        check_metric_conditions(self.a, self.b, self.c)
    }
}

/// Region id with the center used for spatial distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub id: RegionId,
    pub center: [i64; 2],
}

impl From<&Region> for Site {
    fn from(r: &Region) -> Self {
        Site {
            id: r.id,
            center: r.center(),
        }
    }
}

#[inline]
fn center_gap(x: &Site, y: &Site, p: PNorm) -> f64 {
    p.norm(x.center[0] - y.center[0], x.center[1] - y.center[1])
}

/// Piece-wise constant spatial distance. The `tau` boundary counts as close.
#[inline]
pub fn spatial_distance_piecewise(x: &Site, y: &Site, spec: &DistanceSpec) -> f64 {
    if x.id == y.id {
        0.0
    } else if x.id.image_index != y.id.image_index {
        spec.c
    } else if center_gap(x, y, spec.p_norm) <= spec.tau {
        spec.a
    } else {
        spec.b
    }
}

/// L_p distance between centers. Regions of different images are `cross_image` apart.
#[inline]
pub fn spatial_distance_linear(x: &Site, y: &Site, p: PNorm, cross_image: f64) -> f64 {
    if x.id.image_index != y.id.image_index {
        cross_image
    } else {
        center_gap(x, y, p)
    }
}

/// Length of the image diagonal under `p`; used as the cross-image linear distance.
pub fn image_diagonal(dims: &ImageDims, p: PNorm) -> f64 {
    p.norm(dims.height as i64, dims.width as i64)
}

/// Euclidean distance between two feature vectors of equal length.
#[inline]
pub fn feature_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc.sqrt()
}

/// Divisors that bring each distance term into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub feature: f64,
    pub spatial: f64,
}

/// Normalized combined distance and whether a zero divisor silenced a term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedDistance {
    pub value: f64,
    pub zero_divisor: bool,
}

/// `λf·min(d_f / feature_divisor, 1) + λs·min(d_s / spatial_divisor, 1)`.
///
/// A term with zero weight is skipped entirely; a weighted term with a zero
/// divisor contributes 0 and sets the flag.
#[inline]
pub fn normalized_combined_distance(
    feature: f64,
    spatial: f64,
    spec: &DistanceSpec,
    norms: &Normalizers,
) -> CombinedDistance {
    let mut out = CombinedDistance {
        value: 0.0,
        zero_divisor: false,
    };
    if spec.lambda_f > 0.0 {
        if norms.feature > 0.0 {
            out.value += spec.lambda_f * (feature / norms.feature).min(1.0);
        } else {
            out.zero_divisor = true;
        }
    }
    if spec.lambda_s > 0.0 {
        if norms.spatial > 0.0 {
            out.value += spec.lambda_s * (spatial / norms.spatial).min(1.0);
        } else {
            out.zero_divisor = true;
        }
    }
    out
}

/// Spatial divisor: `c` for the piece-wise form, the largest image diagonal for the linear one.
pub fn spatial_divisor(spec: &DistanceSpec, grid: &RegionGrid) -> f64 {
    match spec.spatial_form {
        SpatialForm::Piecewise => spec.c,
        SpatialForm::Linear => grid
            .images()
            .iter()
            .map(|d| image_diagonal(d, spec.p_norm))
            .fold(0.0, f64::max),
    }
}

/// Distances between grid regions, addressed by grid position.
#[derive(Debug, Clone)]
pub struct RegionDistance<'a> {
    sites: Vec<Site>,
    // per-region diagonal of its image, for the linear cross-image constant
    diagonals: Vec<f64>,
    features: Option<&'a FeatureMatrix>,
    spec: DistanceSpec,
    norms: Normalizers,
    use_features: bool,
    use_spatial: bool,
}

impl<'a> RegionDistance<'a> {
    /// `features` must be aligned with the grid when `spec.lambda_f > 0`.
    ///
    /// The spatial divisor is fixed here; the feature divisor starts at zero and
    /// is set per batch with [`set_normalizers`](Self::set_normalizers).
    pub fn new(
        grid: &RegionGrid,
        features: Option<&'a FeatureMatrix>,
        spec: DistanceSpec,
    ) -> Result<Self> {
        let norms = Normalizers {
            feature: 0.0,
            spatial: spatial_divisor(&spec, grid),
        };
        let use_features = spec.lambda_f > 0.0;
        if use_features {
            match features {
                None => {
                    return Err(Error::Config(
                        "feature weight is positive but no features were supplied".into(),
                    ))
                }
                Some(f) if !f.is_aligned_with(grid) => {
                    return Err(Error::invalid(
                        "feature rows do not match the grid's regions",
                    ))
                }
                _ => {}
            }
        }
        let diagonals = grid
            .regions()
            .iter()
            .map(|r| {
                grid.image(r.id.image_index)
                    .map(|d| image_diagonal(d, spec.p_norm))
                    .unwrap_or(0.0)
            })
            .collect();
        Ok(RegionDistance {
            sites: grid.regions().iter().map(Site::from).collect(),
            diagonals,
            features,
            spec,
            norms,
            use_features,
            use_spatial: spec.lambda_s > 0.0,
        })
    }

    pub fn spec(&self) -> &DistanceSpec {
        &self.spec
    }

    pub fn normalizers(&self) -> &Normalizers {
        &self.norms
    }

    pub fn set_normalizers(&mut self, norms: Normalizers) {
        self.norms = norms;
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    /// True when the combined distance is identically zero.
    pub fn is_trivial(&self) -> bool {
        !self.use_features && !self.use_spatial
    }

    pub fn uses_features(&self) -> bool {
        self.use_features
    }

    #[inline]
    pub fn spatial(&self, i: usize, j: usize) -> f64 {
        let (x, y) = (&self.sites[i], &self.sites[j]);
        match self.spec.spatial_form {
            SpatialForm::Piecewise => spatial_distance_piecewise(x, y, &self.spec),
            SpatialForm::Linear => spatial_distance_linear(
                x,
                y,
                self.spec.p_norm,
                self.diagonals[i].max(self.diagonals[j]),
            ),
        }
    }

    /// Raw Euclidean feature distance. Zero when features are unused.
    #[inline]
    pub fn feature(&self, i: usize, j: usize) -> f64 {
        match self.features {
            Some(f) if self.use_features => feature_distance(f.row(i), f.row(j)),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn combined_detail(&self, i: usize, j: usize) -> CombinedDistance {
        let df = if self.use_features {
            self.feature(i, j)
        } else {
            0.0
        };
        let ds = if self.use_spatial {
            self.spatial(i, j)
        } else {
            0.0
        };
        normalized_combined_distance(df, ds, &self.spec, &self.norms)
    }

    #[inline]
    pub fn combined(&self, i: usize, j: usize) -> f64 {
        self.combined_detail(i, j).value
    }

    /// Combined distance given an already computed raw feature distance.
    #[inline]
    pub fn combined_with_feature(&self, i: usize, j: usize, df: f64) -> f64 {
        let ds = if self.use_spatial {
            self.spatial(i, j)
        } else {
            0.0
        };
        normalized_combined_distance(df, ds, &self.spec, &self.norms).value
    }

    /// Largest value the combined distance can take.
    pub fn max_value(&self) -> f64 {
        let f = if self.use_features {
            self.spec.lambda_f
        } else {
            0.0
        };
        let s = if self.use_spatial {
            self.spec.lambda_s
        } else {
            0.0
        };
        f + s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricCondition {
    APositive,
    BAtLeastA,
    CAtLeastB,
    BAtMostTwiceA,
}

impl MetricCondition {
    pub fn inequality(self) -> &'static str {
        match self {
            MetricCondition::APositive => "a > 0",
            MetricCondition::BAtLeastA => "b >= a",
            MetricCondition::CAtLeastB => "c >= b",
            MetricCondition::BAtMostTwiceA => "b <= 2a",
        }
    }
}

impl fmt::Display for MetricCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.inequality())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub violations: Vec<MetricCondition>,
}

impl MetricReport {
    pub fn is_metric(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the sufficient conditions `c >= b >= a > 0` and `b <= 2a` for the
/// piece-wise distance to be a metric.
pub fn check_metric_conditions(a: f64, b: f64, c: f64) -> MetricReport {
    let mut violations = Vec::new();
    if !(a > 0.0) {
        violations.push(MetricCondition::APositive);
    }
    if !(b >= a) {
        violations.push(MetricCondition::BAtLeastA);
    }
    if !(c >= b) {
        violations.push(MetricCondition::CAtLeastB);
    }
    if !(b <= 2.0 * a) {
        violations.push(MetricCondition::BAtMostTwiceA);
    }
    MetricReport {
        a,
        b,
        c,
        violations,
    }
}

/// A triple with `d(x, y) > d(x, z) + d(z, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriangleViolation {
    pub x: RegionId,
    pub y: RegionId,
    pub z: RegionId,
    pub d_xy: f64,
    pub d_xz: f64,
    pub d_zy: f64,
}

/// Checks the triangle inequality of the piece-wise distance on one triple.
pub fn triangle_violation(
    x: &Site,
    y: &Site,
    z: &Site,
    spec: &DistanceSpec,
) -> Option<TriangleViolation> {
    let d_xy = spatial_distance_piecewise(x, y, spec);
    let d_xz = spatial_distance_piecewise(x, z, spec);
    let d_zy = spatial_distance_piecewise(z, y, spec);
    (d_xy > d_xz + d_zy).then_some(TriangleViolation {
        x: x.id,
        y: y.id,
        z: z.id,
        d_xy,
        d_xz,
        d_zy,
    })
}

/// Exhaustive search over all ordered triples of `sites`.
pub fn find_triangle_violation(sites: &[Site], spec: &DistanceSpec) -> Option<TriangleViolation> {
    for x in sites {
        for y in sites {
            for z in sites {
                if let Some(v) = triangle_violation(x, y, z, spec) {
                    return Some(v);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn site(img: u32, cy: i64, cx: i64) -> Site {
        Site {
            id: RegionId::new(img, (cy.max(0)) as u32, (cx.max(0)) as u32),
            center: [cy, cx],
        }
    }

    fn defaults() -> DistanceSpec {
        DistanceSpec::piecewise_defaults(128)
    }

    #[test]
    fn piecewise_cases() {
        let s = defaults();
        let x = site(0, 64, 64);
        assert_eq!(spatial_distance_piecewise(&x, &x, &s), 0.0);
        assert_eq!(spatial_distance_piecewise(&x, &site(0, 64, 192), &s), 1.0);
        assert_eq!(spatial_distance_piecewise(&x, &site(1, 64, 64), &s), 2.0);
        assert_eq!(spatial_distance_piecewise(&x, &site(0, 64, 320), &s), 2.0);
        // diagonal neighbor is also within tau under L∞
        assert_eq!(spatial_distance_piecewise(&x, &site(0, 192, 192), &s), 1.0);
    }

    #[test]
    fn linear_cases() {
        let x = site(0, 0, 0);
        let y = site(0, 3, 4);
        assert_eq!(spatial_distance_linear(&x, &x, PNorm::L2, 99.0), 0.0);
        assert_eq!(spatial_distance_linear(&x, &y, PNorm::L2, 99.0), 5.0);
        assert_eq!(spatial_distance_linear(&x, &y, PNorm::Inf, 99.0), 4.0);
        assert_eq!(spatial_distance_linear(&x, &y, PNorm::L1, 99.0), 7.0);
        assert_eq!(
            spatial_distance_linear(&x, &site(1, 3, 4), PNorm::L2, 99.0),
            99.0
        );
    }

    #[test]
    fn feature_distances() {
        assert_eq!(feature_distance(&[0.3, -1.0], &[0.3, -1.0]), 0.0);
        assert_eq!(feature_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(feature_distance(&[1.0, 2.0, 2.0], &[0.0, 0.0, 0.0]), 3.0);
    }

    #[test]
    fn normalized_values() {
        let spec = defaults().with_weights(0.0, 1.0);
        let norms = Normalizers {
            feature: 0.0,
            spatial: spec.c,
        };
        let neighbor = normalized_combined_distance(0.0, 1.0, &spec, &norms);
        assert_eq!(neighbor.value, 0.5);
        assert!(!neighbor.zero_divisor);
        assert_eq!(
            normalized_combined_distance(0.0, 2.0, &spec, &norms).value,
            1.0
        );

        let fspec = defaults().with_weights(1.0, 0.0);
        let fnorm = Normalizers {
            feature: 3.0,
            spatial: 2.0,
        };
        assert_eq!(
            normalized_combined_distance(0.0, 2.0, &fspec, &fnorm).value,
            0.0
        );
        assert_eq!(
            normalized_combined_distance(1.5, 2.0, &fspec, &fnorm).value,
            0.5
        );
        // values beyond the divisor are clamped
        assert_eq!(
            normalized_combined_distance(6.0, 2.0, &fspec, &fnorm).value,
            1.0
        );
    }

    #[test]
    fn zero_divisor_is_flagged() {
        let spec = defaults().with_weights(1.0, 1.0);
        let norms = Normalizers {
            feature: 0.0,
            spatial: 2.0,
        };
        let d = normalized_combined_distance(5.0, 2.0, &spec, &norms);
        assert!(d.zero_divisor);
        assert_eq!(d.value, 1.0);
    }

    #[test]
    fn metric_conditions() {
        assert!(check_metric_conditions(1.0, 2.0, 2.0).is_metric());
        assert_eq!(
            check_metric_conditions(1.0, 2.5, 3.0).violations,
            vec![MetricCondition::BAtMostTwiceA]
        );
        assert_eq!(
            check_metric_conditions(2.0, 1.0, 3.0).violations,
            vec![MetricCondition::BAtLeastA]
        );
        let r = check_metric_conditions(0.0, 3.0, 1.0);
        assert!(r.violations.contains(&MetricCondition::APositive));
        assert!(r.violations.contains(&MetricCondition::CAtLeastB));
    }

    fn layout(spec_n: u32) -> Vec<Site> {
        let cat = [
            ImageDims::new(0, 4 * spec_n, 4 * spec_n),
            ImageDims::new(1, 4 * spec_n, 4 * spec_n),
        ];
        let g = RegionGrid::build(&cat, spec_n).unwrap();
        g.regions().iter().map(Site::from).collect()
    }

    #[test]
    fn exhaustive_layout_has_no_violation_for_metric_parameters() {
        let sites = layout(8);
        let spec = DistanceSpec::piecewise_defaults(8);
        assert_eq!(find_triangle_violation(&sites, &spec), None);
    }

    #[test]
    fn counterexample_found_when_b_exceeds_twice_a() {
        let sites = layout(8);
        let spec = DistanceSpec {
            b: 2.5,
            c: 3.0,
            ..DistanceSpec::piecewise_defaults(8)
        };
        let v = find_triangle_violation(&sites, &spec).expect("violation");
        assert_eq!((v.d_xy, v.d_xz, v.d_zy), (2.5, 1.0, 1.0));
        assert_eq!(v.x.image_index, v.y.image_index);
        assert_eq!(v.x.image_index, v.z.image_index);
    }

    #[test]
    fn spec_json_shape() {
        let spec = DistanceSpec::piecewise_defaults(128).with_weights(0.0, 1.0);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(
            json.starts_with(
                r#"{"spatial_form":"piecewise","a":1.0,"b":2.0,"c":2.0,"tau":128.0,"p_norm":"inf""#
            ),
            "{json}"
        );
        let parsed: DistanceSpec = serde_json::from_str(
            r#"{"spatial_form":"piecewise","a":1,"b":2,"c":2,"tau":128,"p_norm":"inf","lambda_f":0,"lambda_s":1}"#,
        )
        .unwrap();
        assert_eq!(parsed, spec);
    }

    fn any_site() -> impl Strategy<Value = Site> {
        (0u32..3, 0i64..64, 0i64..64).prop_map(|(img, y, x)| Site {
            id: RegionId::new(img, y as u32, x as u32),
            center: [y, x],
        })
    }

    proptest! {
        #[test]
        fn distances_are_symmetric_and_non_negative(
            x in any_site(),
            y in any_site(),
            tau in 1.0f64..40.0,
            fx in prop::collection::vec(-5.0f64..5.0, 4),
            fy in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let spec = DistanceSpec { tau, ..DistanceSpec::piecewise_defaults(8) };
            let p = spatial_distance_piecewise(&x, &y, &spec);
            prop_assert_eq!(p, spatial_distance_piecewise(&y, &x, &spec));
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p == 0.0, x.id == y.id);
            for norm in [PNorm::L1, PNorm::L2, PNorm::Inf] {
                let l = spatial_distance_linear(&x, &y, norm, 200.0);
                prop_assert_eq!(l, spatial_distance_linear(&y, &x, norm, 200.0));
                prop_assert!(l >= 0.0);
                if x.id.image_index == y.id.image_index {
                    prop_assert_eq!(l == 0.0, x.center == y.center);
                }
            }
            let f = feature_distance(&fx, &fy);
            prop_assert_eq!(f, feature_distance(&fy, &fx));
            prop_assert_eq!(f == 0.0, fx == fy);
        }
    }
}
