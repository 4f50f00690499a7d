//! Fixed multi-scale grid of image regions and RoI max-pooling.
//!
//! Regions are kept in fractional image coordinates so the same grid applies
//! at any input resolution. Four sliding box types tile the image:
//! `bigH` (full width, half height), `bigV` (half width, full height),
//! `medium` (a quarter of the image) and `small` (quarter width, half height).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::policy::BackboneSpec;
use crate::tensor::Tensor;

pub use crate::tensor::kernels::{pool_bin, Rect, POOL_BINS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoxType {
    BigH,
    BigV,
    Medium,
    Small,
    /// The whole image; used by the no-attention variant.
    Full,
}

impl BoxType {
    pub const GRID_TYPES: [BoxType; 4] = [BoxType::BigH, BoxType::BigV, BoxType::Medium, BoxType::Small];

    /// `(width fraction, height fraction)`.
    pub fn nominal_size(self) -> (f64, f64) {
        match self {
            BoxType::BigH => (1.0, 0.5),
            BoxType::BigV => (0.5, 1.0),
            BoxType::Medium => (0.5, 0.5),
            BoxType::Small => (0.25, 0.5),
            BoxType::Full => (1.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxType::BigH => "bigH",
            BoxType::BigV => "bigV",
            BoxType::Medium => "medium",
            BoxType::Small => "small",
            BoxType::Full => "full",
        }
    }
}

impl fmt::Display for BoxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BoxType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bigH" | "bigh" | "big_h" => Ok(BoxType::BigH),
            "bigV" | "bigv" | "big_v" => Ok(BoxType::BigV),
            "medium" => Ok(BoxType::Medium),
            "small" => Ok(BoxType::Small),
            "full" => Ok(BoxType::Full),
            other => Err(Error::Config(format!("unknown box type '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub box_type: BoxType,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RegionSpec {
    pub fn full_image() -> Self {
        RegionSpec { box_type: BoxType::Full, x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }
}

/// Count and row split of one box type's lattice; columns are derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub count: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub big_h: Lattice,
    pub big_v: Lattice,
    pub medium: Lattice,
    pub small: Lattice,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            big_h: Lattice { count: 6, rows: 6 },
            big_v: Lattice { count: 2, rows: 1 },
            medium: Lattice { count: 8, rows: 2 },
            small: Lattice { count: 32, rows: 4 },
        }
    }
}

impl GridConfig {
    pub fn empty() -> Self {
        let z = Lattice { count: 0, rows: 1 };
        GridConfig { big_h: z, big_v: z, medium: z, small: z }
    }

    pub fn lattice(&self, t: BoxType) -> Lattice {
        match t {
            BoxType::BigH => self.big_h,
            BoxType::BigV => self.big_v,
            BoxType::Medium => self.medium,
            BoxType::Small => self.small,
            BoxType::Full => Lattice { count: 0, rows: 1 },
        }
    }

    pub fn lattice_mut(&mut self, t: BoxType) -> Option<&mut Lattice> {
        match t {
            BoxType::BigH => Some(&mut self.big_h),
            BoxType::BigV => Some(&mut self.big_v),
            BoxType::Medium => Some(&mut self.medium),
            BoxType::Small => Some(&mut self.small),
            BoxType::Full => None,
        }
    }

    /// Same grid with one box type removed.
    pub fn without(&self, t: BoxType) -> Self {
        let mut c = self.clone();
        if let Some(l) = c.lattice_mut(t) {
            l.count = 0;
        }
        c
    }

    pub fn total(&self) -> usize {
        BoxType::GRID_TYPES.iter().map(|&t| self.lattice(t).count).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoIGrid {
    regions: Vec<RegionSpec>,
}

impl RoIGrid {
    pub fn from_regions(regions: Vec<RegionSpec>) -> Result<Self> {
        for r in &regions {
            if !(0.0 <= r.x0 && r.x0 < r.x1 && r.x1 <= 1.0 && 0.0 <= r.y0 && r.y0 < r.y1 && r.y1 <= 1.0) {
                bail!(Geometry, "region {:?} outside the unit square", r);
            }
        }
        Ok(RoIGrid { regions })
    }

    /// Single region covering the whole image.
    pub fn full_image() -> Self {
        RoIGrid { regions: vec![RegionSpec::full_image()] }
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn count(&self, t: BoxType) -> usize {
        self.regions.iter().filter(|r| r.box_type == t).count()
    }

    /// Feature-map rectangles for every region.
    pub fn project(&self, feature_w: usize, feature_h: usize) -> Vec<Rect> {
        self.regions.iter().map(|r| project_region(r, feature_w, feature_h)).collect()
    }

    /// One tab-separated line per region: index, type, x0, y0, x1, y1.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.regions.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                i, r.box_type, r.x0, r.y0, r.x1, r.y1
            ));
        }
        s
    }
}

/// Evenly spaced offsets `i·(1 − size)/(n − 1)` for `n` boxes of fractional
/// `size` along one axis.
fn offsets(n: usize, size: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| (i as f64 * (1.0 - size)) / (n - 1) as f64).collect()
}

/// Builds the grid, type-major (bigH, bigV, medium, small) then row-major.
pub fn generate_grid(config: &GridConfig) -> Result<RoIGrid> {
    let mut regions = Vec::with_capacity(config.total());
    for t in BoxType::GRID_TYPES {
        let Lattice { count, rows } = config.lattice(t);
        if count == 0 {
            continue;
        }
        if rows == 0 || count % rows != 0 {
            bail!(Config, "{} count {} does not factor into {} rows", t, count, rows);
        }
        let cols = count / rows;
        let (w, h) = t.nominal_size();
        if w >= 1.0 && cols != 1 {
            bail!(Config, "{} spans the full width; {} columns requested", t, cols);
        }
        if h >= 1.0 && rows != 1 {
            bail!(Config, "{} spans the full height; {} rows requested", t, rows);
        }
        let ys = offsets(rows, h);
        let xs = offsets(cols, w);
        for &y0 in &ys {
            for &x0 in &xs {
                regions.push(RegionSpec {
                    box_type: t,
                    x0,
                    y0,
                    x1: (x0 + w).min(1.0),
                    y1: (y0 + h).min(1.0),
                });
            }
        }
    }
    Ok(RoIGrid { regions })
}

// Products like 0.1·30 land a hair above an integer; snap before floor/ceil.
const SNAP: f64 = 1e-9;

/// Maps a fractional region to integer cells on a `w × h` map:
/// floor of the low edges, ceil of the high edges, clamped, at least one
/// cell per axis.
pub fn project_region(region: &RegionSpec, w: usize, h: usize) -> Rect {
    let w = w.max(1);
    let h = h.max(1);
    let lo = |f: f64, n: usize| ((f * n as f64 + SNAP).floor().max(0.0) as usize).min(n - 1);
    let hi = |f: f64, n: usize, start: usize| ((f * n as f64 - SNAP).ceil().max(0.0) as usize).clamp(start + 1, n);
    let x0 = lo(region.x0, w);
    let y0 = lo(region.y0, h);
    Rect { x0, y0, x1: hi(region.x1, w, x0), y1: hi(region.y1, h, y0) }
}

/// A `4×4×C` region descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledDescriptor {
    pub values: Tensor,
    pub region_index: usize,
}

/// Max-pools `rect` of a `[H, W, C]` (or `[1, H, W, C]`) feature map.
pub fn roi_pool(feature_map: &Tensor, rect: Rect, region_index: usize) -> Result<PooledDescriptor> {
    let (h, w, c) = match feature_map.dims() {
        [h, w, c] => (*h, *w, *c),
        [1, h, w, c] => (*h, *w, *c),
        d => bail!(Geometry, "roi_pool expects [H,W,C], got {:?}", d),
    };
    if rect.x0 >= rect.x1 || rect.y0 >= rect.y1 || rect.x1 > w || rect.y1 > h {
        bail!(Geometry, "rect {:?} invalid for {}x{} map", rect, w, h);
    }
    let mut out = vec![0.0; POOL_BINS * POOL_BINS * c];
    crate::tensor::kernels::roi_pool_map(feature_map.data(), w, c, rect, &mut out, None);
    Ok(PooledDescriptor { values: Tensor::new(vec![POOL_BINS, POOL_BINS, c], out)?, region_index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryReport {
    pub input: (usize, usize),
    /// `(width, height, channels)` after every backbone layer.
    pub layer_dims: Vec<(usize, usize, usize)>,
    pub rects: Vec<Rect>,
    /// Regions whose projected extent is below the 4-bin resolution on some
    /// axis, so pooled bins repeat cells.
    pub small_extent: Vec<usize>,
}

impl GeometryReport {
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        *self.layer_dims.last().expect("backbone has layers")
    }
}

/// Checks that the backbone fits the input and every region keeps at least
/// one feature cell per axis.
pub fn validate_geometry(grid: &RoIGrid, input: (usize, usize), backbone: &BackboneSpec) -> Result<GeometryReport> {
    let layer_dims = backbone.layer_dims(input.0, input.1)?;
    let (fw, fh, _) = *layer_dims.last().expect("backbone has layers");
    let rects = grid.project(fw, fh);
    let mut small_extent = Vec::new();
    for (i, r) in rects.iter().enumerate() {
        if r.width() == 0 || r.height() == 0 {
            bail!(Geometry, "region {} projects to zero extent on {}x{} features", i, fw, fh);
        }
        if r.width() < POOL_BINS || r.height() < POOL_BINS {
            small_extent.push(i);
        }
    }
    Ok(GeometryReport { input, layer_dims, rects, small_extent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_composition() {
        let g = generate_grid(&GridConfig::default()).unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(g.count(BoxType::BigV), 2);
        assert_eq!(g.count(BoxType::BigH), 6);
        assert_eq!(g.count(BoxType::Medium), 8);
        assert_eq!(g.count(BoxType::Small), 32);
    }

    #[test]
    fn every_default_region_has_nominal_size() {
        let g = generate_grid(&GridConfig::default()).unwrap();
        for r in g.regions() {
            let (w, h) = r.box_type.nominal_size();
            assert!((r.x1 - r.x0 - w).abs() < 1e-12 && (r.y1 - r.y0 - h).abs() < 1e-12, "{r:?}");
            assert!(r.x0 >= 0.0 && r.y0 >= 0.0 && r.x1 <= 1.0 && r.y1 <= 1.0);
        }
    }

    #[test]
    fn only_big_v_gives_two_halves() {
        let mut c = GridConfig::empty();
        c.big_v = Lattice { count: 2, rows: 1 };
        let g = generate_grid(&c).unwrap();
        let boxes: Vec<_> = g.regions().iter().map(|r| (r.x0, r.y0, r.x1, r.y1)).collect();
        assert_eq!(boxes, vec![(0.0, 0.0, 0.5, 1.0), (0.5, 0.0, 1.0, 1.0)]);
    }

    #[test]
    fn unfactorable_count_is_config_error() {
        let mut c = GridConfig::default();
        c.small = Lattice { count: 30, rows: 4 };
        assert_eq!(generate_grid(&c).unwrap_err().kind(), crate::ErrorKind::Config);
        let mut c = GridConfig::default();
        c.big_h = Lattice { count: 6, rows: 3 };
        assert_eq!(generate_grid(&c).unwrap_err().kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn projection_examples() {
        let full = RegionSpec::full_image();
        assert_eq!(project_region(&full, 68, 26), Rect { x0: 0, y0: 0, x1: 68, y1: 26 });
        let left = RegionSpec { box_type: BoxType::BigV, x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 };
        assert_eq!(project_region(&left, 68, 26), Rect { x0: 0, y0: 0, x1: 34, y1: 26 });
        // x: floor(0.5·68)=34, ceil(0.75·68)=51; y: 0, ceil(0.5·26)=13
        let small = RegionSpec { box_type: BoxType::Small, x0: 0.5, y0: 0.0, x1: 0.75, y1: 0.5 };
        let r = project_region(&small, 68, 26);
        assert_eq!(r, Rect { x0: 34, y0: 0, x1: 51, y1: 13 });
        assert!(r.width() >= 4);
    }

    #[test]
    fn projection_never_degenerates() {
        let r = RegionSpec { box_type: BoxType::Small, x0: 0.75, y0: 0.5, x1: 1.0, y1: 1.0 };
        let p = project_region(&r, 1, 1);
        assert_eq!(p, Rect { x0: 0, y0: 0, x1: 1, y1: 1 });
    }

    #[test]
    fn bins_cover_and_duplicate() {
        assert_eq!((0..4).map(|k| pool_bin(k, 4)).collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!((0..4).map(|k| pool_bin(k, 1)).collect::<Vec<_>>(), vec![(0, 1); 4]);
        assert_eq!((0..4).map(|k| pool_bin(k, 6)).collect::<Vec<_>>(), vec![(0, 2), (1, 3), (3, 5), (4, 6)]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let m = Tensor::filled(&[7, 13, 3], 0.42);
        let d = roi_pool(&m, Rect { x0: 2, y0: 1, x1: 9, y1: 6 }, 0).unwrap();
        assert_eq!(d.values.dims(), &[4, 4, 3]);
        assert!(d.values.data().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn four_by_four_region_is_identity() {
        let data: Vec<f64> = (0..6 * 6 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = Tensor::new(vec![6, 6, 2], data.clone()).unwrap();
        let d = roi_pool(&m, Rect { x0: 1, y0: 2, x1: 5, y1: 6 }, 3).unwrap();
        for by in 0..4 {
            for bx in 0..4 {
                for c in 0..2 {
                    let want = data[((2 + by) * 6 + 1 + bx) * 2 + c];
                    assert_eq!(d.values.data()[(by * 4 + bx) * 2 + c], want);
                }
            }
        }
        assert_eq!(d.region_index, 3);
    }

    #[test]
    fn dump_format() {
        let g = generate_grid(&GridConfig::default()).unwrap();
        let d = g.dump();
        assert_eq!(d.lines().count(), 48);
        assert_eq!(d.lines().next().unwrap(), "0\tbigH\t0.000000\t0.000000\t1.000000\t0.500000");
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_grid(&GridConfig::default()).unwrap();
        let b = generate_grid(&GridConfig::default()).unwrap();
        let bits = |g: &RoIGrid| g.regions().iter().flat_map(|r| [r.x0, r.y0, r.x1, r.y1]).map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
