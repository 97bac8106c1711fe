//! Tissue segmentation, region planning and multi-scale subdivision.
//!
//! A slide is segmented on a coarse block grid by HSV saturation, then the
//! axis-aligned `region_size` grid is scanned and regions whose tissue share
//! is strictly above the minimum are kept. Regions that would cross the
//! slide edge are dropped. Each kept region is split into one full-size
//! tile, four half-size tiles and sixteen quarter-size tiles (21 total for
//! the default 2048 px region).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::slide::SlideRaster;
use crate::{par_map, Error, Result};

pub const REGION_SIZE: u32 = 2048;
pub const TILES_PER_REGION: usize = 21;
pub const DEFAULT_DOWNSAMPLE: u32 = 32;
pub const DEFAULT_SATURATION_THRESHOLD: f64 = 0.08;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.10;

/// HSV saturation of an 8-bit RGB pixel, in `[0, 1]`.
pub fn saturation(p: &[u8]) -> f64 {
    let max = p[0].max(p[1]).max(p[2]);
    if max == 0 {
        return 0.0;
    }
    let min = p[0].min(p[1]).min(p[2]);
    (max - min) as f64 / max as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub downsample_factor: u32,
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn from_bits(width: u32, height: u32, downsample_factor: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::shape("TissueMask", width as usize * height as usize, bits.len()));
        }
        Ok(Self {
            width,
            height,
            downsample_factor,
            bits,
        })
    }

    pub fn get(&self, cx: u32, cy: u32) -> bool {
        self.bits[cy as usize * self.width as usize + cx as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn tissue_cells(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether this mask has the grid shape a slide of the given size needs.
    pub fn matches(&self, width_px: u32, height_px: u32) -> bool {
        self.downsample_factor >= 1
            && self.width == width_px.div_ceil(self.downsample_factor)
            && self.height == height_px.div_ceil(self.downsample_factor)
    }
}

/// Marks a block as tissue iff the mean saturation over its pixels is
/// strictly above `saturation_threshold`. Edge blocks average over the
/// pixels that exist.
pub fn segment_tissue(slide: &SlideRaster, downsample_factor: u32, saturation_threshold: f64) -> Result<TissueMask> {
    if downsample_factor == 0 {
        return Err(Error::InvalidParameter("downsample_factor must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&saturation_threshold) {
        return Err(Error::InvalidParameter(format!(
            "saturation threshold must be in [0, 1), got {saturation_threshold}"
        )));
    }
    let (w, h) = (slide.width_px(), slide.height_px());
    if w == 0 || h == 0 {
        return Err(Error::EmptyInput("slide"));
    }
    let f = downsample_factor;
    let mw = w.div_ceil(f);
    let mh = h.div_ceil(f);
    let stripes: Vec<u32> = (0..mh).collect();
    let rows = par_map(&stripes, |&cy| -> Result<Vec<bool>> {
        let y0 = cy * f;
        let sh = f.min(h - y0);
        let buf = slide.read_window(0, y0, w, sh)?;
        let mut sums = vec![0.0f64; mw as usize];
        for r in 0..sh as usize {
            let row = &buf[r * w as usize * 3..(r + 1) * w as usize * 3];
            for (x, p) in row.chunks_exact(3).enumerate() {
                sums[x / f as usize] += saturation(p);
            }
        }
        Ok(sums
            .iter()
            .enumerate()
            .map(|(cx, s)| {
                let bw = f.min(w - cx as u32 * f);
                s / (bw as f64 * sh as f64) > saturation_threshold
            })
            .collect())
    });
    let mut bits = Vec::with_capacity(mw as usize * mh as usize);
    for r in rows {
        bits.extend(r?);
    }
    TissueMask::from_bits(mw, mh, f, bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub origin_x: u32,
    pub origin_y: u32,
    pub tissue_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub slide_id: String,
    pub region_size: u32,
    pub regions: Vec<Region>,
}

/// What to do with grid candidates that extend past the slide edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    #[default]
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPlanner {
    pub region_size: u32,
    pub min_tissue_fraction: f64,
    pub boundary: BoundaryPolicy,
}

impl Default for RegionPlanner {
    fn default() -> Self {
        Self {
            region_size: REGION_SIZE,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
            boundary: BoundaryPolicy::Discard,
        }
    }
}

impl RegionPlanner {
    /// Tissue area (in pixels) of the mask inside the given square.
    fn tissue_area(mask: &TissueMask, x0: u32, y0: u32, size: u32, w: u32, h: u32) -> u64 {
        let f = mask.downsample_factor;
        let (x1, y1) = (x0 + size, y0 + size);
        let mut area = 0u64;
        for cy in y0 / f..y1.div_ceil(f).min(mask.height) {
            let oy = (((cy + 1) * f).min(y1).min(h)).saturating_sub((cy * f).max(y0));
            for cx in x0 / f..x1.div_ceil(f).min(mask.width) {
                if mask.get(cx, cy) {
                    let ox = (((cx + 1) * f).min(x1).min(w)).saturating_sub((cx * f).max(x0));
                    area += ox as u64 * oy as u64;
                }
            }
        }
        area
    }

    pub fn plan(&self, slide: &SlideRaster, mask: &TissueMask) -> Result<RegionPlan> {
        if self.region_size < 4 || !self.region_size.is_multiple_of(4) {
            return Err(Error::InvalidParameter(format!(
                "region size {} must be a positive multiple of 4",
                self.region_size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::InvalidParameter("min tissue fraction must be in [0, 1]".into()));
        }
        let (w, h) = (slide.width_px(), slide.height_px());
        if !mask.matches(w, h) {
            return Err(Error::shape(
                "plan_regions mask",
                format!("grid for {w}x{h}"),
                format!("{}x{} @ {}", mask.width, mask.height, mask.downsample_factor),
            ));
        }
        let size = self.region_size;
        let candidates: Vec<(u32, u32)> = (0..h / size)
            .flat_map(|gy| (0..w / size).map(move |gx| (gx * size, gy * size)))
            .collect();
        let area = size as f64 * size as f64;
        let mut regions: Vec<Region> = par_map(&candidates, |&(x, y)| Region {
            origin_x: x,
            origin_y: y,
            tissue_fraction: Self::tissue_area(mask, x, y, size, w, h) as f64 / area,
        })
        .into_iter()
        .filter(|r| r.tissue_fraction > self.min_tissue_fraction)
        .collect();
        regions.sort_by_key(|r| (r.origin_y, r.origin_x));
        Ok(RegionPlan {
            slide_id: slide.slide_id().to_string(),
            region_size: size,
            regions,
        })
    }
}

/// Plans 2048 px regions with the default 10% strict tissue threshold.
pub fn plan_regions(slide: &SlideRaster, mask: &TissueMask) -> Result<RegionPlan> {
    RegionPlanner::default().plan(slide, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub scale: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

/// Splits a region into 1 + 4 + 16 tiles: scale descending, then row-major.
pub fn subdivide_region(region_size: u32) -> Vec<TileRecord> {
    let mut tiles = Vec::with_capacity(TILES_PER_REGION);
    for per_side in [1u32, 2, 4] {
        let scale = region_size / per_side;
        for j in 0..per_side {
            for i in 0..per_side {
                tiles.push(TileRecord {
                    scale,
                    offset_x: i * scale,
                    offset_y: j * scale,
                });
            }
        }
    }
    tiles
}

/// One JSON-lines row. Tile coordinates are absolute slide pixels at base
/// magnification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub region_x: u32,
    pub region_y: u32,
    pub scale: u32,
    pub tile_x: u32,
    pub tile_y: u32,
    pub tissue_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TileManifest {
    pub rows: Vec<ManifestRow>,
}

impl TileManifest {
    pub fn from_plan(plan: &RegionPlan) -> Self {
        let tiles = subdivide_region(plan.region_size);
        let rows = plan
            .regions
            .iter()
            .flat_map(|r| {
                tiles.iter().map(move |t| ManifestRow {
                    slide_id: plan.slide_id.clone(),
                    region_x: r.origin_x,
                    region_y: r.origin_y,
                    scale: t.scale,
                    tile_x: r.origin_x + t.offset_x,
                    tile_y: r.origin_y + t.offset_y,
                    tissue_fraction: r.tissue_fraction,
                })
            })
            .collect();
        Self { rows }
    }

    pub fn tile_count(&self) -> usize {
        self.rows.len()
    }

    /// Groups rows by region, checking each group holds exactly 21 tiles.
    pub fn regions(&self) -> Result<Vec<&[ManifestRow]>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let key = (self.rows[start].region_x, self.rows[start].region_y);
            let mut end = start;
            while end < self.rows.len() && (self.rows[end].region_x, self.rows[end].region_y) == key {
                end += 1;
            }
            if end - start != TILES_PER_REGION {
                return Err(Error::ManifestMismatch {
                    expected: TILES_PER_REGION,
                    got: end - start,
                });
            }
            out.push(&self.rows[start..end]);
            start = end;
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line)?);
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilerConfig {
    pub downsample_factor: u32,
    pub saturation_threshold: f64,
    pub planner: RegionPlanner,
}

impl Default for TilerConfig {
    fn default() -> Self {
        Self {
            downsample_factor: DEFAULT_DOWNSAMPLE,
            saturation_threshold: DEFAULT_SATURATION_THRESHOLD,
            planner: RegionPlanner::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TilingResult {
    pub mask: TissueMask,
    pub plan: RegionPlan,
    pub manifest: TileManifest,
}

/// Segment, plan and subdivide in one pass.
pub fn tile_slide(slide: &SlideRaster, config: &TilerConfig) -> Result<TilingResult> {
    let mask = segment_tissue(slide, config.downsample_factor, config.saturation_threshold)?;
    let plan = config.planner.plan(slide, &mask)?;
    let manifest = TileManifest::from_plan(&plan);
    Ok(TilingResult { mask, plan, manifest })
}

pub const ANYRES_MAX_SIDE: u32 = 3;

/// Sub-patch layout for a high-resolution patch image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnyResGrid {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub cell_w: u32,
    pub cell_h: u32,
    pub includes_global_view: bool,
}

impl AnyResGrid {
    pub fn cells(&self) -> u32 {
        self.grid_rows * self.grid_cols
    }

    /// Cell rectangles `(x, y, w, h)` on the `cols*cell_w x rows*cell_h`
    /// canvas, row-major.
    pub fn sub_patches(&self) -> Vec<(u32, u32, u32, u32)> {
        (0..self.grid_rows)
            .flat_map(|r| (0..self.grid_cols).map(move |c| (c * self.cell_w, r * self.cell_h, self.cell_w, self.cell_h)))
            .collect()
    }
}

/// `(effective pixels, padded pixels)` when an `image_w x image_h` image is
/// scaled (down only, aspect kept) onto a `rows x cols` canvas of cells.
pub fn anyres_fit(image_w: u32, image_h: u32, base_cell: u32, rows: u32, cols: u32) -> (f64, f64) {
    let (w, h, b) = (image_w as f64, image_h as f64, base_cell as f64);
    let s = (cols as f64 * b / w).min(rows as f64 * b / h).min(1.0);
    let effective = w * h * s * s;
    (effective, rows as f64 * cols as f64 * b * b - effective)
}

/// Picks the pinpoint grid in `(1x1)..(3x3)`: most image pixels kept, then
/// least padding, then fewer cells, then rows <= cols. When some canvas
/// covers the image this is the minimum-padding covering grid.
pub fn anyres_split(image_w: u32, image_h: u32, base_cell: u32) -> Result<AnyResGrid> {
    if image_w == 0 || image_h == 0 || base_cell == 0 {
        return Err(Error::InvalidParameter("anyres dimensions must be >= 1".into()));
    }
    let mut best: Option<(u32, u32, f64, f64)> = None;
    for r in 1..=ANYRES_MAX_SIDE {
        for c in 1..=ANYRES_MAX_SIDE {
            let (eff, pad) = anyres_fit(image_w, image_h, base_cell, r, c);
            let better = match best {
                None => true,
                Some((br, bc, beff, bpad)) => {
                    if eff != beff {
                        eff > beff
                    } else if pad != bpad {
                        pad < bpad
                    } else if r * c != br * bc {
                        r * c < br * bc
                    } else {
                        r <= c && br > bc
                    }
                }
            };
            if better {
                best = Some((r, c, eff, pad));
            }
        }
    }
    let (grid_rows, grid_cols, _, _) = best.expect("nine candidates");
    Ok(AnyResGrid {
        grid_rows,
        grid_cols,
        cell_w: base_cell,
        cell_h: base_cell,
        includes_global_view: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{generate_synthetic_slide, SlideMetadata, SyntheticSlideSpec, DEFAULT_TISSUE};

    fn meta(w: u32, h: u32) -> SlideMetadata {
        SlideMetadata {
            slide_id: "t".into(),
            width_px: w,
            height_px: h,
            base_magnification: 40.0,
        }
    }

    #[test]
    fn saturation_values() {
        assert_eq!(saturation(&[0, 0, 0]), 0.0);
        assert_eq!(saturation(&[200, 200, 200]), 0.0);
        assert_eq!(saturation(&[200, 100, 0]), 1.0);
        assert_eq!(saturation(&[200, 100, 150]), 0.5);
    }

    #[test]
    fn background_slide_has_empty_mask() {
        let slide = generate_synthetic_slide(&SyntheticSlideSpec::new(1, 1024, 1024, 0)).unwrap();
        let mask = segment_tissue(&slide, 32, 0.08).unwrap();
        assert_eq!((mask.width, mask.height), (32, 32));
        assert_eq!(mask.tissue_cells(), 0);
    }

    #[test]
    fn zero_threshold_marks_any_coloured_block() {
        let slide = SlideRaster::solid(meta(100, 70), [10, 20, 30]).unwrap();
        let mask = segment_tissue(&slide, 32, 0.0).unwrap();
        assert_eq!((mask.width, mask.height), (4, 3));
        assert!(mask.bits().iter().all(|&b| b));
    }

    #[test]
    fn bad_parameters() {
        let slide = SlideRaster::solid(meta(64, 64), [1, 2, 3]).unwrap();
        assert!(segment_tissue(&slide, 0, 0.1).is_err());
        assert!(segment_tissue(&slide, 8, 1.0).is_err());
        assert!(segment_tissue(&slide, 8, -0.1).is_err());
    }

    #[test]
    fn full_tissue_slide_gives_sixteen_regions() {
        let slide = SlideRaster::solid(meta(8192, 8192), DEFAULT_TISSUE).unwrap();
        let mask = segment_tissue(&slide, 32, 0.08).unwrap();
        let plan = plan_regions(&slide, &mask).unwrap();
        assert_eq!(plan.regions.len(), 16);
        assert!(plan.regions.iter().all(|r| r.tissue_fraction == 1.0));
        assert_eq!(TileManifest::from_plan(&plan).tile_count(), 336);
    }

    #[test]
    fn boundary_regions_are_discarded() {
        let slide = SlideRaster::solid(meta(4095, 2048 + 100), DEFAULT_TISSUE).unwrap();
        let mask = segment_tissue(&slide, 32, 0.08).unwrap();
        let plan = plan_regions(&slide, &mask).unwrap();
        assert_eq!(plan.regions.len(), 1);
        assert_eq!((plan.regions[0].origin_x, plan.regions[0].origin_y), (0, 0));
    }

    #[test]
    fn exactly_ten_percent_is_dropped() {
        // 320 px regions over 32 px blocks: 100 blocks per region.
        let mask_bits = |n: usize| -> Vec<bool> { (0..100).map(|i| i < n).collect() };
        let slide = SlideRaster::solid(meta(320, 320), [255, 255, 255]).unwrap();
        let planner = RegionPlanner {
            region_size: 320,
            ..RegionPlanner::default()
        };
        let at = TissueMask::from_bits(10, 10, 32, mask_bits(10)).unwrap();
        assert!(planner.plan(&slide, &at).unwrap().regions.is_empty());
        let above = TissueMask::from_bits(10, 10, 32, mask_bits(11)).unwrap();
        let plan = planner.plan(&slide, &above).unwrap();
        assert_eq!(plan.regions.len(), 1);
        assert_eq!(plan.regions[0].tissue_fraction, 0.11);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let slide = SlideRaster::solid(meta(4096, 4096), DEFAULT_TISSUE).unwrap();
        let mask = TissueMask::from_bits(2, 2, 32, vec![true; 4]).unwrap();
        assert!(plan_regions(&slide, &mask).is_err());
    }

    #[test]
    fn subdivision_layout() {
        let tiles = subdivide_region(REGION_SIZE);
        assert_eq!(tiles.len(), 21);
        assert_eq!(tiles[0], TileRecord { scale: 2048, offset_x: 0, offset_y: 0 });
        let mid: Vec<(u32, u32)> = tiles[1..5].iter().map(|t| (t.offset_x, t.offset_y)).collect();
        assert_eq!(mid, vec![(0, 0), (1024, 0), (0, 1024), (1024, 1024)]);
        assert!(tiles[5..].iter().all(|t| t.scale == 512));
        // Each scale covers every pixel exactly once (checked on a 64-px grid).
        for scale in [2048, 1024, 512] {
            let mut cover = vec![0u8; 32 * 32];
            for t in tiles.iter().filter(|t| t.scale == scale) {
                for y in (t.offset_y / 64)..((t.offset_y + t.scale) / 64) {
                    for x in (t.offset_x / 64)..((t.offset_x + t.scale) / 64) {
                        cover[y as usize * 32 + x as usize] += 1;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c == 1), "scale {scale}");
        }
    }

    #[test]
    fn manifest_jsonl_field_order_and_round_trip() {
        let plan = RegionPlan {
            slide_id: "s1".into(),
            region_size: 2048,
            regions: vec![Region {
                origin_x: 2048,
                origin_y: 4096,
                tissue_fraction: 0.5,
            }],
        };
        let m = TileManifest::from_plan(&plan);
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"slide_id":"s1","region_x":2048,"region_y":4096,"scale":2048,"tile_x":2048,"tile_y":4096,"tissue_fraction":0.5}"#
        );
        assert_eq!(text.lines().count(), 21);
        assert_eq!(TileManifest::read_jsonl(&buf[..]).unwrap(), m);
        assert_eq!(m.regions().unwrap().len(), 1);
    }

    #[test]
    fn truncated_manifest_group_is_an_error() {
        let plan = RegionPlan {
            slide_id: "s".into(),
            region_size: 2048,
            regions: vec![Region { origin_x: 0, origin_y: 0, tissue_fraction: 1.0 }],
        };
        let mut m = TileManifest::from_plan(&plan);
        m.rows.pop();
        assert!(matches!(m.regions(), Err(Error::ManifestMismatch { got: 20, .. })));
    }

    #[test]
    fn anyres_examples() {
        let g = anyres_split(3 * 336, 3 * 336, 336).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (3, 3));
        assert!(g.includes_global_view);
        let g = anyres_split(336, 336, 336).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (1, 1));
        // 2.4 x 1.1 cells wide/tall: needs 3 columns and 2 rows.
        let g = anyres_split(806, 370, 336).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (2, 3));
        assert_eq!(g.sub_patches().len(), 6);
        assert!(anyres_split(0, 10, 10).is_err());
    }
}
