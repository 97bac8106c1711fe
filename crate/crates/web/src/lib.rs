//! wasm-bindgen bindings for the static demo page in `www/`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use slidekit::schedule::{build_stage_plan, lr_at};
use slidekit::slide::{generate_synthetic_slide, SyntheticSlideSpec};
use slidekit::tiler::{anyres_split, tile_slide, RegionPlanner, TilerConfig};

fn js_err(e: slidekit::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A synthetic slide, its tissue mask and the planned regions.
#[wasm_bindgen]
pub struct TilingDemo {
    thumb_w: u32,
    thumb_h: u32,
    thumbnail: Vec<u8>,
    mask: Vec<u8>,
    regions: String,
}

#[wasm_bindgen]
impl TilingDemo {
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        width: u32,
        height: u32,
        blobs: u32,
        region_size: u32,
        downsample: u32,
        saturation_threshold: f64,
        min_tissue_fraction: f64,
    ) -> Result<TilingDemo, JsError> {
        let mut spec = SyntheticSlideSpec::new(seed, width, height, blobs);
        let r = (width.min(height) / 8).max(16);
        spec.blob_radius_px = (r / 2, r * 2);
        let slide = generate_synthetic_slide(&spec).map_err(js_err)?;
        let cfg = TilerConfig {
            downsample_factor: downsample,
            saturation_threshold,
            planner: RegionPlanner {
                region_size,
                min_tissue_fraction,
                ..Default::default()
            },
        };
        let result = tile_slide(&slide, &cfg).map_err(js_err)?;
        let (tw, th) = (result.mask.width, result.mask.height);
        // One pixel per mask cell, sampled at the cell centre.
        let mut thumbnail = Vec::with_capacity(tw as usize * th as usize * 4);
        let mut mask = Vec::with_capacity(tw as usize * th as usize);
        for cy in 0..th {
            for cx in 0..tw {
                let x = (cx * downsample + downsample / 2).min(width - 1);
                let y = (cy * downsample + downsample / 2).min(height - 1);
                let p = slide.pixel(x, y).map_err(js_err)?;
                thumbnail.extend_from_slice(&[p[0], p[1], p[2], 255]);
                mask.push(result.mask.get(cx, cy) as u8);
            }
        }
        let regions = json!({
            "region_size": region_size,
            "tiles": result.manifest.tile_count(),
            "regions": result.plan.regions.iter().map(|r| json!({
                "x": r.origin_x, "y": r.origin_y, "tissue_fraction": r.tissue_fraction,
            })).collect::<Vec<_>>(),
        })
        .to_string();
        Ok(TilingDemo {
            thumb_w: tw,
            thumb_h: th,
            thumbnail,
            mask,
            regions,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn thumb_width(&self) -> u32 {
        self.thumb_w
    }

    #[wasm_bindgen(getter)]
    pub fn thumb_height(&self) -> u32 {
        self.thumb_h
    }

    /// RGBA bytes, `thumb_width x thumb_height`.
    pub fn thumbnail_rgba(&self) -> Vec<u8> {
        self.thumbnail.clone()
    }

    /// One byte per mask cell, 1 for tissue.
    pub fn mask_cells(&self) -> Vec<u8> {
        self.mask.clone()
    }

    /// `{region_size, tiles, regions: [{x, y, tissue_fraction}]}`
    pub fn regions_json(&self) -> String {
        self.regions.clone()
    }
}

/// `{stage, warmup_steps, groups: {name: {base_lr, curve}}, frozen: [..]}`
#[wasm_bindgen]
pub fn lr_curves(stage: u8, total_steps: u32) -> Result<String, JsError> {
    let plan = build_stage_plan(stage).map_err(js_err)?;
    let total = total_steps.max(1) as u64;
    let mut groups = serde_json::Map::new();
    for g in plan.trainable() {
        let curve = (0..=total).map(|s| lr_at(&plan, g, s, total)).collect::<Result<Vec<_>, _>>().map_err(js_err)?;
        groups.insert(
            g.as_str().into(),
            json!({"base_lr": plan.group(g).learning_rate, "curve": curve}),
        );
    }
    let frozen: Vec<&str> = plan.groups.iter().filter(|g| g.frozen).map(|g| g.name.as_str()).collect();
    Ok(json!({
        "stage": stage,
        "epochs": plan.epochs,
        "warmup_steps": plan.warmup_steps(total),
        "data_mix": plan.data_mix,
        "groups": groups,
        "frozen": frozen,
    })
    .to_string())
}

/// `{rows, cols, cell_w, cell_h, global_view, patches: [[x, y, w, h]]}`
#[wasm_bindgen]
pub fn anyres_grid(width: u32, height: u32, base_cell: u32) -> Result<String, JsError> {
    let g = anyres_split(width, height, base_cell).map_err(js_err)?;
    Ok(json!({
        "rows": g.grid_rows,
        "cols": g.grid_cols,
        "cell_w": g.cell_w,
        "cell_h": g.cell_h,
        "global_view": g.includes_global_view,
        "patches": g.sub_patches(),
    })
    .to_string())
}
