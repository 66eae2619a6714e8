//! wasm bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively; the wrappers only convert errors into `JsError`.

use lxfuse::degrade::{apply_with_gray, DegradationKind, DegradationSpec, ImageBuf, Severity};
use lxfuse::fusion::{count_params, AccountingPreset, FusionConfig, LlmShape, ProjectionShape};
use lxfuse::grid::{NeighborhoodTable, PatchGrid};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Degrades canvas RGBA bytes in place of RGB; alpha is passed through.
pub fn degrade_pixels(
    rgba: &[u8],
    width: usize,
    height: usize,
    kind: &str,
    severity: &str,
    fog_gray: f64,
) -> Result<Vec<u8>, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!(
            "expected {} RGBA bytes, got {}",
            width * height * 4,
            rgba.len()
        ));
    }
    let kind: DegradationKind = kind.parse().map_err(|e: lxfuse::Error| e.to_string())?;
    let severity: Severity = severity.parse().map_err(|e: lxfuse::Error| e.to_string())?;
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = ImageBuf::from_u8(height, width, 3, &rgb).map_err(|e| e.to_string())?;
    let out = apply_with_gray(DegradationSpec::new(kind, severity), &img, fog_gray)
        .map_err(|e| e.to_string())?
        .to_u8();
    Ok(out
        .chunks_exact(3)
        .zip(rgba.chunks_exact(4))
        .flat_map(|(c, p)| [c[0], c[1], c[2], p[3]])
        .collect())
}

/// Row-major indices of the key tokens that query `(row, col)` attends to.
pub fn neighborhood(rows: usize, cols: usize, radius: f64, row: usize, col: usize) -> Result<Vec<u32>, String> {
    let grid = PatchGrid::new(rows, cols).map_err(|e| e.to_string())?;
    if !grid.contains((row, col)) {
        return Err(format!("({row}, {col}) is outside a {rows}x{cols} grid"));
    }
    let table = NeighborhoodTable::build(grid, grid, radius).map_err(|e| e.to_string())?;
    Ok(table
        .neighbors(grid.index((row, col)))
        .iter()
        .map(|&j| j as u32)
        .collect())
}

#[derive(Debug, Serialize)]
pub struct Costs {
    pub fusion_params: u64,
    pub projection_params: u64,
    pub total_params: u64,
    pub visual_tokens: usize,
    pub pairs_per_block: Vec<u64>,
    pub fusion_overhead_flops: u64,
    pub base_path_flops: u64,
    pub overhead_percent: f64,
    pub fused_path_flops: u64,
    pub concat_path_flops: u64,
    pub visual_ratio: f64,
}

/// Accounting for a stack of width `d` over a `side x side` grid feeding a
/// 7B decoder through a two-layer projection.
pub fn costs(d: usize, side: usize, radii: &[f64], ffn_mult: usize, text_len: usize) -> Result<Costs, String> {
    let preset = AccountingPreset {
        fusion: FusionConfig {
            radii: radii.to_vec(),
            ffn_mult,
            ..FusionConfig::with_width(d)
        },
        grid: PatchGrid::new(side, side).map_err(|e| e.to_string())?,
        projection: Some(ProjectionShape {
            dims: vec![d, 4096, 4096],
            bias: true,
        }),
        llm: LlmShape::llama_7b(),
    };
    preset.fusion.validate().map_err(|e| e.to_string())?;
    let rep = preset.report(text_len).map_err(|e| e.to_string())?;
    Ok(Costs {
        fusion_params: count_params(&preset.fusion, None),
        projection_params: preset.projection.as_ref().map_or(0, ProjectionShape::params),
        total_params: preset.params(),
        visual_tokens: rep.visual_tokens,
        pairs_per_block: rep.blocks.iter().map(|b| b.pairs).collect(),
        fusion_overhead_flops: rep.fusion_overhead,
        base_path_flops: rep.base_path,
        overhead_percent: 100.0 * rep.overhead_fraction,
        fused_path_flops: rep.fused_path,
        concat_path_flops: rep.concat_path,
        visual_ratio: rep.visual_ratio,
    })
}

#[wasm_bindgen(js_name = degrade)]
pub fn degrade_js(
    rgba: &[u8],
    width: usize,
    height: usize,
    kind: &str,
    severity: &str,
    fog_gray: f64,
) -> Result<Vec<u8>, JsError> {
    degrade_pixels(rgba, width, height, kind, severity, fog_gray).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = neighborhood)]
pub fn neighborhood_js(rows: usize, cols: usize, radius: f64, row: usize, col: usize) -> Result<Vec<u32>, JsError> {
    neighborhood(rows, cols, radius, row, col).map_err(|e| JsError::new(&e))
}

/// `radii` is a comma-separated list; returns the report as JSON.
#[wasm_bindgen(js_name = costs)]
pub fn costs_js(d: usize, side: usize, radii: &str, ffn_mult: usize, text_len: usize) -> Result<String, JsError> {
    let radii = radii
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| JsError::new(&format!("radius {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let c = costs(d, side, &radii, ffn_mult, text_len).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&c).expect("costs serialize"))
}
