use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use slidekit::compressor::{compress, CompressorConfig, CompressorState};
use slidekit::contrastive::{accuracy_report, class_prototypes, HashTextEncoder, PromptTemplateSet};
use slidekit::encoder::{
    aggregate_region, encode_tiles, RgbTile, StubEncoder, TileEncoder, DEFAULT_INPUT_SIZE, PRIMARY_TOWER_DIM,
    SECONDARY_TOWER_DIM,
};
use slidekit::linalg::{dot, l2_norm, Mat};
use slidekit::mil::{balanced_accuracy, mil_train, write_predictions_csv, MilHead, MilPrediction, MilTraining};
use slidekit::probe::{linear_probe, mean_by_shot, write_probe_csv, ProbeProtocol};
use slidekit::schedule::{build_stage_plan, lr_at};
use slidekit::slide::{generate_synthetic_slide, SyntheticSlideSpec};
use slidekit::synthetic::{gaussian_classes, separable_bags};
use slidekit::tiler::{tile_slide, ManifestRow, TileManifest};
use slidekit::{FeatureMatrix, Provenance, SlideRaster};

use crate::{CliError, CliResult, Outcome, PipelineConfig};

fn core<T>(context: impl std::fmt::Display, r: slidekit::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::from_core(context, e))
}

/// Writes through a sibling temp file and renames, so a crash never leaves a
/// half-written artifact under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(path, e))
}

fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| CliError::Input(format!("{}:{}: bad label `{l}`", path.display(), i + 1)))
        })
        .collect()
}

fn load_features(path: &Path) -> CliResult<FeatureMatrix> {
    core(path.display(), FeatureMatrix::load(path))
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub blob_count: u32,
    pub path: PathBuf,
}

/// Writes a synthetic slide: PNG for `.png` paths, raw RGB plus a JSON
/// sidecar otherwise.
pub fn cmd_synth(cfg: &PipelineConfig, width: u32, height: u32, blobs: u32, out: &Path) -> CliResult<SynthSummary> {
    let mut spec = SyntheticSlideSpec::new(cfg.seed, width, height, blobs);
    spec.slide_id = format!("synthetic-{}", cfg.seed);
    let slide = generate_synthetic_slide(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let saved = if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        slide.save_png(out)
    } else {
        slide.save_raw(out)
    };
    core(out.display(), saved)?;
    Ok(SynthSummary {
        slide_id: spec.slide_id,
        width_px: width,
        height_px: height,
        blob_count: blobs,
        path: out.to_path_buf(),
    })
}

// ---------------------------------------------------------------- tile

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TileSummary {
    pub slide_id: String,
    pub regions: usize,
    pub tiles: usize,
    pub mean_tissue_fraction: f64,
}

fn open_slide(cfg: &PipelineConfig) -> CliResult<SlideRaster> {
    let path = cfg
        .slide
        .as_ref()
        .ok_or_else(|| CliError::Config("no slide given (set `slide` or pass --slide)".into()))?;
    core(path.display(), SlideRaster::open(path))
}

/// Segments and plans the slide, writing the manifest. Zero retained regions
/// still writes an (empty) manifest but returns [`Outcome::Warning`].
pub fn cmd_tile(cfg: &PipelineConfig) -> CliResult<(TileSummary, Outcome)> {
    let slide = open_slide(cfg)?;
    let result = core(slide.slide_id(), tile_slide(&slide, &cfg.tiler()))?;
    let mut buf = Vec::new();
    core("manifest", result.manifest.write_jsonl(&mut buf))?;
    write_atomic(&cfg.manifest, &buf)?;
    let regions = &result.plan.regions;
    let summary = TileSummary {
        slide_id: slide.slide_id().to_string(),
        regions: regions.len(),
        tiles: result.manifest.tile_count(),
        mean_tissue_fraction: if regions.is_empty() {
            0.0
        } else {
            regions.iter().map(|r| r.tissue_fraction).sum::<f64>() / regions.len() as f64
        },
    };
    let outcome = if regions.is_empty() { Outcome::Warning } else { Outcome::Ok };
    Ok((summary, outcome))
}

// ---------------------------------------------------------------- encode

/// The two stand-in towers; seeds derive from the pipeline seed.
pub fn stub_towers(seed: u64) -> (StubEncoder, StubEncoder) {
    (
        StubEncoder::new(seed, PRIMARY_TOWER_DIM, DEFAULT_INPUT_SIZE),
        StubEncoder::new(seed.wrapping_add(1), SECONDARY_TOWER_DIM, DEFAULT_INPUT_SIZE),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncodeSummary {
    pub regions: usize,
    pub dim: usize,
    /// Distinct region contents; identical regions share one cache entry.
    pub unique_regions: usize,
    pub encoded: usize,
    pub reused: usize,
}

/// Cache key: everything that determines a region's feature row.
fn region_key(cfg: &PipelineConfig, towers: &[&dyn TileEncoder], region_size: u32, pixels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(b"slidekit-region-v1\0");
    for t in towers {
        let s = t.spec();
        h.update(format!("{}:{}:{}\0", s.name, s.input_size_px, s.output_dim).as_bytes());
    }
    h.update(format!("{:?}:{region_size}\0", cfg.aggregation).as_bytes());
    h.update(pixels);
    hex::encode(h.finalize())
}

fn crop(pixels: &[u8], stride: u32, x: u32, y: u32, size: u32) -> RgbTile {
    let mut data = Vec::with_capacity(size as usize * size as usize * 3);
    for row in y..y + size {
        let start = (row as usize * stride as usize + x as usize) * 3;
        data.extend_from_slice(&pixels[start..start + size as usize * 3]);
    }
    RgbTile {
        width: size,
        height: size,
        data,
    }
}

fn check_manifest(slide: &SlideRaster, manifest: &TileManifest) -> CliResult<()> {
    for r in &manifest.rows {
        if r.slide_id != slide.slide_id() {
            return Err(CliError::Input(format!(
                "manifest slide `{}` does not match slide `{}`",
                r.slide_id,
                slide.slide_id()
            )));
        }
        let (x1, y1) = (r.tile_x as u64 + r.scale as u64, r.tile_y as u64 + r.scale as u64);
        if x1 > slide.width_px() as u64 || y1 > slide.height_px() as u64 || r.tile_x < r.region_x || r.tile_y < r.region_y
        {
            return Err(CliError::Input(format!(
                "manifest tile ({}, {}) scale {} does not fit the slide",
                r.tile_x, r.tile_y, r.scale
            )));
        }
    }
    Ok(())
}

struct RegionJob<'a> {
    rows: &'a [ManifestRow],
    size: u32,
}

impl RegionJob<'_> {
    fn new(rows: &[ManifestRow]) -> RegionJob<'_> {
        let (rx, ry) = (rows[0].region_x, rows[0].region_y);
        let size = rows
            .iter()
            .map(|r| (r.tile_x + r.scale - rx).max(r.tile_y + r.scale - ry))
            .max()
            .unwrap_or(0);
        RegionJob { rows, size }
    }

    fn pixels(&self, slide: &SlideRaster) -> CliResult<Vec<u8>> {
        let (rx, ry) = (self.rows[0].region_x, self.rows[0].region_y);
        core(slide.slide_id(), slide.read_window(rx, ry, self.size, self.size))
    }

    fn encode(&self, slide: &SlideRaster, towers: (&StubEncoder, &StubEncoder), cfg: &PipelineConfig) -> CliResult<Vec<f32>> {
        let pixels = self.pixels(slide)?;
        let (rx, ry) = (self.rows[0].region_x, self.rows[0].region_y);
        let tiles: Vec<RgbTile> = self
            .rows
            .iter()
            .map(|r| crop(&pixels, self.size, r.tile_x - rx, r.tile_y - ry, r.scale))
            .collect();
        let context = format!("region ({rx}, {ry})");
        let tile_features = core(&context, encode_tiles(&tiles, towers.0, towers.1))?;
        core(&context, aggregate_region(&tile_features, cfg.aggregation))
    }
}

fn load_cached(path: &Path, dim: usize) -> Option<Vec<f32>> {
    let fm = FeatureMatrix::load(path).ok()?;
    (fm.rows() == 1 && fm.dim() == dim && fm.provenance() == Provenance::Region).then(|| fm.row(0).to_vec())
}

/// One pooled feature row per manifest region, in manifest order.
///
/// Regions are content-addressed: the cache file name hashes the region
/// pixels and encoder setup, so reruns skip finished regions and identical
/// regions are encoded once. A cache file that fails its header check is
/// recomputed.
pub fn cmd_encode(cfg: &PipelineConfig) -> CliResult<EncodeSummary> {
    let slide = open_slide(cfg)?;
    let f = File::open(&cfg.manifest).map_err(|e| CliError::io(&cfg.manifest, e))?;
    let manifest = core(cfg.manifest.display(), TileManifest::read_jsonl(BufReader::new(f)))?;
    check_manifest(&slide, &manifest)?;
    let jobs: Vec<RegionJob> = core(cfg.manifest.display(), manifest.regions())?
        .into_iter()
        .map(RegionJob::new)
        .collect();
    let (a, b) = stub_towers(cfg.seed);
    let dim = a.spec().output_dim + b.spec().output_dim;

    let keys = jobs
        .par_iter()
        .map(|j| Ok(region_key(cfg, &[&a, &b], j.size, &j.pixels(&slide)?)))
        .collect::<CliResult<Vec<String>>>()?;
    let mut first_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        first_of.entry(k.as_str()).or_insert(i);
    }
    let unique: Vec<(&str, usize)> = first_of.into_iter().collect();
    let rows = unique
        .par_iter()
        .map(|&(key, i)| {
            let path = cfg.feature_cache.join(format!("{key}.fmat"));
            if let Some(row) = load_cached(&path, dim) {
                return Ok((key, row, true));
            }
            let row = jobs[i].encode(&slide, (&a, &b), cfg)?;
            let fm = core(path.display(), FeatureMatrix::new(1, dim, row.clone(), Provenance::Region))?;
            write_atomic(&path, &fm.to_bytes())?;
            Ok((key, row, false))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let reused = rows.iter().filter(|r| r.2).count();
    let by_key: BTreeMap<&str, Vec<f32>> = rows.into_iter().map(|(k, r, _)| (k, r)).collect();

    let mut data = Vec::with_capacity(jobs.len() * dim);
    for k in &keys {
        data.extend_from_slice(&by_key[k.as_str()]);
    }
    let fm = core("region features", FeatureMatrix::new(jobs.len(), dim, data, Provenance::Region))?;
    write_atomic(&cfg.features, &fm.to_bytes())?;
    Ok(EncodeSummary {
        regions: jobs.len(),
        dim,
        unique_regions: by_key.len(),
        encoded: by_key.len() - reused,
        reused,
    })
}

// ---------------------------------------------------------------- compress

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressSummary {
    pub input_rows: usize,
    pub tokens: usize,
    pub dim: usize,
    pub checkpoint_created: bool,
}

/// Loads the compressor checkpoint, or initialises one from the seed and
/// saves it, then compresses the region features to a fixed token set.
pub fn cmd_compress(cfg: &PipelineConfig, input: &Path) -> CliResult<CompressSummary> {
    let features = load_features(input)?;
    let wanted = CompressorConfig {
        num_queries: cfg.num_queries,
        model_dim: cfg.model_dim,
        num_heads: cfg.num_heads,
        in_dim: features.dim(),
    };
    let (state, created) = if cfg.checkpoint.exists() {
        let s = core(cfg.checkpoint.display(), CompressorState::load(&cfg.checkpoint))?;
        if s.config != wanted {
            return Err(CliError::Input(format!(
                "{}: checkpoint shape {:?} does not match {:?}",
                cfg.checkpoint.display(),
                s.config,
                wanted
            )));
        }
        (s, false)
    } else {
        let s = CompressorState::init(wanted, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let mut buf = Vec::new();
        core("checkpoint", s.write_checkpoint(&mut buf))?;
        write_atomic(&cfg.checkpoint, &buf)?;
        (s, true)
    };
    let out = core(input.display(), compress(&state, &features))?;
    write_atomic(&cfg.compressed, &out.to_bytes())?;
    Ok(CompressSummary {
        input_rows: features.rows(),
        tokens: out.rows(),
        dim: out.dim(),
        checkpoint_created: created,
    })
}

// ---------------------------------------------------------------- zeroshot

#[derive(Clone, Debug, Serialize)]
pub struct ZeroShotSummary {
    pub rows: usize,
    pub pooled_class: String,
    pub overall_accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn best_class(row: &[f64], protos: &Mat) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..protos.rows() {
        let s = cosine(row, protos.row(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// Classifies every feature row, plus their mean as a slide-level `mean`
/// row, against prompt-ensemble class prototypes from the stub text tower.
/// With `labels`, also writes an accuracy report next to `out`.
pub fn cmd_zeroshot(cfg: &PipelineConfig, input: &Path, out: &Path, labels: Option<&Path>) -> CliResult<ZeroShotSummary> {
    let features = load_features(input)?.to_mat();
    if features.rows() == 0 {
        return Err(CliError::Input(format!("{}: no feature rows", input.display())));
    }
    let prompts = PromptTemplateSet::with_default_templates(cfg.classes.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let text = HashTextEncoder {
        seed: cfg.seed,
        dim: features.cols(),
    };
    let protos = core("class prototypes", class_prototypes(&prompts, &text))?;

    let mut preds = Vec::with_capacity(features.rows());
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Input(format!("{}: {e}", out.display()));
    w.write_record(["item", "class_index", "class_name", "cosine"]).map_err(csv_err)?;
    for r in 0..features.rows() {
        let (c, s) = best_class(features.row(r), &protos);
        preds.push(c);
        w.write_record([r.to_string(), c.to_string(), cfg.classes[c].clone(), format!("{s:.9}")])
            .map_err(csv_err)?;
    }
    let mean = features.column_sums().into_iter().map(|x| x / features.rows() as f64).collect::<Vec<_>>();
    let (pc, ps) = best_class(&mean, &protos);
    w.write_record(["mean".to_string(), pc.to_string(), cfg.classes[pc].clone(), format!("{ps:.9}")])
        .map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    write_atomic(out, &bytes)?;

    let mut summary = ZeroShotSummary {
        rows: features.rows(),
        pooled_class: cfg.classes[pc].clone(),
        overall_accuracy: None,
        balanced_accuracy: None,
    };
    if let Some(lp) = labels {
        let labels = read_labels(lp)?;
        let report = core(lp.display(), accuracy_report(&cfg.classes, &preds, &labels))?;
        summary.overall_accuracy = Some(report.overall_accuracy);
        summary.balanced_accuracy = Some(report.balanced_accuracy);
        write_atomic(&out.with_extension("report.json"), to_json(&report).as_bytes())?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- probe

#[derive(Clone, Debug, Serialize)]
pub struct ProbeSummary {
    pub records: usize,
    pub mean_by_shot: Vec<(usize, f64)>,
}

/// Few-shot linear probe. Without `features` it runs on a bundled
/// three-class Gaussian dataset derived from the seed.
pub fn cmd_probe(cfg: &PipelineConfig, features: Option<(&Path, &Path)>, out: &Path) -> CliResult<ProbeSummary> {
    let (x, y, name) = match features {
        Some((fp, lp)) => (load_features(fp)?.to_mat(), read_labels(lp)?, fp.display().to_string()),
        None => {
            let (x, y) = gaussian_classes(3, 160, 32, 3.0, cfg.seed);
            (x, y, "synthetic".to_string())
        }
    };
    let records = core("linear probe", linear_probe(&name, &x, &y, &ProbeProtocol::default(), None))?;
    let mut buf = Vec::new();
    core(out.display(), write_probe_csv(&records, &mut buf))?;
    write_atomic(out, &buf)?;
    Ok(ProbeSummary {
        records: records.len(),
        mean_by_shot: mean_by_shot(&records),
    })
}

// ---------------------------------------------------------------- mil

#[derive(Clone, Debug, Serialize)]
pub struct MilSummary {
    pub train_bags: usize,
    pub validation_bags: usize,
    pub best_epoch: usize,
    pub best_balanced_accuracy: f64,
    pub history: Vec<f64>,
}

/// Trains the gated-attention head on seeded synthetic bags (two classes)
/// and writes validation predictions from the best epoch.
pub fn cmd_mil(cfg: &PipelineConfig, bags: usize, dim: usize, out: &Path) -> CliResult<MilSummary> {
    if bags < 4 || dim == 0 {
        return Err(CliError::Config("mil needs at least 4 bags and a positive dim".into()));
    }
    let all = separable_bags(bags, 2, dim, (8, 32), 2.0, cfg.seed);
    let split = bags * 3 / 4;
    let (train, val) = all.split_at(split);
    let head = MilHead::new(dim, 2, cfg.seed);
    let opts = MilTraining {
        seed: cfg.seed,
        ..Default::default()
    };
    let result = core("mil", mil_train(head, train, val, &opts))?;
    let best = &result.best_head;
    let mut preds = Vec::with_capacity(val.len());
    for (i, b) in val.iter().enumerate() {
        let (c, p) = core("mil", best.predict(&b.features))?;
        preds.push(MilPrediction {
            slide_id: format!("bag-{:04}", split + i),
            predicted_class: c,
            confidence: p,
        });
    }
    let mut buf = Vec::new();
    core(out.display(), write_predictions_csv(&preds, &mut buf))?;
    write_atomic(out, &buf)?;
    Ok(MilSummary {
        train_bags: train.len(),
        validation_bags: val.len(),
        best_epoch: result.best_epoch,
        best_balanced_accuracy: core("mil", balanced_accuracy(best, val))?,
        history: result.history,
    })
}

// ---------------------------------------------------------------- metrics

/// BLEU-1..4 (corpus) and mean ROUGE-L over line-aligned text files.
pub fn cmd_metrics(cfg: &PipelineConfig, candidates: &Path, references: &Path) -> CliResult<slidekit::metrics::TextMetricReport> {
    let c = read_lines(candidates)?;
    let r = read_lines(references)?;
    if c.len() != r.len() {
        return Err(CliError::Input(format!(
            "{} has {} lines but {} has {}",
            candidates.display(),
            c.len(),
            references.display(),
            r.len()
        )));
    }
    core("metrics", slidekit::metrics::evaluate_texts(&c, &r, cfg.rouge_beta))
}

// ---------------------------------------------------------------- stageplan

#[derive(Clone, Debug, Serialize)]
pub struct StagePlanReport {
    pub plan: slidekit::schedule::StagePlan,
    /// Per trainable group, the learning rate at steps `0..=total_steps`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub lr_curve: BTreeMap<String, Vec<f64>>,
}

pub fn cmd_stageplan(cfg: &PipelineConfig, total_steps: Option<u64>) -> CliResult<StagePlanReport> {
    let plan = build_stage_plan(cfg.stage).map_err(|e| CliError::Config(e.to_string()))?;
    let mut lr_curve = BTreeMap::new();
    if let Some(total) = total_steps.filter(|&t| t > 0) {
        for g in plan.trainable() {
            let curve = (0..=total).map(|s| lr_at(&plan, g, s, total)).collect::<Result<Vec<_>, _>>();
            lr_curve.insert(g.as_str().to_string(), core("lr schedule", curve)?);
        }
    }
    Ok(StagePlanReport { plan, lr_curve })
}

pub fn render<T: Serialize>(value: &T) -> String {
    to_json(value)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    write_atomic(path, format!("{}\n", to_json(value)).as_bytes())
}
