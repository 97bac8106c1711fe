//! Layered pipeline configuration.
//!
//! Sources, lowest precedence first: built-in defaults, a flat `key = value`
//! file, `SLIDEKIT_<KEY>` environment variables, then command-line flags.
//! Blank lines and `#` comments are ignored in the file.
//!
//! | key                    | default              | range / values                    |
//! |------------------------|----------------------|-----------------------------------|
//! | `seed`                 | 0                    | u64                               |
//! | `threads`              | 0 (all cores)        | usize                             |
//! | `slide`                | (none)               | `.png` or raw + `.json` sidecar   |
//! | `manifest`             | `manifest.jsonl`     | path                              |
//! | `features`             | `regions.fmat`       | path                              |
//! | `feature_cache`        | `feature_cache`      | directory                         |
//! | `compressed`           | `compressed.fmat`    | path                              |
//! | `checkpoint`           | `compressor.tqck`    | path                              |
//! | `downsample`           | 32                   | 1..=1024                          |
//! | `saturation_threshold` | 0.08                 | [0, 1)                            |
//! | `min_tissue_fraction`  | 0.10                 | [0, 1)                            |
//! | `region_size`          | 2048                 | multiple of 4, ≥ 4                |
//! | `aggregation`          | `uniform`            | `uniform`, `scale_balanced`       |
//! | `num_queries`          | 1152                 | ≥ 1                               |
//! | `num_heads`            | 8                    | divides `model_dim`               |
//! | `model_dim`            | 256                  | ≥ 1                               |
//! | `classes`              | `tumor,stroma,normal`| comma list, ≥ 2 names             |
//! | `stage`                | 1                    | 1..=4                             |
//! | `rouge_beta`           | 1.2                  | > 0                               |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use slidekit::encoder::AggregationMode;

use crate::CliError;

pub const ENV_PREFIX: &str = "SLIDEKIT_";

const KEYS: [&str; 19] = [
    "seed",
    "threads",
    "slide",
    "manifest",
    "features",
    "feature_cache",
    "compressed",
    "checkpoint",
    "downsample",
    "saturation_threshold",
    "min_tissue_fraction",
    "region_size",
    "aggregation",
    "num_queries",
    "num_heads",
    "model_dim",
    "classes",
    "stage",
    "rouge_beta",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub slide: Option<PathBuf>,
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub feature_cache: PathBuf,
    pub compressed: PathBuf,
    pub checkpoint: PathBuf,
    pub downsample: u32,
    pub saturation_threshold: f64,
    pub min_tissue_fraction: f64,
    pub region_size: u32,
    pub aggregation: AggregationMode,
    pub num_queries: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub classes: Vec<String>,
    pub stage: u8,
    pub rouge_beta: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            slide: None,
            manifest: "manifest.jsonl".into(),
            features: "regions.fmat".into(),
            feature_cache: "feature_cache".into(),
            compressed: "compressed.fmat".into(),
            checkpoint: "compressor.tqck".into(),
            downsample: slidekit::tiler::DEFAULT_DOWNSAMPLE,
            saturation_threshold: slidekit::tiler::DEFAULT_SATURATION_THRESHOLD,
            min_tissue_fraction: slidekit::tiler::DEFAULT_MIN_TISSUE_FRACTION,
            region_size: slidekit::tiler::REGION_SIZE,
            aggregation: AggregationMode::Uniform,
            num_queries: slidekit::compressor::DEFAULT_NUM_QUERIES,
            num_heads: slidekit::compressor::DEFAULT_NUM_HEADS,
            model_dim: slidekit::compressor::DEFAULT_MODEL_DIM,
            classes: vec!["tumor".into(), "stroma".into(), "normal".into()],
            stage: 1,
            rouge_beta: slidekit::metrics::DEFAULT_ROUGE_BETA,
        }
    }
}

/// Raw string layers, merged in precedence order.
#[derive(Clone, Debug, Default)]
pub struct ConfigLayers {
    values: BTreeMap<String, String>,
}

impl ConfigLayers {
    fn set(&mut self, key: &str, value: String, origin: &str) -> Result<(), CliError> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("{origin}: unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn apply_file_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}:{}: expected `key = value`", origin.display(), n + 1)))?;
            self.set(k.trim(), v.trim().to_string(), &format!("{}:{}", origin.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_file_text(&text, path)
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, v, &k)?;
                }
            }
        }
        Ok(())
    }

    pub fn apply_flag(&mut self, key: &str, value: impl ToString) -> Result<(), CliError> {
        self.set(key, value.to_string(), "command line")
    }

    /// `key=value` pairs from repeated `--set` flags.
    pub fn apply_assignments(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{p}`")))?;
            self.apply_flag(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut c = PipelineConfig::default();
        for (k, v) in &self.values {
            let bad = |why: &str| CliError::Config(format!("{k} = `{v}`: {why}"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad("not a number"))?
                };
            }
            match k.as_str() {
                "seed" => c.seed = num!(),
                "threads" => c.threads = num!(),
                "slide" => c.slide = Some(v.into()),
                "manifest" => c.manifest = v.into(),
                "features" => c.features = v.into(),
                "feature_cache" => c.feature_cache = v.into(),
                "compressed" => c.compressed = v.into(),
                "checkpoint" => c.checkpoint = v.into(),
                "downsample" => c.downsample = num!(),
                "saturation_threshold" => c.saturation_threshold = num!(),
                "min_tissue_fraction" => c.min_tissue_fraction = num!(),
                "region_size" => c.region_size = num!(),
                "aggregation" => {
                    c.aggregation = match v.as_str() {
                        "uniform" => AggregationMode::Uniform,
                        "scale_balanced" => AggregationMode::ScaleBalanced,
                        _ => return Err(bad("expected uniform or scale_balanced")),
                    }
                }
                "num_queries" => c.num_queries = num!(),
                "num_heads" => c.num_heads = num!(),
                "model_dim" => c.model_dim = num!(),
                "classes" => {
                    c.classes = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                "stage" => c.stage = num!(),
                "rouge_beta" => c.rouge_beta = num!(),
                _ => unreachable!("keys are checked on insert"),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if !(1..=1024).contains(&self.downsample) {
            return fail(format!("downsample {} outside 1..=1024", self.downsample));
        }
        if !(0.0..1.0).contains(&self.saturation_threshold) {
            return fail(format!("saturation_threshold {} outside [0, 1)", self.saturation_threshold));
        }
        if !(0.0..1.0).contains(&self.min_tissue_fraction) {
            return fail(format!("min_tissue_fraction {} outside [0, 1)", self.min_tissue_fraction));
        }
        if self.region_size < 4 || !self.region_size.is_multiple_of(4) {
            return fail(format!("region_size {} must be a positive multiple of 4", self.region_size));
        }
        if self.num_queries == 0 || self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "compressor shape queries={} model_dim={} heads={} is invalid",
                self.num_queries, self.model_dim, self.num_heads
            ));
        }
        if self.classes.len() < 2 {
            return fail("classes needs at least two names".into());
        }
        if !(1..=4).contains(&self.stage) {
            return fail(format!("stage {} outside 1..=4", self.stage));
        }
        if !(self.rouge_beta > 0.0) {
            return fail(format!("rouge_beta {} must be positive", self.rouge_beta));
        }
        Ok(())
    }

    pub fn tiler(&self) -> slidekit::tiler::TilerConfig {
        slidekit::tiler::TilerConfig {
            downsample_factor: self.downsample,
            saturation_threshold: self.saturation_threshold,
            planner: slidekit::tiler::RegionPlanner {
                region_size: self.region_size,
                min_tissue_fraction: self.min_tissue_fraction,
                ..Default::default()
            },
        }
    }
}
