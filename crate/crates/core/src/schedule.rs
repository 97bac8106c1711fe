//! Four-stage training plan: which parameter groups train in each stage,
//! at what learning rate, with which data mix; cosine schedule with linear
//! warmup; and the stage-4 patch/WSI mixing sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroupName {
    VisionTower,
    ProjectorMlp,
    WsiProjector,
    LlmBody,
}

impl ParamGroupName {
    pub const ALL: [ParamGroupName; 4] = [
        ParamGroupName::VisionTower,
        ParamGroupName::ProjectorMlp,
        ParamGroupName::WsiProjector,
        ParamGroupName::LlmBody,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroupName::VisionTower => "vision_tower",
            ParamGroupName::ProjectorMlp => "projector_mlp",
            ParamGroupName::WsiProjector => "wsi_projector",
            ParamGroupName::LlmBody => "llm_body",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: ParamGroupName,
    /// Ignored when `frozen`.
    pub learning_rate: f64,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    pub groups: Vec<ParamGroup>,
    pub epochs: u32,
    pub warmup_ratio: f64,
    pub lr_schedule: LrSchedule,
    pub data_mix: BTreeMap<String, f64>,
}

/// Stage-4 share of patch-level samples in each batch.
pub const STAGE4_PATCH_FRACTION: f64 = 0.15;

type StageRow = (&'static [(ParamGroupName, f64)], u32, f64, &'static [(&'static str, f64)]);

/// Builds the freeze/learning-rate plan for stage 1..=4:
///
/// | stage | trainable (lr)                                              | warmup |
/// |-------|-------------------------------------------------------------|--------|
/// | 1     | projector_mlp 1e-3                                          | 0.03   |
/// | 2     | vision_tower 2e-6, projector_mlp 1e-5, llm_body 1e-5         | 0.03   |
/// | 3     | wsi_projector 5e-6                                          | 0.1    |
/// | 4     | vision_tower 2e-6, projector_mlp / wsi_projector / llm_body 1e-5 | 0.1 |
pub fn build_stage_plan(stage: u8) -> Result<StagePlan> {
    use ParamGroupName::*;
    let (rates, epochs, warmup, mix): StageRow = match stage {
        1 => (&[(ProjectorMlp, 1e-3)], 1, 0.03, &[("patch_caption", 1.0)]),
        2 => (
            &[(VisionTower, 2e-6), (ProjectorMlp, 1e-5), (LlmBody, 1e-5)],
            1,
            0.03,
            &[("patch_instruct", 1.0)],
        ),
        3 => (&[(WsiProjector, 5e-6)], 1, 0.1, &[("wsi_report", 1.0)]),
        4 => (
            &[(VisionTower, 2e-6), (ProjectorMlp, 1e-5), (WsiProjector, 1e-5), (LlmBody, 1e-5)],
            5,
            0.1,
            &[("patch_instruct", STAGE4_PATCH_FRACTION), ("wsi_instruct", 1.0 - STAGE4_PATCH_FRACTION)],
        ),
        other => return Err(Error::InvalidStage(other)),
    };
    let groups = ParamGroupName::ALL
        .into_iter()
        .map(|name| match rates.iter().find(|(n, _)| *n == name) {
            Some(&(_, lr)) => ParamGroup { name, learning_rate: lr, frozen: false },
            None => ParamGroup { name, learning_rate: 0.0, frozen: true },
        })
        .collect();
    Ok(StagePlan {
        stage,
        groups,
        epochs,
        warmup_ratio: warmup,
        lr_schedule: LrSchedule::Cosine,
        data_mix: mix.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
    })
}

impl StagePlan {
    pub fn group(&self, name: ParamGroupName) -> &ParamGroup {
        self.groups.iter().find(|g| g.name == name).expect("plans list every group")
    }

    pub fn trainable(&self) -> BTreeSet<ParamGroupName> {
        self.groups.iter().filter(|g| !g.frozen).map(|g| g.name).collect()
    }

    /// `ceil(warmup_ratio * total_steps)`
    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        (self.warmup_ratio * total_steps as f64).ceil() as u64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Linear warmup to the group's base rate over `ceil(warmup_ratio·total)`
/// steps, then cosine decay to zero at `total_steps`.
pub fn lr_at(plan: &StagePlan, group: ParamGroupName, step: u64, total_steps: u64) -> Result<f64> {
    let g = plan.group(group);
    if g.frozen {
        return Err(Error::FrozenGroup(group.as_str().to_string()));
    }
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidParameter(format!("step {step} outside 0..={total_steps}")));
    }
    let base = g.learning_rate;
    let warmup = plan.warmup_steps(total_steps);
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(if step == total_steps { 0.0 } else { base });
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Patch,
    Wsi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Each slot is patch-level with probability `patch_fraction`.
    #[default]
    PerDraw,
    /// Each batch holds exactly `round(patch_fraction·batch)` patch slots at
    /// shuffled positions.
    Quota,
}

/// Single-owner sampler; use one per data-loader shard with derived seeds.
#[derive(Clone, Debug)]
pub struct MixSampler {
    pub seed: u64,
    pub patch_pool_size: usize,
    pub wsi_pool_size: usize,
    pub patch_fraction: f64,
    pub mode: MixMode,
    rng: ChaCha8Rng,
}

impl MixSampler {
    pub fn new(seed: u64, patch_pool_size: usize, wsi_pool_size: usize, patch_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&patch_fraction) {
            return Err(Error::InvalidParameter(format!("patch fraction {patch_fraction} outside [0, 1]")));
        }
        Ok(Self {
            seed,
            patch_pool_size,
            wsi_pool_size,
            patch_fraction,
            mode: MixMode::PerDraw,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn stage4(seed: u64, patch_pool_size: usize, wsi_pool_size: usize) -> Result<Self> {
        Self::new(seed, patch_pool_size, wsi_pool_size, STAGE4_PATCH_FRACTION)
    }

    pub fn with_mode(mut self, mode: MixMode) -> Self {
        self.mode = mode;
        self
    }

    fn draw_index(&mut self, source: DataSource) -> Result<(DataSource, usize)> {
        let (pool, name) = match source {
            DataSource::Patch => (self.patch_pool_size, "patch"),
            DataSource::Wsi => (self.wsi_pool_size, "wsi"),
        };
        if pool == 0 {
            return Err(Error::EmptyPool(name));
        }
        Ok((source, self.rng.random_range(0..pool)))
    }

    pub fn sample_mixed_batch(&mut self, batch_size: usize) -> Result<Vec<(DataSource, usize)>> {
        let sources: Vec<DataSource> = match self.mode {
            MixMode::PerDraw => (0..batch_size)
                .map(|_| {
                    if self.rng.random::<f64>() < self.patch_fraction {
                        DataSource::Patch
                    } else {
                        DataSource::Wsi
                    }
                })
                .collect(),
            MixMode::Quota => {
                let patches = (self.patch_fraction * batch_size as f64).round() as usize;
                let mut s: Vec<DataSource> = (0..batch_size)
                    .map(|i| if i < patches { DataSource::Patch } else { DataSource::Wsi })
                    .collect();
                s.shuffle(&mut self.rng);
                s
            }
        };
        sources.into_iter().map(|s| self.draw_index(s)).collect()
    }
}

pub fn sample_mixed_batch(sampler: &mut MixSampler, batch_size: usize) -> Result<Vec<(DataSource, usize)>> {
    sampler.sample_mixed_batch(batch_size)
}

const STORE_MAGIC: [u8; 4] = *b"PGCK";

/// Desk-scale stand-in for the full model: one flat parameter vector per
/// group. Only the groups a stage unfreezes are ever updated.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub stage: u8,
    pub step: u64,
    pub groups: BTreeMap<ParamGroupName, Vec<f64>>,
}

impl ParameterStore {
    pub fn new(groups: BTreeMap<ParamGroupName, Vec<f64>>) -> Self {
        Self { stage: 0, step: 0, groups }
    }

    /// One SGD step at the scheduled learning rate of each trainable group.
    /// Gradients for frozen groups are ignored.
    pub fn sgd_step(&mut self, plan: &StagePlan, grads: &BTreeMap<ParamGroupName, Vec<f64>>, total_steps: u64) -> Result<()> {
        for name in plan.trainable() {
            let lr = lr_at(plan, name, self.step, total_steps)?;
            let (Some(p), Some(g)) = (self.groups.get_mut(&name), grads.get(&name)) else {
                continue;
            };
            if p.len() != g.len() {
                return Err(Error::shape("group gradient", p.len(), g.len()));
            }
            p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
        }
        self.stage = plan.stage;
        self.step += 1;
        Ok(())
    }

    /// Binary checkpoint tagged with stage and step; values stored as `f64`
    /// so a round trip is bit-exact.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&STORE_MAGIC);
        buf.push(self.stage);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, values) in &self.groups {
            let s = name.as_str().as_bytes();
            buf.push(s.len() as u8);
            buf.extend_from_slice(s);
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| Error::Format("truncated parameter checkpoint".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != STORE_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let stage = take(1)?[0];
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut groups = BTreeMap::new();
        for _ in 0..count {
            let len = take(1)?[0] as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| Error::Format("bad group name".into()))?;
            let name = ParamGroupName::parse(name).ok_or_else(|| Error::Format(format!("unknown group {name}")))?;
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let bytes = take(n.checked_mul(8).ok_or_else(|| Error::Format("group too large".into()))?)?;
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            groups.insert(name, values);
        }
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes in parameter checkpoint".into()));
        }
        Ok(Self { stage, step, groups })
    }
}
