//! Run configuration, evaluation metrics and the end-to-end pipeline shared
//! by the command-line tool and the acceptance suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::padding_attention_mass;
use crate::data::{generate_synthetic, read_dataset, write_dataset, Dataset, GeneratorConfig, GroundingSample, QuestionKind};
use crate::error::{Error, Result};
use crate::guidance::{aggregate_attention, downsample_mask, mass_inside, BinaryGrid};
use crate::model::{argmax, Model, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::training::{train_stage, StageConfig, StepLog, TrainSettings};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "AGEVLM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub train_count: usize,
    pub heldout_count: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: "data/train".into(),
            heldout: "data/heldout".into(),
            train_count: 500,
            heldout_count: 100,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs/default".into(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            stages: StageConfig::schedule()[..4].to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.data.generator.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
            return Err(Error::Config("stage order must be strictly increasing".into()));
        }
        Ok(())
    }

    /// FNV-1a of the canonical serialized form with `out_dir` cleared, as 16 hex digits.
    pub fn hash(&self) -> Result<String> {
        let located = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = located.to_toml()?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(format!("{h:016x}"))
    }

    pub fn stage(&self, stage: u8) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// First top-level field whose value differs between two model configs.
pub fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Option<String> {
    let table = |c: &ModelConfig| -> BTreeMap<String, toml::Value> {
        match toml::Value::try_from(c) {
            Ok(toml::Value::Table(t)) => t.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    };
    let (a, b) = (table(expected), table(found));
    a.iter().find(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone())
}

/// `run_manifest.json` under `out`, recording the command, seed and config hash.
pub fn write_run_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.hash()?,
    });
    let path = out.join("run_manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Downsampled footprint of the queried shape, if it is present.
pub fn queried_mask(sample: &GroundingSample, grid: [usize; 2]) -> Result<Option<BinaryGrid>> {
    if let Some(m) = &sample.mask {
        return Ok(Some(m.down.clone()));
    }
    let full = sample.footprint()?;
    if full.is_empty() {
        return Ok(None);
    }
    downsample_mask(&full, grid).map(Some)
}

/// Next-token prediction at the end of the prompt, with the given image.
pub fn predict(model: &Model, prompt: &[usize], image: &crate::model::ImageGrid) -> Result<usize> {
    let vis = model.encode_image(image)?;
    Ok(argmax(&model.next_logits(prompt, Some(&vis))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// First answer token correct at the end of the prompt.
    pub accuracy: f64,
    pub yes_no_samples: usize,
    pub yes_no_accuracy: Option<f64>,
    pub where_samples: usize,
    pub where_accuracy: Option<f64>,
    /// Samples whose queried shape is present.
    pub mask_samples: usize,
    /// Mean over those samples and all cross-attention layers of the
    /// aggregated attention mass inside the downsampled footprint.
    pub mask_mass: Option<f64>,
    pub per_layer_mask_mass: Vec<f64>,
}

fn ratio(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

pub fn evaluate(model: &Model, samples: &[GroundingSample]) -> Result<EvalReport> {
    let grid = model.config().visual_grid;
    let n_layers = model.config().cross_attn_indices.len();
    let (mut hits, mut yn, mut yn_hits, mut wh, mut wh_hits) = (0, 0, 0, 0, 0);
    let mut mask_samples = 0;
    let mut per_layer = vec![0.0; n_layers];
    for s in samples {
        let vis = model.encode_image(&s.image)?;
        let out = model.forward(&s.prompt, Some(&vis), true)?;
        let correct = argmax(out.logits.row(s.prompt.len() - 1)) == s.answer();
        hits += correct as usize;
        match s.kind {
            QuestionKind::IsThere => {
                yn += 1;
                yn_hits += correct as usize;
            }
            QuestionKind::Where => {
                wh += 1;
                wh_hits += correct as usize;
            }
            QuestionKind::HowMany => {}
        }
        if let Some(mask) = queried_mask(s, grid)? {
            mask_samples += 1;
            for (l, rec) in out.records.iter().enumerate() {
                let p = aggregate_attention(rec, s.query_span, grid)?;
                per_layer[l] += mass_inside(&p, &mask);
            }
        }
    }
    let mask_mass = (mask_samples > 0).then(|| {
        per_layer.iter_mut().for_each(|m| *m /= mask_samples as f64);
        per_layer.iter().sum::<f64>() / n_layers as f64
    });
    if mask_mass.is_none() {
        per_layer.clear();
    }
    Ok(EvalReport {
        samples: samples.len(),
        accuracy: hits as f64 / samples.len().max(1) as f64,
        yes_no_samples: yn,
        yes_no_accuracy: ratio(yn_hits, yn),
        where_samples: wh,
        where_accuracy: ratio(wh_hits, wh),
        mask_samples,
        mask_mass,
        per_layer_mask_mass: per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub probes: usize,
    pub changed: usize,
    pub sensitivity: f64,
}

/// For each sample of `kind`, pairs it with the next sample (by id, wrapping)
/// that asks the same question but has a different answer, then checks
/// whether showing the partner's image changes the predicted answer.
pub fn image_swap_sensitivity(model: &Model, samples: &[GroundingSample], kind: QuestionKind) -> Result<SwapReport> {
    let mut pool: Vec<&GroundingSample> = samples.iter().filter(|s| s.kind == kind).collect();
    pool.sort_by_key(|s| s.id);
    let (mut probes, mut changed) = (0, 0);
    for (i, s) in pool.iter().enumerate() {
        let partner = (1..pool.len())
            .map(|k| pool[(i + k) % pool.len()])
            .find(|o| o.prompt == s.prompt && o.answer() != s.answer());
        let Some(other) = partner else { continue };
        probes += 1;
        let own = predict(model, &s.prompt, &s.image)?;
        let swapped = predict(model, &s.prompt, &other.image)?;
        changed += (own != swapped) as usize;
    }
    Ok(SwapReport {
        probes,
        changed,
        sensitivity: if probes == 0 { 0.0 } else { changed as f64 / probes as f64 },
    })
}

/// Mean padding mass of the aggregated query attention over samples and layers.
pub fn mean_padding_mass(model: &Model, ds: &Dataset) -> Result<f64> {
    let pad = ds.pad_region();
    let grid = model.config().visual_grid;
    let mut total = 0.0;
    let mut n = 0;
    for s in &ds.samples {
        let vis = model.encode_image(&s.image)?;
        let out = model.forward(&s.prompt, Some(&vis), true)?;
        for rec in &out.records {
            let p = aggregate_attention(rec, s.query_span, grid)?;
            total += padding_attention_mass(&p, &pad)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_to(dir: &Path, seed: u64, count: usize, cfg: &GeneratorConfig) -> Result<Dataset> {
    let ds = generate_synthetic(seed, count, cfg)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

pub struct PipelineOutcome {
    pub model: Model,
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub eval: EvalReport,
}

/// Generates train and held-out sets, trains every configured stage in
/// order from a fresh model, and evaluates on the held-out set. Writes
/// datasets, per-stage logs and checkpoints, `metrics.json` and the run
/// manifest under `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let train_dir = out.join(&cfg.data.train);
    let heldout_dir = out.join(&cfg.data.heldout);
    let mut gen = cfg.data.generator.clone();
    gen.split = "train".into();
    generate_to(&train_dir, cfg.seed, cfg.data.train_count, &gen)?;
    gen.split = "heldout".into();
    generate_to(&heldout_dir, cfg.seed.wrapping_add(1), cfg.data.heldout_count, &gen)?;
    let train = read_dataset(&train_dir)?;
    let heldout = read_dataset(&heldout_dir)?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for (k, stage) in cfg.stages.iter().enumerate() {
        let data = match &stage.dataset {
            Some(p) => read_dataset(&out.join(p))?,
            None => train.clone(),
        };
        let outcome = train_stage(
            &mut model,
            stage,
            &cfg.optimizer,
            &data,
            TrainSettings {
                seed: cfg.seed.wrapping_add(100 + k as u64),
                max_steps: None,
                out_dir: Some(out),
            },
        )?;
        logs.extend(outcome.log);
        checkpoints.extend(outcome.checkpoint);
    }
    let eval = evaluate(&model, &heldout.samples)?;
    write_metrics(&out.join("metrics.json"), &eval)?;
    write_run_manifest(out, "pipeline", cfg)?;
    Ok(PipelineOutcome {
        model,
        logs,
        checkpoints,
        eval,
    })
}

pub fn write_metrics(path: &Path, eval: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(eval).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
