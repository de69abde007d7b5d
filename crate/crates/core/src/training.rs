//! Four-stage freeze schedule, the mini-batch training loop and checkpoints.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::guidance::{combined_loss, LossOptions, LossReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{adamw_step, lr_schedule, AdamHyper, AdamState, OptimizerConfig};
use crate::params::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTraining {
    Frozen,
    FinalBlock,
    Whole,
}

/// The two ways of running the last stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// LM loss only.
    #[serde(rename = "age-vlm")]
    AgeVlm,
    /// LM loss plus guidance on the masked subset.
    #[serde(rename = "age-vlm-lm")]
    AgeVlmLm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::AgeVlm => "age-vlm",
            Variant::AgeVlmLm => "age-vlm-lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "age-vlm" => Ok(Variant::AgeVlm),
            "age-vlm-lm" => Ok(Variant::AgeVlmLm),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected age-vlm or age-vlm-lm)"
            ))),
        }
    }
}

/// Parameter groups that a stage freezes or trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    VisionEncoder,
    /// Final block of the vision encoder; a subset of `VisionEncoder`.
    VisionEncoderFinal,
    Adapter,
    LlmCrossAttn,
    LlmSelfAttn,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::VisionEncoder => "vision_encoder",
            ParamGroup::VisionEncoderFinal => "vision_encoder.final",
            ParamGroup::Adapter => "adapter",
            ParamGroup::LlmCrossAttn => "llm_cross_attn",
            ParamGroup::LlmSelfAttn => "llm_self_attn",
        })
    }
}

/// Most specific group of a dotted parameter path.
pub fn param_group(name: &str) -> Result<ParamGroup> {
    if name.starts_with(Model::ENCODER_FINAL_PREFIX) {
        return Ok(ParamGroup::VisionEncoderFinal);
    }
    if name.starts_with("encoder.") {
        return Ok(ParamGroup::VisionEncoder);
    }
    if name.starts_with("adapter.") {
        return Ok(ParamGroup::Adapter);
    }
    if let Some(rest) = name.strip_prefix("layers.") {
        let (index, tail) = rest
            .split_once('.')
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if index.parse::<usize>().is_err() {
            return Err(Error::UnknownParameter(name.into()));
        }
        return Ok(if tail.starts_with("cross_") {
            ParamGroup::LlmCrossAttn
        } else {
            ParamGroup::LlmSelfAttn
        });
    }
    if ["embed.", "final_norm.", "lm_head."]
        .iter()
        .any(|p| name.starts_with(p))
    {
        return Ok(ParamGroup::LlmSelfAttn);
    }
    Err(Error::UnknownParameter(name.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    #[serde(default)]
    pub variant: Option<Variant>,
    pub vision_encoder: EncoderTraining,
    pub adapter: bool,
    pub llm_cross_attn: bool,
    pub llm_self_attn: bool,
    pub use_lm_loss: bool,
    pub use_guidance_loss: bool,
    /// Restrict the LM loss to answer tokens.
    #[serde(default)]
    pub answer_only: bool,
    /// Ablation switch: keeps the row but never evaluates guidance.
    #[serde(default)]
    pub guidance_disabled: bool,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "one")]
    pub epochs: usize,
}

fn one() -> usize {
    1
}

impl StageConfig {
    /// The schedule row for `stage` (and `variant`, required for stage 4 only).
    pub fn row(stage: u8, variant: Option<Variant>) -> Result<Self> {
        let base = |vision_encoder, llm_self_attn, guidance, answer_only| StageConfig {
            stage,
            variant,
            vision_encoder,
            adapter: true,
            llm_cross_attn: true,
            llm_self_attn,
            use_lm_loss: true,
            use_guidance_loss: guidance,
            answer_only,
            guidance_disabled: false,
            dataset: None,
            epochs: 1,
        };
        use EncoderTraining::*;
        match (stage, variant) {
            (1, None) => Ok(base(Frozen, false, false, false)),
            (2, None) => Ok(base(FinalBlock, false, false, false)),
            (3, None) => Ok(base(FinalBlock, false, true, false)),
            (4, Some(Variant::AgeVlm)) => Ok(base(Whole, true, false, true)),
            (4, Some(Variant::AgeVlmLm)) => Ok(base(Whole, true, true, true)),
            (4, None) => Err(Error::Config("stage 4 needs a variant".into())),
            (1..=3, Some(_)) => Err(Error::Config(format!(
                "stage {stage} takes no variant"
            ))),
            _ => Err(Error::Config(format!("stage must be 1..=4, got {stage}"))),
        }
    }

    /// All five rows in schedule order.
    pub fn schedule() -> Vec<StageConfig> {
        [
            (1, None),
            (2, None),
            (3, None),
            (4, Some(Variant::AgeVlm)),
            (4, Some(Variant::AgeVlmLm)),
        ]
        .into_iter()
        .map(|(s, v)| StageConfig::row(s, v).expect("schedule rows are valid"))
        .collect()
    }

    /// Checks that the freeze and loss columns equal the schedule row.
    pub fn validate(&self) -> Result<()> {
        let row = StageConfig::row(self.stage, self.variant)?;
        let same = self.vision_encoder == row.vision_encoder
            && self.adapter == row.adapter
            && self.llm_cross_attn == row.llm_cross_attn
            && self.llm_self_attn == row.llm_self_attn
            && self.use_lm_loss == row.use_lm_loss
            && self.use_guidance_loss == row.use_guidance_loss;
        if !same {
            return Err(Error::Config(format!(
                "{} does not match its schedule row",
                self.label()
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.variant {
            Some(v) => format!("stage{}-{}", self.stage, v.name()),
            None => format!("stage{}", self.stage),
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::VisionEncoder => self.vision_encoder == EncoderTraining::Whole,
            ParamGroup::VisionEncoderFinal => self.vision_encoder != EncoderTraining::Frozen,
            ParamGroup::Adapter => self.adapter,
            ParamGroup::LlmCrossAttn => self.llm_cross_attn,
            ParamGroup::LlmSelfAttn => self.llm_self_attn,
        }
    }

    pub fn guidance_active(&self) -> bool {
        self.use_guidance_loss && !self.guidance_disabled
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            use_lm_loss: self.use_lm_loss,
            guidance_active: self.guidance_active(),
            answer_only: self.answer_only,
        }
    }
}

/// Sets every parameter's trainable flag from its group.
pub fn apply_freeze(model: &mut Model, stage: &StageConfig) -> Result<()> {
    stage.validate()?;
    for p in model.params.iter_mut() {
        p.trainable = stage.is_trainable(param_group(&p.name)?);
    }
    Ok(())
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "step,stage,lm_loss,guidance_loss,total,guided_fraction";

pub fn write_log_csv(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.stage,
            r.report.lm_loss,
            r.report.guidance_loss,
            r.report.total,
            r.report.guided_fraction()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct StageOutcome {
    pub log: Vec<StepLog>,
    pub checkpoint: Option<PathBuf>,
}

/// Settings of a training run that are not part of the schedule row.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings<'a> {
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Directory that receives `<label>.csv` and the `<label>` checkpoint.
    pub out_dir: Option<&'a Path>,
}

impl Default for TrainSettings<'_> {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            max_steps: None,
            out_dir: None,
        }
    }
}

fn frozen_fingerprint(model: &Model) -> u64 {
    model.params.fingerprint(|p: &Parameter| !p.trainable)
}

/// Runs one stage: applies its freeze mask, then `epochs` passes of
/// seeded mini-batch AdamW steps.
pub fn train_stage(
    model: &mut Model,
    stage: &StageConfig,
    opt: &OptimizerConfig,
    data: &Dataset,
    settings: TrainSettings<'_>,
) -> Result<StageOutcome> {
    opt.validate()?;
    apply_freeze(model, stage)?;
    if data.samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let label = stage.label();
    let frozen = frozen_fingerprint(model);
    let per_epoch = data.samples.len().div_ceil(opt.batch_size);
    let mut total = stage.epochs * per_epoch;
    if let Some(m) = settings.max_steps {
        total = total.min(m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    let options = stage.loss_options();

    'epochs: for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            if step == total {
                break 'epochs;
            }
            step += 1;
            let batch: Vec<_> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let out = combined_loss(model, &batch, options, true)?;
            if !out.report.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            for (id, grad) in out.grads.into_iter().enumerate() {
                model.params.get_mut(id).value.grad = grad;
            }
            let lr = lr_schedule(step, total, opt);
            adamw_step(&mut model.params, &mut state, &AdamHyper::from_config(opt, lr), step)?;
            log::debug!(
                "{label} epoch {epoch} step {step}/{total}: total {:.5}",
                out.report.total
            );
            log.push(StepLog {
                step,
                stage: label.clone(),
                lr,
                report: out.report,
            });
        }
        if frozen_fingerprint(model) != frozen {
            return Err(Error::FreezeViolation(label));
        }
    }
    if frozen_fingerprint(model) != frozen {
        return Err(Error::FreezeViolation(label));
    }

    let checkpoint = match settings.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_log_csv(&dir.join(format!("{label}.csv")), &log)?;
            let path = dir.join(&label);
            save_checkpoint(model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(StageOutcome { log, checkpoint })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    parameters: Vec<ManifestEntry>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_CONFIG: &str = "config.toml";

/// Writes `manifest.json`, `config.toml` and one tensor file per parameter.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let tensors = dir.join("params");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut parameters = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let file = format!("params/{}.aget", p.name);
        let path = dir.join(&file);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&p.value.to_binary()).map_err(|e| Error::io(&path, e))?;
        parameters.push(ManifestEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = serde_json::to_string_pretty(&CheckpointManifest { parameters })
        .map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let config = toml::to_string(model.config()).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join(CHECKPOINT_CONFIG);
    fs::write(&path, config).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(CHECKPOINT_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Rebuilds a model from a checkpoint directory. All parameters come back
/// trainable.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let config = load_checkpoint_config(dir)?;
    let mut model = Model::new(config, 0)?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut seen = vec![false; model.params.len()];
    for entry in &manifest.parameters {
        let bad = |msg: String| Error::Checkpoint {
            name: entry.name.clone(),
            msg,
        };
        let id = model.params.id(&entry.name)?;
        let expected = model.params.get(id).value.shape().to_vec();
        if entry.shape != expected {
            return Err(bad(format!(
                "manifest shape {:?}, model expects {expected:?}",
                entry.shape
            )));
        }
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let mut reader = bytes.as_slice();
        let tensor = Tensor::read_binary(&mut reader).map_err(|e| bad(e.to_string()))?;
        if !reader.is_empty() {
            return Err(bad(format!("{} trailing bytes", reader.len())));
        }
        if tensor.shape() != expected.as_slice() {
            return Err(bad(format!(
                "tensor file shape {:?}, model expects {expected:?}",
                tensor.shape()
            )));
        }
        let p = model.params.get_mut(id);
        p.value = tensor;
        p.trainable = true;
        seen[id] = true;
    }
    if let Some(id) = seen.iter().position(|&s| !s) {
        return Err(Error::Checkpoint {
            name: model.params.get(id).name.clone(),
            msg: "missing from manifest".into(),
        });
    }
    Ok(model)
}
