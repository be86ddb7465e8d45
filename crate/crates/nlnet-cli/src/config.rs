//! Experiment configuration: a typed key-value TOML file, fully validated
//! before any computation runs. Unknown keys are rejected.

use crate::error::{CliError, CliResult};
use nlnet::backbone::{
    build_network, inflate, insert_nonlocal, InsertPolicy, Inflation, NetworkSpec,
    NonLocalSettings,
};
use nlnet::data::{SyntheticTask, TaskKind};
use nlnet::mask::MaskMode;
use nlnet::pairwise::PairwiseKind;
use nlnet::tape::TimePad;
use nlnet::train::TrainConfig;
use nlnet::Network64;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub network: NetworkSection,
    pub task: TaskSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub matrix: Option<MatrixSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: String,
    #[serde(default = "default_none")]
    pub inflation: String,
    #[serde(default = "default_zero_pad")]
    pub time_pad: String,
    #[serde(default = "default_none")]
    pub policy: String,
    #[serde(default = "default_one_f64")]
    pub width_scale: f64,
    #[serde(default = "default_one_f64")]
    pub depth_scale: f64,
    #[serde(default)]
    pub nonlocal: NonLocalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonLocalSection {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_mask")]
    pub mask: String,
    #[serde(default = "default_one_usize")]
    pub subsample: usize,
    #[serde(default = "default_true")]
    pub use_bn: bool,
    #[serde(default)]
    pub bottleneck: Option<usize>,
}

impl Default for NonLocalSection {
    fn default() -> Self {
        NonLocalSection {
            kind: default_kind(),
            mask: default_mask(),
            subsample: 1,
            use_bn: true,
            bottleneck: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: String,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_train_items")]
    pub train_items: usize,
    #[serde(default = "default_val_items")]
    pub val_items: usize,
    #[serde(default)]
    pub cache_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_decay_at")]
    pub decay_at: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_bn_mode")]
    pub bn: String,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_one_usize")]
    pub clips_per_item: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            iterations: default_iterations(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            decay_at: default_decay_at(),
            dropout: default_dropout(),
            bn: default_bn_mode(),
            eval_every: default_eval_every(),
            clips_per_item: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    #[serde(default)]
    pub kinds: Vec<String>,
    #[serde(default)]
    pub policies: Vec<String>,
}

fn default_none() -> String {
    "none".into()
}
fn default_zero_pad() -> String {
    "zero".into()
}
fn default_kind() -> String {
    "embedded_gaussian".into()
}
fn default_mask() -> String {
    "spacetime".into()
}
fn default_one_f64() -> f64 {
    1.0
}
fn default_one_usize() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_frames() -> usize {
    8
}
fn default_side() -> usize {
    32
}
fn default_sigma() -> f64 {
    0.05
}
fn default_train_items() -> usize {
    512
}
fn default_val_items() -> usize {
    256
}
fn default_iterations() -> usize {
    5000
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_decay_at() -> Vec<usize> {
    vec![3000, 4500]
}
fn default_dropout() -> f64 {
    0.5
}
fn default_bn_mode() -> String {
    "batch".into()
}
fn default_eval_every() -> usize {
    500
}

/// A fully validated experiment: everything needed to build, train, and
/// evaluate one model.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub file: FileConfig,
    pub seed: u64,
    pub task: SyntheticTask,
    pub train_cfg: TrainConfig,
    pub policy: Option<InsertPolicy>,
    pub settings: NonLocalSettings,
    pub inflation: Inflation,
}

pub fn parse_file(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    parse_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn parse_str(text: &str) -> Result<FileConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

impl FileConfig {
    /// Validate and resolve into a concrete experiment. `seed_override`
    /// comes from the command line.
    pub fn resolve(&self, seed_override: Option<u64>) -> CliResult<Experiment> {
        let seed = seed_override.unwrap_or(self.seed);
        let task_kind = match self.task.kind.as_str() {
            "delayed_match" => TaskKind::DelayedMatch,
            "direction_of_travel" => TaskKind::DirectionOfTravel,
            other => return Err(CliError::config(format!("task.kind: unknown value '{other}'"))),
        };
        let task = match task_kind {
            TaskKind::DelayedMatch => SyntheticTask::delayed_match(
                self.task.frames,
                self.task.height,
                self.task.width,
                self.task.noise_sigma,
                seed,
            ),
            TaskKind::DirectionOfTravel => SyntheticTask::direction_of_travel(
                self.task.frames,
                self.task.height,
                self.task.width,
                self.task.noise_sigma,
                seed,
            ),
        };
        task.validate().map_err(CliError::from)?;
        if self.task.train_items == 0 || self.task.val_items == 0 {
            return Err(CliError::config("task.train_items and task.val_items must be >= 1"));
        }

        let inflation = match self.network.inflation.as_str() {
            "none" => Inflation::None,
            "i3d_3x3x3" => Inflation::I3d3x3x3,
            "i3d_3x1x1" => Inflation::I3d3x1x1,
            other => {
                return Err(CliError::config(format!(
                    "network.inflation: unknown value '{other}'"
                )))
            }
        };
        let policy = match self.network.policy.as_str() {
            "none" => None,
            p => Some(InsertPolicy::parse(p).map_err(CliError::from)?),
        };
        let settings = self.network.nonlocal.resolve()?;
        let bn_frozen = match self.train.bn.as_str() {
            "batch" => false,
            "frozen" => true,
            other => return Err(CliError::config(format!("train.bn: unknown value '{other}'"))),
        };
        let train_cfg = TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            decay_iters: self.train.decay_at.clone(),
            dropout: self.train.dropout,
            bn_frozen,
            eval_every: self.train.eval_every,
            clips_per_item: self.train.clips_per_item,
            seed,
        };
        train_cfg.validate().map_err(CliError::from)?;
        // reject nonsense early: preset and scales
        self.network_spec(&task)?;
        Ok(Experiment {
            file: self.clone(),
            seed,
            task,
            train_cfg,
            policy,
            settings,
            inflation,
        })
    }

    pub fn network_spec(&self, task: &SyntheticTask) -> CliResult<NetworkSpec> {
        let mut spec = match self.network.preset.as_str() {
            "desk" => NetworkSpec::desk(task.channels, task.num_classes),
            "desk_deeper" => NetworkSpec::desk_deeper(task.channels, task.num_classes),
            "full" => NetworkSpec::full_scale(task.channels, task.num_classes),
            "micro" => NetworkSpec::micro(task.channels, task.num_classes),
            other => {
                return Err(CliError::config(format!(
                    "network.preset: unknown value '{other}' (want desk|desk_deeper|full|micro)"
                )))
            }
        };
        spec.time_pad = match self.network.time_pad.as_str() {
            "zero" => TimePad::Zero,
            "replicate" => TimePad::Replicate,
            other => {
                return Err(CliError::config(format!(
                    "network.time_pad: unknown value '{other}'"
                )))
            }
        };
        spec = spec
            .scaled(self.network.width_scale, self.network.depth_scale)
            .map_err(CliError::from)?;
        Ok(spec)
    }
}

impl NonLocalSection {
    pub fn resolve(&self) -> CliResult<NonLocalSettings> {
        let kind = parse_kind(&self.kind)?;
        let mask = match self.mask.as_str() {
            "spacetime" => MaskMode::Spacetime,
            "space_only" => MaskMode::SpaceOnly,
            "time_only" => MaskMode::TimeOnly,
            other => {
                return Err(CliError::config(format!(
                    "nonlocal.mask: unknown value '{other}'"
                )))
            }
        };
        Ok(NonLocalSettings {
            kind,
            mask,
            subsample_spatial: self.subsample,
            use_bn_on_wz: self.use_bn,
            bottleneck: self.bottleneck,
        })
    }
}

pub fn parse_kind(s: &str) -> CliResult<PairwiseKind> {
    Ok(match s {
        "gaussian" => PairwiseKind::Gaussian,
        "embedded_gaussian" => PairwiseKind::EmbeddedGaussian,
        "dot_product" => PairwiseKind::DotProduct,
        "concatenation" => PairwiseKind::Concatenation,
        other => {
            return Err(CliError::config(format!(
                "nonlocal.kind: unknown value '{other}'"
            )))
        }
    })
}

impl Experiment {
    /// Build the (possibly inflated, possibly non-local) network. Backbone
    /// parameters come from the master seed; inserted block parameters come
    /// from a derived stream so paired configs share the backbone exactly.
    pub fn build(&self) -> CliResult<Network64> {
        let spec = self.file.network_spec(&self.task)?;
        let net: Network64 = build_network(&spec, 1.0, 1.0, self.seed).map_err(CliError::from)?;
        let net = match self.inflation {
            Inflation::None => net,
            v => inflate(&net, v).map_err(CliError::from)?,
        };
        let net = match &self.policy {
            None => net,
            Some(p) => insert_nonlocal(&net, p, &self.settings, self.seed.wrapping_add(0x6e6c)).map_err(CliError::from)?,
        };
        Ok(net)
    }

    /// Effective config re-rendered as TOML (written into the run directory).
    pub fn render_config(&self) -> CliResult<String> {
        toml::to_string_pretty(&self.file)
            .map_err(|e| CliError::config(format!("config render: {e}")))
    }
}
