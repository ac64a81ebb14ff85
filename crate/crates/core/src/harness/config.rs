//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{synth_dataset, Dataset, Role, SynthSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::ibpi::InterpolationMode;
use crate::learners::{Distance, EvalSettings, InnerLoop, LearnerKind};
use crate::objective::WeightMode;
use crate::tensor::Network;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Vanilla,
    Ibp,
    Ibpi,
    MixupInput,
    MixupEmbedding,
    IbpiNoBoundLoss,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Vanilla => "vanilla",
            Objective::Ibp => "ibp",
            Objective::Ibpi => "ibpi",
            Objective::MixupInput => "mixup_input",
            Objective::MixupEmbedding => "mixup_embedding",
            Objective::IbpiNoBoundLoss => "ibpi_no_bound_loss",
        }
    }

    /// Whether the bound losses enter the training objective.
    pub fn bound_losses(self) -> bool {
        !matches!(self, Objective::Vanilla | Objective::IbpiNoBoundLoss)
    }

    /// Whether bounds are propagated at all during training.
    pub fn propagates_bounds(self) -> bool {
        self != Objective::Vanilla
    }

    pub fn interpolation(self) -> Option<InterpolationMode> {
        match self {
            Objective::Vanilla | Objective::Ibp => None,
            Objective::Ibpi => Some(InterpolationMode::Ibpi),
            Objective::MixupInput => Some(InterpolationMode::MixupInput),
            Objective::MixupEmbedding => Some(InterpolationMode::MixupEmbedding),
            Objective::IbpiNoBoundLoss => Some(InterpolationMode::IbpiNoBoundLoss),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub arch: Arch,
    /// Hidden widths of the fully-connected network.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output width for metric learners. Classifiers always output one
    /// logit per training way.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Number of blocks in the embedding prefix.
    pub split_block: usize,
}

fn default_channels() -> usize {
    32
}

fn default_blocks() -> usize {
    4
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            arch: Arch::Mlp,
            hidden: vec![64, 64],
            embed_dim: Some(32),
            channels: default_channels(),
            blocks: default_blocks(),
            split_block: 1,
        }
    }
}

/// Where the three class pools come from. Synthetic pools draw all
/// classes from one stream and split them in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth {
        per_class: usize,
        shape: Vec<usize>,
        class_separation: f64,
        noise_scale: f64,
        seed: u64,
        #[serde(default)]
        informative_dims: Option<usize>,
        #[serde(default)]
        nuisance_scale: Option<f64>,
        #[serde(default)]
        map_seed: Option<u64>,
        train_classes: usize,
        validation_classes: usize,
        test_classes: usize,
    },
    Files {
        train: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
        test: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            per_class: 40,
            shape: vec![32],
            class_separation: 1.0,
            noise_scale: 1.0,
            seed: 0,
            informative_dims: Some(8),
            nuisance_scale: Some(1.0),
            map_seed: None,
            train_classes: 12,
            validation_classes: 8,
            test_classes: 12,
        }
    }
}

/// Train, validation and test pools.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

impl DataConfig {
    /// Generator settings of a synthetic pool covering all three splits.
    pub fn synth_spec(&self) -> Option<SynthSpec> {
        match self {
            DataConfig::Synth {
                per_class,
                shape,
                class_separation,
                noise_scale,
                seed,
                informative_dims,
                nuisance_scale,
                map_seed,
                train_classes,
                validation_classes,
                test_classes,
            } => {
                let mut spec = SynthSpec::new(
                    train_classes + validation_classes + test_classes,
                    *per_class,
                    shape.clone(),
                    *class_separation,
                    *noise_scale,
                    *seed,
                );
                spec.informative_dims = *informative_dims;
                spec.nuisance_scale = *nuisance_scale;
                spec.map_seed = *map_seed;
                Some(spec)
            }
            DataConfig::Files { .. } => None,
        }
    }

    pub fn load(&self) -> Result<Splits> {
        match self {
            DataConfig::Synth {
                train_classes,
                validation_classes,
                test_classes,
                ..
            } => {
                let spec = self.synth_spec().expect("synthetic config");
                let all = synth_dataset(&spec, Role::Train)?;
                let (tr, va) = (*train_classes, *validation_classes);
                Ok(Splits {
                    train: all.subset(0..tr, Role::Train)?,
                    validation: (va > 0).then(|| all.subset(tr..tr + va, Role::Validation)).transpose()?,
                    test: all.subset(tr + va..tr + va + test_classes, Role::Test)?,
                })
            }
            DataConfig::Files { train, validation, test } => Ok(Splits {
                train: Dataset::load(train)?,
                validation: validation.as_ref().map(Dataset::load).transpose()?,
                test: Dataset::load(test)?,
            }),
        }
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learner: LearnerKind,
    pub objective: Objective,
    pub seed: u64,
    /// Number of optimizer steps `T`.
    pub steps: usize,
    /// Target perturbation radius.
    pub epsilon: f64,
    /// Loss weighting; `None` selects dynamic weights with the learner's
    /// default temperature.
    pub weighting: Option<WeightMode>,
    pub alpha: f64,
    pub beta: f64,
    /// Tasks per meta-update.
    pub meta_batch: usize,
    /// Outer (or ProtoNet) learning rate.
    pub lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub eval_steps: usize,
    pub first_order: bool,
    /// Query bound losses through the adapted parameters rather than the
    /// meta-parameters.
    pub bounds_on_adapted: bool,
    /// One `(λ, ν)` draw per class for both support and query.
    pub shared_mix: bool,
    pub distance: Distance,
    /// Per-step interpolation probability for ProtoNet.
    pub interpolation_prob: f64,
    pub network: NetworkConfig,
    pub train_task: TaskSpec,
    pub eval_task: TaskSpec,
    /// Validation every this many steps; 0 disables it.
    pub validation_every: usize,
    pub validation_tasks: usize,
    pub eval_tasks: usize,
    /// Metrics row every this many steps.
    pub log_every: usize,
    pub data: DataConfig,
    pub out: Option<PathBuf>,
    pub sweep: Option<SweepConfig>,
}

/// Grid over objectives, learners and seeds around one base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub learners: Vec<LearnerKind>,
    pub objectives: Vec<Objective>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learner: LearnerKind::ProtoNet,
            objective: Objective::Vanilla,
            seed: 0,
            steps: 1000,
            epsilon: 0.1,
            weighting: None,
            alpha: 0.5,
            beta: 0.5,
            meta_batch: 4,
            lr: 0.001,
            inner_lr: 0.01,
            inner_steps: 5,
            eval_steps: 10,
            first_order: true,
            bounds_on_adapted: true,
            shared_mix: true,
            distance: Distance::SquaredEuclidean,
            interpolation_prob: 0.25,
            network: NetworkConfig::default(),
            train_task: TaskSpec {
                ways: 5,
                shots: 1,
                queries: 15,
            },
            eval_task: TaskSpec {
                ways: 5,
                shots: 1,
                queries: 15,
            },
            validation_every: 0,
            validation_tasks: 100,
            eval_tasks: 600,
            log_every: 1,
            data: DataConfig::default(),
            out: None,
            sweep: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = RunConfig::from_toml(&text)?;
        if let DataConfig::Files { train, validation, test } = &cfg.data {
            for p in [Some(train), validation.as_ref(), Some(test)].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Dynamic weighting temperature defaults: 0.1 for MAML, 1 for ProtoNet.
    pub fn weight_mode(&self) -> WeightMode {
        self.weighting.unwrap_or(match self.learner {
            LearnerKind::Maml => WeightMode::Dynamic { gamma: 0.1 },
            LearnerKind::ProtoNet => WeightMode::Dynamic { gamma: 1.0 },
        })
    }

    pub fn inner_loop(&self) -> InnerLoop {
        InnerLoop {
            lr: self.inner_lr,
            steps: self.inner_steps,
            first_order: self.first_order,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            learner: self.learner,
            distance: self.distance,
            inner_lr: self.inner_lr,
            eval_steps: self.eval_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive".into());
        }
        if self.meta_batch == 0 {
            return bad("meta_batch must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("inner_lr", self.inner_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.interpolation_prob) {
            return bad("interpolation_prob must lie in [0, 1]".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.eval_tasks == 0 {
            return bad("eval_tasks must be positive".into());
        }
        self.train_task.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.eval_task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.learner == LearnerKind::Maml && self.train_task.ways != self.eval_task.ways {
            return bad("a classifier head needs equal training and evaluation ways".into());
        }
        match self.weight_mode() {
            WeightMode::Dynamic { gamma } if !(gamma > 0.0) => return bad("gamma must be positive".into()),
            WeightMode::Static { weights } => {
                crate::objective::WeightTriple::fixed(weights).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        let net = &self.network;
        match net.arch {
            Arch::Mlp if net.split_block > net.hidden.len() + 1 => {
                return bad(format!("split_block {} exceeds network depth", net.split_block))
            }
            Arch::Conv if net.split_block > net.blocks => {
                return bad(format!("split_block {} exceeds {} blocks", net.split_block, net.blocks))
            }
            _ => {}
        }
        if net.split_block == 0 {
            return bad("split_block must be at least 1".into());
        }
        Ok(())
    }

    /// Fresh network for this config with parameters drawn from `rng`.
    pub fn build_network<R: Rng + ?Sized>(&self, input_shape: &[usize], rng: &mut R) -> Result<Network> {
        let net = &self.network;
        let output = match self.learner {
            LearnerKind::Maml => Some(self.train_task.ways),
            LearnerKind::ProtoNet => net.embed_dim,
        };
        match net.arch {
            Arch::Mlp => {
                let [d] = input_shape else {
                    return Err(Error::Config(format!("mlp needs flat instances, got {input_shape:?}")));
                };
                let out = output.ok_or_else(|| Error::Config("mlp needs embed_dim for metric learners".into()))?;
                Network::mlp(*d, &net.hidden, out, net.split_block, rng)
            }
            Arch::Conv => {
                let [c, h, w] = input_shape else {
                    return Err(Error::Config(format!("conv needs [c, h, w] instances, got {input_shape:?}")));
                };
                Network::conv([*c, *h, *w], net.channels, net.blocks, output, net.split_block, rng)
            }
        }
    }

    /// Hash of every field except the seed, the output location and the
    /// sweep grid, so runs that differ only in seed share it.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.out = None;
        c.sweep = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Every config of the sweep grid, in learner, objective, seed order.
    pub fn expand(&self) -> Vec<RunConfig> {
        let Some(s) = &self.sweep else {
            return vec![self.clone()];
        };
        let learners = if s.learners.is_empty() { vec![self.learner] } else { s.learners.clone() };
        let objectives = if s.objectives.is_empty() { vec![self.objective] } else { s.objectives.clone() };
        let seeds = if s.seeds.is_empty() { vec![self.seed] } else { s.seeds.clone() };
        let mut out = Vec::new();
        for &learner in &learners {
            for &objective in &objectives {
                for &seed in &seeds {
                    let mut c = self.clone();
                    c.sweep = None;
                    c.learner = learner;
                    c.objective = objective;
                    c.seed = seed;
                    out.push(c);
                }
            }
        }
        out
    }

    /// Directory name of one run inside a sweep.
    pub fn run_name(&self) -> String {
        let learner = match self.learner {
            LearnerKind::ProtoNet => "protonet",
            LearnerKind::Maml => "maml",
        };
        format!("{learner}_{}_s{}", self.objective.name(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_learner() {
        let mut c = RunConfig::default();
        assert_eq!(c.weight_mode(), WeightMode::Dynamic { gamma: 1.0 });
        c.learner = LearnerKind::Maml;
        assert_eq!(c.weight_mode(), WeightMode::Dynamic { gamma: 0.1 });
        assert_eq!((c.meta_batch, c.lr, c.inner_steps, c.eval_steps), (4, 0.001, 5, 10));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            weighting: Some(WeightMode::Static { weights: [0.5, 0.25, 0.25] }),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parses_partial_file() {
        let c = RunConfig::from_toml(
            r#"
learner = "maml"
objective = "ibpi"
epsilon = 0.05
[weighting]
mode = "dynamic"
gamma = 0.01
[network]
arch = "mlp"
hidden = [16]
split_block = 1
[data]
kind = "synth"
per_class = 20
shape = [8]
class_separation = 1.5
noise_scale = 1.0
seed = 3
train_classes = 6
validation_classes = 0
test_classes = 6
"#,
        )
        .unwrap();
        assert_eq!(c.objective, Objective::Ibpi);
        assert_eq!(c.weight_mode(), WeightMode::Dynamic { gamma: 0.01 });
        let splits = c.data.load().unwrap();
        assert_eq!(splits.train.num_classes(), 6);
        assert!(splits.validation.is_none());
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["epsilon = -0.1", "steps = 0", "alpha = 0.0", "unknown_key = 1", "interpolation_prob = 2.0"] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
        let deep = "[network]\narch = \"mlp\"\nhidden = [8]\nsplit_block = 5\n";
        assert!(RunConfig::from_toml(deep).is_err());
    }

    #[test]
    fn missing_dataset_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[data]\nkind = \"files\"\ntrain = \"/nonexistent/a.fsds\"\ntest = \"/nonexistent/b.fsds\"\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_ignores_seed_only() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, out: Some("x".into()), ..a.clone() };
        let c = RunConfig { epsilon: 0.2, ..a.clone() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn sweep_expands_in_order() {
        let c = RunConfig {
            sweep: Some(SweepConfig {
                learners: vec![],
                objectives: vec![Objective::Vanilla, Objective::Ibpi],
                seeds: vec![1, 2],
            }),
            ..RunConfig::default()
        };
        let runs = c.expand();
        let names: Vec<_> = runs.iter().map(|r| r.run_name()).collect();
        assert_eq!(names, ["protonet_vanilla_s1", "protonet_vanilla_s2", "protonet_ibpi_s1", "protonet_ibpi_s2"]);
        assert!(runs.iter().all(|r| r.sweep.is_none()));
    }
}
