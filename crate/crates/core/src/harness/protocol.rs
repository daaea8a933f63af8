use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::data::{BlobConfig, Dataset, GlyphConfig, Split};
use super::sampling::{resample_fewshot, resample_longtail};
use super::shift::{apply_shift, ShiftKind, ShiftSpec};
use crate::deq::Activation;
use crate::error::{Error, Result};
use crate::lion::{Affine, Backbone, Classifier, PromptConfig, PromptModel, TuneMode};
use crate::rng::{self, streams};
use crate::robust_opt::{self, OptState, TrainConfig, Trainable, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    HeadTuning,
    FullFinetune,
    BiasTuning,
    Lion,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::HeadTuning,
        Protocol::FullFinetune,
        Protocol::BiasTuning,
        Protocol::Lion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::HeadTuning => "head_tuning",
            Protocol::FullFinetune => "full_finetune",
            Protocol::BiasTuning => "bias_tuning",
            Protocol::Lion => "lion",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unsupported protocol `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Glyphs,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Glyphs => "glyphs",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "glyphs" => Ok(DatasetKind::Glyphs),
            _ => Err(Error::Argument(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Source task plus its shifted / resampled target variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub dataset: DatasetKind,
    pub classes: usize,
    /// Input dimension (ignored for glyphs, which are always 64).
    pub dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub signal_dims: usize,
    pub separation: f64,
    pub shift: Option<ShiftKind>,
    pub noise_sigma: f64,
    pub imbalance_ratio: Option<f64>,
    pub shots: Option<usize>,
    pub seed: u64,
}

impl TaskSpec {
    /// Four-class, 16-dimensional blobs whose class signal sits in four
    /// coordinates; the target applies a random invertible linear map.
    pub fn desk(seed: u64) -> Self {
        Self {
            dataset: DatasetKind::Blobs,
            classes: 4,
            dim: 16,
            train_samples: 400,
            test_samples: 800,
            signal_dims: 4,
            separation: 6.0,
            shift: Some(ShiftKind::InvertibleLinear),
            noise_sigma: 0.5,
            imbalance_ratio: None,
            shots: None,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.dataset {
            DatasetKind::Blobs => self.dim,
            DatasetKind::Glyphs => super::data::GLYPH_SIDE * super::data::GLYPH_SIDE,
        }
    }

    /// Short label such as `blobs+invertible_linear+ir50`.
    pub fn label(&self) -> String {
        let mut s = self.dataset.name().to_string();
        if let Some(k) = self.shift {
            s.push('+');
            s.push_str(k.name());
        }
        if let Some(ir) = self.imbalance_ratio {
            s.push_str(&format!("+ir{ir}"));
        }
        if let Some(k) = self.shots {
            s.push_str(&format!("+{k}shot"));
        }
        s
    }

    fn generate(&self, split: Split) -> Result<Dataset> {
        let n = match split {
            Split::Train => self.train_samples,
            Split::Test => self.test_samples,
        };
        match self.dataset {
            DatasetKind::Blobs => {
                let mut cfg = BlobConfig::new(self.classes, self.dim, n, self.seed);
                cfg.separation = self.separation;
                cfg.signal_dims = self.signal_dims.min(self.dim);
                cfg.generate(split)
            }
            DatasetKind::Glyphs => GlyphConfig::new(self.classes, n, self.seed).generate(split),
        }
    }

    pub fn build(&self) -> Result<Task> {
        let source_train = self.generate(Split::Train)?;
        let source_test = self.generate(Split::Test)?;
        let shift = match self.shift {
            Some(kind) => Some(ShiftSpec::sample(kind, self.input_dim(), self.noise_sigma, self.seed)?),
            None => None,
        };
        let shifted = |ds: &Dataset| match &shift {
            Some(s) => apply_shift(ds, s),
            None => Ok(ds.clone()),
        };
        let mut target_train = shifted(&source_train)?;
        let target_test = shifted(&source_test)?;
        if let Some(ir) = self.imbalance_ratio {
            target_train = resample_longtail(&target_train, ir)?;
        }
        if let Some(k) = self.shots {
            target_train = resample_fewshot(&target_train, k)?;
        }
        Ok(Task {
            source_train,
            source_test,
            target_train,
            target_test,
            shift,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub shift: Option<ShiftSpec>,
}

/// Backbone pretraining on the source task.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub repr_dim: usize,
    pub activation: Activation,
    pub eta: f64,
    pub train: TrainConfig,
    pub target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![384],
            repr_dim: 8,
            activation: Activation::Tanh,
            eta: 0.1,
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            target_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub head: Affine,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains backbone and head jointly on `source`; the result is the frozen
/// feature extractor every protocol starts from.
pub fn pretrain_backbone(source: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    let mut dims = vec![source.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.repr_dim);
    let backbone = Backbone::init(&dims, cfg.activation, &mut rng::stream(seed, streams::INIT_BACKBONE))?;
    let head = Affine::uniform(cfg.repr_dim, source.classes, &mut rng::stream(seed, streams::INIT_HEAD));
    let mut model = Classifier::new(backbone, head, TuneMode::Full)?;
    let train = TrainConfig { seed, ..cfg.train };
    robust_opt::train_sgd(&mut model, source, cfg.eta, &train)?;
    let train_accuracy = robust_opt::accuracy(&model, source)?;
    if train_accuracy < cfg.target_accuracy {
        return Err(Error::Setup(format!(
            "backbone reached {train_accuracy:.4} train accuracy, below the {:.2} target",
            cfg.target_accuracy
        )));
    }
    let mut backbone = model.backbone;
    backbone.frozen = true;
    Ok(Pretrained {
        backbone,
        head: model.head,
        train_accuracy,
        test_accuracy: None,
    })
}

/// Settings shared by every tuning protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    /// Gradient-descent step for the baselines.
    pub eta: f64,
    /// Optimiser for the prompt parameters.
    pub opt: OptState,
    pub prompt: PromptConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eta: 0.05,
            opt: OptState::default(),
            prompt: PromptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TunedModel {
    Classifier(Classifier),
    Lion(Box<PromptModel>),
}

impl TunedModel {
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        match self {
            TunedModel::Classifier(m) => robust_opt::accuracy(m, data),
            TunedModel::Lion(m) => robust_opt::accuracy(m.as_ref(), data),
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            TunedModel::Classifier(m) => m.trainable_count(),
            TunedModel::Lion(m) => m.trainable_count(),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        match self {
            TunedModel::Classifier(m) => &m.backbone,
            TunedModel::Lion(m) => &m.backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// Held-out (test split) accuracy.
    pub accuracy: f64,
    pub trainable_params: usize,
    pub epochs: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub result: ProtocolResult,
    pub model: TunedModel,
    pub log: TrainingLog,
}

/// Head for the target task: the pretrained head when the class count
/// matches, zeros otherwise.
fn target_head(pre: &Pretrained, classes: usize) -> Affine {
    if pre.head.output_dim() == classes {
        pre.head.clone()
    } else {
        Affine::zeros(pre.backbone.output_dim(), classes)
    }
}

/// Tunes `pre` on `train` with `protocol` and scores it on `test`.
pub fn run_protocol(
    protocol: Protocol,
    pre: &Pretrained,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProtocolConfig,
) -> Result<ProtocolRun> {
    if train.classes != test.classes || train.dim() != test.dim() {
        return Err(Error::Argument("train and test splits disagree on shape".into()));
    }
    if train.dim() != pre.backbone.input_dim() {
        return Err(Error::dim("run_protocol", &[pre.backbone.input_dim()], &[train.dim()]));
    }
    let start = Instant::now();
    let (model, log) = match protocol {
        Protocol::Lion => {
            let prompt = PromptConfig {
                classes: train.classes,
                ..cfg.prompt
            };
            let mut m = PromptModel::new(pre.backbone.clone(), &prompt, cfg.train.seed)?;
            let log = robust_opt::train(&mut m, train, &cfg.opt, &cfg.train)?;
            (TunedModel::Lion(Box::new(m)), log)
        }
        _ => {
            let mode = match protocol {
                Protocol::HeadTuning => TuneMode::Head,
                Protocol::BiasTuning => TuneMode::Bias,
                _ => TuneMode::Full,
            };
            let mut m = Classifier::new(pre.backbone.clone(), target_head(pre, train.classes), mode)?;
            let log = robust_opt::train_sgd(&mut m, train, cfg.eta, &cfg.train)?;
            (TunedModel::Classifier(m), log)
        }
    };
    let accuracy = model.accuracy(test)?;
    Ok(ProtocolRun {
        result: ProtocolResult {
            protocol,
            accuracy,
            trainable_params: model.trainable_count(),
            epochs: log.epochs_run(),
            wall_time: start.elapsed().as_secs_f64(),
        },
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task(seed: u64) -> TaskSpec {
        TaskSpec {
            dim: 6,
            train_samples: 160,
            test_samples: 160,
            ..TaskSpec::desk(seed)
        }
    }

    fn small_pretrain() -> PretrainConfig {
        PretrainConfig {
            hidden: vec![24],
            repr_dim: 5,
            ..PretrainConfig::default()
        }
    }

    fn quick() -> ProtocolConfig {
        let mut cfg = ProtocolConfig::default();
        cfg.train.epochs = 5;
        cfg
    }

    #[test]
    fn names_round_trip_and_out_of_scope_rejected() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        for bad in ["vpt", "adapter"] {
            let err = bad.parse::<Protocol>().unwrap_err().to_string();
            assert!(err.contains("unsupported protocol"), "{err}");
        }
    }

    #[test]
    fn pretraining_reaches_target_and_head_tuning_keeps_source_accuracy() {
        let task = small_task(3).build().unwrap();
        let pre = pretrain_backbone(&task.source_train, &small_pretrain(), 3).unwrap();
        assert!(pre.train_accuracy >= 0.95);
        let source_acc = robust_opt::accuracy(
            &Classifier::new(pre.backbone.clone(), pre.head.clone(), TuneMode::Head).unwrap(),
            &task.source_test,
        )
        .unwrap();
        let run = run_protocol(
            Protocol::HeadTuning,
            &pre,
            &task.source_train,
            &task.source_test,
            &quick(),
        )
        .unwrap();
        assert!((run.result.accuracy - source_acc).abs() <= 0.02);
    }

    #[test]
    fn lion_is_smaller_than_full_and_keeps_backbone() {
        let task = small_task(4).build().unwrap();
        let pre = pretrain_backbone(&task.source_train, &small_pretrain(), 4).unwrap();
        let cfg = quick();
        let lion = run_protocol(Protocol::Lion, &pre, &task.target_train, &task.target_test, &cfg).unwrap();
        let full = run_protocol(
            Protocol::FullFinetune,
            &pre,
            &task.target_train,
            &task.target_test,
            &cfg,
        )
        .unwrap();
        assert!(lion.result.trainable_params < full.result.trainable_params);
        assert_eq!(lion.model.backbone(), &pre.backbone);
        assert_ne!(full.model.backbone(), &pre.backbone);
        let again = run_protocol(Protocol::Lion, &pre, &task.target_train, &task.target_test, &cfg).unwrap();
        assert_eq!(again.model, lion.model);
        assert_eq!(again.result.accuracy, lion.result.accuracy);
    }

    #[test]
    fn unmet_pretraining_target_is_a_setup_error() {
        let task = small_task(5).build().unwrap();
        let cfg = PretrainConfig {
            target_accuracy: 1.01,
            ..small_pretrain()
        };
        assert!(matches!(
            pretrain_backbone(&task.source_train, &cfg, 5),
            Err(Error::Setup(_))
        ));
    }
}
