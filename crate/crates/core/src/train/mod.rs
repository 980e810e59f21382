//! Optimization loops: Adam, per-variant training steps, epoch loop with
//! validation-driven early stopping.

mod adam;

pub use adam::{AdamConfig, AdamState, StopMonitor, DEFAULT_LR};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::guidance_for_patch;
use crate::error::{Error, Result};
use crate::grid::LabelVolume;
use crate::infer::{dice_per_class, fuse_predict};
use crate::loss::{class_weights, combined_loss_one_hot, count_classes, ClassWeights, DICE_EPSILON};
use crate::nn::Mode;
use crate::sampler::{augment, sample_volume, stack_images, supervision_targets, PatchPlan, PatchRecord};
use crate::tensor::{Element, Tensor};
use crate::unet::{Network, NetworkKind, NetworkState, UNetConfig};
use crate::volio::Case;

pub const DEFAULT_PATIENCE: usize = 30;

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub plan: PatchPlan,
    pub network: UNetConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub max_epochs: usize,
    #[serde(default)]
    pub augmentation: bool,
    #[serde(default = "one")]
    pub batch: usize,
    /// Caps the patches used per epoch, taken after the shuffle.
    #[serde(default)]
    pub max_patches_per_epoch: Option<usize>,
    /// Directory holding the phantom corpus, for the CLI.
    #[serde(default)]
    pub data_dir: Option<String>,
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn desk(seed: u64, classes: usize) -> Self {
        RunConfig {
            seed,
            plan: PatchPlan::desk(),
            network: UNetConfig::desk(classes),
            lr: DEFAULT_LR,
            patience: DEFAULT_PATIENCE,
            max_epochs: 20,
            augmentation: false,
            batch: 1,
            max_patches_per_epoch: None,
            data_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.plan.validate(self.network.levels())?;
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Loss terms of one dual-patch forward, before any backward.
pub struct DualLoss<T: Element> {
    pub standard: Tensor<T>,
    pub expanded: Tensor<T>,
}

pub fn meunet_loss_terms<T: Element>(
    net: &Network<T>,
    records: &[&PatchRecord],
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<DualLoss<T>> {
    let k = net.config().num_classes;
    let (target, exp_target) = supervision_targets::<T>(records, net.config().levels(), k)?;
    let exp_target = exp_target.ok_or_else(|| Error::Data("dual-patch step needs expanded patches".into()))?;
    let x = stack_images(&records.iter().map(|r| &r.image).collect::<Vec<_>>())?;
    let exp_images = records
        .iter()
        .map(|r| r.expanded_image.as_ref())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Data("dual-patch step needs expanded patches".into()))?;
    let e = stack_images(&exp_images)?;
    let out = net.forward_meunet_dual(&x, &e, Mode::Train)?;
    Ok(DualLoss {
        standard: combined_loss_one_hot(&out.standard, &target, weights, epsilon)?,
        expanded: combined_loss_one_hot(&out.expanded, &exp_target, weights, epsilon)?,
    })
}

/// Standard-patch loss at level 1, with guidance for post-concatenation nets.
pub fn standard_loss<T: Element>(
    net: &Network<T>,
    records: &[&PatchRecord],
    guidance: Option<&BTreeMap<String, LabelVolume>>,
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let cfg = net.config();
    let (target, _) = supervision_targets::<T>(records, cfg.levels(), cfg.num_classes)?;
    let x = stack_images(&records.iter().map(|r| &r.image).collect::<Vec<_>>())?;
    let logits = if cfg.postconcat {
        let preds = guidance.ok_or_else(|| Error::Config("post-concatenation training needs stage-1 guidance".into()))?;
        let mut parts = Vec::with_capacity(records.len());
        for r in records {
            let pred = preds
                .get(&r.volume_id)
                .ok_or_else(|| Error::MissingCache(r.volume_id.clone()))?;
            parts.push(guidance_for_patch::<T>(pred, r.origin, r.image.dims()[0], cfg.levels() - 1, cfg.num_classes)?);
        }
        let pyramid = crate::unet::GuidancePyramid::concat_batch(&parts)?;
        net.forward_postconcat(&x, &pyramid, Mode::Train)?
    } else {
        net.forward_standard(&x, Mode::Train)?
    };
    combined_loss_one_hot(&logits, &target, weights, epsilon)
}

/// One dual-patch step: `loss_std + loss_exp`, one backward, one Adam update.
pub fn meunet_train_step<T: Element>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    records: &[&PatchRecord],
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<(f64, f64)> {
    net.zero_grads();
    let terms = meunet_loss_terms(net, records, weights, epsilon)?;
    let (ls, le) = (terms.standard.item().as_f64(), terms.expanded.item().as_f64());
    terms.standard.add(&terms.expanded)?.backward()?;
    adam.step(net.params_mut())?;
    Ok((ls, le))
}

/// One step on the level-1 loss of a standard or post-concatenation net.
pub fn standard_train_step<T: Element>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    records: &[&PatchRecord],
    guidance: Option<&BTreeMap<String, LabelVolume>>,
    weights: &ClassWeights,
    epsilon: f64,
) -> Result<f64> {
    net.zero_grads();
    let loss = standard_loss(net, records, guidance, weights, epsilon)?;
    let l = loss.item().as_f64();
    loss.backward()?;
    adam.step(net.params_mut())?;
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<EpochRow>,
}

impl History {
    /// `epoch,train_loss,val_dice_c0,...` lines.
    pub fn to_csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.val_dice.len());
        let mut s = String::from("epoch,train_loss");
        for c in 0..classes {
            let _ = write!(s, ",val_dice_c{c}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{:.8}", r.epoch, r.train_loss);
            for d in &r.val_dice {
                let _ = write!(s, ",{d:.8}");
            }
            s.push('\n');
        }
        s
    }
}

pub struct TrainOutcome<T: Element> {
    /// Network restored to its best validation epoch.
    pub network: Network<T>,
    pub history: History,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub weights: ClassWeights,
}

/// Mean Dice over classes `1..K`.
pub fn mean_foreground(dice: &[f64]) -> f64 {
    dice[1..].iter().sum::<f64>() / (dice.len() - 1) as f64
}

/// Sliding-window prediction of a whole case with `net` in eval mode.
pub fn predict_case<T: Element>(
    net: &Network<T>,
    case: &Case,
    plan: &PatchPlan,
    guidance: Option<&LabelVolume>,
) -> Result<crate::infer::Fused> {
    let cfg = net.config();
    fuse_predict(&case.image, plan.patch, plan.stride, |origin, patch| {
        let x = stack_images::<T>(&[patch])?;
        match guidance {
            Some(pred) if cfg.postconcat => {
                let g = guidance_for_patch::<T>(pred, origin, plan.patch, cfg.levels() - 1, cfg.num_classes)?;
                net.forward_postconcat(&x, &g, Mode::Eval)
            }
            _ => net.forward_standard(&x, Mode::Eval),
        }
    })
}

/// Trains `kind` on `train`, validating on `val` after every epoch and
/// keeping the best state by mean foreground Dice. Post-concatenation
/// runs read stage-1 argmax labels from `guidance`, keyed by case id.
pub fn train_network<T: Element>(
    kind: NetworkKind,
    train: &[Case],
    val: &[Case],
    config: &RunConfig,
    guidance: Option<&BTreeMap<String, LabelVolume>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let net_cfg = config.network.clone().for_kind(kind);
    let k = net_cfg.num_classes;
    let levels = net_cfg.levels();
    let weights = class_weights(&count_classes(train.iter().map(|c| &c.labels), k)?)?;
    let mut net = Network::<T>::build(net_cfg, config.seed)?;
    let mut adam = AdamState::new(
        net.params(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let expanded = (kind == NetworkKind::MeUnet).then(|| config.plan.expanded(levels));
    let mut patches = Vec::new();
    for case in train {
        patches.extend(sample_volume(&case.id, &case.image, &case.labels, &config.plan, expanded, &mut rng)?);
    }
    if patches.is_empty() {
        return Err(Error::EmptyPatchSet);
    }

    let mut monitor = StopMonitor::new(config.patience);
    let mut history = History::default();
    let mut best: Option<NetworkState<T>> = None;
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let take = config.max_patches_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order[..take].chunks(config.batch) {
            let batch: Vec<PatchRecord> = chunk
                .iter()
                .map(|&i| {
                    if config.augmentation {
                        augment_record(&patches[i], config.plan.patch, &mut rng)
                    } else {
                        Ok(patches[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&PatchRecord> = batch.iter().collect();
            total += match kind {
                NetworkKind::MeUnet => {
                    let (a, b) = meunet_train_step(&mut net, &mut adam, &refs, &weights, DICE_EPSILON)?;
                    a + b
                }
                _ => standard_train_step(&mut net, &mut adam, &refs, guidance, &weights, DICE_EPSILON)?,
            };
            steps += 1;
        }
        let val_dice = validate(&net, val, &config.plan, guidance)?;
        let metric = mean_foreground(&val_dice);
        history.rows.push(EpochRow {
            epoch,
            train_loss: total / steps as f64,
            val_dice,
        });
        if monitor.observe(epoch, metric) {
            best = Some(net.state());
        }
        if monitor.should_stop() {
            break;
        }
    }
    net.load_state(&best.expect("at least one epoch ran"))?;
    Ok(TrainOutcome {
        network: net,
        history,
        best_epoch: monitor.best_epoch.expect("at least one epoch ran"),
        best_metric: monitor.best.expect("at least one epoch ran"),
        weights,
    })
}

/// Per-class Dice averaged over validation cases.
fn validate<T: Element>(
    net: &Network<T>,
    val: &[Case],
    plan: &PatchPlan,
    guidance: Option<&BTreeMap<String, LabelVolume>>,
) -> Result<Vec<f64>> {
    let k = net.config().num_classes;
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut sum = vec![0.0; k];
    for case in val {
        let g = match guidance {
            Some(map) if net.config().postconcat => {
                Some(map.get(&case.id).ok_or_else(|| Error::MissingCache(case.id.clone()))?)
            }
            _ => None,
        };
        let fused = predict_case(net, case, plan, g)?;
        for (s, d) in sum.iter_mut().zip(dice_per_class(&fused.labels, &case.labels, k)?) {
            *s += d;
        }
    }
    Ok(sum.into_iter().map(|s| s / val.len() as f64).collect())
}

/// Augments the expanded patch when present and re-crops the standard
/// patch from its centre, so the two stay aligned.
fn augment_record(r: &PatchRecord, patch: usize, rng: &mut ChaCha8Rng) -> Result<PatchRecord> {
    let mut out = r.clone();
    match (&r.expanded_image, &r.expanded_labels) {
        (Some(ei), Some(el)) => {
            let (i, l) = augment(ei, el, rng)?;
            let m = ((i.dims()[0] - patch) / 2) as isize;
            let (si, sl) = crate::sampler::crop_cube(&i, &l, [m; 3], patch);
            out.image = si;
            out.labels = sl;
            out.expanded_image = Some(i);
            out.expanded_labels = Some(l);
        }
        _ => {
            let (i, l) = augment(&r.image, &r.labels, rng)?;
            out.image = i;
            out.labels = l;
        }
    }
    Ok(out)
}
