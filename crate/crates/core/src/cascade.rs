//! Two-stage cascade: two meU-net branches predict full volumes, their
//! probabilities are averaged and cached, and the argmax guides a
//! post-concatenation network at every decoder level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume};
use crate::infer::fused_from_probs;
use crate::nn::one_hot;
use crate::sampler::PatchPlan;
use crate::tensor::Element;
use crate::train::{predict_case, train_network, RunConfig, TrainOutcome};
use crate::unet::{network_digest, GuidancePyramid, Network, NetworkKind};
use crate::volio::{downsample_image, downsample_labels, read_volume, write_volume, Case};

/// Expansion factors of the two stage-1 branches.
pub const BRANCH_FACTORS: [f64; 2] = [1.5, 1.75];

/// A trained stage-1 network with the plan it predicts with.
pub struct Branch<T: Element = f32> {
    pub network: Network<T>,
    pub plan: PatchPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOnePrediction {
    /// `[K, D, H, W]`.
    pub probs: Grid<f32>,
    pub labels: LabelVolume,
    /// Cache key of the producing branches.
    pub digest: String,
}

/// Voxelwise mean of two probability grids.
pub fn ensemble(a: &Grid<f64>, b: &Grid<f64>) -> Result<Grid<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::shape("ensemble", a.dims(), b.dims()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(Grid::new(a.dims().to_vec(), data)?.with_spacing(a.spacing()))
}

/// Cache key over both branches' parameters and plans.
pub fn branches_digest<T: Element>(branches: &[Branch<T>]) -> String {
    let mut h = Sha256::new();
    for b in branches {
        h.update(network_digest(&b.network).as_bytes());
        h.update(serde_json::to_vec(&b.plan).expect("plan serializes"));
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn cache_paths(cache: &Path, id: &str, digest: &str) -> (PathBuf, PathBuf) {
    let dir = cache.join(id).join(digest);
    (dir.join("probs.vol"), dir.join("argmax.vol"))
}

/// Reads a cached prediction, if both files exist.
pub fn read_cached(cache: &Path, id: &str, digest: &str) -> Result<Option<StageOnePrediction>> {
    let (p, l) = cache_paths(cache, id, digest);
    if !p.exists() || !l.exists() {
        return Ok(None);
    }
    Ok(Some(StageOnePrediction {
        probs: read_volume(&p)?,
        labels: read_volume(&l)?,
        digest: digest.to_string(),
    }))
}

/// Fuses every branch over the whole case, averages the probabilities and
/// takes the lowest-index argmax. With `cache`, results are read from or
/// written to `cache/<case-id>/<digest>/`.
pub fn stage1_predict_full<T: Element>(
    branches: &[Branch<T>],
    case: &Case,
    cache: Option<&Path>,
) -> Result<StageOnePrediction> {
    if branches.is_empty() {
        return Err(Error::Config("stage 1 needs at least one branch".into()));
    }
    let digest = branches_digest(branches);
    if let Some(dir) = cache {
        if let Some(hit) = read_cached(dir, &case.id, &digest)? {
            return Ok(hit);
        }
    }
    let mut mean: Option<Grid<f64>> = None;
    for b in branches {
        let fused = predict_case(&b.network, case, &b.plan, None)?;
        mean = Some(match mean {
            None => fused.probs,
            Some(m) => ensemble(&m, &fused.probs)?,
        });
    }
    let pred = prediction_from_probs(mean.expect("nonempty branches"), digest)?;
    if let Some(dir) = cache {
        let (p, l) = cache_paths(dir, &case.id, &pred.digest);
        write_volume(&p, &pred.probs)?;
        write_volume(&l, &pred.labels)?;
    }
    Ok(pred)
}

fn prediction_from_probs(probs: Grid<f64>, digest: String) -> Result<StageOnePrediction> {
    let fused = fused_from_probs(probs)?;
    let probs = fused.probs_f32();
    // argmax of the stored single-precision values
    let labels = fused_from_probs(Grid::new(
        probs.dims().to_vec(),
        probs.data().iter().map(|&p| p as f64).collect(),
    )?)?
    .labels;
    Ok(StageOnePrediction { probs, labels, digest })
}

/// Level-1 guidance is the one-hot of `labels` over `[origin, origin + P)`,
/// background outside the volume; deeper levels are nearest downsamples.
pub fn guidance_for_patch<T: Element>(
    labels: &LabelVolume,
    origin: [usize; 3],
    patch: usize,
    levels: usize,
    classes: usize,
) -> Result<GuidancePyramid<T>> {
    let crop = labels.crop_padded(&origin.map(|o| o as isize), &[patch; 3], 0);
    GuidancePyramid::from_one_hot(one_hot(&[&crop], classes)?, levels)
}

/// Stage-1 argmax labels of every case, keyed by case id.
pub fn stage1_label_map<T: Element>(
    branches: &[Branch<T>],
    cases: &[Case],
    cache: Option<&Path>,
) -> Result<BTreeMap<String, LabelVolume>> {
    cases
        .iter()
        .map(|c| Ok((c.id.clone(), stage1_predict_full(branches, c, cache)?.labels)))
        .collect()
}

/// Trains the post-concatenation network on stage-1 guidance for every
/// training and validation case.
pub fn train_stage2<T: Element>(
    train: &[Case],
    val: &[Case],
    guidance: &BTreeMap<String, LabelVolume>,
    config: &RunConfig,
) -> Result<TrainOutcome<T>> {
    if let Some(c) = train.iter().chain(val).find(|c| !guidance.contains_key(&c.id)) {
        return Err(Error::MissingCache(c.id.clone()));
    }
    train_network(NetworkKind::PostConcat, train, val, config, Some(guidance))
}

/// Cases with factor-2 trilinear images and nearest labels.
pub fn downsample_cases(cases: &[Case]) -> Result<Vec<Case>> {
    cases
        .iter()
        .map(|c| {
            Ok(Case {
                id: c.id.clone(),
                image: downsample_image(&c.image)?,
                labels: downsample_labels(&c.labels),
            })
        })
        .collect()
}

/// Nearest-neighbour factor-2 upsampling, cropped to `dims`.
pub fn upsample_labels(small: &LabelVolume, dims: [usize; 3]) -> LabelVolume {
    let [d, h, w] = dims;
    let sd = small.dims();
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data.push(small.data()[((z / 2) * sd[1] + y / 2) * sd[2] + x / 2]);
            }
        }
    }
    Grid::new(dims.to_vec(), data).expect("dims match data")
}

/// First stage of the plain comparison cascade: a standard U-net trained
/// and run on half-resolution volumes, its labels upsampled back.
pub fn plain_stage1<T: Element>(
    train: &[Case],
    val: &[Case],
    config: &RunConfig,
) -> Result<(TrainOutcome<T>, impl Fn(&Case) -> Result<LabelVolume>)> {
    let outcome = train_network::<T>(NetworkKind::Standard, &downsample_cases(train)?, &downsample_cases(val)?, config, None)?;
    let net = outcome.network.clone();
    let plan = config.plan.clone();
    let predict = move |case: &Case| -> Result<LabelVolume> {
        let small = downsample_cases(std::slice::from_ref(case))?;
        let fused = predict_case(&net, &small[0], &plan, None)?;
        let dims = crate::sampler::spatial_dims(case.image.dims())?;
        Ok(upsample_labels(&fused.labels, dims))
    };
    Ok((outcome, predict))
}
