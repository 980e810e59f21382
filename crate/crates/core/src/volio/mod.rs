//! Volume files, synthetic phantoms, preprocessing and corpus layout.

mod file;
mod phantom;
mod preprocess;

pub use file::{read_header, read_volume, sidecar_path, write_volume, VolumeHeader, Voxel};
pub use phantom::{phantom_generate, PhantomSpec};
pub use preprocess::{crop, downsample_image, downsample_labels};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelVolume, Volume};

/// An image with its reference labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Case ids per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded 70/10/20 split; val and test get at least one case each when
/// there are three or more.
pub fn split_ids(ids: &[String], seed: u64) -> Split {
    let n = ids.len();
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (0.1 * n as f64).round() as usize;
    let mut n_train = (0.7 * n as f64).round() as usize;
    if n >= 3 {
        n_val = n_val.max(1);
        n_train = n_train.min(n - n_val - 1);
    }
    let test = shuffled.split_off((n_train + n_val).min(n));
    let val = shuffled.split_off(n_train.min(shuffled.len()));
    Split {
        train: shuffled,
        val,
        test,
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

fn image_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.img.vol"))
}

fn label_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.lab.vol"))
}

/// Generates `count` phantoms with seeds `seed, seed+1, …` and writes them
/// with `split.json` into `dir`.
pub fn write_phantom_corpus(dir: &Path, seed: u64, dims: [usize; 3], count: usize) -> Result<Split> {
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = case_id(i);
        let (img, lab) = phantom_generate(&PhantomSpec::new(seed + i as u64, dims))?;
        write_volume(&image_path(dir, &id), &img)?;
        write_volume(&label_path(dir, &id), &lab)?;
        ids.push(id);
    }
    let split = split_ids(&ids, seed);
    let path = dir.join("split.json");
    let text = serde_json::to_string_pretty(&split).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(split)
}

pub fn read_case(dir: &Path, id: &str) -> Result<Case> {
    let image = read_volume(&image_path(dir, id))?;
    let labels: LabelVolume = read_volume(&label_path(dir, id))?;
    if image.dims() != labels.dims() {
        return Err(Error::shape("read_case", image.dims(), labels.dims()));
    }
    Ok(Case {
        id: id.to_string(),
        image,
        labels,
    })
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let path = dir.join("split.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn read_cases(dir: &Path, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter().map(|id| read_case(dir, id)).collect()
}
