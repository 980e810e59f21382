//! Patch extraction: sliding-window tiling, foreground roulette, centred
//! expansion with zero padding, supervision targets and augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelVolume, Volume};
use crate::nn::one_hot;
use crate::tensor::{Element, Tensor};

/// Expansion factors of the dual-branch runs.
pub const EXPANSION_FACTORS: [f64; 4] = [1.0, 1.25, 1.5, 1.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch: usize,
    /// Expansion factor `k`; 1.0 means no expanded patch.
    #[serde(default = "unit")]
    pub k: f64,
    pub stride: usize,
    #[serde(default = "default_fg_threshold")]
    pub fg_threshold: f64,
    #[serde(default = "default_bg_accept")]
    pub bg_accept_prob: f64,
}

fn unit() -> f64 {
    1.0
}

fn default_fg_threshold() -> f64 {
    0.01
}

fn default_bg_accept() -> f64 {
    0.3
}

impl PatchPlan {
    pub fn desk() -> Self {
        PatchPlan {
            patch: 32,
            k: 1.0,
            stride: 16,
            fg_threshold: default_fg_threshold(),
            bg_accept_prob: default_bg_accept(),
        }
    }

    pub fn full_scale() -> Self {
        PatchPlan {
            patch: 160,
            stride: 80,
            ..Self::desk()
        }
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    /// Expanded edge for a network with `levels` resolution levels.
    pub fn expanded(&self, levels: usize) -> usize {
        expanded_edge(self.patch, self.k, levels)
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
            return Err(Error::Config(format!(
                "need 1 ≤ stride ≤ patch, got stride {} for patch {}",
                self.stride, self.patch
            )));
        }
        if !(self.k >= 1.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("expansion factor must be ≥ 1, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.fg_threshold) || !(0.0..=1.0).contains(&self.bg_accept_prob) {
            return Err(Error::Config("fg_threshold and bg_accept_prob must lie in [0, 1]".into()));
        }
        let div = 1usize << (levels - 1);
        for (what, e) in [("patch", self.patch), ("expanded patch", self.expanded(levels))] {
            if e % div != 0 {
                return Err(Error::Config(format!("{what} edge {e} is not divisible by {div}")));
            }
        }
        Ok(())
    }
}

/// `round(k·P)` rounded up to a multiple of `2^(levels−1)`.
pub fn expanded_edge(patch: usize, k: f64, levels: usize) -> usize {
    let div = 1usize << (levels - 1);
    let raw = (k * patch as f64).round() as usize;
    raw.div_ceil(div) * div
}

/// Origins `0, stride, …` along one axis until the last patch reaches the end.
pub fn tile_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch >= 1 && stride >= 1 && stride <= patch);
    if extent <= patch {
        return vec![0];
    }
    let steps = (extent - patch).div_ceil(stride);
    (0..=steps).map(|i| i * stride).collect()
}

/// All `(z, y, x)` tile origins in z-major order.
pub fn tile_origins(dims: [usize; 3], patch: usize, stride: usize) -> Vec<[usize; 3]> {
    let [zs, ys, xs] = dims.map(|d| tile_positions(d, patch, stride));
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    out
}

pub fn foreground_fraction(labels: &LabelVolume) -> f64 {
    let fg = labels.data().iter().filter(|&&l| l != 0).count();
    fg as f64 / labels.len().max(1) as f64
}

/// Accepts any patch with enough foreground; others pass a roulette draw.
pub fn accept_patch<R: Rng + ?Sized>(labels: &LabelVolume, plan: &PatchPlan, rng: &mut R) -> bool {
    if foreground_fraction(labels) >= plan.fg_threshold {
        return true;
    }
    rng.random::<f64>() < plan.bg_accept_prob
}

pub(crate) fn spatial_dims(dims: &[usize]) -> Result<[usize; 3]> {
    match *dims {
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::Data(format!("expected a 3-D volume, got dims {dims:?}"))),
    }
}

/// Cube of edge `edge` at `origin`; images pad with 0, labels with background.
pub fn crop_cube(image: &Volume, labels: &LabelVolume, origin: [isize; 3], edge: usize) -> (Volume, LabelVolume) {
    let size = [edge; 3];
    (image.crop_padded(&origin, &size, 0.0), labels.crop_padded(&origin, &size, 0))
}

/// The expanded region `[origin − (E−P)/2, origin + P + (E−P)/2)` per axis.
pub fn expand_patch(
    image: &Volume,
    labels: &LabelVolume,
    origin: [usize; 3],
    patch: usize,
    expanded: usize,
) -> Result<(Volume, LabelVolume)> {
    if expanded < patch || (expanded - patch) % 2 != 0 {
        return Err(Error::Config(format!(
            "expanded edge {expanded} must be ≥ {patch} with an even difference"
        )));
    }
    let m = ((expanded - patch) / 2) as isize;
    Ok(crop_cube(image, labels, origin.map(|o| o as isize - m), expanded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub volume_id: String,
    pub origin: [usize; 3],
    pub image: Volume,
    pub labels: LabelVolume,
    pub expanded_image: Option<Volume>,
    pub expanded_labels: Option<LabelVolume>,
}

impl PatchRecord {
    pub fn extract(
        volume_id: &str,
        image: &Volume,
        labels: &LabelVolume,
        origin: [usize; 3],
        patch: usize,
        expanded: Option<usize>,
    ) -> Result<Self> {
        let (img, lab) = crop_cube(image, labels, origin.map(|o| o as isize), patch);
        let (expanded_image, expanded_labels) = match expanded {
            Some(e) => {
                let (i, l) = expand_patch(image, labels, origin, patch, e)?;
                (Some(i), Some(l))
            }
            None => (None, None),
        };
        Ok(PatchRecord {
            volume_id: volume_id.to_string(),
            origin,
            image: img,
            labels: lab,
            expanded_image,
            expanded_labels,
        })
    }
}

/// Tiles a volume and keeps the patches that pass [`accept_patch`], in tile
/// order. `expanded` adds centred expanded patches of that edge.
pub fn sample_volume<R: Rng + ?Sized>(
    volume_id: &str,
    image: &Volume,
    labels: &LabelVolume,
    plan: &PatchPlan,
    expanded: Option<usize>,
    rng: &mut R,
) -> Result<Vec<PatchRecord>> {
    let dims = spatial_dims(image.dims())?;
    if labels.dims() != image.dims() {
        return Err(Error::shape("sample_volume", image.dims(), labels.dims()));
    }
    let mut out = Vec::new();
    for origin in tile_origins(dims, plan.patch, plan.stride) {
        let (_, lab) = crop_cube(image, labels, origin.map(|o| o as isize), plan.patch);
        if accept_patch(&lab, plan, rng) {
            out.push(PatchRecord::extract(volume_id, image, labels, origin, plan.patch, expanded)?);
        }
    }
    Ok(out)
}

/// Stacks equally shaped volumes into `[N, 1, D, H, W]`.
pub fn stack_images<T: Element>(images: &[&Volume]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.dims() != first.dims() {
            return Err(Error::shape("stack_images", first.dims(), img.dims()));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let mut shape = vec![images.len(), 1];
    shape.extend_from_slice(first.dims());
    Tensor::from_vec(shape, data)
}

/// Level-1 one-hot of the standard labels and level-2 one-hot of the
/// expanded labels (nearest downsampling by 2), each `[N, K, ...]`.
pub fn supervision_targets<T: Element>(
    records: &[&PatchRecord],
    levels: usize,
    classes: usize,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let std: Vec<&LabelVolume> = records.iter().map(|r| &r.labels).collect();
    let standard = one_hot(&std, classes)?;
    let expanded: Option<Vec<LabelVolume>> = records
        .iter()
        .map(|r| r.expanded_labels.as_ref().map(|l| l.downsample_nearest(2)))
        .collect();
    let expanded = match expanded {
        Some(small) if levels >= 2 => {
            let refs: Vec<&LabelVolume> = small.iter().collect();
            Some(one_hot(&refs, classes)?)
        }
        _ => None,
    };
    Ok((standard, expanded))
}

/// Rotation by `quarter_turns`·90° about z (in the y–x plane), then
/// isotropic scaling about the centre; trilinear for the image, nearest for
/// labels, zero/background outside. Requires square y–x extents.
pub fn augment_with(image: &Volume, labels: &LabelVolume, quarter_turns: u8, scale: f64) -> Result<(Volume, LabelVolume)> {
    let [d, h, w] = spatial_dims(image.dims())?;
    if labels.dims() != image.dims() {
        return Err(Error::shape("augment", image.dims(), labels.dims()));
    }
    if quarter_turns % 4 != 0 && h != w {
        return Err(Error::Data(format!("rotation needs square y-x extents, got {h}x{w}")));
    }
    let (mut img, mut lab) = (image.clone(), labels.clone());
    for _ in 0..quarter_turns % 4 {
        img = rotate_quarter(&img, [d, h, w]);
        lab = rotate_quarter(&lab, [d, h, w]);
    }
    if scale == 1.0 {
        return Ok((img, lab));
    }
    let c = [d, h, w].map(|n| (n as f64 - 1.0) / 2.0);
    let mut out_img = vec![0f32; img.len()];
    let mut out_lab = vec![0u8; lab.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let src: [f64; 3] = std::array::from_fn(|a| c[a] + (p[a] as f64 - c[a]) / scale);
                let o = (z * h + y) * w + x;
                out_img[o] = trilinear(&img, [d, h, w], src) as f32;
                let nn = src.map(|s| s.round() as isize);
                if nn.iter().zip([d, h, w]).all(|(&i, n)| i >= 0 && (i as usize) < n) {
                    out_lab[o] = lab.get(&nn.map(|i| i as usize));
                }
            }
        }
    }
    let spacing = image.spacing();
    Ok((
        Volume::new(vec![d, h, w], out_img)?.with_spacing(spacing),
        LabelVolume::new(vec![d, h, w], out_lab)?.with_spacing(spacing),
    ))
}

/// Draws a quarter-turn count in `0..4` and a scale in `[0.9, 1.1]`.
pub fn augment<R: Rng + ?Sized>(image: &Volume, labels: &LabelVolume, rng: &mut R) -> Result<(Volume, LabelVolume)> {
    let turns = rng.random_range(0..4u8);
    let scale = rng.random_range(0.9..=1.1);
    augment_with(image, labels, turns, scale)
}

/// `out[z][y][x] = in[z][w−1−x][y]`, a 90° turn in the y–x plane.
fn rotate_quarter<E: Copy>(g: &crate::grid::Grid<E>, [d, h, w]: [usize; 3]) -> crate::grid::Grid<E> {
    let src = g.data();
    let mut data = Vec::with_capacity(src.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data.push(src[(z * h + (w - 1 - x)) * w + y]);
            }
        }
    }
    crate::grid::Grid::new(vec![d, h, w], data)
        .expect("same element count")
        .with_spacing(g.spacing())
}

/// Trilinear sample at fractional index `p`; voxels outside read 0.
pub(crate) fn trilinear(g: &Volume, dims: [usize; 3], p: [f64; 3]) -> f64 {
    let base = p.map(|v| v.floor());
    let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a]);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            let i = base[a] as isize + bit as isize;
            wgt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if i < 0 || i as usize >= dims[a] {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if inside && wgt != 0.0 {
            acc += wgt * g.get(&idx) as f64;
        }
    }
    acc
}
