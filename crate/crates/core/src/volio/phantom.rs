//! Synthetic volumes with one curved large tube (class 1) and one thin tube
//! (class 2) on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Radius range of the class-1 tube, in voxels.
    pub large_radius: (f64, f64),
    /// Radius range of the class-2 tube, in voxels.
    pub thin_radius: (f64, f64),
    pub noise: f64,
    /// Mean intensity of classes 0, 1, 2.
    pub contrast: [f64; 3],
    pub spacing_um: [f64; 3],
}

impl PhantomSpec {
    pub fn new(seed: u64, dims: [usize; 3]) -> Self {
        PhantomSpec {
            seed,
            dims,
            large_radius: (5.0, 7.0),
            thin_radius: (1.5, 2.2),
            noise: 0.35,
            contrast: [0.0, 1.0, 0.7],
            spacing_um: [2.95; 3],
        }
    }
}

/// Smooth periodic path across `[0, 1]`.
struct Path {
    base: [f64; 2],
    amp: [f64; 2],
    freq: [f64; 2],
    phase: [f64; 2],
    r: (f64, f64),
    r_phase: f64,
}

impl Path {
    fn draw(rng: &mut ChaCha8Rng, lo: [f64; 2], hi: [f64; 2], max_amp: f64, r: (f64, f64)) -> Self {
        Path {
            base: [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])],
            amp: [rng.random_range(0.3..1.0) * max_amp, rng.random_range(0.3..1.0) * max_amp],
            freq: [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
            phase: [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)],
            r,
            r_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> ([f64; 2], f64) {
        let tau = std::f64::consts::TAU;
        let c = [0, 1].map(|a| self.base[a] + self.amp[a] * (tau * self.freq[a] * t + self.phase[a]).sin());
        let r = self.r.0 + (self.r.1 - self.r.0) * 0.5 * (1.0 + (tau * t + self.r_phase).sin());
        (c, r)
    }
}

pub fn phantom_generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    let [d, h, w] = spec.dims;
    let (lr, tr) = (spec.large_radius, spec.thin_radius);
    if lr.0 <= 0.0 || lr.0 > lr.1 || tr.0 <= 0.0 || tr.0 > tr.1 {
        return Err(Error::Config("tube radius ranges must be positive and ordered".into()));
    }
    let min_extent = d.min(h).min(w) as f64;
    let margin = lr.1 + 1.0;
    if 3.0 * (lr.1 + tr.1) > min_extent || margin >= 0.3 * w as f64 {
        return Err(Error::Config(format!(
            "tube radii up to {} and {} do not fit dims {:?}",
            lr.1, tr.1, spec.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (hf, wf, df) = (h as f64, w as f64, d as f64);
    // the large tube runs along z in the low-x half, the thin one along y in
    // the high-x half
    let large = Path::draw(&mut rng, [hf * 0.35, margin + wf * 0.1], [hf * 0.65, wf * 0.4], lr.1, lr);
    let thin = Path::draw(&mut rng, [df * 0.3, wf * 0.65], [df * 0.7, wf * 0.8], tr.1 * 2.0, tr);

    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        let (c, r) = large.at(z as f64 / (d - 1).max(1) as f64);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - c[0], x as f64 - c[1]);
                if dy * dy + dx * dx <= r * r {
                    labels[(z * h + y) * w + x] = 1;
                }
            }
        }
    }
    for y in 0..h {
        let (c, r) = thin.at(y as f64 / (h - 1).max(1) as f64);
        for z in 0..d {
            for x in 0..w {
                let (dz, dx) = (z as f64 - c[0], x as f64 - c[1]);
                if dz * dz + dx * dx <= r * r {
                    labels[(z * h + y) * w + x] = 2;
                }
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let n = if spec.noise > 0.0 { spec.noise * normal.sample(&mut rng) } else { 0.0 };
            (spec.contrast[l as usize] + n) as f32
        })
        .collect();
    let dims = spec.dims.to_vec();
    Ok((
        Grid::new(dims.clone(), image)?.with_spacing(spec.spacing_um),
        Grid::new(dims, labels)?.with_spacing(spec.spacing_um),
    ))
}
