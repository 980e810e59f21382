use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume, Volume};

/// Crops `[origin, origin + size)`; the box must lie inside the volume.
pub fn crop<E: Copy>(grid: &Grid<E>, origin: [usize; 3], size: [usize; 3]) -> Result<Grid<E>> {
    let dims = grid.dims();
    if dims.len() != 3 || (0..3).any(|a| origin[a] + size[a] > dims[a]) {
        return Err(Error::Config(format!(
            "crop {size:?} at {origin:?} exceeds volume {dims:?}"
        )));
    }
    let fill = grid.data()[0];
    Ok(grid.crop_padded(&origin.map(|o| o as isize), &size, fill))
}

/// Factor-2 trilinear downsampling with centre-aligned samples: output
/// voxel `i` reads input coordinate `2i + 0.5`, clamped at the far edge.
pub fn downsample_image(image: &Volume) -> Result<Volume> {
    let [d, h, w] = crate::sampler::spatial_dims(image.dims())?;
    let out = [d, h, w].map(|n| n.div_ceil(2));
    let mut data = Vec::with_capacity(out.iter().product());
    let lerp_ix = |i: usize, n: usize| -> [(usize, f64); 2] {
        let a = 2 * i;
        if a + 1 < n {
            [(a, 0.5), (a + 1, 0.5)]
        } else {
            [(a, 0.5), (a, 0.5)]
        }
    };
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                let mut acc = 0.0f64;
                for (zi, wz) in lerp_ix(z, d) {
                    for (yi, wy) in lerp_ix(y, h) {
                        for (xi, wx) in lerp_ix(x, w) {
                            acc += wz * wy * wx * image.data()[(zi * h + yi) * w + xi] as f64;
                        }
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    let s = image.spacing();
    Ok(Grid::new(out.to_vec(), data)?.with_spacing(s.map(|v| v * 2.0)))
}

/// Nearest-neighbour factor-2 label downsampling (index `2i`).
pub fn downsample_labels(labels: &LabelVolume) -> LabelVolume {
    labels.downsample_nearest(2)
}
