//! Raw little-endian volume blobs with a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const ORDER: &str = "zyx-row-major";
pub const LITTLE: &str = "little";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Vec<usize>,
    pub dtype: String,
    pub spacing_um: [f64; 3],
    pub order: String,
    pub endianness: String,
}

/// Element types a volume file can hold.
pub trait Voxel: Copy + Default {
    const NAME: &'static str;
    const BYTES: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Voxel for u8 {
    const NAME: &'static str = "u8";
    const BYTES: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(b: &[u8]) -> Self {
        b[0]
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn dtype_bytes(name: &str) -> Result<usize> {
    match name {
        "f32" => Ok(4),
        "u8" => Ok(1),
        other => Err(Error::UnknownDtype(other.to_string())),
    }
}

pub fn write_volume<E: Voxel>(path: &Path, grid: &Grid<E>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = VolumeHeader {
        dims: grid.dims().to_vec(),
        dtype: E::NAME.to_string(),
        spacing_um: grid.spacing(),
        order: ORDER.to_string(),
        endianness: LITTLE.to_string(),
    };
    let mut blob = Vec::with_capacity(grid.len() * E::BYTES);
    for &v in grid.data() {
        v.put(&mut blob);
    }
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let h: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    dtype_bytes(&h.dtype)?;
    if h.endianness != LITTLE {
        return Err(Error::BadEndianness(h.endianness));
    }
    if h.order != ORDER {
        return Err(Error::Data(format!("unsupported voxel order {:?}", h.order)));
    }
    Ok(h)
}

pub fn read_volume<E: Voxel>(path: &Path) -> Result<Grid<E>> {
    let h = read_header(path)?;
    if h.dtype != E::NAME {
        return Err(Error::Data(format!(
            "{} holds {} voxels, expected {}",
            path.display(),
            h.dtype,
            E::NAME
        )));
    }
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = h.dims.iter().product::<usize>() * E::BYTES;
    if blob.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: blob.len() as u64,
        });
    }
    let data = blob.chunks_exact(E::BYTES).map(E::take).collect();
    Ok(Grid::new(h.dims, data)?.with_spacing(h.spacing_um))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{argmax_channels, one_hot};

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let data: Vec<f32> = (0..64).map(|i| (i as f32).sin() * 1e3 + f32::EPSILON).collect();
        let g = Grid::new(vec![4, 4, 4], data).unwrap().with_spacing([2.95; 3]);
        write_volume(&p, &g).unwrap();
        let back: Grid<f32> = read_volume(&p).unwrap();
        assert_eq!(back.spacing(), g.spacing());
        assert!(back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(read_volume::<u8>(&p).is_err());

        fs::write(&p, [0u8; 10]).unwrap();
        match read_volume::<f32>(&p) {
            Err(Error::LengthMismatch { expected: 256, actual: 10, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.vol");
        write_volume(&p, &Grid::filled(vec![2, 2, 2], 1u8)).unwrap();
        let side = sidecar_path(&p);
        let text = fs::read_to_string(&side).unwrap();
        fs::write(&side, text.replace("\"u8\"", "\"f16\"")).unwrap();
        assert!(matches!(read_volume::<u8>(&p), Err(Error::UnknownDtype(d)) if d == "f16"));
        fs::write(&side, text.replace("little", "big")).unwrap();
        assert!(matches!(read_volume::<u8>(&p), Err(Error::BadEndianness(_))));
    }

    #[test]
    fn labels_survive_one_hot_and_argmax() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.vol");
        let g = Grid::new(vec![3, 3, 3], (0..27).map(|i| (i * 7 % 3) as u8).collect()).unwrap();
        write_volume(&p, &g).unwrap();
        let back: Grid<u8> = read_volume(&p).unwrap();
        let oh = one_hot::<f32>(&[&back], 3).unwrap();
        assert_eq!(argmax_channels(oh.data(), 3), g.data());
    }
}
