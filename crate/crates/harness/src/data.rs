//! MNIST in IDX format, normalized and optionally augmented.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;

use crate::config::Augmentation;
use crate::error::{HarnessError, Result};

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const SIDE: usize = 28;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// One normalized image per row.
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images = self.images.slice(ndarray::s![..n, ..]).to_owned();
            self.labels.truncate(n);
        }
    }
}

fn candidates(dir: &Path, stem: &str) -> [PathBuf; 2] {
    [dir.join(stem), dir.join(stem.replacen("-idx", ".idx", 1))]
}

fn open(dir: &Path, stem: &str) -> Result<(PathBuf, Vec<u8>)> {
    for path in candidates(dir, stem) {
        if path.exists() {
            let mut bytes = Vec::new();
            std::fs::File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| HarnessError::data(&path, e.to_string()))?;
            return Ok((path, bytes));
        }
    }
    Err(HarnessError::data(
        &dir.join(stem),
        "file not found; download MNIST and point DALEBP_DATA_DIR or train.data_dir at it",
    ))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HarnessError::data(path, format!("truncated header at byte {offset}")))
}

/// Parses an IDX image file into raw pixel rows.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(HarnessError::data(path, format!("bad magic {magic:#010x} at byte 0, want {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < want {
        return Err(HarnessError::data(
            path,
            format!("truncated at byte {}: header promises {want} pixel bytes", bytes.len()),
        ));
    }
    Ok((n, rows * cols, body[..want].to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(HarnessError::data(path, format!("bad magic {magic:#010x} at byte 0, want {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(HarnessError::data(path, format!("truncated at byte {}: header promises {n} labels", bytes.len())));
    }
    if let Some(pos) = body[..n].iter().position(|&l| l > 9) {
        return Err(HarnessError::data(path, format!("label {} at byte {} is not a digit", body[pos], 8 + pos)));
    }
    Ok(body[..n].to_vec())
}

fn load_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let (ipath, ibytes) = open(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lpath, lbytes) = open(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, pixels, raw) = parse_images(&ibytes, &ipath)?;
    let labels = parse_labels(&lbytes, &lpath)?;
    if labels.len() != n {
        return Err(HarnessError::data(
            &lpath,
            format!("{} labels but {} has {n} images", labels.len(), ipath.display()),
        ));
    }
    let images = Array2::from_shape_vec((n, pixels), raw)
        .expect("length checked")
        .mapv(|p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD);
    Ok(Dataset {
        images,
        labels: labels.into_iter().map(usize::from).collect(),
    })
}

/// Loads `(train, test)` from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, "train")?, load_split(dir, "t10k")?))
}

/// Value of a blank pixel after normalization.
pub fn background() -> f64 {
    -MNIST_MEAN / MNIST_STD
}

/// Random rotation by up to `max_rotation_deg` about the center (bilinear),
/// then a random shift by up to `crop_padding` pixels, which is what padding
/// and cropping back to 28×28 amounts to.
pub fn augment(src: ArrayView1<f64>, mut dst: ArrayViewMut1<f64>, aug: &Augmentation, rng: &mut impl Rng) {
    let bg = background();
    let theta = if aug.max_rotation_deg > 0.0 {
        rng.random_range(-aug.max_rotation_deg..=aug.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let p = aug.crop_padding as i64;
    let dx = rng.random_range(-p..=p) as f64;
    let dy = rng.random_range(-p..=p) as f64;
    let (sin, cos) = theta.sin_cos();
    let c = (SIDE as f64 - 1.0) / 2.0;
    let at = |r: i64, col: i64| -> f64 {
        if r < 0 || col < 0 || r >= SIDE as i64 || col >= SIDE as i64 {
            bg
        } else {
            src[r as usize * SIDE + col as usize]
        }
    };
    for r in 0..SIDE {
        for col in 0..SIDE {
            // Inverse map: undo the shift, then the rotation.
            let y = r as f64 - dy - c;
            let x = col as f64 - dx - c;
            let sy = cos * y - sin * x + c;
            let sx = sin * y + cos * x + c;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            dst[r * SIDE + col] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(n: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, n, 2, 2] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn parses_well_formed_images() {
        let bytes = idx_images(2, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let (n, px, raw) = parse_images(&bytes, Path::new("x")).unwrap();
        assert_eq!((n, px), (2, 4));
        assert_eq!(raw, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn reports_truncation_offset() {
        let bytes = idx_images(3, &[0; 8]);
        let err = parse_images(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("truncated at byte 24"), "{err}");
        let err = parse_images(&bytes[..10], Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("byte 8"), "{err}");
    }

    #[test]
    fn rejects_wrong_magic_and_bad_labels() {
        let mut bytes = idx_images(1, &[0; 4]);
        bytes[3] = 0x01;
        assert!(parse_images(&bytes, Path::new("x")).is_err());
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 11]);
        let err = parse_labels(&labels, Path::new("y")).unwrap_err().to_string();
        assert!(err.contains("byte 9"), "{err}");
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let src = ndarray::Array1::from_shape_fn(SIDE * SIDE, |i| (i % 7) as f64);
        let mut dst = ndarray::Array1::zeros(SIDE * SIDE);
        let aug = Augmentation {
            enabled: true,
            crop_padding: 0,
            max_rotation_deg: 0.0,
        };
        augment(src.view(), dst.view_mut(), &aug, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(src, dst);
    }

    #[test]
    fn shift_moves_pixels_and_fills_background() {
        let mut src = ndarray::Array1::from_elem(SIDE * SIDE, background());
        src[14 * SIDE + 14] = 2.0;
        let aug = Augmentation {
            enabled: true,
            crop_padding: 2,
            max_rotation_deg: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dst = ndarray::Array1::zeros(SIDE * SIDE);
        augment(src.view(), dst.view_mut(), &aug, &mut rng);
        let hot: Vec<usize> = (0..SIDE * SIDE).filter(|&i| dst[i] == 2.0).collect();
        assert_eq!(hot.len(), 1);
        let (r, c) = (hot[0] / SIDE, hot[0] % SIDE);
        assert!(r.abs_diff(14) <= 2 && c.abs_diff(14) <= 2);
        assert!((dst.sum() - src.sum()).abs() < 1e-9);
    }
}
