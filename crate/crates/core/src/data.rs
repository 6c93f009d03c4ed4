//! Datasets: the built-in synthetic shapes generator and the CIFAR-10
//! binary test-batch loader.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A labeled image collection. Pixels are NHWC f64 in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl ImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.h * self.w * 3
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.n * self.pixels_per_image() {
            return Err(Error::Dimension("pixel buffer does not match n*h*w*3".into()));
        }
        if self.labels.len() != self.n {
            return Err(Error::Dimension("label count does not match image count".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }
}

/// Deterministic sub-stream for per-image randomness: order-independent
/// given (seed, index).
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15)))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];
const COLOR_NAMES: [&str; 5] = ["red", "green", "blue", "yellow", "magenta"];
const COLORS: [[f64; 3]; 5] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.10, 0.80],
];

/// (shape, color) indices for class `k`. Colors deliberately repeat
/// within the first five classes (two colors over five shapes) so color
/// alone cannot separate them and blur-family corruptions actually bite;
/// the pair stays globally unique for up to 25 classes.
fn class_shape_color(k: usize) -> (usize, usize) {
    let shape = k % 5;
    let block = k / 5;
    (shape, (shape % 2 + 2 * block) % 5)
}

/// Class names for `classes` shape/color combinations.
pub fn shapes_class_names(classes: usize) -> Result<Vec<String>> {
    if !(2..=25).contains(&classes) {
        return Err(Error::Config(format!(
            "shapes generator supports 2..=25 classes, got {classes}"
        )));
    }
    Ok((0..classes)
        .map(|k| {
            let (shape, color) = class_shape_color(k);
            format!("{} {}", COLOR_NAMES[color], SHAPES[shape])
        })
        .collect())
}

/// Render `n_per_class` images per class: colored geometric figures with
/// jittered position and scale over a noisy gray background. Deterministic
/// given the seed.
pub fn gen_shapes(n_per_class: usize, classes: usize, size: usize, seed: u64) -> Result<ImageSet> {
    let class_names = shapes_class_names(classes)?;
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small for the generator")));
    }
    let n = n_per_class * classes;
    let mut pixels = vec![0.0; n * size * size * 3];
    let mut labels = vec![0usize; n];

    for class in 0..classes {
        let (shape_kind, color_idx) = class_shape_color(class);
        let color = COLORS[color_idx];
        for j in 0..n_per_class {
            let idx = class * n_per_class + j;
            labels[idx] = class;
            let mut rng = image_rng(seed, idx);
            let img = &mut pixels[idx * size * size * 3..(idx + 1) * size * size * 3];

            for y in 0..size {
                for x in 0..size {
                    let v = rng.random::<f64>() * 0.25;
                    for c in 0..3 {
                        img[(y * size + x) * 3 + c] = v;
                    }
                }
            }

            let s = size as f64;
            let cx = s / 2.0 + (rng.random::<f64>() - 0.5) * s / 5.0;
            let cy = s / 2.0 + (rng.random::<f64>() - 0.5) * s / 5.0;
            let r = s * (0.25 + rng.random::<f64>() * 0.1);
            let lum = 0.82 + rng.random::<f64>() * 0.18;

            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let inside = match shape_kind {
                        0 => dx * dx + dy * dy <= r * r,
                        1 => dx.abs() <= r * 0.82 && dy.abs() <= r * 0.82,
                        2 => {
                            // upward triangle inscribed in radius r
                            let base = cy + r * 0.7;
                            let apex = cy - r;
                            let ty = y as f64 + 0.5;
                            if ty > base || ty < apex {
                                false
                            } else {
                                let frac = (ty - apex) / (base - apex);
                                dx.abs() <= frac * r * 0.9
                            }
                        }
                        3 => {
                            (dx.abs() <= r * 0.3 && dy.abs() <= r)
                                || (dy.abs() <= r * 0.3 && dx.abs() <= r)
                        }
                        _ => {
                            let d2 = dx * dx + dy * dy;
                            d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5)
                        }
                    };
                    if inside {
                        for c in 0..3 {
                            img[(y * size + x) * 3 + c] = (color[c] * lum).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }

    let set = ImageSet { n, h: size, w: size, pixels, labels, class_names };
    set.validate()?;
    Ok(set)
}

const CIFAR_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];
const CIFAR_RECORD: usize = 3073; // 1 label byte + 3x1024 channel planes

/// Parse the standard CIFAR-10 binary test batch (`test_batch.bin`,
/// 3073-byte records with CHW channel planes).
pub fn load_cifar10(dir: &std::path::Path) -> Result<ImageSet> {
    let path = if dir.is_file() { dir.to_path_buf() } else { dir.join("test_batch.bin") };
    let bytes = std::fs::read(&path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Parse(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let (h, w) = (32usize, 32usize);
    let mut pixels = vec![0.0; n * h * w * 3];
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Parse(format!("record {i}: label {label} out of range")));
        }
        labels[i] = label;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = rec[1 + c * 1024 + y * w + x] as f64 / 255.0;
                    pixels[(i * h * w + y * w + x) * 3 + c] = v;
                }
            }
        }
    }
    Ok(ImageSet {
        n,
        h,
        w,
        pixels,
        labels,
        class_names: CIFAR_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_shapes_is_balanced_and_deterministic() {
        let a = gen_shapes(20, 5, 16, 9).unwrap();
        assert_eq!(a.n, 100);
        for c in 0..5 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        let b = gen_shapes(20, 5, 16, 9).unwrap();
        assert!(a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gen_shapes_rejects_bad_class_counts() {
        assert!(gen_shapes(4, 1, 16, 0).is_err());
        assert!(gen_shapes(4, 26, 16, 0).is_err());
    }

    #[test]
    fn cifar_loader_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        // three synthetic records
        let mut bytes = Vec::new();
        for label in [3u8, 7, 0] {
            bytes.push(label);
            bytes.extend((0..3072).map(|i| (i % 256) as u8));
        }
        std::fs::write(&path, &bytes).unwrap();
        let set = load_cifar10(dir.path()).unwrap();
        assert_eq!(set.n, 3);
        assert_eq!((set.h, set.w), (32, 32));
        assert_eq!(set.labels, vec![3, 7, 0]);
        assert_eq!(set.class_names.len(), 10);
        // CHW plane layout: first red/green bytes of image 0 are 0 and 1024%256=0
        assert_eq!(set.pixels[0], 0.0);
        assert_eq!(set.pixels[1], 0.0);
        assert!((set.pixels[3] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn cifar_loader_rejects_malformed_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Parse(_))));
    }

    #[test]
    fn cifar_loader_missing_dir_is_io_error() {
        assert!(matches!(
            load_cifar10(std::path::Path::new("/nonexistent/nowhere")),
            Err(Error::Io(_))
        ));
    }
}
