//! The corruption benchmark: 15 corruption families at 5 severities, and
//! task-stream assembly.
//!
//! Severity parameter tables are re-derived for small images rather than
//! copied from the 224x224 benchmark; the calibration target is monotone
//! zero-shot degradation of the pretrained shapes model. Severity 0 is the
//! identity everywhere.

mod kernels;

use crate::data::{image_rng, splitmix64, ImageSet};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The 15 corruption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

pub const ALL_KINDS: [CorruptionKind; 15] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::GlassBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::ZoomBlur,
    CorruptionKind::Snow,
    CorruptionKind::Frost,
    CorruptionKind::Fog,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Elastic,
    CorruptionKind::Pixelate,
    CorruptionKind::Jpeg,
];

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Jpeg => "jpeg",
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown corruption kind \"{s}\"")))
    }
}

/// One corruption at one severity. Severity 0 means identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<CorruptionSpec> {
        if severity > 5 {
            return Err(Error::Config(format!("severity must be 0..=5, got {severity}")));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    pub fn id(&self) -> String {
        format!("{}_s{}", self.kind.name(), self.severity)
    }
}

/// Severity-indexed parameter rows, strongest last. Column meanings are
/// per kind; every column is strictly monotone in nominal strength.
pub fn severity_table(kind: CorruptionKind) -> [Vec<f64>; 5] {
    // Values calibrated for 16x16 inputs against the pretrained shapes
    // model: zero-shot accuracy must fall monotonically and by >= 15
    // points from clean to severity 5 for the gated kinds.
    match kind {
        // sigma of additive N(0, sigma^2)
        CorruptionKind::GaussianNoise => rows(&[[0.06], [0.11], [0.17], [0.24], [0.32]]),
        // Poisson rate multiplier (smaller = noisier)
        CorruptionKind::ShotNoise => rows(&[[60.0], [25.0], [12.0], [6.0], [3.0]]),
        // salt-and-pepper pixel rate
        CorruptionKind::ImpulseNoise => rows(&[[0.03], [0.08], [0.15], [0.25], [0.38]]),
        // disk kernel radius in pixels
        CorruptionKind::DefocusBlur => rows(&[[1.0], [1.6], [2.4], [3.4], [5.0]]),
        // [max shift in pixels, iterations]
        CorruptionKind::GlassBlur => rows(&[[0.7, 1.0], [1.0, 2.0], [1.4, 3.0], [1.9, 4.0], [2.5, 5.0]]),
        // line kernel length in pixels
        CorruptionKind::MotionBlur => rows(&[[2.5], [3.5], [5.0], [7.0], [9.0]]),
        // [max zoom factor, averaged steps]
        CorruptionKind::ZoomBlur => rows(&[[1.12, 3.0], [1.2, 4.0], [1.3, 5.0], [1.45, 6.0], [1.65, 7.0]]),
        // [streak amount, whitening]
        CorruptionKind::Snow => rows(&[[0.12, 0.1], [0.2, 0.18], [0.3, 0.28], [0.42, 0.4], [0.6, 0.55]]),
        // [blend, crystal points]
        CorruptionKind::Frost => rows(&[[0.18, 5.0], [0.28, 6.0], [0.4, 7.0], [0.55, 8.0], [0.7, 9.0]]),
        // additive field strength
        CorruptionKind::Fog => rows(&[[0.3], [0.45], [0.6], [0.8], [1.0]]),
        // additive value shift
        CorruptionKind::Brightness => rows(&[[0.1], [0.18], [0.28], [0.4], [0.55]]),
        // contrast factor (smaller = stronger)
        CorruptionKind::Contrast => rows(&[[0.55], [0.42], [0.32], [0.25], [0.19]]),
        // displacement amplitude in pixels
        CorruptionKind::Elastic => rows(&[[1.0], [1.8], [2.8], [4.0], [5.5]]),
        // downsample fraction (smaller = blockier)
        CorruptionKind::Pixelate => rows(&[[0.75], [0.625], [0.5], [0.375], [0.25]]),
        // JPEG quality (smaller = stronger)
        CorruptionKind::Jpeg => rows(&[[60.0], [40.0], [25.0], [15.0], [8.0]]),
    }
}

fn rows<const N: usize>(raw: &[[f64; N]; 5]) -> [Vec<f64>; 5] {
    std::array::from_fn(|i| raw[i].to_vec())
}

/// Apply one corruption to a whole set. Deterministic given the seed;
/// labels pass through unchanged; outputs stay in `[0,1]`.
pub fn corrupt(set: &ImageSet, spec: &CorruptionSpec, seed: u64) -> Result<ImageSet> {
    if spec.severity == 0 {
        return Ok(set.clone());
    }
    let params = severity_table(spec.kind)[(spec.severity - 1) as usize].clone();
    let (h, w) = (set.h, set.w);
    let mut out = set.clone();
    let per = set.pixels_per_image();
    for i in 0..set.n {
        let img = set.image(i);
        let mut rng = image_rng(seed ^ kind_salt(spec.kind, spec.severity), i);
        let corrupted = match spec.kind {
            CorruptionKind::GaussianNoise => kernels::gaussian_noise(img, params[0], &mut rng),
            CorruptionKind::ShotNoise => kernels::shot_noise(img, params[0], &mut rng),
            CorruptionKind::ImpulseNoise => kernels::impulse_noise(img, h, w, params[0], &mut rng),
            CorruptionKind::DefocusBlur => kernels::defocus_blur(img, h, w, params[0]),
            CorruptionKind::GlassBlur => {
                kernels::glass_blur(img, h, w, params[0], params[1] as usize, &mut rng)
            }
            CorruptionKind::MotionBlur => kernels::motion_blur(img, h, w, params[0], &mut rng),
            CorruptionKind::ZoomBlur => kernels::zoom_blur(img, h, w, params[0], params[1] as usize),
            CorruptionKind::Snow => kernels::snow(img, h, w, params[0], params[1], &mut rng),
            CorruptionKind::Frost => kernels::frost(img, h, w, params[0], params[1] as usize, &mut rng),
            CorruptionKind::Fog => kernels::fog(img, h, w, params[0], &mut rng),
            CorruptionKind::Brightness => kernels::brightness(img, params[0]),
            CorruptionKind::Contrast => kernels::contrast(img, params[0]),
            CorruptionKind::Elastic => kernels::elastic(img, h, w, params[0], &mut rng),
            CorruptionKind::Pixelate => kernels::pixelate(img, h, w, params[0]),
            CorruptionKind::Jpeg => kernels::jpeg(img, h, w, params[0]),
        };
        out.pixels[i * per..(i + 1) * per].copy_from_slice(&corrupted);
    }
    Ok(out)
}

fn kind_salt(kind: CorruptionKind, severity: u8) -> u64 {
    let k = ALL_KINDS.iter().position(|x| *x == kind).unwrap() as u64;
    splitmix64(k.wrapping_mul(0x100) ^ severity as u64)
}

/// One batch of a task stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl TaskBatch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// A corruption type at one severity, presented as an ordered stream of
/// test batches.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: CorruptionSpec,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub class_names: Vec<String>,
    pub batches: Vec<TaskBatch>,
}

impl Task {
    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(|b| b.size()).sum()
    }

    pub fn id(&self) -> String {
        format!("{}_seed{}", self.spec.id(), self.seed)
    }
}

/// Corrupt the whole set once, shuffle with the seed, and chunk into
/// batches (the final batch may be short).
pub fn make_task(set: &ImageSet, spec: &CorruptionSpec, batch_size: usize, seed: u64) -> Result<Task> {
    if set.n == 0 {
        return Err(Error::Config("cannot build a task from an empty image set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let corrupted = corrupt(set, spec, seed)?;
    let mut order: Vec<usize> = (0..set.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7A5C_5EED));
    order.shuffle(&mut rng);

    let per = corrupted.pixels_per_image();
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut pixels = Vec::with_capacity(chunk.len() * per);
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            pixels.extend_from_slice(corrupted.image(i));
            labels.push(corrupted.labels[i]);
        }
        batches.push(TaskBatch { pixels, labels });
    }
    Ok(Task {
        spec: *spec,
        seed,
        h: set.h,
        w: set.w,
        class_names: set.class_names.clone(),
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes;

    fn small_set() -> ImageSet {
        gen_shapes(6, 5, 16, 123).unwrap()
    }

    #[test]
    fn severity_zero_is_identity() {
        let set = small_set();
        for kind in ALL_KINDS {
            let spec = CorruptionSpec::new(kind, 0).unwrap();
            let out = corrupt(&set, &spec, 5).unwrap();
            assert!(
                set.pixels.iter().zip(&out.pixels).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{kind} severity 0 changed pixels"
            );
        }
    }

    #[test]
    fn corruption_is_deterministic_and_bounded() {
        let set = small_set();
        for kind in ALL_KINDS {
            let spec = CorruptionSpec::new(kind, 3).unwrap();
            let a = corrupt(&set, &spec, 77).unwrap();
            let b = corrupt(&set, &spec, 77).unwrap();
            assert!(
                a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{kind} not deterministic"
            );
            assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)), "{kind} out of range");
            assert_eq!(a.labels, set.labels, "{kind} changed labels");
        }
    }

    #[test]
    fn gaussian_severity_scales_perturbation() {
        let set = small_set();
        let mean_abs_delta = |sev: u8| {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev).unwrap();
            let out = corrupt(&set, &spec, 9).unwrap();
            out.pixels
                .iter()
                .zip(&set.pixels)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / set.pixels.len() as f64
        };
        assert!(mean_abs_delta(5) > mean_abs_delta(1));
    }

    #[test]
    fn tables_have_five_strictly_monotone_rows() {
        for kind in ALL_KINDS {
            let table = severity_table(kind);
            assert_eq!(table.len(), 5);
            let cols = table[0].len();
            assert!(table.iter().all(|r| r.len() == cols), "{kind} ragged table");
            for c in 0..cols {
                let col: Vec<f64> = table.iter().map(|r| r[c]).collect();
                let increasing = col.windows(2).all(|w| w[1] > w[0]);
                let decreasing = col.windows(2).all(|w| w[1] < w[0]);
                assert!(
                    increasing || decreasing,
                    "{kind} column {c} not strictly monotone: {col:?}"
                );
            }
        }
    }

    #[test]
    fn pixelate_k4_makes_4x4_blocks() {
        // severity 5 on a 16x16 image: fraction 0.25 -> 4x4 grid of
        // constant 4-pixel blocks
        let set = small_set();
        let spec = CorruptionSpec::new(CorruptionKind::Pixelate, 5).unwrap();
        let out = corrupt(&set, &spec, 0).unwrap();
        let img = out.image(0);
        for by in 0..4 {
            for bx in 0..4 {
                for c in 0..3 {
                    let v = img[((by * 4) * 16 + bx * 4) * 3 + c];
                    for dy in 0..4 {
                        for dx in 0..4 {
                            assert_eq!(img[((by * 4 + dy) * 16 + bx * 4 + dx) * 3 + c], v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn make_task_chunks_and_shuffles_deterministically() {
        let set = gen_shapes(20, 5, 16, 1).unwrap(); // 100 images
        let spec = CorruptionSpec::new(CorruptionKind::Fog, 2).unwrap();
        let t = make_task(&set, &spec, 30, 4).unwrap();
        let sizes: Vec<usize> = t.batches.iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![30, 30, 30, 10]);
        assert_eq!(t.total_samples(), 100);

        let t2 = make_task(&set, &spec, 30, 4).unwrap();
        for (a, b) in t.batches.iter().zip(&t2.batches) {
            assert_eq!(a.labels, b.labels);
            assert!(a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // batch size 1 supported
        let t1 = make_task(&set, &spec, 1, 4).unwrap();
        assert_eq!(t1.batches.len(), 100);
        assert!(t1.batches.iter().all(|b| b.size() == 1));
    }

    #[test]
    fn make_task_rejects_degenerate_inputs() {
        let set = small_set();
        let spec = CorruptionSpec::new(CorruptionKind::Fog, 1).unwrap();
        assert!(make_task(&set, &spec, 0, 0).is_err());
        let empty = ImageSet {
            n: 0,
            h: 16,
            w: 16,
            pixels: vec![],
            labels: vec![],
            class_names: vec!["a".into(), "b".into()],
        };
        assert!(make_task(&empty, &spec, 4, 0).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ALL_KINDS {
            let parsed: CorruptionKind = kind.name().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("not_a_kind".parse::<CorruptionKind>().is_err());
    }
}
