//! Synthetic multi-annotator segmentation corpora.
//!
//! Each sample holds a grayscale image, its clean mask (used only for
//! evaluation) and one noisy annotation per source. Source `m` is corrupted by
//! [`NoiseKind::ALL`]`[m]`, with a magnitude calibrated so that the mean Dice of
//! that source against the clean masks hits a target.

mod io;
pub mod morph;
mod noise;
mod shapes;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_corpus, save_corpus, MANIFEST};
pub use noise::{
    apply_noise, catmull_rom_closed, fill_polygon, shift_right, stochastic_round, NoiseKind,
    NoiseSpec,
};

use crate::autodiff::Tensor;
use crate::mask::{Mask, MaskError};
use crate::metrics::dice;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown noise kind {0:?}")]
    UnknownNoiseKind(String),
    #[error("{kind} magnitude {magnitude} outside [{lo}, {hi}]")]
    Magnitude {
        kind: NoiseKind,
        magnitude: f64,
        lo: f64,
        hi: f64,
    },
    #[error(
        "{kind}: target mean Dice {target} ± {tol} unreachable; achieved bracket [{low}, {high}]"
    )]
    Unreachable {
        kind: NoiseKind,
        target: f64,
        tol: f64,
        low: f64,
        high: f64,
    },
    #[error("{}: {source}", file.display())]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {detail}", file.display())]
    Image { file: PathBuf, detail: String },
    #[error("{}: field `{field}`: {detail}", file.display())]
    Manifest {
        file: PathBuf,
        field: String,
        detail: String,
    },
    #[error("{}: field `{field}`: expected {expected:?}, found {found:?}", file.display())]
    Dimension {
        file: PathBuf,
        field: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{}: field `pixels`: byte {value} at offset {offset} is not a binary mask value (0 or 255)", file.display())]
    NonBinary {
        file: PathBuf,
        value: u8,
        offset: usize,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.h, self.w)
    }
}

impl GrayImage {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, CorpusError> {
        if data.len() != h * w {
            return Err(CorpusError::InvalidArgument(format!(
                "image data has {} bytes, expected {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Intensities in `[0, 1]` as a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.h, self.w],
            self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("image shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: GrayImage,
    pub clean_mask: Mask,
    pub annotations: Vec<Mask>,
}

impl Sample {
    /// Annotations stacked as a `[M, H, W]` tensor of 0/1 values.
    pub fn annotation_tensor(&self) -> Tensor {
        let (h, w) = self.clean_mask.shape();
        let data = self.annotations.iter().flat_map(|a| a.to_f64()).collect();
        Tensor::new(vec![self.annotations.len(), h, w], data).expect("annotation shape")
    }
}

/// Calibrated noise of one annotation source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceNoise {
    pub kind: NoiseKind,
    pub magnitude: f64,
    /// Mean Dice of this source against the clean masks.
    pub achieved_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub target_dice: Option<f64>,
    pub noise: Vec<SourceNoise>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn num_sources(&self) -> usize {
        self.noise.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.split(Split::Test)
    }

    /// Keeps only the first `count` sources.
    pub fn with_source_prefix(&self, count: usize) -> Result<Corpus, CorpusError> {
        if count == 0 || count > self.num_sources() {
            return Err(CorpusError::InvalidArgument(format!(
                "source count {count} outside 1..={}",
                self.num_sources()
            )));
        }
        let mut out = self.clone();
        out.noise.truncate(count);
        for s in &mut out.samples {
            s.annotations.truncate(count);
        }
        Ok(out)
    }

    /// Replaces every annotation with the clean mask.
    pub fn with_perfect_annotations(&self) -> Corpus {
        let mut out = self.clone();
        out.target_dice = Some(1.0);
        for n in &mut out.noise {
            n.magnitude = n.kind.magnitude_at(0.0);
            n.achieved_dice = 1.0;
        }
        for s in &mut out.samples {
            let clean = s.clean_mask.clone();
            s.annotations.iter_mut().for_each(|a| *a = clean.clone());
        }
        out
    }

    /// Mean Dice of all annotations against the clean masks.
    pub fn mean_annotation_dice(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in &self.samples {
            for a in &s.annotations {
                sum += dice(a, &s.clean_mask).expect("corpus shapes agree");
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one purpose, sample and sub-stream of a corpus seed.
pub fn derive_seed(seed: u64, purpose: u64, index: u64, sub: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ splitmix(purpose)) ^ index) ^ sub)
}

const PURPOSE_CLEAN: u64 = 1;
const PURPOSE_NOISE: u64 = 2;

/// Seed of the noise applied to `source` of sample `index`.
pub fn noise_seed(corpus_seed: u64, index: usize, source: usize) -> u64 {
    derive_seed(corpus_seed, PURPOSE_NOISE, index as u64, source as u64)
}

const MIN_EXTENT: usize = 16;

/// `n` images with their clean masks. Sample `i` depends only on `(seed, i)`.
pub fn generate_clean(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<(GrayImage, Mask)>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::InvalidArgument("n must be positive".into()));
    }
    if height < MIN_EXTENT || width < MIN_EXTENT {
        return Err(CorpusError::InvalidArgument(format!(
            "image extents must be at least {MIN_EXTENT}, got {height}x{width}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PURPOSE_CLEAN, i as u64, 0));
            shapes::sample_clean(&mut rng, height, width)
        })
        .collect())
}

/// Pixel is foreground iff at least half of the annotations mark it.
pub fn majority_vote(annotations: &[Mask]) -> Result<Mask, CorpusError> {
    let first = annotations
        .first()
        .ok_or_else(|| CorpusError::InvalidArgument("majority vote of zero annotations".into()))?;
    for a in annotations {
        first.check_same_shape(a)?;
    }
    let m = annotations.len();
    let (h, w) = first.shape();
    let mut votes = vec![0usize; h * w];
    for a in annotations {
        for (v, &x) in votes.iter_mut().zip(a.data()) {
            *v += x as usize;
        }
    }
    Ok(Mask::new(
        h,
        w,
        votes.iter().map(|&v| u8::from(2 * v >= m)).collect(),
    )?)
}

/// Mean Dice of source `source` corrupted by `kind` at `magnitude`.
fn mean_noisy_dice(
    masks: &[Mask],
    kind: NoiseKind,
    magnitude: f64,
    seed: u64,
    source: usize,
) -> Result<f64, CorpusError> {
    let mut sum = 0.0;
    for (i, m) in masks.iter().enumerate() {
        let spec = NoiseSpec {
            kind,
            magnitude,
            seed: noise_seed(seed, i, source),
        };
        sum += dice(&apply_noise(m, &spec)?, m)?;
    }
    Ok(sum / masks.len() as f64)
}

const BISECTION_STEPS: usize = 40;

/// Bisects each source's severity so that its mean Dice against `masks` lies
/// within `target ± tol`. Noise seeds follow [`noise_seed`], so applying the
/// returned magnitudes with those seeds reproduces the achieved values.
pub fn calibrate_noise(
    masks: &[Mask],
    num_sources: usize,
    seed: u64,
    target: f64,
    tol: f64,
) -> Result<Vec<SourceNoise>, CorpusError> {
    if masks.is_empty() {
        return Err(CorpusError::InvalidArgument(
            "no masks to calibrate on".into(),
        ));
    }
    if !(target > 0.5 && target <= 1.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "target Dice {target} outside (0.5, 1]"
        )));
    }
    if !(tol > 0.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "tolerance {tol} must be positive"
        )));
    }
    if num_sources == 0 || num_sources > NoiseKind::ALL.len() {
        return Err(CorpusError::InvalidArgument(format!(
            "source count {num_sources} outside 1..={}",
            NoiseKind::ALL.len()
        )));
    }
    let mut out = Vec::with_capacity(num_sources);
    for (source, &kind) in NoiseKind::ALL[..num_sources].iter().enumerate() {
        let eval = |sev: f64| {
            let mag = kind.magnitude_at(sev);
            mean_noisy_dice(masks, kind, mag, seed, source).map(|d| (mag, d))
        };
        let mildest = eval(0.0)?;
        if target >= 1.0 {
            out.push(SourceNoise {
                kind,
                magnitude: mildest.0,
                achieved_dice: mildest.1,
            });
            continue;
        }
        let harshest = eval(1.0)?;
        if mildest.1 < target - tol || harshest.1 > target + tol {
            return Err(CorpusError::Unreachable {
                kind,
                target,
                tol,
                low: harshest.1,
                high: mildest.1,
            });
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best = if (mildest.1 - target).abs() <= (harshest.1 - target).abs() {
            mildest
        } else {
            harshest
        };
        for _ in 0..BISECTION_STEPS {
            if (best.1 - target).abs() <= tol / 4.0 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let probe = eval(mid)?;
            if (probe.1 - target).abs() < (best.1 - target).abs() {
                best = probe;
            }
            if probe.1 > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (best.1 - target).abs() > tol {
            return Err(CorpusError::Unreachable {
                kind,
                target,
                tol,
                low: harshest.1,
                high: mildest.1,
            });
        }
        log::debug!(
            "{kind}: magnitude {:.4} gives mean Dice {:.4}",
            best.0,
            best.1
        );
        out.push(SourceNoise {
            kind,
            magnitude: best.0,
            achieved_dice: best.1,
        });
    }
    Ok(out)
}

/// Parameters of [`generate_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Total number of samples; the last `test_count` form the test split.
    pub n: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub num_sources: usize,
    pub target_dice: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 250,
            test_count: 50,
            height: 32,
            width: 32,
            num_sources: 5,
            target_dice: 0.7,
            tol: 0.02,
            seed: 0,
        }
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    if cfg.test_count >= cfg.n {
        return Err(CorpusError::InvalidArgument(format!(
            "test count {} leaves no training samples out of {}",
            cfg.test_count, cfg.n
        )));
    }
    let clean = generate_clean(cfg.n, cfg.height, cfg.width, cfg.seed)?;
    let masks: Vec<Mask> = clean.iter().map(|(_, m)| m.clone()).collect();
    let noise = calibrate_noise(&masks, cfg.num_sources, cfg.seed, cfg.target_dice, cfg.tol)?;
    let width = cfg.n.to_string().len();
    let mut samples = Vec::with_capacity(cfg.n);
    for (i, (image, clean_mask)) in clean.into_iter().enumerate() {
        let annotations = noise
            .iter()
            .enumerate()
            .map(|(m, src)| {
                apply_noise(
                    &clean_mask,
                    &NoiseSpec {
                        kind: src.kind,
                        magnitude: src.magnitude,
                        seed: noise_seed(cfg.seed, i, m),
                    },
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            id: format!("s{i:0width$}"),
            split: if i + cfg.test_count < cfg.n {
                Split::Train
            } else {
                Split::Test
            },
            image,
            clean_mask,
            annotations,
        });
    }
    Ok(Corpus {
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        target_dice: Some(cfg.target_dice),
        noise,
        samples,
    })
}
