//! Corpus directory layout: `manifest.json`, `img/<id>.pgm`, `gt/<id>.pgm`
//! and `ann/<id>_<m>.pgm`, all binary 8-bit graymaps. Masks use 0 and 255.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, GrayImage, Sample, SourceNoise, Split};
use crate::mask::Mask;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    seed: u64,
    num_sources: usize,
    height: usize,
    width: usize,
    target_dice: Option<f64>,
    noise: Vec<SourceNoise>,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    split: Split,
}

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        file: file.to_path_buf(),
        source,
    }
}

fn write_pgm(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(data.len() + 32);
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(data, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| CorpusError::Image {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    fs::write(path, buf).map_err(io_err(path))
}

fn read_pgm(path: &Path, expected: (usize, usize)) -> Result<Vec<u8>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img =
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).map_err(|e| {
            CorpusError::Image {
                file: path.to_path_buf(),
                detail: e.to_string(),
            }
        })?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(CorpusError::Image {
            file: path.to_path_buf(),
            detail: "expected an 8-bit graymap".into(),
        });
    };
    let found = (gray.height() as usize, gray.width() as usize);
    if found != expected {
        return Err(CorpusError::Dimension {
            file: path.to_path_buf(),
            field: "height x width".into(),
            expected,
            found,
        });
    }
    Ok(gray.into_raw())
}

fn write_mask(path: &Path, mask: &Mask) -> Result<(), CorpusError> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_pgm(path, mask.height(), mask.width(), &bytes)
}

fn read_mask(path: &Path, expected: (usize, usize)) -> Result<Mask, CorpusError> {
    let bytes = read_pgm(path, expected)?;
    let mut data = Vec::with_capacity(bytes.len());
    for (offset, &value) in bytes.iter().enumerate() {
        match value {
            0 => data.push(0),
            255 => data.push(1),
            _ => {
                return Err(CorpusError::NonBinary {
                    file: path.to_path_buf(),
                    value,
                    offset,
                })
            }
        }
    }
    Ok(Mask::new(expected.0, expected.1, data)?)
}

fn paths(dir: &Path, id: &str, m: usize) -> (PathBuf, PathBuf, Vec<PathBuf>) {
    (
        dir.join("img").join(format!("{id}.pgm")),
        dir.join("gt").join(format!("{id}.pgm")),
        (0..m)
            .map(|k| dir.join("ann").join(format!("{id}_{k}.pgm")))
            .collect(),
    )
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    for sub in ["img", "gt", "ann"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let m = corpus.num_sources();
    for s in &corpus.samples {
        let (img, gt, anns) = paths(dir, &s.id, m);
        let (h, w) = s.image.shape();
        write_pgm(&img, h, w, s.image.data())?;
        write_mask(&gt, &s.clean_mask)?;
        for (a, path) in s.annotations.iter().zip(&anns) {
            write_mask(path, a)?;
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        seed: corpus.seed,
        num_sources: m,
        height: corpus.height,
        width: corpus.width,
        target_dice: corpus.target_dice,
        noise: corpus.noise.clone(),
        samples: corpus
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.id.clone(),
                split: s.split,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
        file: path.clone(),
        field: "<document>".into(),
        detail: e.to_string(),
    })?;
    let bad = |field: &str, detail: String| CorpusError::Manifest {
        file: path.clone(),
        field: field.into(),
        detail,
    };
    if manifest.format != FORMAT_VERSION {
        return Err(bad(
            "format",
            format!("unsupported version {}", manifest.format),
        ));
    }
    if manifest.noise.len() != manifest.num_sources {
        return Err(bad(
            "noise",
            format!(
                "{} entries for num_sources = {}",
                manifest.noise.len(),
                manifest.num_sources
            ),
        ));
    }
    if manifest.samples.is_empty() {
        return Err(bad("samples", "no samples listed".into()));
    }
    let shape = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (k, entry) in manifest.samples.iter().enumerate() {
        if entry.id.is_empty() || entry.id.contains(['/', '\\']) {
            return Err(bad(
                &format!("samples[{k}].id"),
                format!("invalid id {:?}", entry.id),
            ));
        }
        let (img, gt, anns) = paths(dir, &entry.id, manifest.num_sources);
        let image = GrayImage::new(shape.0, shape.1, read_pgm(&img, shape)?)?;
        let clean_mask = read_mask(&gt, shape)?;
        let annotations = anns
            .iter()
            .map(|p| read_mask(p, shape))
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            id: entry.id.clone(),
            split: entry.split,
            image,
            clean_mask,
            annotations,
        });
    }
    Ok(Corpus {
        seed: manifest.seed,
        height: manifest.height,
        width: manifest.width,
        target_dice: manifest.target_dice,
        noise: manifest.noise,
        samples,
    })
}
