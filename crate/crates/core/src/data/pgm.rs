//! Binary 8-bit portable graymaps (`P5`) and the dataset directory layout
//! `images/<id>.pgm` + `masks/<id>.pgm`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Sample;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed graymap at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("images without masks: {}", .0.join(", "))]
    MissingMask(Vec<String>),
    #[error("masks without images: {}", .0.join(", "))]
    MissingImage(Vec<String>),
    #[error("{id}: image is {image:?} but mask is {mask:?}")]
    SizeMismatch {
        id: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
}

/// Decoded graymap, levels rescaled to 0–255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Parse a `P5` graymap with `maxval < 256`. Header comments are allowed.
pub fn read_pgm(bytes: &[u8]) -> Result<Pgm, (usize, String)> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "expected magic P5".into()));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            let name = ["width", "height", "maxval"][i];
            return Err((start, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| (start, "number out of range".to_string()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err((pos, "zero image extent".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err((pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err((pos, "expected whitespace before raster".into())),
    }
    let need = width * height;
    if bytes.len() - pos < need {
        return Err((bytes.len(), format!("raster needs {need} bytes, found {}", bytes.len() - pos)));
    }
    let raw = &bytes[pos..pos + need];
    let pixels = if maxval == 255 {
        raw.to_vec()
    } else {
        raw.iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(Pgm { height, width, pixels })
}

pub fn write_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_file(path: &Path) -> Result<Pgm, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_pgm(&bytes).map_err(|(offset, message)| DatasetError::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    })
}

fn pgm_ids(dir: &Path) -> Result<BTreeSet<String>, DatasetError> {
    let mut ids = BTreeSet::new();
    if !dir.exists() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Load every `images/<id>.pgm` with its `masks/<id>.pgm`, sorted by id.
/// Masks are binarized at 128.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DatasetError> {
    let images = pgm_ids(&dir.join("images"))?;
    let masks = pgm_ids(&dir.join("masks"))?;
    let orphans: Vec<String> = images.difference(&masks).cloned().collect();
    if !orphans.is_empty() {
        return Err(DatasetError::MissingMask(orphans));
    }
    let orphans: Vec<String> = masks.difference(&images).cloned().collect();
    if !orphans.is_empty() {
        return Err(DatasetError::MissingImage(orphans));
    }
    images
        .into_iter()
        .map(|id| {
            let img = read_file(&dir.join("images").join(format!("{id}.pgm")))?;
            let mask = read_file(&dir.join("masks").join(format!("{id}.pgm")))?;
            if (img.height, img.width) != (mask.height, mask.width) {
                return Err(DatasetError::SizeMismatch {
                    id,
                    image: (img.height, img.width),
                    mask: (mask.height, mask.width),
                });
            }
            Ok(Sample {
                id,
                height: img.height,
                width: img.width,
                image: img.pixels,
                mask: mask.pixels.iter().map(|&v| (v >= 128) as u8).collect(),
            })
        })
        .collect()
}

/// Write samples in the layout read by [`load_dataset`]; masks as 0/255.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<(), DatasetError> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    for s in samples {
        let write = |sub: &str, pixels: &[u8]| -> Result<(), DatasetError> {
            let path = dir.join(sub).join(format!("{}.pgm", s.id));
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            f.write_all(&write_pgm(s.height, s.width, pixels))
                .map_err(io_err(&path))
        };
        write("images", &s.image)?;
        let mask: Vec<u8> = s.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        write("masks", &mask)?;
    }
    Ok(())
}
