//! On-disk sample layout: binary PGM images/masks plus a `key=value` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{annotation_ratio, DataError, SampleInfo, SegSample};
use crate::mask::{Mask, WeakMask};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
#[error("{path}: malformed {field}: {detail}")]
pub struct PgmError {
    pub path: String,
    pub field: String,
    pub detail: String,
}

fn malformed(path: &Path, field: &str, detail: impl Into<String>) -> PgmError {
    PgmError {
        path: path.display().to_string(),
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary graymap with maxval 255; returns `(width, height, pixels)`.
pub(crate) fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), PgmError> {
    let mut pos = 0;
    let mut token = |field: &str| -> Result<String, PgmError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(path, field, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P5" {
        return Err(malformed(path, "magic", format!("expected P5, found {magic}")));
    }
    let mut number = |field: &str| -> Result<usize, PgmError> {
        let t = token(field)?;
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| malformed(path, field, format!("`{t}` is not a positive integer")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(malformed(path, "maxval", format!("expected 255, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    if raster.len() != width * height {
        return Err(malformed(
            path,
            "raster",
            format!("expected {} bytes, found {}", width * height, raster.len()),
        ));
    }
    Ok((width, height, raster.to_vec()))
}

fn mask_pixels(mask: &Mask) -> Vec<u8> {
    mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

fn read_mask(path: &Path) -> Result<Mask, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, px) = decode_pgm(&bytes, path)?;
    let bits = px
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(malformed(path, "raster", format!("mask value {other} is not 0 or 255"))),
        })
        .collect::<Result<_, _>>()?;
    Ok(Mask::new(h, w, bits))
}

fn file(dir: &Path, stem: &str, id: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{id}.{ext}"))
}

/// Writes `img_<id>.pgm`, `gt_<id>.pgm`, `weak_<id>.pgm` and `meta_<id>.txt`.
pub fn save_sample(sample: &SegSample, dir: &Path) -> Result<(), DataError> {
    let (h, w) = (sample.full.height(), sample.full.width());
    let img: Vec<u8> = sample
        .image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let id = sample.id;
    let writes = [
        (file(dir, "img", id, "pgm"), encode_pgm(w, h, &img)),
        (file(dir, "gt", id, "pgm"), encode_pgm(w, h, &mask_pixels(&sample.full))),
        (
            file(dir, "weak", id, "pgm"),
            encode_pgm(w, h, &mask_pixels(sample.weak.labeled())),
        ),
        (
            file(dir, "meta", id, "txt"),
            format!(
                "id={}\nseed={}\ntopology={}\nradius={}\nachieved_ratio={}\nspec_digest={}\n",
                id,
                sample.info.seed,
                sample.info.topology,
                sample.info.radius,
                annotation_ratio(&sample.weak),
                sample.info.spec_digest
            )
            .into_bytes(),
        ),
    ];
    for (path, bytes) in writes {
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

fn meta_field<'a>(
    lines: &'a [(String, String)],
    key: &str,
    path: &Path,
) -> Result<&'a str, PgmError> {
    lines
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| malformed(path, key, "missing"))
}

fn parse_meta<T: std::str::FromStr>(
    lines: &[(String, String)],
    key: &str,
    path: &Path,
) -> Result<T, PgmError> {
    let raw = meta_field(lines, key, path)?;
    raw.parse()
        .map_err(|_| malformed(path, key, format!("cannot parse `{raw}`")))
}

pub fn load_sample(dir: &Path, id: usize) -> Result<SegSample, DataError> {
    let meta_path = file(dir, "meta", id, "txt");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let lines = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| malformed(&meta_path, l, "expected key=value"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let meta_id: usize = parse_meta(&lines, "id", &meta_path)?;
    if meta_id != id {
        return Err(malformed(&meta_path, "id", format!("expected {id}, found {meta_id}")).into());
    }
    let info = SampleInfo {
        seed: parse_meta(&lines, "seed", &meta_path)?,
        topology: parse_meta(&lines, "topology", &meta_path)?,
        radius: parse_meta(&lines, "radius", &meta_path)?,
        spec_digest: meta_field(&lines, "spec_digest", &meta_path)?.to_string(),
    };

    let img_path = file(dir, "img", id, "pgm");
    let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
    let (w, h, px) = decode_pgm(&bytes, &img_path)?;
    let image = Tensor::image(h, w, px.iter().map(|&v| v as f64 / 255.0).collect())
        .expect("decoded extents are positive");
    let full = read_mask(&file(dir, "gt", id, "pgm"))?;
    let weak = read_mask(&file(dir, "weak", id, "pgm"))?;
    let gt_path = file(dir, "gt", id, "pgm");
    if full.height() != h || full.width() != w || !weak.same_extent(&full) {
        return Err(malformed(&gt_path, "extent", "image and mask sizes differ").into());
    }
    if full.area() == 0 {
        return Err(malformed(&gt_path, "raster", "ground-truth mask is empty").into());
    }
    Ok(SegSample {
        id,
        image,
        full,
        weak: WeakMask::new(weak),
        info,
    })
}

/// Loads every sample with a `meta_<id>.txt` in `dir`, ordered by id.
pub fn load_dir(dir: &Path) -> Result<Vec<SegSample>, DataError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("meta_")
            .and_then(|rest| rest.strip_suffix(".txt"))
            .and_then(|id| id.parse::<usize>().ok())
        {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.into_iter().map(|id| load_sample(dir, id)).collect()
}
