//! Portable pixmap/graymap files and the on-disk modality bundle.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::gcontrolnet::{ModalityBundle, ModalityKind, CONTROL_SIZE};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(raw: &[u8], w: usize, h: usize, rgb: bool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut buf)
        .with_subtype(subtype)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("pnm encode: {e}")))?;
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| Error::Format(format!("pnm decode: {e}")))
}

/// 3×H×W tensor in `[0, 1]` → binary PPM bytes.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Validation(format!("a pixmap needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let raw: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (ch, i)))
        .map(|(ch, i)| to_u8(image.data()[ch * plane + i]))
        .collect();
    encode(&raw, w, h, true)
}

/// Any tensor whose last two axes are H×W → PGM bytes with the leading
/// channels stacked vertically.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() < 2 {
        return Err(Error::Validation(format!("a graymap needs at least 2 axes, got {s:?}")));
    }
    let w = s[s.len() - 1];
    let h = map.len() / w.max(1);
    let raw: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    encode(&raw, w, h, false)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, ppm_bytes(image)?)?)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    Ok(std::fs::write(path, pgm_bytes(map)?)?)
}

/// PPM → 3×H×W tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = decode(&std::fs::read(path)?)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let raw = img.into_raw();
    Tensor::new(&[3, h, w], (0..3 * plane).map(|i| raw[(i % plane) * 3 + i / plane] as f32 / 255.0).collect())
}

/// PGM → H×W tensor in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let img = decode(&std::fs::read(path)?)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(&[h, w], img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

pub const BUNDLE_MANIFEST: &str = "bundle.txt";

/// Writes one graymap per present modality plus a manifest with the lines
/// `present=<kinds>` and `<kind>=<file>`.
pub fn write_bundle(dir: &Path, bundle: &ModalityBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut present = Vec::new();
    let mut lines = Vec::new();
    for kind in ModalityKind::ALL {
        if let Some(map) = bundle.get(kind) {
            let file = format!("{}.pgm", kind.name());
            write_pgm(&dir.join(&file), map)?;
            present.push(kind.name());
            lines.push(format!("{}={file}", kind.name()));
        }
    }
    let mut text = format!("present={}\n", present.join(","));
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    Ok(std::fs::write(dir.join(BUNDLE_MANIFEST), text)?)
}

/// Reads a bundle directory written by [`write_bundle`] (or by hand).
pub fn read_bundle(dir: &Path) -> Result<ModalityBundle> {
    let text = std::fs::read_to_string(dir.join(BUNDLE_MANIFEST))?;
    let mut present: Option<Vec<ModalityKind>> = None;
    let mut files = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bundle manifest line {line:?} is not key=value")))?;
        if k == "present" {
            let kinds = v
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| ModalityKind::parse(s).map_err(|_| Error::Format(format!("unknown modality {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            present = Some(kinds);
        } else {
            let kind = ModalityKind::parse(k).map_err(|_| Error::Format(format!("unknown bundle key {k:?}")))?;
            files.push((kind, v.to_string()));
        }
    }
    let present = present.ok_or_else(|| Error::Format("bundle manifest lacks present=".into()))?;
    let mut bundle = ModalityBundle::empty();
    for kind in present {
        let file = files
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| Error::Format(format!("no file listed for {}", kind.name())))?;
        let flat = read_pgm(&dir.join(file))?;
        let c = kind.channels();
        if flat.shape() != [c * CONTROL_SIZE, CONTROL_SIZE] {
            return Err(Error::Validation(format!(
                "{} graymap is {:?}, expected {}×{}",
                kind.name(),
                flat.shape(),
                c * CONTROL_SIZE,
                CONTROL_SIZE
            )));
        }
        bundle.set(kind, Some(flat.reshape(&[c, CONTROL_SIZE, CONTROL_SIZE])?));
    }
    bundle.validate()?;
    Ok(bundle)
}
