use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, PixelRect, Tensor};
use crate::vit::ModelConfig;

/// Background noise is uniform on `[0, NOISE_AMPLITUDE)`.
pub const NOISE_AMPLITUDE: f32 = 0.3;

/// One labelled image at the global size, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Where the class glyph was stamped, for synthetic images.
    pub glyph_box: Option<PixelRect>,
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
}

/// Binary `side×side` glyph of a class: thick cross, square outline, thin
/// diagonal and ring for the first four, seeded scatter patterns after that.
/// The four shapes also differ in ink (about 86%, 44%, 18% and 66% of the
/// cells), so a class shows in the glyph's brightness as well as its shape.
pub fn glyph_pattern(class: usize, side: usize) -> Vec<bool> {
    let s = side as f64;
    let cell = |r: usize, c: usize| -> bool {
        let (y, x) = (r as f64 + 0.5 - s / 2.0, c as f64 + 0.5 - s / 2.0);
        match class {
            0 => {
                let (lo, hi) = (3 * side / 16, side - 3 * side / 16);
                (lo..hi).contains(&r) || (lo..hi).contains(&c)
            }
            1 => {
                let t = (side / 8).max(1);
                r < t || c < t || r >= side - t || c >= side - t
            }
            2 => r.abs_diff(c) <= side / 16,
            3 => {
                let d = (y * y + x * x).sqrt();
                d >= 0.2 * s && d <= 0.5 * s
            }
            _ => false,
        }
    };
    if class < 4 {
        return (0..side * side).map(|i| cell(i / side, i % side)).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x61f7 ^ class as u64);
    (0..side * side).map(|_| rng.random_bool(0.5)).collect()
}

/// Noise images with one class glyph of `2P×2P` each. Pure in `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    if spec.num_classes < 2 {
        return Err(Error::config("dataset.synthetic.num_classes", "must be at least 2"));
    }
    if spec.num_classes != cfg.num_classes {
        return Err(Error::config(
            "dataset.synthetic.num_classes",
            format!("{} differs from model num_classes {}", spec.num_classes, cfg.num_classes),
        ));
    }
    let size = cfg.image_size_global;
    let glyph = 2 * cfg.patch_size;
    if glyph > size {
        return Err(Error::config(
            "patch_size",
            format!("glyph of {glyph} px does not fit a {size} px image"),
        ));
    }
    let patterns: Vec<Vec<bool>> = (0..spec.num_classes).map(|k| glyph_pattern(k, glyph)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let channels = cfg.channels;
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for _ in 0..spec.per_class {
        for (label, pattern) in patterns.iter().enumerate() {
            let mut data: Vec<f32> = (0..channels * size * size)
                .map(|_| rng.random_range(0.0..NOISE_AMPLITUDE))
                .collect();
            let top = rng.random_range(0..=size - glyph);
            let left = rng.random_range(0..=size - glyph);
            for c in 0..channels {
                for (i, _) in pattern.iter().enumerate().filter(|(_, &on)| on) {
                    let (y, x) = (top + i / glyph, left + i % glyph);
                    data[(c * size + y) * size + x] = 1.0;
                }
            }
            samples.push(Sample {
                image: Tensor::new(vec![channels, size, size], data)?,
                label,
                glyph_box: Some(PixelRect {
                    row_min: top,
                    col_min: left,
                    row_max: top + glyph,
                    col_max: left + glyph,
                }),
            });
        }
    }
    Ok(samples)
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a binary P6 file with max value 255 into `[3, H, W]` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "header ends early"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(parse_err(path, format!("expected P6 magic, found `{magic}`")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| parse_err(path, format!("{what} `{t}` is not a number")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("max value")?;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero image extent"));
    }
    if maxval != 255 {
        return Err(parse_err(path, format!("max value {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let need = width * height * 3;
    if raster.len() < need {
        return Err(parse_err(path, format!("raster has {} bytes, expected {need}", raster.len())));
    }
    let mut data = vec![0f32; need];
    for (i, px) in raster[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Writes `[1|3, H, W]` values in `[0, 1]` as a binary P6 file.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (channels, h, w) = image.dims3()?;
    if channels != 1 && channels != 3 {
        return Err(Error::Input(format!("cannot write {channels} channels as PPM")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[(c % channels) * h * w + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// RGB to the model's channel count: unchanged for 3, the mean for 1.
pub fn to_channels(image: Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    match (c, channels) {
        (a, b) if a == b => Ok(image),
        (3, 1) => {
            let d = image.data();
            let n = h * w;
            let gray = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect();
            Tensor::new(vec![1, h, w], gray)
        }
        _ => Err(Error::Input(format!("cannot convert {c} channels to {channels}"))),
    }
}

/// Samples plus the class directory behind each label.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

/// Loads `root/<class>/*.ppm`. Labels follow sorted directory names; empty
/// class directories are skipped and later labels shift down.
pub fn load_image_folder(root: &Path, cfg: &ModelConfig) -> Result<ImageFolder> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let size = cfg.image_size_global;
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if files.is_empty() {
            log::warn!(
                "class directory `{name}` has no .ppm files; skipped, label {} goes to the next class",
                class_names.len()
            );
            continue;
        }
        let label = class_names.len();
        for file in files {
            let raw = to_channels(read_ppm(&file)?, cfg.channels)?;
            samples.push(Sample {
                image: bilinear_resize(&raw, size, size)?,
                label,
                glyph_box: None,
            });
        }
        class_names.push(name);
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("no images under {}", root.display())));
    }
    if class_names.len() > cfg.num_classes {
        return Err(Error::Input(format!(
            "{} class directories but the model has {} classes",
            class_names.len(),
            cfg.num_classes
        )));
    }
    Ok(ImageFolder { samples, class_names })
}
