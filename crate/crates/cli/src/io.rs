//! Image and label-map files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use attndistill_core::{Image, LabelMap};
use image::{DynamicImage, ImageFormat};
use thiserror::Error;

pub const SEED_KEY: &str = "attndistill-seed";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: unsupported image format `{format}` (expected png or jpeg)")]
    Unsupported { path: PathBuf, format: String },
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Shape {
        path: PathBuf,
        #[source]
        source: attndistill_core::Error,
    },
}

fn format_name(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_else(|| "<none>".into())
}

fn open(path: &Path) -> Result<DynamicImage, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let format = image::guess_format(&bytes).map_err(|_| IoError::Unsupported {
        path: path.to_path_buf(),
        format: format_name(path),
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(IoError::Unsupported {
            path: path.to_path_buf(),
            format: format!("{format:?}").to_lowercase(),
        });
    }
    image::load_from_memory_with_format(&bytes, format).map_err(|e| IoError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_image(path: &Path) -> Result<Image, IoError> {
    let rgb = open(path)?.into_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_rgb8(w as usize, h as usize, rgb.as_raw()).map_err(|source| IoError::Shape {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit RGB PNG with the run seed in a text chunk.
pub fn save_image(path: &Path, image: &Image, seed: u64) -> Result<(), IoError> {
    if path.extension().is_none_or(|e| !e.eq_ignore_ascii_case("png")) {
        return Err(IoError::Unsupported {
            path: path.to_path_buf(),
            format: format_name(path),
        });
    }
    let file = File::create(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let encode_err = |e: png::EncodingError| IoError::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk(SEED_KEY.into(), seed.to_string()).map_err(encode_err)?;
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&image.to_rgb8()).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Seed stored by [`save_image`], if any.
pub fn read_png_seed(path: &Path) -> Result<Option<u64>, IoError> {
    let file = File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| IoError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == SEED_KEY)
        .and_then(|c| c.text.parse().ok()))
}

/// Loads a label map. Grayscale files keep their pixel values as labels;
/// colour files get one id per distinct colour, numbered in sorted order.
pub fn load_labels(path: &Path) -> Result<LabelMap, IoError> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels: Vec<u32> = if img.color().has_color() {
        let rgb = img.into_rgb8();
        let key = |p: &image::Rgb<u8>| u32::from_be_bytes([0, p[0], p[1], p[2]]);
        let mut colours: Vec<u32> = rgb.pixels().map(key).collect();
        colours.sort_unstable();
        colours.dedup();
        rgb.pixels()
            .map(|p| colours.binary_search(&key(p)).expect("colour present") as u32)
            .collect()
    } else if matches!(img.color(), image::ColorType::L16 | image::ColorType::La16) {
        img.into_luma16().pixels().map(|p| p[0] as u32).collect()
    } else {
        img.into_luma8().pixels().map(|p| p[0] as u32).collect()
    };
    LabelMap::new(w, h, labels).map_err(|source| IoError::Shape {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a label map as 8-bit grayscale.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<(), IoError> {
    let bytes: Vec<u8> = labels
        .labels()
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| IoError::Encode {
                path: path.to_path_buf(),
                message: format!("label {l} does not fit in 8 bits"),
            })
        })
        .collect::<Result<_, _>>()?;
    image::GrayImage::from_raw(labels.width() as u32, labels.height() as u32, bytes)
        .expect("buffer size matches")
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| IoError::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
