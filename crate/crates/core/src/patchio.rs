//! Exemplar images, patches, and the tensor layouts shared by every stage.
//!
//! All pixel data is held as `f64` in `[0, 1]`, interleaved in
//! height-width-channel order: sample `(x, y, c)` lives at
//! `(y * width + x) * 3 + c`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

/// Number of color channels in every image and patch.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(width >= 1 && height >= 1, Argument, "image must be at least 1x1, got {width}x{height}");
        ensure!(
            data.len() == width * height * CHANNELS,
            Argument,
            "image data length {} does not match {width}x{height}x3",
            data.len()
        );
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height * CHANNELS])
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = value;
    }

    /// Copies the `side`×`side` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, side: usize) -> Result<Patch> {
        ensure!(
            x + side <= self.width && y + side <= self.height,
            Argument,
            "crop at ({x}, {y}) of side {side} exceeds {}x{} image",
            self.width,
            self.height
        );
        let mut data = Vec::with_capacity(side * side * CHANNELS);
        for row in y..y + side {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + side * CHANNELS]);
        }
        Patch::new(side, data)
    }
}

/// A square RGB patch, the unit of synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(side >= 1, Argument, "patch side must be positive");
        ensure!(
            data.len() == side * side * CHANNELS,
            Argument,
            "patch data length {} does not match {side}x{side}x3",
            data.len()
        );
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Flattened dimension, `3·side²`.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * CHANNELS + c]
    }

    pub fn into_image(self) -> RgbImage {
        RgbImage {
            width: self.side,
            height: self.side,
            data: self.data,
        }
    }

    pub fn from_image(image: RgbImage) -> Result<Self> {
        ensure!(
            image.width == image.height,
            Argument,
            "patch images must be square, got {}x{}",
            image.width,
            image.height
        );
        Self::new(image.width, image.data)
    }
}

/// Patches cropped from one exemplar, all with the same side length.
#[derive(Debug, Clone)]
pub struct ExemplarPatchSet {
    side: usize,
    patches: Vec<Patch>,
}

impl ExemplarPatchSet {
    pub fn new(patches: Vec<Patch>) -> Result<Self> {
        let side = match patches.first() {
            Some(p) => p.side(),
            None => return Err(Error::Argument("patch set is empty".into())),
        };
        ensure!(
            patches.iter().all(|p| p.side() == side),
            Argument,
            "patches in a set must share one side length"
        );
        Ok(Self { side, patches })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Dimension of the flattened source space, `3·side²`.
    pub fn source_dim(&self) -> usize {
        self.side * self.side * CHANNELS
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }
}

/// Crop origins `(x, y)` drawn uniformly over every valid top-left corner.
pub fn crop_origins(width: usize, height: usize, side: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    ensure!(side >= 1, Argument, "crop side must be positive");
    ensure!(
        side <= width && side <= height,
        Argument,
        "crop side {side} exceeds {width}x{height} exemplar"
    );
    ensure!(count >= 1, Argument, "crop count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.random_range(0..=width - side), rng.random_range(0..=height - side)))
        .collect())
}

/// Crops `count` patches with replacement at uniformly random origins.
pub fn random_crops(image: &RgbImage, side: usize, count: usize, seed: u64) -> Result<ExemplarPatchSet> {
    let patches = crop_origins(image.width, image.height, side, count, seed)?
        .into_iter()
        .map(|(x, y)| image.crop(x, y, side))
        .collect::<Result<Vec<_>>>()?;
    ExemplarPatchSet::new(patches)
}

fn decode_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        image::ImageError::Unsupported(e) => Error::Format(e.to_string()),
        other => Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string())),
    }
}

/// Reads a PNG or binary PPM. Grayscale is replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| decode_error(path, e))?;
    let rgb = match decoded.color() {
        ColorType::Rgb8 | ColorType::Rgb16 | ColorType::Rgb32F => decoded.to_rgb8(),
        ColorType::L8 | ColorType::L16 => {
            log::warn!("{}: grayscale image replicated to three channels", path.display());
            decoded.to_rgb8()
        }
        other => {
            return Err(Error::Format(format!(
                "{}: expected an RGB or grayscale image, found {other:?}",
                path.display()
            )))
        }
    };
    let (width, height) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    RgbImage::new(width as usize, height as usize, data)
}

/// Quantizes an image to 8-bit RGB, clamping to `[0, 1]` first.
pub fn to_rgb8(image: &RgbImage) -> image::RgbImage {
    let bytes = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer length checked at construction")
}

/// Writes PNG, or PPM when the extension is `.ppm`/`.pnm`. The file appears
/// only once fully written.
pub fn save_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "ppm" || ext == "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    let buffer = DynamicImage::ImageRgb8(to_rgb8(image));
    write_atomic(path, |file| {
        buffer
            .write_to(file, format)
            .map_err(|e| std::io::Error::other(e.to_string()))
    })
}

/// Writes through a temporary file in the destination directory and renames
/// it into place on success.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut writer = BufWriter::new(tmp.as_file_mut());
        write(&mut writer).map_err(|e| Error::io(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
