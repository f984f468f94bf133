//! RGB rasters in linear `[0, 1]` intensity, file I/O and pixel arithmetic.
//!
//! Intensities are kept as unbounded `f64` while the pipeline runs and are
//! only clamped and quantized when written out. Layout is row-major with a
//! top-left origin and interleaved `R, G, B` channels.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

/// Number of channels in every raster.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("malformed image data: {0}")]
    Malformed(String),
    #[error("image has a zero dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("dimension mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("data length {got} does not match {width}x{height}x3")]
    BadLength {
        width: usize,
        height: usize,
        got: usize,
    },
}

/// An `H x W x 3` raster of linear intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A signed per-pixel, per-channel difference with the same layout as [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDelta {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn check_shape(height: usize, width: usize, len: usize) -> Result<(), ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::ZeroDimension { width, height });
    }
    if len != height * width * CHANNELS {
        return Err(ImageError::BadLength { width, height, got: len });
    }
    Ok(())
}

macro_rules! raster_accessors {
    ($t:ty) => {
        impl $t {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            /// Interleaved row-major channel data.
            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            #[inline]
            pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
                (y * self.width + x) * CHANNELS + c
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
                self.data[self.index(x, y, c)]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
                let i = self.index(x, y, c);
                self.data[i] = v;
            }

            pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
                let i = self.index(x, y, 0);
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            pub fn same_shape<U: Shape>(&self, other: &U) -> bool {
                self.height == other.shape().0 && self.width == other.shape().1
            }
        }

        impl Shape for $t {
            fn shape(&self) -> (usize, usize) {
                (self.height, self.width)
            }
        }
    };
}

/// `(height, width)` of a raster.
pub trait Shape {
    fn shape(&self) -> (usize, usize);
}

raster_accessors!(Image);
raster_accessors!(PixelDelta);

fn mismatch(a: &impl Shape, b: &impl Shape) -> ImageError {
    let (a_h, a_w) = a.shape();
    let (b_h, b_w) = b.shape();
    ImageError::DimensionMismatch { a_w, a_h, b_w, b_h }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_shape(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(ImageError::Malformed(format!("non-finite intensity {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { height, width, data }
    }

    /// Copy with every intensity clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Clamp then round each intensity to the nearest 8-bit level (half up).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        check_shape(height, width, bytes.len())?;
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        })
    }

    /// The image as it would come back from an 8-bit file.
    pub fn quantized(&self) -> Image {
        let bytes = self.to_rgb8();
        Image::from_rgb8(self.height, self.width, &bytes).expect("shape already validated")
    }

    pub fn add_delta(&self, delta: &PixelDelta) -> Result<Image, ImageError> {
        if !self.same_shape(delta) {
            return Err(mismatch(self, delta));
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&delta.data).map(|(a, d)| a + d).collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl PixelDelta {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_shape(height, width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn scaled(&self, k: f64) -> PixelDelta {
        PixelDelta {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Elementwise inner product with another delta of the same shape.
    pub fn dot(&self, other: &PixelDelta) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Round-half-up 8-bit quantization after clamping.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Elementwise `on - off`, no clamping.
pub fn diff(on: &Image, off: &Image) -> Result<PixelDelta, ImageError> {
    if !on.same_shape(off) {
        return Err(mismatch(on, off));
    }
    Ok(PixelDelta {
        height: on.height,
        width: on.width,
        data: on.data.iter().zip(&off.data).map(|(a, b)| a - b).collect(),
    })
}

/// Bilinear resampling with half-pixel centers and edge replication.
pub fn resize_bilinear(img: &Image, h: usize, w: usize) -> Result<Image, ImageError> {
    if h == 0 || w == 0 {
        return Err(ImageError::ZeroDimension { width: w, height: h });
    }
    if h == img.height && w == img.width {
        return Ok(img.clone());
    }
    let xs = bilinear_taps(img.width, w);
    let ys = bilinear_taps(img.height, h);
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Image { height: h, width: w, data })
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn format_for(path: &Path) -> Result<Format, ImageError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(Format::Png),
        "ppm" | "pnm" => Ok(Format::Ppm),
        other => Err(ImageError::Unsupported(format!("extension {other:?}"))),
    }
}

/// Load a PNG or binary PPM (P6), 8 or 16 bits per channel.
///
/// The format is sniffed from the file's magic bytes, not its extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Read {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decode PNG or P6 PPM bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(ImageError::Unsupported("not a PNG or P6 PPM".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageError::Malformed(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroDimension { width, height });
    }
    let data: Vec<f64> = if img.color().bytes_per_pixel() / img.color().channel_count() > 1 {
        img.to_rgb16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()
    };
    Image::new(height, width, data)
}

fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Malformed("bad PPM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Malformed("bad PPM header terminator".into()));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroDimension { width, height });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Malformed(format!("PPM maxval {maxval}")));
    }
    let n = width * height * CHANNELS;
    let body = &bytes[pos..];
    let max = maxval as f64;
    let data: Vec<f64> = if maxval < 256 {
        if body.len() < n {
            return Err(ImageError::Malformed("truncated PPM data".into()));
        }
        body[..n].iter().map(|&b| f64::from(b) / max).collect()
    } else {
        if body.len() < 2 * n {
            return Err(ImageError::Malformed("truncated PPM data".into()));
        }
        body[..2 * n]
            .chunks_exact(2)
            .map(|p| f64::from(u16::from_be_bytes([p[0], p[1]])) / max)
            .collect()
    };
    Image::new(height, width, data)
}

/// Clamp, quantize to 8 bits and write PNG or PPM depending on the extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let bytes = match format_for(path)? {
        Format::Png => encode_png(img)?,
        Format::Ppm => encode_ppm(img),
    };
    std::fs::write(path, bytes).map_err(|source| ImageError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// 8-bit RGB PNG bytes of the clamped image.
pub fn encode_png(img: &Image) -> Result<Vec<u8>, ImageError> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImageError::Malformed(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}
