//! Image buffers plus the crop-and-zoom step that produces the micro view.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageDecoder, ImageEncoder, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{denormalize, GeometryError, NormBox};

#[derive(Debug, Error)]
pub enum ImageOpsError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid image buffer: {0}")]
    InvalidBuffer(String),
}

/// Owned 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuf {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for ImageBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuf")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuf {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageOpsError> {
        if width == 0 || height == 0 {
            return Err(ImageOpsError::InvalidBuffer(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ImageOpsError::InvalidBuffer(format!(
                "expected {expected} bytes for {width}x{height}, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A `width` x `height` image filled with one color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    fn index(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        (y as usize * self.width as usize + x as usize) * 3
    }
}

impl From<RgbImage> for ImageBuf {
    fn from(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Self {
            width,
            height,
            data: img.into_raw(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// How a cropped region is resized to the backend's input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoomPolicy {
    pub target_resolution: u32,
    pub interpolation: Interpolation,
    pub pad_value: u8,
}

impl Default for ZoomPolicy {
    fn default() -> Self {
        Self {
            target_resolution: 336,
            interpolation: Interpolation::Bilinear,
            pad_value: 127,
        }
    }
}

impl ZoomPolicy {
    pub const MIN_RESOLUTION: u32 = 8;

    pub fn validate(&self) -> Result<(), String> {
        if self.target_resolution < Self::MIN_RESOLUTION {
            return Err(format!(
                "target_resolution must be >= {}, got {}",
                Self::MIN_RESOLUTION,
                self.target_resolution
            ));
        }
        Ok(())
    }
}

/// Copies the pixels under `region` into a new image.
///
/// Fails with [`GeometryError::DegenerateBox`] when the region spans less
/// than one pixel on either axis.
pub fn crop(img: &ImageBuf, region: &NormBox) -> Result<ImageBuf, ImageOpsError> {
    // tolerance for products like 0.1 * 10 landing just under 1.0
    const EPS: f64 = 1e-9;
    let span_w = region.width() * f64::from(img.width);
    let span_h = region.height() * f64::from(img.height);
    if span_w < 1.0 - EPS || span_h < 1.0 - EPS {
        let [x1, y1, x2, y2] = region.to_array();
        return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 }.into());
    }
    let px = denormalize(region, img.width, img.height);
    let row_bytes = px.width() as usize * 3;
    let mut data = Vec::with_capacity(row_bytes * px.height() as usize);
    for y in px.y1()..px.y2() {
        let start = img.index(px.x1(), y);
        data.extend_from_slice(&img.data[start..start + row_bytes]);
    }
    Ok(ImageBuf {
        width: px.width(),
        height: px.height(),
        data,
    })
}

/// Placement of the scaled content inside the square letterbox canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Letterbox {
    pub content_w: u32,
    pub content_h: u32,
    pub offset_x: u32,
    pub offset_y: u32,
}

/// Computes the aspect-preserving placement of a `width` x `height` image on
/// a `target` x `target` canvas.
pub fn letterbox_layout(width: u32, height: u32, target: u32) -> Letterbox {
    let longest = u64::from(width.max(height));
    let t = u64::from(target);
    // round(side * target / longest) in integer arithmetic
    let scale = |side: u32| (((u64::from(side) * t * 2 + longest) / (longest * 2)).clamp(1, t)) as u32;
    let content_w = scale(width);
    let content_h = scale(height);
    Letterbox {
        content_w,
        content_h,
        offset_x: (target - content_w) / 2,
        offset_y: (target - content_h) / 2,
    }
}

/// Resizes `img` onto a square canvas of the policy's resolution, keeping
/// the aspect ratio and filling the remainder with the pad value.
pub fn zoom(img: &ImageBuf, policy: &ZoomPolicy) -> ImageBuf {
    let target = policy.target_resolution;
    let layout = letterbox_layout(img.width, img.height, target);
    let mut out = ImageBuf::filled(target, target, [policy.pad_value; 3]);
    let content = resample(img, layout.content_w, layout.content_h, policy.interpolation);
    let row_bytes = layout.content_w as usize * 3;
    for y in 0..layout.content_h {
        let src = content.index(0, y);
        let dst = out.index(layout.offset_x, layout.offset_y + y);
        out.data[dst..dst + row_bytes].copy_from_slice(&content.data[src..src + row_bytes]);
    }
    out
}

/// Crop followed by zoom: the sub-image fed to the micro pathway.
pub fn crop_and_zoom(
    img: &ImageBuf,
    region: &NormBox,
    policy: &ZoomPolicy,
) -> Result<ImageBuf, ImageOpsError> {
    Ok(zoom(&crop(img, region)?, policy))
}

/// Resamples with pixel-center alignment. Samples never leave the source.
fn resample(img: &ImageBuf, out_w: u32, out_h: u32, mode: Interpolation) -> ImageBuf {
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let sx = f64::from(img.width) / f64::from(out_w);
    let sy = f64::from(img.height) / f64::from(out_h);
    let max_x = img.width - 1;
    let max_y = img.height - 1;
    match mode {
        Interpolation::Nearest => ImageBuf::from_fn(out_w, out_h, |x, y| {
            let src_x = ((f64::from(x) + 0.5) * sx).floor() as u32;
            let src_y = ((f64::from(y) + 0.5) * sy).floor() as u32;
            img.pixel(src_x.min(max_x), src_y.min(max_y))
        }),
        Interpolation::Bilinear => ImageBuf::from_fn(out_w, out_h, |x, y| {
            let fx = ((f64::from(x) + 0.5) * sx - 0.5).clamp(0.0, f64::from(max_x));
            let fy = ((f64::from(y) + 0.5) * sy - 0.5).clamp(0.0, f64::from(max_y));
            let x0 = fx.floor() as u32;
            let y0 = fy.floor() as u32;
            let x1 = (x0 + 1).min(max_x);
            let y1 = (y0 + 1).min(max_y);
            let tx = fx - f64::from(x0);
            let ty = fy - f64::from(y0);
            let (p00, p10, p01, p11) = (
                img.pixel(x0, y0),
                img.pixel(x1, y0),
                img.pixel(x0, y1),
                img.pixel(x1, y1),
            );
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
                let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                px[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
            }
            px
        }),
    }
}

/// Decodes a PNG or JPEG file to RGB, applying any EXIF orientation.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuf, ImageOpsError> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|source| ImageOpsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| ImageOpsError::Decode(e.to_string()))?;
    let mut decoder = reader
        .into_decoder()
        .map_err(|e| ImageOpsError::Decode(e.to_string()))?;
    let orientation = decoder
        .orientation()
        .map_err(|e| ImageOpsError::Decode(e.to_string()))?;
    let mut dynamic =
        DynamicImage::from_decoder(decoder).map_err(|e| ImageOpsError::Decode(e.to_string()))?;
    dynamic.apply_orientation(orientation);
    Ok(dynamic.into_rgb8().into())
}

/// Encoded image ready to be attached to a backend request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WirePayload {
    pub bytes: Vec<u8>,
    pub media_type: &'static str,
}

impl WirePayload {
    pub fn data_url(&self) -> String {
        use base64::Engine as _;
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

/// Lossless PNG encoding.
pub fn encode_wire(img: &ImageBuf) -> Result<WirePayload, ImageOpsError> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(
            &img.data,
            img.width,
            img.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| ImageOpsError::Encode(e.to_string()))?;
    Ok(WirePayload {
        bytes,
        media_type: "image/png",
    })
}

pub fn decode_wire(bytes: &[u8]) -> Result<ImageBuf, ImageOpsError> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImageOpsError::Decode(e.to_string()))?
        .decode()
        .map_err(|e| ImageOpsError::Decode(e.to_string()))?;
    Ok(img.into_rgb8().into())
}
