//! RGB images, binary PPM (P6) I/O and letterboxing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Gray level used to pad letterboxed frames.
pub const LETTERBOX_FILL: u8 = 128;

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}x{height}")));
        }
        Ok(Self {
            width,
            height,
            data: rgb.repeat(width * height),
        })
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major float planes scaled to `[0, 1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        FeatureMap::from_vec(3, self.height, self.width, out).expect("dims are positive")
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image("malformed PPM header".into()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image("not a binary PPM (P6) file".into()));
    }
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Image(format!("unsupported PPM maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("malformed PPM header".into()));
    }
    pos += 1;
    let need = 3 * width * height;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Image(format!("PPM raster truncated: need {need} bytes")))?;
    let data = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|v| ((*v as usize).min(maxval) * 255 / maxval) as u8)
            .collect()
    };
    Image::from_raw(width, height, data)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::file(path, e))
}

/// Placement of a source image inside the network's input square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_width: usize,
    pub src_height: usize,
    pub net_width: usize,
    pub net_height: usize,
    pub new_width: usize,
    pub new_height: usize,
}

impl Letterbox {
    pub fn new(src_width: usize, src_height: usize, net_width: usize, net_height: usize) -> Self {
        let (new_width, new_height) = if net_width * src_height < net_height * src_width {
            (net_width, (src_height * net_width / src_width).max(1))
        } else {
            ((src_width * net_height / src_height).max(1), net_height)
        };
        Self {
            src_width,
            src_height,
            net_width,
            net_height,
            new_width,
            new_height,
        }
    }

    pub fn offset(&self) -> (usize, usize) {
        (
            (self.net_width - self.new_width) / 2,
            (self.net_height - self.new_height) / 2,
        )
    }

    /// Relative `[cx, cy, w, h]` in the network input to relative
    /// coordinates in the source image.
    pub fn unscale_box(&self, b: [f32; 4]) -> [f32; 4] {
        let (dx, dy) = self.offset();
        let (nw, nh) = (self.net_width as f32, self.net_height as f32);
        let (rw, rh) = (self.new_width as f32 / nw, self.new_height as f32 / nh);
        [
            (b[0] - dx as f32 / nw) / rw,
            (b[1] - dy as f32 / nh) / rh,
            b[2] / rw,
            b[3] / rh,
        ]
    }

    /// Inverse of [`Letterbox::unscale_box`].
    pub fn scale_box(&self, b: [f32; 4]) -> [f32; 4] {
        let (dx, dy) = self.offset();
        let (nw, nh) = (self.net_width as f32, self.net_height as f32);
        let (rw, rh) = (self.new_width as f32 / nw, self.new_height as f32 / nh);
        [
            b[0] * rw + dx as f32 / nw,
            b[1] * rh + dy as f32 / nh,
            b[2] * rw,
            b[3] * rh,
        ]
    }
}

/// Bilinear resize with pixel centers aligned.
pub fn resize(img: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::filled(width, height, [0; 3]).expect("positive size");
    let sx = img.width as f32 / width as f32;
    let sy = img.height as f32 / height as f32;
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(img.width - 1);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            let mut px = [0u8; 3];
            for k in 0..3 {
                let top = a[k] as f32 * (1.0 - tx) + b[k] as f32 * tx;
                let bottom = c[k] as f32 * (1.0 - tx) + d[k] as f32 * tx;
                px[k] = (top * (1.0 - ty) + bottom * ty).round() as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Aspect-preserving resize into a `net_width` x `net_height` canvas of
/// gray, returned as the network's input planes.
pub fn letterbox(img: &Image, net_width: usize, net_height: usize) -> (FeatureMap, Letterbox) {
    let lb = Letterbox::new(img.width, img.height, net_width, net_height);
    let scaled = resize(img, lb.new_width, lb.new_height);
    let mut canvas = Image::filled(net_width, net_height, [LETTERBOX_FILL; 3]).expect("positive size");
    let (dx, dy) = lb.offset();
    for y in 0..lb.new_height {
        let src = &scaled.data[3 * y * lb.new_width..3 * (y + 1) * lb.new_width];
        let at = 3 * ((y + dy) * net_width + dx);
        canvas.data[at..at + src.len()].copy_from_slice(src);
    }
    (canvas.to_feature_map(), lb)
}
