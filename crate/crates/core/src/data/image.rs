//! Grayscale image grids: PNG/PGM decoding and encoding, and bilinear resize.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width` grid of intensities, normally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Maps a unit-range value to a byte, rounding half up.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Largest pixel count either decoder will allocate for.
pub const MAX_PIXELS: usize = 1 << 26;

/// Decodes PNG or PGM bytes (sniffed from the magic number) into a grayscale
/// grid in `[0, 1]`. Colour is reduced with BT.601 luma weights.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err("not a PNG or PGM file".into())
    }
}

pub fn load_image_grayscale(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let mut decoder = png::Decoder::new_with_limits(
        Cursor::new(bytes),
        png::Limits {
            bytes: MAX_PIXELS * 4,
        },
    );
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 || w * h > MAX_PIXELS {
        return Err(format!("unsupported dimensions {w}x{h}"));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unexpected bit depth {:?} after expansion", info.bit_depth));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let stride = info.line_size;
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(stride).take(h) {
        for px in row[..w * channels].chunks(channels) {
            let v = if channels < 3 {
                px[0] as f64
            } else {
                luminance(px[0] as f64, px[1] as f64, px[2] as f64)
            };
            data.push((v / 255.0).clamp(0.0, 1.0) as f32);
        }
    }
    Grid::new(h, w, data).map_err(|e| e.to_string())
}

/// 8-bit grayscale PNG.
pub fn encode_png(grid: &Grid) -> Vec<u8> {
    let bytes: Vec<u8> = grid.data.iter().map(|&v| to_byte(v)).collect();
    encode_png_raw(grid.width as u32, grid.height as u32, png::ColorType::Grayscale, &bytes)
}

pub fn encode_png_raw(width: u32, height: u32, color: png::ColorType, bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("writing to a Vec cannot fail");
        writer
            .write_image_data(bytes)
            .expect("buffer length matches the declared dimensions");
    }
    out
}

struct PgmHeader {
    binary: bool,
    width: usize,
    height: usize,
    maxval: usize,
}

fn skip_ws_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_uint(bytes: &[u8], pos: usize) -> std::result::Result<(usize, usize), String> {
    let start = skip_ws_and_comments(bytes, pos);
    let mut end = start;
    let mut value: usize = 0;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((bytes[end] - b'0') as usize))
            .ok_or("number overflows")?;
        end += 1;
    }
    if end == start {
        return Err(format!("expected a number at byte {start}"));
    }
    Ok((value, end))
}

fn parse_pgm_header(bytes: &[u8]) -> std::result::Result<(PgmHeader, usize), String> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err("missing P2/P5 magic".into()),
    };
    let (width, pos) = read_uint(bytes, 2)?;
    let (height, pos) = read_uint(bytes, pos)?;
    let (maxval, pos) = read_uint(bytes, pos)?;
    if width == 0 || height == 0 {
        return Err(format!("zero dimension {width}x{height}"));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(format!("dimensions {width}x{height} exceed the pixel limit"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    Ok((
        PgmHeader {
            binary,
            width,
            height,
            maxval,
        },
        pos,
    ))
}

/// Decodes ASCII (`P2`) or binary (`P5`) PGM; samples are scaled by maxval.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Grid, String> {
    let (hdr, mut pos) = parse_pgm_header(bytes)?;
    let count = hdr.width * hdr.height;
    let scale = hdr.maxval as f32;
    let mut data = Vec::with_capacity(count.min(bytes.len()));
    if hdr.binary {
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err("missing separator before raster".into());
        }
        pos += 1;
        let wide = hdr.maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos))?;
        if wide {
            for pair in raster.chunks_exact(2) {
                let v = u16::from_be_bytes([pair[0], pair[1]]) as usize;
                data.push(sample(v, hdr.maxval, scale)?);
            }
        } else {
            for &b in raster {
                data.push(sample(b as usize, hdr.maxval, scale)?);
            }
        }
    } else {
        for _ in 0..count {
            let (v, next) = read_uint(bytes, pos)?;
            data.push(sample(v, hdr.maxval, scale)?);
            pos = next;
        }
    }
    Grid::new(hdr.height, hdr.width, data).map_err(|e| e.to_string())
}

fn sample(v: usize, maxval: usize, scale: f32) -> std::result::Result<f32, String> {
    if v > maxval {
        return Err(format!("sample {v} exceeds maxval {maxval}"));
    }
    Ok(v as f32 / scale)
}

/// Binary 8-bit PGM.
pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.data.iter().map(|&v| to_byte(v)));
    out
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`):
/// output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to the valid range.
pub fn resize_bilinear(grid: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data(format!("resize target must be positive, got {out_h}x{out_w}")));
    }
    if (out_h, out_w) == grid.dims() {
        return Ok(grid.clone());
    }
    let ys = axis_taps(grid.height, out_h);
    let xs = axis_taps(grid.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = lerp(grid.get(y0, x0), grid.get(y0, x1), fx);
            let bottom = lerp(grid.get(y1, x0), grid.get(y1, x1), fx);
            data.push(lerp(top, bottom, fy));
        }
    }
    Grid::new(out_h, out_w, data)
}

fn axis_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}
