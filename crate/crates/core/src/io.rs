//! File formats: PFM depth maps, binary PPM images and the binary dumps of
//! sampling grids and token flows.

use std::io::{Read, Write};

use crate::attention::TokenFlowField;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{SamplingGrid, CENTER_TOKEN, PATCH_TOKENS};
use crate::tensor::Tensor;

pub const GRID_MAGIC: &[u8; 4] = b"STLM";
pub const FLOW_MAGIC: &[u8; 4] = b"FLOW";

fn format_err(format: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        format,
        detail: detail.into(),
    }
}

/// Splits the next whitespace-delimited header token off `buf` starting at
/// `*pos`, skipping `#` comments.
fn header_token<'a>(buf: &'a [u8], pos: &mut usize, format: &'static str) -> Result<&'a str> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(format, "truncated header"));
    }
    std::str::from_utf8(&buf[start..*pos]).map_err(|_| format_err(format, "non-ASCII header"))
}

fn parse_dim(tok: &str, format: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(format, format!("bad dimension {tok:?}"))),
    }
}

/// Writes a single-channel little-endian PFM. Rows go bottom to top as the
/// format prescribes; invalid pixels are stored as NaN.
pub fn write_pfm(w: &mut impl Write, depth: &DepthMap) -> Result<()> {
    write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height)?;
    let mut payload = Vec::with_capacity(depth.len() * 4);
    for row in (0..depth.height).rev() {
        for col in 0..depth.width {
            let v = if depth.valid_at(row, col) {
                depth.at(row, col) as f32
            } else {
                f32::NAN
            };
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads a single-channel PFM of either endianness. Non-finite samples
/// become invalid pixels.
pub fn read_pfm(r: &mut impl Read) -> Result<DepthMap> {
    const F: &str = "PFM";
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    match header_token(&buf, &mut pos, F)? {
        "Pf" => {}
        "PF" => {
            return Err(Error::Unsupported {
                format: F,
                detail: "three-channel PFM".into(),
            })
        }
        other => return Err(format_err(F, format!("bad magic {other:?}"))),
    }
    let width = parse_dim(header_token(&buf, &mut pos, F)?, F)?;
    let height = parse_dim(header_token(&buf, &mut pos, F)?, F)?;
    let scale_tok = header_token(&buf, &mut pos, F)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| format_err(F, format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(F, format!("bad scale {scale_tok:?}")));
    }
    let little = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let n = width * height;
    let payload = buf.get(pos..).unwrap_or(&[]);
    if payload.len() < n * 4 {
        return Err(format_err(
            F,
            format!("payload has {} bytes, need {}", payload.len(), n * 4),
        ));
    }
    let mut values = vec![0.0; n];
    for (i, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let (row, col) = (height - 1 - i / width, i % width);
        values[row * width + col] = v as f64;
    }
    let mask = values.iter().map(|v| v.is_finite()).collect();
    DepthMap::with_mask(width, height, values, mask)
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Quantizes a planar `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape.len() != 3 || t.shape[0] != 3 {
            return Err(crate::error::shape_err("RgbImage::from_tensor", format!("{:?}", t.shape)));
        }
        let (h, w) = (t.shape[1], t.shape[2]);
        let n = h * w;
        let mut img = Self::new(w, h);
        for i in 0..n {
            for ch in 0..3 {
                img.data[3 * i + ch] = (t.data[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(img)
    }

    /// Planar `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for ch in 0..3 {
                data[ch * n + i] = self.data[3 * i + ch] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("consistent extents")
    }
}

pub fn write_ppm(w: &mut impl Write, img: &RgbImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Reads a binary PPM; only `maxval = 255` is supported.
pub fn read_ppm(r: &mut impl Read) -> Result<RgbImage> {
    const F: &str = "PPM";
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let magic = header_token(&buf, &mut pos, F)?;
    if magic != "P6" {
        return Err(Error::Unsupported {
            format: F,
            detail: format!("magic {magic:?}, only binary P6 is read"),
        });
    }
    let width = parse_dim(header_token(&buf, &mut pos, F)?, F)?;
    let height = parse_dim(header_token(&buf, &mut pos, F)?, F)?;
    let maxval_tok = header_token(&buf, &mut pos, F)?;
    let maxval: u32 = maxval_tok
        .parse()
        .map_err(|_| format_err(F, format!("bad maxval {maxval_tok:?}")))?;
    if maxval != 255 {
        return Err(Error::Unsupported {
            format: F,
            detail: format!("maxval {maxval}, only 255 is supported"),
        });
    }
    pos += 1;
    let n = 3 * width * height;
    let payload = buf.get(pos..).unwrap_or(&[]);
    if payload.len() < n {
        return Err(format_err(F, format!("payload has {} bytes, need {n}", payload.len())));
    }
    Ok(RgbImage {
        width,
        height,
        data: payload[..n].to_vec(),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// `STLM`, width, height, 9, then `H × W × 9 × 2` little-endian f64.
pub fn write_grid_dump(w: &mut impl Write, grid: &SamplingGrid) -> Result<()> {
    let mut out = Vec::with_capacity(16 + grid.positions.len() * 8);
    out.extend_from_slice(GRID_MAGIC);
    put_u32(&mut out, grid.width)?;
    put_u32(&mut out, grid.height)?;
    put_u32(&mut out, PATCH_TOKENS)?;
    for v in &grid.positions {
        out.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

/// `FLOW`, heads, width, height, 9, then `M × H × W × 9 × 2` little-endian f64.
pub fn write_flow_dump(w: &mut impl Write, flows: &TokenFlowField) -> Result<()> {
    let mut out = Vec::with_capacity(20 + flows.flows.len() * 8);
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, flows.heads)?;
    put_u32(&mut out, flows.width)?;
    put_u32(&mut out, flows.height)?;
    put_u32(&mut out, PATCH_TOKENS)?;
    for v in &flows.flows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format_err(self.format, format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.format, "size overflow"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Parses a grid dump back into `(width, height, positions)`.
pub fn read_grid_dump(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        format: "grid dump",
    };
    if c.take(4)? != GRID_MAGIC {
        return Err(format_err("grid dump", "bad magic"));
    }
    let (w, h, k) = (c.u32()?, c.u32()?, c.u32()?);
    if k != PATCH_TOKENS {
        return Err(format_err("grid dump", format!("{k} tokens per patch")));
    }
    let pos = c.f64s(w * h * k * 2)?;
    Ok((w, h, pos))
}

/// Parses a flow dump.
pub fn read_flow_dump(r: &mut impl Read) -> Result<TokenFlowField> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        format: "flow dump",
    };
    if c.take(4)? != FLOW_MAGIC {
        return Err(format_err("flow dump", "bad magic"));
    }
    let (heads, width, height, k) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    if k != PATCH_TOKENS {
        return Err(format_err("flow dump", format!("{k} tokens per patch")));
    }
    let flows = c.f64s(heads * width * height * k * 2)?;
    Ok(TokenFlowField {
        heads,
        height,
        width,
        flows,
    })
}

/// Picture of a sampling grid: latitude bands as background and the nine
/// token positions of a sparse set of pixels, `scale` output pixels per grid
/// pixel. Center tokens are red, the others yellow.
pub fn grid_overlay(grid: &SamplingGrid, scale: usize) -> RgbImage {
    let scale = scale.max(1);
    let (w, h) = (grid.width * scale, grid.height * scale);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let band = if (y * 8 / h) % 2 == 0 { 48 } else { 64 };
        for x in 0..w {
            img.put(x, y, [band, band, band + 8]);
        }
    }
    let step_c = (grid.width / 8).max(1);
    let step_r = (grid.height / 6).max(1);
    let s = scale as f64;
    for row in (step_r / 2..grid.height).step_by(step_r) {
        for col in (step_c / 2..grid.width).step_by(step_c) {
            for k in 0..PATCH_TOKENS {
                let e = grid.position(row, col, k);
                let u = (e.u + 0.5).rem_euclid(grid.width as f64);
                let x = (u * s) as usize;
                let y = ((e.v + 0.5) * s).clamp(0.0, h as f64 - 1.0) as usize;
                let color = if k == CENTER_TOKEN { [230, 40, 40] } else { [240, 210, 40] };
                for dy in 0..2 {
                    for dx in 0..2 {
                        img.put((x + dx) % w, y + dy, color);
                    }
                }
            }
        }
    }
    img
}
