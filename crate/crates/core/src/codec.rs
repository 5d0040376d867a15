//! Block-DCT coding of tiled planes.
//!
//! Bitstream layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FTCB"
//!      4     1  version (1)
//!      5     1  quality 1..=100
//!      6     2  plane width
//!      8     2  plane height
//!     10     1  grid columns
//!     11     1  grid rows
//!     12     2  tile width
//!     14     2  tile height
//!     16     2  channels
//!     18     2  levels
//!     20     -  blocks in raster order
//! ```
//!
//! Each 8x8 block is a DC delta (signed LEB128) followed by `(run u8,
//! value sLEB128)` pairs for the non-zero AC coefficients in zigzag order,
//! closed by `run = 255`.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CutPoint, StubModel};
use crate::quantizer::{self, QuantError, QuantizerSpec};
use crate::stats::TensorStats;
use crate::tiler::{self, TileError, TileLayout, TiledPlane};

pub const FTCB_MAGIC: [u8; 4] = *b"FTCB";
pub const FTCB_VERSION: u8 = 1;
pub const FTCB_HEADER_LEN: usize = 20;
const END_OF_BLOCK: u8 = 255;
const BLOCK: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("quality must be in 1..=100, got {0}")]
    Quality(u8),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated bitstream after {blocks} of {expected} blocks")]
    Truncated { blocks: usize, expected: usize },
    #[error("block count mismatch: {0} bytes after the last block")]
    BlockCount(usize),
    #[error("malformed block {block}: {reason}")]
    Malformed { block: usize, reason: &'static str },
    #[error("header does not describe a valid layout")]
    Layout,
    #[error("plane too large for the bitstream header")]
    PlaneTooLarge,
    #[error("target of {target} bytes is below the minimum achievable {minimum}")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Natural-order index of the k-th zigzag coefficient.
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// Quantization divisors in natural order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QualityTable([u8; 64]);

impl QualityTable {
    pub fn new(quality: u8) -> Result<Self, CodecError> {
        if !(1..=100).contains(&quality) {
            return Err(CodecError::Quality(quality));
        }
        let q = quality as u32;
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let mut t = [0u8; 64];
        for (e, &b) in t.iter_mut().zip(&BASE_LUMA) {
            *e = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u8;
        }
        Ok(Self(t))
    }

    pub fn divisors(&self) -> &[u8; 64] {
        &self.0
    }
}

/// `cos((2x + 1) u pi / 16)` scaled by the orthonormal factor, snapped to a
/// 2^-30 grid so results do not depend on the platform's `cos`.
fn basis() -> &'static [[f64; 8]; 8] {
    static TABLE: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            let alpha = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                let c = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
                *v = (c * (1u64 << 30) as f64).round() / (1u64 << 30) as f64;
            }
        }
        t
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

pub fn write_sleb128(out: &mut Vec<u8>, mut v: i64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        let done = (v == 0 && byte & 0x40 == 0) || (v == -1 && byte & 0x40 != 0);
        if done {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LebError {
    Eof,
    Overflow,
}

/// Decode one signed LEB128 value that must fit in 32 bits.
pub fn read_sleb128(bytes: &[u8], pos: &mut usize) -> Result<i64, LebError> {
    let mut result: i64 = 0;
    let mut shift = 0;
    loop {
        let byte = *bytes.get(*pos).ok_or(LebError::Eof)?;
        *pos += 1;
        if shift >= 35 {
            return Err(LebError::Overflow);
        }
        result |= ((byte & 0x7f) as i64) << shift;
        shift += 7;
        if byte & 0x80 == 0 {
            if byte & 0x40 != 0 {
                result |= -1i64 << shift;
            }
            return i32::try_from(result)
                .map(i64::from)
                .map_err(|_| LebError::Overflow);
        }
    }
}

/// An encoded plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecBitstream {
    bytes: Vec<u8>,
    quality: u8,
    layout: TileLayout,
    levels: u16,
}

#[derive(Debug, Clone, Copy)]
struct Header {
    quality: u8,
    layout: TileLayout,
    levels: u16,
}

impl Header {
    fn blocks(&self) -> (usize, usize) {
        (
            self.layout.plane_w().div_ceil(BLOCK),
            self.layout.plane_h().div_ceil(BLOCK),
        )
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn parse_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() < 4 || bytes[..4] != FTCB_MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < FTCB_HEADER_LEN {
        return Err(CodecError::Truncated {
            blocks: 0,
            expected: 0,
        });
    }
    if bytes[4] != FTCB_VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[4]));
    }
    let quality = bytes[5];
    if !(1..=100).contains(&quality) {
        return Err(CodecError::Quality(quality));
    }
    let layout = TileLayout {
        grid_cols: bytes[10] as usize,
        grid_rows: bytes[11] as usize,
        tile_w: u16_at(bytes, 12) as usize,
        tile_h: u16_at(bytes, 14) as usize,
        channels: u16_at(bytes, 16) as usize,
    };
    let levels = u16_at(bytes, 18);
    layout.validate().map_err(|_| CodecError::Layout)?;
    if layout.plane_w() != u16_at(bytes, 6) as usize
        || layout.plane_h() != u16_at(bytes, 8) as usize
        || !(2..=256).contains(&levels)
    {
        return Err(CodecError::Layout);
    }
    Ok(Header {
        quality,
        layout,
        levels,
    })
}

impl CodecBitstream {
    /// Wrap raw bytes after checking the header.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
        let h = parse_header(&bytes)?;
        Ok(Self {
            bytes,
            quality: h.quality,
            layout: h.layout,
            levels: h.levels,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn quality(&self) -> u8 {
        self.quality
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn levels(&self) -> u16 {
        self.levels
    }
}

/// Level-shifted 8x8 block with edge replication past the plane border.
fn load_block(p: &TiledPlane, bx: usize, by: usize) -> [f64; 64] {
    let (w, h) = (p.width(), p.height());
    let mut out = [0.0; 64];
    for y in 0..BLOCK {
        let r = (by * BLOCK + y).min(h - 1);
        for x in 0..BLOCK {
            let c = (bx * BLOCK + x).min(w - 1);
            out[y * BLOCK + x] = p.at(r, c) as f64 - 128.0;
        }
    }
    out
}

fn quantize_block(block: &[f64; 64], table: &QualityTable) -> [i32; 64] {
    let coef = fdct(block);
    let mut out = [0i32; 64];
    for (k, &n) in ZIGZAG.iter().enumerate() {
        // f64::round is half away from zero
        out[k] = (coef[n] / table.0[n] as f64).round() as i32;
    }
    out
}

pub fn encode(p: &TiledPlane, quality: u8) -> Result<CodecBitstream, CodecError> {
    let table = QualityTable::new(quality)?;
    let layout = p.layout();
    if layout.plane_w() > u16::MAX as usize
        || layout.plane_h() > u16::MAX as usize
        || layout.grid_cols > u8::MAX as usize
        || layout.grid_rows > u8::MAX as usize
        || layout.channels > u16::MAX as usize
    {
        return Err(CodecError::PlaneTooLarge);
    }
    let mut bytes = Vec::with_capacity(FTCB_HEADER_LEN + layout.plane_len() / 4);
    bytes.extend_from_slice(&FTCB_MAGIC);
    bytes.push(FTCB_VERSION);
    bytes.push(quality);
    bytes.extend_from_slice(&(layout.plane_w() as u16).to_le_bytes());
    bytes.extend_from_slice(&(layout.plane_h() as u16).to_le_bytes());
    bytes.push(layout.grid_cols as u8);
    bytes.push(layout.grid_rows as u8);
    for v in [layout.tile_w, layout.tile_h, layout.channels] {
        bytes.extend_from_slice(&(v as u16).to_le_bytes());
    }
    bytes.extend_from_slice(&p.levels().to_le_bytes());

    let (bw, bh) = (
        layout.plane_w().div_ceil(BLOCK),
        layout.plane_h().div_ceil(BLOCK),
    );
    let blocks: Vec<[i32; 64]> = (0..bw * bh)
        .into_par_iter()
        .map(|i| quantize_block(&load_block(p, i % bw, i / bw), &table))
        .collect();
    let mut prev_dc = 0i64;
    for q in &blocks {
        write_sleb128(&mut bytes, q[0] as i64 - prev_dc);
        prev_dc = q[0] as i64;
        let mut run = 0u8;
        for &v in &q[1..] {
            if v == 0 {
                run += 1;
            } else {
                bytes.push(run);
                write_sleb128(&mut bytes, v as i64);
                run = 0;
            }
        }
        bytes.push(END_OF_BLOCK);
    }
    Ok(CodecBitstream {
        bytes,
        quality,
        layout,
        levels: p.levels(),
    })
}

/// `None` when the stream ends inside the block.
fn read_block(
    bytes: &[u8],
    pos: &mut usize,
    prev_dc: &mut i64,
    block: usize,
) -> Result<Option<[i32; 64]>, CodecError> {
    let malformed = |reason| CodecError::Malformed { block, reason };
    let mut q = [0i32; 64];
    let delta = match read_sleb128(bytes, pos) {
        Ok(v) => v,
        Err(LebError::Eof) => return Ok(None),
        Err(LebError::Overflow) => return Err(malformed("dc value overflow")),
    };
    let dc = *prev_dc + delta;
    q[0] = i32::try_from(dc).map_err(|_| malformed("dc value overflow"))?;
    let mut k = 1usize;
    loop {
        let Some(&run) = bytes.get(*pos) else {
            return Ok(None);
        };
        *pos += 1;
        if run == END_OF_BLOCK {
            break;
        }
        k += run as usize;
        if k >= 64 {
            return Err(malformed("run past end of block"));
        }
        let v = match read_sleb128(bytes, pos) {
            Ok(v) => v,
            Err(LebError::Eof) => return Ok(None),
            Err(LebError::Overflow) => return Err(malformed("ac value overflow")),
        };
        if v == 0 {
            return Err(malformed("zero ac value"));
        }
        q[k] = v as i32;
        k += 1;
    }
    *prev_dc = dc;
    Ok(Some(q))
}

fn reconstruct_block(q: &[i32; 64], table: &QualityTable) -> [f64; 64] {
    let mut coef = [0.0; 64];
    for (k, &n) in ZIGZAG.iter().enumerate() {
        coef[n] = q[k] as f64 * table.0[n] as f64;
    }
    idct(&coef)
}

fn store_block(plane: &mut [u8], w: usize, h: usize, bx: usize, by: usize, px: &[f64; 64]) {
    for y in 0..BLOCK {
        let r = by * BLOCK + y;
        if r >= h {
            break;
        }
        for x in 0..BLOCK {
            let c = bx * BLOCK + x;
            if c >= w {
                break;
            }
            plane[r * w + c] = (px[y * BLOCK + x].round() + 128.0).clamp(0.0, 255.0) as u8;
        }
    }
}

/// Result of decoding a possibly truncated stream.
#[derive(Debug, Clone)]
pub struct PartialDecode {
    pub plane: TiledPlane,
    /// Blocks decoded, counted in raster order from the first.
    pub decoded_blocks: usize,
    pub total_blocks: usize,
    pub blocks_per_row: usize,
}

impl PartialDecode {
    pub fn is_complete(&self) -> bool {
        self.decoded_blocks == self.total_blocks
    }

    /// Per plane pixel: `true` when its block was not decoded.
    pub fn missing_pixels(&self) -> Vec<bool> {
        let (w, h) = (self.plane.width(), self.plane.height());
        let mut out = vec![false; w * h];
        for r in 0..h {
            for c in 0..w {
                let block = (r / BLOCK) * self.blocks_per_row + c / BLOCK;
                out[r * w + c] = block >= self.decoded_blocks;
            }
        }
        out
    }
}

fn decode_inner(bytes: &[u8], allow_partial: bool) -> Result<PartialDecode, CodecError> {
    let header = parse_header(bytes)?;
    let table = QualityTable::new(header.quality)?;
    let (bw, bh) = header.blocks();
    let total = bw * bh;
    let mut pos = FTCB_HEADER_LEN;
    let mut prev_dc = 0i64;
    let mut blocks = Vec::with_capacity(total);
    while blocks.len() < total {
        match read_block(bytes, &mut pos, &mut prev_dc, blocks.len())? {
            Some(q) => blocks.push(q),
            None if allow_partial => break,
            None => {
                return Err(CodecError::Truncated {
                    blocks: blocks.len(),
                    expected: total,
                })
            }
        }
    }
    if blocks.len() == total && pos != bytes.len() {
        return Err(CodecError::BlockCount(bytes.len() - pos));
    }
    let (w, h) = (header.layout.plane_w(), header.layout.plane_h());
    let mut plane = vec![128u8; w * h];
    let pixels: Vec<[f64; 64]> = blocks
        .par_iter()
        .map(|q| reconstruct_block(q, &table))
        .collect();
    for (i, px) in pixels.iter().enumerate() {
        store_block(&mut plane, w, h, i % bw, i / bw, px);
    }
    Ok(PartialDecode {
        plane: TiledPlane::new(plane, header.layout, header.levels)?,
        decoded_blocks: blocks.len(),
        total_blocks: total,
        blocks_per_row: bw,
    })
}

pub fn decode(b: &CodecBitstream) -> Result<TiledPlane, CodecError> {
    decode_bytes(b.bytes())
}

pub fn decode_bytes(bytes: &[u8]) -> Result<TiledPlane, CodecError> {
    Ok(decode_inner(bytes, false)?.plane)
}

/// Decode the longest complete run of blocks in a stream prefix. Missing
/// blocks are filled with mid-grey (128).
pub fn decode_prefix(bytes: &[u8]) -> Result<PartialDecode, CodecError> {
    decode_inner(bytes, true)
}

/// Highest quality whose stream fits in `target_bytes`, by binary search.
pub fn encode_to_target(p: &TiledPlane, target_bytes: usize) -> Result<CodecBitstream, CodecError> {
    let mut best = encode(p, 1)?;
    if best.len() > target_bytes {
        return Err(CodecError::TargetTooSmall {
            target: target_bytes,
            minimum: best.len(),
        });
    }
    let (mut lo, mut hi) = (1u8, 100u8);
    // invariant: lo fits; everything above hi does not
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        let s = encode(p, mid)?;
        if s.len() <= target_bytes {
            lo = mid;
            best = s;
        } else {
            hi = mid - 1;
        }
    }
    Ok(best)
}

/// PSNR of two planes with peak 255; `None` when they are identical.
pub fn plane_psnr(a: &TiledPlane, b: &TiledPlane) -> Option<f64> {
    assert_eq!(a.bytes().len(), b.bytes().len(), "plane sizes differ");
    let mse = plane_mse(a, b);
    (mse > 0.0).then(|| 10.0 * (255.0 * 255.0 / mse).log10())
}

pub fn plane_mse(a: &TiledPlane, b: &TiledPlane) -> f64 {
    let sum: f64 = a
        .bytes()
        .iter()
        .zip(b.bytes())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.bytes().len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub quality: u8,
    pub mean_bytes: f64,
    pub agreement: f64,
}

/// Full quantize, tile, encode, decode, detile, dequantize path for each
/// quality, scored by agreement with the uncompressed model.
pub fn rate_fidelity_curve(
    model: &StubModel,
    corpus: &[u64],
    cut: CutPoint,
    spec: &QuantizerSpec,
    stats: &TensorStats,
    qualities: &[u8],
) -> Result<Vec<RateRow>, CodecError> {
    for &q in qualities {
        QualityTable::new(q)?;
    }
    let clean = model.clean_run(corpus, cut);
    let mut rows = Vec::with_capacity(qualities.len());
    for &quality in qualities {
        let eval = model.evaluate(&clean, cut, |_, t| {
            let q = quantizer::quantize(t, spec, stats).expect("stats match");
            let stream = encode(&tiler::tile(&q), quality).expect("quality checked");
            let plane = decode(&stream).expect("own stream");
            let back = tiler::detile(&plane).expect("own layout");
            let r = quantizer::dequantize(&back, spec, stats).expect("stats match");
            (r, stream.len() as f64)
        });
        rows.push(RateRow {
            quality,
            mean_bytes: eval.mean_metric,
            agreement: eval.agreement,
        });
    }
    Ok(rows)
}
