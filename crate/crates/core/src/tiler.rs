//! Packing a quantized HWC tensor into one 8-bit plane and back.
//!
//! Channel `c` occupies the tile at grid row `c / grid_cols`, column
//! `c % grid_cols`. Tiles past the last channel are padding.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{QuantError, QuantizedTensor};
use crate::tensor::{FeatureTensor, Shape};

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("plane has {actual} bytes, layout needs {expected}")]
    PlaneSize { expected: usize, actual: usize },
    #[error("layout of {grid_cols}x{grid_rows} tiles cannot hold {channels} channels")]
    GridTooSmall {
        grid_cols: usize,
        grid_rows: usize,
        channels: usize,
    },
    #[error("empty layout dimension")]
    EmptyLayout,
    #[error("permutation is not a bijection on {0} channels")]
    BadPermutation(usize),
    #[error("channel index {index} out of range for {channels} channels")]
    Channel { index: usize, channels: usize },
    #[error("pool stride must be at least 1")]
    PoolStride,
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub channels: usize,
}

impl TileLayout {
    /// Near-square grid for a `height x width x channels` tensor.
    pub fn for_shape(shape: Shape) -> Self {
        let c = shape.channels.max(1);
        let mut cols = (c as f64).sqrt().ceil() as usize;
        // guard against sqrt rounding on perfect squares
        while cols * cols < c {
            cols += 1;
        }
        while cols > 1 && (cols - 1) * (cols - 1) >= c {
            cols -= 1;
        }
        let rows = c.div_ceil(cols);
        Self {
            grid_cols: cols,
            grid_rows: rows,
            tile_w: shape.width,
            tile_h: shape.height,
            channels: shape.channels,
        }
    }

    pub fn validate(&self) -> Result<(), TileError> {
        if self.grid_cols == 0
            || self.grid_rows == 0
            || self.tile_w == 0
            || self.tile_h == 0
            || self.channels == 0
        {
            return Err(TileError::EmptyLayout);
        }
        if self.channels > self.grid_cols * self.grid_rows {
            return Err(TileError::GridTooSmall {
                grid_cols: self.grid_cols,
                grid_rows: self.grid_rows,
                channels: self.channels,
            });
        }
        Ok(())
    }

    pub fn plane_w(&self) -> usize {
        self.grid_cols * self.tile_w
    }

    pub fn plane_h(&self) -> usize {
        self.grid_rows * self.tile_h
    }

    pub fn plane_len(&self) -> usize {
        self.plane_w() * self.plane_h()
    }

    pub fn tensor_shape(&self) -> Shape {
        Shape::new(self.tile_h, self.tile_w, self.channels)
    }

    /// Plane `(row, col)` of tensor element `(y, x)` in tile slot `slot`.
    #[inline]
    pub fn position(&self, slot: usize, y: usize, x: usize) -> (usize, usize) {
        let (gr, gc) = (slot / self.grid_cols, slot % self.grid_cols);
        (gr * self.tile_h + y, gc * self.tile_w + x)
    }
}

/// A row-major `plane_h x plane_w` byte image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiledPlane {
    bytes: Vec<u8>,
    layout: TileLayout,
    levels: u16,
}

impl TiledPlane {
    pub fn new(bytes: Vec<u8>, layout: TileLayout, levels: u16) -> Result<Self, TileError> {
        layout.validate()?;
        if bytes.len() != layout.plane_len() {
            return Err(TileError::PlaneSize {
                expected: layout.plane_len(),
                actual: bytes.len(),
            });
        }
        Ok(Self {
            bytes,
            layout,
            levels,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    pub fn layout(&self) -> TileLayout {
        self.layout
    }

    pub fn levels(&self) -> u16 {
        self.levels
    }

    pub fn width(&self) -> usize {
        self.layout.plane_w()
    }

    pub fn height(&self) -> usize {
        self.layout.plane_h()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.bytes[row * self.layout.plane_w() + col]
    }

    /// Binary PGM (P5).
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width(), self.height())?;
        out.write_all(&self.bytes)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.bytes.len() + 20);
        self.write_pgm(&mut v).expect("writing to a Vec");
        v
    }
}

fn check_permutation(order: &[usize], channels: usize) -> Result<(), TileError> {
    if order.len() != channels {
        return Err(TileError::BadPermutation(channels));
    }
    let mut seen = vec![false; channels];
    for &c in order {
        if c >= channels || seen[c] {
            return Err(TileError::BadPermutation(channels));
        }
        seen[c] = true;
    }
    Ok(())
}

pub fn tile(q: &QuantizedTensor) -> TiledPlane {
    let identity: Vec<usize> = (0..q.shape().channels).collect();
    tile_permuted(q, &identity).expect("identity permutation")
}

/// Tile with channel `order[slot]` placed in tile slot `slot`.
pub fn tile_permuted(q: &QuantizedTensor, order: &[usize]) -> Result<TiledPlane, TileError> {
    let shape = q.shape();
    check_permutation(order, shape.channels)?;
    let layout = TileLayout::for_shape(shape);
    let pad = (q.levels() / 2) as u8;
    let mut bytes = vec![pad; layout.plane_len()];
    let pw = layout.plane_w();
    for (slot, &c) in order.iter().enumerate() {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (r, col) = layout.position(slot, y, x);
                bytes[r * pw + col] = q.get(y, x, c);
            }
        }
    }
    Ok(TiledPlane {
        bytes,
        layout,
        levels: q.levels(),
    })
}

pub fn detile(p: &TiledPlane) -> Result<QuantizedTensor, TileError> {
    let identity: Vec<usize> = (0..p.layout.channels).collect();
    detile_permuted(p, &identity)
}

pub fn detile_permuted(p: &TiledPlane, order: &[usize]) -> Result<QuantizedTensor, TileError> {
    let layout = p.layout;
    layout.validate()?;
    if p.bytes.len() != layout.plane_len() {
        return Err(TileError::PlaneSize {
            expected: layout.plane_len(),
            actual: p.bytes.len(),
        });
    }
    check_permutation(order, layout.channels)?;
    let shape = layout.tensor_shape();
    let mut symbols = vec![0u8; shape.len()];
    let pw = layout.plane_w();
    for (slot, &c) in order.iter().enumerate() {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (r, col) = layout.position(slot, y, x);
                symbols[shape.index(y, x, c)] = p.bytes[r * pw + col];
            }
        }
    }
    Ok(QuantizedTensor::new(shape, p.levels, symbols)?)
}

fn normalized_pooled(t: &FeatureTensor, c: usize, stride: usize) -> Vec<f64> {
    let (h, w) = (t.height(), t.width());
    let map: Vec<f64> = t.channel(c).into_iter().map(f64::from).collect();
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let var = map.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let norm: Vec<f64> = if std > 0.0 {
        map.iter().map(|v| (v - mean) / std).collect()
    } else {
        vec![0.0; map.len()]
    };
    let (ph, pw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Vec::with_capacity(ph * pw);
    for py in 0..ph {
        for px in 0..pw {
            let mut m = f64::NEG_INFINITY;
            for y in py * stride..((py + 1) * stride).min(h) {
                for x in px * stride..((px + 1) * stride).min(w) {
                    m = m.max(norm[y * w + x]);
                }
            }
            out.push(m);
        }
    }
    out
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Polarity-insensitive distance between two channels after per-channel
/// normalization and max pooling.
///
/// Max pooling does not commute with negation, so both `d'(a, -b)` and
/// `d'(-a, b)` are taken; that keeps the result symmetric in `(c, c2)`.
pub fn channel_distance(
    t: &FeatureTensor,
    c: usize,
    c2: usize,
    pool_stride: usize,
) -> Result<f64, TileError> {
    let channels = t.channels();
    for index in [c, c2] {
        if index >= channels {
            return Err(TileError::Channel { index, channels });
        }
    }
    if pool_stride == 0 {
        return Err(TileError::PoolStride);
    }
    let neg = t.map(|v| -v);
    let a = normalized_pooled(t, c, pool_stride);
    let b = normalized_pooled(t, c2, pool_stride);
    let na = normalized_pooled(&neg, c, pool_stride);
    let nb = normalized_pooled(&neg, c2, pool_stride);
    Ok(l2(&a, &b).min(l2(&a, &nb)).min(l2(&na, &b)))
}
