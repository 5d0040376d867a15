//! Tensor to bitstream and back: quantize, tile, block-code.

use cisplit_core::codec::{self, CodecBitstream, CodecError};
use cisplit_core::quantizer::{self, QuantError, QuantizerSpec};
use cisplit_core::stats::TensorStats;
use cisplit_core::tensor::FeatureTensor;
use cisplit_core::tiler::{self, TileError, TileLayout, TiledPlane};
use thiserror::Error;

use crate::config::CodecSetting;

#[derive(Debug, Error)]
pub enum TranscodeError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub fn encode_tensor(
    t: &FeatureTensor,
    spec: &QuantizerSpec,
    stats: &TensorStats,
    setting: CodecSetting,
) -> Result<CodecBitstream, TranscodeError> {
    let plane = tiler::tile(&quantizer::quantize(t, spec, stats)?);
    Ok(match setting {
        CodecSetting::Quality(q) => codec::encode(&plane, q)?,
        CodecSetting::TargetBytes(n) => codec::encode_to_target(&plane, n)?,
    })
}

/// Lossy coding can push a byte past the last symbol when fewer than 256
/// levels are in use.
fn clamp_symbols(plane: &mut TiledPlane, levels: u16) {
    let top = (levels - 1).min(255) as u8;
    for b in plane.bytes_mut() {
        *b = (*b).min(top);
    }
}

pub fn decode_tensor(
    bytes: &[u8],
    spec: &QuantizerSpec,
    stats: &TensorStats,
) -> Result<FeatureTensor, TranscodeError> {
    let mut plane = codec::decode_bytes(bytes)?;
    clamp_symbols(&mut plane, spec.levels());
    Ok(quantizer::dequantize(&tiler::detile(&plane)?, spec, stats)?)
}

/// Result of decoding a stream that may have lost bytes.
#[derive(Debug, Clone)]
pub struct DamagedDecode {
    pub tensor: FeatureTensor,
    /// Per tensor element, `true` when it could not be decoded.
    pub missing: Vec<bool>,
}

impl DamagedDecode {
    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

/// Decode the longest usable prefix of a stream. Elements of undecoded
/// blocks are reported missing; if even the header is unreadable every
/// element is missing.
pub fn decode_damaged(
    prefix: &[u8],
    layout: TileLayout,
    spec: &QuantizerSpec,
    stats: &TensorStats,
) -> Result<DamagedDecode, TranscodeError> {
    let shape = layout.tensor_shape();
    let (mut plane, missing_px) = match codec::decode_prefix(prefix) {
        Ok(p) if p.plane.layout() == layout => {
            let m = p.missing_pixels();
            (p.plane, m)
        }
        _ => {
            let plane = TiledPlane::new(
                vec![spec.mid_symbol(); layout.plane_len()],
                layout,
                spec.levels(),
            )?;
            (plane, vec![true; layout.plane_len()])
        }
    };
    clamp_symbols(&mut plane, spec.levels());
    let q = tiler::detile(&plane)?;
    let tensor = quantizer::dequantize(&q, spec, stats)?;
    let pw = layout.plane_w();
    let mut missing = vec![false; shape.len()];
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                let (r, col) = layout.position(c, y, x);
                missing[shape.index(y, x, c)] = missing_px[r * pw + col];
            }
        }
    }
    Ok(DamagedDecode { tensor, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cisplit_core::model::{CutPoint, StubModel};
    use cisplit_core::quantizer::QuantMode;
    use cisplit_core::stats::collect_stats;

    fn setup() -> (StubModel, QuantizerSpec, TensorStats) {
        let m = StubModel::new(7);
        let stats = collect_stats(&m.calibration_tensors(CutPoint::STAGE2, 16)).unwrap();
        (
            m,
            QuantizerSpec::new(256, 4.0, QuantMode::Aggregate).unwrap(),
            stats,
        )
    }

    #[test]
    fn full_stream_has_nothing_missing() {
        let (m, spec, stats) = setup();
        let t = m.cut_tensor(3, CutPoint::STAGE2);
        let b = encode_tensor(&t, &spec, &stats, CodecSetting::Quality(90)).unwrap();
        let d = decode_damaged(b.bytes(), b.layout(), &spec, &stats).unwrap();
        assert_eq!(d.missing_count(), 0);
        assert_eq!(d.tensor, decode_tensor(b.bytes(), &spec, &stats).unwrap());
    }

    #[test]
    fn truncation_marks_tail_missing() {
        let (m, spec, stats) = setup();
        let t = m.cut_tensor(3, CutPoint::STAGE2);
        let b = encode_tensor(&t, &spec, &stats, CodecSetting::Quality(90)).unwrap();
        let half = decode_damaged(&b.bytes()[..b.len() / 2], b.layout(), &spec, &stats).unwrap();
        assert!(half.missing_count() > 0 && half.missing_count() < t.shape().len());
        let none = decode_damaged(&b.bytes()[..5], b.layout(), &spec, &stats).unwrap();
        assert_eq!(none.missing_count(), t.shape().len());
    }
}
