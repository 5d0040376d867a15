//! CSV and JSON output for the experiment subcommands, plus argument
//! parsing helpers shared by the CLI.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cisplit_core::metrics::Psnr;
use cisplit_core::motion::ShiftReport;
use serde::Serialize;

/// Write `rows` as CSV with a header row taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Parse `"a..b"` (inclusive, stepping by `step`) or a comma list.
pub fn parse_f64_list(s: &str, step: f64) -> Result<Vec<f64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (f64, f64) = (a.trim().parse()?, b.trim().parse()?);
        if step.is_nan() || step <= 0.0 || b < a {
            bail!("bad range {s:?} with step {step}");
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + i as f64 * step).collect());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {p:?}"))
        })
        .collect()
}

/// Integer version of [`parse_f64_list`] with unit step.
pub fn parse_int_list<T>(s: &str) -> Result<Vec<T>>
where
    T: TryFrom<i64>,
{
    let to = |v: i64| T::try_from(v).map_err(|_| anyhow::anyhow!("{v} out of range"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (i64, i64) = (a.trim().parse()?, b.trim().parse()?);
        if b < a {
            bail!("empty range {s:?}");
        }
        return (a..=b).map(to).collect();
    }
    s.split(',')
        .map(|p| {
            to(p.trim()
                .parse::<i64>()
                .with_context(|| format!("bad integer {p:?}"))?)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MotionRow {
    pub shift_px: f64,
    pub tensor_shift: f64,
    /// Empty when the prediction is exact.
    pub psnr_db: Option<f64>,
    pub exact: bool,
    pub mean_mse: f64,
    pub max_abs_error: f64,
    pub interior_pixels: usize,
}

impl From<&ShiftReport> for MotionRow {
    fn from(r: &ShiftReport) -> Self {
        Self {
            shift_px: r.shift_px,
            tensor_shift: r.tensor_shift,
            psnr_db: match r.psnr {
                Psnr::Db(v) => Some(v),
                _ => None,
            },
            exact: r.psnr == Psnr::Infinite,
            mean_mse: r.mean_mse,
            max_abs_error: r.max_abs_error,
            interior_pixels: r.interior_pixels,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecCurveRow {
    pub cut: String,
    pub quality: u8,
    pub mean_bytes: f64,
    pub agreement: f64,
}
