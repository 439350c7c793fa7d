//! Derived performance arithmetic: throughput, bandwidth, arithmetic
//! intensity, padding overhead and time improvements.
//!
//! Units are decimal: TFLOP/s is `1e12` flops per second and GB/s is `1e9`
//! bytes per second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{flops_and_bytes, padded_shape, ProblemShape, TileConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    pub label: String,
    pub ms: f64,
    pub tflops: f64,
    pub gbps: f64,
    pub shape: ProblemShape,
}

impl PerfRecord {
    /// Record with throughput columns derived from `ms`.
    pub fn measured(label: impl Into<String>, shape: ProblemShape, ms: f64) -> Result<Self> {
        Ok(PerfRecord {
            label: label.into(),
            ms,
            tflops: tflops(&shape, ms)?,
            gbps: gbps(&shape, ms)?,
            shape,
        })
    }
}

fn check_ms(ms: f64) -> Result<()> {
    if ms.is_nan() || ms <= 0.0 || !ms.is_finite() {
        return Err(Error::invalid("ms", format!("must be positive, got {ms}")));
    }
    Ok(())
}

pub fn tflops(shape: &ProblemShape, ms: f64) -> Result<f64> {
    check_ms(ms)?;
    let (flops, _) = flops_and_bytes(shape);
    Ok(flops as f64 / (ms * 1e9))
}

pub fn gbps(shape: &ProblemShape, ms: f64) -> Result<f64> {
    check_ms(ms)?;
    let (_, bytes) = flops_and_bytes(shape);
    Ok(bytes as f64 / (ms * 1e6))
}

/// Flops per byte moved.
pub fn arithmetic_intensity(shape: &ProblemShape) -> f64 {
    let (flops, bytes) = flops_and_bytes(shape);
    flops as f64 / bytes as f64
}

/// Time saved by `variant` relative to `baseline`, in percent.
pub fn improvement_pct(baseline: &PerfRecord, variant: &PerfRecord) -> Result<f64> {
    let (b, v) = (&baseline.shape, &variant.shape);
    if (b.m, b.n, b.k, b.elem_bytes) != (v.m, v.n, v.k, v.elem_bytes) {
        return Err(Error::DimensionMismatch(format!(
            "cannot compare {}x{}x{} with {}x{}x{}",
            b.m, b.n, b.k, v.m, v.n, v.k
        )));
    }
    check_ms(baseline.ms)?;
    check_ms(variant.ms)?;
    Ok((baseline.ms - variant.ms) / baseline.ms * 100.0)
}

/// Extra volume executed because of padding, relative to the real volume.
pub fn padding_overhead(shape: &ProblemShape, tiles: &TileConfig) -> f64 {
    let padded = padded_shape(shape, tiles).volume();
    let real = shape.volume();
    (padded - real) as f64 / real as f64
}
