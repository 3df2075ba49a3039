//! How much of a weight update survives quantization.
//!
//! An element keeps its bin when the update is smaller than its distance to
//! the nearest bin boundary, `s·(½ − |w/s − round(w/s)|)`. Crossing
//! fractions compare bin indices of the original and updated weights on the
//! original's grid; the independent-grid variant requantizes each tensor
//! with its own scales, as a deployed quantizer would.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::numerics::Tensor;
use crate::quantizer::{group_scales, indices_on_grid, quantize, QuantSpec};

/// Largest update magnitude guaranteed to keep `w` in its bin.
pub fn masking_margin(w: f64, s: f64) -> f64 {
    let r = w / s;
    s * (0.5 - (r - r.round()).abs())
}

fn check_shapes(w0: &Tensor, wu: &Tensor) -> Result<()> {
    if w0.shape() != wu.shape() {
        return Err(Error::dim("crossing_fraction", w0.shape(), wu.shape()));
    }
    Ok(())
}

fn fraction_differing(a: &[i8], b: &[i8]) -> f64 {
    let n = a.iter().zip(b).filter(|(x, y)| x != y).count();
    n as f64 / a.len() as f64
}

/// Fraction of elements whose bin index changes, both tensors placed on the
/// grid computed from `w0`.
pub fn crossing_fraction(w0: &Tensor, wu: &Tensor, spec: &QuantSpec) -> Result<f64> {
    check_shapes(w0, wu)?;
    let scales = group_scales(w0, spec)?;
    let i0 = indices_on_grid(w0, &scales, spec)?;
    let iu = indices_on_grid(wu, &scales, spec)?;
    Ok(fraction_differing(&i0, &iu))
}

/// Fraction of elements whose bin index changes when each tensor is
/// quantized with its own scales.
pub fn crossing_fraction_independent(w0: &Tensor, wu: &Tensor, spec: &QuantSpec) -> Result<f64> {
    check_shapes(w0, wu)?;
    let q0 = quantize(w0, spec)?;
    let qu = quantize(wu, spec)?;
    Ok(fraction_differing(&q0.indices, &qu.indices))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub spec: String,
    pub bits: u32,
    pub elements: usize,
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    pub scale_min: f64,
    pub scale_mean: f64,
    pub scale_max: f64,
    pub crossing_fraction: f64,
    pub identical_after_quant: f64,
    pub crossing_fraction_independent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAggregate {
    pub spec: String,
    pub bits: u32,
    /// Element-weighted over all linear layers.
    pub crossing_fraction: f64,
    pub crossing_fraction_independent: f64,
    /// Whether the two quantized models have identical linear weights
    /// (shared grid).
    pub identical_models: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub rows: Vec<LayerRow>,
    pub aggregates: Vec<SpecAggregate>,
}

pub const CSV_HEADER: &str = "layer,spec,bits,elements,mean_abs_delta,max_abs_delta,scale_min,scale_mean,scale_max,crossing_fraction,identical_after_quant,crossing_fraction_independent";

impl MaskingReport {
    pub fn row(&self, layer: &str, spec: &str) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.layer == layer && r.spec == spec)
    }

    pub fn aggregate(&self, spec: &str) -> Option<&SpecAggregate> {
        self.aggregates.iter().find(|a| a.spec == spec)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6},{:.6},{:.6}",
                r.layer,
                r.spec,
                r.bits,
                r.elements,
                r.mean_abs_delta,
                r.max_abs_delta,
                r.scale_min,
                r.scale_mean,
                r.scale_max,
                r.crossing_fraction,
                r.identical_after_quant,
                r.crossing_fraction_independent
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Per-layer masking statistics of every linear weight under every spec.
pub fn analyze_pair(ck0: &Checkpoint, cku: &Checkpoint, specs: &[QuantSpec]) -> Result<MaskingReport> {
    if ck0.config != cku.config {
        return Err(Error::Schema {
            name: "config".into(),
            message: "checkpoints have different model configs".into(),
        });
    }
    ck0.validate()?;
    cku.validate()?;
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for spec in specs {
        spec.validate()?;
        let label = spec.label();
        let (mut crossed, mut crossed_ind, mut total) = (0.0, 0.0, 0usize);
        for layer in ck0.config.linear_layers() {
            let name = layer.param_name();
            let w0 = ck0.param(&name)?;
            let wu = cku.param(&name)?;
            let delta = wu.sub(w0)?;
            let scales = group_scales(w0, spec)?;
            let cf = crossing_fraction(w0, wu, spec)?;
            let cfi = crossing_fraction_independent(w0, wu, spec)?;
            let n = w0.len();
            crossed += cf * n as f64;
            crossed_ind += cfi * n as f64;
            total += n;
            rows.push(LayerRow {
                layer: name,
                spec: label.clone(),
                bits: spec.bits,
                elements: n,
                mean_abs_delta: delta.data().iter().map(|d| d.abs()).sum::<f64>() / n as f64,
                max_abs_delta: delta.max_abs(),
                scale_min: scales.iter().copied().fold(f64::INFINITY, f64::min),
                scale_mean: scales.iter().sum::<f64>() / scales.len() as f64,
                scale_max: scales.iter().copied().fold(0.0, f64::max),
                crossing_fraction: cf,
                identical_after_quant: 1.0 - cf,
                crossing_fraction_independent: cfi,
            });
        }
        aggregates.push(SpecAggregate {
            spec: label,
            bits: spec.bits,
            crossing_fraction: crossed / total as f64,
            crossing_fraction_independent: crossed_ind / total as f64,
            identical_models: crossed == 0.0,
        });
    }
    Ok(MaskingReport { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::quantizer::Grouping;

    #[test]
    fn margin_examples() {
        let s = 0.125;
        assert_eq!(masking_margin(2.0 * s, s), s / 2.0);
        assert!((masking_margin(2.4 * s, s) - 0.1 * s).abs() < 1e-15);
        assert!(masking_margin(2.5 * s, s).abs() < 1e-15);
    }

    #[test]
    fn crossing_examples() {
        let spec = QuantSpec::int4();
        // max|w| = 0.8 per row gives s = 0.1; the extreme sits at index −8,
        // so shifting every element up by s stays in range
        let w0 = Tensor::from_rows(&[&[-0.8, 0.3, 0.12, 0.0], &[-0.8, 0.2, 0.33, -0.04]]);
        assert_eq!(crossing_fraction(&w0, &w0, &spec).unwrap(), 0.0);
        let shifted = w0.map(|w| w + 0.1);
        assert_eq!(crossing_fraction(&w0, &shifted, &spec).unwrap(), 1.0);
        let bad = Tensor::zeros(&[4, 2]);
        assert!(crossing_fraction(&w0, &bad, &spec).is_err());
    }

    #[test]
    fn identical_checkpoints_report_no_crossings() {
        let ck = init_model(&ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            seed: 3,
        })
        .unwrap();
        let specs = [QuantSpec::int8(), QuantSpec::int4(), QuantSpec::new(4, Grouping::Group(4))];
        let rep = analyze_pair(&ck, &ck, &specs).unwrap();
        assert_eq!(rep.rows.len(), 7 * specs.len());
        for r in &rep.rows {
            assert_eq!(r.crossing_fraction, 0.0);
            assert_eq!(r.identical_after_quant, 1.0);
            assert_eq!(r.max_abs_delta, 0.0);
        }
        assert!(rep.aggregates.iter().all(|a| a.identical_models));
        assert_eq!(rep.to_csv().lines().count(), 1 + rep.rows.len());
    }
}
