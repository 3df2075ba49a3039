//! Symmetric group-wise round-to-nearest weight quantization.
//!
//! Each group of weights gets a step `s = max|w| / 2^(N−1)`; a weight maps
//! to index `i = round(w/s)` (ties away from zero) clamped to
//! `[−2^(N−1), 2^(N−1) − 1]`, and dequantizes to `i·s`. Without clamping, `w`
//! lies in `[(i − ½)s, (i + ½)s)`, so `|w − i·s| ≤ s/2`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One scale per output row.
    PerRow,
    /// One scale per `g` consecutive weights within a row.
    Group(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub grouping: Grouping,
}

impl QuantSpec {
    pub fn new(bits: u32, grouping: Grouping) -> Self {
        Self { bits, grouping }
    }

    pub fn int4() -> Self {
        Self::new(4, Grouping::PerRow)
    }

    pub fn int8() -> Self {
        Self::new(8, Grouping::PerRow)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Spec(format!(
                "bit width {} outside 2..=8 (indices are stored as i8)",
                self.bits
            )));
        }
        if self.grouping == Grouping::Group(0) {
            return Err(Error::Spec("group size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Weights per group for a tensor of this shape.
    pub fn group_len(&self, shape: &[usize]) -> Result<usize> {
        let row = *shape.last().unwrap_or(&1);
        match self.grouping {
            Grouping::PerRow => Ok(row),
            Grouping::Group(g) if g >= 1 && row.is_multiple_of(g) => Ok(g),
            Grouping::Group(g) => Err(Error::Spec(format!(
                "group size {g} does not divide row length {row}"
            ))),
        }
    }

    /// Short label such as `int4` or `int4-g16`.
    pub fn label(&self) -> String {
        match self.grouping {
            Grouping::PerRow => format!("int{}", self.bits),
            Grouping::Group(g) => format!("int{}-g{g}", self.bits),
        }
    }
}

/// `max|w| / 2^(N−1)`, or 1 for an all-zero group.
pub fn step_size(group: &[f64], bits: u32) -> f64 {
    let m = group.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / (1u64 << (bits - 1)) as f64
    }
}

/// `round(w/s)` with ties away from zero, clamped to the signed `bits` range.
pub fn bin_index(w: f64, s: f64, bits: u32) -> i32 {
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    // f64::round rounds half away from zero.
    let r = (w / s).round();
    r.clamp(lo as f64, hi as f64) as i32
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub indices: Vec<i8>,
    pub scales: Vec<f64>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn group_len(&self) -> usize {
        self.indices.len() / self.scales.len()
    }
}

/// Per-group step sizes of `w` under `spec`.
pub fn group_scales(w: &Tensor, spec: &QuantSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let g = spec.group_len(w.shape())?;
    Ok(w.data().chunks(g).map(|c| step_size(c, spec.bits)).collect())
}

/// Bin indices of `w` on a given grid of per-group scales.
pub fn indices_on_grid(w: &Tensor, scales: &[f64], spec: &QuantSpec) -> Result<Vec<i8>> {
    let g = spec.group_len(w.shape())?;
    if w.len() / g != scales.len() {
        return Err(Error::dim("indices_on_grid", w.shape(), &[scales.len()]));
    }
    Ok(w.data()
        .chunks(g)
        .zip(scales)
        .flat_map(|(c, &s)| c.iter().map(move |&x| bin_index(x, s, spec.bits) as i8))
        .collect())
}

pub fn quantize(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if !w.is_finite() {
        return Err(Error::Contract("cannot quantize non-finite weights".into()));
    }
    let scales = group_scales(w, spec)?;
    let indices = indices_on_grid(w, &scales, spec)?;
    Ok(QuantizedTensor {
        indices,
        scales,
        spec: *spec,
        shape: w.shape().to_vec(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let g = q.group_len();
    let data = q
        .indices
        .chunks(g)
        .zip(&q.scales)
        .flat_map(|(c, &s)| c.iter().map(move |&i| i as f64 * s))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor shape is consistent")
}

/// Quantized form of every linear weight in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub spec: QuantSpec,
    pub tensors: BTreeMap<String, QuantizedTensor>,
}

pub fn quantize_weights(ck: &Checkpoint, spec: &QuantSpec) -> Result<QuantizedWeights> {
    let mut tensors = BTreeMap::new();
    for layer in ck.config.linear_layers() {
        let name = layer.param_name();
        tensors.insert(name.clone(), quantize(ck.param(&name)?, spec)?);
    }
    Ok(QuantizedWeights {
        spec: *spec,
        tensors,
    })
}

/// Fake-quantized copy: linear weights replaced by `deq(quant(W))`,
/// embeddings and layer norms untouched.
pub fn quantize_model(ck: &Checkpoint, spec: &QuantSpec) -> Result<Checkpoint> {
    Ok(quantize_model_with_weights(ck, spec)?.0)
}

pub fn quantize_model_with_weights(
    ck: &Checkpoint,
    spec: &QuantSpec,
) -> Result<(Checkpoint, QuantizedWeights)> {
    let qw = quantize_weights(ck, spec)?;
    let mut out = ck.clone();
    for (name, q) in &qw.tensors {
        out.params.insert(name.clone(), dequantize(q));
    }
    let out = out.with_provenance_suffix(&format!(":int{}", spec.bits));
    Ok((out, qw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_size_examples() {
        assert_eq!(step_size(&[1.0, -0.5], 4), 0.125);
        let s8 = step_size(&[-1.0, 0.2], 8);
        assert_eq!(s8, 1.0 / 128.0);
        assert_eq!(step_size(&[1.0], 4) / s8, 16.0);
        assert_eq!(step_size(&[0.0, 0.0], 4), 1.0);
    }

    #[test]
    fn bin_index_examples() {
        assert_eq!(bin_index(0.30, 0.125, 4), 2);
        assert_eq!(bin_index(0.3125, 0.125, 4), 3);
        assert_eq!(bin_index(-0.3125, 0.125, 4), -3);
        assert_eq!(bin_index(1.0, 0.125, 4), 7);
        assert_eq!(bin_index(-1.0, 0.125, 4), -8);
    }

    #[test]
    fn zero_group_convention() {
        let w = Tensor::zeros(&[2, 4]);
        let q = quantize(&w, &QuantSpec::int4()).unwrap();
        assert_eq!(q.scales, vec![1.0, 1.0]);
        assert!(q.indices.iter().all(|&i| i == 0));
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn grid_points_are_fixed_points() {
        // max |w| = 3s with s chosen so the step formula reproduces s
        let s = 0.25;
        let spec = QuantSpec::new(2, Grouping::PerRow);
        // 2 bits: s = max/2, so max = 2s = 0.5 and indices in [-2, 1]
        let w = Tensor::from_rows(&[&[-2.0 * s, -s, 0.0, s]]);
        let q = quantize(&w, &spec).unwrap();
        assert_eq!(q.scales, vec![s]);
        assert_eq!(dequantize(&q), w);

        let spec4 = QuantSpec::int4();
        let s4 = 0.1;
        let vals: Vec<f64> = (-2..=3).map(|i| i as f64 * s4).collect();
        let mut row = vals.clone();
        row.push(-8.0 * s4); // pins max|w| = 8·s4
        let w = Tensor::new(vec![1, row.len()], row).unwrap();
        let back = dequantize(&quantize(&w, &spec4).unwrap());
        for (a, b) in back.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dequantize_single_element() {
        let q = QuantizedTensor {
            indices: vec![bin_index(0.26, 0.125, 4) as i8],
            scales: vec![0.125],
            spec: QuantSpec::int4(),
            shape: vec![1, 1],
        };
        assert_eq!(dequantize(&q).data(), &[0.25]);
    }

    #[test]
    fn incompatible_grouping_is_a_spec_error() {
        let w = Tensor::zeros(&[2, 10]);
        let spec = QuantSpec::new(4, Grouping::Group(16));
        assert!(matches!(quantize(&w, &spec), Err(Error::Spec(_))));
        assert!(QuantSpec::new(9, Grouping::PerRow).validate().is_err());
    }
}
