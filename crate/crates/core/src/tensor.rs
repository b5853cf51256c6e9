//! Dense row-major tensors and symmetric 8-bit quantization primitives.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major floating point tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
    #[serde(default)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform init in [-bound, bound], deterministic given the rng state.
    pub fn rand_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Symmetric per-tensor 8-bit quantized tensor (zero point fixed at 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub qdata: Vec<i8>,
    pub scale: f64,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.qdata.iter().map(|&q| q as f64 * self.scale).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

/// Symmetric quantization: scale = max|t| / 127, qdata = round(t/scale).
///
/// An all-zero tensor gets scale 1 so dequantization is well defined.
pub fn quantize(t: &Tensor) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    let max_abs = t.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let qdata = t
        .data
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape.clone(),
        qdata,
        scale,
    })
}

/// Integer matmul of two quantized 2-D tensors with i32 accumulation.
///
/// Scales are applied once after accumulation, so the result equals the
/// float matmul of the dequantized operands up to accumulation rounding.
pub fn qmatmul(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "qmatmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    let s = a.scale * b.scale;
    for i in 0..m {
        for j in 0..n {
            let mut acc: i32 = 0;
            for p in 0..k {
                acc += a.qdata[i * k + p] as i32 * b.qdata[p * n + j] as i32;
            }
            out[i * n + j] = acc as f64 * s;
        }
    }
    Ok(Tensor::from_vec(&[m, n], out))
}
