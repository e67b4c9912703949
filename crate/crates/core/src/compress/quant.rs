//! Dynamic INT8 quantization.
//!
//! Linear-layer weights are quantized once, ahead of time, with one symmetric
//! per-tensor scale. Activations entering a quantized layer are quantized on
//! each call with the same rule, multiplied in integers with 32-bit
//! accumulation, and rescaled to f32. Norms, biases and embeddings stay f32.

use crate::tensor::{kernels, Tensor};
use crate::vit::checkpoint::{Checkpoint, CheckpointError, NamedTensor, TensorData, VariantStanza};
use crate::vit::params::{named_leaves, Linear, MapLeaves, Norm, ViTParams};
use crate::vit::{check_image, patch_indices, ForwardTrace, Model, ModelError, ViTConfig};

/// Largest inner dimension whose worst-case dot product `k·127²` fits in i32.
pub const MAX_INNER_DIM: usize = (i32::MAX as usize) / (127 * 127);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantError {
    #[error("shape mismatch: weight {weight:?}, input {input:?}")]
    Shape { weight: [usize; 2], input: Vec<usize> },
    #[error("inner dimension {0} could overflow the 32-bit accumulator (max {MAX_INNER_DIM})")]
    AccumulatorOverflow(usize),
}

impl From<QuantError> for ModelError {
    fn from(e: QuantError) -> Self {
        ModelError::InvalidConfig(e.to_string())
    }
}

/// Symmetric scale for a tensor with the given max magnitude; an all-zero
/// tensor gets 1.0.
pub fn symmetric_scale(max_abs: f32) -> f32 {
    if max_abs > 0.0 {
        max_abs / 127.0
    } else {
        1.0
    }
}

/// `round(v / scale)`, half away from zero, clamped to ±127. The quotient is
/// formed in f64 so `|v − q·scale| ≤ scale/2` holds exactly.
pub fn quantize_value(v: f32, scale: f32) -> i8 {
    (f64::from(v) / f64::from(scale)).round().clamp(-127.0, 127.0) as i8
}

/// Exact `|w − q·scale|`.
pub fn dequant_error(w: f32, q: i8, scale: f32) -> f64 {
    (f64::from(w) - f64::from(q) * f64::from(scale)).abs()
}

/// Per-tensor quantization `(q, scale)`.
pub fn quantize_slice(w: &[f32]) -> (Vec<i8>, f32) {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = symmetric_scale(max);
    (w.iter().map(|&v| quantize_value(v, scale)).collect(), scale)
}

/// A quantized `[rows×cols]` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub shape: [usize; 2],
    pub values: Vec<i8>,
    pub scale: f32,
}

impl QTensor {
    pub fn quantize(w: &Tensor) -> Self {
        let (rows, cols) = w.dims2();
        let (values, scale) = quantize_slice(w.data());
        Self { shape: [rows, cols], values, scale }
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.values.iter().map(|&q| f32::from(q) * self.scale).collect();
        Tensor::new(self.shape.to_vec(), data).expect("stored shape")
    }
}

/// `x[m×k] · W[k×n]` with `W` in INT8 and `x` quantized on the fly.
pub fn quantized_linear(w: &QTensor, x: &Tensor) -> Result<Tensor, QuantError> {
    let [k, n] = w.shape;
    let (m, kx) = x.dims2();
    if kx != k || x.rank() != 2 {
        return Err(QuantError::Shape { weight: w.shape, input: x.shape().to_vec() });
    }
    if k > MAX_INNER_DIM {
        return Err(QuantError::AccumulatorOverflow(k));
    }
    let (qx, sx) = quantize_slice(x.data());
    let mut acc = vec![0i32; m * n];
    let wq: Vec<i32> = w.values.iter().map(|&q| i32::from(q)).collect();
    for i in 0..m {
        let row = &mut acc[i * n..(i + 1) * n];
        for (p, &a) in qx[i * k..(i + 1) * k].iter().enumerate() {
            if a == 0 {
                continue;
            }
            let a = i32::from(a);
            for (o, &b) in row.iter_mut().zip(&wq[p * n..(p + 1) * n]) {
                *o += a * b;
            }
        }
    }
    let rescale = sx * w.scale;
    Ok(Tensor::new(vec![m, n], acc.into_iter().map(|a| a as f32 * rescale).collect()).expect("m×n"))
}

/// A parameter slot of a quantized model.
#[derive(Clone, Debug, PartialEq)]
pub enum QLeaf {
    F32(Tensor),
    I8(QTensor),
}

impl QLeaf {
    fn f32(&self) -> &Tensor {
        match self {
            QLeaf::F32(t) => t,
            QLeaf::I8(_) => panic!("expected an f32 parameter"),
        }
    }
}

/// Linear-layer weights are the tensors named `*.weight`.
fn is_quantized(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    config: ViTConfig,
    params: ViTParams<QLeaf>,
}

pub fn quantize_dynamic(model: &Model) -> QuantModel {
    let names: Vec<String> = named_leaves(model.params()).into_iter().map(|(n, _)| n).collect();
    let mut i = 0;
    let params = model.params().map_leaves(&mut |t: &Tensor| {
        let leaf = if is_quantized(&names[i]) { QLeaf::I8(QTensor::quantize(t)) } else { QLeaf::F32(t.clone()) };
        i += 1;
        leaf
    });
    QuantModel { config: model.config().clone(), params }
}

impl QuantModel {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ViTParams<QLeaf> {
        &self.params
    }

    /// Float model with every quantized weight replaced by `q·scale`.
    pub fn dequantize(&self) -> Model {
        let params = self.params.map_leaves(&mut |l: &QLeaf| match l {
            QLeaf::F32(t) => t.clone(),
            QLeaf::I8(q) => q.dequantize(),
        });
        Model::from_params(self.config.clone(), params).expect("same structure")
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace, ModelError> {
        check_image(&self.config, image)?;
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.embed_dim;
        let idx = patch_indices(cfg.channels, cfg.image_size, cfg.patch_size);
        let patches = Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], idx.iter().map(|&i| image.data()[i]).collect())?;
        let emb = linear(&patches, &p.stem.patch)?;
        let mut x: Vec<f32> = p.stem.cls.f32().data().to_vec();
        if let Some(dist) = &p.stem.dist {
            x.extend_from_slice(dist.f32().data());
        }
        x.extend_from_slice(emb.data());
        for (v, &e) in x.iter_mut().zip(p.stem.pos.f32().data()) {
            *v += e;
        }
        let n = cfg.num_tokens();
        let mut x = Tensor::new(vec![n, d], x)?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for b in &p.blocks {
            let h = norm(&x, &b.norms.ln1)?;
            let q = linear(&h, &b.weights.q)?;
            let k = linear(&h, &b.weights.k)?;
            let v = linear(&h, &b.weights.v)?;
            let mut joined = vec![0.0f32; n * d];
            let mut scores = vec![0.0f32; n * n];
            let (mut qh, mut kh, mut vh) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
            for head in 0..cfg.heads {
                for r in 0..n {
                    let src = r * d + head * dh;
                    qh[r * dh..(r + 1) * dh].copy_from_slice(&q.data()[src..src + dh]);
                    kh[r * dh..(r + 1) * dh].copy_from_slice(&k.data()[src..src + dh]);
                    vh[r * dh..(r + 1) * dh].copy_from_slice(&v.data()[src..src + dh]);
                }
                scores.fill(0.0);
                kernels::matmul_nt_acc(&qh, &kh, &mut scores, n, dh, n);
                for row in scores.chunks_mut(n) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    kernels::softmax_row(row);
                }
                let mut out = vec![0.0f32; n * dh];
                kernels::matmul(&scores, &vh, &mut out, n, n, dh);
                for r in 0..n {
                    joined[r * d + head * dh..r * d + (head + 1) * dh].copy_from_slice(&out[r * dh..(r + 1) * dh]);
                }
            }
            let a = linear(&Tensor::new(vec![n, d], joined)?, &b.weights.o)?;
            x = x.zip_map(&a, |u, w| u + w)?;
            let h = norm(&x, &b.norms.ln2)?;
            let h = linear(&h, &b.weights.fc1)?.gelu();
            let h = linear(&h, &b.weights.fc2)?;
            x = x.zip_map(&h, |u, w| u + w)?;
        }
        let row = |r: usize| Tensor::new(vec![1, d], x.data()[r * d..(r + 1) * d].to_vec());
        let cls = norm(&row(0)?, &p.head.norm)?;
        let logits = linear(&cls, &p.head.head)?;
        let distill_logits = match &p.head.dist_head {
            Some(h) => Some(linear(&norm(&row(1)?, &p.head.norm)?, h)?.reshape(&[cfg.num_classes])?),
            None => None,
        };
        Ok(ForwardTrace {
            logits: logits.reshape(&[cfg.num_classes])?,
            distill_logits,
            attentions: Vec::new(),
            hiddens: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let tensors = named_leaves(&self.params)
            .into_iter()
            .map(|(name, leaf)| match leaf {
                QLeaf::F32(t) => NamedTensor::f32(name, t),
                QLeaf::I8(q) => NamedTensor {
                    name,
                    shape: q.shape.to_vec(),
                    data: TensorData::I8 { values: q.values.clone(), scale: q.scale },
                },
            })
            .collect();
        Checkpoint { config: self.config.clone(), variant: VariantStanza::Quantized, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        if ck.variant != VariantStanza::Quantized {
            return Err(CheckpointError::Mismatch(format!("expected a quantized checkpoint, found {:?}", ck.variant)));
        }
        let reference = Model::new(ck.config.clone(), 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let names = named_leaves(reference.params());
        if names.len() != ck.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.tensors.len()
            )));
        }
        let mut err = None;
        let mut i = 0;
        let params = reference.params().map_leaves(&mut |slot: &Tensor| {
            let t = &ck.tensors[i];
            let name = &names[i].0;
            i += 1;
            if &t.name != name || t.shape != slot.shape() {
                err.get_or_insert(CheckpointError::Mismatch(format!("expected {name} {:?}, found {} {:?}", slot.shape(), t.name, t.shape)));
                return QLeaf::F32(slot.clone());
            }
            match (&t.data, is_quantized(name)) {
                (TensorData::F32(v), false) => QLeaf::F32(Tensor::new(t.shape.clone(), v.clone()).expect("shape checked")),
                (TensorData::I8 { values, scale }, true) if values.iter().all(|&q| q != i8::MIN) => {
                    QLeaf::I8(QTensor { shape: [t.shape[0], t.shape[1]], values: values.clone(), scale: *scale })
                }
                _ => {
                    err.get_or_insert(CheckpointError::Mismatch(format!("unexpected dtype or value range for {name}")));
                    QLeaf::F32(slot.clone())
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(Self { config: ck.config.clone(), params }),
        }
    }
}

fn linear(x: &Tensor, l: &Linear<QLeaf>) -> Result<Tensor, ModelError> {
    let y = match &l.weight {
        QLeaf::I8(q) => quantized_linear(q, x)?,
        QLeaf::F32(w) => x.matmul(w)?,
    };
    let bias = l.bias.f32().data();
    let n = bias.len();
    let mut out = y.into_data();
    for row in out.chunks_mut(n) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    }
    Ok(Tensor::new(vec![out.len() / n, n], out)?)
}

fn norm(x: &Tensor, n: &Norm<QLeaf>) -> Result<Tensor, ModelError> {
    Ok(x.layer_norm(n.gamma.f32(), n.beta.f32(), crate::vit::LN_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn hand_example() {
        let (q, s) = quantize_slice(&[0.0, 0.5, -1.0]);
        assert_eq!(s, 1.0 / 127.0);
        assert_eq!(q, vec![0, 64, -127]);
    }

    #[test]
    fn zero_tensor_gets_unit_scale() {
        let q = QTensor::quantize(&Tensor::zeros(&[3, 2]));
        assert_eq!(q.scale, 1.0);
        assert!(q.values.iter().all(|&v| v == 0));
        assert_eq!(q.dequantize(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn half_rounds_away_from_zero() {
        assert_eq!(quantize_value(2.5, 1.0), 3);
        assert_eq!(quantize_value(-2.5, 1.0), -3);
        assert_eq!(quantize_value(0.49, 1.0), 0);
    }

    #[test]
    fn identity_weight_reproduces_grid_aligned_input() {
        let n = 8;
        let w = QTensor { shape: [n, n], values: Tensor::eye(n).data().iter().map(|&v| (v * 127.0) as i8).collect(), scale: 1.0 / 127.0 };
        // grid of the activation scale max|x|/127 = 0.5/127
        let step = 0.5 / 127.0;
        let x = Tensor::from_fn(&[2, n], |i| ((i as i32 * 37 % 255) - 127) as f32 * step);
        let y = quantized_linear(&w, &x).unwrap();
        let sx = symmetric_scale(x.max_abs());
        assert!(x.max_abs_diff(&y) <= sx);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = QTensor::quantize(&gaussian(&[16, 4], 1));
        let y = quantized_linear(&w, &Tensor::zeros(&[3, 16])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn close_to_float_matmul() {
        for seed in 0..5 {
            let w = gaussian(&[16, 16], seed);
            let x = gaussian(&[16, 16], 100 + seed);
            let exact = x.matmul(&w).unwrap();
            let approx = quantized_linear(&QTensor::quantize(&w), &x).unwrap();
            let err: f32 = exact.zip_map(&approx, |a, b| (a - b) * (a - b)).unwrap().sum().sqrt();
            let norm: f32 = exact.map(|a| a * a).sum().sqrt();
            assert!(err / norm < 0.05, "relative error {}", err / norm);
            let bound = x.max_abs() * w.max_abs() * 16.0 / 127.0;
            assert!(exact.max_abs_diff(&approx) <= bound);
        }
    }

    #[test]
    fn shape_and_overflow_errors() {
        let w = QTensor::quantize(&gaussian(&[4, 4], 1));
        assert!(matches!(quantized_linear(&w, &Tensor::zeros(&[2, 3])), Err(QuantError::Shape { .. })));
        let big = QTensor { shape: [MAX_INNER_DIM + 1, 1], values: vec![0; MAX_INNER_DIM + 1], scale: 1.0 };
        assert!(matches!(
            quantized_linear(&big, &Tensor::zeros(&[1, MAX_INNER_DIM + 1])),
            Err(QuantError::AccumulatorOverflow(_))
        ));
    }

    #[test]
    fn model_round_trip_bound_and_checkpoint() {
        let m = Model::new(ViTConfig::toy_small(), 2).unwrap();
        let q = quantize_dynamic(&m);
        let float = named_leaves(m.params());
        for ((name, leaf), (_, w)) in named_leaves(q.params()).into_iter().zip(float) {
            match leaf {
                QLeaf::I8(qt) => {
                    assert!(name.ends_with(".weight"));
                    assert!(qt.values.iter().all(|v| v.unsigned_abs() <= 127));
                    for (&v, &qv) in w.data().iter().zip(&qt.values) {
                        assert!(dequant_error(v, qv, qt.scale) <= f64::from(qt.scale) / 2.0);
                    }
                }
                QLeaf::F32(t) => assert_eq!(t, w),
            }
        }
        let bytes = q.checkpoint().to_bytes();
        let back = QuantModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn quantized_forward_tracks_float_forward() {
        let cfg = ViTConfig::toy_small();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let q = quantize_dynamic(&m);
        let img = Tensor::from_fn(&cfg.image_shape(), |i| ((i * 7919) % 1000) as f32 / 1000.0);
        let a = m.forward(&img, false).unwrap().logits;
        let b = q.forward(&img).unwrap().logits;
        assert!(a.max_abs_diff(&b) < 0.1 * a.max_abs().max(1.0), "{a:?} vs {b:?}");
        // dequantized float model is the same function up to activation rounding
        let dq = q.dequantize().forward(&img, false).unwrap().logits;
        assert!(dq.max_abs_diff(&b) < 0.1 * dq.max_abs().max(1.0));
    }

    proptest! {
        #[test]
        fn dequantization_error_within_half_step(w in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let (q, s) = quantize_slice(&w);
            for (&v, &qv) in w.iter().zip(&q) {
                prop_assert!(qv.unsigned_abs() <= 127);
                prop_assert!(dequant_error(v, qv, s) <= f64::from(s) / 2.0);
            }
        }
    }
}
