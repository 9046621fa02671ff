//! Stacked experts over a fully-connected backbone.
//!
//! Block `i` maps `h_{i-1}` to `h_i = relu(h_{i-1} W_i + b_i)` with
//! `h_0 = x`. Expert `i` reads `h_i` through an alignment map
//! `ĥ_i = relu(h_i A_i + c_i)` into the shared `aligned_dim` space, so every
//! aligned feature lies in the same non-negative orthant as the final block's
//! output. The last expert's alignment is the identity (its last block width
//! must equal `aligned_dim`). Each aligned feature feeds two affine heads:
//! classification logits and a contrastive projection.
//!
//! Gradients use hand-derived backward rules over the activations recorded in
//! [`ExpertOutputs`]; losses supply the gradient w.r.t. each output tensor via
//! [`OutputGrads`].

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MOSE";

/// Norm below which a row is treated as zero by [`normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub block_widths: Vec<usize>,
    pub aligned_dim: usize,
    pub projection_dim: usize,
    pub class_count: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// `n_experts` blocks of equal width `aligned_dim`.
    pub fn uniform(
        n_experts: usize,
        aligned_dim: usize,
        projection_dim: usize,
        class_count: usize,
        input_dim: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_experts,
            block_widths: vec![aligned_dim; n_experts],
            aligned_dim,
            projection_dim,
            class_count,
            input_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_experts == 0 {
            return bad("n_experts must be at least 1".into());
        }
        if self.block_widths.len() != self.n_experts {
            return bad(format!(
                "{} block widths for {} experts",
                self.block_widths.len(),
                self.n_experts
            ));
        }
        if self.block_widths.contains(&0) {
            return bad("block widths must be positive".into());
        }
        for (name, v) in [
            ("aligned_dim", self.aligned_dim),
            ("projection_dim", self.projection_dim),
            ("class_count", self.class_count),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if *self.block_widths.last().unwrap() != self.aligned_dim {
            return bad(format!(
                "last block width {} must equal aligned_dim {} (final alignment is the identity)",
                self.block_widths.last().unwrap(),
                self.aligned_dim
            ));
        }
        Ok(())
    }
}

/// A parameter tensor and its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }
}

/// `y = x W + b`, with `W` of shape (in, out) and `b` of shape (1, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            rng.random_range(-bound..=bound)
        });
        Self {
            weight: Param::new(weight),
            bias: Param::new(Array2::zeros((1, fan_out))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    fn accumulate(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) {
        self.weight.grad += &x.t().dot(&dy);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }
}

/// Per-expert tensors of one forward pass, plus the activations backward needs.
/// Index `i` is expert `i + 1`.
#[derive(Debug, Clone)]
pub struct ExpertOutputs {
    inputs: Array2<f64>,
    pre_activations: Vec<Array2<f64>>,
    /// Raw block features `h_i`.
    pub hidden: Vec<Array2<f64>>,
    /// Aligned features `ĥ_i` (dim `aligned_dim`).
    pub aligned: Vec<Array2<f64>>,
    /// Contrastive projections `q_i`.
    pub projections: Vec<Array2<f64>>,
    /// Classification logits `ŷ_i`.
    pub logits: Vec<Array2<f64>>,
}

impl ExpertOutputs {
    pub fn n_experts(&self) -> usize {
        self.aligned.len()
    }

    pub fn batch_len(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Upstream gradients w.r.t. each expert's outputs; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub aligned: Vec<Option<Array2<f64>>>,
    pub projections: Vec<Option<Array2<f64>>>,
    pub logits: Vec<Option<Array2<f64>>>,
}

impl OutputGrads {
    pub fn new(n_experts: usize) -> Self {
        Self {
            aligned: vec![None; n_experts],
            projections: vec![None; n_experts],
            logits: vec![None; n_experts],
        }
    }

    fn add(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
        match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    pub fn add_aligned(&mut self, expert: usize, g: Array2<f64>) {
        Self::add(&mut self.aligned[expert], g);
    }

    pub fn add_projection(&mut self, expert: usize, g: Array2<f64>) {
        Self::add(&mut self.projections[expert], g);
    }

    pub fn add_logits(&mut self, expert: usize, g: Array2<f64>) {
        Self::add(&mut self.logits[expert], g);
    }

    /// Sums another set of gradients into this one.
    pub fn merge(&mut self, other: OutputGrads) {
        for (i, g) in other.aligned.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_aligned(i, g);
            }
        }
        for (i, g) in other.projections.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_projection(i, g);
            }
        }
        for (i, g) in other.logits.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_logits(i, g);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    config: ModelConfig,
    pub blocks: Vec<Linear>,
    /// `None` is the identity (always the case for the last expert).
    pub alignments: Vec<Option<Linear>>,
    pub classifiers: Vec<Linear>,
    pub projectors: Vec<Linear>,
    grads_ready: bool,
}

impl ExpertModel {
    /// Glorot-uniform weights, zero biases. Draw order follows
    /// [`params`](Self::params).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::from_seed(config.seed);
        let n = config.n_experts;
        let mut blocks = Vec::with_capacity(n);
        let mut fan_in = config.input_dim;
        for &w in &config.block_widths {
            blocks.push(Linear::glorot(fan_in, w, &mut rng));
            fan_in = w;
        }
        let alignments = config
            .block_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| (i + 1 < n).then(|| Linear::glorot(w, config.aligned_dim, &mut rng)))
            .collect();
        let classifiers = (0..n)
            .map(|_| Linear::glorot(config.aligned_dim, config.class_count, &mut rng))
            .collect();
        let projectors = (0..n)
            .map(|_| Linear::glorot(config.aligned_dim, config.projection_dim, &mut rng))
            .collect();
        Ok(Self {
            config,
            blocks,
            alignments,
            classifiers,
            projectors,
            grads_ready: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_experts
    }

    /// Parameters in declaration order: blocks, alignments, classifiers,
    /// projectors; weight before bias.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        let layers = self
            .blocks
            .iter()
            .chain(self.alignments.iter().flatten())
            .chain(&self.classifiers)
            .chain(&self.projectors);
        for layer in layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        let layers = self
            .blocks
            .iter_mut()
            .chain(self.alignments.iter_mut().flatten())
            .chain(self.classifiers.iter_mut())
            .chain(self.projectors.iter_mut());
        for layer in layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn forward_all(&self, inputs: ArrayView2<f64>) -> Result<ExpertOutputs> {
        if inputs.ncols() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "model expects input dim {}, got {}",
                self.config.input_dim,
                inputs.ncols()
            )));
        }
        let n = self.n_experts();
        let mut pre_activations = Vec::with_capacity(n);
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(n);
        for (i, block) in self.blocks.iter().enumerate() {
            let z = match i {
                0 => block.forward(inputs),
                _ => block.forward(hidden[i - 1].view()),
            };
            hidden.push(z.mapv(|v| v.max(0.0)));
            pre_activations.push(z);
        }
        let aligned: Vec<Array2<f64>> = self
            .alignments
            .iter()
            .zip(&hidden)
            .map(|(a, h)| match a {
                Some(lin) => lin.forward(h.view()).mapv_into(|v| v.max(0.0)),
                None => h.clone(),
            })
            .collect();
        let projections = self
            .projectors
            .iter()
            .zip(&aligned)
            .map(|(p, a)| p.forward(a.view()))
            .collect();
        let logits = self
            .classifiers
            .iter()
            .zip(&aligned)
            .map(|(g, a)| g.forward(a.view()))
            .collect();
        Ok(ExpertOutputs {
            inputs: inputs.to_owned(),
            pre_activations,
            hidden,
            aligned,
            projections,
            logits,
        })
    }

    /// Accumulates `dL/dparam` into every gradient slot.
    pub fn backward(&mut self, outputs: &ExpertOutputs, grads: &OutputGrads) -> Result<()> {
        let n = self.n_experts();
        if outputs.n_experts() != n
            || grads.aligned.len() != n
            || grads.projections.len() != n
            || grads.logits.len() != n
        {
            return Err(Error::State(format!(
                "forward record / gradients do not belong to a {n}-expert model"
            )));
        }
        let rows = outputs.batch_len();
        let check = |g: &Option<Array2<f64>>, like: &Array2<f64>| match g {
            Some(g) if g.dim() != like.dim() => Err(Error::ShapeMismatch(format!(
                "gradient {:?} vs output {:?}",
                g.dim(),
                like.dim()
            ))),
            _ => Ok(()),
        };
        for i in 0..n {
            check(&grads.aligned[i], &outputs.aligned[i])?;
            check(&grads.projections[i], &outputs.projections[i])?;
            check(&grads.logits[i], &outputs.logits[i])?;
        }

        let mut carry: Option<Array2<f64>> = None;
        for i in (0..n).rev() {
            let mut d_aligned = grads.aligned[i]
                .clone()
                .unwrap_or_else(|| Array2::zeros((rows, self.config.aligned_dim)));
            if let Some(g) = &grads.logits[i] {
                d_aligned += &self.classifiers[i].backward(outputs.aligned[i].view(), g.view());
            }
            if let Some(g) = &grads.projections[i] {
                d_aligned += &self.projectors[i].backward(outputs.aligned[i].view(), g.view());
            }
            let mut d_hidden = match &mut self.alignments[i] {
                Some(lin) => {
                    Zip::from(&mut d_aligned)
                        .and(&outputs.aligned[i])
                        .for_each(|d, &a| {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    lin.backward(outputs.hidden[i].view(), d_aligned.view())
                }
                None => d_aligned,
            };
            if let Some(c) = carry.take() {
                d_hidden += &c;
            }
            Zip::from(&mut d_hidden)
                .and(&outputs.pre_activations[i])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            let input = match i {
                0 => outputs.inputs.view(),
                _ => outputs.hidden[i - 1].view(),
            };
            if i == 0 {
                self.blocks[0].accumulate(input, d_hidden.view());
            } else {
                carry = Some(self.blocks[i].backward(input, d_hidden.view()));
            }
        }
        self.grads_ready = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
        self.grads_ready = false;
    }

    /// True once `backward` has run since the last `zero_grads`.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    /// Binary checkpoint: magic `MOSE`, config block, then each parameter
    /// tensor in declaration order as `u32 rows, u32 cols, f64 values`.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let c = &self.config;
        let u32s = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))
        };
        out.write_all(&u32s(c.n_experts)?)?;
        for &w in &c.block_widths {
            out.write_all(&u32s(w)?)?;
        }
        for v in [c.aligned_dim, c.projection_dim, c.class_count, c.input_dim] {
            out.write_all(&u32s(v)?)?;
        }
        out.write_all(&c.seed.to_le_bytes())?;
        for p in self.params() {
            out.write_all(&u32s(p.value.nrows())?)?;
            out.write_all(&u32s(p.value.ncols())?)?;
            for &v in p.value.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MOSE header".into()));
        }
        let n = cur.u32()?;
        if n == 0 || n > 1024 {
            return Err(Error::Format(format!("implausible expert count {n}")));
        }
        let block_widths = (0..n).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            n_experts: n,
            block_widths,
            aligned_dim: cur.u32()?,
            projection_dim: cur.u32()?,
            class_count: cur.u32()?,
            input_dim: cur.u32()?,
            seed: u64::from_le_bytes(cur.take(8)?.try_into().unwrap()),
        };
        let mut model = ExpertModel::new(config).map_err(|e| Error::Format(e.to_string()))?;
        for p in model.params_mut() {
            let (r, c) = (cur.u32()?, cur.u32()?);
            if (r, c) != p.value.dim() {
                return Err(Error::Format(format!(
                    "tensor shape ({r}, {c}) does not match config {:?}",
                    p.value.dim()
                )));
            }
            for v in p.value.iter_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
        }
        if cur.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Scales each row to unit L2 norm; rows with norm below [`NORM_EPS`] become zero.
pub fn normalize_rows(t: ArrayView2<f64>) -> Array2<f64> {
    let mut out = t.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < NORM_EPS {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    out
}

/// Vector-Jacobian product of [`normalize_rows`]: for `y = x / |x|`,
/// `dx = (dy - y (y . dy)) / |x|`. Zeroed rows pass no gradient.
pub fn normalize_rows_backward(x: ArrayView2<f64>, d_out: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for ((xr, gr), mut dr) in x.rows().into_iter().zip(d_out.rows()).zip(dx.rows_mut()) {
        let norm = xr.dot(&xr).sqrt();
        if norm < NORM_EPS {
            continue;
        }
        let y = &xr / norm;
        let proj = y.dot(&gr);
        dr.assign(&((&gr - &(&y * proj)) / norm));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn small(n: usize) -> ModelConfig {
        ModelConfig {
            n_experts: n,
            block_widths: vec![6; n],
            aligned_dim: 6,
            projection_dim: 3,
            class_count: 4,
            input_dim: 5,
            seed: 17,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ExpertModel::new(small(3)).unwrap();
        let b = ExpertModel::new(small(3)).unwrap();
        assert_eq!(a, b);
        for layer in a.blocks.iter().chain(a.classifiers.iter()) {
            let bound = (6.0 / (layer.in_dim() + layer.out_dim()) as f64).sqrt();
            assert!(layer.weight.value.iter().all(|v| v.is_finite() && v.abs() <= bound));
            assert!(layer.bias.value.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_expert_has_identity_alignment() {
        let m = ExpertModel::new(small(1)).unwrap();
        assert_eq!(m.alignments.len(), 1);
        assert!(m.alignments[0].is_none());
        let x = Array2::from_elem((2, 5), 0.3);
        let out = m.forward_all(x.view()).unwrap();
        assert_eq!(out.aligned[0], out.hidden[0]);
    }

    #[test]
    fn config_validation() {
        let mut c = small(2);
        c.block_widths = vec![6, 5];
        assert!(ExpertModel::new(c).is_err());
        let mut c = small(2);
        c.block_widths = vec![6];
        assert!(ExpertModel::new(c).is_err());
        let mut c = small(2);
        c.n_experts = 0;
        c.block_widths.clear();
        assert!(ExpertModel::new(c).is_err());
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::uniform(4, 64, 32, 10, 12, 0);
        let m = ExpertModel::new(cfg).unwrap();
        let out = m.forward_all(Array2::zeros((3, 12)).view()).unwrap();
        assert_eq!(out.n_experts(), 4);
        for i in 0..4 {
            assert_eq!(out.aligned[i].dim(), (3, 64));
            assert_eq!(out.projections[i].dim(), (3, 32));
            assert_eq!(out.logits[i].dim(), (3, 10));
        }
        assert!(matches!(
            m.forward_all(Array2::zeros((3, 11)).view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = ExpertModel::new(small(3)).unwrap();
        for p in m.params_mut() {
            p.value.fill(0.0);
        }
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64);
        let out = m.forward_all(x.view()).unwrap();
        assert!(out.logits.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hand_traced_two_expert_forward() {
        // input dim 2, widths [2, 2], aligned 2, projection 2, classes 2
        let mut m = ExpertModel::new(ModelConfig::uniform(2, 2, 2, 2, 2, 0)).unwrap();
        m.blocks[0].weight.value = array![[1.0, -1.0], [2.0, 0.5]];
        m.blocks[0].bias.value = array![[0.0, 0.25]];
        m.blocks[1].weight.value = array![[0.5, 1.0], [-1.0, 2.0]];
        m.blocks[1].bias.value = array![[0.1, 0.0]];
        let a0 = m.alignments[0].as_mut().unwrap();
        a0.weight.value = array![[1.0, 0.0], [1.0, -1.0]];
        a0.bias.value = array![[0.0, 1.0]];
        for (i, head) in m.classifiers.iter_mut().enumerate() {
            head.weight.value = array![[1.0, 2.0], [3.0, -1.0]] * (i + 1) as f64;
            head.bias.value = array![[0.5, 0.0]];
        }
        let x = array![[1.0, 1.0]];
        let out = m.forward_all(x.view()).unwrap();
        // z1 = [1+2, -1+0.5+0.25] = [3, -0.25] -> h1 = [3, 0]
        assert_eq!(out.hidden[0], array![[3.0, 0.0]]);
        // a1 = [3, 0] W + [0, 1] = [3, 1]
        assert_eq!(out.aligned[0], array![[3.0, 1.0]]);
        // y1 = [3*1 + 1*3 + 0.5, 3*2 - 1] = [6.5, 5]
        assert_eq!(out.logits[0], array![[6.5, 5.0]]);
        // z2 = [3*0.5 + 0.1, 3*1] = [1.6, 3]; h2 = a2
        assert_eq!(out.aligned[1], array![[1.6, 3.0]]);
        // y2 = 2 * [1.6 + 9, 3.2 - 3] + [0.5, 0] = [21.7, 0.4]
        let y2 = &out.logits[1];
        assert!((y2[[0, 0]] - 21.7).abs() < 1e-12 && (y2[[0, 1]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let t = array![[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]];
        let n = normalize_rows(t.view());
        assert!((n[[0, 0]] - 0.6).abs() < 1e-15 && (n[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), array![1.0, 0.0]);
        assert_eq!(n.row(2), array![0.0, 0.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let w = array![[0.5, 1.0, -2.0], [1.5, -0.3, 0.2]];
        let f = |x: &Array2<f64>| (normalize_rows(x.view()) * &w).sum();
        let g = normalize_rows_backward(x.view(), w.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sum_of_final_logits_gradient_is_input_outer_sum() {
        // one expert, so the classifier sees h_1 directly
        let mut m = ExpertModel::new(small(1)).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let out = m.forward_all(x.view()).unwrap();
        let mut grads = OutputGrads::new(1);
        grads.add_logits(0, Array2::ones(out.logits[0].raw_dim()));
        m.zero_grads();
        m.backward(&out, &grads).unwrap();
        let feat = &out.aligned[0];
        for r in 0..6 {
            let expected: f64 = feat.column(r).sum();
            for c in 0..4 {
                assert!((m.classifiers[0].weight.grad[[r, c]] - expected).abs() < 1e-12);
            }
        }
        assert!(m.classifiers[0].bias.grad.iter().all(|&g| (g - 3.0).abs() < 1e-12));
        m.zero_grads();
        assert!(m.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
        assert!(!m.grads_ready());
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let m = ExpertModel::new(small(3)).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MOSE");
        let back = ExpertModel::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ExpertModel::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ExpertModel::read_checkpoint(extra.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn shape_laws_hold(n in 1usize..5, width in 1usize..9, d in 1usize..9,
                           l in 1usize..6, classes in 2usize..7, m in 1usize..7, rows in 1usize..6) {
            let mut widths = vec![width; n];
            widths[n - 1] = d;
            let cfg = ModelConfig { n_experts: n, block_widths: widths.clone(), aligned_dim: d,
                                    projection_dim: l, class_count: classes, input_dim: m, seed: 1 };
            let model = ExpertModel::new(cfg).unwrap();
            let out = model.forward_all(Array2::from_elem((rows, m), 0.5).view()).unwrap();
            prop_assert_eq!(out.n_experts(), n);
            for i in 0..n {
                prop_assert_eq!(out.hidden[i].dim(), (rows, widths[i]));
                prop_assert_eq!(out.aligned[i].dim(), (rows, d));
                prop_assert_eq!(out.projections[i].dim(), (rows, l));
                prop_assert_eq!(out.logits[i].dim(), (rows, classes));
            }
            // every parameter has a same-shaped gradient slot
            for p in model.params() {
                prop_assert_eq!(p.value.dim(), p.grad.dim());
            }
        }
    }
}
