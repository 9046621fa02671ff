//! Training objectives and their gradients w.r.t. model outputs.
//!
//! Every loss returns its value together with `dL/d(input)` so the trainer can
//! hand the result straight to [`ExpertModel::backward`](crate::network::ExpertModel::backward).
//!
//! Batch layout for the multi-expert losses: the first `n_new` rows come from
//! the incoming stream batch (raw and augmented views), the remaining rows from
//! the replay buffer. See [`BatchSplit`].

use std::collections::BTreeSet;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{normalize_rows, normalize_rows_backward, ExpertOutputs, OutputGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillDirection {
    /// Non-student experts teach the student (default student: last expert).
    Reverse,
    /// The student expert teaches every other expert.
    Forward,
}

/// Loss settings that do not change during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub temperature: f64,
    /// Zero-based; `None` means the last expert.
    pub rsd_student: Option<usize>,
    pub direction: DistillDirection,
    pub use_rsd: bool,
    pub ce_weight: f64,
    pub scl_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            rsd_student: None,
            direction: DistillDirection::Reverse,
            use_rsd: true,
            ce_weight: 1.0,
            scl_weight: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if !(self.ce_weight >= 0.0 && self.scl_weight >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step loss configuration: static params plus the class sets of the
/// current task and of every task started so far.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub params: LossParams,
    pub current_classes: Vec<usize>,
    pub seen_classes: Vec<usize>,
}

impl LossConfig {
    pub fn new(params: LossParams, current_classes: Vec<usize>, seen_classes: Vec<usize>) -> Result<Self> {
        params.validate()?;
        let seen: BTreeSet<_> = seen_classes.iter().collect();
        if let Some(c) = current_classes.iter().find(|c| !seen.contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "current class {c} is not among the seen classes"
            )));
        }
        Ok(Self {
            params,
            current_classes,
            seen_classes,
        })
    }

    fn student(&self, n: usize) -> Result<usize> {
        let s = self.params.rsd_student.unwrap_or(n - 1);
        if s >= n {
            return Err(Error::InvalidArgument(format!(
                "RSD student {} out of range for {n} experts",
                s + 1
            )));
        }
        Ok(s)
    }
}

/// Rows `[0, n_new)` are incoming samples, the rest come from the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSplit {
    pub n_new: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// False when no term of the loss depended on the input (e.g. SupCon with
    /// no positive pairs).
    pub active: bool,
}

impl LossOutput {
    fn zero(shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros(shape),
            active: false,
        }
    }
}

/// Mean negative log-likelihood with the softmax restricted to `subset`
/// columns. Columns outside the subset receive exactly zero gradient.
/// An empty batch yields zero.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize], subset: &[usize]) -> Result<LossOutput> {
    if labels.len() != logits.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    if subset.is_empty() {
        return Err(Error::InvalidArgument("class subset is empty".into()));
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= logits.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has no logit column ({} columns)",
            logits.ncols()
        )));
    }
    let cols: Vec<usize> = subset.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    for &y in labels {
        if cols.binary_search(&y).is_err() {
            return Err(Error::LabelOutsideSubset { label: y });
        }
    }
    let rows = logits.nrows();
    if rows == 0 {
        return Ok(LossOutput::zero(logits.dim()));
    }
    let scale = 1.0 / rows as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    let mut exps = vec![0.0; cols.len()];
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let (arg, max) = cols
            .iter()
            .map(|&c| (c, row[c]))
            .fold((cols[0], f64::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
        // rest = sum over non-max columns of exp(z - max)
        let mut rest = 0.0;
        for (k, &c) in cols.iter().enumerate() {
            exps[k] = (row[c] - max).exp();
            if c != arg {
                rest += exps[k];
            }
        }
        total += (max - row[y]) + rest.ln_1p();
        let denom = 1.0 + rest;
        for (k, &c) in cols.iter().enumerate() {
            let p = exps[k] / denom;
            grad[[r, c]] = scale * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    Ok(LossOutput {
        value: total * scale,
        grad,
        active: true,
    })
}

/// New-task rows use a softmax over the current task's classes, buffer rows a
/// softmax over all seen classes. Each part is a batch mean; an empty part
/// contributes zero. Returns the loss and gradients for the two row blocks.
pub fn separated_ce(
    new_logits: ArrayView2<f64>,
    buf_logits: ArrayView2<f64>,
    new_labels: &[usize],
    buf_labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let new = cross_entropy(new_logits, new_labels, &cfg.current_classes)?;
    let buf = cross_entropy(buf_logits, buf_labels, &cfg.seen_classes)?;
    Ok((new.value + buf.value, new.grad, buf.grad))
}

/// Supervised contrastive loss on row-normalized projections.
///
/// For anchor `i` with positives `P(i)` (same label, excluding `i`):
/// `l_i = -mean_{p in P(i)} [ s_ip - log sum_{j != i} exp(s_ij) ]` with
/// `s_ij = q_i . q_j / tau`. Anchors with no positives are skipped; the result
/// is the mean over contributing anchors, or zero if there are none.
pub fn sup_con(projections: ArrayView2<f64>, labels: &[usize], temperature: f64) -> Result<LossOutput> {
    let n = projections.nrows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: n });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let z = normalize_rows(projections);
    let sim = z.dot(&z.t()) / temperature;

    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|p| p != i && labels[p] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Ok(LossOutput::zero(projections.dim()));
    }
    let inv_a = 1.0 / anchors.len() as f64;
    // g[i][j] = dL/dsim_ij
    let mut g = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for &i in &anchors {
        let row = sim.row(i);
        let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + sum.ln();
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let inv_p = 1.0 / positives.len() as f64;
        let mut li = 0.0;
        for &p in &positives {
            li += lse - row[p];
            g[[i, p]] -= inv_a * inv_p;
        }
        total += li * inv_p;
        for j in (0..n).filter(|&j| j != i) {
            g[[i, j]] += inv_a * (row[j] - max).exp() / sum;
        }
    }
    // sim = z z^T / tau, so dz = (g + g^T) z / tau
    let dz = (&g + &g.t()).dot(&z) / temperature;
    Ok(LossOutput {
        value: total * inv_a,
        grad: normalize_rows_backward(projections, dz.view()),
        active: true,
    })
}

/// Gradients of one expert's supervised loss.
#[derive(Debug, Clone)]
pub struct ExpertLoss {
    pub value: f64,
    pub ce: f64,
    pub scl: f64,
    pub logits_grad: Array2<f64>,
    pub projection_grad: Array2<f64>,
    pub active: bool,
}

/// Separated cross-entropy on the expert's logits plus SupCon on its
/// projections, both over the full batch described by `split`.
pub fn expert_loss(
    outputs: &ExpertOutputs,
    expert: usize,
    labels: &[usize],
    split: BatchSplit,
    cfg: &LossConfig,
) -> Result<ExpertLoss> {
    if expert >= outputs.n_experts() {
        return Err(Error::InvalidArgument(format!(
            "expert {} out of range for {} experts",
            expert + 1,
            outputs.n_experts()
        )));
    }
    let logits = &outputs.logits[expert];
    if labels.len() != logits.nrows() || split.n_new > labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels / split at {} for a batch of {}",
            labels.len(),
            split.n_new,
            logits.nrows()
        )));
    }
    let k = split.n_new;
    let (ce, g_new, g_buf) = separated_ce(
        logits.slice(s![..k, ..]),
        logits.slice(s![k.., ..]),
        &labels[..k],
        &labels[k..],
        cfg,
    )?;
    let mut logits_grad = Array2::zeros(logits.dim());
    logits_grad.slice_mut(s![..k, ..]).assign(&g_new);
    logits_grad.slice_mut(s![k.., ..]).assign(&g_buf);

    let scl = sup_con(outputs.projections[expert].view(), labels, cfg.params.temperature)?;
    let (wc, ws) = (cfg.params.ce_weight, cfg.params.scl_weight);
    logits_grad *= wc;
    Ok(ExpertLoss {
        value: wc * ce + ws * scl.value,
        ce,
        scl: scl.value,
        logits_grad,
        projection_grad: scl.grad * ws,
        active: !labels.is_empty(),
    })
}

/// Sum of every expert's supervised loss.
pub fn mls_loss(
    outputs: &ExpertOutputs,
    labels: &[usize],
    split: BatchSplit,
    cfg: &LossConfig,
) -> Result<(f64, OutputGrads)> {
    let n = outputs.n_experts();
    let mut grads = OutputGrads::new(n);
    let mut total = 0.0;
    for i in 0..n {
        let e = expert_loss(outputs, i, labels, split, cfg)?;
        total += e.value;
        grads.add_logits(i, e.logits_grad);
        grads.add_projection(i, e.projection_grad);
    }
    Ok((total, grads))
}

/// Distillation between normalized aligned features.
///
/// Value: batch mean of `sum_{i != s} |ĥ_i' - ĥ_s'|_2` where `s` is the
/// student expert. Reverse direction treats the other experts as detached
/// teachers, so only the student receives gradient; forward direction detaches
/// the student instead and every other expert receives gradient. A zero
/// distance contributes zero gradient.
pub fn rsd_loss(aligned: &[Array2<f64>], cfg: &LossConfig) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    let n = aligned.len();
    let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
    if n < 2 {
        return Ok((0.0, grads));
    }
    let s = cfg.student(n)?;
    let rows = aligned[s].nrows();
    if aligned.iter().any(|a| a.dim() != aligned[s].dim()) {
        return Err(Error::ShapeMismatch("aligned features differ in shape".into()));
    }
    if rows == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / rows as f64;
    let normed: Vec<Array2<f64>> = aligned.iter().map(|a| normalize_rows(a.view())).collect();
    let mut total = 0.0;
    let mut d_student = Array2::<f64>::zeros(aligned[s].dim());
    for (i, zi) in normed.iter().enumerate() {
        if i == s {
            continue;
        }
        let diff = zi - &normed[s];
        let mut unit = Array2::<f64>::zeros(diff.dim());
        for (dr, mut ur) in diff.rows().into_iter().zip(unit.rows_mut()) {
            let dist = dr.dot(&dr).sqrt();
            total += dist;
            if dist > 0.0 {
                ur.assign(&(&dr * (scale / dist)));
            }
        }
        match cfg.params.direction {
            DistillDirection::Reverse => d_student -= &unit,
            DistillDirection::Forward => {
                grads[i] = Some(normalize_rows_backward(aligned[i].view(), unit.view()));
            }
        }
    }
    if cfg.params.direction == DistillDirection::Reverse {
        grads[s] = Some(normalize_rows_backward(aligned[s].view(), d_student.view()));
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone)]
pub struct MoseLoss {
    pub total: f64,
    pub mls: f64,
    pub rsd: f64,
    pub grads: OutputGrads,
}

/// Multi-level supervision plus (optionally) self-distillation.
pub fn mose_loss(
    outputs: &ExpertOutputs,
    labels: &[usize],
    split: BatchSplit,
    cfg: &LossConfig,
) -> Result<MoseLoss> {
    let (mls, mut grads) = mls_loss(outputs, labels, split, cfg)?;
    let mut rsd = 0.0;
    if cfg.params.use_rsd {
        let (value, rsd_grads) = rsd_loss(&outputs.aligned, cfg)?;
        rsd = value;
        for (i, g) in rsd_grads.into_iter().enumerate() {
            if let Some(g) = g {
                grads.add_aligned(i, g);
            }
        }
    }
    Ok(MoseLoss {
        total: mls + rsd,
        mls,
        rsd,
        grads,
    })
}

/// Experience-replay objective: plain cross-entropy over `support` (all seen
/// classes) on the combined batch.
pub fn er_loss(final_logits: ArrayView2<f64>, labels: &[usize], support: &[usize]) -> Result<LossOutput> {
    cross_entropy(final_logits, labels, support)
}

/// SCR objective: SupCon on the final expert's projections.
pub fn scr_loss(final_projections: ArrayView2<f64>, labels: &[usize], temperature: f64) -> Result<LossOutput> {
    sup_con(final_projections, labels, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ExpertModel, ModelConfig};
    use ndarray::array;
    use proptest::prelude::*;

    /// Textbook softmax / log, no stabilization.
    fn ce_oracle(logits: &Array2<f64>, labels: &[usize], subset: &[usize]) -> f64 {
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let denom: f64 = subset.iter().map(|&c| logits[[r, c]].exp()).sum();
            total += -(logits[[r, y]].exp() / denom).ln();
        }
        total / labels.len() as f64
    }

    /// Eq.-style SupCon by explicit loops over anchors and positives.
    fn supcon_oracle(q: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
        let n = q.nrows();
        let norm: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = q.row(i);
                let len = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / len).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(&norm[i], &norm[j]) / tau).exp())
                .sum();
            let li: f64 = pos
                .iter()
                .map(|&p| -((dot(&norm[i], &norm[p]) / tau).exp() / denom).ln())
                .sum::<f64>()
                / pos.len() as f64;
            total += li;
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    fn cfg(current: &[usize], seen: &[usize]) -> LossConfig {
        LossConfig::new(LossParams::default(), current.to_vec(), seen.to_vec()).unwrap()
    }

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>, tol: f64) {
        let h = 1e-5;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic[idx];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < tol, "at {idx:?}: fd {fd} vs analytic {a}");
        }
    }

    #[test]
    fn ce_uniform_logits() {
        let z = Array2::zeros((3, 4));
        let out = cross_entropy(z.view(), &[0, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
        let z = Array2::zeros((1, 10));
        let out = cross_entropy(z.view(), &[5], &[4, 5, 6, 7, 8, 9]).unwrap();
        assert!((out.value - 1.791759469228055).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_logit_precision() {
        let z = array![[10.0, 0.0, 0.0]];
        let out = cross_entropy(z.view(), &[0], &[0, 1, 2]).unwrap();
        // log(1 + 2 e^-10) = 9.07998595249...e-5
        let expected = (2.0 * (-10f64).exp()).ln_1p();
        assert!((out.value - expected).abs() < 1e-18);
        assert!((out.value - 9.0800e-5).abs() < 1e-8);
    }

    #[test]
    fn ce_rejects_label_outside_subset() {
        let z = Array2::zeros((1, 4));
        assert!(matches!(
            cross_entropy(z.view(), &[0], &[1, 2]),
            Err(Error::LabelOutsideSubset { label: 0 })
        ));
        assert!(cross_entropy(z.view(), &[0], &[]).is_err());
    }

    #[test]
    fn ce_excluded_columns_get_exact_zero_gradient() {
        let z = array![[1.0, -2.0, 3.0, 0.5, 7.0], [0.2, 0.1, -0.3, 4.0, -1.0]];
        let out = cross_entropy(z.view(), &[1, 3], &[1, 3]).unwrap();
        for r in 0..2 {
            for c in [0, 2, 4] {
                assert_eq!(out.grad[[r, c]].to_bits(), 0f64.to_bits());
            }
        }
        fd_check(
            |x| cross_entropy(x.view(), &[1, 3], &[1, 3]).unwrap().value,
            &z,
            &out.grad,
            1e-6,
        );
    }

    #[test]
    fn ce_matches_oracle_and_is_invariant_outside_subset() {
        let z = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) as f64 * 0.41).sin() * 3.0);
        let labels = [2, 3, 2, 5, 3];
        let subset = [2, 3, 5];
        let v = cross_entropy(z.view(), &labels, &subset).unwrap().value;
        assert!((v - ce_oracle(&z, &labels, &subset)).abs() < 1e-12);
        let mut scaled = z.clone();
        for c in [0, 1, 4] {
            scaled.column_mut(c).mapv_inplace(|x| x * 50.0);
        }
        assert_eq!(v, cross_entropy(scaled.view(), &labels, &subset).unwrap().value);
    }

    #[test]
    fn separated_ce_empty_buffer_and_first_task() {
        let c = cfg(&[0, 1, 2], &[0, 1, 2]);
        let new = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let labels = [0, 1, 2, 2, 1, 0];
        let empty = Array2::zeros((0, 3));
        let (v, _, g_buf) = separated_ce(new.view(), empty.view(), &labels, &[], &c).unwrap();
        let alone = cross_entropy(new.view(), &labels, &[0, 1, 2]).unwrap().value;
        assert_eq!(v, alone);
        assert_eq!(g_buf.nrows(), 0);

        // C^t == seen: the split equals two batch means of the plain CE
        let (a, b) = (new.slice(s![..4, ..]).to_owned(), new.slice(s![4.., ..]).to_owned());
        let (v, _, _) = separated_ce(a.view(), b.view(), &labels[..4], &labels[4..], &c).unwrap();
        let expected = ce_oracle(&a, &labels[..4], &[0, 1, 2]) + ce_oracle(&b, &labels[4..], &[0, 1, 2]);
        assert!((v - expected).abs() < 1e-12);
        let full = ce_oracle(&new, &labels, &[0, 1, 2]);
        let weighted = (4.0 * ce_oracle(&a, &labels[..4], &[0, 1, 2])
            + 2.0 * ce_oracle(&b, &labels[4..], &[0, 1, 2]))
            / 6.0;
        assert!((full - weighted).abs() < 1e-12);
    }

    #[test]
    fn supcon_pair_of_same_class_is_zero() {
        let q = array![[0.3, -2.0, 1.0], [5.0, 0.1, 0.0]];
        let out = sup_con(q.view(), &[4, 4], 0.07).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn supcon_unique_classes_skip_to_zero() {
        let q = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let out = sup_con(q.view(), &[0, 1, 2], 0.07).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(!out.active);
        assert!(out.grad.iter().all(|&g| g == 0.0));
        assert!(matches!(
            sup_con(q.slice(s![..1, ..]), &[0], 0.07),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn supcon_four_point_angles() {
        let q = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let labels = [0, 0, 1, 1];
        let v = sup_con(q.view(), &labels, 0.07).unwrap().value;
        // anchor 0/1: positive sim 1/tau vs {1/tau, 0, -1/tau}
        let t: f64 = 1.0 / 0.07;
        let l01 = -(t.exp() / (t.exp() + 1.0 + (-t).exp())).ln();
        // anchor 2 (90°): all sims 0 -> ln 3; anchor 3 (180°): sims {-t, -t, 0}
        let l2 = 3f64.ln();
        let l3 = -(1.0 / (2.0 * (-t).exp() + 1.0)).ln();
        let expected = (2.0 * l01 + l2 + l3) / 4.0;
        assert!((v - expected).abs() < 1e-9);
        assert!((v - supcon_oracle(&q, &labels, 0.07)).abs() < 1e-9);
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let q = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64 * 0.77).cos() + 0.1);
        let labels = [0, 1, 0, 2, 1, 1];
        let out = sup_con(q.view(), &labels, 0.5).unwrap();
        fd_check(|x| sup_con(x.view(), &labels, 0.5).unwrap().value, &q, &out.grad, 1e-5);
    }

    #[test]
    fn rsd_identical_features_is_zero() {
        let a = array![[1.0, 2.0], [0.5, -1.0]];
        let (v, _) = rsd_loss(&[a.clone(), a.clone() * 3.0, a], &cfg(&[0], &[0])).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn rsd_orthogonal_pair() {
        let (v, _) = rsd_loss(&[array![[1.0, 0.0]], array![[0.0, 1.0]]], &cfg(&[0], &[0])).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        let (v, g) = rsd_loss(&[array![[1.0, 0.0]]], &cfg(&[0], &[0])).unwrap();
        assert_eq!(v, 0.0);
        assert!(g[0].is_none());
    }

    #[test]
    fn rsd_matches_brute_force_oracle() {
        let feats: Vec<Array2<f64>> = (0..3)
            .map(|k| Array2::from_shape_fn((4, 5), |(i, j)| ((k * 20 + i * 5 + j) as f64 * 1.3).sin()))
            .collect();
        let mut expected = 0.0;
        for b in 0..4 {
            let unit = |k: usize| {
                let r = feats[k].row(b).to_vec();
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.into_iter().map(move |v| v / n).collect::<Vec<_>>()
            };
            let st = unit(2);
            for k in 0..2 {
                let t = unit(k);
                expected += t.iter().zip(&st).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
        }
        expected /= 4.0;
        let (v, _) = rsd_loss(&feats, &cfg(&[0], &[0])).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn rsd_gradient_routing_by_direction() {
        let feats: Vec<Array2<f64>> = (0..3)
            .map(|k| Array2::from_shape_fn((3, 4), |(i, j)| ((k * 12 + i * 4 + j) as f64 * 0.9).cos()))
            .collect();
        let mut rev = cfg(&[0], &[0]);
        rev.params.direction = DistillDirection::Reverse;
        let mut fwd = rev.clone();
        fwd.params.direction = DistillDirection::Forward;
        let (vr, gr) = rsd_loss(&feats, &rev).unwrap();
        let (vf, gf) = rsd_loss(&feats, &fwd).unwrap();
        assert_eq!(vr, vf);
        assert!(gr[0].is_none() && gr[1].is_none() && gr[2].is_some());
        assert!(gf[0].is_some() && gf[1].is_some() && gf[2].is_none());

        // reverse: the student's gradient is the derivative with teachers frozen
        let student_fd = |x: &Array2<f64>| {
            let mut f = feats.clone();
            f[2] = x.clone();
            rsd_loss(&f, &rev).unwrap().0
        };
        fd_check(student_fd, &feats[2], gr[2].as_ref().unwrap(), 1e-5);
        // forward: each shallow expert's gradient with the teacher frozen
        for k in 0..2 {
            let f_k = |x: &Array2<f64>| {
                let mut f = feats.clone();
                f[k] = x.clone();
                rsd_loss(&f, &fwd).unwrap().0
            };
            fd_check(f_k, &feats[k], gf[k].as_ref().unwrap(), 1e-5);
        }
    }

    #[test]
    fn rsd_rejects_bad_student() {
        let mut c = cfg(&[0], &[0]);
        c.params.rsd_student = Some(5);
        let f = vec![array![[1.0, 0.0]], array![[0.0, 1.0]]];
        assert!(rsd_loss(&f, &c).is_err());
    }

    fn toy_outputs(n: usize, rows: usize) -> ExpertOutputs {
        let model = ExpertModel::new(ModelConfig::uniform(n, 5, 3, 4, 6, 3)).unwrap();
        let x = Array2::from_shape_fn((rows, 6), |(i, j)| ((i * 6 + j) as f64 * 0.53).sin());
        model.forward_all(x.view()).unwrap()
    }

    #[test]
    fn expert_loss_is_sum_of_oracles() {
        let out = toy_outputs(2, 4);
        let labels = [2, 3, 0, 2];
        let split = BatchSplit { n_new: 2 };
        let c = cfg(&[2, 3], &[0, 1, 2, 3]);
        let e = expert_loss(&out, 1, &labels, split, &c).unwrap();
        let l = &out.logits[1];
        let ce = ce_oracle(&l.slice(s![..2, ..]).to_owned(), &labels[..2], &[2, 3])
            + ce_oracle(&l.slice(s![2.., ..]).to_owned(), &labels[2..], &[0, 1, 2, 3]);
        let scl = supcon_oracle(&out.projections[1], &labels, 0.07);
        assert!((e.value - (ce + scl)).abs() < 1e-9);

        // unique classes: SupCon vanishes and only the CE part is left
        let unique = [2, 3, 0, 1];
        let e = expert_loss(&out, 0, &unique, split, &c).unwrap();
        assert_eq!(e.scl, 0.0);
        assert_eq!(e.value, e.ce);
    }

    #[test]
    fn mls_sums_experts_and_uniform_heads_give_log_subset() {
        let out = toy_outputs(3, 4);
        let labels = [0, 1, 0, 1];
        let split = BatchSplit { n_new: 4 };
        let c = cfg(&[0, 1], &[0, 1]);
        let (total, _) = mls_loss(&out, &labels, split, &c).unwrap();
        let by_hand: f64 = (0..3).map(|i| expert_loss(&out, i, &labels, split, &c).unwrap().value).sum();
        assert!((total - by_hand).abs() < 1e-12);

        let mut flat = out.clone();
        for i in 0..2 {
            flat.logits[i].fill(0.0);
        }
        for i in 0..2 {
            let e = expert_loss(&flat, i, &labels, split, &c).unwrap();
            assert!((e.ce - 2f64.ln()).abs() < 1e-12);
        }

        let single = toy_outputs(1, 4);
        let (v, _) = mls_loss(&single, &labels, split, &c).unwrap();
        assert_eq!(v, expert_loss(&single, 0, &labels, split, &c).unwrap().value);
    }

    #[test]
    fn mose_is_mls_plus_rsd() {
        let out = toy_outputs(2, 4);
        let labels = [0, 1, 1, 0];
        let split = BatchSplit { n_new: 2 };
        let c = cfg(&[0, 1], &[0, 1]);
        let m = mose_loss(&out, &labels, split, &c).unwrap();
        let (mls, _) = mls_loss(&out, &labels, split, &c).unwrap();
        let (rsd, _) = rsd_loss(&out.aligned, &c).unwrap();
        assert_eq!(m.total, mls + rsd);
        assert!(rsd > 0.0);

        let single = toy_outputs(1, 4);
        let m = mose_loss(&single, &labels, split, &c).unwrap();
        assert_eq!(m.rsd, 0.0);
        assert_eq!(m.total, expert_loss(&single, 0, &labels, split, &c).unwrap().value);
    }

    #[test]
    fn baseline_losses() {
        let z = Array2::zeros((3, 5));
        let v = er_loss(z.view(), &[0, 4, 2], &[0, 1, 2, 3, 4]).unwrap().value;
        assert!((v - 5f64.ln()).abs() < 1e-12);
        let q = array![[1.0, 0.5], [0.2, 0.1]];
        assert_eq!(scr_loss(q.view(), &[0, 1], 0.07).unwrap().value, 0.0);
    }

    proptest! {
        #[test]
        fn supcon_invariant_to_row_rescaling(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            scale in 0.01f64..100.0, row in 0usize..6
        ) {
            let q = Array2::from_shape_vec((6, 2), vals).unwrap();
            prop_assume!(q.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
            let labels = [0, 1, 0, 1, 2, 2];
            let a = sup_con(q.view(), &labels, 0.07).unwrap().value;
            let mut q2 = q.clone();
            q2.row_mut(row).mapv_inplace(|v| v * scale);
            let b = sup_con(q2.view(), &labels, 0.07).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            prop_assert!(a >= 0.0 && a.is_finite());
        }

        #[test]
        fn losses_are_finite_and_non_negative(
            vals in proptest::collection::vec(-20.0f64..20.0, 16),
        ) {
            let z = Array2::from_shape_vec((4, 4), vals).unwrap();
            let ce = cross_entropy(z.view(), &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap().value;
            prop_assert!(ce.is_finite() && ce >= 0.0);
            let feats = vec![z.clone(), z.t().to_owned()];
            let (rsd, _) = rsd_loss(&feats, &cfg(&[0], &[0])).unwrap();
            prop_assert!(rsd.is_finite() && rsd >= 0.0);
        }

        #[test]
        fn rsd_symmetric_under_teacher_permutation(
            vals in proptest::collection::vec(-2.0f64..2.0, 24)
        ) {
            let f: Vec<Array2<f64>> = vals.chunks(8).map(|c| Array2::from_shape_vec((2, 4), c.to_vec()).unwrap()).collect();
            let c = cfg(&[0], &[0]);
            let a = rsd_loss(&f, &c).unwrap().0;
            let swapped = vec![f[1].clone(), f[0].clone(), f[2].clone()];
            let b = rsd_loss(&swapped, &c).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
