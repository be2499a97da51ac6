//! Bias-free ReLU networks with explicit per-sample activation masks.
//!
//! Every layer, including the last, is followed by a ReLU, and the output is
//! fed to a softmax: `ŷ = softmax(D_L W_L ⋯ D_1 W_1 x)`. With the masks `D_l`
//! frozen the net is linear in `x`, and the per-sample effective weights
//! `W̄_l = D_l W_l D_{l−1}` (with `D_0 = I`) follow the same layer-coupled
//! dynamics as a linear net.

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::lnn::{FlowConfig, LinearNet, DIVERGENCE_THRESHOLD};
use crate::trajectory::{Snapshot, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet(LinearNet);

impl ReluNet {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        LinearNet::new(weights).map(Self)
    }

    pub fn linear(&self) -> &LinearNet {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.depth()
    }

    pub fn weights(&self) -> &[Matrix] {
        self.0.weights()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        self.0.layer(l)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.0.dims()
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.0.layer_norms()
    }
}

impl From<LinearNet> for ReluNet {
    fn from(net: LinearNet) -> Self {
        Self(net)
    }
}

/// `[layer][unit]`: `true` iff the pre-activation was strictly positive.
pub type SampleMasks = Vec<Vec<bool>>;

/// Masks of every sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub samples: Vec<SampleMasks>,
}

impl MaskTensor {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Inputs with one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    inputs: Matrix,
    targets: Matrix,
    labels: Vec<usize>,
}

impl ClassBatch {
    pub fn from_labels(inputs: Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::shape("label count", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: bad,
                valid: format!("0..{classes}"),
            });
        }
        let mut targets = Matrix::zeros(inputs.rows(), classes);
        for (i, &c) in labels.iter().enumerate() {
            targets[(i, c)] = 1.0;
        }
        Ok(Self {
            inputs,
            targets,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.targets.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptyInput("class batch prefix"));
        }
        let d = self.inputs.cols();
        let inputs = Matrix::from_vec(n, d, self.inputs.as_slice()[..n * d].to_vec())?;
        Self::from_labels(inputs, &self.labels[..n], self.classes())
    }
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// `−Σ_c y_c log softmax(z)_c`.
pub fn cross_entropy(logits: &[f64], y: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    -logits
        .iter()
        .zip(y)
        .map(|(z, yc)| yc * (z - lse))
        .sum::<f64>()
}

fn check_input(net: &ReluNet, x: &[f64]) -> Result<()> {
    if x.len() != net.linear().input_dim() {
        return Err(Error::shape(
            "relu input",
            net.linear().input_dim(),
            x.len(),
        ));
    }
    Ok(())
}

fn check_masks(net: &ReluNet, masks: &SampleMasks) -> Result<()> {
    if masks.len() != net.depth() {
        return Err(Error::shape("mask layers", net.depth(), masks.len()));
    }
    for (l, (m, w)) in masks.iter().zip(net.weights()).enumerate() {
        if m.len() != w.rows() {
            return Err(Error::shape(
                "mask width",
                format!("{} at layer {l}", w.rows()),
                m.len(),
            ));
        }
    }
    Ok(())
}

/// Softmax probabilities and the masks realised by `x`.
pub fn relu_forward(net: &ReluNet, x: &[f64]) -> Result<(Vec<f64>, SampleMasks)> {
    check_input(net, x)?;
    let mut h = x.to_vec();
    let mut masks = Vec::with_capacity(net.depth());
    for w in net.weights() {
        let z = w.matvec(&h)?;
        masks.push(z.iter().map(|&v| v > 0.0).collect::<Vec<bool>>());
        h = z
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.0 })
            .collect();
    }
    Ok((softmax(&h), masks))
}

/// Activations `h_0 = x, h_{l+1} = D_l W_l h_l` under frozen masks.
pub fn masked_activations(net: &ReluNet, x: &[f64], masks: &SampleMasks) -> Result<Vec<Vec<f64>>> {
    check_input(net, x)?;
    check_masks(net, masks)?;
    let mut hs = Vec::with_capacity(net.depth() + 1);
    hs.push(x.to_vec());
    for (w, m) in net.weights().iter().zip(masks) {
        let z = w.matvec(hs.last().expect("non-empty"))?;
        hs.push(
            z.into_iter()
                .zip(m)
                .map(|(v, &on)| if on { v } else { 0.0 })
                .collect(),
        );
    }
    Ok(hs)
}

/// Cross-entropy of the frozen-mask network on one sample.
pub fn masked_loss(net: &ReluNet, x: &[f64], y: &[f64], masks: &SampleMasks) -> Result<f64> {
    let hs = masked_activations(net, x, masks)?;
    Ok(cross_entropy(hs.last().expect("non-empty"), y))
}

/// Descent directions `τ dW_l/dt` of every layer for one sample with masks
/// frozen: `D_l [W̄_L ⋯ W̄_{l+1}]ᵀ (y − softmax(o)) h_lᵀ`.
pub fn masked_gradients(
    net: &ReluNet,
    x: &[f64],
    y: &[f64],
    masks: &SampleMasks,
) -> Result<Vec<Matrix>> {
    if y.len() != net.linear().output_dim() {
        return Err(Error::shape("target", net.linear().output_dim(), y.len()));
    }
    let hs = masked_activations(net, x, masks)?;
    let p = softmax(&hs[net.depth()]);
    let mut delta: Vec<f64> = y
        .iter()
        .zip(&p)
        .zip(&masks[net.depth() - 1])
        .map(|((yc, pc), &on)| if on { yc - pc } else { 0.0 })
        .collect();
    let mut grads = vec![Matrix::zeros(1, 1); net.depth()];
    for l in (0..net.depth()).rev() {
        let h = &hs[l];
        grads[l] = Matrix::from_fn(delta.len(), h.len(), |r, c| delta[r] * h[c]);
        if l > 0 {
            let back = net.layer(l).transpose().matvec(&delta)?;
            delta = back
                .into_iter()
                .zip(&masks[l - 1])
                .map(|(v, &on)| if on { v } else { 0.0 })
                .collect();
        }
    }
    Ok(grads)
}

pub fn masked_layer_gradient(
    net: &ReluNet,
    x: &[f64],
    y: &[f64],
    masks: &SampleMasks,
    l: usize,
) -> Result<Matrix> {
    if l >= net.depth() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: l,
            valid: format!("0..{}", net.depth()),
        });
    }
    Ok(masked_gradients(net, x, y, masks)?.swap_remove(l))
}

/// One gradient step on a single sample with its masks frozen.
pub fn sample_step(
    net: &ReluNet,
    x: &[f64],
    y: &[f64],
    masks: &SampleMasks,
    eta: f64,
) -> Result<ReluNet> {
    let grads = masked_gradients(net, x, y, masks)?;
    let mut weights = net.weights().to_vec();
    for (w, g) in weights.iter_mut().zip(&grads) {
        w.axpy(eta, g)?;
    }
    ReluNet::new(weights)
}

fn mask_entry(masks: &SampleMasks, l: usize, unit: usize) -> f64 {
    if masks[l][unit] {
        1.0
    } else {
        0.0
    }
}

/// `W̄_l = D_l W_l D_{l−1}` with `D_{−1} = I`.
pub fn effective_weights(net: &ReluNet, masks: &SampleMasks) -> Result<Vec<Matrix>> {
    check_masks(net, masks)?;
    Ok(net
        .weights()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            Matrix::from_fn(w.rows(), w.cols(), |r, c| {
                let right = if l == 0 {
                    1.0
                } else {
                    mask_entry(masks, l - 1, c)
                };
                mask_entry(masks, l, r) * w[(r, c)] * right
            })
        })
        .collect())
}

/// `Δ(AᵀA)` from `A` and `A + ΔA`, expanded to keep the increment exact.
fn delta_gram_cols(before: &Matrix, after: &Matrix) -> Matrix {
    let d = after.sub(before).expect("same shape");
    let cross = matmul(&before.transpose(), &d).expect("conforming");
    cross
        .add(&cross.transpose())
        .expect("square")
        .add(&d.gram_cols())
        .expect("square")
}

/// `Δ(AAᵀ)`.
fn delta_gram_rows(before: &Matrix, after: &Matrix) -> Matrix {
    delta_gram_cols(&before.transpose(), &after.transpose())
}

fn pair_residuals(before: &[Matrix], after: &[Matrix]) -> Vec<Matrix> {
    (0..before.len().saturating_sub(1))
        .map(|l| {
            delta_gram_cols(&before[l + 1], &after[l + 1])
                .sub(&delta_gram_rows(&before[l], &after[l]))
                .expect("shared width")
        })
        .collect()
}

/// Per pair `|Δ(W̄_{l+1}ᵀW̄_{l+1}) − Δ(W̄_l W̄_lᵀ)|_F` across one step, with
/// the same frozen masks applied before and after.
pub fn per_sample_balance_residual(
    before: &ReluNet,
    after: &ReluNet,
    masks: &SampleMasks,
) -> Result<Vec<f64>> {
    let b = effective_weights(before, masks)?;
    let a = effective_weights(after, masks)?;
    Ok(pair_residuals(&b, &a)
        .iter()
        .map(Matrix::frobenius_norm)
        .collect())
}

/// Per adjacent pair, across one full-batch step.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryResidual {
    /// `|Δ(W_{l+1}ᵀW_{l+1}) − Δ(W_l W_lᵀ)|_F` on the unmasked weights.
    pub raw: Vec<f64>,
    /// The same for the batch-mean effective weights `M̄_l = (1/m) Σ_i W̄_{l,i}`.
    pub aggregate: Vec<f64>,
    /// Norm of the same-sample (`i = j`) part of the aggregate residual.
    pub diagonal: Vec<f64>,
    /// Norm of the cross-sample (`i ≠ j`) part.
    pub cross: Vec<f64>,
}

/// Splits the residual of the batch-mean effective weights into the
/// same-sample terms, which cancel at first order, and the cross-sample terms.
pub fn symmetry_residual(
    before: &ReluNet,
    after: &ReluNet,
    masks: &MaskTensor,
) -> Result<SymmetryResidual> {
    if masks.is_empty() {
        return Err(Error::EmptyInput("mask tensor"));
    }
    let m = masks.len() as f64;
    let pairs = before.depth().saturating_sub(1);
    let raw = pair_residuals(before.weights(), after.weights())
        .iter()
        .map(Matrix::frobenius_norm)
        .collect();

    let mut mean_before: Vec<Matrix> = before
        .weights()
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut mean_after = mean_before.clone();
    let mut diagonal_sum: Vec<Option<Matrix>> = vec![None; pairs];
    for sample in &masks.samples {
        let b = effective_weights(before, sample)?;
        let a = effective_weights(after, sample)?;
        for l in 0..b.len() {
            mean_before[l].axpy(1.0 / m, &b[l])?;
            mean_after[l].axpy(1.0 / m, &a[l])?;
        }
        for (acc, r) in diagonal_sum.iter_mut().zip(pair_residuals(&b, &a)) {
            let scaled = r.scale(1.0 / (m * m));
            *acc = Some(match acc.take() {
                Some(prev) => prev.add(&scaled)?,
                None => scaled,
            });
        }
    }
    let total = pair_residuals(&mean_before, &mean_after);
    let mut out = SymmetryResidual {
        raw,
        aggregate: Vec::with_capacity(pairs),
        diagonal: Vec::with_capacity(pairs),
        cross: Vec::with_capacity(pairs),
    };
    for (t, d) in total.iter().zip(diagonal_sum) {
        let d = d.expect("at least one sample");
        out.aggregate.push(t.frobenius_norm());
        out.cross.push(t.sub(&d)?.frobenius_norm());
        out.diagonal.push(d.frobenius_norm());
    }
    Ok(out)
}

/// For each start layer `l`, the fraction of same-label pairs whose masks
/// agree on every layer `≥ l`. A batch without same-label pairs scores 1.
pub fn mask_agreement_profile(masks: &MaskTensor, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != masks.len() {
        return Err(Error::shape("labels", masks.len(), labels.len()));
    }
    let depth = masks.samples.first().map_or(0, Vec::len);
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in labels.iter().enumerate() {
        by_label.entry(c).or_default().push(i);
    }
    // agree_from[l] counts pairs identical on layers l..depth.
    let mut agree_from = vec![0usize; depth + 1];
    let mut pairs = 0usize;
    for members in by_label.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs += 1;
                let (mi, mj) = (&masks.samples[i], &masks.samples[j]);
                let highest_diff = (0..depth).rev().find(|&l| mi[l] != mj[l]);
                let first_agreeing = highest_diff.map_or(0, |l| l + 1);
                agree_from[first_agreeing] += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(vec![1.0; depth]);
    }
    let mut out = vec![0.0; depth];
    let mut cumulative = 0usize;
    for l in 0..depth {
        cumulative += agree_from[l];
        out[l] = cumulative as f64 / pairs as f64;
    }
    Ok(out)
}

pub fn mask_agreement(masks: &MaskTensor, labels: &[usize], l: usize) -> Result<f64> {
    let profile = mask_agreement_profile(masks, labels)?;
    profile
        .get(l)
        .copied()
        .ok_or_else(|| Error::IndexOutOfRange {
            what: "layer",
            index: l,
            valid: format!("0..{}", profile.len()),
        })
}

/// Loss, descent directions and realised masks for a whole batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    /// `−∂loss/∂W_l` per layer.
    pub gradients: Vec<Matrix>,
    pub masks: MaskTensor,
}

fn check_batch(net: &ReluNet, batch: &ClassBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("class batch"));
    }
    if batch.inputs().cols() != net.linear().input_dim() {
        return Err(Error::shape(
            "batch input dim",
            net.linear().input_dim(),
            batch.inputs().cols(),
        ));
    }
    if batch.classes() != net.linear().output_dim() {
        return Err(Error::shape(
            "batch classes",
            net.linear().output_dim(),
            batch.classes(),
        ));
    }
    Ok(())
}

/// Full-batch forward and backward pass with samples as rows.
pub fn evaluate_batch(net: &ReluNet, batch: &ClassBatch) -> Result<BatchEvaluation> {
    check_batch(net, batch)?;
    let m = batch.len();
    let depth = net.depth();
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(batch.inputs().clone());
    let mut on: Vec<Vec<bool>> = Vec::with_capacity(depth);
    for w in net.weights() {
        let mut z = matmul(acts.last().expect("non-empty"), &w.transpose())?;
        let flags: Vec<bool> = z.as_slice().iter().map(|&v| v > 0.0).collect();
        for (v, &f) in z.as_mut_slice().iter_mut().zip(&flags) {
            if !f {
                *v = 0.0;
            }
        }
        on.push(flags);
        acts.push(z);
    }

    let out = &acts[depth];
    let k = out.cols();
    let mut loss = 0.0;
    let mut delta = Matrix::zeros(m, k);
    for i in 0..m {
        let logits = out.row(i);
        let y = batch.target(i);
        loss += cross_entropy(logits, y);
        let p = softmax(logits);
        for c in 0..k {
            if on[depth - 1][i * k + c] {
                delta[(i, c)] = (y[c] - p[c]) / m as f64;
            }
        }
    }
    loss /= m as f64;

    let mut gradients = vec![Matrix::zeros(1, 1); depth];
    for l in (0..depth).rev() {
        gradients[l] = matmul(&delta.transpose(), &acts[l])?;
        if l > 0 {
            delta = matmul(&delta, net.layer(l))?;
            for (v, &f) in delta.as_mut_slice().iter_mut().zip(&on[l - 1]) {
                if !f {
                    *v = 0.0;
                }
            }
        }
    }

    let widths: Vec<usize> = net.weights().iter().map(Matrix::rows).collect();
    let samples = (0..m)
        .map(|i| {
            on.iter()
                .zip(&widths)
                .map(|(flags, &n)| flags[i * n..(i + 1) * n].to_vec())
                .collect()
        })
        .collect();
    Ok(BatchEvaluation {
        loss,
        gradients,
        masks: MaskTensor { samples },
    })
}

/// Per pair `|Δ(W_{l+1}ᵀW_{l+1}) − Δ(W_l W_lᵀ)|_F / η` for the step
/// `W ← W + η G`; zero when `η = 0`.
pub fn growth_discrepancy(weights: &[Matrix], gradients: &[Matrix], eta: f64) -> Vec<f64> {
    if eta == 0.0 {
        return vec![0.0; weights.len().saturating_sub(1)];
    }
    let after: Vec<Matrix> = weights
        .iter()
        .zip(gradients)
        .map(|(w, g)| {
            let mut a = w.clone();
            a.axpy(eta, g).expect("same shape");
            a
        })
        .collect();
    pair_residuals(weights, &after)
        .iter()
        .map(|r| r.frobenius_norm() / eta)
        .collect()
}

fn relu_snapshot(
    net: &ReluNet,
    eval: &BatchEvaluation,
    labels: &[usize],
    step: usize,
    eta: f64,
) -> Result<Snapshot> {
    let mut snap = Snapshot::new(
        step,
        step as f64 * eta,
        eval.loss,
        net.layer_norms(),
        net.linear().end_to_end().frobenius_norm(),
    );
    snap.growth_discrepancy = growth_discrepancy(net.weights(), &eval.gradients, eta);
    snap.mask_agreement = mask_agreement_profile(&eval.masks, labels)?;
    Ok(snap)
}

/// Full-batch gradient descent on the mean softmax cross-entropy, with masks
/// recomputed every step.
pub fn train_relu(
    net: ReluNet,
    batch: &ClassBatch,
    cfg: &FlowConfig,
) -> Result<(ReluNet, Trajectory)> {
    let cfg = cfg.validated()?;
    let mut weights = net.weights().to_vec();
    let mut traj = Trajectory::new(cfg.eta);
    for step in 0..=cfg.steps {
        let current = ReluNet::new(weights.clone())?;
        let eval = evaluate_batch(&current, batch)?;
        if step % cfg.record_every == 0 || step == cfg.steps {
            traj.push(relu_snapshot(
                &current,
                &eval,
                batch.labels(),
                step,
                cfg.eta,
            )?);
        }
        if step == cfg.steps {
            return Ok((current, traj));
        }
        for (w, g) in weights.iter_mut().zip(&eval.gradients) {
            w.axpy(cfg.eta, g)?;
        }
        for (l, w) in weights.iter().enumerate() {
            let n = w.frobenius_norm();
            if !n.is_finite() || n > DIVERGENCE_THRESHOLD {
                return Err(Error::Divergence {
                    step: step + 1,
                    reason: format!("layer {l} norm {n:.3e}"),
                    partial: Box::new(Some(traj)),
                });
            }
        }
    }
    unreachable!("loop returns at the final step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::glorot_init;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], seed: u64) -> ReluNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ReluNet::new(
            dims.windows(2)
                .map(|d| Matrix::from_fn(d[1], d[0], |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn random_input(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn one_hot(k: usize, c: usize) -> Vec<f64> {
        (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    fn scalar_reference(net: &ReluNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for w in net.weights() {
            h = (0..w.rows())
                .map(|r| {
                    let mut z = 0.0;
                    for (c, hc) in h.iter().enumerate() {
                        z += w[(r, c)] * hc;
                    }
                    z.max(0.0)
                })
                .collect();
        }
        let e: Vec<f64> = h.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn forward_with_positive_preactivations_is_linear_softmax() {
        let net = ReluNet::new(vec![
            Matrix::from_rows(&[[1.0, 0.5], [0.2, 1.0]]).unwrap(),
            Matrix::identity(2),
        ])
        .unwrap();
        let x = [1.0, 2.0];
        let (p, masks) = relu_forward(&net, &x).unwrap();
        assert!(masks.iter().flatten().all(|&m| m));
        let lin = net.linear().forward(&x).unwrap();
        let want = softmax(&lin);
        for (a, b) in p.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn inactive_row_is_invisible_to_the_output() {
        let mut w1 = Matrix::from_rows(&[[1.0, 1.0], [-1.0, -1.0], [0.5, 0.0]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.3, -0.2, 1.0]]).unwrap();
        let x = [0.4, 0.6];
        let net = ReluNet::new(vec![w1.clone(), w2.clone()]).unwrap();
        let (p, masks) = relu_forward(&net, &x).unwrap();
        assert_eq!(masks[0], vec![true, false, true]);
        w1[(1, 0)] = -0.7;
        w1[(1, 1)] = -0.2;
        let (q, _) = relu_forward(&ReluNet::new(vec![w1, w2]).unwrap(), &x).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_preactivation_is_masked() {
        let net = ReluNet::new(vec![Matrix::from_rows(&[[1.0, -1.0]]).unwrap()]).unwrap();
        let (_, masks) = relu_forward(&net, &[2.0, 2.0]).unwrap();
        assert_eq!(masks, vec![vec![false]]);
    }

    proptest! {
        #[test]
        fn forward_matches_scalar_reference(seed in 0u64..1000) {
            let net = random_net(&[4, 6, 5, 3], seed);
            let x = random_input(4, seed + 1);
            let (p, _) = relu_forward(&net, &x).unwrap();
            for (a, b) in p.iter().zip(scalar_reference(&net, &x)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradient_with_all_masks_off_is_zero() {
        let net = random_net(&[3, 4, 2], 1);
        let masks = vec![vec![false; 4], vec![false; 2]];
        for g in masked_gradients(&net, &[1.0, 2.0, 3.0], &one_hot(2, 0), &masks).unwrap() {
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn single_layer_gradient_is_softmax_residual() {
        let net = random_net(&[3, 4], 2);
        let x = [0.3, -1.0, 0.5];
        let y = one_hot(4, 2);
        let masks = vec![vec![true; 4]];
        let g = masked_layer_gradient(&net, &x, &y, &masks, 0).unwrap();
        let p = softmax(&net.layer(0).matvec(&x).unwrap());
        let want = Matrix::from_fn(4, 3, |r, c| (y[r] - p[r]) * x[c]);
        assert!(g.sub(&want).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn masked_gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let net = random_net(&[5, 6, 4, 3], 40 + seed);
            let x = random_input(5, seed);
            let y = one_hot(3, seed as usize % 3);
            let (_, masks) = relu_forward(&net, &x).unwrap();
            let grads = masked_gradients(&net, &x, &y, &masks).unwrap();
            for (l, g) in grads.iter().enumerate() {
                let fd = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let mut w = net.weights().to_vec();
                    w[l][(r, c)] += h;
                    let plus =
                        masked_loss(&ReluNet::new(w.clone()).unwrap(), &x, &y, &masks).unwrap();
                    w[l][(r, c)] -= 2.0 * h;
                    let minus = masked_loss(&ReluNet::new(w).unwrap(), &x, &y, &masks).unwrap();
                    -(plus - minus) / (2.0 * h)
                });
                let scale = g.frobenius_norm().max(1e-12);
                let rel = g.sub(&fd).unwrap().frobenius_norm() / scale;
                assert!(
                    rel <= 1e-6 || g.frobenius_norm() < 1e-10,
                    "seed {seed} layer {l}: {rel}"
                );
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let net = random_net(&[4, 5, 3], 7);
        let inputs = Matrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5);
        let batch = ClassBatch::from_labels(inputs, &[0, 1, 2, 0, 1, 2], 3).unwrap();
        let eval = evaluate_batch(&net, &batch).unwrap();
        let mut mean: Vec<Matrix> = net
            .weights()
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let (_, masks) = relu_forward(&net, batch.input(i)).unwrap();
            assert_eq!(masks, eval.masks.samples[i]);
            for (acc, g) in mean
                .iter_mut()
                .zip(masked_gradients(&net, batch.input(i), batch.target(i), &masks).unwrap())
            {
                acc.axpy(1.0 / 6.0, &g).unwrap();
            }
            loss += masked_loss(&net, batch.input(i), batch.target(i), &masks).unwrap() / 6.0;
        }
        assert!((eval.loss - loss).abs() <= 1e-14);
        for (a, b) in eval.gradients.iter().zip(&mean) {
            assert!(a.sub(b).unwrap().max_abs() <= 1e-14);
        }
    }

    fn sample_residual(net: &ReluNet, x: &[f64], y: &[f64], eta: f64) -> Vec<f64> {
        let (_, masks) = relu_forward(net, x).unwrap();
        let after = sample_step(net, x, y, &masks, eta).unwrap();
        per_sample_balance_residual(net, &after, &masks).unwrap()
    }

    #[test]
    fn per_sample_residual_is_second_order() {
        let net = random_net(&[4, 5, 5, 3], 3);
        let x = random_input(4, 9);
        let y = one_hot(3, 1);
        let scaled: Vec<Vec<f64>> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eta| {
                sample_residual(&net, &x, &y, eta)
                    .iter()
                    .map(|r| r / (eta * eta))
                    .collect()
            })
            .collect();
        for pair in 0..2 {
            let vals: Vec<f64> = scaled.iter().map(|s| s[pair]).collect();
            let max = vals.iter().copied().fold(0.0, f64::max);
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0 && max / min <= 2.0, "pair {pair}: {vals:?}");
        }
    }

    #[test]
    fn per_sample_residual_examples() {
        let net = random_net(&[3, 4, 2], 5);
        let x = random_input(3, 1);
        let (p, masks) = relu_forward(&net, &x).unwrap();
        // Targets equal to the prediction give a zero gradient.
        let r = sample_residual(&net, &x, &p, 1e-2);
        assert!(r.iter().all(|&v| v <= 1e-15));

        // All-ones masks reduce to the raw weight residual.
        let net = ReluNet::new(vec![Matrix::identity(3).scale(0.5), Matrix::identity(3)]).unwrap();
        let x = [1.0, 2.0, 3.0];
        let y = one_hot(3, 0);
        let (_, masks_all) = relu_forward(&net, &x).unwrap();
        assert!(masks_all.iter().flatten().all(|&m| m));
        let after = sample_step(&net, &x, &y, &masks_all, 1e-2).unwrap();
        let masked = per_sample_balance_residual(&net, &after, &masks_all).unwrap();
        let raw = symmetry_residual(
            &net,
            &after,
            &MaskTensor {
                samples: vec![masks_all],
            },
        )
        .unwrap();
        assert!((masked[0] - raw.raw[0]).abs() <= 1e-15);
        let _ = masks;
    }

    #[test]
    fn symmetry_residual_single_and_duplicated_samples() {
        let net = random_net(&[3, 4, 3], 11);
        let x = random_input(3, 2);
        let y = one_hot(3, 2);
        let eta = 1e-3;

        let one = ClassBatch::from_labels(
            Matrix::from_rows(std::slice::from_ref(&x)).unwrap(),
            &[2],
            3,
        )
        .unwrap();
        let eval = evaluate_batch(&net, &one).unwrap();
        let after = step(&net, &eval, eta);
        let single = symmetry_residual(&net, &after, &eval.masks).unwrap();
        assert!(single.cross[0] <= 1e-15);
        let per_sample = per_sample_balance_residual(&net, &after, &eval.masks.samples[0]).unwrap();
        assert!((single.aggregate[0] - per_sample[0]).abs() <= 1e-15);

        let two = ClassBatch::from_labels(Matrix::from_rows(&[x.clone(), x]).unwrap(), &[2, 2], 3)
            .unwrap();
        let eval2 = evaluate_batch(&net, &two).unwrap();
        let after2 = step(&net, &eval2, eta);
        let dup = symmetry_residual(&net, &after2, &eval2.masks).unwrap();
        assert!(
            (dup.aggregate[0] - single.aggregate[0]).abs()
                <= 1e-12 * single.aggregate[0].max(1e-12)
        );
        let _ = y;
    }

    fn step(net: &ReluNet, eval: &BatchEvaluation, eta: f64) -> ReluNet {
        let mut w = net.weights().to_vec();
        for (a, g) in w.iter_mut().zip(&eval.gradients) {
            a.axpy(eta, g).unwrap();
        }
        ReluNet::new(w).unwrap()
    }

    #[test]
    fn differing_masks_break_symmetry_at_first_order() {
        let net = random_net(&[3, 6, 3], 21);
        let xs = [random_input(3, 30), random_input(3, 31)];
        let (_, m0) = relu_forward(&net, &xs[0]).unwrap();
        let (_, m1) = relu_forward(&net, &xs[1]).unwrap();
        assert_ne!(m0, m1);
        let batch = ClassBatch::from_labels(Matrix::from_rows(&xs).unwrap(), &[0, 1], 3).unwrap();
        let eval = evaluate_batch(&net, &batch).unwrap();
        let floors: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eta| {
                symmetry_residual(&net, &step(&net, &eval, eta), &eval.masks)
                    .unwrap()
                    .aggregate[0]
                    / eta
            })
            .collect();
        assert!(floors[2] > 0.5 * floors[0], "{floors:?}");
    }

    #[test]
    fn mask_agreement_examples() {
        let a = vec![vec![true, false], vec![true]];
        let b = vec![vec![false, true], vec![false]];
        let same = MaskTensor {
            samples: vec![a.clone(); 4],
        };
        assert_eq!(
            mask_agreement_profile(&same, &[0, 0, 1, 1]).unwrap(),
            vec![1.0, 1.0]
        );
        let comp = MaskTensor {
            samples: vec![a.clone(), b.clone()],
        };
        assert_eq!(
            mask_agreement_profile(&comp, &[0, 0]).unwrap(),
            vec![0.0, 0.0]
        );
        let partial = MaskTensor {
            samples: vec![a.clone(), vec![vec![false, true], vec![true]]],
        };
        assert_eq!(
            mask_agreement_profile(&partial, &[3, 3]).unwrap(),
            vec![0.0, 1.0]
        );
        assert!(mask_agreement(&partial, &[3, 3], 2).is_err());
    }

    proptest! {
        #[test]
        fn mask_agreement_matches_pair_count(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 12;
            let widths = [3, 2, 2];
            let samples: Vec<SampleMasks> = (0..m)
                .map(|_| widths.iter().map(|&w| (0..w).map(|_| rng.random_bool(0.7)).collect()).collect())
                .collect();
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let masks = MaskTensor { samples };
            let profile = mask_agreement_profile(&masks, &labels).unwrap();
            for (l, &got) in profile.iter().enumerate() {
                let (mut agree, mut total) = (0, 0);
                for i in 0..m {
                    for j in i + 1..m {
                        if labels[i] == labels[j] {
                            total += 1;
                            if masks.samples[i][l..] == masks.samples[j][l..] {
                                agree += 1;
                            }
                        }
                    }
                }
                let want = if total == 0 { 1.0 } else { agree as f64 / total as f64 };
                prop_assert_eq!(got, want);
            }
            for w in profile.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }

    fn separable_batch() -> ClassBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![
                sign * (1.0 + rng.random_range(0.0..0.5)),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                1.0,
            ]);
            labels.push(c);
        }
        ClassBatch::from_labels(Matrix::from_rows(&rows).unwrap(), &labels, 2).unwrap()
    }

    #[test]
    fn train_relu_separates_toy_batch() {
        let batch = separable_batch();
        let net = ReluNet::from(glorot_init(&[4, 8, 2], 8.0, 3).unwrap());
        let (_, traj) = train_relu(net, &batch, &FlowConfig::new(0.5, 2000, 500)).unwrap();
        assert!(
            traj.last().unwrap().loss < 0.1,
            "{}",
            traj.last().unwrap().loss
        );
        assert_eq!(traj.last().unwrap().mask_agreement.len(), 2);
        assert_eq!(traj.last().unwrap().growth_discrepancy.len(), 1);
    }

    #[test]
    fn train_relu_with_zero_eta_is_flat_and_wide_nets_are_accepted() {
        let batch = separable_batch();
        let net = ReluNet::from(glorot_init(&[4, 8, 2], 8.0, 3).unwrap());
        let (end, traj) = train_relu(net.clone(), &batch, &FlowConfig::new(0.0, 5, 1)).unwrap();
        assert_eq!(end, net);
        assert!(traj
            .snapshots
            .iter()
            .all(|s| s.loss == traj.snapshots[0].loss));

        let mut dims = vec![4];
        dims.extend([100; 6]);
        dims.push(2);
        let wide = ReluNet::from(glorot_init(&dims, 200.0, 1).unwrap());
        assert_eq!(wide.depth(), 7);
        let (_, traj) = train_relu(wide, &batch, &FlowConfig::new(1e-3, 2, 1)).unwrap();
        assert_eq!(traj.len(), 3);
    }

    #[test]
    fn class_batch_validation() {
        let x = Matrix::zeros(2, 3);
        assert!(ClassBatch::from_labels(x.clone(), &[0], 2).is_err());
        assert!(ClassBatch::from_labels(x.clone(), &[0, 5], 2).is_err());
        let b = ClassBatch::from_labels(x, &[1, 0], 2).unwrap();
        assert_eq!(b.target(0), &[0.0, 1.0]);
        assert_eq!(b.prefix(1).unwrap().len(), 1);
    }
}
