//! Deep linear networks `f(x) = W_L ⋯ W_1 x` trained on the whitened L2 loss.
//!
//! With whitened inputs the descent direction for layer `l` is
//!
//! ```text
//! τ dW_l/dt = (W_L ⋯ W_{l+1})ᵀ (Σ_yx − W_L ⋯ W_1) (W_{l−1} ⋯ W_1)ᵀ
//! ```
//!
//! and one gradient-descent step with learning rate `η = 1/τ` is exactly one
//! forward-Euler step of that flow.

use serde::{Deserialize, Serialize};

use crate::data::{second_moment, Dataset, WHITENED_TOLERANCE};
use crate::diagnostics::mode_strengths;
use crate::error::{Error, Result};
use crate::init::ModeAlignment;
use crate::linalg::{frobenius_norm, matmul, Matrix};
use crate::trajectory::{Snapshot, Trajectory};

/// Any layer norm above this (or any non-finite entry) aborts training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Ordered weight stack; `weights[l]` maps layer `l` activations (width
/// `dims[l]`) to width `dims[l + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNet {
    weights: Vec<Matrix>,
}

impl LinearNet {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("linear net weights"));
        }
        for l in 1..weights.len() {
            if weights[l].cols() != weights[l - 1].rows() {
                return Err(Error::shape(
                    "layer chain",
                    format!("weights[{l}] with {} columns", weights[l - 1].rows()),
                    format!("{:?}", weights[l].shape()),
                ));
            }
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights", "entries must be finite"));
        }
        Ok(Self { weights })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `n_1 … n_{L+1}`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.weights[0].cols())
            .chain(self.weights.iter().map(Matrix::rows))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.weights[l]
    }

    pub fn into_weights(self) -> Vec<Matrix> {
        self.weights
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.weights.iter().map(frobenius_norm).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("forward input", self.input_dim(), x.len()));
        }
        let mut h = x.to_vec();
        for w in &self.weights {
            h = w.matvec(&h)?;
        }
        Ok(h)
    }

    /// `W_L ⋯ W_1`.
    pub fn end_to_end(&self) -> Matrix {
        self.product(0, self.depth())
    }

    /// `W_{hi−1} ⋯ W_lo`; identity of the matching width when `lo == hi`.
    pub fn product(&self, lo: usize, hi: usize) -> Matrix {
        assert!(lo <= hi && hi <= self.depth());
        if lo == hi {
            let n = if lo == self.depth() {
                self.output_dim()
            } else {
                self.weights[lo].cols()
            };
            return Matrix::identity(n);
        }
        let mut p = self.weights[lo].clone();
        for w in &self.weights[lo + 1..hi] {
            p = matmul(w, &p).expect("chained shapes");
        }
        p
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.depth() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: l,
                valid: format!("0..{}", self.depth()),
            });
        }
        Ok(())
    }
}

/// Learning-rate/time-constant pair plus run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub eta: f64,
    #[serde(default = "nan", skip_serializing_if = "not_finite")]
    pub tau: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn nan() -> f64 {
    f64::NAN
}

fn not_finite(v: &f64) -> bool {
    !v.is_finite()
}

fn one() -> usize {
    1
}

impl FlowConfig {
    /// `tau` is set to `1/eta`.
    pub fn new(eta: f64, steps: usize, record_every: usize) -> Self {
        Self {
            eta,
            tau: 1.0 / eta,
            steps,
            record_every,
        }
    }

    /// Fills a missing `tau` from `eta` and checks the pair. `eta = 0` is
    /// accepted as frozen dynamics with infinite `tau`.
    pub fn validated(mut self) -> Result<Self> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::invalid(
                "eta",
                format!("must be finite and non-negative, got {}", self.eta),
            ));
        }
        if self.tau.is_nan() {
            self.tau = 1.0 / self.eta;
        }
        if self.eta > 0.0 && (self.eta * self.tau - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "tau",
                format!("eta * tau must equal 1, got {}", self.eta * self.tau),
            ));
        }
        if self.eta == 0.0 && self.tau.is_finite() {
            return Err(Error::invalid("tau", "eta = 0 requires an infinite tau"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be positive"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSummary {
    /// `(1/m) Σ y_i x_iᵀ`, k×d.
    pub sigma_yx: Matrix,
    /// `(1/m) Σ x_i x_iᵀ`, d×d.
    pub sigma_xx: Matrix,
    pub whitened: bool,
}

impl CovarianceSummary {
    /// Summary of already-white data with the given cross-covariance.
    pub fn whitened(sigma_yx: Matrix) -> Self {
        let d = sigma_yx.cols();
        Self {
            sigma_yx,
            sigma_xx: Matrix::identity(d),
            whitened: true,
        }
    }

    pub fn xx_deviation(&self) -> f64 {
        self.sigma_xx
            .sub(&Matrix::identity(self.sigma_xx.rows()))
            .expect("square")
            .frobenius_norm()
    }
}

pub fn covariance(data: &Dataset) -> Result<CovarianceSummary> {
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let m = data.len() as f64;
    let sigma_yx = matmul(&data.targets().transpose(), data.inputs())?.scale(1.0 / m);
    let sigma_xx = second_moment(data.inputs());
    let mut cov = CovarianceSummary {
        sigma_yx,
        sigma_xx,
        whitened: false,
    };
    cov.whitened = cov.xx_deviation() <= WHITENED_TOLERANCE;
    Ok(cov)
}

fn check_data(net: &LinearNet, data: &Dataset) -> Result<()> {
    if data.input_dim() != net.input_dim() {
        return Err(Error::shape(
            "dataset input dim",
            net.input_dim(),
            data.input_dim(),
        ));
    }
    if data.output_dim() != net.output_dim() {
        return Err(Error::shape(
            "dataset output dim",
            net.output_dim(),
            data.output_dim(),
        ));
    }
    Ok(())
}

/// `(1/2m) Σ_i |f(x_i) − y_i|²`.
pub fn l2_loss(net: &LinearNet, data: &Dataset) -> Result<f64> {
    check_data(net, data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    // Rows of X·Eᵀ are the predictions.
    let pred = matmul(data.inputs(), &net.end_to_end().transpose())?;
    let sq: f64 = pred
        .as_slice()
        .iter()
        .zip(data.targets().as_slice())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sq / (2.0 * data.len() as f64))
}

fn check_cov(net: &LinearNet, cov: &CovarianceSummary) -> Result<()> {
    if !cov.whitened {
        return Err(Error::NotWhitened {
            deviation: cov.xx_deviation(),
        });
    }
    let want = (net.output_dim(), net.input_dim());
    if cov.sigma_yx.shape() != want {
        return Err(Error::shape(
            "sigma_yx",
            format!("{want:?}"),
            format!("{:?}", cov.sigma_yx.shape()),
        ));
    }
    Ok(())
}

/// `τ dW_l/dt`, the negative loss gradient for layer `l`.
pub fn layer_gradient(net: &LinearNet, cov: &CovarianceSummary, l: usize) -> Result<Matrix> {
    check_cov(net, cov)?;
    net.check_layer(l)?;
    let residual = cov.sigma_yx.sub(&net.end_to_end())?;
    Ok(gradient_from_residual(net, &residual, l))
}

fn gradient_from_residual(net: &LinearNet, residual: &Matrix, l: usize) -> Matrix {
    let suffix = net.product(l + 1, net.depth());
    let prefix = net.product(0, l);
    let left = matmul(&suffix.transpose(), residual).expect("conforming");
    matmul(&left, &prefix.transpose()).expect("conforming")
}

/// All layer gradients from one snapshot of the weights.
pub fn all_gradients(net: &LinearNet, cov: &CovarianceSummary) -> Result<Vec<Matrix>> {
    check_cov(net, cov)?;
    let residual = cov.sigma_yx.sub(&net.end_to_end())?;
    Ok((0..net.depth())
        .map(|l| gradient_from_residual(net, &residual, l))
        .collect())
}

/// One simultaneous gradient-descent step: every layer moves by
/// `eta · layer_gradient` computed from the pre-step weights.
pub fn gd_step(net: &LinearNet, cov: &CovarianceSummary, eta: f64) -> Result<LinearNet> {
    let grads = all_gradients(net, cov)?;
    let mut weights = net.weights.clone();
    for (w, g) in weights.iter_mut().zip(&grads) {
        w.axpy(eta, g)?;
    }
    Ok(LinearNet { weights })
}

/// Conservation matrices `W_{l+1}ᵀW_{l+1} − W_l W_lᵀ` for every adjacent pair.
pub(crate) fn conservation_matrices(net: &LinearNet) -> Vec<Matrix> {
    net.weights
        .windows(2)
        .map(|p| {
            p[1].gram_cols()
                .sub(&p[0].gram_rows())
                .expect("square, same width")
        })
        .collect()
}

fn snapshot(
    net: &LinearNet,
    data: &Dataset,
    step: usize,
    eta: f64,
    alignment: Option<&ModeAlignment>,
) -> Result<Snapshot> {
    let mut snap = Snapshot::new(
        step,
        step as f64 * eta,
        l2_loss(net, data)?,
        net.layer_norms(),
        net.end_to_end().frobenius_norm(),
    );
    snap.conservation = conservation_matrices(net);
    if let Some(a) = alignment {
        snap.modes = Some(mode_strengths(net, a)?);
    }
    Ok(snap)
}

fn divergence_reason(net: &LinearNet) -> Option<String> {
    for (l, w) in net.weights.iter().enumerate() {
        if !w.is_finite() {
            return Some(format!("non-finite entries in layer {l}"));
        }
        let n = w.frobenius_norm();
        if n > DIVERGENCE_THRESHOLD {
            return Some(format!(
                "layer {l} norm {n:.3e} exceeds {DIVERGENCE_THRESHOLD:.0e}"
            ));
        }
    }
    None
}

/// Full-batch gradient descent on whitened data. Snapshots are taken at step
/// 0, every `record_every` steps, and at the final step.
pub fn train(net: LinearNet, data: &Dataset, cfg: &FlowConfig) -> Result<(LinearNet, Trajectory)> {
    train_tracking(net, data, cfg, None)
}

/// `train`, additionally recording mode strengths against `alignment`.
pub fn train_tracking(
    mut net: LinearNet,
    data: &Dataset,
    cfg: &FlowConfig,
    alignment: Option<&ModeAlignment>,
) -> Result<(LinearNet, Trajectory)> {
    let cfg = cfg.validated()?;
    check_data(&net, data)?;
    let cov = covariance(data)?;
    check_cov(&net, &cov)?;

    let mut traj = Trajectory::new(cfg.eta);
    traj.push(snapshot(&net, data, 0, cfg.eta, alignment)?);
    for step in 1..=cfg.steps {
        net = gd_step(&net, &cov, cfg.eta)?;
        if let Some(reason) = divergence_reason(&net) {
            return Err(Error::Divergence {
                step,
                reason,
                partial: Box::new(Some(traj)),
            });
        }
        if step % cfg.record_every == 0 || step == cfg.steps {
            traj.push(snapshot(&net, data, step, cfg.eta, alignment)?);
        }
    }
    Ok((net, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{linear_teacher_task, MixtureSpec};
    use crate::init::glorot_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_task(seed: u64) -> Dataset {
        let spec = MixtureSpec {
            components: 2,
            samples_per_component: 60,
            dim: 4,
        };
        linear_teacher_task(&spec, 3, seed, true).unwrap()
    }

    fn random_net(dims: &[usize], seed: u64) -> LinearNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearNet::new(
            dims.windows(2)
                .map(|d| Matrix::from_fn(d[1], d[0], |_, _| rng.random_range(-0.8..0.8)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let x = [1.0, -2.0, 0.5];
        let id = LinearNet::new(vec![Matrix::identity(3)]).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x.to_vec());
        let two = LinearNet::new(vec![
            Matrix::identity(3).scale(2.0),
            Matrix::identity(3).scale(3.0),
        ])
        .unwrap();
        assert_eq!(two.forward(&x).unwrap(), vec![6.0, -12.0, 3.0]);
        assert!(matches!(two.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_matches_end_to_end_product() {
        let net = random_net(&[5, 4, 6, 2], 3);
        let x = [0.3, -0.1, 0.7, 1.1, -0.4];
        let direct = net.forward(&x).unwrap();
        let via = net.end_to_end().matvec(&x).unwrap();
        for (a, b) in direct.iter().zip(&via) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn end_to_end_examples() {
        let net = random_net(&[4, 3], 1);
        assert_eq!(net.end_to_end(), net.layer(0).clone());
        let ids = LinearNet::new(vec![Matrix::identity(3); 4]).unwrap();
        assert_eq!(ids.end_to_end(), Matrix::identity(3));
        let net = random_net(&[3, 5, 4, 2], 2);
        let fold = net
            .weights()
            .iter()
            .skip(1)
            .fold(net.layer(0).clone(), |acc, w| w.matmul(&acc).unwrap());
        assert!(net.end_to_end().sub(&fold).unwrap().max_abs() <= 1e-13);
    }

    #[test]
    fn construction_rejects_broken_chain() {
        let err = LinearNet::new(vec![Matrix::zeros(3, 2), Matrix::zeros(2, 4)]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(LinearNet::new(vec![]).is_err());
    }

    #[test]
    fn covariance_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let data = Dataset::new(x.clone(), x.clone()).unwrap();
        let cov = covariance(&data).unwrap();
        assert_eq!(
            cov.sigma_yx,
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()
        );

        let x = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap();
        let y = Matrix::from_rows(&[[3.0], [-1.0]]).unwrap();
        let once = covariance(&Dataset::new(x.clone(), y.clone()).unwrap()).unwrap();
        let x2 = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [1.0, 2.0], [0.5, -1.0]]).unwrap();
        let y2 = Matrix::from_rows(&[[3.0], [-1.0], [3.0], [-1.0]]).unwrap();
        let twice = covariance(&Dataset::new(x2, y2).unwrap()).unwrap();
        assert_eq!(once, twice);

        assert!(covariance(&small_task(1)).unwrap().whitened);
    }

    #[test]
    fn l2_loss_examples() {
        let data = small_task(2);
        let teacher = data.teacher().unwrap().clone();
        let exact = LinearNet::new(vec![teacher]).unwrap();
        assert!(l2_loss(&exact, &data).unwrap() <= 1e-20);

        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        let y = Matrix::from_rows(&[[2.0, 0.0]]).unwrap();
        let zero = LinearNet::new(vec![Matrix::zeros(2, 1)]).unwrap();
        assert_eq!(l2_loss(&zero, &Dataset::new(x, y).unwrap()).unwrap(), 2.0);

        let net = random_net(&[4, 5, 3], 5);
        let mut oracle = 0.0;
        for i in 0..data.len() {
            let pred = net.forward(data.input(i)).unwrap();
            for (p, y) in pred.iter().zip(data.target(i)) {
                oracle += 0.5 * (p - y) * (p - y);
            }
        }
        oracle /= data.len() as f64;
        let got = l2_loss(&net, &data).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn gradient_vanishes_at_stationary_point() {
        let net = random_net(&[4, 5, 3], 8);
        let cov = CovarianceSummary::whitened(net.end_to_end());
        for l in 0..net.depth() {
            assert!(layer_gradient(&net, &cov, l).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn single_layer_gradient_is_residual() {
        let net = random_net(&[4, 3], 9);
        let target = random_net(&[4, 3], 10).end_to_end();
        let cov = CovarianceSummary::whitened(target.clone());
        let g = layer_gradient(&net, &cov, 0).unwrap();
        assert_eq!(g, target.sub(net.layer(0)).unwrap());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = small_task(4);
        let cov = covariance(&data).unwrap();
        let net = random_net(&[4, 5, 2, 3], 12);
        let h = 1e-5;
        for l in 0..net.depth() {
            let g = layer_gradient(&net, &cov, l).unwrap();
            let (r, c) = g.shape();
            let fd = Matrix::from_fn(r, c, |i, j| {
                let mut w = net.weights().to_vec();
                w[l][(i, j)] += h;
                let plus = l2_loss(&LinearNet::new(w.clone()).unwrap(), &data).unwrap();
                w[l][(i, j)] -= 2.0 * h;
                let minus = l2_loss(&LinearNet::new(w).unwrap(), &data).unwrap();
                -(plus - minus) / (2.0 * h)
            });
            let rel = g.sub(&fd).unwrap().frobenius_norm() / g.frobenius_norm();
            assert!(rel <= 1e-6, "layer {l}: {rel}");
        }
    }

    #[test]
    fn gradient_rejects_unwhitened_covariance() {
        let net = random_net(&[2, 2], 1);
        let cov = CovarianceSummary {
            sigma_yx: Matrix::identity(2),
            sigma_xx: Matrix::identity(2).scale(2.0),
            whitened: false,
        };
        let err = layer_gradient(&net, &cov, 0).unwrap_err();
        assert!(err.to_string().contains("whiten"));
        let cov = CovarianceSummary::whitened(Matrix::identity(2));
        assert!(matches!(
            layer_gradient(&net, &cov, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gd_step_examples() {
        let net = random_net(&[3, 4, 2], 5);
        let cov = CovarianceSummary::whitened(random_net(&[3, 2], 6).end_to_end());
        assert_eq!(gd_step(&net, &cov, 0.0).unwrap(), net);

        let scalar = LinearNet::new(vec![Matrix::zeros(1, 1)]).unwrap();
        let cov = CovarianceSummary::whitened(Matrix::from_rows(&[[1.5]]).unwrap());
        let next = gd_step(&scalar, &cov, 0.1).unwrap();
        assert!((next.layer(0)[(0, 0)] - 0.15).abs() <= 1e-15);
    }

    #[test]
    fn gd_step_is_simultaneous() {
        // L = 2 scalars a, b with target s: simultaneous and sequential
        // updates differ at O(η²).
        let (a, b, s, eta) = (0.5, 0.8, 2.0, 0.1);
        let net = LinearNet::new(vec![
            Matrix::from_rows(&[[a]]).unwrap(),
            Matrix::from_rows(&[[b]]).unwrap(),
        ])
        .unwrap();
        let cov = CovarianceSummary::whitened(Matrix::from_rows(&[[s]]).unwrap());
        let next = gd_step(&net, &cov, eta).unwrap();
        let r = s - a * b;
        let a1 = a + eta * b * r;
        let b1 = b + eta * a * r;
        assert!((next.layer(0)[(0, 0)] - a1).abs() <= 1e-15);
        assert!((next.layer(1)[(0, 0)] - b1).abs() <= 1e-15);
        let b_seq = b + eta * a1 * (s - a1 * b);
        assert!((b_seq - b1).abs() > 1e-4);
    }

    #[test]
    fn small_step_decreases_loss() {
        let data = small_task(7);
        let cov = covariance(&data).unwrap();
        for seed in 0..5 {
            let net = random_net(&[4, 6, 3], 100 + seed);
            let before = l2_loss(&net, &data).unwrap();
            let after = l2_loss(&gd_step(&net, &cov, 1e-4).unwrap(), &data).unwrap();
            assert!(after < before);
        }
    }

    #[test]
    fn train_at_stationary_point_is_flat() {
        let data = small_task(3);
        let net = LinearNet::new(vec![data.teacher().unwrap().clone()]).unwrap();
        let (_, traj) = train(net, &data, &FlowConfig::new(1e-2, 50, 10)).unwrap();
        assert_eq!(traj.len(), 6);
        let first = traj.first().unwrap();
        for s in &traj.snapshots {
            assert!((s.layer_norms[0] - first.layer_norms[0]).abs() <= 1e-12);
            assert!(s.loss <= 1e-20);
        }
    }

    #[test]
    fn train_loss_is_monotone_from_glorot() {
        let data = small_task(11);
        let net = glorot_init(&[4, 6, 3], 1.0, 3).unwrap();
        let (_, traj) = train(net, &data, &FlowConfig::new(1e-3, 3000, 100)).unwrap();
        for w in traj.losses().windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn train_rejects_unwhitened_data_and_reports_divergence() {
        let x = Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let data = Dataset::new(x.clone(), x).unwrap();
        let net = random_net(&[2, 2], 1);
        assert!(matches!(
            train(net.clone(), &data, &FlowConfig::new(0.1, 5, 1)),
            Err(Error::NotWhitened { .. })
        ));

        let data = small_task(1);
        let net = random_net(&[4, 6, 3], 1);
        match train(net, &data, &FlowConfig::new(50.0, 100, 1)) {
            Err(Error::Divergence { step, partial, .. }) => {
                let partial = partial.expect("partial trajectory");
                assert_eq!(partial.last().unwrap().step, step - 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn euler_steps_are_first_order_consistent() {
        let data = small_task(21);
        let net = glorot_init(&[4, 5, 3], 1.0, 2).unwrap();
        let run = |eta: f64, steps: usize| {
            train(net.clone(), &data, &FlowConfig::new(eta, steps, steps))
                .unwrap()
                .0
        };
        let dist = |a: &LinearNet, b: &LinearNet| -> f64 {
            a.weights()
                .iter()
                .zip(b.weights())
                .map(|(x, y)| x.sub(y).unwrap().frobenius_norm().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let coarse = run(4e-2, 50);
        let mid = run(2e-2, 100);
        let fine = run(1e-2, 200);
        let ratio = dist(&coarse, &mid) / dist(&mid, &fine);
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn flow_config_validation() {
        assert!(FlowConfig::new(1e-3, 10, 1).validated().is_ok());
        let mut bad = FlowConfig::new(1e-3, 10, 1);
        bad.tau = 10.0;
        assert!(bad.validated().is_err());
        assert!(FlowConfig::new(1e-3, 0, 1).validated().is_err());
        assert!(FlowConfig::new(-1.0, 5, 1).validated().is_err());
        assert!(FlowConfig::new(0.0, 5, 1).validated().is_ok());
    }
}
