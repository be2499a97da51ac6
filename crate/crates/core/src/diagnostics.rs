//! Conserved quantities, norm gaps, mode strengths and the combined-strength
//! growth bound, measured on nets and recorded trajectories.

use crate::error::{Error, Result};
use crate::init::ModeAlignment;
use crate::linalg::{matmul, Matrix};
use crate::lnn::{LinearNet, DIVERGENCE_THRESHOLD};
use crate::trajectory::Trajectory;

/// Off-diagonal projection mass (relative to `max(1, |W_l|_F)`) above which a
/// layer no longer counts as aligned.
pub const ALIGNMENT_TOLERANCE: f64 = 1e-6;

/// Snapshots with `|∏W|_F` below this are left out of the κ estimates.
pub const KAPPA_MIN_PRODUCT_NORM: f64 = 1e-9;

/// `W_{l+1}ᵀW_{l+1} − W_l W_lᵀ` for the adjacent pair `(l, l + 1)`.
pub fn conservation_constant(net: &LinearNet, l: usize) -> Result<Matrix> {
    if l + 1 >= net.depth() {
        return Err(Error::IndexOutOfRange {
            what: "adjacent pair",
            index: l,
            valid: format!("0..{}", net.depth().saturating_sub(1)),
        });
    }
    Ok(net
        .layer(l + 1)
        .gram_cols()
        .sub(&net.layer(l).gram_rows())?)
}

/// Per pair, `max_t |C_l(t) − C_l(t₀)|_F`.
pub fn balancedness_drift(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.len() < 2 {
        return Err(Error::InsufficientSnapshots {
            needed: 2,
            got: traj.len(),
        });
    }
    let first = &traj.snapshots[0].conservation;
    if first.is_empty() && traj.depth() > 1 {
        return Err(Error::invalid(
            "trajectory",
            "conservation matrices were not recorded",
        ));
    }
    let mut drift = vec![0.0; first.len()];
    for snap in &traj.snapshots[1..] {
        for (d, (c, c0)) in drift.iter_mut().zip(snap.conservation.iter().zip(first)) {
            *d = f64::max(*d, c.sub(c0)?.frobenius_norm());
        }
    }
    Ok(drift)
}

/// Per adjacent pair and snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGaps {
    /// `| |W_{l+1}|_F − |W_l|_F |`.
    pub abs_gap: Vec<Vec<f64>>,
    /// `|W_l|_F² − |W_{l+1}|_F²`, which equals `−tr C_l` and is conserved by the flow.
    pub sq_gap: Vec<Vec<f64>>,
}

pub fn norm_gap(traj: &Trajectory) -> NormGaps {
    let pairs = traj.depth().saturating_sub(1);
    let mut gaps = NormGaps {
        abs_gap: vec![Vec::with_capacity(traj.len()); pairs],
        sq_gap: vec![Vec::with_capacity(traj.len()); pairs],
    };
    for snap in &traj.snapshots {
        for (l, w) in snap.layer_norms.windows(2).enumerate() {
            gaps.abs_gap[l].push((w[1] - w[0]).abs());
            gaps.sq_gap[l].push(w[0] * w[0] - w[1] * w[1]);
        }
    }
    gaps
}

/// `max_{l,k} | |W_l|_F − |W_k|_F |`.
pub fn norm_spread(layer_norms: &[f64]) -> f64 {
    let max = layer_norms
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = layer_norms.iter().copied().fold(f64::INFINITY, f64::min);
    if layer_norms.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// `σ_{k,l}` as the diagonal of `Q_{l+1}ᵀ W_l Q_l`, indexed `[layer][mode]`.
pub fn mode_strengths(net: &LinearNet, alignment: &ModeAlignment) -> Result<Vec<Vec<f64>>> {
    if alignment.depth() != net.depth() {
        return Err(Error::shape(
            "alignment depth",
            net.depth(),
            alignment.depth(),
        ));
    }
    let k = alignment.modes();
    let mut out = Vec::with_capacity(net.depth());
    for (l, w) in net.weights().iter().enumerate() {
        let left = &alignment.bases[l + 1];
        let right = &alignment.bases[l];
        if left.rows() != w.rows() || right.rows() != w.cols() {
            return Err(Error::shape(
                "alignment basis",
                format!("{:?}", w.shape()),
                format!("({}, {})", left.rows(), right.rows()),
            ));
        }
        let p = matmul(&matmul(&left.transpose(), w)?, right)?;
        let strengths: Vec<f64> = (0..k).map(|i| p[(i, i)]).collect();
        let residual = p
            .sub(&Matrix::rect_diag(p.rows(), p.cols(), &strengths))?
            .frobenius_norm();
        if residual > ALIGNMENT_TOLERANCE * w.frobenius_norm().max(1.0) {
            return Err(Error::AlignmentBroken { layer: l, residual });
        }
        out.push(strengths);
    }
    Ok(out)
}

/// Forward-Euler integration of the decoupled mode family
/// `τ σ̇_l = ∏_{i≠l} σ_i · (s − ∏_i σ_i)`; returns `steps + 1` rows of per-layer
/// strengths. With `tau = 1` and `dt = η` the update is exactly one aligned
/// gradient-descent step.
pub fn integrate_mode_ode(
    s: f64,
    sigma_init: &[f64],
    tau: f64,
    dt: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if sigma_init.is_empty() {
        return Err(Error::EmptyInput("sigma_init"));
    }
    if sigma_init.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::invalid("sigma_init", "entries must be positive"));
    }
    if !(tau > 0.0 && dt >= 0.0) {
        return Err(Error::invalid("tau", "need tau > 0 and dt >= 0"));
    }
    let h = dt / tau;
    let mut series = Vec::with_capacity(steps + 1);
    let mut sigma = sigma_init.to_vec();
    series.push(sigma.clone());
    for step in 1..=steps {
        let prod: f64 = sigma.iter().product();
        let residual = s - prod;
        let next: Vec<f64> = (0..sigma.len())
            .map(|l| {
                let others: f64 = sigma
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != l)
                    .map(|(_, x)| x)
                    .product();
                sigma[l] + h * others * residual
            })
            .collect();
        if next
            .iter()
            .any(|x| !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD)
        {
            return Err(Error::Divergence {
                step,
                reason: "mode strength left the finite range".into(),
                partial: Box::new(None),
            });
        }
        sigma = next;
        series.push(sigma.clone());
    }
    Ok(series)
}

/// κ estimates and the initial quantities of the combined-strength bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Kappas {
    /// `min_t |Σ_yx|_F / |∏W|_F`.
    pub kappa1: f64,
    /// `min_t |∏W|_F / (|W_1|_F + △)^L`.
    pub kappa2: f64,
    /// `△`, the layer-norm spread at the first snapshot.
    pub delta: f64,
    /// `U(t₀) = (|W_1|_F(t₀) + △)^L`.
    pub u0: f64,
    /// Snapshot indices excluded because `|∏W|_F < 1e-9`.
    pub excluded: Vec<usize>,
}

/// `U = (|W_1|_F + △)^L`, layer 1 being the reference layer.
pub fn combined_strength(layer_norms: &[f64], delta: f64) -> f64 {
    (layer_norms[0] + delta).powi(layer_norms.len() as i32)
}

pub fn estimate_kappas(traj: &Trajectory, sigma_yx_norm: f64) -> Result<Kappas> {
    let first = traj
        .first()
        .ok_or(Error::InsufficientSnapshots { needed: 1, got: 0 })?;
    let delta = norm_spread(&first.layer_norms);
    let mut kappa1 = f64::INFINITY;
    let mut kappa2 = f64::INFINITY;
    let mut excluded = Vec::new();
    for (i, snap) in traj.snapshots.iter().enumerate() {
        if snap.prod_norm < KAPPA_MIN_PRODUCT_NORM {
            excluded.push(i);
            continue;
        }
        kappa1 = kappa1.min(sigma_yx_norm / snap.prod_norm);
        kappa2 = kappa2.min(snap.prod_norm / combined_strength(&snap.layer_norms, delta));
    }
    if excluded.len() == traj.len() {
        return Err(Error::invalid(
            "trajectory",
            "end-to-end norm vanishes at every snapshot",
        ));
    }
    Ok(Kappas {
        kappa1,
        kappa2,
        delta,
        u0: combined_strength(&first.layer_norms, delta),
        excluded,
    })
}

/// Parameters of `τ dU/dt ≤ L U^{2(1−1/L)} [M − κ₂U]`, `M = (2κ₁ + 1)|Σ_yx|_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub depth: usize,
    pub kappa1: f64,
    pub kappa2: f64,
    pub sigma_yx_norm: f64,
    pub delta: f64,
    pub u0: f64,
    pub tau: f64,
}

impl BoundParams {
    pub fn from_kappas(depth: usize, k: &Kappas, sigma_yx_norm: f64, tau: f64) -> Self {
        Self {
            depth,
            kappa1: k.kappa1,
            kappa2: k.kappa2,
            sigma_yx_norm,
            delta: k.delta,
            u0: k.u0,
            tau,
        }
    }

    /// Parameters with `M` given directly (`sigma_yx_norm = M / (2κ₁ + 1)`).
    pub fn with_m(depth: usize, kappa1: f64, kappa2: f64, m: f64, u0: f64) -> Self {
        Self {
            depth,
            kappa1,
            kappa2,
            sigma_yx_norm: m / (2.0 * kappa1 + 1.0),
            delta: 0.0,
            u0,
            tau: 1.0,
        }
    }

    pub fn m(&self) -> f64 {
        (2.0 * self.kappa1 + 1.0) * self.sigma_yx_norm
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be positive, got {v}")))
            }
        };
        if self.depth < 1 {
            return Err(Error::invalid("L", "must be at least 1"));
        }
        positive("kappa1", self.kappa1)?;
        positive("sigma_yx_norm", self.sigma_yx_norm)?;
        positive("u0", self.u0)?;
        positive("tau", self.tau)?;
        if !(0.0..=1.0).contains(&self.kappa2) {
            return Err(Error::invalid(
                "kappa2",
                format!("must lie in [0, 1], got {}", self.kappa2),
            ));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::invalid("delta", "must be non-negative"));
        }
        if self.kappa2 > 0.0 && self.u0 > self.m() / self.kappa2 {
            return Err(Error::invalid(
                "u0",
                format!("must not exceed M/kappa2 = {}", self.m() / self.kappa2),
            ));
        }
        Ok(())
    }

    /// `L U^{2(1−1/L)} [M − κ₂U]`, the bound on `τ dU/dt`.
    pub fn rhs(&self, u: f64) -> f64 {
        let l = self.depth as f64;
        l * u.powf(2.0 * (1.0 - 1.0 / l)) * (self.m() - self.kappa2 * u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSeries {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
}

impl BoundSeries {
    /// First time `U` reaches `level`, linearly interpolated.
    pub fn time_to_reach(&self, level: f64) -> Option<f64> {
        if self.u.first().is_some_and(|&u| u >= level) {
            return Some(self.times[0]);
        }
        self.u.windows(2).enumerate().find_map(|(i, w)| {
            (w[1] >= level).then(|| {
                let frac = (level - w[0]) / (w[1] - w[0]);
                self.times[i] + frac * (self.times[i + 1] - self.times[i])
            })
        })
    }

    pub fn max_slope(&self) -> f64 {
        self.u
            .windows(2)
            .zip(self.times.windows(2))
            .map(|(u, t)| (u[1] - u[0]) / (t[1] - t[0]))
            .fold(0.0, f64::max)
    }
}

/// Forward-Euler integration of the bound at equality.
pub fn bound_trajectory(p: &BoundParams, dt: f64, steps: usize) -> Result<BoundSeries> {
    p.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut u = Vec::with_capacity(steps + 1);
    let mut cur = p.u0;
    times.push(0.0);
    u.push(cur);
    for step in 1..=steps {
        cur += dt / p.tau * p.rhs(cur);
        if !cur.is_finite() || cur.abs() > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                step,
                reason: format!("combined strength reached {cur:e}"),
                partial: Box::new(None),
            });
        }
        times.push(step as f64 * dt);
        u.push(cur);
    }
    Ok(BoundSeries { times, u })
}

fn check_t_u_domain(p: &BoundParams, u: f64) -> Result<f64> {
    p.validate()?;
    let m = p.m();
    if !(u >= p.u0 && u < m) {
        return Err(Error::Domain {
            what: "target combined strength",
            value: u,
            domain: format!("[{}, {})", p.u0, m),
        });
    }
    Ok(m)
}

/// `(κ₂τ/L)[(1/M²) log(U(M−U₀)/(U₀(M−U))) − 1/(MU) + 1/(MU₀)]`, the stated
/// lower bound on the time to reach `u` in the deep limit.
pub fn t_u_lower_bound(p: &BoundParams, u: f64) -> Result<f64> {
    let m = check_t_u_domain(p, u)?;
    let u0 = p.u0;
    let l = p.depth as f64;
    let bracket = ((u * (m - u0)) / (u0 * (m - u))).ln() / (m * m) - 1.0 / (m * u) + 1.0 / (m * u0);
    Ok(p.kappa2 * p.tau / l * bracket)
}

/// Exact time for `τ dU/dt = L U² (M − κ₂U)` to go from `U₀` to `u`:
/// `(τ/L)[(κ₂/M²) log(U(M−κ₂U₀)/(U₀(M−κ₂U))) − 1/(MU) + 1/(MU₀)]`.
/// Coincides with [`t_u_lower_bound`] when `κ₂ = 1`.
pub fn t_u_deep_limit(p: &BoundParams, u: f64) -> Result<f64> {
    let m = check_t_u_domain(p, u)?;
    let (u0, k) = (p.u0, p.kappa2);
    let l = p.depth as f64;
    let log = ((u * (m - k * u0)) / (u0 * (m - k * u))).ln();
    Ok(p.tau / l * (k / (m * m) * log - 1.0 / (m * u) + 1.0 / (m * u0)))
}

/// Measured forward differences of `U(t)` against the bound's right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    /// Start time of each interval.
    pub times: Vec<f64>,
    pub measured: Vec<f64>,
    /// `rhs(U(t)) / τ` at the start of each interval.
    pub bound: Vec<f64>,
    /// `max_t (measured − bound) / |bound|`; negative when the bound holds with room.
    pub max_relative_excess: f64,
}

/// Checks a recorded trajectory (time in units of τ, so `τ = 1`) against the
/// bound with the given parameters.
pub fn check_bound(traj: &Trajectory, p: &BoundParams) -> Result<BoundCheck> {
    if traj.len() < 2 {
        return Err(Error::InsufficientSnapshots {
            needed: 2,
            got: traj.len(),
        });
    }
    let u: Vec<f64> = traj
        .snapshots
        .iter()
        .map(|s| combined_strength(&s.layer_norms, p.delta))
        .collect();
    let t = traj.times();
    let mut check = BoundCheck {
        times: Vec::new(),
        measured: Vec::new(),
        bound: Vec::new(),
        max_relative_excess: f64::NEG_INFINITY,
    };
    for i in 0..u.len() - 1 {
        let slope = (u[i + 1] - u[i]) / (t[i + 1] - t[i]);
        let bound = p.rhs(u[i]) / p.tau;
        let excess = (slope - bound) / bound.abs().max(f64::MIN_POSITIVE);
        check.max_relative_excess = check.max_relative_excess.max(excess);
        check.times.push(t[i]);
        check.measured.push(slope);
        check.bound.push(bound);
    }
    Ok(check)
}
