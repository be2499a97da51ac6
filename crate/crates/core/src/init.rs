//! Weight initialisation schemes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, orthonormal_completion, qr, svd, Matrix};
use crate::lnn::{CovarianceSummary, LinearNet};

/// Relative tolerance below which a singular value of `Σ_yx` counts as zero.
pub const MODE_RANK_TOLERANCE: f64 = 1e-10;

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of `R` made positive.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let (mut q, r) = qr(&g).expect("square input");
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(
            "dims",
            format!("need at least 2 entries, got {}", dims.len()),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("dims", "all widths must be positive"));
    }
    Ok(())
}

/// Entries of `W_l` i.i.d. `N(0, β/(n_l n_{l+1}))`, so `E|W_l|_F² = β`.
pub fn glorot_init(dims: &[usize], beta: f64, seed: u64) -> Result<LinearNet> {
    check_dims(dims)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::invalid(
            "beta",
            format!("must be positive, got {beta}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = dims
        .windows(2)
        .map(|d| {
            let std = (beta / (d[0] * d[1]) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(d[1], d[0], |_, _| normal.sample(&mut rng))
        })
        .collect();
    LinearNet::new(weights)
}

/// `W_l = Q_{l+1} S Q_lᵀ` with random orthogonal `Q_l` shared between adjacent
/// layers and the same singular values `S` everywhere, so every conservation
/// matrix vanishes.
pub fn balanced_orthogonal_init(
    dims: &[usize],
    sigma_profile: &[f64],
    seed: u64,
) -> Result<LinearNet> {
    check_dims(dims)?;
    let min_width = *dims.iter().min().expect("non-empty");
    if sigma_profile.len() > min_width {
        return Err(Error::shape(
            "sigma profile length",
            format!("at most {min_width} (narrowest layer)"),
            sigma_profile.len(),
        ));
    }
    if sigma_profile.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid(
            "sigma_profile",
            "entries must be finite and non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases: Vec<Matrix> = dims
        .iter()
        .map(|&n| random_orthogonal(n, &mut rng))
        .collect();
    let strengths = vec![sigma_profile.to_vec(); dims.len() - 1];
    LinearNet::new(chain(dims, &bases, &strengths))
}

fn chain(dims: &[usize], bases: &[Matrix], strengths: &[Vec<f64>]) -> Vec<Matrix> {
    (0..dims.len() - 1)
        .map(|l| {
            let s = Matrix::rect_diag(dims[l + 1], dims[l], &strengths[l]);
            let left = matmul(&bases[l + 1], &s).expect("conforming");
            matmul(&left, &bases[l].transpose()).expect("conforming")
        })
        .collect()
}

/// Orthogonal bases that diagonalise every layer of a data-aligned net.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeAlignment {
    /// `bases[l]` is `n_l × n_l` orthogonal; `bases[0]` extends `V_xx` and
    /// `bases[L]` extends `U_yy`.
    pub bases: Vec<Matrix>,
    /// Mode strengths `s_k` of `Σ_yx` for the tracked modes.
    pub targets: Vec<f64>,
}

impl ModeAlignment {
    pub fn modes(&self) -> usize {
        self.targets.len()
    }

    pub fn depth(&self) -> usize {
        self.bases.len() - 1
    }
}

/// Every layer starts with strength `sigma0` on each tracked mode.
pub fn saxe_aligned_init(
    dims: &[usize],
    cov: &CovarianceSummary,
    sigma0: f64,
    seed: u64,
) -> Result<(LinearNet, ModeAlignment)> {
    check_dims(dims)?;
    saxe_aligned_init_layered(dims, cov, &vec![sigma0; dims.len() - 1], seed)
}

/// Aligned init where layer `l` starts with strength `layer_sigma[l]` on every
/// tracked mode.
pub fn saxe_aligned_init_layered(
    dims: &[usize],
    cov: &CovarianceSummary,
    layer_sigma: &[f64],
    seed: u64,
) -> Result<(LinearNet, ModeAlignment)> {
    check_dims(dims)?;
    if layer_sigma.len() != dims.len() - 1 {
        return Err(Error::shape(
            "layer strengths",
            dims.len() - 1,
            layer_sigma.len(),
        ));
    }
    if layer_sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid("sigma0", "mode strengths must be positive"));
    }
    if !cov.whitened {
        return Err(Error::NotWhitened {
            deviation: cov.xx_deviation(),
        });
    }
    let (k, d) = cov.sigma_yx.shape();
    if d != dims[0] || k != dims[dims.len() - 1] {
        return Err(Error::shape(
            "sigma_yx",
            format!("({}, {})", dims[dims.len() - 1], dims[0]),
            format!("({k}, {d})"),
        ));
    }
    let dec = svd(&cov.sigma_yx)?;
    let rank = dec.numerical_rank(MODE_RANK_TOLERANCE);
    let min_width = *dims.iter().min().expect("non-empty");
    let modes = rank.min(min_width);
    if modes == 0 {
        return Err(Error::invalid(
            "sigma_yx",
            "has no mode above the rank tolerance",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = dims.len() - 1;
    let bases: Vec<Matrix> = (0..dims.len())
        .map(|l| {
            if l == 0 {
                orthonormal_completion(&dec.v)
            } else if l == last {
                orthonormal_completion(&dec.u)
            } else {
                random_orthogonal(dims[l], &mut rng)
            }
        })
        .collect();
    let strengths: Vec<Vec<f64>> = layer_sigma.iter().map(|&s| vec![s; modes]).collect();
    let net = LinearNet::new(chain(dims, &bases, &strengths))?;
    Ok((
        net,
        ModeAlignment {
            bases,
            targets: dec.sigma[..modes].to_vec(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Glorot,
    BalancedOrthogonal,
    SaxeAligned,
}

/// Serialized init choice. Only the fields of the chosen scheme are read;
/// `seed` falls back to the caller's seed when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: InitScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_profile: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl InitSpec {
    pub fn glorot(beta: f64) -> Self {
        Self {
            scheme: InitScheme::Glorot,
            beta: Some(beta),
            sigma0: None,
            sigma_profile: None,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |name: &'static str| {
            Error::invalid(name, format!("required for scheme {:?}", self.scheme))
        };
        match self.scheme {
            InitScheme::Glorot => {
                self.beta.ok_or_else(|| missing("beta"))?;
            }
            InitScheme::BalancedOrthogonal => {
                self.sigma_profile
                    .as_ref()
                    .ok_or_else(|| missing("sigma_profile"))?;
            }
            InitScheme::SaxeAligned => {
                self.sigma0.ok_or_else(|| missing("sigma0"))?;
            }
        }
        Ok(())
    }

    /// `cov` is required for `saxe_aligned` only.
    pub fn build(
        &self,
        dims: &[usize],
        cov: Option<&CovarianceSummary>,
        default_seed: u64,
    ) -> Result<(LinearNet, Option<ModeAlignment>)> {
        self.validate()?;
        let seed = self.seed.unwrap_or(default_seed);
        match self.scheme {
            InitScheme::Glorot => Ok((
                glorot_init(dims, self.beta.expect("validated"), seed)?,
                None,
            )),
            InitScheme::BalancedOrthogonal => Ok((
                balanced_orthogonal_init(
                    dims,
                    self.sigma_profile.as_deref().expect("validated"),
                    seed,
                )?,
                None,
            )),
            InitScheme::SaxeAligned => {
                let cov = cov.ok_or_else(|| {
                    Error::invalid("init", "saxe_aligned needs the data covariance")
                })?;
                let (net, a) = saxe_aligned_init(dims, cov, self.sigma0.expect("validated"), seed)?;
                Ok((net, Some(a)))
            }
        }
    }
}
