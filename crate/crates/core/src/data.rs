//! Synthetic regression data, whitening, and the IDX reader used for MNIST.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::init::random_orthogonal;
use crate::linalg::{matmul, Matrix};
use crate::relu::ClassBatch;

/// `whitened` is only claimed when the sample second moment is this close to `I`.
pub const WHITENED_TOLERANCE: f64 = 1e-8;
/// Smallest covariance eigenvalue `whiten` accepts.
pub const MIN_EIGENVALUE: f64 = 1e-10;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Paired samples; row `i` of `inputs`/`targets` is `x_iᵀ`/`y_iᵀ`.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Matrix,
    targets: Matrix,
    whitened: bool,
    teacher: Option<Matrix>,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::shape(
                "dataset targets",
                format!("{} rows", inputs.rows()),
                format!("{} rows", targets.rows()),
            ));
        }
        let whitened = second_moment_deviation(&inputs) <= WHITENED_TOLERANCE;
        Ok(Self {
            inputs,
            targets,
            whitened,
            teacher: None,
            seed: None,
            notes: Vec::new(),
        })
    }

    /// Attaches the `k×d` map that generated the targets; `whiten` then
    /// regenerates targets from it.
    pub fn with_teacher(mut self, teacher: Matrix) -> Result<Self> {
        if teacher.shape() != (self.output_dim(), self.input_dim()) {
            return Err(Error::shape(
                "teacher",
                format!("{}x{}", self.output_dim(), self.input_dim()),
                format!("{:?}", teacher.shape()),
            ));
        }
        self.teacher = Some(teacher);
        Ok(self)
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn teacher(&self) -> Option<&Matrix> {
        self.teacher.as_ref()
    }

    pub fn is_whitened(&self) -> bool {
        self.whitened
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// CSV with header `x0..x{d-1},y0..y{k-1}`, floats in 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.input_dim())
            .map(|j| format!("x{j}"))
            .chain((0..self.output_dim()).map(|j| format!("y{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .input(i)
                .iter()
                .chain(self.target(i))
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `(1/m) XᵀX` for row-sample data.
pub fn second_moment(inputs: &Matrix) -> Matrix {
    inputs.gram_cols().scale(1.0 / inputs.rows() as f64)
}

fn second_moment_deviation(inputs: &Matrix) -> f64 {
    let s = second_moment(inputs);
    s.sub(&Matrix::identity(s.rows()))
        .expect("square")
        .frobenius_norm()
}

/// Maps inputs through `Σ_xx^{-1/2}` so their second moment becomes `I_d`.
pub fn whiten(data: &Dataset) -> Result<Dataset> {
    let sigma_xx = second_moment(&data.inputs);
    let svd = sigma_xx.svd()?;
    let min_eig = *svd.sigma.last().expect("d >= 1");
    if min_eig <= MIN_EIGENVALUE {
        return Err(Error::RankDeficient {
            eigenvalue: min_eig,
            threshold: MIN_EIGENVALUE,
        });
    }
    // Σ_xx is symmetric positive definite, so its singular vectors are its eigenvectors.
    let v = &svd.v;
    let inv_sqrt: Vec<f64> = svd.sigma.iter().map(|s| 1.0 / s.sqrt()).collect();
    let d = sigma_xx.rows();
    let mut scaled = v.clone();
    for i in 0..d {
        for (j, f) in inv_sqrt.iter().enumerate() {
            scaled[(i, j)] *= f;
        }
    }
    let transform = matmul(&scaled, &v.transpose())?;
    let inputs = matmul(&data.inputs, &transform)?;

    let mut notes = data.notes.clone();
    let targets = match &data.teacher {
        Some(t) => matmul(&inputs, &t.transpose())?,
        None => {
            notes.push("whiten: no teacher attached, targets left unchanged".to_string());
            data.targets.clone()
        }
    };
    let mut out = Dataset::new(inputs, targets)?;
    out.teacher = data.teacher.clone();
    out.seed = data.seed;
    out.notes = notes;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: usize,
    pub samples_per_component: usize,
    pub dim: usize,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("components", self.components),
            ("samples_per_component", self.samples_per_component),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Samples from a Gaussian mixture together with the parameters that produced them.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    /// `m×d`, components stacked in order.
    pub inputs: Matrix,
    pub component: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
}

/// Means uniform in `[-3, 3]^d`, covariances `R·diag(s)·Rᵀ` with `R` random
/// orthogonal and `s` uniform in `[0.5, 2]`.
pub fn gen_gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<MixtureSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let m = spec.components * spec.samples_per_component;
    let mut inputs = Matrix::zeros(m, d);
    let mut component = Vec::with_capacity(m);
    let mut means = Vec::with_capacity(spec.components);
    let mut covariances = Vec::with_capacity(spec.components);

    for c in 0..spec.components {
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let rot = random_orthogonal(d, &mut rng);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..=2.0)).collect();
        // x = mean + R·diag(√s)·z
        let mut factor = rot.clone();
        for i in 0..d {
            for (j, s) in scales.iter().enumerate() {
                factor[(i, j)] *= s.sqrt();
            }
        }
        for n in 0..spec.samples_per_component {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = factor.matvec(&z)?;
            let row = inputs.row_mut(c * spec.samples_per_component + n);
            for ((r, xi), mu) in row.iter_mut().zip(&x).zip(&mean) {
                *r = xi + mu;
            }
            component.push(c);
        }
        covariances.push(matmul(&factor, &factor.transpose())?);
        means.push(mean);
    }
    Ok(MixtureSample {
        inputs,
        component,
        means,
        covariances,
    })
}

/// Teacher entries are i.i.d. `N(0, 1/d)`.
pub fn gen_linear_targets(inputs: &Matrix, k: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = inputs.cols();
    let std = (1.0 / d as f64).sqrt();
    let teacher = Matrix::from_fn(k, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        std * z
    });
    let targets = matmul(inputs, &teacher.transpose())?;
    Ok((targets, teacher))
}

/// Mixture inputs, random linear teacher, then optional whitening with the
/// targets regenerated from the teacher afterwards (so `Σ_yx = teacher`).
pub fn linear_teacher_task(
    spec: &MixtureSpec,
    k: usize,
    seed: u64,
    whitened: bool,
) -> Result<Dataset> {
    let mix = gen_gaussian_mixture(spec, seed)?;
    let (targets, teacher) = gen_linear_targets(&mix.inputs, k, seed.wrapping_add(0x5eed))?;
    let mut data = Dataset::new(mix.inputs, targets)?.with_teacher(teacher)?;
    data.seed = Some(seed);
    if whitened {
        data = whiten(&data)?;
    }
    Ok(data)
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated payload, need {expected} bytes, file has {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..10")]
    BadLabel { index: usize, label: u8 },
}

fn read_file(path: &Path) -> std::result::Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header(
    bytes: &[u8],
    path: &Path,
    fields: usize,
    magic: u32,
) -> std::result::Result<Vec<u32>, IdxError> {
    let need = 4 * fields;
    if bytes.len() >= 4 {
        let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if found != magic {
            return Err(IdxError::BadMagic {
                path: path.to_path_buf(),
                expected: magic,
                found,
            });
        }
    }
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            got: bytes.len(),
        });
    }
    Ok(bytes[..need]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads an IDX image/label pair into a one-hot batch over 10 classes with
/// pixels scaled to `[0, 1]`. `limit` keeps only the first `n` samples.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<ClassBatch> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let ih = header(&img, images_path, 4, IDX_IMAGE_MAGIC)?;
    let (count, rows, cols) = (ih[1] as usize, ih[2] as usize, ih[3] as usize);
    let lh = header(&lab, labels_path, 2, IDX_LABEL_MAGIC)?;
    let label_count = lh[1] as usize;
    if count != label_count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        }
        .into());
    }
    let pixels = rows * cols;
    let need = 16 + count * pixels;
    if img.len() < need {
        return Err(IdxError::Truncated {
            path: images_path.to_path_buf(),
            expected: need,
            got: img.len(),
        }
        .into());
    }
    if lab.len() < 8 + count {
        return Err(IdxError::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8 + count,
            got: lab.len(),
        }
        .into());
    }
    let n = limit.map_or(count, |l| l.min(count));
    if n == 0 || pixels == 0 {
        return Err(Error::EmptyInput("idx dataset"));
    }

    let data: Vec<f64> = img[16..16 + n * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let mut labels = Vec::with_capacity(n);
    for (index, &label) in lab[8..8 + n].iter().enumerate() {
        if label > 9 {
            return Err(IdxError::BadLabel { index, label }.into());
        }
        labels.push(label as usize);
    }
    ClassBatch::from_labels(Matrix::from_vec(n, pixels, data)?, &labels, 10)
}

/// Writes an IDX image file: header `[2051, count, rows, cols]` then raw bytes.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
) -> io::Result<()> {
    let mut buf = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [
        IDX_IMAGE_MAGIC,
        images.len() as u32,
        rows as u32,
        cols as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for im in images {
        assert_eq!(im.len(), rows * cols, "image size mismatch");
        buf.extend_from_slice(im);
    }
    std::fs::write(path, buf)
}

/// Writes an IDX label file: header `[2049, count]` then one byte per label.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABEL_MAGIC, labels.len() as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(labels);
    std::fs::write(path, buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lnn::covariance;

    fn spec() -> MixtureSpec {
        MixtureSpec {
            components: 3,
            samples_per_component: 400,
            dim: 10,
        }
    }

    #[test]
    fn mixture_shape_and_determinism() {
        let a = gen_gaussian_mixture(&spec(), 3).unwrap();
        assert_eq!(a.inputs.shape(), (1200, 10));
        let b = gen_gaussian_mixture(&spec(), 3).unwrap();
        assert_eq!(a.inputs, b.inputs);
        let c = gen_gaussian_mixture(&spec(), 4).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn component_means_within_monte_carlo_bound() {
        let mix = gen_gaussian_mixture(&spec(), 17).unwrap();
        let n = 400.0_f64;
        for c in 0..3 {
            for j in 0..10 {
                let sample_mean: f64 =
                    (0..400).map(|i| mix.inputs[(c * 400 + i, j)]).sum::<f64>() / n;
                let sd = mix.covariances[c][(j, j)].sqrt();
                assert!(
                    (sample_mean - mix.means[c][j]).abs() <= 4.0 * sd / n.sqrt(),
                    "component {c} coordinate {j}"
                );
            }
        }
    }

    #[test]
    fn zero_teacher_gives_zero_targets() {
        let x = gen_gaussian_mixture(&spec(), 1).unwrap().inputs;
        let zero = Matrix::zeros(3, 10);
        let y = matmul(&x, &zero.transpose()).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        let (t, teacher) = gen_linear_targets(&x, 3, 2).unwrap();
        assert_eq!(t.shape(), (1200, 3));
        assert_eq!(teacher.shape(), (3, 10));
    }

    #[test]
    fn whitened_mixture_has_identity_covariance_and_teacher_cross_covariance() {
        let data = linear_teacher_task(&spec(), 3, 5, true).unwrap();
        assert!(data.is_whitened());
        let cov = covariance(&data).unwrap();
        assert!(cov.whitened);
        let dev = cov
            .sigma_xx
            .sub(&Matrix::identity(10))
            .unwrap()
            .frobenius_norm();
        assert!(dev <= 1e-8, "{dev}");
        let gap = cov
            .sigma_yx
            .sub(data.teacher().unwrap())
            .unwrap()
            .frobenius_norm();
        assert!(gap <= 1e-8, "{gap}");
    }

    #[test]
    fn whitening_white_data_is_a_no_op_and_idempotent() {
        let data = linear_teacher_task(&spec(), 3, 6, true).unwrap();
        let again = whiten(&data).unwrap();
        let diff = again.inputs().sub(data.inputs()).unwrap().max_abs();
        assert!(diff <= 1e-8, "{diff}");

        // Exactly white data: scaled identity rows.
        let m = 4;
        let x = Matrix::identity(m).scale((m as f64).sqrt());
        let white = Dataset::new(x.clone(), Matrix::zeros(m, 1)).unwrap();
        assert!(white.is_whitened());
        let w = whiten(&white).unwrap();
        assert!(w.inputs().sub(&x).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn whitening_rejects_more_dims_than_samples() {
        let x = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 + 0.5);
        let data = Dataset::new(x, Matrix::zeros(3, 1)).unwrap();
        assert!(matches!(whiten(&data), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn whitening_without_teacher_keeps_targets_and_notes_it() {
        let mix = gen_gaussian_mixture(&spec(), 8).unwrap();
        let y = Matrix::from_fn(1200, 2, |i, j| (i + j) as f64);
        let data = Dataset::new(mix.inputs, y.clone()).unwrap();
        let w = whiten(&data).unwrap();
        assert_eq!(w.targets(), &y);
        assert_eq!(w.notes.len(), 1);
    }

    #[test]
    fn csv_header_and_rows() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[0.5]]).unwrap();
        let mut out = Vec::new();
        Dataset::new(x, y).unwrap().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1,y0"));
        assert_eq!(
            lines.next(),
            Some("1.0000000000000000e0,2.0000000000000000e0,5.0000000000000000e-1")
        );
    }

    mod idx {
        use super::*;

        fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
            let images = dir.join("images.idx");
            let labels = dir.join("labels.idx");
            write_idx_images(&images, 2, 2, &[vec![0, 255, 51, 102], vec![255, 0, 0, 1]]).unwrap();
            write_idx_labels(&labels, &[7, 2]).unwrap();
            (images, labels)
        }

        #[test]
        fn handcrafted_bytes_parse_exactly() {
            let dir = tempfile::tempdir().unwrap();
            let (images, labels) = fixture(dir.path());

            let raw = std::fs::read(&images).unwrap();
            assert_eq!(&raw[..4], &[0, 0, 8, 3]);
            assert_eq!(raw.len(), 16 + 8);

            let batch = load_idx(&images, &labels, None).unwrap();
            assert_eq!(batch.len(), 2);
            assert_eq!(batch.inputs().row(0), &[0.0, 1.0, 0.2, 0.4]);
            assert_eq!(batch.inputs().row(1), &[1.0, 0.0, 0.0, 1.0 / 255.0]);
            assert_eq!(batch.labels(), &[7, 2]);
            assert_eq!(batch.targets().row(0)[7], 1.0);
            assert_eq!(batch.targets().row(0).iter().sum::<f64>(), 1.0);

            let prefix = load_idx(&images, &labels, Some(1)).unwrap();
            assert_eq!(prefix.len(), 1);
        }

        #[test]
        fn wrong_magic_is_reported() {
            let dir = tempfile::tempdir().unwrap();
            let (images, labels) = fixture(dir.path());
            let err = load_idx(&labels, &images, None).unwrap_err();
            assert!(matches!(
                err,
                Error::Idx(IdxError::BadMagic {
                    expected: 2051,
                    found: 2049,
                    ..
                })
            ));
        }

        #[test]
        fn truncated_payload_is_reported() {
            let dir = tempfile::tempdir().unwrap();
            let (images, labels) = fixture(dir.path());
            let mut raw = std::fs::read(&images).unwrap();
            raw.truncate(raw.len() - 3);
            std::fs::write(&images, raw).unwrap();
            let err = load_idx(&images, &labels, None).unwrap_err();
            assert!(matches!(
                err,
                Error::Idx(IdxError::Truncated {
                    expected: 24,
                    got: 21,
                    ..
                })
            ));
        }

        #[test]
        fn count_mismatch_is_reported() {
            let dir = tempfile::tempdir().unwrap();
            let (images, labels) = fixture(dir.path());
            write_idx_labels(&labels, &[1, 2, 3]).unwrap();
            let err = load_idx(&images, &labels, None).unwrap_err();
            assert!(matches!(
                err,
                Error::Idx(IdxError::CountMismatch {
                    images: 2,
                    labels: 3
                })
            ));
        }

        #[test]
        fn missing_file_is_io_error() {
            let dir = tempfile::tempdir().unwrap();
            let err =
                load_idx(dir.path().join("nope"), dir.path().join("nope2"), None).unwrap_err();
            assert!(matches!(err, Error::Idx(IdxError::Io { .. })));
        }
    }
}
