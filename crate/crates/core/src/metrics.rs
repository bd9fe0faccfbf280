//! Image-set quality metrics: global-statistics SSIM and a Fréchet distance between Gaussians
//! fitted to image features.
//!
//! The feature extractors are stand-ins for a pretrained classifier: a PCA of the reference
//! pixels, or a frozen randomly initialised convolution stack. Distances computed with them are
//! only meaningful relative to each other (orderings and gaps between models), never as
//! absolute FID values.
//!
//! All metrics see images in `[0, 1]`; signed or raw batches are converted first.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::rng::{named, stream, Stream};
use crate::tensor::Tensor;

/// Upper bound on the number of reference images each generated image is compared with.
pub const SSIM_REFERENCES: usize = 64;

/// Diagonal loading added to every fitted feature covariance.
pub const DEFAULT_SHRINKAGE: f64 = 1e-6;

/// Feature width of both extractors.
pub const FEATURE_DIM: usize = 64;

/// Eigenvalues above this are treated as round-off and clamped to zero.
const EIGEN_CLAMP: f64 = -1e-6;

/// Caveat attached to every report that contains a Fréchet distance.
pub const EXTRACTOR_NOTE: &str = "fid_like uses a substitute feature extractor (pixel PCA or \
frozen random convolutions), not a pretrained Inception network; absolute values are not \
comparable to published FID scores, only orderings between models are";

/// Stabilising constants of SSIM for pixel values in `[0, L]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimConstants {
    /// `C1 = (0.01·L)²`, `C2 = (0.03·L)²`.
    pub fn for_range(dynamic_range: f64) -> Self {
        Self {
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// SSIM of two equally shaped images from whole-image statistics, averaged over channels.
///
/// `x` and `y` are channel-major (`C×H×W` flattened); the per-channel statistics use the
/// population (1/n) variance and covariance.
pub fn ssim(x: &[f64], y: &[f64], channels: usize, k: SsimConstants) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "ssim",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if channels == 0 || x.is_empty() || x.len() % channels != 0 {
        return Err(Error::contract(format!(
            "{} pixels cannot be split into {channels} channels",
            x.len()
        )));
    }
    let range = 0.0..=k.dynamic_range;
    if let Some(v) = x.iter().chain(y).find(|v| !range.contains(*v)) {
        return Err(Error::contract(format!(
            "pixel value {v} outside [0, {}]",
            k.dynamic_range
        )));
    }
    let plane = x.len() / channels;
    let mut total = 0.0;
    for (xc, yc) in x.chunks_exact(plane).zip(y.chunks_exact(plane)) {
        let n = plane as f64;
        let mx = xc.iter().sum::<f64>() / n;
        let my = yc.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (&a, &b) in xc.iter().zip(yc) {
            let (da, db) = (a - mx, b - my);
            vx += da * da;
            vy += db * db;
            cxy += da * db;
        }
        let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
        total += ((2.0 * mx * my + k.c1) * (2.0 * cxy + k.c2))
            / ((mx * mx + my * my + k.c1) * (vx + vy + k.c2));
    }
    Ok(total / channels as f64)
}

/// Mean over generated images of the mean SSIM against `min(64, |reference|)` reference images
/// drawn without replacement from the metrics stream of `seed`.
pub fn set_ssim(generated: &ImageBatch, reference: &ImageBatch, seed: u64) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::contract(
            "set_ssim needs non-empty generated and reference sets",
        ));
    }
    check_same_images("set_ssim", generated, reference)?;
    let generated = generated.to_unit();
    let reference = reference.to_unit();
    let k = SSIM_REFERENCES.min(reference.len());
    let mut rng = stream(seed, Stream::Metrics);
    let mut picks = index::sample(&mut rng, reference.len(), k).into_vec();
    picks.sort_unstable();
    let consts = SsimConstants::default();
    let c = generated.channels();
    let mut total = 0.0;
    for g in 0..generated.len() {
        let mut per_image = 0.0;
        for &r in &picks {
            per_image += ssim(generated.image(g), reference.image(r), c, consts)?;
        }
        total += per_image / k as f64;
    }
    Ok(total / generated.len() as f64)
}

fn check_same_images(op: &'static str, a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    if a.image_shape() != b.image_shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.image_shape().to_vec(),
            rhs: b.image_shape().to_vec(),
        });
    }
    Ok(())
}

/// A Gaussian `N(μ, Σ)` over `dim`-dimensional features; `cov` is row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Dimension {
                op: "GaussianStats",
                lhs: vec![d, d],
                rhs: vec![cov.len()],
            });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::contract(format!(
                        "covariance not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance of `n` row-major feature vectors of width `dim`,
    /// plus `shrinkage·I`.
    ///
    /// Without shrinkage at least `dim + 1` samples are required.
    pub fn fit(features: &[f64], dim: usize, shrinkage: f64) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(Error::contract(format!(
                "{} feature values do not form rows of width {dim}",
                features.len()
            )));
        }
        if !(shrinkage >= 0.0) {
            return Err(Error::contract(format!(
                "shrinkage must be ≥ 0, got {shrinkage}"
            )));
        }
        let n = features.len() / dim;
        if n < 2 {
            return Err(Error::contract(format!(
                "need at least 2 samples to fit a covariance, got {n}"
            )));
        }
        if shrinkage == 0.0 && n < dim + 1 {
            return Err(Error::contract(format!(
                "{n} samples cannot give a full-rank {dim}-dimensional covariance without shrinkage"
            )));
        }
        let mut mean = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centred: Vec<f64> = features
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        let mut cov = vec![0.0; dim * dim];
        gemm(dim, n, dim, &centred, true, &centred, false, 0.0, &mut cov);
        let scale = 1.0 / (n - 1) as f64;
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]) * scale;
                cov[i * dim + j] = s;
                cov[j * dim + i] = s;
            }
            cov[i * dim + i] = cov[i * dim + i] * scale + shrinkage;
        }
        Ok(Self { mean, cov })
    }
}

fn symmetric_eigen(a: &[f64], d: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (a[i * d + j] + a[j * d + i]));
    SymmetricEigen::new(m)
}

fn clamp_eigenvalue(v: f64, what: &str) -> Result<f64> {
    if v < EIGEN_CLAMP {
        return Err(Error::Numerical(format!(
            "{what} has eigenvalue {v:e}, not positive semi-definite"
        )));
    }
    Ok(v.max(0.0))
}

/// Principal square root of a symmetric PSD `d × d` matrix (row-major), via its
/// eigendecomposition. Eigenvalues in `[−1e-6, 0)` are clamped to zero.
pub fn psd_sqrt(a: &[f64], d: usize) -> Result<Vec<f64>> {
    if a.len() != d * d {
        return Err(Error::Dimension {
            op: "psd_sqrt",
            lhs: vec![d, d],
            rhs: vec![a.len()],
        });
    }
    let eig = symmetric_eigen(a, d);
    let mut roots = Vec::with_capacity(d);
    for &v in eig.eigenvalues.iter() {
        roots.push(clamp_eigenvalue(v, "matrix")?.sqrt());
    }
    let q = &eig.eigenvectors;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..d).map(|k| q[(i, k)] * roots[k] * q[(j, k)]).sum();
            out[i * d + j] = s;
            out[j * d + i] = s;
        }
    }
    Ok(out)
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at zero.
///
/// The trace of the cross term is the sum of square roots of the eigenvalues of the symmetric
/// matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which shares its spectrum with `Σ_a Σ_b`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Dimension {
            op: "frechet_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let trace = |c: &[f64]| (0..d).map(|i| c[i * d + i]).sum::<f64>();
    let root_a = psd_sqrt(&a.cov, d)?;
    let mut tmp = vec![0.0; d * d];
    let mut inner = vec![0.0; d * d];
    gemm(d, d, d, &root_a, false, &b.cov, false, 0.0, &mut tmp);
    gemm(d, d, d, &tmp, false, &root_a, false, 0.0, &mut inner);
    let eig = symmetric_eigen(&inner, d);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        cross += clamp_eigenvalue(v, "Σ_a^{1/2} Σ_b Σ_a^{1/2}")?.sqrt();
    }
    let value = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross;
    if value < EIGEN_CLAMP || !value.is_finite() {
        return Err(Error::Numerical(format!(
            "Fréchet distance evaluated to {value:e}"
        )));
    }
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Flattened pixels projected onto the leading principal axes of the reference set.
    PixelPca,
    /// Three frozen random stride-2 convolutions with ReLU, then global average pooling.
    FixedRandomConv,
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_pca" => Ok(Self::PixelPca),
            "fixed_random_conv" => Ok(Self::FixedRandomConv),
            other => Err(Error::contract(format!(
                "unknown feature extractor {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PixelPca => "pixel_pca",
            Self::FixedRandomConv => "fixed_random_conv",
        })
    }
}

/// Which extractor, its output width and the seed of any random weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub dim: usize,
    pub seed: u64,
}

impl FeatureExtractor {
    pub fn new(kind: ExtractorKind, seed: u64) -> Self {
        Self {
            kind,
            dim: FEATURE_DIM,
            seed,
        }
    }

    /// Prepare the extractor for one reference set (PCA is fitted on it; the convolution stack
    /// only depends on the seed).
    pub fn fit(&self, reference: &ImageBatch) -> Result<FittedExtractor> {
        if self.dim == 0 {
            return Err(Error::contract("feature dimension must be positive"));
        }
        if reference.is_empty() {
            return Err(Error::contract(
                "cannot fit a feature extractor on an empty set",
            ));
        }
        let reference = reference.to_unit();
        let shape = reference.image_shape();
        let inner = match self.kind {
            ExtractorKind::PixelPca => Fitted::Pca(Pca::fit(&reference, self.dim)?),
            ExtractorKind::FixedRandomConv => {
                Fitted::Conv(RandomConv::new(shape[0], self.dim, self.seed))
            }
        };
        Ok(FittedExtractor {
            dim: self.dim,
            image_shape: shape,
            inner,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FittedExtractor {
    dim: usize,
    image_shape: [usize; 3],
    inner: Fitted,
}

#[derive(Debug, Clone)]
enum Fitted {
    Pca(Pca),
    Conv(RandomConv),
}

impl FittedExtractor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `N × dim` features of `images` (mapped to `[0, 1]` first).
    pub fn extract(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        if images.image_shape() != self.image_shape {
            return Err(Error::Dimension {
                op: "feature extraction",
                lhs: self.image_shape.to_vec(),
                rhs: images.image_shape().to_vec(),
            });
        }
        let images = images.to_unit();
        match &self.inner {
            Fitted::Pca(p) => Ok(p.project(&images)),
            Fitted::Conv(c) => c.apply(&images),
        }
    }
}

#[derive(Debug, Clone)]
struct Pca {
    mean: Vec<f64>,
    /// `pixels × dim`, orthonormal columns; columns past the data rank are zero.
    axes: Vec<f64>,
    dim: usize,
}

impl Pca {
    fn fit(reference: &ImageBatch, dim: usize) -> Result<Self> {
        let n = reference.len();
        let p = reference.image_shape().iter().product::<usize>();
        let data = reference.data.data();
        let mut mean = vec![0.0; p];
        for row in data.chunks_exact(p) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let x: Vec<f64> = data
            .chunks_exact(p)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();

        // Eigen-decompose whichever of XᵀX (p×p) and XXᵀ (n×n) is smaller. An eigenvector u of
        // XXᵀ with eigenvalue λ maps to the unit principal axis Xᵀu/√λ.
        let gram = n < p;
        let m = if gram { n } else { p };
        let mut s = vec![0.0; m * m];
        if gram {
            gemm(n, p, n, &x, false, &x, true, 0.0, &mut s);
        } else {
            gemm(p, n, p, &x, true, &x, false, 0.0, &mut s);
        }
        let eig = symmetric_eigen(&s, m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut axes = vec![0.0; p * dim];
        for (col, &k) in order.iter().take(dim).enumerate() {
            let lambda = eig.eigenvalues[k];
            if !(lambda > 1e-10 * top) {
                break;
            }
            let v = eig.eigenvectors.column(k);
            if gram {
                let inv = 1.0 / lambda.sqrt();
                for (i, row) in x.chunks_exact(p).enumerate() {
                    for (j, &xv) in row.iter().enumerate() {
                        axes[j * dim + col] += xv * v[i] * inv;
                    }
                }
            } else {
                for j in 0..p {
                    axes[j * dim + col] = v[j];
                }
            }
        }
        Ok(Self { mean, axes, dim })
    }

    fn project(&self, images: &ImageBatch) -> Vec<f64> {
        let n = images.len();
        let p = self.mean.len();
        let x: Vec<f64> = images
            .data
            .data()
            .chunks_exact(p)
            .flat_map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m))
            .collect();
        let mut out = vec![0.0; n * self.dim];
        gemm(n, p, self.dim, &x, false, &self.axes, false, 0.0, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
struct RandomConv {
    /// `(weight, bias)` per layer; stride 2, padding 1, 3×3 kernels.
    layers: Vec<(Tensor, Tensor)>,
}

impl RandomConv {
    fn new(channels: usize, dim: usize, seed: u64) -> Self {
        let widths = [channels, 16, 32, dim];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (cin, cout) = (w[0], w[1]);
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let mut rng = named(seed, &format!("metrics.conv{i}.weight"));
                let weight =
                    Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.random_range(-bound..bound));
                let mut rng = named(seed, &format!("metrics.conv{i}.bias"));
                let bias = Tensor::from_fn(&[cout], |_| rng.random_range(-0.1..0.1));
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    fn apply(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut h = tape.constant(images.data.clone());
        for (w, b) in &self.layers {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = tape.conv2d(h, w, b, 2, 1)?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok(tape.value(pooled).data().to_vec())
    }
}

/// Fréchet distance between Gaussians fitted to the features of both sets, with
/// [`DEFAULT_SHRINKAGE`].
pub fn fid_like(
    generated: &ImageBatch,
    reference: &ImageBatch,
    fx: &FeatureExtractor,
) -> Result<f64> {
    fid_like_with(generated, reference, fx, DEFAULT_SHRINKAGE)
}

pub fn fid_like_with(
    generated: &ImageBatch,
    reference: &ImageBatch,
    fx: &FeatureExtractor,
    shrinkage: f64,
) -> Result<f64> {
    check_same_images("fid_like", generated, reference)?;
    if shrinkage == 0.0 {
        let need = fx.dim + 1;
        if generated.len() < need || reference.len() < need {
            return Err(Error::contract(format!(
                "fid_like without shrinkage needs ≥ {need} images per side, got {} and {}",
                generated.len(),
                reference.len()
            )));
        }
    }
    let fitted = fx.fit(reference)?;
    let a = GaussianStats::fit(&fitted.extract(generated)?, fx.dim, shrinkage)?;
    let b = GaussianStats::fit(&fitted.extract(reference)?, fx.dim, shrinkage)?;
    frechet_distance(&a, &b)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub class: i64,
    pub model_variant: String,
    pub value: f64,
    pub seed: u64,
    /// Feature extractor behind the value; `None` for pixel-space metrics.
    pub extractor: Option<ExtractorKind>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records always serialise")
    }
}
