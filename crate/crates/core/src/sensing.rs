//! Sensing operators `y = A·x + w`, k-sparse signal generation and
//! restricted-isometry constants.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};

/// Largest number of support sets exact RIP enumeration will visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `n×n` orthogonal matrix.
    OrthonormalSquare,
    /// `m×n`, `m ≥ n`, orthonormal columns.
    TallOrthonormal,
    /// `m×n`, `m < n`, i.i.d. `N(0, 1/m)` entries.
    GaussianFat,
    /// Kept rows of the unitary 2-D DFT, real and imaginary parts stacked.
    FourierMasked,
    /// Explicit dense matrix (identity, estimated operators).
    Dense,
}

impl OperatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "orthonormal" | "orthonormal_square" => Self::OrthonormalSquare,
            "tall" | "tall_orthonormal" => Self::TallOrthonormal,
            "gaussian" | "gaussian_fat" => Self::GaussianFat,
            "fourier" | "fourier_masked" => Self::FourierMasked,
            "dense" => Self::Dense,
            other => return Err(Error::Parameter(format!("unknown operator kind '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::OrthonormalSquare => "orthonormal_square",
            Self::TallOrthonormal => "tall_orthonormal",
            Self::GaussianFat => "gaussian_fat",
            Self::FourierMasked => "fourier_masked",
            Self::Dense => "dense",
        }
    }
}

/// Frequency mask for [`OperatorKind::FourierMasked`] over an `height×width` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierMask {
    pub height: usize,
    pub width: usize,
    /// Sorted flat frequency indices `u·width + v`.
    pub freqs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Dense(Vec<f64>),
    Fourier {
        mask: FourierMask,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    kind: OperatorKind,
    rows: usize,
    cols: usize,
    seed: u64,
    column_normalized: bool,
    repr: Repr,
}

/// Construction options beyond `(kind, m, n, seed)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleOptions {
    /// Rescale Gaussian columns to unit ℓ2 norm.
    pub column_normalized: bool,
}

impl SensingOperator {
    /// Samples an operator; deterministic in `(kind, m, n, seed)`.
    pub fn sample(kind: OperatorKind, m: usize, n: usize, seed: u64) -> Result<Self> {
        Self::sample_with(kind, m, n, seed, SampleOptions::default())
    }

    pub fn sample_with(kind: OperatorKind, m: usize, n: usize, seed: u64, opts: SampleOptions) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Parameter(format!(
                "operator extents must be positive, got {m}x{n}"
            )));
        }
        let mut rng = rng::stream(seed, kind.name(), 0);
        let repr = match kind {
            OperatorKind::OrthonormalSquare => {
                if m != n {
                    return Err(Error::Parameter(format!(
                        "orthonormal square operator needs m = n, got {m}x{n}"
                    )));
                }
                Repr::Dense(linalg::orthonormal_columns(n, n, &mut rng))
            }
            OperatorKind::TallOrthonormal => {
                if m < n {
                    return Err(Error::Parameter(format!(
                        "tall orthonormal operator needs m >= n, got {m}x{n}"
                    )));
                }
                Repr::Dense(linalg::orthonormal_columns(m, n, &mut rng))
            }
            OperatorKind::GaussianFat => {
                if m >= n {
                    return Err(Error::Parameter(format!(
                        "fat Gaussian operator needs m < n, got {m}x{n}"
                    )));
                }
                let mut a = linalg::gaussian(m, n, 1.0 / (m as f64).sqrt(), &mut rng);
                if opts.column_normalized {
                    normalize_columns(m, n, &mut a);
                }
                Repr::Dense(a)
            }
            OperatorKind::FourierMasked => {
                if !m.is_multiple_of(2) || m > 2 * n {
                    return Err(Error::Parameter(format!(
                        "fourier operator needs an even row count at most 2n, got {m} for n = {n}"
                    )));
                }
                let (height, width) = grid_for(n);
                let freqs = sample_mask(height, width, m / 2, &mut rng);
                fourier_repr(FourierMask { height, width, freqs })
            }
            OperatorKind::Dense => {
                return Err(Error::Parameter("dense operators are built with from_dense".into()));
            }
        };
        Ok(Self {
            kind,
            rows: m,
            cols: n,
            seed,
            column_normalized: opts.column_normalized && kind == OperatorKind::GaussianFat,
            repr,
        })
    }

    /// Square dense Gaussian `n×n` operator with `N(0, 1/n)` entries.
    pub fn gaussian_square(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("operator extents must be positive".into()));
        }
        let mut rng = rng::stream(seed, "gaussian_square", 0);
        let a = linalg::gaussian(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
        Self::from_dense(n, n, a, seed)
    }

    /// Fourier operator keeping `round(keep·n)` frequencies.
    pub fn fourier(n: usize, keep: f64, seed: u64) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Parameter(format!(
                "fourier keep fraction must be in (0, 1], got {keep}"
            )));
        }
        let kept = ((keep * n as f64).round() as usize).max(1);
        Self::sample(OperatorKind::FourierMasked, 2 * kept, n, seed)
    }

    pub fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        Self::from_dense(n, n, a, 0).expect("consistent extents")
    }

    pub fn from_dense(m: usize, n: usize, data: Vec<f64>, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 || data.len() != m * n {
            return Err(Error::dim(
                "operator",
                format!("{} coefficients for a {m}x{n} operator", data.len()),
            ));
        }
        Ok(Self {
            kind: OperatorKind::Dense,
            rows: m,
            cols: n,
            seed,
            column_normalized: false,
            repr: Repr::Dense(data),
        })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn column_normalized(&self) -> bool {
        self.column_normalized
    }

    pub fn mask(&self) -> Option<&FourierMask> {
        match &self.repr {
            Repr::Fourier { mask, .. } => Some(mask),
            Repr::Dense(_) => None,
        }
    }

    /// Row-major coefficients for dense kinds.
    pub fn dense(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Dense(a) => Some(a),
            Repr::Fourier { .. } => None,
        }
    }

    /// Row-major coefficients for every kind (Fourier rows are materialized).
    pub fn to_dense(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Dense(a) => a.clone(),
            Repr::Fourier { .. } => {
                let mut out = vec![0.0; self.rows * self.cols];
                let mut e = vec![0.0; self.cols];
                for j in 0..self.cols {
                    e[j] = 1.0;
                    let col = self.apply(&e).expect("basis vector has n entries");
                    for (i, v) in col.into_iter().enumerate() {
                        out[i * self.cols + j] = v;
                    }
                    e[j] = 0.0;
                }
                out
            }
        }
    }

    /// Noiseless `A·x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim(
                "apply",
                format!(
                    "signal of length {} for a {}x{} operator",
                    x.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        Ok(match &self.repr {
            Repr::Dense(a) => a
                .chunks(self.cols)
                .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
                .collect(),
            Repr::Fourier { mask, cos, sin } => {
                let scale = 1.0 / (self.cols as f64).sqrt();
                let mut out = Vec::with_capacity(self.rows);
                for &f in &mask.freqs {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (p, &xv) in x.iter().enumerate() {
                        let t = phase(mask, f, p);
                        re += xv * cos[t];
                        im -= xv * sin[t];
                    }
                    out.push(re * scale);
                    out.push(im * scale);
                }
                out
            }
        })
    }

    /// `A·x + w` with `w ~ N(0, σ²)` drawn from stream `noise_index` of this
    /// operator's seed.
    pub fn apply_noisy(&self, x: &[f64], noise_sigma: f64, noise_index: u64) -> Result<Vec<f64>> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        let mut y = self.apply(x)?;
        if noise_sigma > 0.0 {
            let mut rng = rng::stream(self.seed, "noise", noise_index);
            for v in &mut y {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sigma * z;
            }
        }
        Ok(y)
    }

    /// `Aᵀ·r` (the conjugate-transpose map for Fourier operators, which is real
    /// under the real/imaginary row stacking).
    pub fn adjoint(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.rows {
            return Err(Error::dim(
                "adjoint",
                format!(
                    "residual of length {} for a {}x{} operator",
                    r.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        let mut out = vec![0.0; self.cols];
        match &self.repr {
            Repr::Dense(a) => {
                for (row, &rv) in a.chunks(self.cols).zip(r) {
                    if rv != 0.0 {
                        out.iter_mut().zip(row).for_each(|(o, p)| *o += p * rv);
                    }
                }
            }
            Repr::Fourier { mask, cos, sin } => {
                let scale = 1.0 / (self.cols as f64).sqrt();
                for (j, &f) in mask.freqs.iter().enumerate() {
                    let (re, im) = (r[2 * j], r[2 * j + 1]);
                    for (p, o) in out.iter_mut().enumerate() {
                        let t = phase(mask, f, p);
                        *o += (re * cos[t] - im * sin[t]) * scale;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Columns `support` of `A`, as a row-major `m×|support|` matrix.
    pub fn columns(&self, support: &[usize]) -> Vec<f64> {
        let s = support.len();
        let mut out = vec![0.0; self.rows * s];
        match &self.repr {
            Repr::Dense(a) => {
                for i in 0..self.rows {
                    for (j, &c) in support.iter().enumerate() {
                        out[i * s + j] = a[i * self.cols + c];
                    }
                }
            }
            Repr::Fourier { .. } => {
                let mut e = vec![0.0; self.cols];
                for (j, &c) in support.iter().enumerate() {
                    e[c] = 1.0;
                    let col = self.apply(&e).expect("basis vector has n entries");
                    e[c] = 0.0;
                    for (i, v) in col.into_iter().enumerate() {
                        out[i * s + j] = v;
                    }
                }
            }
        }
        out
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let dense;
        let a = match &self.repr {
            Repr::Dense(a) => a,
            Repr::Fourier { .. } => {
                dense = self.to_dense();
                &dense
            }
        };
        let mut norms = vec![0.0; self.cols];
        for row in a.chunks(self.cols) {
            norms.iter_mut().zip(row).for_each(|(n, v)| *n += v * v);
        }
        norms.into_iter().map(f64::sqrt).collect()
    }

    /// Writes `<path>` (JSON header) and `<path>.bin` (little-endian payload).
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = blob_path(path);
        let (encoding, bytes) = match &self.repr {
            Repr::Dense(a) => ("f64le", a.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            Repr::Fourier { mask, .. } => (
                "u64le_indices",
                mask.freqs.iter().flat_map(|&f| (f as u64).to_le_bytes()).collect(),
            ),
        };
        let header = OperatorHeader {
            format_version: OPERATOR_FORMAT_VERSION,
            kind: self.kind,
            m: self.rows,
            n: self.cols,
            seed: self.seed,
            flags: OperatorFlags {
                column_normalized: self.column_normalized,
                grid: self.mask().map(|mk| [mk.height, mk.width]),
            },
            encoding: encoding.to_owned(),
            blob: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        fs::write(path, serde_json::to_vec_pretty(&header)?)?;
        fs::write(blob_path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: OperatorHeader = serde_json::from_slice(&fs::read(path)?)?;
        if header.format_version != OPERATOR_FORMAT_VERSION {
            return Err(Error::Load(format!(
                "unsupported operator format version {}",
                header.format_version
            )));
        }
        let bytes = fs::read(path.with_file_name(&header.blob))?;
        let repr = match header.kind {
            OperatorKind::FourierMasked => {
                let [height, width] = header
                    .flags
                    .grid
                    .ok_or_else(|| Error::Load("fourier operator without grid".into()))?;
                if bytes.len() * 2 != header.m * 8 || height * width != header.n {
                    return Err(Error::Load("fourier mask length does not match header".into()));
                }
                let freqs: Vec<usize> = bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
                    .collect();
                if freqs.iter().any(|&f| f >= header.n) || freqs.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Load("fourier mask indices invalid".into()));
                }
                fourier_repr(FourierMask { height, width, freqs })
            }
            _ => {
                if bytes.len() != header.m * header.n * 8 {
                    return Err(Error::Load(format!(
                        "coefficient blob holds {} bytes, expected {}",
                        bytes.len(),
                        header.m * header.n * 8
                    )));
                }
                Repr::Dense(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            }
        };
        Ok(Self {
            kind: header.kind,
            rows: header.m,
            cols: header.n,
            seed: header.seed,
            column_normalized: header.flags.column_normalized,
            repr,
        })
    }
}

const OPERATOR_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct OperatorFlags {
    column_normalized: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    grid: Option<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct OperatorHeader {
    format_version: u32,
    kind: OperatorKind,
    m: usize,
    n: usize,
    seed: u64,
    flags: OperatorFlags,
    encoding: String,
    blob: String,
}

fn blob_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|f| f.to_os_string()).unwrap_or_default();
    name.push(".bin");
    path.with_file_name(name)
}

fn normalize_columns(m: usize, n: usize, a: &mut [f64]) {
    let mut norms = vec![0.0; n];
    for row in a.chunks(n) {
        norms.iter_mut().zip(row).for_each(|(s, v)| *s += v * v);
    }
    let norms: Vec<f64> = norms.into_iter().map(f64::sqrt).collect();
    for row in a.chunks_mut(n).take(m) {
        row.iter_mut().zip(&norms).for_each(|(v, s)| *v /= s);
    }
}

/// Square grid when `n` is a perfect square, otherwise a 1-D signal.
fn grid_for(n: usize) -> (usize, usize) {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        (side, side)
    } else {
        (1, n)
    }
}

/// Center-weighted mask: DC is always kept, the rest are drawn without
/// replacement with weight `1 / (1 + (r / r0)²)`, `r` the wrapped distance
/// to DC and `r0` one eighth of the larger side.
fn sample_mask(height: usize, width: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let n = height * width;
    let r0 = (height.max(width) as f64 / 8.0).max(1.0);
    let wrap = |i: usize, len: usize| i.min(len - i) as f64;
    let mut keyed: Vec<(f64, usize)> = (1..n)
        .map(|f| {
            let (u, v) = (f / width, f % width);
            let r2 = (wrap(u, height).powi(2) + wrap(v, width).powi(2)) / (r0 * r0);
            let weight = 1.0 / (1.0 + r2);
            // Efraimidis–Spirakis key: larger is more likely
            let u01: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u01.ln() / weight, f)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut freqs: Vec<usize> = std::iter::once(0)
        .chain(keyed.into_iter().map(|(_, f)| f))
        .take(count)
        .collect();
    freqs.sort_unstable();
    freqs
}

fn fourier_repr(mask: FourierMask) -> Repr {
    let n = mask.height * mask.width;
    let cos = (0..n).map(|t| (2.0 * PI * t as f64 / n as f64).cos()).collect();
    let sin = (0..n).map(|t| (2.0 * PI * t as f64 / n as f64).sin()).collect();
    Repr::Fourier { mask, cos, sin }
}

/// Index into the `2π·t/n` tables for frequency `f` at flat position `p`:
/// `u·a/h + v·b/w = ((u·a mod h)·w + (v·b mod w)·h) / n`.
fn phase(mask: &FourierMask, f: usize, p: usize) -> usize {
    let (h, w) = (mask.height, mask.width);
    let (u, v) = (f / w, f % w);
    let (a, b) = (p / w, p % w);
    ((u * a % h) * w + (v * b % w) * h) % (h * w)
}

// ------------------------------------------------------------------ signals

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum ValueDist {
    Gaussian,
    Uniform {
        low: f64,
        high: f64,
    },
    /// ±1 with equal probability.
    Sign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSignal {
    pub n: usize,
    /// Strictly increasing indices.
    pub support: Vec<usize>,
    pub values: Vec<f64>,
    pub noise_sigma: f64,
}

impl SparseSignal {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (&i, &v) in self.support.iter().zip(&self.values) {
            x[i] = v;
        }
        x
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Uniformly random support of size `k`; values from `dist`, optionally
/// rescaled to unit ℓ2 norm.
pub fn generate_ksparse(n: usize, k: usize, seed: u64, dist: ValueDist, normalize: bool) -> Result<SparseSignal> {
    let mut rng = rng::stream(seed, "ksparse", 0);
    ksparse_from(&mut rng, n, k, dist, normalize)
}

pub(crate) fn ksparse_from(
    rng: &mut Rng,
    n: usize,
    k: usize,
    dist: ValueDist,
    normalize: bool,
) -> Result<SparseSignal> {
    if k > n {
        return Err(Error::Parameter(format!("sparsity {k} exceeds dimension {n}")));
    }
    let mut support = index::sample(rng, n, k).into_vec();
    support.sort_unstable();
    let mut values: Vec<f64> = (0..k)
        .map(|_| loop {
            let v = match dist {
                ValueDist::Gaussian => StandardNormal.sample(rng),
                ValueDist::Uniform { low, high } => rng.random_range(low..high),
                ValueDist::Sign => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            // keep the support exact: a drawn zero would shrink it
            if v != 0.0 {
                break v;
            }
        })
        .collect();
    if normalize && k > 0 {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(SparseSignal {
        n,
        support,
        values,
        noise_sigma: 0.0,
    })
}

// ---------------------------------------------------------------------- RIP

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RipMethod {
    ExactEnumeration,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipEstimate {
    /// Sparsity order, `2k`.
    pub order: usize,
    pub delta: f64,
    pub method: RipMethod,
    /// Supports enumerated (exact) or random vectors drawn (Monte Carlo).
    pub count: u64,
    /// Monte Carlo estimates only bound the true constant from below.
    pub lower_bound: bool,
    /// Support attaining `delta` (exact) or of the worst sample (Monte Carlo).
    pub worst_support: Vec<usize>,
}

/// `C(n, r)`, saturating.
pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Estimates `δ₂ₖ`.
///
/// `ExactEnumeration` visits every support of size `2k` and takes the largest
/// `|λ − 1|` over the eigenvalues of `A_Sᵀ·A_S`; it refuses when the number of
/// supports exceeds `cap`. `MonteCarlo` draws `budget` random unit
/// `2k`-sparse vectors and reports the largest `|‖Az‖² − 1|`, a lower bound.
pub fn estimate_rip(a: &SensingOperator, k: usize, method: RipMethod, budget: u64, cap: u128) -> Result<RipEstimate> {
    let order = 2 * k;
    let n = a.cols();
    if order > n {
        return Err(Error::Parameter(format!("RIP order {order} exceeds dimension {n}")));
    }
    if order == 0 {
        return Ok(RipEstimate {
            order,
            delta: 0.0,
            method,
            count: 0,
            lower_bound: method == RipMethod::MonteCarlo,
            worst_support: Vec::new(),
        });
    }
    match method {
        RipMethod::ExactEnumeration => {
            let count = binomial(n, order);
            if count > cap {
                return Err(Error::EnumerationCap { n, order, count, cap });
            }
            let dense = a.to_dense();
            let m = a.rows();
            let mut full = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let dot: f64 = (0..m).map(|r| dense[r * n + i] * dense[r * n + j]).sum();
                    full[i * n + j] = dot;
                    full[j * n + i] = dot;
                }
            }
            let mut best = (0.0f64, Vec::new());
            let mut gram = vec![0.0; order * order];
            for_each_combination(n, order, |support| {
                for (i, &ci) in support.iter().enumerate() {
                    for (j, &cj) in support.iter().enumerate() {
                        gram[i * order + j] = full[ci * n + cj];
                    }
                }
                let dev = linalg::symmetric_eigenvalues(order, &gram)
                    .into_iter()
                    .map(|l| (l - 1.0).abs())
                    .fold(0.0, f64::max);
                if dev > best.0 || best.1.is_empty() {
                    best = (dev.max(best.0), support.to_vec());
                }
            });
            Ok(RipEstimate {
                order,
                delta: best.0,
                method,
                count: count as u64,
                lower_bound: false,
                worst_support: best.1,
            })
        }
        RipMethod::MonteCarlo => {
            if budget == 0 {
                return Err(Error::Parameter("Monte Carlo RIP needs a positive budget".into()));
            }
            let mut rng = rng::stream(a.seed(), "rip_mc", order as u64);
            let mut best = (0.0f64, Vec::new());
            for _ in 0..budget {
                let z = ksparse_from(&mut rng, n, order, ValueDist::Gaussian, true)?;
                let az = a.apply(&z.to_dense())?;
                let dev = (az.iter().map(|v| v * v).sum::<f64>() - 1.0).abs();
                if dev > best.0 || best.1.is_empty() {
                    best = (dev.max(best.0), z.support);
                }
            }
            Ok(RipEstimate {
                order,
                delta: best.0,
                method,
                count: budget,
                lower_bound: true,
                worst_support: best.1,
            })
        }
    }
}

/// Calls `f` with every increasing `r`-subset of `0..n`, in lexicographic order.
pub fn for_each_combination(n: usize, r: usize, mut f: impl FnMut(&[usize])) {
    if r > n {
        return;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        f(&idx);
        let mut i = r;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - r {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
