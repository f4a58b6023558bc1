//! Synthetic observation/target pairs `y = A·vec(x) + w` over blob images,
//! stored as little-endian f32 blobs with a JSON manifest.
//!
//! Each split file holds consecutive `(x, y)` pairs of `image_size²` values.
//! Observations are min-max normalised to `[0, 1]` per sample; the affine
//! constants live in a little-endian f64 side file (`min`, `range` per sample)
//! so the raw measurement can be recovered exactly. Observations shorter than
//! `image_size²` are zero-padded after normalisation.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::sensing::SensingOperator;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub num_blobs: (usize, usize),
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            num_blobs: (1, 5),
            amplitude: (0.5, 1.0),
            sigma: (0.5, 1.5),
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.num_blobs.0 > self.num_blobs.1 {
            return Err(Error::Parameter(format!(
                "blob count range {:?} is inverted",
                self.num_blobs
            )));
        }
        if !ok_range(self.amplitude) || !ok_range(self.sigma) || self.sigma.0 <= 0.0 {
            return Err(Error::Parameter(format!(
                "invalid amplitude {:?} or sigma {:?} range",
                self.amplitude, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    /// Row, column in pixel coordinates.
    pub center: (f64, f64),
    pub amplitude: f64,
    pub sigma: f64,
}

/// Sum of isotropic Gaussian bumps on a zero background, clipped to `[0, 1]`.
pub fn render_blobs(size: usize, blobs: &[Blob]) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    for b in blobs {
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for i in 0..size {
            let di = i as f64 - b.center.0;
            for j in 0..size {
                let dj = j as f64 - b.center.1;
                img[i * size + j] += b.amplitude * (-(di * di + dj * dj) * inv).exp();
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn gen_target(spec: &TargetSpec, size: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "target", 0);
    let count = rng.random_range(spec.num_blobs.0..=spec.num_blobs.1);
    let extent = (size.max(1) - 1) as f64;
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            center: (uniform(&mut rng, (0.0, extent)), uniform(&mut rng, (0.0, extent))),
            amplitude: uniform(&mut rng, spec.amplitude),
            sigma: uniform(&mut rng, spec.sigma),
        })
        .collect();
    Ok(render_blobs(size, &blobs))
}

/// `y = (raw − min) / range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub range: f64,
}

impl Normalization {
    pub const IDENTITY: Self = Self { min: 0.0, range: 1.0 };

    /// Identity when `raw` already lies in `[0, 1]`; min-max otherwise.
    pub fn fit(raw: &[f64]) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo >= 0.0 && hi <= 1.0 {
            Self::IDENTITY
        } else if hi > lo {
            Self {
                min: lo,
                range: hi - lo,
            }
        } else {
            Self { min: lo, range: 1.0 }
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / self.range
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.range + self.min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// Target image, `image_size²` values in `[0, 1]`.
    pub x: Vec<f64>,
    /// Normalised observation zero-padded to `image_size²`.
    pub y: Vec<f64>,
    /// Number of leading entries of `y` that carry measurements.
    pub observation_len: usize,
    pub normalization: Normalization,
}

impl SamplePair {
    /// The raw measurement `A·vec(x) + w`.
    pub fn raw_observation(&self) -> Vec<f64> {
        self.y[..self.observation_len]
            .iter()
            .map(|v| self.normalization.invert(*v))
            .collect()
    }
}

pub fn gen_pair(op: &SensingOperator, x: &[f64], noise_sigma: f64, noise_index: u64) -> Result<SamplePair> {
    if x.len() != op.cols() {
        return Err(Error::dim(
            "gen_pair",
            format!("target has {} pixels, operator expects {}", x.len(), op.cols()),
        ));
    }
    if op.rows() > op.cols() {
        return Err(Error::dim(
            "gen_pair",
            format!(
                "{} measurements do not fit a {}-pixel observation image",
                op.rows(),
                op.cols()
            ),
        ));
    }
    let raw = op.apply_noisy(x, noise_sigma, noise_index)?;
    let normalization = Normalization::fit(&raw);
    let mut y: Vec<f64> = raw.iter().map(|v| normalization.apply(*v)).collect();
    y.resize(op.cols(), 0.0);
    Ok(SamplePair {
        x: x.to_vec(),
        y,
        observation_len: raw.len(),
        normalization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardModel {
    /// Dense `n×n` Gaussian with `N(0, 1/n)` entries.
    GaussianSquare,
    Identity,
    OrthonormalSquare,
    GaussianFat,
    Fourier,
}

impl ForwardModel {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian_square" | "gaussian" | "dense" => Self::GaussianSquare,
            "identity" => Self::Identity,
            "orthonormal" | "orthonormal_square" => Self::OrthonormalSquare,
            "gaussian_fat" | "fat" => Self::GaussianFat,
            "fourier" | "fourier_masked" => Self::Fourier,
            other => return Err(Error::Parameter(format!("unknown forward model '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: ForwardModel,
    /// Measurement count; ignored by square kinds and by `Fourier`, whose
    /// count follows from `keep`.
    pub m: Option<usize>,
    /// Fraction of frequencies kept by `Fourier`.
    pub keep: Option<f64>,
    pub seed: u64,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            kind: ForwardModel::GaussianSquare,
            m: None,
            keep: None,
            seed: 0,
        }
    }
}

impl OperatorSpec {
    pub fn build(&self, n: usize) -> Result<SensingOperator> {
        use crate::sensing::OperatorKind;
        match self.kind {
            ForwardModel::GaussianSquare => SensingOperator::gaussian_square(n, self.seed),
            ForwardModel::Identity => Ok(SensingOperator::identity(n)),
            ForwardModel::OrthonormalSquare => {
                SensingOperator::sample(OperatorKind::OrthonormalSquare, n, n, self.seed)
            }
            ForwardModel::GaussianFat => {
                let m = self
                    .m
                    .ok_or_else(|| Error::Parameter("gaussian_fat operator needs a measurement count m".into()))?;
                SensingOperator::sample(OperatorKind::GaussianFat, m, n, self.seed)
            }
            ForwardModel::Fourier => {
                let keep = self.keep.unwrap_or(0.25);
                SensingOperator::fourier(n, keep, self.seed)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown split '{s}'")))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 400,
            test: 400,
        }
    }
}

/// Everything that determines a dataset's contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub counts: SplitCounts,
    pub operator: OperatorSpec,
    pub target: TargetSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            counts: SplitCounts::default(),
            operator: OperatorSpec::default(),
            target: TargetSpec::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    pub data: FileEntry,
    pub normalization: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageInfo {
    pub data_dtype: String,
    pub normalization_dtype: String,
    pub layout: String,
    pub observation_len: usize,
    pub observation_reshape: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    /// Rows and columns of the forward operator.
    pub operator_shape: (usize, usize),
    pub storage: StorageInfo,
    pub operator_file: FileEntry,
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub test: SplitFiles,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &SplitFiles {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Load(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    /// Reloads the forward operator, verifying its checksum.
    pub fn operator(&self, dir: &Path) -> Result<SensingOperator> {
        let header = dir.join(&self.operator_file.file);
        if operator_digest(&header)? != self.operator_file.sha256 {
            return Err(Error::Checksum(header));
        }
        SensingOperator::load(&header)
    }
}

/// One digest over the operator header and its coefficient blob.
fn operator_digest(header: &Path) -> Result<String> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Load(format!("{}: {e}", p.display())));
    let mut bytes = read(header)?;
    let mut blob = header.as_os_str().to_owned();
    blob.push(".bin");
    bytes.extend(read(Path::new(&blob))?);
    Ok(sha256_hex(&bytes))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn verify(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Checksum(path));
    }
    Ok(bytes)
}

fn target_seed(seed: u64, split: Split, index: usize) -> u64 {
    rng::derive_seed(seed, &format!("target_{}", split.name()), index as u64)
}

fn noise_index(split: Split, index: usize) -> u64 {
    (split.index() << 40) | index as u64
}

/// Generates one split in index order, optionally on `threads` workers.
pub fn gen_split(spec: &DatasetSpec, op: &SensingOperator, split: Split, threads: usize) -> Result<Vec<SamplePair>> {
    let count = spec.counts.get(split);
    let make = |i: usize| -> Result<SamplePair> {
        let x = gen_target(&spec.target, spec.image_size, target_seed(spec.seed, split, i))?;
        gen_pair(op, &x, spec.noise_sigma, noise_index(split, i))
    };
    if threads == 0 {
        (0..count).map(make).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(|| (0..count).into_par_iter().map(make).collect())
    }
}

fn encode_pairs(pairs: &[SamplePair]) -> (Vec<u8>, Vec<u8>) {
    let mut data = Vec::new();
    let mut norm = Vec::new();
    for p in pairs {
        for v in p.x.iter().chain(&p.y) {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        norm.extend_from_slice(&p.normalization.min.to_le_bytes());
        norm.extend_from_slice(&p.normalization.range.to_le_bytes());
    }
    (data, norm)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(bytes)?;
    Ok(FileEntry {
        file: name.to_string(),
        sha256: sha256_hex(bytes),
    })
}

/// Writes the operator, all three splits and `manifest.json` into `dir`.
pub fn gen_dataset(spec: &DatasetSpec, dir: &Path, threads: usize) -> Result<DatasetManifest> {
    spec.target.validate()?;
    if spec.image_size == 0 {
        return Err(Error::Parameter("image size must be positive".into()));
    }
    for split in Split::ALL {
        if spec.counts.get(split) == 0 {
            return Err(Error::Parameter(format!(
                "{} split needs at least one sample",
                split.name()
            )));
        }
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Parameter(format!(
            "noise sigma must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    let n = spec.image_size * spec.image_size;
    let op = spec.operator.build(n)?;
    if op.rows() > n {
        return Err(Error::Parameter(format!(
            "{} measurements do not fit a {}x{} observation image",
            op.rows(),
            spec.image_size,
            spec.image_size
        )));
    }
    fs::create_dir_all(dir)?;
    op.save(&dir.join("operator.json"))?;
    let operator_file = FileEntry {
        file: "operator.json".into(),
        sha256: operator_digest(&dir.join("operator.json"))?,
    };

    let mut files = Vec::new();
    for split in Split::ALL {
        let pairs = gen_split(spec, &op, split, threads)?;
        let (data, norm) = encode_pairs(&pairs);
        files.push(SplitFiles {
            count: pairs.len(),
            data: write_file(dir, &format!("{}.f32", split.name()), &data)?,
            normalization: write_file(dir, &format!("{}.norm.f64", split.name()), &norm)?,
        });
    }
    let [train, val, test]: [SplitFiles; 3] = files.try_into().expect("three splits");
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        operator_shape: (op.rows(), op.cols()),
        storage: StorageInfo {
            data_dtype: "f32le (lossy from f64)".into(),
            normalization_dtype: "f64le".into(),
            layout: "consecutive (x, y) pairs, each image_size^2 row-major".into(),
            observation_len: op.rows(),
            observation_reshape: if op.rows() == n {
                "reshape to image_size x image_size".into()
            } else {
                format!(
                    "first {} entries are measurements, zero-padded to image_size^2",
                    op.rows()
                )
            },
        },
        operator_file,
        train,
        val,
        test,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads one split back, verifying both checksums first.
pub fn load_split(manifest: &DatasetManifest, dir: &Path, split: Split) -> Result<Vec<SamplePair>> {
    let files = manifest.split(split);
    let data = verify(dir, &files.data)?;
    let norm = verify(dir, &files.normalization)?;
    let px = manifest.spec.image_size * manifest.spec.image_size;
    if data.len() != files.count * 2 * px * 4 || norm.len() != files.count * 16 {
        return Err(Error::Load(format!("{} split has inconsistent sizes", split.name())));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let consts: Vec<f64> = norm
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(values
        .chunks_exact(2 * px)
        .zip(consts.chunks_exact(2))
        .map(|(pair, c)| SamplePair {
            x: pair[..px].to_vec(),
            y: pair[px..].to_vec(),
            observation_len: manifest.storage.observation_len,
            normalization: Normalization { min: c[0], range: c[1] },
        })
        .collect())
}

/// 8-bit binary PGM of an image with values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim(
            "write_pgm",
            format!("{} pixels for {width}x{height}", pixels.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}
