//! Synthetic ellipse phantoms and the on-disk dataset layout.
//!
//! A dataset directory holds `{train,val,test}/img_%05d.mact`, each a
//! `(1, H, W)` tensor, plus `manifest.json`. Images are real, finite and
//! normalised to `[0, 1]` by their maximum.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_mact, write_mact, DType, Tensor};

/// Ellipse statistics. Cardiac-like phantoms use scattered, elongated,
/// rotated ellipses; brain-like ones nest roundish ellipses inside a skull.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomStyle {
    Cardiac,
    Brain,
}

impl PhantomStyle {
    /// Study enumeration used in context vectors.
    pub fn study_code(self) -> u8 {
        match self {
            PhantomStyle::Cardiac => 1,
            PhantomStyle::Brain => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhantomStyle::Cardiac => "cardiac",
            PhantomStyle::Brain => "brain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub ellipses_min: usize,
    pub ellipses_max: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Gaussian smoothing σ in pixels; 0 disables smoothing.
    pub smoothing: f64,
    pub seed: u64,
    pub style: PhantomStyle,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            ellipses_min: 4,
            ellipses_max: 10,
            intensity_min: 0.2,
            intensity_max: 1.0,
            smoothing: 0.8,
            seed: 0,
            style: PhantomStyle::Cardiac,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 2
            && self.ellipses_min >= 1
            && self.ellipses_min <= self.ellipses_max
            && self.intensity_min > 0.0
            && self.intensity_min <= self.intensity_max
            && self.smoothing >= 0.0
            && self.smoothing.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid phantom spec {self:?}")));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
}

fn draw_ellipses(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let count = rng.gen_range(spec.ellipses_min..=spec.ellipses_max);
    let intensity = |rng: &mut ChaCha8Rng| rng.gen_range(spec.intensity_min..=spec.intensity_max);
    let mut out = Vec::with_capacity(count);
    match spec.style {
        PhantomStyle::Cardiac => {
            for _ in 0..count {
                out.push(Ellipse {
                    cx: rng.gen_range(-0.55..0.55),
                    cy: rng.gen_range(-0.55..0.55),
                    a: rng.gen_range(0.12..0.5),
                    b: rng.gen_range(0.05..0.22),
                    theta: rng.gen_range(0.0..std::f64::consts::PI),
                    value: intensity(rng),
                });
            }
        }
        PhantomStyle::Brain => {
            let a = rng.gen_range(0.78..0.9);
            out.push(Ellipse {
                cx: 0.0,
                cy: 0.0,
                a,
                b: a * rng.gen_range(0.8..0.92),
                theta: rng.gen_range(-0.15..0.15),
                value: intensity(rng),
            });
            for k in 1..count {
                let scale = a * (1.0 - k as f64 / (count as f64 + 1.0));
                let r = scale * rng.gen_range(0.3..0.7);
                out.push(Ellipse {
                    cx: rng.gen_range(-0.25..0.25) * a,
                    cy: rng.gen_range(-0.25..0.25) * a,
                    a: r,
                    b: r * rng.gen_range(0.7..1.0),
                    theta: rng.gen_range(0.0..std::f64::consts::PI),
                    value: intensity(rng) * if rng.gen_bool(0.3) { -0.5 } else { 1.0 },
                });
            }
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
fn smooth(img: &mut [f64], n: usize, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = (-radius..=radius)
                .map(|t| taps[(t + radius) as usize] * img[i * n + clamp(j as isize + t)])
                .sum::<f64>()
                / norm;
        }
    }
    for i in 0..n {
        for j in 0..n {
            img[i * n + j] = (-radius..=radius)
                .map(|t| taps[(t + radius) as usize] * tmp[clamp(i as isize + t) * n + j])
                .sum::<f64>()
                / norm;
        }
    }
}

/// One `[size, size]` phantom, a pure function of `(spec, index)`.
pub fn gen_phantom(spec: &PhantomSpec, index: u64) -> Tensor {
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let ellipses = draw_ellipses(spec, &mut rng);
    let mut img = vec![0.0; n * n];
    for i in 0..n {
        let y = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
        for j in 0..n {
            let x = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
            for e in &ellipses {
                let (s, c) = e.theta.sin_cos();
                let (dx, dy) = (x - e.cx, y - e.cy);
                let u = (c * dx + s * dy) / e.a;
                let v = (-s * dx + c * dy) / e.b;
                if u * u + v * v <= 1.0 {
                    img[i * n + j] += e.value;
                }
            }
        }
    }
    smooth(&mut img, n, spec.smoothing);
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    let peak = img.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut img {
            *v /= peak;
        }
    }
    Tensor::from_parts(vec![n, n], img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub size: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub normalization: String,
    pub study_tag: String,
    /// Generator spec, absent for ingested images.
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Phantom index (or source position for ingested images) of each file.
    pub indices: SplitIndices,
}

/// Images of one dataset, each `[H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Tensor>,
    pub val: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Tensor] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Study enumeration derived from the manifest tag (`brain` → 2, else 1).
    pub fn study_code(&self) -> u8 {
        if self.manifest.study_tag == PhantomStyle::Brain.name() {
            2
        } else {
            1
        }
    }
}

pub fn image_path(root: &Path, split: Split, i: usize) -> PathBuf {
    root.join(split.name()).join(format!("img_{i:05}.mact"))
}

fn write_split(root: &Path, split: Split, images: &[Tensor]) -> Result<()> {
    let dir = root.join(split.name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, img) in images.iter().enumerate() {
        let n = img.shape();
        let t = img.clone().reshape(&[1, n[0], n[1]])?;
        write_mact(image_path(root, split, i), &t, DType::F64)?;
    }
    Ok(())
}

fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Generates phantoms for every split and writes them under `root`.
/// Split indices are consecutive, so the splits never share a phantom.
pub fn build_dataset(spec: &PhantomSpec, counts: SplitCounts, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let root = root.as_ref();
    let idx = |start: usize, len: usize| (start as u64..(start + len) as u64).collect::<Vec<_>>();
    let indices = SplitIndices {
        train: idx(0, counts.train),
        val: idx(counts.train, counts.val),
        test: idx(counts.train + counts.val, counts.test),
    };
    for split in Split::ALL {
        let images: Vec<Tensor> = indices.get(split).iter().map(|&i| gen_phantom(spec, i)).collect();
        write_split(root, split, &images)?;
    }
    let manifest = DatasetManifest {
        size: spec.size,
        counts,
        seed: spec.seed,
        normalization: "max".into(),
        study_tag: spec.style.name().into(),
        phantom: Some(*spec),
        indices,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Reads an external image (`(H, W)` or `(1, H, W)` MACT) and divides by its maximum.
pub fn ingest_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let t = read_mact(path)?;
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected an (H, W) or (1, H, W) image, got {other:?}"),
            })
        }
    };
    if t.min() < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{} has negative values; expected a magnitude image",
            path.display()
        )));
    }
    let peak = t.max();
    if peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("{} is all zeros", path.display())));
    }
    Tensor::new(vec![h, w], t.data().iter().map(|v| v / peak).collect())
}

/// Writes already-normalised external images as a dataset, split in order.
pub fn build_dataset_from_images(
    images: &[Tensor],
    counts: SplitCounts,
    study_tag: &str,
    root: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let total = counts.train + counts.val + counts.test;
    if images.len() != total {
        return Err(Error::InvalidArgument(format!(
            "{} images for split counts summing to {total}",
            images.len()
        )));
    }
    let size = images.first().map(|t| t.shape()[0]).unwrap_or(0);
    for img in images {
        img.expect_shape("build_dataset_from_images", &[size, size])?;
    }
    let (a, b) = (counts.train, counts.train + counts.val);
    write_split(root, Split::Train, &images[..a])?;
    write_split(root, Split::Val, &images[a..b])?;
    write_split(root, Split::Test, &images[b..])?;
    let manifest = DatasetManifest {
        size,
        counts,
        seed: 0,
        normalization: "max".into(),
        study_tag: study_tag.into(),
        phantom: None,
        indices: SplitIndices {
            train: (0..a as u64).collect(),
            val: (a as u64..b as u64).collect(),
            test: (b as u64..total as u64).collect(),
        },
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = root.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and validates every image listed in the manifest.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = load_manifest(root)?;
    let n = manifest.size;
    let load = |split: Split, count: usize| -> Result<Vec<Tensor>> {
        (0..count)
            .map(|i| {
                let path = image_path(root, split, i);
                let t = read_mact(&path)?;
                if t.shape() != [1, n, n] {
                    return Err(Error::Format {
                        path,
                        reason: format!("expected shape [1, {n}, {n}], got {:?}", t.shape()),
                    });
                }
                if t.min() < 0.0 || t.max() > 1.0 {
                    return Err(Error::Format {
                        path,
                        reason: "pixel values outside [0, 1]".into(),
                    });
                }
                t.reshape(&[n, n])
            })
            .collect()
    };
    let c = manifest.counts;
    Ok(Dataset {
        root: root.to_path_buf(),
        train: load(Split::Train, c.train)?,
        val: load(Split::Val, c.val)?,
        test: load(Split::Test, c.test)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_bounded_and_deterministic() {
        for style in [PhantomStyle::Cardiac, PhantomStyle::Brain] {
            let spec = PhantomSpec {
                size: 32,
                style,
                seed: 7,
                ..PhantomSpec::default()
            };
            for i in 0..500 {
                let p = gen_phantom(&spec, i);
                assert!(p.min() >= 0.0 && p.max() <= 1.0);
                assert!(p.max() > 0.0, "{style:?} {i} is blank");
            }
            assert!(gen_phantom(&spec, 3).bit_eq(&gen_phantom(&spec, 3)));
        }
    }

    #[test]
    fn distinct_indices_differ() {
        let spec = PhantomSpec::default();
        for i in 0..100u64 {
            let (a, b) = (gen_phantom(&spec, 2 * i), gen_phantom(&spec, 2 * i + 1));
            let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
            assert!(differing * 100 >= a.len(), "pair {i}: {differing} pixels differ");
        }
    }

    #[test]
    fn styles_differ() {
        let c = PhantomSpec::default();
        let b = PhantomSpec {
            style: PhantomStyle::Brain,
            ..c
        };
        assert!(!gen_phantom(&c, 0).bit_eq(&gen_phantom(&b, 0)));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            size: 16,
            seed: 3,
            ..PhantomSpec::default()
        };
        let counts = SplitCounts {
            train: 4,
            val: 2,
            test: 3,
        };
        let manifest = build_dataset(&spec, counts, dir.path()).unwrap();
        assert_eq!(manifest.counts, counts);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (4, 2, 3));
        for split in Split::ALL {
            for (img, &idx) in ds.split(split).iter().zip(manifest.indices.get(split)) {
                assert!(img.bit_eq(&gen_phantom(&spec, idx)));
            }
        }
        let all: Vec<u64> = Split::ALL.iter().flat_map(|s| manifest.indices.get(*s).to_vec()).collect();
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
    }

    #[test]
    fn missing_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
        let spec = PhantomSpec {
            size: 8,
            ..PhantomSpec::default()
        };
        let counts = SplitCounts {
            train: 2,
            val: 1,
            test: 1,
        };
        build_dataset(&spec, counts, dir.path()).unwrap();
        write_mact(image_path(dir.path(), Split::Val, 0), &Tensor::zeros(&[1, 9, 9]), DType::F64).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
        build_dataset(&spec, counts, dir.path()).unwrap();
        fs::remove_file(image_path(dir.path(), Split::Test, 0)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn ingest_normalises_by_max() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.mact");
        let raw: Vec<f64> = (0..64 * 64).map(|i| (i % 97) as f64 * 3.0).collect();
        write_mact(&path, &Tensor::new(vec![64, 64], raw.clone()).unwrap(), DType::F64).unwrap();
        let img = ingest_image(&path).unwrap();
        assert_eq!(img.shape(), &[64, 64]);
        assert_eq!(img.max(), 1.0);
        for (got, r) in img.data().iter().zip(&raw) {
            assert_eq!(*got, r / 288.0);
        }
    }

    #[test]
    fn ingested_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Tensor> = (0..3).map(|i| gen_phantom(&PhantomSpec { size: 8, ..Default::default() }, i)).collect();
        let counts = SplitCounts {
            train: 1,
            val: 1,
            test: 1,
        };
        build_dataset_from_images(&imgs, counts, "external", dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.test[0].bit_eq(&imgs[2]));
        assert_eq!(ds.study_code(), 1);
    }
}
