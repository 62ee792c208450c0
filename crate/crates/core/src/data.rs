//! Class datasets, class splits and episode sampling.
//!
//! Examples are stored per class in a fixed order. The first
//! `train_per_class` examples of each class form its train partition and the
//! rest its validation partition.

use std::fs;
use std::ops::Range;
use std::path::Path;

use image::imageops::FilterType;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zaplab_autograd::Tensor;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

/// Resize target for folder ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagePreset {
    /// 1 x 28 x 28 grayscale.
    Gray28,
    /// 3 x 84 x 84 colour.
    Rgb84,
}

impl ImagePreset {
    pub fn shape(self) -> [usize; 3] {
        match self {
            ImagePreset::Gray28 => [1, 28, 28],
            ImagePreset::Rgb84 => [3, 84, 84],
        }
    }
}

/// One example: class index and position within that class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleRef {
    pub class: usize,
    pub index: usize,
}

/// An example paired with the label the current head uses for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub example: ExampleRef,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDataset {
    image_shape: [usize; 3],
    class_names: Vec<String>,
    images: Vec<Vec<Vec<f64>>>,
    train_per_class: usize,
}

impl ClassDataset {
    /// Builds a dataset from per-class image lists; each image is `C*H*W` values.
    pub fn new(image_shape: [usize; 3], class_names: Vec<String>, images: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if class_names.len() != images.len() {
            return Err(Error::Dataset(format!(
                "{} class names for {} classes",
                class_names.len(),
                images.len()
            )));
        }
        let numel: usize = image_shape.iter().product();
        for (name, class) in class_names.iter().zip(&images) {
            if class.is_empty() {
                return Err(Error::Dataset(format!("class `{name}` has no examples")));
            }
            if class.iter().any(|im| im.len() != numel) {
                return Err(Error::Dataset(format!("class `{name}` has an image of the wrong size")));
            }
        }
        let train_per_class = images.iter().map(Vec::len).max().unwrap_or(0);
        Ok(ClassDataset {
            image_shape,
            class_names,
            images,
            train_per_class,
        })
    }

    /// Sets the train/validation boundary. Classes with fewer examples keep
    /// them all for training.
    pub fn with_train_per_class(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dataset("train_per_class must be positive".into()));
        }
        self.train_per_class = n;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.images.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.images[class].len()
    }

    pub fn train_per_class(&self) -> usize {
        self.train_per_class
    }

    pub fn train_range(&self, class: usize) -> Range<usize> {
        0..self.train_per_class.min(self.class_len(class))
    }

    pub fn validation_range(&self, class: usize) -> Range<usize> {
        self.train_range(class).end..self.class_len(class)
    }

    pub fn image(&self, ex: ExampleRef) -> &[f64] {
        &self.images[ex.class][ex.index]
    }

    /// Stacks examples into an `[n, C, H, W]` tensor.
    pub fn batch<'a, I>(&self, examples: I) -> Tensor
    where
        I: IntoIterator<Item = &'a ExampleRef>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for ex in examples {
            data.extend_from_slice(self.image(*ex));
            n += 1;
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(&[n, c, h, w], data).expect("image sizes are checked at construction")
    }

    /// Batch tensor plus labels for labeled examples.
    pub fn labeled_batch(&self, items: &[Labeled]) -> (Tensor, Vec<usize>) {
        let x = self.batch(items.iter().map(|l| &l.example));
        (x, items.iter().map(|l| l.label).collect())
    }

    /// SHA-256 over shape, class names, partition and pixel bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.image_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.train_per_class as u64).to_le_bytes());
        for (name, class) in self.class_names.iter().zip(&self.images) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((class.len() as u64).to_le_bytes());
            for im in class {
                for v in im {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn is_image_file(path: &Path) -> bool {
    let hidden = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'));
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    !hidden && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        out.push(entry?.path());
    }
    out.sort();
    Ok(out)
}

fn decode_image(path: &Path, preset: ImagePreset) -> Result<Vec<f64>> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let [c, h, w] = preset.shape();
    let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
    let (raw, channels) = match preset {
        ImagePreset::Gray28 => (img.to_luma8().into_raw(), 1),
        ImagePreset::Rgb84 => (img.to_rgb8().into_raw(), 3),
    };
    debug_assert_eq!(channels, c);
    // Interleaved HWC bytes to planar CHW in [0, 1].
    let mut out = vec![0.0; c * h * w];
    for (p, px) in raw.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + p] = f64::from(v) / 255.0;
        }
    }
    Ok(out)
}

/// Reads a class-per-directory image tree. Classes are the subdirectories in
/// lexicographic order; images within a class likewise. Files without a
/// png/jpg/jpeg extension are skipped.
pub fn load_imagefolder(root: &Path, preset: ImagePreset) -> Result<ClassDataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut names = Vec::new();
    let mut images = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<_> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} has no images", dir.display())));
        }
        let class = files
            .iter()
            .map(|f| decode_image(f, preset))
            .collect::<Result<Vec<_>>>()?;
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        images.push(class);
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", root.display())));
    }
    ClassDataset::new(preset.shape(), names, images)
}

struct Stroke {
    pts: [(f64, f64); 4],
}

impl Stroke {
    fn at(&self, t: f64) -> (f64, f64) {
        let u = 1.0 - t;
        let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
        let mut p = (0.0, 0.0);
        for (w, q) in b.iter().zip(&self.pts) {
            p.0 += w * q.0;
            p.1 += w * q.1;
        }
        p
    }
}

fn random_glyph(rng: &mut Rng) -> Vec<Stroke> {
    let n = rng.random_range(2..=4);
    (0..n)
        .map(|_| {
            let mut pts = [(0.0, 0.0); 4];
            for p in &mut pts {
                *p = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            }
            Stroke { pts }
        })
        .collect()
}

fn render(strokes: &[Stroke], size: usize, rng: &mut Rng) -> Vec<f64> {
    // Per-example deformation: control-point jitter, then an affine warp
    // about the image centre, a random stroke width and pixel noise.
    let jitter = Normal::new(0.0, 0.04).unwrap();
    let strokes: Vec<Stroke> = strokes
        .iter()
        .map(|st| {
            let mut pts = st.pts;
            for p in &mut pts {
                p.0 += jitter.sample(rng);
                p.1 += jitter.sample(rng);
            }
            Stroke { pts }
        })
        .collect();
    let rot: f64 = rng.random_range(-0.3..0.3);
    let (sx, sy): (f64, f64) = (rng.random_range(0.85..1.15), rng.random_range(0.85..1.15));
    let shear: f64 = rng.random_range(-0.15..0.15);
    let (dx, dy): (f64, f64) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let (s, c) = rot.sin_cos();
    let warp = |(x, y): (f64, f64)| {
        let (x, y) = (sx * (x - 0.5 + shear * (y - 0.5)), sy * (y - 0.5));
        (0.5 + dx + c * x - s * y, 0.5 + dy + s * x + c * y)
    };
    // Stroke half-width of about one pixel at 28 x 28, scaled with the image.
    let sigma_px = (size as f64 / 28.0).max(0.6) * rng.random_range(0.75..1.3);
    let reach = (3.0 * sigma_px).ceil() as isize;
    let mut img = vec![0.0f64; size * size];
    for stroke in &strokes {
        let steps = 4 * size;
        for k in 0..=steps {
            let (x, y) = warp(stroke.at(k as f64 / steps as f64));
            let (px, py) = (x * size as f64 - 0.5, y * size as f64 - 0.5);
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            for yy in cy - reach..=cy + reach {
                for xx in cx - reach..=cx + reach {
                    if yy < 0 || xx < 0 || yy >= size as isize || xx >= size as isize {
                        continue;
                    }
                    let d2 = (xx as f64 - px).powi(2) + (yy as f64 - py).powi(2);
                    let v = (-d2 / (2.0 * sigma_px * sigma_px)).exp();
                    let cell = &mut img[yy as usize * size + xx as usize];
                    *cell = cell.max(v);
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.1).unwrap();
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Procedural glyph dataset: every class is a random set of 2 to 4 cubic
/// Bezier strokes, and every example is that glyph under a small random
/// affine warp plus Gaussian pixel noise. Fully determined by `seed`.
pub fn synth_glyphs(n_classes: usize, n_per_class: usize, image_size: usize, seed: u64) -> Result<ClassDataset> {
    if n_per_class < 2 {
        return Err(Error::Dataset("synthetic glyphs need at least 2 examples per class".into()));
    }
    if n_classes == 0 || image_size < 4 {
        return Err(Error::Dataset("synthetic glyphs need classes and an image size of at least 4".into()));
    }
    let mut names = Vec::with_capacity(n_classes);
    let mut images = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let glyph = random_glyph(&mut seeded(derive_seed(seed, &[c as u64])));
        let class = (0..n_per_class)
            .map(|i| render(&glyph, image_size, &mut seeded(derive_seed(seed, &[c as u64, 1 + i as u64]))))
            .collect();
        names.push(format!("glyph{c:04}"));
        images.push(class);
    }
    ClassDataset::new([1, image_size, image_size], names, images)
}

/// Disjoint pretrain and transfer class sets (dataset class indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pretrain: Vec<usize>,
    pub transfer: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// Labeled train examples of the pretrain classes; label = position in `pretrain`.
    pub fn pretrain_train(&self, ds: &ClassDataset) -> Vec<Labeled> {
        labeled(&self.pretrain, |c| ds.train_range(c), usize::MAX)
    }

    pub fn pretrain_validation(&self, ds: &ClassDataset) -> Vec<Labeled> {
        labeled(&self.pretrain, |c| ds.validation_range(c), usize::MAX)
    }
}

/// All examples in `range(class)` (capped at `cap` per class) for the given
/// classes, labeled by position in `classes`.
pub fn labeled(classes: &[usize], range: impl Fn(usize) -> Range<usize>, cap: usize) -> Vec<Labeled> {
    let mut out = Vec::new();
    for (label, &class) in classes.iter().enumerate() {
        for index in range(class).take(cap) {
            out.push(Labeled {
                example: ExampleRef { class, index },
                label,
            });
        }
    }
    out
}

/// Seeded uniform choice of disjoint pretrain and transfer classes, each list
/// sorted ascending.
pub fn make_split(ds: &ClassDataset, n_pretrain: usize, n_transfer: usize, seed: u64) -> Result<SplitPlan> {
    let n = ds.num_classes();
    if n_pretrain + n_transfer > n {
        return Err(Error::Split(format!(
            "{n_pretrain} pretrain + {n_transfer} transfer classes exceed the {n} available"
        )));
    }
    let mut chosen = sample(&mut seeded(seed), n, n_pretrain + n_transfer).into_vec();
    let mut transfer = chosen.split_off(n_pretrain);
    chosen.sort_unstable();
    transfer.sort_unstable();
    Ok(SplitPlan {
        pretrain: chosen,
        transfer,
        seed,
    })
}

/// One ASB episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    /// Head label of the episode class.
    pub label: usize,
    pub inner: Vec<Labeled>,
    pub rand: Vec<Labeled>,
}

impl EpisodeBatch {
    /// `X_outer = X_inner ∪ X_rand`, inner examples first.
    pub fn outer(&self) -> Vec<Labeled> {
        self.inner.iter().chain(&self.rand).copied().collect()
    }
}

/// Samples a class uniformly from the pretrain split, `k` of its train
/// examples and `r` train examples uniformly from the whole pretrain split.
///
/// When `k` exceeds the class's train count every example is used once in a
/// shuffled order and the remainder is drawn with replacement.
pub fn sample_episode(ds: &ClassDataset, split: &SplitPlan, k: usize, r: usize, rng: &mut Rng) -> Result<EpisodeBatch> {
    if k == 0 || r == 0 {
        return Err(Error::InvalidArgument("episode sizes K and R must be at least 1".into()));
    }
    if split.pretrain.is_empty() {
        return Err(Error::Split("pretrain split is empty".into()));
    }
    let label = rng.random_range(0..split.pretrain.len());
    let class = split.pretrain[label];
    let n = ds.train_range(class).len();
    let idx: Vec<usize> = if k <= n {
        sample(rng, n, k).into_vec()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all.extend((n..k).map(|_| rng.random_range(0..n)));
        all
    };
    let inner = idx
        .into_iter()
        .map(|index| Labeled {
            example: ExampleRef { class, index },
            label,
        })
        .collect();

    let counts: Vec<usize> = split.pretrain.iter().map(|&c| ds.train_range(c).len()).collect();
    let total: usize = counts.iter().sum();
    let rand = (0..r)
        .map(|_| {
            let mut u = rng.random_range(0..total);
            let mut l = 0;
            while u >= counts[l] {
                u -= counts[l];
                l += 1;
            }
            Labeled {
                example: ExampleRef {
                    class: split.pretrain[l],
                    index: u,
                },
                label: l,
            }
        })
        .collect();
    Ok(EpisodeBatch { label, inner, rand })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_classes: usize, per_class: usize) -> ClassDataset {
        let images = (0..n_classes)
            .map(|c| (0..per_class).map(|i| vec![(c * 100 + i) as f64]).collect())
            .collect();
        let names = (0..n_classes).map(|c| format!("c{c}")).collect();
        ClassDataset::new([1, 1, 1], names, images).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_seed_dependent() {
        let a = synth_glyphs(5, 3, 28, 7).unwrap();
        let b = synth_glyphs(5, 3, 28, 7).unwrap();
        let c = synth_glyphs(5, 3, 28, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        let im = a.image(ExampleRef { class: 0, index: 0 });
        assert!(im.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(im.iter().any(|&v| v > 0.8), "glyph has ink");
        assert!(synth_glyphs(5, 1, 28, 7).is_err());
    }

    #[test]
    fn partitions() {
        let ds = tiny(2, 5).with_train_per_class(3).unwrap();
        assert_eq!(ds.train_range(0), 0..3);
        assert_eq!(ds.validation_range(1), 3..5);
        let ds = tiny(2, 2).with_train_per_class(3).unwrap();
        assert_eq!(ds.train_range(0), 0..2);
        assert!(ds.validation_range(0).is_empty());
    }

    #[test]
    fn split_errors_and_replay() {
        let ds = tiny(10, 2);
        assert!(make_split(&ds, 6, 5, 0).is_err());
        let s = make_split(&ds, 6, 4, 3).unwrap();
        assert_eq!(s, make_split(&ds, 6, 4, 3).unwrap());
        assert_eq!(s.pretrain.len() + s.transfer.len(), 10);
    }

    #[test]
    fn episode_shapes() {
        let ds = tiny(6, 4).with_train_per_class(3).unwrap();
        let split = make_split(&ds, 4, 2, 1).unwrap();
        let ep = sample_episode(&ds, &split, 1, 1, &mut seeded(0)).unwrap();
        assert_eq!(ep.outer().len(), 2);
        // K above the train count: each train example once, then reuse.
        let ep = sample_episode(&ds, &split, 7, 2, &mut seeded(2)).unwrap();
        assert_eq!(ep.inner.len(), 7);
        let mut first: Vec<usize> = ep.inner[..3].iter().map(|l| l.example.index).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2]);
        for l in ep.inner.iter().chain(&ep.rand) {
            assert!(l.example.index < 3, "only train examples");
            assert_eq!(split.pretrain[l.label], l.example.class);
        }
        assert!(ep.inner.iter().all(|l| l.label == ep.label));
        assert!(sample_episode(&ds, &split, 0, 1, &mut seeded(0)).is_err());
        let empty = SplitPlan {
            pretrain: vec![],
            transfer: vec![],
            seed: 0,
        };
        assert!(sample_episode(&ds, &empty, 1, 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn batch_layout() {
        let ds = tiny(3, 2);
        let x = ds.batch(&[ExampleRef { class: 2, index: 1 }, ExampleRef { class: 0, index: 0 }]);
        assert_eq!(x.shape(), &[2, 1, 1, 1]);
        assert_eq!(x.data(), &[201.0, 0.0]);
    }
}
