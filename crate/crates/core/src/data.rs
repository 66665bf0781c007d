//! Labeled grayscale datasets: the synthetic speckle-texture generator, image
//! folder loading and export, and the luma / channel-concatenation transforms
//! that build the classifier input.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;

/// ITU-R BT.601 luma weights for (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const MIN_IMAGE_SIDE: usize = 16;

/// A single-channel image with pixels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    label: usize,
}

impl GrayscaleImage {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, label: usize) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(shape_err!(
                "image is {height}x{width}, both sides must be at least {MIN_IMAGE_SIDE}"
            ));
        }
        if pixels.len() != height * width {
            return Err(shape_err!(
                "{} pixels do not fill a {height}x{width} image",
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            height,
            width,
            label,
        })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// `[1, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.pixels, (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// An immutable labeled image collection with a fixed class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<GrayscaleImage>,
    class_names: Vec<String>,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(images: Vec<GrayscaleImage>, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(config_err!("need at least 2 classes, got {}", class_names.len()));
        }
        let (height, width) = match images.first() {
            Some(img) => (img.height, img.width),
            None => return Err(config_err!("dataset has no images")),
        };
        for img in &images {
            if img.height != height || img.width != width {
                return Err(shape_err!(
                    "mixed image sizes: {}x{} and {height}x{width}",
                    img.height,
                    img.width
                ));
            }
            if img.label >= class_names.len() {
                return Err(Error::Domain(format!(
                    "label {} out of range for {} classes",
                    img.label,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            images,
            class_names,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self) -> &[GrayscaleImage] {
        &self.images
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for img in &self.images {
            counts[img.label] += 1;
        }
        counts
    }

    /// Stacks the selected images into a `[B, 1, H, W]` tensor plus their labels.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = &self.images[i];
            data.extend_from_slice(&img.pixels);
            labels.push(img.label);
        }
        let t = Tensor::from_vec(data, (indices.len(), 1, self.height, self.width), device)?
            .to_dtype(dtype)?;
        Ok((t, labels))
    }

    /// Minibatch index lists for one epoch; a pure function of `(seed, epoch)`.
    pub fn batch_order(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut r = rng::stream(seed, &[rng::TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut r);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Sequential minibatches, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Stratified split that sends `floor(n_c / 3)` images of every class to the
    /// test side (the 2:1 train/test ratio), chosen by a seeded shuffle.
    pub fn stratified_split(self, seed: u64) -> Result<Split> {
        let k = self.num_classes();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, img) in self.images.iter().enumerate() {
            by_class[img.label].push(i);
        }
        let mut is_test = vec![false; self.len()];
        for (c, idx) in by_class.iter_mut().enumerate() {
            let mut r = rng::stream(seed, &[rng::TAG_SPLIT, c as u64]);
            idx.shuffle(&mut r);
            for &i in idx.iter().take(idx.len() / 3) {
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, img) in self.images.into_iter().enumerate() {
            if is_test[i] {
                test.push(img);
            } else {
                train.push(img);
            }
        }
        Ok(Split {
            train: Dataset::new(train, self.class_names.clone())?,
            test: Dataset::new(test, self.class_names)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Texture parameters of one synthetic class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDifficulty {
    /// Correlation length of the smooth texture field, in pixels.
    pub grain: f64,
    /// Standard deviation of the multiplicative speckle noise.
    pub noise: f64,
    /// Additive shift of the mean intensity.
    pub brightness: f64,
}

impl ClassDifficulty {
    pub const fn new(grain: f64, noise: f64, brightness: f64) -> Self {
        Self {
            grain,
            noise,
            brightness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<ClassDifficulty>,
    /// Images per class, before the train/test split.
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// Four balanced classes separated mainly by grain size, 150 images each
    /// (100 train / 50 test after the split).
    fn default() -> Self {
        Self {
            classes: vec![
                ClassDifficulty::new(2.0, 0.25, 0.0),
                ClassDifficulty::new(3.0, 0.25, 0.0),
                ClassDifficulty::new(4.0, 0.25, 0.0),
                ClassDifficulty::new(5.0, 0.25, 0.0),
            ],
            counts: vec![150; 4],
            image_size: 64,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    /// Four textures of equal grain separated by mean intensity. Classes 1
    /// and 2 sit closer together than an 8/255 perturbation can shift a mean,
    /// classes 0 and 3 are far from everything.
    pub fn imbalanced_difficulty(image_size: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes: vec![
                ClassDifficulty::new(3.0, 0.30, -0.15),
                ClassDifficulty::new(3.0, 0.30, 0.0),
                ClassDifficulty::new(3.0, 0.30, 0.03),
                ClassDifficulty::new(3.0, 0.30, 0.15),
            ],
            counts: vec![per_class; 4],
            image_size,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(config_err!("synthetic spec needs K >= 2 classes, got {}", self.classes.len()));
        }
        if self.counts.len() != self.classes.len() {
            return Err(config_err!(
                "{} counts given for {} classes",
                self.counts.len(),
                self.classes.len()
            ));
        }
        if let Some(c) = self.counts.iter().position(|&n| n == 0) {
            return Err(config_err!("class {c} has zero images"));
        }
        if self.image_size < MIN_IMAGE_SIDE {
            return Err(config_err!(
                "image_size {} below minimum {MIN_IMAGE_SIDE}",
                self.image_size
            ));
        }
        for (c, d) in self.classes.iter().enumerate() {
            if !(d.grain >= 1.0 && d.grain.is_finite()) {
                return Err(config_err!("class {c}: grain must be >= 1, got {}", d.grain));
            }
            if !(d.noise >= 0.0 && d.noise.is_finite()) {
                return Err(config_err!("class {c}: noise must be >= 0, got {}", d.noise));
            }
            if !d.brightness.is_finite() {
                return Err(config_err!("class {c}: brightness must be finite"));
            }
        }
        Ok(())
    }
}

const TEXTURE_MEAN: f64 = 0.5;
const TEXTURE_AMPLITUDE: f64 = 0.15;

/// Renders one speckle-texture image. Every class goes through this same
/// routine; only `diff` changes between classes.
fn render_texture(diff: &ClassDifficulty, size: usize, r: &mut impl Rng) -> Vec<f32> {
    let g = diff.grain;
    let cells = (size as f64 / g).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| r.sample(StandardNormal)).collect();
    let (oy, ox): (f64, f64) = (r.random_range(0.0..g), r.random_range(0.0..g));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + oy) / g;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = (x as f64 + ox) / g;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * cells + xx];
            let field = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
            let base = TEXTURE_MEAN + diff.brightness + TEXTURE_AMPLITUDE * field;
            let n: f64 = r.sample(StandardNormal);
            let v = base * (1.0 + diff.noise * n);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Generates the synthetic dataset and splits it 2:1 (train:test) per class.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.counts.iter().sum());
    for (c, (diff, &n)) in spec.classes.iter().zip(&spec.counts).enumerate() {
        for i in 0..n {
            let mut r = rng::stream(spec.seed, &[rng::TAG_DATA, c as u64, i as u64]);
            let px = render_texture(diff, spec.image_size, &mut r);
            images.push(GrayscaleImage::new(px, spec.image_size, spec.image_size, c)?);
        }
    }
    let names = (0..spec.num_classes()).map(|c| format!("class{c}")).collect();
    Dataset::new(images, names)?.stratified_split(spec.seed)
}

/// `Y = 0.299 R + 0.587 G + 0.114 B` over the channel axis of a `[3, H, W]`
/// or `[B, 3, H, W]` tensor, clamped to `[0, 1]`.
pub fn to_luma(rgb: &Tensor) -> Result<Tensor> {
    let rank = rgb.rank();
    if rank != 3 && rank != 4 {
        return Err(shape_err!("to_luma expects [3,H,W] or [B,3,H,W], got {:?}", rgb.dims()));
    }
    let axis = rank - 3;
    if rgb.dim(axis)? != 3 {
        return Err(shape_err!("to_luma expects 3 channels, got {:?}", rgb.dims()));
    }
    let mut y: Option<Tensor> = None;
    for (c, w) in LUMA_WEIGHTS.iter().enumerate() {
        let term = rgb.narrow(axis, c, 1)?.affine(*w, 0.0)?;
        y = Some(match y {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(y.expect("three channels").clamp(0.0, 1.0)?)
}

/// Stacks `(feat1, feat2, y_c)` along the channel axis without touching values.
/// Works on rank-3 `[C, H, W]` and batched rank-4 inputs alike.
pub fn concat_inputs(feat1: &Tensor, feat2: &Tensor, y_c: &Tensor) -> Result<Tensor> {
    let rank = feat1.rank();
    if rank != 3 && rank != 4 {
        return Err(shape_err!("concat_inputs expects rank 3 or 4, got {:?}", feat1.dims()));
    }
    let axis = rank - 3;
    for (name, t) in [("feat2", feat2), ("y_c", y_c)] {
        if t.rank() != rank {
            return Err(shape_err!("{name} has rank {}, expected {rank}", t.rank()));
        }
        let spatial_ok = t.dims()[axis + 1..] == feat1.dims()[axis + 1..];
        let batch_ok = axis == 0 || t.dim(0)? == feat1.dim(0)?;
        if !spatial_ok || !batch_ok {
            return Err(shape_err!(
                "{name} dims {:?} do not match feat1 dims {:?}",
                t.dims(),
                feat1.dims()
            ));
        }
    }
    if y_c.dim(axis)? != 1 {
        return Err(shape_err!("y_c must have one channel, got {:?}", y_c.dims()));
    }
    Ok(Tensor::cat(&[feat1, feat2, y_c], axis)?)
}

/// How a folder of images maps onto a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FolderLayout {
    /// Square side to resize every image to; images must already agree in size when unset.
    #[serde(default)]
    pub resize: Option<usize>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes one image file into luma pixels in `[0, 1]`.
pub fn read_luma(path: &Path, resize: Option<usize>) -> Result<(Vec<f32>, usize, usize)> {
    let item_err = |message: String| Error::Item {
        path: path.to_path_buf(),
        message,
    };
    let mut img = image::open(path).map_err(|e| item_err(e.to_string()))?;
    if let Some(side) = resize {
        img = img.resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut planar = vec![0f32; 3 * h * w];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = p.0[c].clamp(0.0, 1.0);
            }
        }
        let t = Tensor::from_vec(planar, (3, h, w), &Device::Cpu)?;
        let y = to_luma(&t)?.flatten_all()?.to_vec1::<f32>()?;
        Ok((y, h, w))
    } else {
        let luma = img.to_luma32f();
        Ok((luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), h, w))
    }
}

/// Loads a `root/<class_name>/*.{png,jpg}` tree. Classes are the sorted
/// subdirectory names; files are ordered by name within each class.
pub fn load_folder(root: &Path, layout: &FolderLayout) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(config_err!(
            "{} holds {} class directories, need at least 2",
            root.display(),
            class_dirs.len()
        ));
    }
    let mut names = Vec::new();
    let mut images = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)).collect();
        if files.is_empty() {
            return Err(config_err!("class directory {} has no images", dir.display()));
        }
        for f in files {
            let (px, h, w) = read_luma(&f, layout.resize)?;
            let img = GrayscaleImage::new(px, h, w, label).map_err(|e| Error::Item {
                path: f.clone(),
                message: e.to_string(),
            })?;
            images.push(img);
        }
        names.push(name);
    }
    Dataset::new(images, names)
}

/// Loads `root/train` and `root/test` when both exist, otherwise splits `root`.
pub fn load_folder_split(root: &Path, layout: &FolderLayout, seed: u64) -> Result<Split> {
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    if train_dir.is_dir() && test_dir.is_dir() {
        let train = load_folder(&train_dir, layout)?;
        let test = load_folder(&test_dir, layout)?;
        if train.class_names() != test.class_names() {
            return Err(config_err!("train and test class directories differ"));
        }
        Ok(Split { train, test })
    } else {
        load_folder(root, layout)?.stratified_split(seed)
    }
}

fn write_png(img: &GrayscaleImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| shape_err!("pixel buffer does not fit {}x{}", img.height, img.width))?;
    buf.save(path).map_err(|e| Error::Item {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `out/{train,test}/<class>/NNNNN.png` plus `out/manifest.csv`
/// (`path,label`, paths relative to `out`). Pixels are quantized to 8 bits.
pub fn export_split(split: &Split, out: &Path) -> Result<PathBuf> {
    let manifest = out.join("manifest.csv");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Item {
        path: manifest.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Item {
        path: manifest.clone(),
        message: e.to_string(),
    };
    w.write_record(["path", "label"]).map_err(csv_err)?;
    for (part, ds) in [("train", &split.train), ("test", &split.test)] {
        for name in ds.class_names() {
            let d = out.join(part).join(name);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, img) in ds.images().iter().enumerate() {
            let rel = format!("{part}/{}/{i:05}.png", ds.class_names()[img.label]);
            write_png(img, &out.join(&rel))?;
            w.write_record([rel, img.label.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            counts: vec![6; 4],
            image_size: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let spec = DatasetSpec {
            counts: vec![100; 4],
            image_size: 16,
            ..DatasetSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 400);
        let counts: Vec<usize> = a
            .train
            .class_counts()
            .iter()
            .zip(a.test.class_counts())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(counts, vec![100; 4]);
        assert_eq!(a.test.class_counts(), vec![33; 4]);
    }

    #[test]
    fn different_seed_changes_pixels() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&DatasetSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.train.images()[0].pixels(), b.train.images()[0].pixels());
    }

    #[test]
    fn split_is_disjoint() {
        let split = generate_synthetic(&small_spec()).unwrap();
        for t in split.test.images() {
            assert!(!split.train.images().iter().any(|x| x.pixels() == t.pixels()));
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = small_spec();
        s.counts[2] = 0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let s = DatasetSpec {
            image_size: 8,
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let s = DatasetSpec {
            classes: vec![ClassDifficulty::new(2.0, 0.1, 0.0)],
            counts: vec![3],
            ..small_spec()
        };
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }

    #[test]
    fn luma_values() {
        let white = Tensor::ones((3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = to_luma(&white).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let red = Tensor::cat(
            &[
                Tensor::ones((1, 2, 2), DType::F64, &Device::Cpu).unwrap(),
                Tensor::zeros((2, 2, 2), DType::F64, &Device::Cpu).unwrap(),
            ],
            0,
        )
        .unwrap();
        for v in to_luma(&red).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.299).abs() < 1e-12);
        }
        let px = Tensor::new(&[[[0.2f64]], [[0.4]], [[0.6]]], &Device::Cpu).unwrap();
        let v = to_luma(&px).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.3630).abs() < 1e-12);
    }

    #[test]
    fn luma_rejects_wrong_channels() {
        let t = Tensor::zeros((2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(to_luma(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_shapes_and_copy() {
        let dev = Device::Cpu;
        let f1 = Tensor::randn(0f32, 1.0, (4, 64, 64), &dev).unwrap();
        let f2 = Tensor::randn(0f32, 1.0, (4, 64, 64), &dev).unwrap();
        let y = Tensor::rand(0f32, 1.0, (1, 64, 64), &dev).unwrap();
        let xc = concat_inputs(&f1, &f2, &y).unwrap();
        assert_eq!(xc.dims(), &[9, 64, 64]);
        let c0 = xc.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(c0, f1.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let bad = Tensor::zeros((1, 63, 64), DType::F32, &dev).unwrap();
        assert!(matches!(concat_inputs(&f1, &f2, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch() {
        let split = generate_synthetic(&small_spec()).unwrap();
        let a = split.train.batch_order(3, 1, 5);
        assert_eq!(a, split.train.batch_order(3, 1, 5));
        assert_ne!(a, split.train.batch_order(3, 2, 5));
        let mut flat: Vec<usize> = a.concat();
        flat.sort();
        assert_eq!(flat, (0..split.train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn pixel_range_enforced() {
        assert!(GrayscaleImage::new(vec![1.5; 256], 16, 16, 0).is_err());
        assert!(GrayscaleImage::new(vec![0.5; 64], 8, 8, 0).is_err());
    }
}
