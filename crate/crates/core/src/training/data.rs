use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DataSpec, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const DEFAULT_NOISE: f64 = 0.35;

/// Semantic pairs over the CIFAR-10 classes: airplane/ship, automobile/truck,
/// bird/frog, cat/dog, deer/horse.
pub const CIFAR10_COARSE: [usize; 10] = [0, 1, 2, 3, 4, 3, 2, 4, 0, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    /// `[N, C, H, W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub coarse: Option<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        coarse: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return shape_err(format!("images {:?} for {} labels", images.shape(), labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, classes: num_classes });
        }
        if coarse.as_ref().is_some_and(|c| c.len() != labels.len()) {
            return shape_err(format!("{} coarse labels for {} examples", coarse.unwrap().len(), labels.len()));
        }
        Ok(Self { images, labels, coarse, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor<T> {
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![c, h, w], self.images.slab(i).to_vec()).expect("slab shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse: self.coarse.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn cast<S: Scalar>(&self) -> Dataset<S> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            coarse: self.coarse.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Fixed per-class generator parameters: grating orientation shared by a
/// coarse group (`class / 2`), spatial frequency set by the class within its
/// group, and a small per-class colour offset.
fn class_pattern(class: usize, classes: usize) -> (f64, f64, [f64; 3]) {
    let groups = classes.div_ceil(2);
    let theta = PI * (class / 2) as f64 / groups as f64;
    let freq = if class.is_multiple_of(2) { 1.5 } else { 3.0 };
    let mut colour = [0.0; 3];
    colour[class % 3] = 0.3 * if (class / 3).is_multiple_of(2) { 1.0 } else { -1.0 };
    (theta, freq, colour)
}

/// Structured class-conditional 3-channel images on a `size x size` grid:
/// oriented gratings with a random phase, a class colour offset and Gaussian
/// noise. Labels cycle so class counts differ by at most one; coarse labels
/// pair consecutive classes.
pub fn make_synthetic<T: Scalar>(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    make_synthetic_with(n, classes, size, DEFAULT_NOISE, seed, Split::Train)
}

pub fn make_synthetic_with<T: Scalar>(
    n: usize,
    classes: usize,
    size: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset<T>> {
    if classes == 0 || n < classes {
        return Err(Error::Config(format!("synthetic set needs n >= classes > 0, got n={n}, classes={classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (theta, freq, colour) = class_pattern(class, classes);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (ct, st) = (theta.cos(), theta.sin());
        for tint in colour {
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * ct + y as f64 * st) / size as f64;
                    let v = (2.0 * PI * freq * u + phase).cos() + tint + normal.sample(&mut rng);
                    data.push(T::lit(v));
                }
            }
        }
        labels.push(class);
    }
    let coarse = labels.iter().map(|&l| l / 2).collect();
    Dataset::new(Tensor::new(vec![n, 3, size, size], data)?, labels, Some(coarse), classes, split)
}

/// One raw CIFAR-10 binary record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// 3x1024 channel-major bytes.
    pub pixels: Vec<u8>,
}

pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks(CIFAR_RECORD)
        .map(|r| {
            if r[0] > 9 {
                return Err(Error::Label { label: r[0] as usize, classes: 10 });
            }
            Ok(CifarRecord { label: r[0], pixels: r[1..].to_vec() })
        })
        .collect()
}

pub fn write_cifar10_bin(path: &Path, records: &[CifarRecord]) -> Result<()> {
    let mut bytes = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS || r.label > 9 {
            return Err(Error::Format(format!("invalid CIFAR-10 record (label {}, {} pixels)", r.label, r.pixels.len())));
        }
        bytes.push(r.label);
        bytes.extend_from_slice(&r.pixels);
    }
    write_atomic(path, &bytes)
}

/// Records from every file, in order, as a `[N, 3, 32, 32]` dataset with
/// pixels scaled to `[0, 1]` and then standardized when `norm` is given.
pub fn load_cifar10_bin<T: Scalar, P: AsRef<Path>>(
    paths: &[P],
    norm: Option<&Normalization>,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset<T>> {
    let mut records = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        records.extend(parse_cifar10_records(&bytes)?);
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
    }
    if let Some(l) = limit {
        records.truncate(l);
    }
    if let Some(n) = norm {
        if n.mean.len() != 3 || n.std.len() != 3 || n.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("CIFAR normalization needs 3 means and 3 positive stds".into()));
        }
    }
    let mut data = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    for r in &records {
        for (i, &p) in r.pixels.iter().enumerate() {
            let mut v = p as f64 / 255.0;
            if let Some(n) = norm {
                let c = i / 1024;
                v = (v - n.mean[c]) / n.std[c];
            }
            data.push(T::lit(v));
        }
    }
    let labels: Vec<usize> = records.iter().map(|r| r.label as usize).collect();
    let coarse = labels.iter().map(|&l| CIFAR10_COARSE[l]).collect();
    Dataset::new(Tensor::new(vec![records.len(), 3, 32, 32], data)?, labels, Some(coarse), 10, split)
}

/// Seed offset separating the synthetic validation split from training.
const VAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Training and validation splits described by `spec` for a model taking
/// `in_channels x image_size x image_size` inputs over `num_classes` classes.
pub fn prepare_data<T: Scalar>(
    spec: &DataSpec,
    in_channels: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if spec.num_classes() != num_classes {
        return Err(Error::Config(format!("data has {} classes, model {num_classes}", spec.num_classes())));
    }
    if in_channels != 3 {
        return Err(Error::Config(format!("datasets are RGB; model takes {in_channels} channels")));
    }
    match spec {
        DataSpec::Synthetic { train, val, classes, noise } => Ok((
            make_synthetic_with(*train, *classes, image_size, *noise, seed, Split::Train)?,
            make_synthetic_with(*val, *classes, image_size, *noise, seed ^ VAL_SEED_OFFSET, Split::Val)?,
        )),
        DataSpec::Cifar10 { train_files, test_files, limit, normalization } => {
            if image_size != 32 {
                return Err(Error::Config(format!("CIFAR-10 images are 32x32; model expects {image_size}")));
            }
            Ok((
                load_cifar10_bin(train_files, Some(normalization), *limit, Split::Train)?,
                load_cifar10_bin(test_files, Some(normalization), *limit, Split::Test)?,
            ))
        }
    }
}

/// Random augmentation drawn for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Content moves right by `dx` and down by `dy`.
    pub dx: isize,
    pub dy: isize,
}

impl AugmentParams {
    pub fn sample<R: Rng>(rng: &mut R, max_shift: usize) -> Self {
        let m = max_shift as i64;
        let flip = rng.random_bool(0.5);
        let dx = rng.random_range(-m..=m) as isize;
        let dy = rng.random_range(-m..=m) as isize;
        Self { flip, dx, dy }
    }
}

/// Horizontal mirror then zero-padded shift of one `[C, H, W]` image.
pub fn augment_with<T: Scalar>(image: &Tensor<T>, p: AugmentParams) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return shape_err(format!("augment expects [C,H,W], got {:?}", image.shape()));
    }
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - p.dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let mut sx = x as isize - p.dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                if p.flip {
                    sx = w as isize - 1 - sx;
                }
                dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Random horizontal flip (p = 0.5) and shift of up to `max_shift` pixels.
pub fn augment<T: Scalar, R: Rng>(image: &Tensor<T>, rng: &mut R, max_shift: usize) -> Result<Tensor<T>> {
    augment_with(image, AugmentParams::sample(rng, max_shift))
}

/// Augment every image of a `[B, C, H, W]` batch independently.
pub fn augment_batch<T: Scalar, R: Rng>(images: &Tensor<T>, rng: &mut R, max_shift: usize) -> Result<Tensor<T>> {
    let s = images.shape().to_vec();
    let mut data = Vec::with_capacity(images.numel());
    for b in 0..s[0] {
        let img = Tensor::new(s[1..].to_vec(), images.slab(b).to_vec())?;
        data.extend(augment(&img, rng, max_shift)?.into_data());
    }
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[2, 6, 6], |i| i as f64 + 1.0)
    }

    #[test]
    fn noop_is_identity() {
        let x = ramp();
        assert_eq!(augment_with(&x, AugmentParams::default()).unwrap(), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = ramp();
        let f = AugmentParams { flip: true, ..Default::default() };
        assert_eq!(augment_with(&augment_with(&x, f).unwrap(), f).unwrap(), x);
    }

    #[test]
    fn shift_matches_manual_slice() {
        let x = Tensor::from_fn(&[1, 8, 8], |i| i as f64 + 1.0);
        let p = AugmentParams { flip: false, dx: 4, dy: 0 };
        let y = augment_with(&x, p).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if c < 4 { 0.0 } else { x.data()[r * 8 + c - 4] };
                assert_eq!(y.data()[r * 8 + c], want);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic::<f32>(40, 4, 8, 3).unwrap();
        let b = make_synthetic::<f32>(40, 4, 8, 3).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert_eq!(a.coarse.as_ref().unwrap()[3], 1);
        assert!(make_synthetic::<f32>(3, 4, 8, 0).is_err());
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        write_cifar10_bin(&path, &[CifarRecord { label: 7, pixels: vec![255; CIFAR_PIXELS] }]).unwrap();
        let d = load_cifar10_bin::<f32, _>(&[&path], None, None, Split::Train).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert!(d.images.data().iter().all(|&v| v == 1.0));
        assert_eq!(d.coarse.unwrap(), vec![4]);
    }

    #[test]
    fn cifar_rejects_truncation_and_bad_labels() {
        assert!(matches!(parse_cifar10_records(&[0u8; 3072]), Err(Error::Format(_))));
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar10_records(&rec), Err(Error::Label { label: 10, .. })));
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let imgs = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), vec![0, 3], None, 3, Split::Train).is_err());
        assert!(Dataset::new(imgs, vec![0, 1], Some(vec![0]), 3, Split::Train).is_err());
    }
}
