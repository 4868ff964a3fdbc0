//! Dataset ingestion, the synthetic complex dataset, and deterministic
//! batching.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctensor::{io, ComplexTensor, Real, Rng, Tensor};
use crate::encodings::{encode, Encoding};
use crate::{CdsError, Result};

pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_VAL: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub inputs: ComplexTensor<T>,
    pub labels: Vec<usize>,
    pub encoding: Encoding,
}

impl<T: Real> LabeledBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameters of the synthetic complex dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the complex noise, `E|n|² = noise²`.
    pub noise: f64,
    /// Half-width of the uniform log-magnitude range of the global scale.
    pub log_mag: f64,
    /// Std (pixels) of the Gaussian blur applied to the white-noise
    /// templates; 0 keeps them white.
    #[serde(default)]
    pub smoothing: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self { classes, per_class, size, channels: 2, noise: 0.1, log_mag: 0.5, smoothing: 2.0, seed }
    }

    /// Items per split: `per_class` per class for training, a fifth of that
    /// (at least one) for validation and test.
    pub fn split_len(&self, split: Split) -> usize {
        let per = match split {
            Split::Train => self.per_class,
            Split::Val | Split::Test => (self.per_class / 5).max(1),
        };
        per * self.classes
    }
}

const TEMPLATE_STREAM: u64 = 1 << 40;

/// Separable Gaussian blur of a square plane with wrap-around borders.
fn blur_periodic(plane: &mut [Complex64], size: usize, std: f64) {
    let radius = (3.0 * std).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * std * std)).exp()).collect();
    let at = |i: usize, d: isize| (i as isize + d).rem_euclid(size as isize) as usize;
    let mut tmp = vec![Complex64::new(0.0, 0.0); plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (-radius..=radius).map(|d| plane[y * size + at(x, d)] * kernel[(d + radius) as usize]).sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = (-radius..=radius).map(|d| tmp[at(y, d) * size + x] * kernel[(d + radius) as usize]).sum();
        }
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1 << 32,
        Split::Test => 2 << 32,
    }
}

#[derive(Debug)]
struct Synth {
    spec: SynthSpec,
    templates: Vec<ComplexTensor<f64>>,
}

impl Synth {
    fn new(spec: SynthSpec) -> Result<Self> {
        if spec.classes == 0 || spec.per_class == 0 || spec.size == 0 || spec.channels == 0 {
            return Err(CdsError::Parameter("synthetic dataset needs at least one class, item, pixel and channel".into()));
        }
        let shape = [spec.channels, spec.size, spec.size];
        let n: usize = shape.iter().product();
        let std = std::f64::consts::FRAC_1_SQRT_2;
        let templates = (0..spec.classes)
            .map(|k| {
                let mut rng = Rng::stream(spec.seed, TEMPLATE_STREAM + k as u64);
                let mut vals: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.normal(0.0, std), rng.normal(0.0, std))).collect();
                if spec.smoothing > 0.0 {
                    for plane in vals.chunks_mut(spec.size * spec.size) {
                        blur_periodic(plane, spec.size, spec.smoothing);
                    }
                    let power = vals.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
                    vals.iter_mut().for_each(|z| *z /= power.sqrt());
                }
                ComplexTensor::from_complex(&shape, &vals)
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, templates })
    }

    fn label(&self, i: usize) -> usize {
        i % self.spec.classes
    }

    fn sample(&self, split: Split, i: usize) -> ComplexTensor<f64> {
        let mut rng = Rng::stream(self.spec.seed, split_stream(split) + i as u64);
        let theta = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let rho = rng.uniform(-self.spec.log_mag, self.spec.log_mag);
        let s = Complex64::from_polar(rho.exp(), theta);
        let std = self.spec.noise * std::f64::consts::FRAC_1_SQRT_2;
        let t = &self.templates[self.label(i)];
        let vals: Vec<Complex64> = t
            .iter()
            .map(|z| {
                let n = if self.spec.noise > 0.0 {
                    Complex64::new(rng.normal(0.0, std), rng.normal(0.0, std))
                } else {
                    Complex64::new(0.0, 0.0)
                };
                z * s + n
            })
            .collect();
        ComplexTensor::from_complex(t.shape(), &vals).expect("template shape")
    }
}

#[derive(Debug)]
enum Source {
    /// 8-bit RGB records, `3 × side × side` bytes each.
    Rgb { pixels: Vec<u8>, labels: Vec<u8>, side: usize },
    Synth(Synth),
    /// Pre-encoded complex items `[N, C, H, W]`.
    Complex { items: ComplexTensor<f64>, labels: Vec<usize> },
}

/// A view of one split of a dataset with a deterministic shuffle seed.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    source: Arc<Source>,
    /// Item ids within the source.
    items: Arc<Vec<usize>>,
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub encoding: Encoding,
    pub num_classes: usize,
}

/// The three splits of a dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: DatasetHandle,
    pub val: DatasetHandle,
    pub test: DatasetHandle,
}

impl Splits {
    pub fn get(&self, split: Split) -> &DatasetHandle {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn with_encoding(self, encoding: Encoding) -> Self {
        Self {
            train: self.train.with_encoding(encoding),
            val: self.val.with_encoding(encoding),
            test: self.test.with_encoding(encoding),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { train: self.train.with_seed(seed), val: self.val.with_seed(seed), test: self.test.with_seed(seed) }
    }
}

/// Parses concatenated CIFAR records: `label_bytes` label bytes (the last
/// one is used) followed by 3072 pixel bytes.
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        return Err(CdsError::Format(format!(
            "file size {} is not a multiple of the {record}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1];
        if label as usize >= num_classes {
            return Err(CdsError::Format(format!("record {i}: label {label} outside 0..{num_classes}")));
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[label_bytes..]);
    }
    Ok((pixels, labels))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        CdsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn rgb_splits(name: &str, train: (Vec<u8>, Vec<u8>), test: (Vec<u8>, Vec<u8>), num_classes: usize) -> Result<Splits> {
    let n_train = train.1.len();
    if n_train <= CIFAR_VAL {
        return Err(CdsError::Format(format!("{name}: {n_train} training records, need more than {CIFAR_VAL}")));
    }
    let make = |source: Arc<Source>, split, items: Vec<usize>| DatasetHandle {
        source,
        items: Arc::new(items),
        name: name.into(),
        split,
        seed: 0,
        encoding: Encoding::Sliding,
        num_classes,
    };
    let train_src = Arc::new(Source::Rgb { pixels: train.0, labels: train.1, side: CIFAR_SIDE });
    let n_test = test.1.len();
    let test_src = Arc::new(Source::Rgb { pixels: test.0, labels: test.1, side: CIFAR_SIDE });
    Ok(Splits {
        train: make(train_src.clone(), Split::Train, (0..n_train - CIFAR_VAL).collect()),
        val: make(train_src, Split::Val, (n_train - CIFAR_VAL..n_train).collect()),
        test: make(test_src, Split::Test, (0..n_test).collect()),
    })
}

/// Loads CIFAR-10 from `data_batch_{1..5}.bin` and `test_batch.bin`. The
/// validation split is the last 5000 records of batch 5.
pub fn load_cifar10_bin(dir: &Path) -> Result<Splits> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for b in 1..=5 {
        let (p, l) = parse_cifar_records(&read_file(&dir.join(format!("data_batch_{b}.bin")))?, 1, 10)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let test = parse_cifar_records(&read_file(&dir.join("test_batch.bin"))?, 1, 10)?;
    rgb_splits("cifar10", (pixels, labels), test, 10)
}

/// Loads CIFAR-100 (`train.bin`, `test.bin`; fine labels).
pub fn load_cifar100_bin(dir: &Path) -> Result<Splits> {
    let train = parse_cifar_records(&read_file(&dir.join("train.bin"))?, 2, 100)?;
    let test = parse_cifar_records(&read_file(&dir.join("test.bin"))?, 2, 100)?;
    rgb_splits("cifar100", train, test, 100)
}

/// Builds the synthetic complex dataset. Items are generated on demand and
/// depend only on the seed, split and index.
pub fn synth_complex_dataset(spec: SynthSpec) -> Result<Splits> {
    let classes = spec.classes;
    let lens = [Split::Train, Split::Val, Split::Test].map(|s| spec.split_len(s));
    let seed = spec.seed;
    let source = Arc::new(Source::Synth(Synth::new(spec)?));
    let make = |split, n: usize| DatasetHandle {
        source: source.clone(),
        items: Arc::new((0..n).collect()),
        name: "synthetic".into(),
        split,
        seed,
        encoding: Encoding::Native,
        num_classes: classes,
    };
    Ok(Splits { train: make(Split::Train, lens[0]), val: make(Split::Val, lens[1]), test: make(Split::Test, lens[2]) })
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Input channels after encoding.
    pub fn channels(&self) -> usize {
        match &*self.source {
            Source::Synth(s) => s.spec.channels,
            Source::Complex { items, .. } => items.shape()[1],
            Source::Rgb { .. } => self.encoding.channels(),
        }
    }

    pub fn image_size(&self) -> usize {
        match &*self.source {
            Source::Synth(s) => s.spec.size,
            Source::Complex { items, .. } => items.shape()[2],
            Source::Rgb { side, .. } => *side,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(&*self.source, Source::Synth(_))
    }

    /// Selects the colour encoding for RGB sources; complex sources keep
    /// their native encoding.
    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        if let Source::Rgb { .. } = &*self.source {
            self.encoding = encoding;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The first `n` items of the split.
    pub fn subset(&self, n: usize) -> Self {
        let mut h = self.clone();
        h.items = Arc::new(self.items[..n.min(self.len())].to_vec());
        h
    }

    pub fn label(&self, i: usize) -> usize {
        let id = self.items[i];
        match &*self.source {
            Source::Rgb { labels, .. } => labels[id] as usize,
            Source::Synth(s) => s.label(id),
            Source::Complex { labels, .. } => labels[id],
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// Raw RGB image `[3, H, W]` in `[0, 1]` for RGB sources.
    pub fn rgb(&self, i: usize) -> Result<Tensor<f64>> {
        let id = *self.items.get(i).ok_or_else(|| CdsError::Parameter(format!("item {i} out of range")))?;
        match &*self.source {
            Source::Rgb { pixels, side, .. } => {
                let n = 3 * side * side;
                let vals = pixels[id * n..(id + 1) * n].iter().map(|&b| b as f64 / 255.0).collect();
                Tensor::from_vec(&[3, *side, *side], vals)
            }
            _ => Err(CdsError::Parameter(format!("{} has no RGB images", self.name))),
        }
    }

    /// Encoded item `i` as `[C, H, W]` with its label.
    pub fn get(&self, i: usize) -> Result<(ComplexTensor<f64>, usize)> {
        let id = *self.items.get(i).ok_or_else(|| CdsError::Parameter(format!("item {i} out of range")))?;
        let x = match &*self.source {
            Source::Rgb { .. } => encode(&self.rgb(i)?, self.encoding)?.tensor,
            Source::Synth(s) => s.sample(self.split, id),
            Source::Complex { items, .. } => items.index_axis0(id)?,
        };
        Ok((x, self.label(i)))
    }

    /// Stacks the given items into a batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<LabeledBatch<T>> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.get(i)?;
            xs.push(x);
            labels.push(y);
        }
        Ok(LabeledBatch { inputs: ComplexTensor::stack(&xs)?.cast(), labels, encoding: self.encoding })
    }

    /// Item order for `epoch`, determined by the seed and the epoch alone.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        Rng::stream(self.seed ^ 0x5348_5546_464c_4521, epoch).permutation(self.len())
    }

    /// Shuffled batches for one epoch; the last batch may be partial.
    pub fn batches<T: Real>(&self, batch_size: usize, epoch: u64) -> Result<Batches<'_, T>> {
        self.batches_in_order(batch_size, self.epoch_order(epoch))
    }

    /// Unshuffled batches, for evaluation.
    pub fn sequential_batches<T: Real>(&self, batch_size: usize) -> Result<Batches<'_, T>> {
        self.batches_in_order(batch_size, (0..self.len()).collect())
    }

    fn batches_in_order<T: Real>(&self, batch_size: usize, order: Vec<usize>) -> Result<Batches<'_, T>> {
        if batch_size == 0 {
            return Err(CdsError::Parameter("batch size must be at least 1".into()));
        }
        Ok(Batches { handle: self, order, batch_size, pos: 0, _t: std::marker::PhantomData })
    }

    /// Materializes the split as a `CDS1` tensor `[N, C, H, W]`
    /// (`inputs.cds`) plus `manifest.json` in `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let all: Vec<usize> = (0..self.len()).collect();
        let batch = self.batch::<f64>(&all)?;
        let file = std::fs::File::create(dir.join("inputs.cds"))?;
        io::write_tensor(&batch.inputs, std::io::BufWriter::new(file))?;
        let manifest = Manifest {
            name: self.name.clone(),
            split: self.split,
            encoding: self.encoding,
            num_classes: self.num_classes,
            shape: batch.inputs.shape().to_vec(),
            labels: batch.labels,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a split written by [`DatasetHandle::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
        let items = io::read_tensor(std::io::BufReader::new(std::fs::File::open(dir.join("inputs.cds"))?))?
            .into_precision::<f64>();
        if items.shape() != manifest.shape.as_slice() || items.shape().len() != 4 || manifest.labels.len() != items.shape()[0] {
            return Err(CdsError::Format(format!(
                "manifest shape {:?} / {} labels do not match tensor {:?}",
                manifest.shape,
                manifest.labels.len(),
                items.shape()
            )));
        }
        if let Some(bad) = manifest.labels.iter().find(|&&l| l >= manifest.num_classes) {
            return Err(CdsError::Format(format!("label {bad} outside 0..{}", manifest.num_classes)));
        }
        let n = manifest.labels.len();
        Ok(Self {
            source: Arc::new(Source::Complex { items, labels: manifest.labels }),
            items: Arc::new((0..n).collect()),
            name: manifest.name,
            split: manifest.split,
            seed: 0,
            encoding: manifest.encoding,
            num_classes: manifest.num_classes,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    split: Split,
    encoding: Encoding,
    num_classes: usize,
    shape: Vec<usize>,
    labels: Vec<usize>,
}

/// Batch iterator over a fixed item order.
pub struct Batches<'a, T> {
    handle: &'a DatasetHandle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T> Batches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Real> Iterator for Batches<'_, T> {
    type Item = Result<LabeledBatch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.handle.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_records(n: usize, label_bytes: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for i in 0..n {
            for _ in 0..label_bytes {
                out.push((i % 10) as u8);
            }
            out.extend((0..CIFAR_PIXELS).map(|k| ((k + i) % 256) as u8));
        }
        out
    }

    #[test]
    fn record_parsing_is_byte_exact() {
        let bytes = fake_records(3, 1);
        let (px, labels) = parse_cifar_records(&bytes, 1, 10).unwrap();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(px.len(), 3 * CIFAR_PIXELS);
        assert_eq!(px[CIFAR_PIXELS + 5], 6);

        let src = Arc::new(Source::Rgb { pixels: px, labels, side: 32 });
        let h = DatasetHandle {
            source: src,
            items: Arc::new(vec![0, 1, 2]),
            name: "t".into(),
            split: Split::Train,
            seed: 0,
            encoding: Encoding::Sliding,
            num_classes: 10,
        };
        let rgb = h.rgb(1).unwrap();
        assert_eq!(rgb.data()[5], 6.0 / 255.0);
        assert_eq!(rgb.data()[1024], ((1024 + 1) % 256) as f64 / 255.0);
        let (x, y) = h.get(2).unwrap();
        assert_eq!(y, 2);
        assert_eq!(x.shape(), &[2, 32, 32]);
    }

    #[test]
    fn record_errors() {
        let mut bytes = fake_records(2, 1);
        assert!(matches!(parse_cifar_records(&bytes[1..], 1, 10), Err(CdsError::Format(_))));
        bytes[CIFAR_PIXELS + 1] = 10;
        assert!(matches!(parse_cifar_records(&bytes, 1, 10), Err(CdsError::Format(_))));
        let fine = fake_records(2, 2);
        assert_eq!(parse_cifar_records(&fine, 2, 100).unwrap().1, vec![0, 1]);
    }

    #[test]
    fn synthetic_noise_free_sample_is_scaled_template() {
        let mut spec = SynthSpec::new(3, 5, 4, 11);
        spec.noise = 0.0;
        spec.log_mag = 0.0;
        let splits = synth_complex_dataset(spec.clone()).unwrap();
        let synth = Synth::new(spec).unwrap();
        let (x, y) = splits.train.get(4).unwrap();
        assert_eq!(y, 1);
        let t = &synth.templates[1];
        let s = x.get(0) / t.get(0);
        assert!((s.norm() - 1.0).abs() < 1e-12);
        for (a, b) in x.iter().zip(t.iter()) {
            assert!((a - b * s).norm() < 1e-12);
        }
    }

    #[test]
    fn smoothed_templates_have_unit_power_and_spatial_correlation() {
        let synth = Synth::new(SynthSpec::new(3, 1, 16, 2)).unwrap();
        for t in &synth.templates {
            let power = t.iter().map(|z| z.norm_sqr()).sum::<f64>() / t.len() as f64;
            assert!((power - 1.0).abs() < 1e-12);
            // Lag-1 horizontal correlation of a σ=2 blur is exp(-1/16) ≈ 0.94.
            let (mut num, mut den) = (0.0, 0.0);
            for c in 0..2 {
                for y in 0..16 {
                    for x in 0..16 {
                        let a = t.get((c * 16 + y) * 16 + x);
                        let b = t.get((c * 16 + y) * 16 + (x + 1) % 16);
                        num += (a * b.conj()).re;
                        den += a.norm_sqr();
                    }
                }
            }
            assert!(num / den > 0.8, "{}", num / den);
        }
    }

    #[test]
    fn division_nearest_template_is_exact_without_noise() {
        // Dividing by a reference pixel removes the global complex scale, so
        // the nearest template in that feature space is the true class.
        let mut spec = SynthSpec::new(10, 4, 8, 6);
        spec.noise = 0.0;
        let synth = Synth::new(spec.clone()).unwrap();
        let features = |z: &ComplexTensor<f64>| -> Vec<Complex64> {
            let r = z.get(0);
            z.iter().map(|v| crate::layers::divide(v, r, 0.0)).collect()
        };
        let protos: Vec<Vec<Complex64>> = synth.templates.iter().map(features).collect();
        let splits = synth_complex_dataset(spec).unwrap();
        for h in [&splits.train, &splits.val, &splits.test] {
            for i in 0..h.len() {
                let (x, y) = h.get(i).unwrap();
                let f = features(&x);
                let dist = |p: &Vec<Complex64>| p.iter().zip(&f).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
                let best = (0..protos.len()).min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b]))).unwrap();
                assert_eq!(best, y);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_complex_dataset(SynthSpec::new(4, 5, 8, 3)).unwrap();
        let b = synth_complex_dataset(SynthSpec::new(4, 5, 8, 3)).unwrap();
        assert_eq!(a.val.get(3).unwrap(), b.val.get(3).unwrap());
        assert_ne!(a.train.get(3).unwrap().0, a.val.get(3).unwrap().0);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.test.len(), 4);
    }

    #[test]
    fn batching() {
        let h = synth_complex_dataset(SynthSpec::new(2, 5, 2, 0)).unwrap().train;
        let sizes: Vec<usize> = h.batches::<f64>(4, 0).unwrap().map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_ne!(h.epoch_order(0), h.epoch_order(1));
        assert_eq!(h.epoch_order(1), h.clone().epoch_order(1));
        assert_ne!(h.epoch_order(1), h.clone().with_seed(9).epoch_order(1));
        assert_eq!(h.batches::<f32>(1, 0).unwrap().num_batches(), 10);
        assert!(h.batches::<f64>(0, 0).is_err());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = synth_complex_dataset(SynthSpec::new(2, 5, 3, 1)).unwrap().val;
        h.export(dir.path()).unwrap();
        let back = DatasetHandle::import(dir.path()).unwrap();
        assert_eq!(back.len(), h.len());
        assert_eq!(back.labels(), h.labels());
        assert_eq!(back.get(1).unwrap(), h.get(1).unwrap());
    }
}
