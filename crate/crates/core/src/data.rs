//! Datasets: IDX files and a procedurally generated shapes task.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::binio::Reader;
use crate::error::{Error, Magic, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::InputNorm;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

/// Images as bytes `count × height × width × channels`, one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() % per != 0 {
            return Err(Error::Invalid(format!(
                "{} image bytes do not divide into {height}x{width}x{channels} images",
                images.len()
            )));
        }
        if images.len() / per != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len() / per,
                labels: labels.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
            channels,
            split: Split::All,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `1 + max label`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// The images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.image_bytes();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            split: self.split,
            ..*self
        }
    }

    /// Seeded shuffle, then the first `⌈fraction·len⌉` go to the held-out
    /// split and the rest to training.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> (Self, Self) {
        let idx = shuffled_indices(self.len(), seed);
        let n_test = ((test_fraction * self.len() as f64).ceil() as usize).min(self.len());
        let mut test = self.subset(&idx[..n_test]);
        let mut train = self.subset(&idx[n_test..]);
        test.split = Split::Test;
        train.split = Split::Train;
        (train, test)
    }

    /// Per-channel mean and standard deviation of the `[0, 1]`-scaled pixels.
    pub fn channel_stats(&self) -> InputNorm {
        let c = self.channels;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (i, &p) in self.images.iter().enumerate() {
            let v = p as f64 / 255.0;
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        let n = (self.images.len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        InputNorm {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }
}

pub(crate) fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngState::new(seed));
    idx
}

fn be_u32(r: &mut Reader<'_>, what: &str) -> Result<u32> {
    Ok(u32::from_be_bytes(
        r.take(4, what)?.try_into().expect("4 bytes"),
    ))
}

fn idx_magic(r: &mut Reader<'_>, allowed: &[u32]) -> Result<u32> {
    let m = be_u32(r, "magic")?;
    if !allowed.contains(&m) {
        return Err(Error::BadMagic {
            expected: Magic(allowed[0].to_be_bytes()),
            found: Magic(m.to_be_bytes()),
        });
    }
    Ok(m)
}

/// Parses IDX image and label files (big-endian headers; 3-D images are
/// single channel, 4-D carry a trailing channel axis).
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(image_bytes);
    let magic = idx_magic(&mut r, &[IDX_IMAGES_MAGIC, IDX_IMAGES_RGB_MAGIC])?;
    let count = be_u32(&mut r, "image count")? as usize;
    let rows = be_u32(&mut r, "rows")? as usize;
    let cols = be_u32(&mut r, "cols")? as usize;
    let channels = if magic == IDX_IMAGES_RGB_MAGIC {
        be_u32(&mut r, "channels")? as usize
    } else {
        1
    };
    let images = r
        .take(count * rows * cols * channels, "image payload")?
        .to_vec();
    r.finish()?;

    let mut r = Reader::new(label_bytes);
    idx_magic(&mut r, &[IDX_LABELS_MAGIC])?;
    let n_labels = be_u32(&mut r, "label count")? as usize;
    if n_labels != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let labels = r.take(n_labels, "label payload")?.to_vec();
    r.finish()?;
    Dataset::new(images, labels, rows, cols, channels)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Encodes a dataset as (images, labels) IDX byte streams.
pub fn encode_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(20 + ds.images.len());
    if ds.channels == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    } else {
        img.extend_from_slice(&IDX_IMAGES_RGB_MAGIC.to_be_bytes());
    }
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.height as u32).to_be_bytes());
    img.extend_from_slice(&(ds.width as u32).to_be_bytes());
    if ds.channels != 1 {
        img.extend_from_slice(&(ds.channels as u32).to_be_bytes());
    }
    img.extend_from_slice(&ds.images);
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    (img, lab)
}

pub fn save_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (i, l) = encode_idx(ds);
    std::fs::write(images, i)?;
    std::fs::write(labels, l)?;
    Ok(())
}

/// Shape kinds of the synthetic task, in label order.
pub const SHAPE_NAMES: [&str; 10] = [
    "filled_square",
    "hollow_square",
    "disk",
    "ring",
    "plus",
    "cross",
    "triangle_up",
    "triangle_down",
    "horizontal_bar",
    "vertical_bar",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    /// Half-width of the uniform pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image_size: 28,
            samples_per_class: 500,
            noise: 0.2,
            seed: 0,
        }
    }
}

/// Whether the point `(u, v)` (shape-local coordinates, roughly `[-1, 1]`)
/// is inside shape `kind`. `t` is the stroke width in the same units.
fn inside(kind: usize, u: f64, v: f64, t: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let box_ = au <= 1.0 && av <= 1.0;
    match kind {
        0 => box_,
        1 => box_ && au.max(av) >= 1.0 - t,
        2 => u * u + v * v <= 1.0,
        3 => {
            let r = (u * u + v * v).sqrt();
            r <= 1.0 && r >= 1.0 - t
        }
        4 => box_ && (au <= t / 2.0 || av <= t / 2.0),
        5 => box_ && ((u - v).abs() <= t * 0.7 || (u + v).abs() <= t * 0.7),
        6 => av <= 1.0 && au <= (v + 1.0) / 2.0,
        7 => av <= 1.0 && au <= (1.0 - v) / 2.0,
        8 => au <= 1.0 && av <= t * 0.6,
        9 => av <= 1.0 && au <= t * 0.6,
        _ => unreachable!("shape kind {kind}"),
    }
}

/// Largest centre offset, as a fraction of the image size.
const JITTER: f64 = 0.16;

/// Renders a class-balanced shapes dataset. Sample `i` has label
/// `i mod classes`; position, size and intensity are jittered and uniform
/// noise is added. Same spec, same bytes.

pub fn generate_shapes(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::Invalid(format!(
            "shapes task supports 2..={} classes, got {}",
            SHAPE_NAMES.len(),
            spec.classes
        )));
    }
    let s = spec.image_size;
    if s < 12 {
        return Err(Error::Invalid(format!(
            "image_size {s} too small for shapes"
        )));
    }
    let total = spec.classes * spec.samples_per_class;
    let mut rng = RngState::new(spec.seed);
    let mut images = Vec::with_capacity(total * s * s);
    let mut labels = Vec::with_capacity(total);
    let sf = s as f64;
    for i in 0..total {
        let kind = i % spec.classes;
        let radius = rng.random_range(0.24 * sf..0.32 * sf);
        let shift = JITTER * sf;
        let cx = sf / 2.0 + rng.random_range(-shift..shift);
        let cy = sf / 2.0 + rng.random_range(-shift..shift);
        let fg = rng.random_range(0.6..1.0);
        let stroke = (0.09 * sf).max(2.0) / radius;
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5 - cx) / radius;
                let v = (y as f64 + 0.5 - cy) / radius;
                let base = if inside(kind, u, v, stroke) { fg } else { 0.0 };
                let noise = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..spec.noise)
                } else {
                    0.0
                };
                let val = (base + noise).clamp(0.0, 1.0);
                images.push((val * 255.0).round() as u8);
            }
        }
        labels.push(kind as u8);
    }
    Dataset::new(images, labels, s, s, 1)
}

/// One mini-batch: images `[B, H, W, C]` plus their labels and dataset
/// indices.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as an `H×W×C` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let s = self.images.shape();
        let n = s[1] * s[2] * s[3];
        Tensor::new(&s[1..], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image shape")
    }

    pub fn images_vec(&self) -> Vec<Tensor<T>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }
}

/// Seeded shuffled mini-batches over one epoch; the last batch may be
/// short. Pixels are scaled to `[0, 1]` and, if `normalize` is given,
/// standardized per channel.
pub fn batches<'a, T: Scalar>(
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    normalize: Option<&'a InputNorm>,
) -> impl Iterator<Item = Batch<T>> + 'a {
    assert!(batch_size >= 1, "batch_size must be positive");
    let order = shuffled_indices(ds.len(), seed);
    let (h, w, c) = (ds.height, ds.width, ds.channels);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |indices| {
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in &indices {
            data.extend(ds.image(i).iter().enumerate().map(|(k, &p)| {
                let v = p as f32 / 255.0;
                let v = match normalize {
                    Some(n) => (v - n.mean[k % c]) / n.std[k % c],
                    None => v,
                };
                T::from_f32(v)
            }));
        }
        Batch {
            images: Tensor::new(&[indices.len(), h, w, c], data).expect("batch shape"),
            labels: indices.iter().map(|&i| ds.label(i)).collect(),
            indices,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_shapes(&SyntheticSpec {
            classes: 4,
            samples_per_class: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            noise: 0.0,
            samples_per_class: 100,
            ..Default::default()
        };
        let a = generate_shapes(&spec).unwrap();
        let b = generate_shapes(&spec).unwrap();
        assert_eq!(a, b);
        for k in 0..10u8 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 100);
        }
        assert!(generate_shapes(&SyntheticSpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn batch_partition() {
        let ds = generate_shapes(&SyntheticSpec {
            classes: 2,
            samples_per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let sizes: Vec<usize> = batches::<f32>(&ds, 3, 1, None).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let a: Vec<Vec<usize>> = batches::<f32>(&ds, 3, 9, None).map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = batches::<f32>(&ds, 3, 9, None).map(|b| b.indices).collect();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for batch in batches::<f32>(&ds, 4, 2, None) {
            assert!(batch
                .images
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let ds = small();
        let (img, lab) = encode_idx(&ds);
        assert_eq!(parse_idx(&img, &lab).unwrap(), ds);

        let mut bad = img.clone();
        bad[3] = 0x05;
        assert!(matches!(parse_idx(&bad, &lab), Err(Error::BadMagic { .. })));

        let short = ds.subset(&[0, 1, 2]);
        let (_, lab3) = encode_idx(&short);
        assert!(matches!(
            parse_idx(&img, &lab3),
            Err(Error::CountMismatch {
                images: 20,
                labels: 3
            })
        ));

        match parse_idx(&img[..img.len() - 7], &lab) {
            Err(Error::Truncated { offset, what }) => {
                assert_eq!(offset, 16);
                assert_eq!(what, "image payload");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_header_arithmetic() {
        // A 60000×28×28 header with an all-zero payload.
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 60_000, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.resize(16 + 60_000 * 28 * 28, 0);
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, 60_000] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.resize(8 + 60_000, 0);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 60_000);
        assert_eq!((ds.height, ds.width, ds.channels), (28, 28, 1));
    }
}
