//! Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic textures) and
//! PGM/PPM image output.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images sharing one `[C, H, W]` shape, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::dim(format!(
                "{} pixels for {} images of shape {shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {l} out of range for {num_classes} classes")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageSet { shape, pixels, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, index: usize) -> Tensor {
        let n = self.per_image();
        Tensor::from_parts(self.shape.to_vec(), self.pixels[index * n..(index + 1) * n].to_vec())
    }

    /// NCHW batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let n = self.per_image();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("image index {i} out of range ({} images)", self.len())));
            }
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let n = self.per_image();
        let mut pixels = Vec::with_capacity(n * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        ImageSet { shape: self.shape, pixels, labels, num_classes: self.num_classes }
    }

    /// Indices whose label is in `classes`, in ascending order.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

/// A named dataset with its training partition and optional held-out
/// (test/validation) partition.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub train: ImageSet,
    pub test: Option<ImageSet>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated {what}")))
}

/// Parses an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageSet> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;
    let per = rows * cols;
    if per == 0 {
        return Err(Error::format(8, "zero image extent"));
    }
    let need = 16 + count * per;
    if images.len() < need {
        return Err(Error::format(
            images.len() as u64,
            format!("image payload truncated: {count} images need {need} bytes"),
        ));
    }

    let magic = be_u32(labels, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = be_u32(labels, 4, "label header")? as usize;
    if label_count != count {
        return Err(Error::format(4, format!("{label_count} labels for {count} images")));
    }
    if labels.len() < 8 + count {
        return Err(Error::format(labels.len() as u64, "label payload truncated"));
    }
    let label_bytes = &labels[8..8 + count];
    if let Some(pos) = label_bytes.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + pos as u64, format!("label {} out of range", label_bytes[pos])));
    }
    let pixels = images[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    ImageSet::new([1, rows, cols], pixels, labels, 10)
}

/// MNIST-format image and label files; `.gz` paths are decompressed.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    parse_idx(&read_bytes(images)?, &read_bytes(labels)?)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let start = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            start as u64,
            format!("truncated record: {} trailing bytes of {CIFAR_RECORD}", bytes.len() - start),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format((i * CIFAR_RECORD) as u64, format!("label byte {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    ImageSet::new([3, 32, 32], pixels, labels, 10)
}

/// Concatenates CIFAR-10 binary batch files in the given order.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let set = parse_cifar10(&read_bytes(p)?).map_err(|e| match e {
            Error::Format { offset, message } => {
                Error::format(offset, format!("{}: {message}", p.display()))
            }
            other => other,
        })?;
        pixels.extend_from_slice(set.pixels());
        labels.extend_from_slice(set.labels());
    }
    ImageSet::new([3, 32, 32], pixels, labels, 10)
}

/// Standard CIFAR-10 binary layout: `data_batch_{1..5}.bin` for training,
/// `test_batch.bin` held out.
pub fn load_cifar10_dir(dir: &Path) -> Result<Dataset> {
    let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok(Dataset {
        name: "cifar10".into(),
        train: load_cifar10_binary(&train)?,
        test: Some(load_cifar10_binary(&[dir.join("test_batch.bin")])?),
    })
}

/// MNIST layout with the conventional file names, optionally gzipped.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let pick = |stem: &str| {
        let plain = dir.join(stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    Ok(Dataset {
        name: "mnist".into(),
        train: load_idx(&pick("train-images-idx3-ubyte"), &pick("train-labels-idx1-ubyte"))?,
        test: Some(load_idx(&pick("t10k-images-idx3-ubyte"), &pick("t10k-labels-idx1-ubyte"))?),
    })
}

/// Round-half-up byte quantisation of a clamped `[0, 1]` value.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Serialises 3×32×32 images as CIFAR-10 binary records.
pub fn encode_cifar10(set: &ImageSet) -> Result<Vec<u8>> {
    if set.image_shape() != [3, 32, 32] {
        return Err(Error::arg(format!("CIFAR-10 records need 3×32×32 images, got {:?}", set.image_shape())));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels()[i] as u8);
        out.extend(set.image(i).data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

fn class_palette(class: usize, channels: usize) -> Vec<f64> {
    if channels == 1 {
        return vec![1.0];
    }
    let hue = class as f64 * 0.61803398875 % 1.0;
    (0..channels).map(|c| 0.6 + 0.4 * (2.0 * PI * (hue + c as f64 / channels as f64)).cos()).collect()
}

/// Seeded class-correlated textures: each class fixes a stripe orientation,
/// frequency and colour; each image adds random phase, a smooth gradient
/// and a few soft blobs.
pub fn synthetic_textures(count: usize, shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ImageSet> {
    if count == 0 {
        return Err(Error::arg("synthetic dataset needs at least one image"));
    }
    if num_classes == 0 || shape.contains(&0) {
        return Err(Error::arg("synthetic dataset needs positive classes and extents"));
    }
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * c * h * w);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..num_classes);
        let palette = class_palette(class, c);
        let theta = PI * class as f64 / num_classes as f64 + rng.gen_range(-0.15..0.15);
        let freq = 1.5 + (class % 3) as f64 + rng.gen_range(-0.3..0.3);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let alpha = rng.gen_range(0.0..2.0 * PI);
        let slope = rng.gen_range(0.0..0.25);
        let base: Vec<f64> = (0..c).map(|_| rng.gen_range(0.35..0.65)).collect();
        let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let (cy, cx) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                let r = rng.gen_range(0.1..0.3);
                let amp = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
                (cy, cx, r, amp)
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let v = (y as f64 + 0.5) / h as f64;
                    let stripe = (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).cos();
                    let ramp = slope * ((u - 0.5) * alpha.cos() + (v - 0.5) * alpha.sin());
                    let mut val = base[ch] + 0.25 * palette[ch] * stripe + ramp;
                    for (cy, cx, r, amp) in &blobs {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        val += amp[ch] * (-d2 / (2.0 * r * r)).exp();
                    }
                    pixels.push(val.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    ImageSet::new(shape, pixels, labels, num_classes)
}

/// Synthetic dataset with independent training and held-out partitions.
pub fn synthetic_dataset(
    train: usize,
    test: usize,
    shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(Dataset {
        name: "synthetic".into(),
        train: synthetic_textures(train, shape, num_classes, seed)?,
        test: if test > 0 {
            Some(synthetic_textures(test, shape, num_classes, seed ^ 0x9e37_79b9_7f4a_7c15)?)
        } else {
            None
        },
    })
}

/// PGM (`P5`, one channel) or PPM (`P6`, three channels) bytes of a CHW image.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::arg(format!("image must be C×H×W with C in {{1, 3}}, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pnm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM/PPM with maxval 255 back into a CHW tensor.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PNM header"));
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    let channels = match fields[0].1.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(0, format!("unsupported PNM magic `{other}`"))),
    };
    let num = |i: usize| {
        fields[i]
            .1
            .parse::<usize>()
            .map_err(|_| Error::format(fields[i].0 as u64, format!("bad header field `{}`", fields[i].1)))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::format(fields[3].0 as u64, format!("maxval {maxval}, expected 255")));
    }
    let n = channels * h * w;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("payload needs {n} bytes")))?;
    let mut data = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                data[(ch * h + y) * w + x] = f64::from(payload[(y * w + x) * channels + ch]) / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
