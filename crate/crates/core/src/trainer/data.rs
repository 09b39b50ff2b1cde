use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::netdef::ActShape;
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;

/// Standard deviation of each class's Gaussian cloud.
pub const SYNTHETIC_NOISE_STD: f64 = 0.5;

const MAGIC: &[u8; 4] = b"PSDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled images `N x C x H x W` with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape(format!(
                "dataset images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> ActShape {
        let s = self.images.shape();
        ActShape::Map {
            c: s[1],
            h: s[2],
            w: s[3],
        }
    }

    /// Encode in the `PSDS` binary layout (little-endian, `f32` pixels).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let s = self.images.shape();
        w.write_all(MAGIC)?;
        for v in [s[0], s[1], s[2], s[3], self.classes] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * (self.images.len() + self.labels.len()));
        for &x in self.images.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, split: Split) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let truncated = |what: &str| Error::Format(format!("truncated dataset: missing {what}"));
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a PSDS dataset (bad magic)".into()));
        }
        let mut words = bytes[4..].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut header = [0usize; 5];
        for h in &mut header {
            *h = words.next().ok_or_else(|| truncated("header"))? as usize;
        }
        let [n, c, h, w, k] = header;
        if n == 0 || c == 0 || h == 0 || w == 0 || k == 0 {
            return Err(Error::Format(format!("dataset header has a zero dimension: {header:?}")));
        }
        let pixels = n * c * h * w;
        let expected = 4 + 4 * (5 + pixels + n);
        if bytes.len() < expected {
            return Err(truncated(&format!("{} of {expected} bytes", expected - bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes after dataset", bytes.len() - expected)));
        }
        let data: Vec<f64> = words.by_ref().take(pixels).map(|b| f32::from_bits(b) as f64).collect();
        let labels: Vec<usize> = words.map(|l| l as usize).collect();
        Self::new(Tensor::new(vec![n, c, h, w], data)?, labels, k, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?, split)
    }
}

/// Reads a dataset file as the training split.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path, Split::Train)
}

/// Gaussian class clouds around random templates.
///
/// Class `k` has a template drawn uniformly from `[-1, 1]` per element;
/// samples add `N(0, 0.5^2)` noise. Sample `n` of either split belongs to
/// class `n % classes`. Values are rounded to `f32` so that the binary
/// format round-trips exactly.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    shape: ActShape,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 {
        return Err(Error::config("need at least one class"));
    }
    if per_class == 0 {
        return Err(Error::config("per-class sample count must be positive: splits would be empty"));
    }
    let ActShape::Map { c, h, w } = shape else {
        return Err(Error::config("synthetic images need a C x H x W shape"));
    };
    let dim = c * h * w;
    let mut t = SplitMix64::stream(seed, Stream::Template);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 2.0 * t.next_f64() - 1.0).collect())
        .collect();
    let split = |stream: Stream, split: Split| {
        let mut rng = SplitMix64::stream(seed, stream);
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut data = Vec::with_capacity(n * dim);
        for &k in &labels {
            for &mu in &templates[k] {
                data.push((mu + SYNTHETIC_NOISE_STD * rng.next_normal()) as f32 as f64);
            }
        }
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes, split)
    };
    Ok((
        split(Stream::TrainSamples, Split::Train)?,
        split(Stream::TestSamples, Split::Test)?,
    ))
}
