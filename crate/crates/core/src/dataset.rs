//! The synthetic corners classification task and the raw image format.
//!
//! Each image carries one marker in its top-left patch and one in its
//! bottom-right patch; the label is `(a + b) mod classes` for marker values
//! `a` and `b`, so neither corner alone determines it.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::tensor::Tensor;
use crate::{Real, Result, VilError};

pub const IMAGE_MAGIC: &[u8; 7] = b"VILIMG1";
const CHANNELS: usize = 3;
/// Markers sit on a 4×4 grid of cells inside the corner patch.
const CELLS: usize = 4;
const MARKER_LEVEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CornersSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Upper bound of the uniform background noise, in pixel levels.
    pub noise: u8,
}

impl Default for CornersSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
            num_classes: 8,
            train_size: 1024,
            eval_size: 256,
            seed: 0,
            noise: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl CornersSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p < CELLS || p % CELLS != 0 || self.image_size < 2 * p {
            return Err(VilError::config(format!(
                "corners task needs a patch size divisible by {CELLS} and an image of at least two patches, got patch {p}, image {}",
                self.image_size
            )));
        }
        if !(2..=CELLS * CELLS).contains(&self.num_classes) {
            return Err(VilError::config(format!(
                "corners task supports 2..={} classes, got {}",
                CELLS * CELLS,
                self.num_classes
            )));
        }
        if self.noise >= MARKER_LEVEL / 2 {
            return Err(VilError::config("background noise must stay below half the marker level"));
        }
        Ok(())
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Eval => self.eval_size,
        }
    }

    /// Image `index` of `split` as HWC bytes with its label. Labels cycle
    /// through the classes, so every block of `num_classes` consecutive
    /// samples is exactly balanced.
    pub fn sample(&self, split: Split, index: usize) -> (Vec<u8>, usize) {
        let stream = match split {
            Split::Train => 0,
            Split::Eval => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.set_word_pos(index as u128 * (1 << 20));
        let n = self.num_classes;
        let label = index % n;
        let a = rng.random_range(0..n);
        let b = (label + n - a) % n;
        let s = self.image_size;
        let mut px: Vec<u8> = (0..s * s * CHANNELS)
            .map(|_| rng.random_range(0..=self.noise))
            .collect();
        self.draw_marker(&mut px, 0, a);
        self.draw_marker(&mut px, s - self.patch_size, b);
        (px, label)
    }

    fn cell_origin(&self, corner: usize, marker: usize) -> (usize, usize) {
        let c = self.patch_size / CELLS;
        (corner + (marker / CELLS) * c, corner + (marker % CELLS) * c)
    }

    fn draw_marker(&self, px: &mut [u8], corner: usize, marker: usize) {
        let c = self.patch_size / CELLS;
        let (y0, x0) = self.cell_origin(corner, marker);
        for y in y0..y0 + c {
            for x in x0..x0 + c {
                let o = (y * self.image_size + x) * CHANNELS;
                px[o..o + CHANNELS].fill(MARKER_LEVEL);
            }
        }
    }

    /// Marker in the corner patch at `corner`: the cell with the highest
    /// mean brightness.
    fn read_marker(&self, px: &[u8], corner: usize) -> usize {
        let c = self.patch_size / CELLS;
        (0..CELLS * CELLS)
            .max_by_key(|&m| {
                let (y0, x0) = self.cell_origin(corner, m);
                let mut sum = 0u64;
                for y in y0..y0 + c {
                    for x in x0..x0 + c {
                        let o = (y * self.image_size + x) * CHANNELS;
                        sum += px[o..o + CHANNELS].iter().map(|&v| v as u64).sum::<u64>();
                    }
                }
                (sum, std::cmp::Reverse(m))
            })
            .expect("at least one cell")
    }

    /// Recovers the label of an image from its two corner markers.
    pub fn decode_label(&self, px: &[u8]) -> Result<usize> {
        let s = self.image_size;
        if px.len() != s * s * CHANNELS {
            return Err(VilError::dim(format!("expected {} bytes, got {}", s * s * CHANNELS, px.len())));
        }
        let a = self.read_marker(px, 0);
        let b = self.read_marker(px, s - self.patch_size);
        if a >= self.num_classes || b >= self.num_classes {
            return Err(VilError::Format(format!("marker cells {a}/{b} outside the class range")));
        }
        Ok((a + b) % self.num_classes)
    }

    pub fn generate(&self, split: Split, exec: Execution) -> Result<ImageSet> {
        self.validate()?;
        let n = self.len(split);
        let samples = par::map_indices(exec, n, |i| self.sample(split, i));
        let mut set = ImageSet::empty(self.image_size, self.image_size, CHANNELS);
        for (px, label) in samples {
            set.pixels.extend_from_slice(&px);
            set.labels.push(label);
        }
        Ok(set)
    }
}

/// Images of equal size stored contiguously as 8-bit HWC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| VilError::Format(format!("truncated image header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl ImageSet {
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
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
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` scaled to `[-1, 1]`.
    pub fn tensor<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.image(i).iter().map(|&v| T::lit(v as f64 / 127.5 - 1.0)).collect();
        Tensor::new([self.height, self.width, self.channels], data).expect("consistent image size")
    }

    /// Writes `images.bin` (magic, count, height, width, channels as
    /// little-endian u32, then the pixels) and `labels.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("images.bin"))?);
        w.write_all(IMAGE_MAGIC)?;
        for v in [self.len(), self.height, self.width, self.channels] {
            let v = u32::try_from(v).map_err(|_| VilError::Format(format!("{v} does not fit the header")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.pixels)?;
        w.flush()?;
        let mut l = BufWriter::new(File::create(dir.join("labels.txt"))?);
        for label in &self.labels {
            writeln!(l, "{label}")?;
        }
        l.flush()?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut r = BufReader::new(File::open(dir.join("images.bin"))?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| VilError::Format("image file shorter than its magic".into()))?;
        if &magic != IMAGE_MAGIC {
            return Err(VilError::Format("not a VILIMG1 image file".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let (height, width, channels) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        let mut pixels = Vec::new();
        r.read_to_end(&mut pixels)?;
        if pixels.len() != count * height * width * channels {
            return Err(VilError::Format(format!(
                "image payload has {} bytes, header promises {count} images of {height}×{width}×{channels}",
                pixels.len()
            )));
        }
        let labels = BufReader::new(File::open(dir.join("labels.txt"))?)
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let line = line?;
                line.trim()
                    .parse::<usize>()
                    .map_err(|e| VilError::Format(format!("labels.txt line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != count {
            return Err(VilError::Format(format!("{} labels for {count} images", labels.len())));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            labels,
        })
    }
}

/// Writes the train and eval splits of `spec` under `dir/train` and `dir/eval`.
pub fn synthesize_dataset(spec: &CornersSpec, dir: impl AsRef<Path>, exec: Execution) -> Result<()> {
    let dir = dir.as_ref();
    spec.generate(Split::Train, exec)?.write(dir.join("train"))?;
    spec.generate(Split::Eval, exec)?.write(dir.join("eval"))?;
    Ok(())
}
