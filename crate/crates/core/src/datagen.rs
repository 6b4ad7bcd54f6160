//! Procedurally rendered shape images.
//!
//! Geometry is integer valued on a 2x supersampled grid. Each output pixel
//! averages its four subpixels, so rendering involves no float rounding that
//! could differ between platforms.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Rng, RngState, Tensor};
use crate::trainer::checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "square" => Ok(ShapeKind::Square),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(Error::config(format!("unknown shape `{other}`"))),
        }
    }
}

impl ShapeKind {
    /// Whether supersampled point `(x, y)` lies inside a shape of half-size `r` at `(cx, cy)`.
    fn contains(self, x: i64, y: i64, cx: i64, cy: i64, r: i64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Cross => {
                let arm = (r / 3).max(1);
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub shapes: Vec<ShapeKind>,
    /// Half-size range as a fraction of the image side.
    pub min_size: f32,
    pub max_size: f32,
    /// Maximum center offset from the image center, as a fraction of the side.
    pub position_jitter: f32,
    /// Standard deviation of additive Gaussian background noise.
    pub background_noise: f32,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            shapes: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Cross],
            min_size: 0.2,
            max_size: 0.35,
            position_jitter: 0.15,
            background_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: String,
    pub image_size: usize,
    pub channels: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub render: RenderParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "shapes".into(),
            image_size: 16,
            channels: 1,
            num_classes: 3,
            num_samples: 8192,
            seed: 0,
            render: RenderParams::default(),
        }
    }
}

/// Fill levels per channel for color images; index chosen per image.
const PALETTE: [[i64; 3]; 3] = [[4, 1, 1], [1, 4, 1], [1, 1, 4]];

impl DatasetSpec {
    /// Unconditional 8x8 grayscale shapes matching [`BackboneConfig::toy`](crate::BackboneConfig::toy).
    pub fn toy() -> Self {
        DatasetSpec {
            name: "shapes-toy".into(),
            image_size: 8,
            num_classes: 0,
            num_samples: 4096,
            ..DatasetSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.render;
        if !(4..=256).contains(&self.image_size) {
            return Err(Error::config(format!("unsupported image size {}", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("unsupported channel count {}", self.channels)));
        }
        if r.shapes.is_empty() {
            return Err(Error::config("render.shapes must not be empty"));
        }
        if self.num_classes > r.shapes.len() {
            return Err(Error::config(format!(
                "{} classes but only {} shape kinds",
                self.num_classes,
                r.shapes.len()
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples must be positive"));
        }
        if !(0.0 < r.min_size && r.min_size <= r.max_size && r.max_size <= 0.5) {
            return Err(Error::config("size range must satisfy 0 < min_size <= max_size <= 0.5"));
        }
        if !(0.0..=0.5).contains(&r.position_jitter) || !(r.background_noise >= 0.0) {
            return Err(Error::config("position_jitter must lie in [0, 0.5] and background_noise >= 0"));
        }
        Ok(())
    }

    fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// `[num_samples, H, W, C]` in `[-1, 1]`.
    pub images: Tensor,
    /// Empty for unconditional datasets.
    pub labels: Vec<usize>,
}

/// Renders one image into `out` (`H * W * C` values).
fn render(spec: &DatasetSpec, kind: ShapeKind, rng: &mut Rng, out: &mut [f32]) {
    let r = &spec.render;
    let hs = spec.image_size as i64;
    let ss = 2 * hs;
    let lo = ((r.min_size as f64 * ss as f64).round() as i64).max(1);
    let hi = ((r.max_size as f64 * ss as f64).round() as i64).max(lo);
    let size = rng.range_inclusive(lo, hi);
    let jitter = (r.position_jitter as f64 * ss as f64).round() as i64;
    let center = ss / 2;
    let clamp = |c: i64| c.clamp(size, ss - 1 - size);
    let cx = clamp(center + rng.range_inclusive(-jitter, jitter));
    let cy = clamp(center + rng.range_inclusive(-jitter, jitter));
    let color = if spec.channels == 3 {
        PALETTE[rng.below(PALETTE.len() as u64) as usize]
    } else {
        [4, 4, 4]
    };
    let c = spec.channels;
    for y in 0..hs {
        for x in 0..hs {
            let mut hits = 0;
            for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                // subsample centers in doubled coordinates keep shapes mirror symmetric
                if kind.contains(2 * (2 * x + sx) + 1, 2 * (2 * y + sy) + 1, 2 * cx, 2 * cy, 2 * size) {
                    hits += 1;
                }
            }
            for ch in 0..c {
                // coverage in [0, 4] times fill level in [0, 4], mapped to [-1, 1]
                let level = hits * color[ch];
                out[((y * hs + x) as usize) * c + ch] = level as f32 / 8.0 - 1.0;
            }
        }
    }
    if r.background_noise > 0.0 {
        for v in out.iter_mut() {
            *v = (*v + r.background_noise * rng.normal()).clamp(-1.0, 1.0);
        }
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_samples;
    let per = spec.image_len();
    let mut label_rng = Rng::substream(spec.seed, "data.labels");
    let mut geom_rng = Rng::substream(spec.seed, "data.geometry");
    let kinds = &spec.render.shapes;
    let labels: Vec<usize> = if spec.num_classes > 0 {
        let mut l: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        label_rng.shuffle(&mut l);
        l
    } else {
        Vec::new()
    };
    let mut data = vec![0.0f32; n * per];
    for i in 0..n {
        let kind = match labels.get(i) {
            Some(&l) => kinds[l],
            None => kinds[label_rng.below(kinds.len() as u64) as usize],
        };
        render(spec, kind, &mut geom_rng, &mut data[i * per..(i + 1) * per]);
    }
    let s = spec.image_size;
    Ok(Dataset {
        spec: spec.clone(),
        images: Tensor::new(vec![n, s, s, spec.channels], data)?,
        labels,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conditional(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Copies out the images at `idx`.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.spec.image_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let labels = if self.conditional() { idx.iter().map(|&i| self.labels[i]).collect() } else { Vec::new() };
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Deterministic split into `(train, held_out)` with `held` images in the second part.
    pub fn split(&self, held: usize) -> Result<(Dataset, Dataset)> {
        if held >= self.len() {
            return Err(Error::config(format!("cannot hold out {held} of {} images", self.len())));
        }
        let cut = self.len() - held;
        let first: Vec<usize> = (0..cut).collect();
        let second: Vec<usize> = (cut..self.len()).collect();
        let part = |idx: &[usize]| -> Result<Dataset> {
            let (images, labels) = self.gather(idx)?;
            let mut spec = self.spec.clone();
            spec.num_samples = idx.len();
            Ok(Dataset { spec, images, labels })
        };
        Ok((part(&first)?, part(&second)?))
    }

    /// Order-sensitive checksum over the raw bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.images.numel() * 4 + self.labels.len() * 8);
        for v in self.images.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        crate::numcore::fnv1a64(&bytes)
    }

    /// Writes the tensor container to `path` and a readable description next to it
    /// (`path` with a `.txt` extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.insert("images", self.images.clone());
        let labels = self.labels.iter().map(|&l| l as f32).collect::<Vec<_>>();
        store.insert("labels", Tensor::new(vec![labels.len()], labels)?);
        let meta = serde_json::to_vec(&self.spec).map_err(|e| Error::config(e.to_string()))?;
        checkpoint::write_atomic(path, &checkpoint::encode(&store, &meta))?;
        checkpoint::write_atomic(&path.with_extension("txt"), self.describe().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (store, meta) = checkpoint::decode(&bytes)?;
        let spec: DatasetSpec = serde_json::from_slice(&meta).map_err(|e| Error::Integrity {
            entry: "metadata".into(),
            detail: e.to_string(),
        })?;
        let images = store.get("images")?.clone();
        let labels = store.get("labels")?.data().iter().map(|&l| l as usize).collect();
        Ok(Dataset { spec, images, labels })
    }

    pub fn describe(&self) -> String {
        let s = &self.spec;
        let mut hist = vec![0usize; s.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        let shapes: Vec<&str> = s
            .render
            .shapes
            .iter()
            .map(|k| match k {
                ShapeKind::Disk => "disk",
                ShapeKind::Square => "square",
                ShapeKind::Cross => "cross",
            })
            .collect();
        format!(
            "name: {}\nimages: {}\nsize: {}x{}x{}\nclasses: {}\nlabel histogram: {:?}\nshapes: {}\nseed: {}\nbackground noise: {}\nchecksum: {:016x}\n",
            s.name,
            self.len(),
            s.image_size,
            s.image_size,
            s.channels,
            s.num_classes,
            hist,
            shapes.join(", "),
            s.seed,
            s.render.background_noise,
            self.checksum()
        )
    }
}

/// Mirrors each `[H, W, C]` image of a batch left to right, in place.
pub fn flip_horizontal(images: &mut Tensor, which: &[bool]) {
    let (h, w, c) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let per = h * w * c;
    let data = images.data_mut();
    for (b, _) in which.iter().enumerate().filter(|(_, &f)| f) {
        let img = &mut data[b * per..(b + 1) * per];
        for y in 0..h {
            for x in 0..w / 2 {
                for ch in 0..c {
                    img.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub flipped: Vec<bool>,
}

/// Saved position of a [`Batches`] iterator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub position: usize,
    pub flip_rng: RngState,
}

/// Endless shuffled batches. Each epoch's order comes from its own named
/// substream; remainders shorter than a batch are dropped.
pub struct Batches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    flip: bool,
    seed: u64,
    epoch: u64,
    position: usize,
    order: Vec<usize>,
    flip_rng: Rng,
}

impl<'a> Batches<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, flip: bool, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > data.len() {
            return Err(Error::config(format!(
                "batch size {batch_size} outside [1, {}]",
                data.len()
            )));
        }
        let mut b = Batches {
            data,
            batch_size,
            flip,
            seed,
            epoch: 0,
            position: 0,
            order: Vec::new(),
            flip_rng: Rng::substream(seed, "data.flip"),
        };
        b.order = b.epoch_order(0);
        Ok(b)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        Rng::substream(self.seed, &format!("data.shuffle.{epoch}")).shuffle(&mut order);
        order
    }

    pub fn cursor(&self) -> BatchCursor {
        BatchCursor {
            epoch: self.epoch,
            position: self.position,
            flip_rng: self.flip_rng.state(),
        }
    }

    pub fn restore(&mut self, cursor: &BatchCursor) -> Result<()> {
        self.epoch = cursor.epoch;
        self.position = cursor.position;
        self.flip_rng = Rng::from_state(&cursor.flip_rng)?;
        self.order = self.epoch_order(self.epoch);
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.position + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.position = 0;
            self.order = self.epoch_order(self.epoch);
        }
        let idx = &self.order[self.position..self.position + self.batch_size];
        self.position += self.batch_size;
        let (mut images, labels) = self.data.gather(idx)?;
        let flipped: Vec<bool> = if self.flip {
            (0..idx.len()).map(|_| self.flip_rng.bernoulli(0.5)).collect()
        } else {
            vec![false; idx.len()]
        };
        flip_horizontal(&mut images, &flipped);
        Ok(Batch {
            images,
            labels: self.data.conditional().then_some(labels),
            flipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, classes: usize) -> DatasetSpec {
        DatasetSpec {
            image_size: 8,
            num_samples: n,
            num_classes: classes,
            seed: 11,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small(64, 3)).unwrap();
        let b = generate(&small(64, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let mut other = small(64, 3);
        other.seed = 12;
        assert_ne!(generate(&other).unwrap().checksum(), a.checksum());
    }

    #[test]
    fn balanced_labels() {
        let d = generate(&small(3000, 3)).unwrap();
        let mut hist = [0usize; 3];
        for &l in &d.labels {
            hist[l] += 1;
        }
        for h in hist {
            assert!((h as f64 - 1000.0).abs() <= 50.0, "{hist:?}");
        }
    }

    #[test]
    fn pixels_in_range_with_noise() {
        let mut spec = small(50, 0);
        spec.channels = 3;
        spec.render.background_noise = 0.5;
        let d = generate(&spec).unwrap();
        assert!(d.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(d.labels.is_empty());
    }

    #[test]
    fn rejects_unsupported_specs() {
        let mut spec = small(10, 3);
        spec.channels = 2;
        assert!(generate(&spec).is_err());
        let mut spec = small(10, 3);
        spec.image_size = 2;
        assert!(generate(&spec).is_err());
        let mut spec = small(10, 4);
        spec.num_classes = 4;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn flip_of_symmetric_image_is_identity() {
        let mut spec = small(1, 1);
        spec.render.shapes = vec![ShapeKind::Disk];
        spec.render.position_jitter = 0.0;
        let d = generate(&spec).unwrap();
        let mut flipped = d.images.clone();
        flip_horizontal(&mut flipped, &[true]);
        assert_eq!(flipped, d.images);
    }

    #[test]
    fn flip_rate_is_half() {
        let d = generate(&small(100, 0)).unwrap();
        let mut it = Batches::new(&d, 100, true, 5).unwrap();
        let mut flips = 0usize;
        for _ in 0..100 {
            flips += it.next_batch().unwrap().flipped.iter().filter(|&&f| f).count();
        }
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn epoch_order_is_reproducible_and_resumable() {
        let d = generate(&small(20, 2)).unwrap();
        let take = |it: &mut Batches| (0..7).map(|_| it.next_batch().unwrap().labels.unwrap()).collect::<Vec<_>>();
        let mut a = Batches::new(&d, 6, false, 3).unwrap();
        let mut b = Batches::new(&d, 6, false, 3).unwrap();
        assert_eq!(take(&mut a), take(&mut b));

        let mut c = Batches::new(&d, 6, true, 3).unwrap();
        take(&mut c);
        let cursor = c.cursor();
        let expect: Vec<_> = (0..4).map(|_| c.next_batch().unwrap().images).collect();
        let mut r = Batches::new(&d, 6, true, 3).unwrap();
        r.restore(&cursor).unwrap();
        let got: Vec<_> = (0..4).map(|_| r.next_batch().unwrap().images).collect();
        assert_eq!(got, expect);
        assert!(Batches::new(&d, 21, false, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.dmpk");
        let d = generate(&small(30, 3)).unwrap();
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
        let text = fs::read_to_string(path.with_extension("txt")).unwrap();
        assert!(text.contains("images: 30"));
    }
}
