//! Synthetic bouncing-shapes videos, the on-disk dataset format, and batch
//! sampling for training.

use ndarray::{Array4, Array5, Axis};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{derive_seed, Rng};
use crate::training::FrameTriplet;

pub const VIDD_MAGIC: &[u8; 4] = b"VIDD";
pub const VIDD_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Shapes and physics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
}

#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub radius: f64,
    pub color: [f32; 3],
    pub position: (f64, f64),
    pub velocity: (f64, f64),
}

/// Advance one axis with elastic reflection off [lo, hi].
fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    p += v;
    loop {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p, v)
}

/// Positions of a shape over `frames` steps, bouncing inside the frame so the
/// shape never leaves the canvas. Velocity components only ever flip sign,
/// so speed is preserved exactly.
pub fn simulate_positions(
    spec: &ShapeSpec,
    frames: usize,
    height: usize,
    width: usize,
) -> Vec<((f64, f64), (f64, f64))> {
    let r = spec.radius;
    let (mut x, mut y) = spec.position;
    let (mut vx, mut vy) = spec.velocity;
    let mut out = Vec::with_capacity(frames);
    out.push(((x, y), (vx, vy)));
    for _ in 1..frames {
        let (nx, nvx) = reflect(x, vx, r, width as f64 - 1.0 - r);
        let (ny, nvy) = reflect(y, vy, r, height as f64 - 1.0 - r);
        x = nx;
        y = ny;
        vx = nvx;
        vy = nvy;
        out.push(((x, y), (vx, vy)));
    }
    out
}

/// Anti-aliased coverage of pixel (px, py) by the shape at (cx, cy).
fn coverage(kind: ShapeKind, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> f64 {
    match kind {
        ShapeKind::Circle => {
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            (r - d + 0.5).clamp(0.0, 1.0)
        }
        ShapeKind::Square => {
            let ox = (px + 0.5).min(cx + r) - (px - 0.5).max(cx - r);
            let oy = (py + 0.5).min(cy + r) - (py - 0.5).max(cy - r);
            ox.clamp(0.0, 1.0) * oy.clamp(0.0, 1.0)
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset container and generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub video_count: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub generator_version: u32,
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct VideoDataset {
    /// (videos, frames, channels, height, width), values in [-1, 1].
    pub data: Array5<f32>,
    pub manifest: DatasetManifest,
}

impl VideoDataset {
    pub fn clip(&self, i: usize) -> Array4<f32> {
        self.data.index_axis(Axis(0), i).to_owned()
    }

    pub fn clips(&self) -> Vec<Array4<f32>> {
        (0..self.manifest.video_count).map(|i| self.clip(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
}

/// Render `videos` clips of 1..=shapes_max shapes with constant velocity and
/// elastic wall bounces. Fully deterministic from the seed.
pub fn gen_bouncing_shapes(spec: &GenSpec) -> Result<VideoDataset> {
    if spec.videos == 0 || spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("dataset dimensions must be positive".into()));
    }
    if spec.shapes_max == 0 {
        return Err(Error::Config("shapes_max must be at least 1".into()));
    }
    let max_r = (spec.height.min(spec.width) as f64 - 1.0) / 2.0;
    if spec.radius_max > max_r {
        return Err(Error::Config(format!(
            "radius {} does not fit a {}x{} frame",
            spec.radius_max, spec.height, spec.width
        )));
    }
    if spec.radius_min <= 0.0 || spec.radius_min > spec.radius_max {
        return Err(Error::Config("invalid radius range".into()));
    }
    let channels = 3usize;
    let mut data =
        Array5::<f32>::from_elem((spec.videos, spec.frames, channels, spec.height, spec.width), -1.0);
    let mut rng = Rng::seed_from(spec.seed);
    for vi in 0..spec.videos {
        let count = rng.range_inclusive(1, spec.shapes_max);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = if rng.uniform_f64() < 0.5 {
                ShapeKind::Circle
            } else {
                ShapeKind::Square
            };
            let radius: f64 = rng.uniform(spec.radius_min, spec.radius_max);
            // Colors kept away from the background so shapes stay visible.
            let color = [
                rng.uniform::<f32>(-0.3, 1.0),
                rng.uniform::<f32>(-0.3, 1.0),
                rng.uniform::<f32>(-0.3, 1.0),
            ];
            let px: f64 = rng.uniform(radius, spec.width as f64 - 1.0 - radius);
            let py: f64 = rng.uniform(radius, spec.height as f64 - 1.0 - radius);
            let speed: f64 = rng.uniform(spec.speed_min, spec.speed_max);
            let angle: f64 = rng.uniform(0.0, std::f64::consts::TAU);
            shapes.push(ShapeSpec {
                kind,
                radius,
                color,
                position: (px, py),
                velocity: (speed * angle.cos(), speed * angle.sin()),
            });
        }
        for shape in &shapes {
            let track = simulate_positions(shape, spec.frames, spec.height, spec.width);
            for (fi, ((cx, cy), _)) in track.iter().enumerate() {
                // Only touch the pixels near the shape.
                let r = shape.radius + 1.0;
                let y_lo = ((cy - r).floor().max(0.0)) as usize;
                let y_hi = ((cy + r).ceil() as usize).min(spec.height - 1);
                let x_lo = ((cx - r).floor().max(0.0)) as usize;
                let x_hi = ((cx + r).ceil() as usize).min(spec.width - 1);
                for py in y_lo..=y_hi {
                    for px in x_lo..=x_hi {
                        let cov =
                            coverage(shape.kind, *cx, *cy, shape.radius, px as f64, py as f64)
                                as f32;
                        if cov > 0.0 {
                            for ci in 0..channels {
                                let v = data[[vi, fi, ci, py, px]];
                                data[[vi, fi, ci, py, px]] =
                                    v * (1.0 - cov) + shape.color[ci] * cov;
                            }
                        }
                    }
                }
            }
        }
    }
    let video_bytes = (spec.frames * channels * spec.height * spec.width * 4) as u64;
    let header = header_len(spec.videos) as u64;
    let offsets = (0..spec.videos)
        .map(|i| header + i as u64 * video_bytes)
        .collect();
    Ok(VideoDataset {
        data,
        manifest: DatasetManifest {
            video_count: spec.videos,
            frames: spec.frames,
            channels,
            height: spec.height,
            width: spec.width,
            seed: spec.seed,
            generator_version: GENERATOR_VERSION,
            offsets,
        },
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

fn header_len(videos: usize) -> usize {
    // magic + version + 5 dims (u32) + seed (u64) + generator (u32) + offsets
    4 + 4 + 5 * 4 + 8 + 4 + videos * 8
}

pub fn save_dataset(ds: &VideoDataset, path: &Path) -> Result<()> {
    let m = &ds.manifest;
    let mut buf: Vec<u8> = Vec::with_capacity(header_len(m.video_count) + ds.data.len() * 4);
    buf.extend_from_slice(VIDD_MAGIC);
    buf.extend_from_slice(&VIDD_VERSION.to_le_bytes());
    for v in [m.video_count, m.frames, m.channels, m.height, m.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&m.seed.to_le_bytes());
    buf.extend_from_slice(&m.generator_version.to_le_bytes());
    for off in &m.offsets {
        buf.extend_from_slice(&off.to_le_bytes());
    }
    for v in ds.data.as_slice().expect("dataset contiguous") {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("vidd.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    // Human-readable sidecar manifest.
    let mut txt = String::new();
    txt.push_str(&format!("videos={}\n", m.video_count));
    txt.push_str(&format!("frames={}\n", m.frames));
    txt.push_str(&format!("channels={}\n", m.channels));
    txt.push_str(&format!("height={}\n", m.height));
    txt.push_str(&format!("width={}\n", m.width));
    txt.push_str(&format!("seed={}\n", m.seed));
    txt.push_str(&format!("generator_version={}\n", m.generator_version));
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    let mut f = fs::File::create(side)?;
    f.write_all(txt.as_bytes())?;
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > buf.len() {
        return Err(Error::Data("truncated file".into()));
    }
    let v = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    if *pos + 8 > buf.len() {
        return Err(Error::Data("truncated file".into()));
    }
    let v = u64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap());
    *pos += 8;
    Ok(v)
}

pub fn load_dataset(path: &Path) -> Result<VideoDataset> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    if buf.len() < 4 || &buf[..4] != VIDD_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a dataset file (bad magic)",
            path.display()
        )));
    }
    let mut pos = 4;
    let version = read_u32(&buf, &mut pos)?;
    if version != VIDD_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    let video_count = read_u32(&buf, &mut pos)? as usize;
    let frames = read_u32(&buf, &mut pos)? as usize;
    let channels = read_u32(&buf, &mut pos)? as usize;
    let height = read_u32(&buf, &mut pos)? as usize;
    let width = read_u32(&buf, &mut pos)? as usize;
    let seed = read_u64(&buf, &mut pos)?;
    let generator_version = read_u32(&buf, &mut pos)?;
    let mut offsets = Vec::with_capacity(video_count);
    for _ in 0..video_count {
        offsets.push(read_u64(&buf, &mut pos)?);
    }
    for w in offsets.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Data(format!(
                "{}: offsets not strictly increasing",
                path.display()
            )));
        }
    }
    let elems = video_count * frames * channels * height * width;
    let expected = pos + elems * 4;
    if buf.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            buf.len()
        )));
    }
    if let Some(&first) = offsets.first() {
        if first != pos as u64 {
            return Err(Error::Data(format!(
                "{}: first offset {first} does not match header length {pos}",
                path.display()
            )));
        }
    }
    let mut values = Vec::with_capacity(elems);
    for i in 0..elems {
        let b = pos + i * 4;
        values.push(f32::from_le_bytes(buf[b..b + 4].try_into().unwrap()));
    }
    let data = Array5::from_shape_vec((video_count, frames, channels, height, width), values)
        .map_err(|e| Error::Data(format!("shape error: {e}")))?;
    Ok(VideoDataset {
        data,
        manifest: DatasetManifest {
            video_count,
            frames,
            channels,
            height,
            width,
            seed,
            generator_version,
            offsets,
        },
    })
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Batch sampler whose batch k is a pure function of (dataset, seed, k):
/// frames mode draws uniformly over (video, frame) pairs; triplets mode walks
/// an epoch-seeded shuffle of distinct videos.
pub struct BatchIter<'a> {
    ds: &'a VideoDataset,
    batch_size: usize,
    seed: u64,
    flip_augment: bool,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a VideoDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if ds.manifest.video_count == 0 || ds.data.len() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(BatchIter {
            ds,
            batch_size,
            seed,
            flip_augment: false,
        })
    }

    /// Enable horizontal-flip augmentation (one coin per draw; a triplet's
    /// three frames flip together).
    pub fn with_flip(mut self, flip: bool) -> Self {
        self.flip_augment = flip;
        self
    }

    fn copy_frame<F: Real>(&self, out: &mut Array4<F>, slot: usize, video: usize, frame: usize) {
        let src = self.ds.data.index_axis(Axis(0), video);
        let src = src.index_axis(Axis(0), frame);
        let mut dst = out.index_axis_mut(Axis(0), slot);
        dst.zip_mut_with(&src, |d, &s| *d = F::from_f64(s as f64));
    }

    /// Uniform (video, frame) draws.
    pub fn frame_batch_at<F: Real>(&self, k: u64) -> Array4<F> {
        let m = &self.ds.manifest;
        let mut rng = Rng::seed_from(derive_seed(self.seed, 1, k));
        let mut out = Array4::<F>::zeros((self.batch_size, m.channels, m.height, m.width));
        for i in 0..self.batch_size {
            let video = rng.below(m.video_count);
            let frame = rng.below(m.frames);
            self.copy_frame(&mut out, i, video, frame);
            if self.flip_augment && rng.uniform_f64() < 0.5 {
                let flipped = out
                    .index_axis(Axis(0), i)
                    .slice(ndarray::s![.., .., ..;-1])
                    .to_owned();
                out.index_axis_mut(Axis(0), i).assign(&flipped);
            }
        }
        out
    }

    /// The (video, frame) index pairs batch k would draw (for distribution
    /// tests).
    pub fn frame_indices_at(&self, k: u64) -> Vec<(usize, usize)> {
        let m = &self.ds.manifest;
        let mut rng = Rng::seed_from(derive_seed(self.seed, 1, k));
        (0..self.batch_size)
            .map(|_| (rng.below(m.video_count), rng.below(m.frames)))
            .collect()
    }

    /// Distinct videos from an epoch-seeded shuffle, one triplet per video.
    pub fn triplet_batch_at<F: Real>(&self, k: u64) -> Result<crate::training::TripletBatch<F>> {
        let triplets = self.triplets_at(k)?;
        Ok(crate::training::TripletBatch::from_triplets(&triplets))
    }

    pub fn triplets_at<F: Real>(&self, k: u64) -> Result<Vec<FrameTriplet<F>>> {
        let m = &self.ds.manifest;
        if m.frames < 2 {
            return Err(Error::Data(
                "triplet mode needs videos with at least 2 frames".into(),
            ));
        }
        let v = m.video_count as u64;
        let mut rng = Rng::seed_from(derive_seed(self.seed, 2, k));
        let mut out = Vec::with_capacity(self.batch_size);
        for i in 0..self.batch_size as u64 {
            let g = k * self.batch_size as u64 + i;
            let epoch = g / v;
            let slot = (g % v) as usize;
            let mut perm_rng = Rng::seed_from(derive_seed(self.seed, 3, epoch));
            let perm = perm_rng.shuffled_indices(m.video_count);
            let video = perm[slot];
            let clip: Array4<F> = self
                .ds
                .data
                .index_axis(Axis(0), video)
                .mapv(|v| F::from_f64(v as f64));
            let mut triplet = crate::training::sample_triplet(&clip, &mut rng)?;
            if self.flip_augment && rng.uniform_f64() < 0.5 {
                for frame in [&mut triplet.x0, &mut triplet.xprev, &mut triplet.xn] {
                    let flipped = frame.slice(ndarray::s![.., .., ..;-1]).to_owned();
                    *frame = flipped;
                }
            }
            out.push(triplet);
        }
        Ok(out)
    }
}
