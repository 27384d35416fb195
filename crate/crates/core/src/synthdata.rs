//! Synthetic videos of moving coloured shapes with ground-truth boxes.
//!
//! Every object follows a constant-velocity trajectory that reflects at the
//! frame border, perturbed by bounded per-frame jitter. Frames can be
//! degraded by Gaussian blur and a single occluding rectangle; degradation
//! only touches pixels, never annotations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes;
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Planar RGB image, `[channels, height, width]`, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rounds every intensity onto the 8-bit grid.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Zero-centred model input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64 - 0.5).collect(),
        )
    }

    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub track_id: u32,
    pub class_id: usize,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub blur_sigma_range: [f64; 2],
    pub occluder_rate: f64,
    pub jitter_px: f64,
}

impl DegradationSpec {
    pub fn none() -> Self {
        Self { blur_sigma_range: [0.0, 0.0], occluder_rate: 0.0, jitter_px: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.blur_sigma_range;
        if !(0.0..=1.0).contains(&self.occluder_rate) {
            return Err(Error::Config(format!("occluder_rate {} outside [0,1]", self.occluder_rate)));
        }
        if lo < 0.0 || hi < lo {
            return Err(Error::Config(format!("blur_sigma_range [{lo}, {hi}] must be non-negative and ordered")));
        }
        if self.jitter_px < 0.0 {
            return Err(Error::Config("jitter_px must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestClean,
    TestDegraded,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestClean => "clean",
            Split::TestDegraded => "degraded",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub seed: u64,
    pub length: usize,
    pub degradation: DegradationSpec,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Image>,
    pub annotations: Vec<Vec<ObjectAnnotation>>,
    pub meta: VideoMeta,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn track_ids(&self) -> HashSet<u32> {
        self.annotations.iter().flatten().map(|a| a.track_id).collect()
    }
}

/// Scene parameters for a single video.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub num_classes: usize,
    pub num_objects: [usize; 2],
    pub object_size: [f64; 2],
    pub max_speed: f64,
    pub late_entry_prob: f64,
    pub degradation: DegradationSpec,
}

impl GenConfig {
    pub fn from_data(data: &DataConfig, degradation: DegradationSpec) -> Self {
        Self {
            height: data.height,
            width: data.width,
            length: data.length,
            num_classes: data.num_classes,
            num_objects: [data.min_objects, data.max_objects],
            object_size: data.object_size,
            max_speed: data.max_speed,
            late_entry_prob: data.late_entry_prob,
            degradation,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generator(m.to_string()));
        if self.length < 2 {
            return bad("video length must be at least 2");
        }
        if self.num_objects[0] < 1 || self.num_objects[1] < self.num_objects[0] {
            return bad("need at least one object and an ordered object-count range");
        }
        if self.num_classes < 2 {
            return bad("need at least two shape classes");
        }
        if self.object_size[0] <= 0.0 || self.object_size[1] < self.object_size[0] {
            return bad("object size range must be positive and ordered");
        }
        if self.object_size[1] >= 1.0 {
            return bad("objects larger than the frame");
        }
        self.degradation.validate()
    }
}

struct Track {
    class_id: usize,
    color: [f32; 3],
    size: [f64; 2],
    pos: [f64; 2],
    vel: [f64; 2],
    start: usize,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Shape membership at a point in box-local coordinates `u, v ∈ [0, 1]`.
fn inside_shape(class_id: usize, u: f64, v: f64) -> bool {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    match class_id % 4 {
        0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        1 => true,
        2 => (u - 0.5).abs() <= v / 2.0,
        _ => ((1.0 / 3.0)..=(2.0 / 3.0)).contains(&u) || ((1.0 / 3.0)..=(2.0 / 3.0)).contains(&v),
    }
}

fn background(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(3, cfg.height, cfg.width);
    let base: [f64; 3] = [rng.gen_range(0.25..0.55), rng.gen_range(0.25..0.55), rng.gen_range(0.25..0.55)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.05..0.3);
            (ang.cos() * freq, ang.sin() * freq, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.03..0.08))
        })
        .collect();
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let t: f64 = waves.iter().map(|(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for (c, b) in base.iter().enumerate() {
                img.set(c, y, x, (b + t) as f32);
            }
        }
    }
    img
}

fn render_frame(bg: &Image, tracks: &[Track], boxes_px: &[Option<[f64; 4]>], rng: &mut ChaCha8Rng) -> Image {
    let mut img = bg.clone();
    for (track, bx) in tracks.iter().zip(boxes_px) {
        let Some([x0, y0, w, h]) = *bx else { continue };
        let xs = x0.floor().max(0.0) as usize;
        let ys = y0.floor().max(0.0) as usize;
        let xe = ((x0 + w).ceil() as usize).min(img.width);
        let ye = ((y0 + h).ceil() as usize).min(img.height);
        for py in ys..ye {
            for px in xs..xe {
                let mut cover = 0;
                for sy in 0..2 {
                    for sx in 0..2 {
                        let u = (px as f64 + 0.25 + 0.5 * sx as f64 - x0) / w;
                        let v = (py as f64 + 0.25 + 0.5 * sy as f64 - y0) / h;
                        cover += inside_shape(track.class_id, u, v) as u32;
                    }
                }
                if cover == 0 {
                    continue;
                }
                let a = cover as f32 / 4.0;
                for c in 0..3 {
                    let old = img.at(c, py, px);
                    img.set(c, py, px, old * (1.0 - a) + track.color[c] * a);
                }
            }
        }
    }
    for v in &mut img.data {
        *v += rng.gen_range(-0.02f32..0.02);
    }
    img
}

/// Generates one video deterministically from `(cfg, seed)`.
pub fn generate_video(cfg: &GenConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let n_obj = rng.gen_range(cfg.num_objects[0]..=cfg.num_objects[1]);
    let mut tracks = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let class_id = rng.gen_range(0..cfg.num_classes);
        let hue = class_id as f64 / cfg.num_classes as f64 + rng.gen_range(-0.25..0.25);
        let color = hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.75..1.0));
        let side = rng.gen_range(cfg.object_size[0]..=cfg.object_size[1]);
        let aspect: f64 = rng.gen_range(0.8..1.25);
        let size = [side * fw * aspect.sqrt(), side * fh / aspect.sqrt()];
        let size = [size[0].min(fw - 1.0), size[1].min(fh - 1.0)];
        let pos = [rng.gen_range(0.0..=(fw - size[0])), rng.gen_range(0.0..=(fh - size[1]))];
        let speed = if cfg.max_speed > 0.0 { rng.gen_range(0.0..=cfg.max_speed) } else { 0.0 };
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let start = if i > 0 && rng.gen_bool(cfg.late_entry_prob.clamp(0.0, 1.0)) {
            rng.gen_range(1..=(cfg.length / 2).max(1))
        } else {
            0
        };
        tracks.push(Track { class_id, color, size, pos, vel: [ang.cos() * speed, ang.sin() * speed], start });
    }
    let bg = background(cfg, &mut rng);
    let jitter = cfg.degradation.jitter_px;
    let mut frames = Vec::with_capacity(cfg.length);
    let mut annotations = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let mut boxes_px = Vec::with_capacity(tracks.len());
        let mut anns = Vec::new();
        for (id, tr) in tracks.iter_mut().enumerate() {
            if t > 0 {
                for a in 0..2 {
                    let limit = if a == 0 { fw - tr.size[0] } else { fh - tr.size[1] };
                    tr.pos[a] += tr.vel[a];
                    if tr.pos[a] < 0.0 {
                        tr.pos[a] = -tr.pos[a];
                        tr.vel[a] = -tr.vel[a];
                    }
                    if tr.pos[a] > limit {
                        tr.pos[a] = 2.0 * limit - tr.pos[a];
                        tr.vel[a] = -tr.vel[a];
                    }
                    tr.pos[a] = tr.pos[a].clamp(0.0, limit);
                }
            }
            let off = if jitter > 0.0 { [rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter)] } else { [0.0; 2] };
            let x0 = (tr.pos[0] + off[0]).clamp(0.0, fw - tr.size[0]);
            let y0 = (tr.pos[1] + off[1]).clamp(0.0, fh - tr.size[1]);
            if t < tr.start {
                boxes_px.push(None);
                continue;
            }
            boxes_px.push(Some([x0, y0, tr.size[0], tr.size[1]]));
            anns.push(ObjectAnnotation {
                track_id: id as u32,
                class_id: tr.class_id,
                bbox: [(x0 + tr.size[0] / 2.0) / fw, (y0 + tr.size[1] / 2.0) / fh, tr.size[0] / fw, tr.size[1] / fh],
            });
        }
        let mut frame = render_frame(&bg, &tracks, &boxes_px, &mut rng);
        frame = apply_degradation(&frame, &anns, &cfg.degradation, &mut rng);
        frame.quantize();
        frames.push(frame);
        annotations.push(anns);
    }
    Ok(VideoSample {
        id: format!("video_{seed}"),
        frames,
        annotations,
        meta: VideoMeta { seed, length: cfg.length, degradation: cfg.degradation, split: Split::Train },
    })
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    s += kv * img.at(c, y as usize, xx as usize);
                }
                tmp.set(c, y as usize, x as usize, s);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    s += kv * tmp.at(c, yy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, s);
            }
        }
    }
    out
}

/// Rectangle drawn by the occluder, in pixels `(x0, y0, x1, y1)`, half-open.
pub fn occluder_rect(img: &Image, anns: &[ObjectAnnotation], rng: &mut impl Rng) -> [usize; 4] {
    let (fw, fh) = (img.width as f64, img.height as f64);
    let (cx, cy, ow, oh) = if anns.is_empty() {
        (rng.gen_range(0.0..fw), rng.gen_range(0.0..fh), fw * 0.2, fh * 0.2)
    } else {
        let a = &anns[rng.gen_range(0..anns.len())];
        let [bx, by, bw, bh] = a.bbox;
        (
            (bx + rng.gen_range(-0.3..0.3) * bw) * fw,
            (by + rng.gen_range(-0.3..0.3) * bh) * fh,
            bw * fw * rng.gen_range(0.3..0.6),
            bh * fh * rng.gen_range(0.3..0.6),
        )
    };
    let x0 = (cx - ow / 2.0).floor().clamp(0.0, fw - 1.0) as usize;
    let y0 = (cy - oh / 2.0).floor().clamp(0.0, fh - 1.0) as usize;
    let x1 = ((cx + ow / 2.0).ceil() as usize).clamp(x0 + 1, img.width);
    let y1 = ((cy + oh / 2.0).ceil() as usize).clamp(y0 + 1, img.height);
    [x0, y0, x1, y1]
}

/// Applies one occluder (with probability `occluder_rate`) and then blur.
/// Annotations are read to place the occluder but never modified.
pub fn apply_degradation(frame: &Image, anns: &[ObjectAnnotation], spec: &DegradationSpec, rng: &mut impl Rng) -> Image {
    let mut out = frame.clone();
    if spec.occluder_rate > 0.0 && rng.gen_bool(spec.occluder_rate) {
        let [x0, y0, x1, y1] = occluder_rect(frame, anns, rng);
        let shade: f32 = rng.gen_range(0.1..0.9);
        for c in 0..out.channels {
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set(c, y, x, shade);
                }
            }
        }
    }
    let [lo, hi] = spec.blur_sigma_range;
    if hi > 0.0 {
        let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        if sigma > 0.0 {
            out = gaussian_blur(&out, sigma);
        }
    }
    out
}

/// A labelled collection of videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&VideoSample> {
        self.videos.iter().filter(|v| v.meta.split == split).collect()
    }

    pub fn test(&self) -> Vec<&VideoSample> {
        self.videos.iter().filter(|v| v.meta.split != Split::Train).collect()
    }
}

fn mix_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::TestClean => 2,
        Split::TestDegraded => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ index as u64
}

/// Generates the train / clean-test / degraded-test splits.
pub fn generate_dataset(data: &DataConfig, seed: u64) -> Result<Dataset> {
    let mut videos = Vec::new();
    let mut push = |split: Split, count: usize, spec_for: &dyn Fn(usize) -> DegradationSpec| -> Result<()> {
        for i in 0..count {
            let s = mix_seed(seed, split, i);
            let mut v = generate_video(&GenConfig::from_data(data, spec_for(i)), s)?;
            v.id = format!("{}_{i:04}", split.tag());
            v.meta.split = split;
            videos.push(v);
        }
        Ok(())
    };
    let n_deg = (data.train_videos as f64 * data.train_degraded_fraction).round() as usize;
    push(Split::Train, data.train_videos, &|i| if i < n_deg { data.degraded } else { data.clean })?;
    push(Split::TestClean, data.test_clean_videos, &|_| data.clean)?;
    push(Split::TestDegraded, data.test_degraded_videos, &|_| data.degraded)?;
    Ok(Dataset { num_classes: data.num_classes, videos })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    num_classes: usize,
    class_names: Vec<String>,
    videos: Vec<ManifestVideo>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    split: Split,
    seed: u64,
    length: usize,
    height: usize,
    width: usize,
    degradation: DegradationSpec,
    annotations: Vec<Vec<ObjectAnnotation>>,
}

fn frame_path(root: &Path, id: &str, t: usize) -> PathBuf {
    root.join("videos").join(id).join(format!("frame_{t:04}.png"))
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(img.width * img.height * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                buf.push((img.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer.write_image_data(&buf).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn read_png(path: &Path, record: &str) -> Result<Image> {
    let corrupt = |reason: String| Error::CorruptRecord { record: record.to_string(), reason };
    let file = fs::File::open(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| corrupt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(corrupt(format!("{} is not 8-bit RGB", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = Image::new(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, buf[(y * w + x) * 3 + c] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Writes `<root>/manifest.json` and `<root>/videos/<id>/frame_%04d.png`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        if !seen.insert(v.id.as_str()) {
            return Err(Error::CorruptRecord { record: v.id.clone(), reason: "duplicate video id".into() });
        }
        let dir = root.join("videos").join(&v.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in v.frames.iter().enumerate() {
            write_png(&frame_path(root, &v.id, t), f)?;
        }
        let (h, w) = v.frames.first().map(|f| (f.height, f.width)).unwrap_or((0, 0));
        videos.push(ManifestVideo {
            id: v.id.clone(),
            split: v.meta.split,
            seed: v.meta.seed,
            length: v.len(),
            height: h,
            width: w,
            degradation: v.meta.degradation,
            annotations: v.annotations.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        num_classes: ds.num_classes,
        class_names: (0..ds.num_classes).map(|c| CLASS_NAMES.get(c).map_or(format!("class_{c}"), |s| s.to_string())).collect(),
        videos,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset written by [`write_dataset`], validating every record.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptRecord { record: "manifest.json".into(), reason: e.to_string() })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::CorruptRecord {
            record: "manifest.json".into(),
            reason: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in manifest.videos {
        let corrupt = |reason: String| Error::CorruptRecord { record: mv.id.clone(), reason };
        if !seen.insert(mv.id.clone()) {
            return Err(corrupt("duplicate video id".into()));
        }
        if mv.annotations.len() != mv.length {
            return Err(corrupt(format!("{} annotation lists for length {}", mv.annotations.len(), mv.length)));
        }
        for (t, anns) in mv.annotations.iter().enumerate() {
            for a in anns {
                if !boxes::is_valid(&a.bbox) || a.class_id >= manifest.num_classes {
                    return Err(corrupt(format!("frame {t}: invalid annotation {a:?}")));
                }
            }
        }
        let mut frames = Vec::with_capacity(mv.length);
        for t in 0..mv.length {
            let img = read_png(&frame_path(root, &mv.id, t), &mv.id)?;
            if img.height != mv.height || img.width != mv.width {
                return Err(corrupt(format!("frame {t} is {}x{}, expected {}x{}", img.height, img.width, mv.height, mv.width)));
            }
            frames.push(img);
        }
        videos.push(VideoSample {
            id: mv.id,
            frames,
            annotations: mv.annotations,
            meta: VideoMeta { seed: mv.seed, length: mv.length, degradation: mv.degradation, split: mv.split },
        });
    }
    Ok(Dataset { num_classes: manifest.num_classes, videos })
}
