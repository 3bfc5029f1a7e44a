//! Label-map sequences: a synthetic moving-shapes generator with exact
//! future ground truth, and a loader for precomputed label PNGs laid out as
//! `{root}/{city}/{city}_{seq}_{frame:06}_{modality}.png`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DEPTH, SEGMENTATION};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::modality::{FrameSequence, LabelMap, ModalitySpec, SequenceRecord};

/// Source-frame spacing between consecutive model frames.
pub const SUBSAMPLE: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub label: u16,
    pub depth_bin: u16,
    /// Top-left corner at frame 0, `(x, y)`.
    pub origin: (i64, i64),
    /// Pixels per source frame, `(dx, dy)`.
    pub velocity: (i64, i64),
    /// `(width, height)`; a disc uses `width` as its diameter.
    pub size: (usize, usize),
}

impl ShapeSpec {
    fn extent(&self) -> (usize, usize) {
        match self.kind {
            ShapeKind::Rectangle => self.size,
            ShapeKind::Disc => (self.size.0, self.size.0),
        }
    }

    fn covers(&self, dx: usize, dy: usize) -> bool {
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disc => {
                let r = self.size.0 as f64 / 2.0;
                let (cx, cy) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
                cx * cx + cy * cy <= r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeSpec>,
    pub background_label: u16,
    pub background_depth_bin: u16,
    pub num_labels: usize,
    pub depth_bins: usize,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn empty(height: usize, width: usize) -> Self {
        SyntheticSceneSpec {
            height,
            width,
            shapes: Vec::new(),
            background_label: 0,
            background_depth_bin: (crate::config::DEPTH_BINS - 1) as u16,
            num_labels: 19,
            depth_bins: crate::config::DEPTH_BINS,
            seed: 0,
        }
    }

    pub fn num_shapes(&self) -> usize {
        self.shapes.len()
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Scene("canvas must be non-empty".into()));
        }
        if self.background_label as usize >= self.num_labels || self.background_depth_bin as usize >= self.depth_bins {
            return Err(Error::Scene("background label or depth bin out of range".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (w, h) = s.extent();
            if w == 0 || h == 0 {
                return Err(Error::Scene(format!("shape {i} has zero size")));
            }
            if w > self.width || h > self.height {
                return Err(Error::Scene(format!(
                    "shape {i} ({w}x{h}) larger than canvas {}x{}",
                    self.width, self.height
                )));
            }
            if s.label as usize >= self.num_labels || s.depth_bin as usize >= self.depth_bins {
                return Err(Error::Scene(format!("shape {i} label or depth bin out of range")));
            }
        }
        Ok(())
    }

    /// Segmentation and depth-bin maps at source frame `t`.
    pub fn render_frame(&self, t: u32) -> Result<(LabelMap, LabelMap)> {
        self.check()?;
        let (h, w) = (self.height, self.width);
        let mut seg = LabelMap::filled(h, w, self.background_label, self.num_labels - 1);
        let mut depth = LabelMap::filled(h, w, self.background_depth_bin, self.depth_bins - 1);
        // Paint far to near; among equal bins the lower index ends on top.
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by(|&a, &b| self.shapes[b].depth_bin.cmp(&self.shapes[a].depth_bin).then(b.cmp(&a)));
        for i in order {
            let s = &self.shapes[i];
            let (sw, sh) = s.extent();
            let ox = (s.origin.0 + t as i64 * s.velocity.0).rem_euclid(w as i64) as usize;
            let oy = (s.origin.1 + t as i64 * s.velocity.1).rem_euclid(h as i64) as usize;
            for dy in 0..sh {
                for dx in 0..sw {
                    if s.covers(dx, dy) {
                        let (y, x) = ((oy + dy) % h, (ox + dx) % w);
                        seg.set(y, x, s.label);
                        depth.set(y, x, s.depth_bin);
                    }
                }
            }
        }
        Ok((seg, depth))
    }
}

/// Modality specs matching the synthetic generator's output.
pub fn synthetic_modalities(spec: &SyntheticSceneSpec) -> (ModalitySpec, ModalitySpec) {
    (
        ModalitySpec::new(SEGMENTATION, spec.num_labels, 1, 1),
        ModalitySpec::new(DEPTH, spec.depth_bins, 1, 1),
    )
}

pub fn render_synthetic(spec: &SyntheticSceneSpec, frame_indices: &[u32]) -> Result<SequenceRecord> {
    spec.check()?;
    let (seg_spec, depth_spec) = synthetic_modalities(spec);
    let mut seg = Vec::with_capacity(frame_indices.len());
    let mut depth = Vec::with_capacity(frame_indices.len());
    for &t in frame_indices {
        let (s, d) = spec.render_frame(t)?;
        seg.push(s);
        depth.push(d);
    }
    let subsample = match frame_indices {
        [a, b, ..] => b.saturating_sub(*a).max(1),
        _ => 1,
    };
    SequenceRecord::new(
        vec![
            FrameSequence::new(seg_spec, seg, frame_indices.to_vec())?,
            FrameSequence::new(depth_spec, depth, frame_indices.to_vec())?,
        ],
        format!("synthetic:{}", spec.seed),
        subsample,
    )
}

/// Ranges the random scene generator draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution {
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest absolute per-frame speed along x and y.
    pub max_speed: (i64, i64),
    pub shape_labels: Vec<u16>,
    pub background_labels: Vec<u16>,
    /// Inclusive range of shape depth bins; the background sits behind all of them.
    pub shape_depth_bins: (u16, u16),
}

impl Default for SceneDistribution {
    fn default() -> Self {
        SceneDistribution {
            min_shapes: 2,
            max_shapes: 4,
            min_size: 12,
            max_size: 28,
            max_speed: (3, 2),
            shape_labels: (11..=18).collect(),
            background_labels: vec![0, 1, 8],
            shape_depth_bins: (16, 200),
        }
    }
}

impl SceneDistribution {
    /// A random scene; distinct shapes get distinct labels and depth bins.
    pub fn sample(&self, height: usize, width: usize, seed: u64) -> Result<SyntheticSceneSpec> {
        if self.min_shapes > self.max_shapes || self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Scene("empty shape count or size range".into()));
        }
        if self.max_shapes > self.shape_labels.len() {
            return Err(Error::Scene("fewer shape labels than shapes".into()));
        }
        let (lo, hi) = self.shape_depth_bins;
        if lo > hi || (hi - lo + 1) as usize <= self.max_shapes {
            return Err(Error::Scene("depth bin range too narrow".into()));
        }
        if self.max_size > height.min(width) {
            return Err(Error::Scene(format!("max size {} exceeds canvas {height}x{width}", self.max_size)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(self.min_shapes..=self.max_shapes);
        let labels = rand::seq::index::sample(&mut rng, self.shape_labels.len(), n);
        let bins = rand::seq::index::sample(&mut rng, (hi - lo + 1) as usize, n);
        let mut shapes = Vec::with_capacity(n);
        for (li, bi) in labels.iter().zip(bins.iter()) {
            let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Disc };
            let w = rng.random_range(self.min_size..=self.max_size);
            let h = rng.random_range(self.min_size..=self.max_size);
            let velocity = loop {
                let v = (
                    rng.random_range(-self.max_speed.0..=self.max_speed.0),
                    rng.random_range(-self.max_speed.1..=self.max_speed.1),
                );
                if v != (0, 0) || self.max_speed == (0, 0) {
                    break v;
                }
            };
            shapes.push(ShapeSpec {
                kind,
                label: self.shape_labels[li],
                depth_bin: lo + bi as u16,
                origin: (rng.random_range(0..width as i64), rng.random_range(0..height as i64)),
                velocity,
                size: (w, h),
            });
        }
        let background_label = if self.background_labels.is_empty() {
            0
        } else {
            self.background_labels[rng.random_range(0..self.background_labels.len())]
        };
        let background_depth_bin = rng.random_range(hi as usize + 1..crate::config::DEPTH_BINS) as u16;
        let spec = SyntheticSceneSpec {
            height,
            width,
            shapes,
            background_label,
            background_depth_bin,
            num_labels: 19,
            depth_bins: crate::config::DEPTH_BINS,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }
}

/// Canvas size plus scene distribution, as read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSpec {
    pub height: usize,
    pub width: usize,
    pub distribution: SceneDistribution,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            height: 64,
            width: 128,
            distribution: SceneDistribution::default(),
        }
    }
}

fn join_ids(ids: &[u16]) -> String {
    ids.iter().map(u16::to_string).collect::<Vec<_>>().join(",")
}

impl GenerationSpec {
    pub fn to_text(&self) -> String {
        let d = &self.distribution;
        format!(
            "height = {}\nwidth = {}\nmin_shapes = {}\nmax_shapes = {}\nmin_size = {}\nmax_size = {}\n\
             max_speed_x = {}\nmax_speed_y = {}\nshape_labels = {}\nbackground_labels = {}\n\
             shape_depth_min = {}\nshape_depth_max = {}\n",
            self.height,
            self.width,
            d.min_shapes,
            d.max_shapes,
            d.min_size,
            d.max_size,
            d.max_speed.0,
            d.max_speed.1,
            join_ids(&d.shape_labels),
            join_ids(&d.background_labels),
            d.shape_depth_bins.0,
            d.shape_depth_bins.1,
        )
    }

    /// Unlisted keys keep their defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = GenerationSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected key = value, got {line:?}")))?;
            fn num<T: FromStr>(v: &str, key: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
            }
            fn ids(v: &str, key: &str) -> std::result::Result<Vec<u16>, String> {
                v.split(',').filter(|t| !t.trim().is_empty()).map(|t| num(t.trim(), key)).collect()
            }
            let d = &mut spec.distribution;
            let res = match key {
                "height" => num(value, key).map(|v| spec.height = v),
                "width" => num(value, key).map(|v| spec.width = v),
                "min_shapes" => num(value, key).map(|v| d.min_shapes = v),
                "max_shapes" => num(value, key).map(|v| d.max_shapes = v),
                "min_size" => num(value, key).map(|v| d.min_size = v),
                "max_size" => num(value, key).map(|v| d.max_size = v),
                "max_speed_x" => num(value, key).map(|v| d.max_speed.0 = v),
                "max_speed_y" => num(value, key).map(|v| d.max_speed.1 = v),
                "shape_labels" => ids(value, key).map(|v| d.shape_labels = v),
                "background_labels" => ids(value, key).map(|v| d.background_labels = v),
                "shape_depth_min" => num(value, key).map(|v| d.shape_depth_bins.0 = v),
                "shape_depth_max" => num(value, key).map(|v| d.shape_depth_bins.1 = v),
                _ => Err(format!("unknown key {key:?}")),
            };
            res.map_err(perr)?;
        }
        Ok(spec)
    }
}

/// `min(floor(v * bins), bins - 1)` per value.
pub fn quantize_depth(disparity: &[f64], num_bins: usize) -> Result<Vec<u16>> {
    if !(2..=u16::MAX as usize + 1).contains(&num_bins) {
        return Err(Error::range("num_bins", format!("{num_bins} not in [2, 65536]")));
    }
    disparity
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::range("disparity", format!("{v} outside [0, 1]")));
            }
            Ok(((v * num_bins as f64).floor() as usize).min(num_bins - 1) as u16)
        })
        .collect()
}

/// Bin centre `(bin + 0.5) / bins`.
pub fn dequantize_depth(bin: u16, num_bins: usize) -> f64 {
    (bin as f64 + 0.5) / num_bins as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Horizon {
    Short,
    Mid,
}

impl Horizon {
    /// Model steps between the last context frame and the target.
    pub fn steps(self) -> usize {
        match self {
            Horizon::Short => 1,
            Horizon::Mid => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Horizon::Short => "SHORT",
            Horizon::Mid => "MID",
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Horizon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SHORT" => Ok(Horizon::Short),
            "MID" => Ok(Horizon::Mid),
            _ => Err(Error::range("horizon", format!("unknown horizon {s:?}"))),
        }
    }
}

/// Source-frame indices of the context window for `target` at `horizon`.
pub fn context_frame_indices(target: u32, horizon: Horizon, context_frames: usize) -> Result<Vec<u32>> {
    let last = SUBSAMPLE as i64 * horizon.steps() as i64;
    let first = target as i64 - last - SUBSAMPLE as i64 * (context_frames as i64 - 1);
    if context_frames == 0 || first < 0 {
        return Err(Error::range(
            "target frame",
            format!("{target} leaves no room for {context_frames} context frames at {horizon}"),
        ));
    }
    Ok((0..context_frames as u32).map(|k| first as u32 + SUBSAMPLE * k).collect())
}

pub fn label_path(root: &Path, city: &str, sequence: &str, frame: u32, modality: &str) -> PathBuf {
    root.join(city).join(format!("{city}_{sequence}_{frame:06}_{modality}.png"))
}

/// 8-bit grayscale when every label fits, 16-bit otherwise.
pub fn write_label_png(path: &Path, map: &LabelMap) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let wide = map.max_label() > u8::MAX as u16;
    enc.set_depth(if wide { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
    let data: Vec<u8> = if wide {
        map.labels.iter().flat_map(|v| v.to_be_bytes()).collect()
    } else {
        map.labels.iter().map(|v| v as u8).collect()
    };
    let png_err = |e: png::EncodingError| Error::load(path, e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

pub fn read_label_png(path: &Path, num_labels: usize) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let png_err = |e: png::DecodingError| Error::load(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::load(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let values: Vec<u16> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&v| v as u16))
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|y| {
                buf[y * info.line_size..y * info.line_size + 2 * w]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]))
            })
            .collect(),
        other => return Err(Error::load(path, format!("unsupported bit depth {other:?}"))),
    };
    if let Some(&bad) = values.iter().find(|&&v| v as usize >= num_labels) {
        return Err(Error::load(path, format!("label {bad} >= num_labels {num_labels}")));
    }
    LabelMap::from_values(h, w, &values, num_labels - 1)
}

/// One `{city} {sequence} {target}` manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub city: String,
    pub sequence: String,
    pub target: u32,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [city, sequence, target] = parts.as_slice() else {
            return Err(Error::load(path, format!("line {}: expected 3 fields", i + 1)));
        };
        let target = target
            .parse()
            .map_err(|_| Error::load(path, format!("line {}: bad target frame {target:?}", i + 1)))?;
        out.push(ManifestEntry {
            city: city.to_string(),
            sequence: sequence.to_string(),
            target,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{} {} {}", e.city, e.sequence, e.target)?;
    }
    w.flush()?;
    Ok(())
}

/// Label maps for `frames` at native resolution, one sequence per modality.
pub fn load_frames(
    root: &Path,
    city: &str,
    sequence: &str,
    frames: &[u32],
    modalities: &[ModalitySpec],
) -> Result<SequenceRecord> {
    let mut seqs = Vec::with_capacity(modalities.len());
    for m in modalities {
        let maps = frames
            .iter()
            .map(|&f| read_label_png(&label_path(root, city, sequence, f, &m.name), m.num_labels))
            .collect::<Result<Vec<_>>>()?;
        seqs.push(FrameSequence::new(m.clone(), maps, frames.to_vec())?);
    }
    SequenceRecord::new(seqs, format!("{city}/{sequence}"), SUBSAMPLE)
}

/// Context frames for forecasting `target` at `horizon`, downscaled to the
/// layout resolution.
pub fn load_sequence(
    root: &Path,
    city: &str,
    sequence: &str,
    target: u32,
    horizon: Horizon,
    layout: &TokenLayout,
    modalities: &[ModalitySpec],
) -> Result<SequenceRecord> {
    let frames = context_frame_indices(target, horizon, layout.context_frames)?;
    Ok(load_frames(root, city, sequence, &frames, modalities)?.resized(layout.height, layout.width))
}

/// A full training window (context plus future) ending at `target`.
pub fn load_window(
    root: &Path,
    city: &str,
    sequence: &str,
    target: u32,
    layout: &TokenLayout,
    modalities: &[ModalitySpec],
) -> Result<SequenceRecord> {
    let mut frames = context_frame_indices(target, Horizon::Short, layout.context_frames)?;
    let last = *frames.last().expect("non-empty context");
    frames.extend((1..=layout.future_frames as u32).map(|k| last + SUBSAMPLE * k));
    Ok(load_frames(root, city, sequence, &frames, modalities)?.resized(layout.height, layout.width))
}

/// Items a training loop can draw from. `draw` is a per-(epoch, item) random
/// value a source may use to pick among several windows of one item.
pub trait SequenceSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, index: usize, draw: u64) -> Result<SequenceRecord>;
}

/// Fixed records held in memory.
pub struct InMemorySource(pub Vec<SequenceRecord>);

impl SequenceSource for InMemorySource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn record(&self, index: usize, _draw: u64) -> Result<SequenceRecord> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::range("record index", format!("{index} >= {}", self.0.len())))
    }
}

/// Random windows from synthetic scenes: each draw picks a start frame.
pub struct SyntheticWindows {
    pub scenes: Vec<SyntheticSceneSpec>,
    pub frames: usize,
    pub max_start: u32,
}

impl SyntheticWindows {
    pub fn generate(
        dist: &SceneDistribution,
        count: usize,
        height: usize,
        width: usize,
        frames: usize,
        seed: u64,
    ) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| dist.sample(height, width, scene_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticWindows {
            scenes,
            frames,
            max_start: 240,
        })
    }
}

/// Seed for scene `index` of a split seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl SequenceSource for SyntheticWindows {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn record(&self, index: usize, draw: u64) -> Result<SequenceRecord> {
        let scene = self
            .scenes
            .get(index)
            .ok_or_else(|| Error::range("scene index", format!("{index} >= {}", self.scenes.len())))?;
        let start = (draw % (self.max_start as u64 + 1)) as u32;
        let frames: Vec<u32> = (0..self.frames as u32).map(|k| start + SUBSAMPLE * k).collect();
        render_synthetic(scene, &frames)
    }
}

/// Training windows read from disk, one per manifest entry.
pub struct DiskWindows {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub layout: TokenLayout,
    pub modalities: Vec<ModalitySpec>,
}

impl SequenceSource for DiskWindows {
    fn len(&self) -> usize {
        self.entries.len()
    }

    /// A window ending at the entry's target or an earlier subsampled frame.
    fn record(&self, index: usize, draw: u64) -> Result<SequenceRecord> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::range("manifest index", format!("{index} >= {}", self.entries.len())))?;
        let span = SUBSAMPLE * (self.layout.frames() as u32 - 1);
        let choices = e.target.checked_sub(span).map_or(1, |room| room / SUBSAMPLE + 1);
        let end = e.target - SUBSAMPLE * (draw % choices as u64) as u32;
        load_window(&self.root, &e.city, &e.sequence, end, &self.layout, &self.modalities)
    }
}

/// A synthetic split as written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Used as the city name and the manifest file stem.
    pub name: String,
    pub count: usize,
    /// Frames `0..frames` are written for every sequence.
    pub frames: u32,
    /// Target frame listed in the manifest.
    pub target: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Renders and writes every sequence of `split` plus `{root}/{name}.txt`.
pub fn write_synthetic_split(root: &Path, split: &SplitSpec, dist: &SceneDistribution) -> Result<Vec<ManifestEntry>> {
    if split.count > 0 && split.target >= split.frames {
        return Err(Error::range(
            "target frame",
            format!("{} not below the {} written frames", split.target, split.frames),
        ));
    }
    let frames: Vec<u32> = (0..split.frames).collect();
    let mut entries = Vec::with_capacity(split.count);
    for i in 0..split.count {
        let spec = dist.sample(split.height, split.width, scene_seed(split.seed, i))?;
        let sequence = format!("{i:06}");
        for &f in &frames {
            let (seg, depth) = spec.render_frame(f)?;
            write_label_png(&label_path(root, &split.name, &sequence, f, SEGMENTATION), &seg)?;
            write_label_png(&label_path(root, &split.name, &sequence, f, DEPTH), &depth)?;
        }
        entries.push(ManifestEntry {
            city: split.name.clone(),
            sequence,
            target: split.target,
        });
    }
    std::fs::create_dir_all(root)?;
    write_manifest(&root.join(format!("{}.txt", split.name)), &entries)?;
    Ok(entries)
}
