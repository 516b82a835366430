//! Frames, masks, latents, manifests and run configuration.
//!
//! Byte-level contracts:
//!
//! - frames: binary NetPBM (`P5` gray, `P6` RGB) or PNG, 8 bits per sample;
//! - masks: same formats, converted to gray and thresholded at 128;
//! - latents: raw little-endian `f32`, row-major `(frame, y, x, channel)`,
//!   next to a JSON sidecar `{"shape": [n, h, w, c], "dtype": "f32le",
//!   "timestep": t}` that shares the file stem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::dms::SamplingPlan;
use crate::error::{Error, Result};
use crate::ipr::{FeatureMask, IprConfig};
use crate::predictor::ControlSequence;
use crate::schedule::{LatentSequence, LatentShape};

/// 8-bit image, row-major, interleaved channels (1 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{}x{}x{channels} bytes", height, width),
                format!("{} bytes", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }
}

/// Binary pixel mask for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                format!("{} mask bits", height * width),
                format!("{} mask bits", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    /// Mask of the rectangle `[y0, y1) x [x0, x1)`.
    pub fn rect(height: usize, width: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let bits = (0..height * width)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                (y0..y1).contains(&y) && (x0..x1).contains(&x)
            })
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }
}

fn read_image(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e))
}

/// Loads a gray or RGB frame. Other color types are converted to RGB.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = read_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Frame::new(w, h, 1, buf.into_raw()),
        other => Frame::new(w, h, 3, other.to_rgb8().into_raw()),
    }
}

/// Loads frames and checks that all of them share one size.
pub fn load_frames(paths: &[PathBuf]) -> Result<Vec<Frame>> {
    let frames = paths
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = frames.first() {
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, f)| !f.same_dims(first)) {
            return Err(Error::format(
                &paths[i],
                format!(
                    "frame is {}x{}x{}, expected {}x{}x{}",
                    frames[i].width,
                    frames[i].height,
                    frames[i].channels,
                    first.width,
                    first.height,
                    first.channels
                ),
            ));
        }
    }
    Ok(frames)
}

/// Writes `.pgm`/`.ppm`/`.pnm` as binary NetPBM and anything else as PNG.
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let color = if frame.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let writer = std::io::BufWriter::new(file);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let (w, h) = (frame.width as u32, frame.height as u32);
    let result = match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => {
            let subtype = if frame.channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(writer)
                .with_subtype(subtype)
                .write_image(&frame.data, w, h, color)
        }
        _ => image::codecs::png::PngEncoder::new(writer).write_image(&frame.data, w, h, color),
    };
    result.map_err(|e| Error::format(path, e))
}

pub const MASK_THRESHOLD: u8 = 128;

/// Loads a mask: gray value `>= 128` is inside.
pub fn load_mask(path: &Path) -> Result<PixelMask> {
    let gray = read_image(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let bits = gray
        .into_raw()
        .into_iter()
        .map(|v| v >= MASK_THRESHOLD)
        .collect();
    PixelMask::new(h, w, bits)
}

pub fn load_masks(paths: &[PathBuf]) -> Result<Vec<PixelMask>> {
    let masks = paths
        .iter()
        .map(|p| load_mask(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = masks.first() {
        if let Some(i) = masks
            .iter()
            .position(|m| (m.height, m.width) != (first.height, first.width))
        {
            return Err(Error::format(
                &paths[i],
                "mask size differs from the first mask",
            ));
        }
    }
    Ok(masks)
}

/// Coverage pooling onto a `height x width` grid: a cell is set iff any
/// source pixel in its integer box is set.
pub fn downsample_mask(mask: &PixelMask, height: usize, width: usize) -> Result<FeatureMask> {
    if height == 0 || width == 0 || height > mask.height || width > mask.width {
        return Err(Error::Data(format!(
            "cannot pool a {}x{} mask to {height}x{width}",
            mask.height, mask.width
        )));
    }
    let mut bits = vec![false; height * width];
    for (i, cell) in bits.iter_mut().enumerate() {
        let (cy, cx) = (i / width, i % width);
        let (y0, y1) = (cy * mask.height / height, (cy + 1) * mask.height / height);
        let (x0, x1) = (cx * mask.width / width, (cx + 1) * mask.width / width);
        *cell = (y0..y1).any(|y| (x0..x1).any(|x| mask.get(y, x)));
    }
    FeatureMask::new(height, width, bits)
}

/// Identity encoder: `[0, 255]` bytes to `[-1, 1]` latents, channel for
/// channel.
pub fn frames_to_latents(frames: &[Frame]) -> Result<LatentSequence> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("no frames".into()))?;
    let shape = LatentShape::new(frames.len(), first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(shape.len());
    for f in frames {
        if !f.same_dims(first) {
            return Err(Error::Data("frames differ in size".into()));
        }
        data.extend(f.data.iter().map(|&v| f64::from(v) / 127.5 - 1.0));
    }
    LatentSequence::new(shape, data, 0)
}

/// Inverse of [`frames_to_latents`], clamping to the byte range.
pub fn latents_to_frames(latents: &LatentSequence) -> Result<Vec<Frame>> {
    let shape = latents.shape();
    (0..shape.frames)
        .map(|k| {
            let data = latents
                .frame(k)
                .iter()
                .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
                .collect();
            Frame::new(shape.width, shape.height, shape.channels, data)
        })
        .collect()
}

pub fn load_control(paths: &[PathBuf]) -> Result<ControlSequence> {
    let frames = paths
        .iter()
        .map(|p| read_image(p).map(|i| i.to_luma8()))
        .collect::<Result<Vec<_>>>()?;
    let (height, width) = frames
        .first()
        .map(|f| (f.height() as usize, f.width() as usize))
        .unwrap_or((0, 0));
    let mut values = Vec::new();
    for (f, p) in frames.iter().zip(paths) {
        if (f.height() as usize, f.width() as usize) != (height, width) {
            return Err(Error::format(p, "control map size differs"));
        }
        values.extend(f.as_raw().iter().map(|&v| f64::from(v) / 255.0));
    }
    Ok(ControlSequence {
        frames: frames.len(),
        height,
        width,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSidecar {
    pub shape: [usize; 4],
    pub dtype: String,
    pub timestep: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_latents(path: &Path, latents: &LatentSequence) -> Result<()> {
    let s = latents.shape();
    let mut bytes = Vec::with_capacity(s.len() * 4);
    for &v in latents.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = LatentSidecar {
        shape: [s.frames, s.height, s.width, s.channels],
        dtype: "f32le".into(),
        timestep: latents.timestep(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_latents(path: &Path) -> Result<LatentSequence> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: LatentSidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
    if sidecar.dtype != "f32le" {
        return Err(Error::format(
            &side,
            format!("unsupported dtype {:?}", sidecar.dtype),
        ));
    }
    let [n, h, w, c] = sidecar.shape;
    let shape = LatentShape::new(n, h, w, c);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != shape.len() * 4 {
        return Err(Error::format(
            path,
            format!("{} bytes do not match shape {shape}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    LatentSequence::new(shape, data, sidecar.timestep).map_err(|e| Error::format(path, e))
}

/// One instance entry of a manifest, with paths already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestInstance {
    pub id: String,
    pub caption: String,
    pub source_caption: Option<String>,
    pub masks: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoManifest {
    pub frames: Vec<PathBuf>,
    pub instances: Vec<ManifestInstance>,
    pub global_source_caption: Option<String>,
    pub global_target_caption: Option<String>,
    pub control: Option<Vec<PathBuf>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    id: String,
    caption: String,
    #[serde(default)]
    source_caption: Option<String>,
    masks: Vec<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    frames: Vec<PathBuf>,
    #[serde(default)]
    instances: Vec<RawInstance>,
    #[serde(default)]
    global_source_caption: Option<String>,
    #[serde(default)]
    global_target_caption: Option<String>,
    #[serde(default)]
    control: Option<Vec<PathBuf>>,
}

/// Parses and validates a manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<VideoManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { root.join(p) };

    let manifest = VideoManifest {
        frames: raw.frames.into_iter().map(resolve).collect(),
        instances: raw
            .instances
            .into_iter()
            .map(|i| ManifestInstance {
                id: i.id,
                caption: i.caption,
                source_caption: i.source_caption,
                masks: i.masks.into_iter().map(resolve).collect(),
            })
            .collect(),
        global_source_caption: raw.global_source_caption,
        global_target_caption: raw.global_target_caption,
        control: raw.control.map(|c| c.into_iter().map(resolve).collect()),
    };
    manifest.validate().map_err(|e| Error::format(path, e))?;
    Ok(manifest)
}

impl VideoManifest {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Data("manifest lists no frames".into()));
        }
        let mut ids = HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Data(format!("duplicate instance id {:?}", inst.id)));
            }
            if inst.masks.len() != n {
                return Err(Error::Data(format!(
                    "instance {:?} has {} masks for {n} frames",
                    inst.id,
                    inst.masks.len()
                )));
            }
        }
        if let Some(control) = &self.control {
            if control.len() != n {
                return Err(Error::Data(format!(
                    "{} control maps for {n} frames",
                    control.len()
                )));
            }
        }
        let all = self
            .frames
            .iter()
            .chain(self.instances.iter().flat_map(|i| &i.masks))
            .chain(self.control.iter().flatten());
        for p in all {
            if !p.is_file() {
                return Err(Error::Data(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Every tunable of a run. Field defaults are the shipped defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub total_steps: usize,
    pub inversion_steps: usize,
    pub cfg_scale: f64,
    pub sns_fraction: f64,
    pub reinversion_steps: usize,
    pub seed: u64,
    /// Worker cap; 0 lets the runtime decide.
    pub threads: usize,
    /// `tiny-attention` or `gaussian`.
    pub predictor: String,
    pub gaussian_registry: Option<PathBuf>,
    pub alpha_bar_table: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub edited_frames: Option<PathBuf>,
    pub ipr: IprConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = SamplingPlan::default();
        Self {
            manifest: None,
            out: PathBuf::from("out"),
            total_steps: plan.total_steps,
            inversion_steps: plan.inversion_steps,
            cfg_scale: plan.cfg_scale,
            sns_fraction: plan.sns_fraction,
            reinversion_steps: plan.reinversion_steps,
            seed: plan.seed,
            threads: 0,
            predictor: "tiny-attention".into(),
            gaussian_registry: None,
            alpha_bar_table: None,
            embeddings: None,
            edited_frames: None,
            ipr: plan.ipr,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `dotted.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        if !Self::keys().iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));

        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut table;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                slot.insert(part.to_owned(), value.clone());
                break;
            }
            slot = slot
                .entry(part.to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key:?} is not a table path")))?;
        }
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Every configurable key with its default, in documentation order.
    pub fn keys() -> Vec<(&'static str, String)> {
        let d = Self::default();
        let unset = || "(unset)".to_owned();
        vec![
            ("manifest", unset()),
            ("out", d.out.display().to_string()),
            ("total_steps", d.total_steps.to_string()),
            ("inversion_steps", d.inversion_steps.to_string()),
            ("cfg_scale", d.cfg_scale.to_string()),
            ("sns_fraction", d.sns_fraction.to_string()),
            ("reinversion_steps", d.reinversion_steps.to_string()),
            ("seed", d.seed.to_string()),
            ("threads", d.threads.to_string()),
            ("predictor", d.predictor.clone()),
            ("gaussian_registry", unset()),
            ("alpha_bar_table", unset()),
            ("embeddings", unset()),
            ("edited_frames", unset()),
            ("ipr.lambda", d.ipr.lambda.to_string()),
            ("ipr.lambda_r", d.ipr.lambda_r.to_string()),
            ("ipr.warmup_fraction", d.ipr.warmup_fraction.to_string()),
            ("ipr.ipr_fraction", d.ipr.ipr_fraction.to_string()),
        ]
    }

    pub fn plan(&self) -> SamplingPlan {
        SamplingPlan {
            total_steps: self.total_steps,
            inversion_steps: self.inversion_steps,
            sns_fraction: self.sns_fraction,
            reinversion_steps: self.reinversion_steps,
            cfg_scale: self.cfg_scale,
            ipr: self.ipr,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_examples() {
        let zero = PixelMask::filled(8, 8, false);
        assert_eq!(downsample_mask(&zero, 2, 2).unwrap().count_ones(), 0);
        let ones = PixelMask::filled(8, 8, true);
        assert_eq!(downsample_mask(&ones, 2, 2).unwrap().count_ones(), 4);
        let dot = PixelMask::rect(8, 8, 0, 1, 0, 1);
        let pooled = downsample_mask(&dot, 2, 2).unwrap();
        assert_eq!(pooled.bits(), &[true, false, false, false]);
        assert!(downsample_mask(&dot, 9, 8).is_err());
        // uneven partition: 5 -> 2 uses boxes [0, 2) and [2, 5)
        let edge = PixelMask::rect(5, 5, 4, 5, 4, 5);
        assert_eq!(
            downsample_mask(&edge, 2, 2).unwrap().bits(),
            &[false, false, false, true]
        );
    }

    #[test]
    fn downsample_never_drops_instances() {
        for (y, x) in [(0, 0), (3, 6), (6, 6), (2, 5)] {
            let m = PixelMask::rect(7, 7, y, y + 1, x, x + 1);
            for size in 1..=7 {
                assert!(downsample_mask(&m, size, size).unwrap().count_ones() > 0);
            }
        }
    }

    #[test]
    fn latent_frame_conversion() {
        let f = Frame::new(2, 1, 1, vec![0, 255]).unwrap();
        let z = frames_to_latents(std::slice::from_ref(&f)).unwrap();
        assert_eq!(z.data(), &[-1.0, 1.0]);
        assert_eq!(latents_to_frames(&z).unwrap()[0], f);
    }

    #[test]
    fn config_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("sns_fraction=1").unwrap();
        cfg.set("reinversion_steps = 0").unwrap();
        cfg.set("ipr.lambda=0.25").unwrap();
        cfg.set("predictor=gaussian").unwrap();
        cfg.set("manifest=data/m.json").unwrap();
        assert_eq!(cfg.sns_fraction, 1.0);
        assert_eq!(cfg.reinversion_steps, 0);
        assert_eq!(cfg.ipr.lambda, 0.25);
        assert_eq!(cfg.predictor, "gaussian");
        assert_eq!(cfg.manifest.as_deref(), Some(Path::new("data/m.json")));
        assert!(cfg.set("nope=1").is_err());
        assert!(cfg.set("total_steps=abc").is_err());
        assert!(cfg.set("missing_equals").is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = RunConfig {
            embeddings: Some(PathBuf::from("e.f32")),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let partial = RunConfig::from_toml("total_steps = 10\n[ipr]\nlambda = 0.1\n").unwrap();
        assert_eq!(partial.total_steps, 10);
        assert_eq!(partial.ipr.lambda, 0.1);
        assert_eq!(partial.ipr.lambda_r, 0.5);
    }
}
