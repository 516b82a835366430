//! Instance-level and global evaluation scores.
//!
//! All text/image similarities go through an [`EmbeddingProvider`], which must
//! return unit-norm vectors in a shared space. Instances are evaluated on
//! square crops of their mask bounding boxes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sidecar_path, Frame, PixelMask};

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// `key` names the image for lookup-based providers: `frame/<k>` for
    /// whole frames, `instance/<id>/<k>` for crops.
    fn embed_image(&self, key: &str, image: &Frame) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Provider(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Hashed bag-of-words for text and per-channel intensity histograms for
/// images, both in `3 * bins` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEmbeddingProvider {
    bins: usize,
}

impl Default for ToyEmbeddingProvider {
    fn default() -> Self {
        Self { bins: 8 }
    }
}

impl ToyEmbeddingProvider {
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0 && bins <= 256);
        Self { bins }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl EmbeddingProvider for ToyEmbeddingProvider {
    fn dim(&self) -> usize {
        3 * self.bins
    }

    fn embed_image(&self, _key: &str, image: &Frame) -> Result<Vec<f64>> {
        let mut hist = vec![0.0; self.dim()];
        for px in image.data.chunks_exact(image.channels) {
            for c in 0..3 {
                let v = px[c.min(image.channels - 1)] as usize;
                hist[c * self.bins + v * self.bins / 256] += 1.0;
            }
        }
        l2_normalize(hist)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        for word in text.split_whitespace() {
            let h = fnv1a(word.to_lowercase().as_bytes());
            v[(h % self.dim() as u64) as usize] += 1.0;
        }
        l2_normalize(v).map_err(|_| Error::Provider(format!("no words in text {text:?}")))
    }
}

/// Sidecar of a precomputed embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSidecar {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Precomputed vectors looked up by id: image keys as documented on
/// [`EmbeddingProvider::embed_image`], text by the caption string itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FileEmbeddingProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FileEmbeddingProvider {
    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for (id, v) in vectors {
            if v.len() != dim {
                return Err(Error::Provider(format!(
                    "{id:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if map.insert(id.clone(), l2_normalize(v)?).is_some() {
                return Err(Error::Provider(format!("duplicate embedding id {id:?}")));
            }
        }
        Ok(Self { dim, vectors: map })
    }

    /// Reads `count * dim` little-endian `f32` values and the JSON sidecar
    /// that shares the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: EmbeddingSidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
        if meta.ids.len() != meta.count {
            return Err(Error::format(
                &side,
                format!("{} ids for count {}", meta.ids.len(), meta.count),
            ));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != meta.count * meta.dim * 4 {
            return Err(Error::format(
                path,
                format!(
                    "{} bytes for {} x {} floats",
                    bytes.len(),
                    meta.count,
                    meta.dim
                ),
            ));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let vectors = meta
            .ids
            .into_iter()
            .zip(floats.chunks(meta.dim.max(1)).map(<[f64]>::to_vec));
        Self::from_vectors(meta.dim, vectors).map_err(|e| Error::format(path, e))
    }

    fn lookup(&self, key: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Provider(format!("no embedding for {key:?}")))
    }
}

/// Writes an embedding file readable by [`FileEmbeddingProvider::load`].
pub fn save_embeddings(path: &Path, dim: usize, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let mut bytes = Vec::with_capacity(entries.len() * dim * 4);
    for (id, v) in entries {
        if v.len() != dim {
            return Err(Error::Provider(format!(
                "{id:?} has {} values, expected {dim}",
                v.len()
            )));
        }
        for &x in v {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = EmbeddingSidecar {
        dim,
        count: entries.len(),
        ids: entries.iter().map(|(id, _)| id.clone()).collect(),
    };
    let side = sidecar_path(path);
    fs::write(
        &side,
        serde_json::to_string_pretty(&meta).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(&side, e))
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, key: &str, _image: &Frame) -> Result<Vec<f64>> {
        self.lookup(key)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.lookup(text)
    }
}

/// Pluggable perceptual distance (for example LPIPS). No implementation
/// ships; reports carry `null` when none is supplied.
pub trait PerceptualDistance: Send + Sync {
    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64>;
}

/// Tight bounding box of `mask`, zero-padded to a square with the crop
/// centred (odd padding goes below / right). `None` for an empty mask.
pub fn crop_instance(frame: &Frame, mask: &PixelMask) -> Result<Option<Frame>> {
    if (mask.height, mask.width) != (frame.height, frame.width) {
        return Err(Error::shape(
            format!("{}x{} mask", frame.height, frame.width),
            format!("{}x{} mask", mask.height, mask.width),
        ));
    }
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let b = bbox.get_or_insert((y, y, x, x));
                b.0 = b.0.min(y);
                b.1 = b.1.max(y);
                b.2 = b.2.min(x);
                b.3 = b.3.max(x);
            }
        }
    }
    let Some((y0, y1, x0, x1)) = bbox else {
        return Ok(None);
    };
    let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
    let side = h.max(w);
    let (oy, ox) = ((side - h) / 2, (side - w) / 2);
    let ch = frame.channels;
    let mut out = Frame::filled(side, side, ch, 0);
    for y in 0..h {
        for x in 0..w {
            let dst = ((oy + y) * side + ox + x) * ch;
            out.data[dst..dst + ch].copy_from_slice(frame.pixel(y0 + y, x0 + x));
        }
    }
    Ok(Some(out))
}

/// Crops of one instance across the video.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCrops {
    pub id: String,
    /// `(frame index, crop)` for frames where the mask is non-empty.
    pub crops: Vec<(usize, Frame)>,
    pub skipped_frames: Vec<usize>,
}

impl InstanceCrops {
    pub fn from_frames(id: &str, frames: &[Frame], masks: &[PixelMask]) -> Result<Self> {
        if frames.len() != masks.len() {
            return Err(Error::Data(format!(
                "instance {id:?}: {} masks for {} frames",
                masks.len(),
                frames.len()
            )));
        }
        let mut crops = Vec::new();
        let mut skipped = Vec::new();
        for (k, (f, m)) in frames.iter().zip(masks).enumerate() {
            match crop_instance(f, m)? {
                Some(c) => crops.push((k, c)),
                None => skipped.push(k),
            }
        }
        Ok(Self {
            id: id.to_owned(),
            crops,
            skipped_frames: skipped,
        })
    }

    fn embeddings(&self, provider: &dyn EmbeddingProvider) -> Result<Vec<Vec<f64>>> {
        self.crops
            .iter()
            .map(|(k, c)| provider.embed_image(&format!("instance/{}/{k}", self.id), c))
            .collect()
    }

    /// Mean of the per-frame crop embeddings, re-normalized.
    pub fn aggregate_embedding(&self, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
        let embs = self.embeddings(provider)?;
        if embs.is_empty() {
            return Err(Error::Data(format!(
                "instance {:?} is empty in every frame",
                self.id
            )));
        }
        let mut mean = vec![0.0; embs[0].len()];
        for e in &embs {
            mean.iter_mut().zip(e).for_each(|(m, x)| *m += x);
        }
        l2_normalize(mean)
    }
}

/// `S[i][j]`: instance `i` against caption `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Data("similarity matrix must be square".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(Self { n, values })
    }

    /// Skips the range check; for scores that are not cosines.
    pub fn from_scores(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Data("similarity matrix must be square".into()));
        }
        Ok(Self {
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn similarity_matrix(
    instances: &[InstanceCrops],
    captions: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityMatrix> {
    if instances.is_empty() || instances.len() != captions.len() {
        return Err(Error::Data(format!(
            "{} instances for {} captions",
            instances.len(),
            captions.len()
        )));
    }
    let images = instances
        .iter()
        .map(|i| i.aggregate_embedding(provider))
        .collect::<Result<Vec<_>>>()?;
    let texts = captions
        .iter()
        .map(|c| provider.embed_text(c))
        .collect::<Result<Vec<_>>>()?;
    SimilarityMatrix::new(
        images
            .iter()
            .map(|img| texts.iter().map(|t| cosine(img, t)).collect())
            .collect(),
    )
}

/// Binarizes each row at its (leftmost) maximum and averages the diagonal.
pub fn cia_score(s: &SimilarityMatrix) -> Result<f64> {
    if s.n() == 0 {
        return Err(Error::Data("CIA of an empty matrix".into()));
    }
    let mut hits = 0usize;
    for i in 0..s.n() {
        let row = s.row(i);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!("similarity row {i} contains NaN")));
        }
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        if argmax == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.n() as f64)
}

/// Mean per-frame cosine between crop and caption.
pub fn local_textual_faithfulness(
    crops: &InstanceCrops,
    caption: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    let text = provider.embed_text(caption)?;
    let embs = crops.embeddings(provider)?;
    if embs.is_empty() {
        return Err(Error::Data(format!("instance {:?} has no crops", crops.id)));
    }
    Ok(embs.iter().map(|e| cosine(e, &text)).sum::<f64>() / embs.len() as f64)
}

/// Mean cosine between consecutive crops; `None` with fewer than two.
pub fn local_temporal_consistency(
    crops: &InstanceCrops,
    provider: &dyn EmbeddingProvider,
) -> Result<Option<f64>> {
    let embs = crops.embeddings(provider)?;
    Ok(mean_consecutive(&embs))
}

fn mean_consecutive(embs: &[Vec<f64>]) -> Option<f64> {
    if embs.len() < 2 {
        return None;
    }
    let sum: f64 = embs.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Some(sum / (embs.len() - 1) as f64)
}

/// One instance for [`instance_accuracy`].
#[derive(Debug, Clone, Copy)]
pub struct AccuracyCase<'a> {
    pub crops: &'a InstanceCrops,
    pub source_caption: &'a str,
    pub target_caption: &'a str,
}

/// Fraction of instances whose aggregated crop embedding is strictly closer
/// to the target caption than to the source caption.
pub fn instance_accuracy(
    cases: &[AccuracyCase<'_>],
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Data(
            "instance accuracy needs at least one instance".into(),
        ));
    }
    let mut hits = 0usize;
    for case in cases {
        if instance_prefers_target(case, provider)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

fn instance_prefers_target(
    case: &AccuracyCase<'_>,
    provider: &dyn EmbeddingProvider,
) -> Result<bool> {
    let img = case.crops.aggregate_embedding(provider)?;
    let target = cosine(&img, &provider.embed_text(case.target_caption)?);
    let source = cosine(&img, &provider.embed_text(case.source_caption)?);
    Ok(target > source)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    /// `None` for single-frame videos.
    pub gtc: Option<f64>,
    pub gtf: Option<f64>,
    pub fa: Option<f64>,
}

/// Whole-frame temporal consistency, textual faithfulness and frame accuracy.
/// Caption-dependent scores are `None` when the captions are missing.
pub fn global_scores(
    frames: &[Frame],
    source_caption: Option<&str>,
    target_caption: Option<&str>,
    provider: &dyn EmbeddingProvider,
) -> Result<GlobalScores> {
    if frames.is_empty() {
        return Err(Error::Data("no frames to score".into()));
    }
    let embs = frames
        .iter()
        .enumerate()
        .map(|(k, f)| provider.embed_image(&format!("frame/{k}"), f))
        .collect::<Result<Vec<_>>>()?;
    let gtc = mean_consecutive(&embs);
    let target = target_caption.map(|c| provider.embed_text(c)).transpose()?;
    let source = source_caption.map(|c| provider.embed_text(c)).transpose()?;
    let gtf = target
        .as_ref()
        .map(|t| embs.iter().map(|e| cosine(e, t)).sum::<f64>() / embs.len() as f64);
    let fa = match (&source, &target) {
        (Some(s), Some(t)) => {
            let hits = embs.iter().filter(|e| cosine(e, t) > cosine(e, s)).count();
            Some(hits as f64 / embs.len() as f64)
        }
        _ => None,
    };
    Ok(GlobalScores { gtc, gtf, fa })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 255.0;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering of a `height x width` plane.
fn filter_valid(plane: &[f64], height: usize, width: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (oh, ow) = (height - n + 1, width - n + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        let line = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = win.iter().zip(&line[x..x + n]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win
                .iter()
                .enumerate()
                .map(|(k, w)| w * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
/// valid window positions and then over channels. Frames smaller than the
/// window use the largest odd window that fits.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    let mut size = SSIM_WINDOW.min(a.height).min(a.width);
    if size == 0 {
        return Err(Error::Data("cannot compute SSIM of an empty frame".into()));
    }
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a
            .data
            .iter()
            .skip(c)
            .step_by(ch)
            .map(|&v| f64::from(v))
            .collect();
        let pb: Vec<f64> = b
            .data
            .iter()
            .skip(c)
            .step_by(ch)
            .map(|&v| f64::from(v))
            .collect();
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &win);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &win);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &win);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / ch as f64)
}

/// Zeroes every pixel outside `keep`.
pub fn mask_frame(frame: &Frame, keep: &PixelMask) -> Result<Frame> {
    if (keep.height, keep.width) != (frame.height, frame.width) {
        return Err(Error::shape(
            format!("{}x{} mask", frame.height, frame.width),
            format!("{}x{} mask", keep.height, keep.width),
        ));
    }
    let mut out = frame.clone();
    for (px, &bit) in keep.bits().iter().enumerate() {
        if !bit {
            out.data[px * frame.channels..(px + 1) * frame.channels].fill(0);
        }
    }
    Ok(out)
}

/// SSIM of the background: instance pixels zeroed in both frames.
pub fn background_ssim(a: &Frame, b: &Frame, background: &PixelMask) -> Result<f64> {
    ssim(&mask_frame(a, background)?, &mask_frame(b, background)?)
}

/// Caption data for one instance under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub id: String,
    pub caption: String,
    pub source_caption: Option<String>,
    pub masks: Vec<PixelMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub ltf: f64,
    pub ltc: Option<f64>,
    /// Whether the instance is closer to its target than its source caption.
    pub prefers_target: Option<bool>,
    pub skipped_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cia: Option<f64>,
    pub ltf: Option<f64>,
    pub ltc: Option<f64>,
    pub ia: Option<f64>,
    pub gtc: Option<f64>,
    pub gtf: Option<f64>,
    pub fa: Option<f64>,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub similarity_matrix: Option<Vec<Vec<f64>>>,
    pub instances: Vec<InstanceMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores an edited video against its source.
pub fn evaluate(
    source: &[Frame],
    edited: &[Frame],
    instances: &[EvalInstance],
    global_source_caption: Option<&str>,
    global_target_caption: Option<&str>,
    provider: &dyn EmbeddingProvider,
    perceptual: Option<&dyn PerceptualDistance>,
) -> Result<MetricsReport> {
    if source.len() != edited.len() || source.is_empty() {
        return Err(Error::Data(format!(
            "{} source frames vs {} edited frames",
            source.len(),
            edited.len()
        )));
    }
    let first = &edited[0];
    let edits: Vec<crate::dms::InstanceEdit> = instances
        .iter()
        .map(|i| crate::dms::InstanceEdit::new(i.id.clone(), &i.caption, i.masks.clone()))
        .collect();
    let background = crate::dms::background_mask(&edits, edited.len(), first.height, first.width)?;

    let crops = instances
        .iter()
        .map(|i| InstanceCrops::from_frames(&i.id, edited, &i.masks))
        .collect::<Result<Vec<_>>>()?;
    let mut per_instance = Vec::with_capacity(instances.len());
    for (inst, c) in instances.iter().zip(&crops) {
        let prefers_target = match &inst.source_caption {
            Some(src) => Some(instance_prefers_target(
                &AccuracyCase {
                    crops: c,
                    source_caption: src,
                    target_caption: &inst.caption,
                },
                provider,
            )?),
            None => None,
        };
        per_instance.push(InstanceMetrics {
            id: inst.id.clone(),
            ltf: local_textual_faithfulness(c, &inst.caption, provider)?,
            ltc: local_temporal_consistency(c, provider)?,
            prefers_target,
            skipped_frames: c.skipped_frames.clone(),
        });
    }

    let matrix = if instances.is_empty() {
        None
    } else {
        let captions: Vec<String> = instances.iter().map(|i| i.caption.clone()).collect();
        Some(similarity_matrix(&crops, &captions, provider)?)
    };
    let ia = if per_instance.iter().all(|m| m.prefers_target.is_some()) && !per_instance.is_empty()
    {
        mean(
            per_instance
                .iter()
                .map(|m| f64::from(u8::from(m.prefers_target == Some(true)))),
        )
    } else {
        None
    };
    let global = global_scores(
        edited,
        global_source_caption,
        global_target_caption,
        provider,
    )?;
    let ssim_mean = mean(
        source
            .iter()
            .zip(edited)
            .zip(&background)
            .map(|((s, e), m)| background_ssim(s, e, m))
            .collect::<Result<Vec<_>>>()?
            .into_iter(),
    )
    .expect("at least one frame");
    let lpips = match perceptual {
        Some(p) => mean(
            source
                .iter()
                .zip(edited)
                .zip(&background)
                .map(|((s, e), m)| p.distance(&mask_frame(s, m)?, &mask_frame(e, m)?))
                .collect::<Result<Vec<_>>>()?
                .into_iter(),
        ),
        None => None,
    };

    Ok(MetricsReport {
        cia: matrix.as_ref().map(cia_score).transpose()?,
        ltf: mean(per_instance.iter().map(|m| m.ltf)),
        ltc: mean(per_instance.iter().filter_map(|m| m.ltc)),
        ia,
        gtc: global.gtc,
        gtf: global.gtf,
        fa: global.fa,
        ssim: ssim_mean,
        lpips,
        similarity_matrix: matrix.map(|m| m.rows()),
        instances: per_instance,
    })
}
