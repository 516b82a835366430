//! The noise-predictor interface and two closed-form predictors.
//!
//! [`ToyGaussianPredictor`] returns the exact posterior noise for data drawn
//! from a per-caption Gaussian, so every sampler built on top of it has a
//! known answer. [`TinyAttentionPredictor`] is a one-layer cross-attention
//! network whose post-softmax map can be rewritten in place, which lets the
//! redistribution rules run inside a real attention computation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{downsample_mask, PixelMask};
use crate::ipr::{apply_ipr_traced, CrossAttentionMap, IprConfig, IprStep, TokenLayout};
use crate::schedule::{LatentSequence, LatentShape};

pub const DEFAULT_CONTEXT_LEN: usize = 16;

/// One slot of the padded text context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextToken {
    Start,
    Text(u16),
    End,
    Pad,
}

/// A tokenized caption: lowercase whitespace words hashed to 16-bit ids,
/// truncated so that `S` and `E` always fit the context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    text: String,
    token_ids: Vec<u16>,
    n_ctx: usize,
}

impl Caption {
    pub fn new(text: &str) -> Self {
        Self::with_context(text, DEFAULT_CONTEXT_LEN)
    }

    pub fn with_context(text: &str, n_ctx: usize) -> Self {
        assert!(n_ctx >= 2, "context must hold the start and end tokens");
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let token_ids = words.iter().take(n_ctx - 2).map(|w| token_id(w)).collect();
        Self {
            text: words.join(" "),
            token_ids,
            n_ctx,
        }
    }

    /// The null caption used for inversion and background noise.
    pub fn empty() -> Self {
        Self::new("")
    }

    /// Normalized text; the registry key of this caption.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_ids(&self) -> &[u16] {
        &self.token_ids
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    /// Fails for the empty caption, which has no text columns.
    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.token_ids.len(), self.n_ctx)
    }

    pub fn context(&self) -> Vec<ContextToken> {
        let mut ctx = Vec::with_capacity(self.n_ctx);
        ctx.push(ContextToken::Start);
        ctx.extend(self.token_ids.iter().map(|&id| ContextToken::Text(id)));
        ctx.push(ContextToken::End);
        ctx.resize(self.n_ctx, ContextToken::Pad);
        ctx
    }
}

/// FNV-1a folded to 16 bits.
fn token_id(word: &str) -> u16 {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    ((h >> 16) ^ (h & 0xffff)) as u16
}

/// Depth-like side channel, one scalar grid per frame. Carried to the
/// predictor untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Redistribution settings forwarded with an instance-conditioned request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IprRequest {
    pub config: IprConfig,
    pub step_index: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictorRequest<'a> {
    pub latents: &'a LatentSequence,
    pub caption: &'a Caption,
    /// One pixel mask per latent frame.
    pub instance_mask: Option<&'a [PixelMask]>,
    pub control: Option<&'a ControlSequence>,
    pub timestep: usize,
    /// Cumulative coefficient at `timestep`.
    pub alpha_bar: f64,
    pub horizon: usize,
    pub ipr: Option<IprRequest>,
}

impl PredictorRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        let frames = self.latents.shape().frames;
        if let Some(masks) = self.instance_mask {
            if masks.len() != frames {
                return Err(Error::shape(
                    format!("{frames} mask frames"),
                    format!("{} mask frames", masks.len()),
                ));
            }
        }
        if let Some(control) = self.control {
            if control.frames != frames {
                return Err(Error::shape(
                    format!("{frames} control frames"),
                    format!("{} control frames", control.frames),
                ));
            }
        }
        if !(self.alpha_bar > 0.0 && self.alpha_bar <= 1.0) {
            return Err(Error::Numerical(format!(
                "alpha_bar {} outside (0, 1]",
                self.alpha_bar
            )));
        }
        Ok(())
    }
}

/// Predicted noise plus the redistribution amounts applied along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub noise: LatentSequence,
    pub lambda_s: Vec<f64>,
}

/// `eps_theta`. Implementations must be deterministic.
pub trait Predictor: Send + Sync {
    fn predict(&self, req: &PredictorRequest<'_>) -> Result<LatentSequence>;

    fn predict_traced(&self, req: &PredictorRequest<'_>) -> Result<Prediction> {
        Ok(Prediction {
            noise: self.predict(req)?,
            lambda_s: Vec::new(),
        })
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict(&self, req: &PredictorRequest<'_>) -> Result<LatentSequence> {
        (**self).predict(req)
    }

    fn predict_traced(&self, req: &PredictorRequest<'_>) -> Result<Prediction> {
        (**self).predict_traced(req)
    }
}

/// Returns the same noise value everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPredictor {
    value: f64,
}

impl ConstantPredictor {
    pub fn new(value: f64) -> Self {
        Self { value }
    }
}

impl Predictor for ConstantPredictor {
    fn predict(&self, req: &PredictorRequest<'_>) -> Result<LatentSequence> {
        req.validate()?;
        LatentSequence::filled(req.latents.shape(), self.value, req.timestep)
    }
}

/// Target distribution for one caption: `x0 ~ N(mu, sigma^2)` per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTarget {
    /// Flat row-major values.
    pub mu: Vec<f64>,
    /// `[height, width, channels]` (shared by every frame) or
    /// `[frames, height, width, channels]`.
    pub shape: Vec<usize>,
    pub sigma: f64,
}

impl GaussianTarget {
    pub fn constant(shape: LatentShape, mu: f64, sigma: f64) -> Self {
        Self {
            mu: vec![mu; shape.frame_len()],
            shape: vec![shape.height, shape.width, shape.channels],
            sigma,
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if !(self.shape.len() == 3 || self.shape.len() == 4) || expected != self.mu.len() {
            return Err(Error::Data(format!(
                "caption {key:?}: mu has {} values for shape {:?}",
                self.mu.len(),
                self.shape
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Data(format!("caption {key:?}: sigma must be >= 0")));
        }
        Ok(())
    }

    /// Mean value for flat index `i` of a sequence with `shape`.
    fn mean_at(&self, shape: &LatentShape) -> Result<impl Fn(usize) -> f64 + '_> {
        let per_frame = self.shape.len() == 3;
        let dims = if per_frame {
            [shape.height, shape.width, shape.channels].to_vec()
        } else {
            [shape.frames, shape.height, shape.width, shape.channels].to_vec()
        };
        if dims != self.shape {
            return Err(Error::shape(format!("{:?}", self.shape), shape));
        }
        let frame_len = shape.frame_len();
        Ok(move |i: usize| {
            if per_frame {
                self.mu[i % frame_len]
            } else {
                self.mu[i]
            }
        })
    }
}

/// Closed-form posterior noise for Gaussian data:
/// `eps = (z - sqrt(a) mu) sqrt(1 - a) / (a sigma^2 + 1 - a)`.
///
/// This is `(z - sqrt(a) E[x0 | z]) / sqrt(1 - a)` rearranged so that it stays
/// finite at `a = 1` whenever `sigma > 0`. With `sigma = 0` the implied clean
/// estimate is exactly `mu`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToyGaussianPredictor {
    targets: BTreeMap<String, GaussianTarget>,
}

impl ToyGaussianPredictor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the target for `caption` (normalized like [`Caption`]). The
    /// empty caption registers the source distribution.
    pub fn with_target(mut self, caption: &str, target: GaussianTarget) -> Result<Self> {
        let key = Caption::new(caption).text().to_owned();
        target.validate(&key)?;
        self.targets.insert(key, target);
        Ok(self)
    }

    pub fn target(&self, caption: &str) -> Option<&GaussianTarget> {
        self.targets.get(Caption::new(caption).text())
    }

    /// Reads a JSON object mapping caption strings to
    /// `{"mu": [...], "shape": [...], "sigma": s}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, GaussianTarget> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("registry: {e}")))?;
        raw.into_iter()
            .try_fold(Self::new(), |acc, (caption, target)| {
                acc.with_target(&caption, target)
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.targets).expect("registry serializes")
    }
}

impl Predictor for ToyGaussianPredictor {
    fn predict(&self, req: &PredictorRequest<'_>) -> Result<LatentSequence> {
        req.validate()?;
        let key = req.caption.text();
        let target = self
            .targets
            .get(key)
            .ok_or_else(|| Error::UnknownCaption(key.to_owned()))?;
        let shape = req.latents.shape();
        let mean = target.mean_at(&shape)?;
        let a = req.alpha_bar;
        let s = 1.0 - a;
        let denom = a * target.sigma * target.sigma + s;
        if denom <= 0.0 {
            return Err(Error::Numerical(format!(
                "caption {key:?}: posterior noise undefined at alpha_bar = {a} with sigma = 0"
            )));
        }
        let (sa, ss) = (a.sqrt(), s.sqrt());
        let data = req
            .latents
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| (z - sa * mean(i)) * ss / denom)
            .collect();
        LatentSequence::new(shape, data, req.timestep)
    }
}

/// What an attention hook sees besides the map itself.
#[derive(Debug, Clone, Copy)]
pub struct HookContext<'a> {
    pub frame: usize,
    pub caption: &'a Caption,
    /// `None` for the empty caption.
    pub layout: Option<TokenLayout>,
    pub timestep: usize,
    pub horizon: usize,
}

/// Rewrites a post-softmax cross-attention map before value aggregation.
pub trait AttentionHook: Send + Sync {
    fn rewrite(&self, map: CrossAttentionMap, ctx: &HookContext<'_>) -> Result<CrossAttentionMap>;
}

impl<F> AttentionHook for F
where
    F: Fn(CrossAttentionMap, &HookContext<'_>) -> Result<CrossAttentionMap> + Send + Sync,
{
    fn rewrite(&self, map: CrossAttentionMap, ctx: &HookContext<'_>) -> Result<CrossAttentionMap> {
        self(map, ctx)
    }
}

const KEY_DIM: usize = 8;
const EMBED_DIM: usize = 8;
const START_BIAS: f64 = 2.0;

/// Single cross-attention layer predicting the clean latent per pixel.
///
/// Queries come from each pixel's latent channels and the normalized
/// timestep. Keys are fixed per context position; token content enters only
/// through the values, so a token whose probability is zero cannot influence
/// the output. The clean estimate `x0 = sum_j A_j v_j` is converted to noise
/// with `eps = (z - sqrt(a) x0) / sqrt(1 - a)`.
#[derive(Clone)]
pub struct TinyAttentionPredictor {
    seed: u64,
    channels: usize,
    n_ctx: usize,
    query: Vec<f64>,
    keys: Vec<f64>,
    value_proj: Vec<f64>,
    start_embedding: Vec<f64>,
    end_embedding: Vec<f64>,
    pad_embedding: Vec<f64>,
    text_scale: f64,
    hook: Option<Arc<dyn AttentionHook>>,
}

impl std::fmt::Debug for TinyAttentionPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TinyAttentionPredictor")
            .field("seed", &self.seed)
            .field("channels", &self.channels)
            .field("n_ctx", &self.n_ctx)
            .field("text_scale", &self.text_scale)
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

impl TinyAttentionPredictor {
    pub fn new(seed: u64, channels: usize) -> Self {
        Self::with_context(seed, channels, DEFAULT_CONTEXT_LEN)
    }

    pub fn with_context(seed: u64, channels: usize, n_ctx: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = uniform_vec(&mut rng, KEY_DIM * (channels + 1), 1.5);
        let keys = uniform_vec(&mut rng, n_ctx * KEY_DIM, 1.0);
        let value_proj = uniform_vec(
            &mut rng,
            channels * EMBED_DIM,
            1.0 / (EMBED_DIM as f64).sqrt(),
        );
        let start_embedding = uniform_vec(&mut rng, EMBED_DIM, 1.0);
        let end_embedding = uniform_vec(&mut rng, EMBED_DIM, 1.0);
        let pad_embedding = uniform_vec(&mut rng, EMBED_DIM, 1.0);
        Self {
            seed,
            channels,
            n_ctx,
            query,
            keys,
            value_proj,
            start_embedding,
            end_embedding,
            pad_embedding,
            text_scale: 1.0,
            hook: None,
        }
    }

    /// Routes every post-softmax map through `hook` before aggregation.
    pub fn with_attention_hook(mut self, hook: impl AttentionHook + 'static) -> Self {
        self.hook = Some(Arc::new(hook));
        self
    }

    /// Multiplies every text-token embedding by `factor`.
    pub fn with_text_embedding_scale(mut self, factor: f64) -> Self {
        self.text_scale = factor;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn embedding(&self, token: ContextToken) -> Vec<f64> {
        match token {
            ContextToken::Start => self.start_embedding.clone(),
            ContextToken::End => self.end_embedding.clone(),
            ContextToken::Pad => self.pad_embedding.clone(),
            ContextToken::Text(id) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ (u64::from(id) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                uniform_vec(&mut rng, EMBED_DIM, self.text_scale)
            }
        }
    }

    /// Value vector (one entry per latent channel) for each context slot.
    fn values(&self, caption: &Caption) -> Vec<Vec<f64>> {
        caption
            .context()
            .into_iter()
            .map(|tok| {
                let emb = self.embedding(tok);
                (0..self.channels)
                    .map(|c| {
                        let row = &self.value_proj[c * EMBED_DIM..(c + 1) * EMBED_DIM];
                        row.iter().zip(&emb).map(|(w, e)| w * e).sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Post-softmax map for one frame.
    pub fn attention_map(
        &self,
        latents: &LatentSequence,
        frame: usize,
        timestep: usize,
        horizon: usize,
    ) -> Result<CrossAttentionMap> {
        let shape = latents.shape();
        let t_feat = if horizon == 0 {
            0.0
        } else {
            timestep as f64 / horizon as f64
        };
        let scale = 1.0 / (KEY_DIM as f64).sqrt();
        let mut values = Vec::with_capacity(shape.pixels_per_frame() * self.n_ctx);
        let mut q = [0.0; KEY_DIM];
        let mut logits = vec![0.0; self.n_ctx];
        for pixel in latents.frame(frame).chunks_exact(shape.channels) {
            for (d, qd) in q.iter_mut().enumerate() {
                let w = &self.query[d * (self.channels + 1)..(d + 1) * (self.channels + 1)];
                *qd = pixel.iter().zip(w).map(|(z, w)| z * w).sum::<f64>()
                    + w[self.channels] * t_feat;
            }
            for (j, l) in logits.iter_mut().enumerate() {
                let k = &self.keys[j * KEY_DIM..(j + 1) * KEY_DIM];
                *l = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            logits[0] += START_BIAS;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            values.extend(exps.iter().map(|e| e / sum));
        }
        CrossAttentionMap::new_unchecked(shape.height, shape.width, self.n_ctx, values)
    }
}

impl Predictor for TinyAttentionPredictor {
    fn predict(&self, req: &PredictorRequest<'_>) -> Result<LatentSequence> {
        self.predict_traced(req).map(|p| p.noise)
    }

    fn predict_traced(&self, req: &PredictorRequest<'_>) -> Result<Prediction> {
        req.validate()?;
        let shape = req.latents.shape();
        if shape.channels != self.channels {
            return Err(Error::shape(
                format!("{} latent channels", self.channels),
                format!("{} latent channels", shape.channels),
            ));
        }
        if req.caption.n_ctx() != self.n_ctx {
            return Err(Error::shape(
                format!("context of {}", self.n_ctx),
                format!("context of {}", req.caption.n_ctx()),
            ));
        }
        let a = req.alpha_bar;
        if a >= 1.0 {
            return Err(Error::Numerical(
                "attention predictor cannot produce noise at alpha_bar = 1".into(),
            ));
        }
        let layout = req.caption.layout().ok();
        let values = self.values(req.caption);
        let (sa, ss) = (a.sqrt(), (1.0 - a).sqrt());
        let mut noise = Vec::with_capacity(shape.len());
        let mut lambda_trace = Vec::new();

        for frame in 0..shape.frames {
            let mut map = self.attention_map(req.latents, frame, req.timestep, req.horizon)?;
            if let (Some(ipr), Some(masks), Some(layout)) = (req.ipr, req.instance_mask, layout) {
                let mask = downsample_mask(&masks[frame], shape.height, shape.width)?;
                let step = IprStep {
                    step_index: ipr.step_index,
                    total_steps: ipr.total_steps,
                    timestep: req.timestep,
                    horizon: req.horizon,
                };
                let (rewritten, lambda) =
                    apply_ipr_traced(&map, &mask, &layout, &ipr.config, &step)?;
                map = rewritten;
                lambda_trace.extend(lambda);
            }
            if let Some(hook) = &self.hook {
                let ctx = HookContext {
                    frame,
                    caption: req.caption,
                    layout,
                    timestep: req.timestep,
                    horizon: req.horizon,
                };
                let expected = (map.feature_shape(), map.n_ctx());
                map = hook.rewrite(map, &ctx)?;
                if (map.feature_shape(), map.n_ctx()) != expected {
                    return Err(Error::shape(
                        format!("hook output {:?}", expected),
                        format!("{:?}", (map.feature_shape(), map.n_ctx())),
                    ));
                }
            }
            let latent = req.latents.frame(frame);
            for (pixel, row) in map.rows().enumerate() {
                for c in 0..self.channels {
                    let x0: f64 = row.iter().zip(&values).map(|(p, v)| p * v[c]).sum();
                    let z = latent[pixel * self.channels + c];
                    noise.push((z - sa * x0) / ss);
                }
            }
        }
        Ok(Prediction {
            noise: LatentSequence::new(shape, noise, req.timestep)?,
            lambda_s: lambda_trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> LatentSequence {
        LatentSequence::new(LatentShape::new(1, 1, 1, 1), vec![v], 0).unwrap()
    }

    fn request<'a>(
        z: &'a LatentSequence,
        caption: &'a Caption,
        alpha_bar: f64,
    ) -> PredictorRequest<'a> {
        PredictorRequest {
            latents: z,
            caption,
            instance_mask: None,
            control: None,
            timestep: 500,
            alpha_bar,
            horizon: 1000,
            ipr: None,
        }
    }

    #[test]
    fn caption_layout() {
        let c = Caption::new("  A Red   car ");
        assert_eq!(c.text(), "a red car");
        assert_eq!(c.token_ids().len(), 3);
        let l = c.layout().unwrap();
        assert_eq!(l.index_e(), 4);
        let ctx = c.context();
        assert_eq!(ctx.len(), 16);
        assert_eq!(ctx[0], ContextToken::Start);
        assert_eq!(ctx[4], ContextToken::End);
        assert!(ctx[5..].iter().all(|t| *t == ContextToken::Pad));

        let e = Caption::empty();
        assert!(e.is_empty());
        assert!(e.layout().is_err());
        assert_eq!(e.context()[..2], [ContextToken::Start, ContextToken::End]);

        let long = Caption::new(&"w ".repeat(40));
        assert_eq!(long.token_ids().len(), 14);
        assert_eq!(*long.context().last().unwrap(), ContextToken::End);
    }

    #[test]
    fn tokenizer_is_stable() {
        assert_eq!(token_id("cat"), token_id("cat"));
        assert_ne!(token_id("cat"), token_id("dog"));
        assert_eq!(
            Caption::new("Cat").token_ids(),
            Caption::new("cat").token_ids()
        );
    }

    fn gaussian(mu: f64, sigma: f64) -> ToyGaussianPredictor {
        let shape = LatentShape::new(1, 1, 1, 1);
        ToyGaussianPredictor::new()
            .with_target("x", GaussianTarget::constant(shape, mu, sigma))
            .unwrap()
    }

    #[test]
    fn gaussian_on_manifold_point_has_no_noise() {
        let p = gaussian(2.0, 0.0);
        let z = scalar(0.5 * 2.0);
        let c = Caption::new("x");
        assert_eq!(p.predict(&request(&z, &c, 0.25)).unwrap().data()[0], 0.0);
    }

    #[test]
    fn gaussian_hand_value() {
        let p = gaussian(2.0, 0.0);
        let z = scalar(1.5);
        let c = Caption::new("x");
        let eps = p.predict(&request(&z, &c, 0.25)).unwrap().data()[0];
        assert!((eps - 0.5 / 0.75f64.sqrt()).abs() < 1e-12);
        assert!((eps - 0.577350).abs() < 1e-6);
    }

    #[test]
    fn gaussian_matches_posterior_form() {
        // reference: eps = (z - sqrt(a) E[x0|z]) / sqrt(1-a)
        let (mu, sigma, a, zv): (f64, f64, f64, f64) = (0.7, 0.9, 0.3, -1.1);
        let posterior =
            mu + a.sqrt() * sigma * sigma / (a * sigma * sigma + 1.0 - a) * (zv - a.sqrt() * mu);
        let reference = (zv - a.sqrt() * posterior) / (1.0 - a).sqrt();
        let p = gaussian(mu, sigma);
        let z = scalar(zv);
        let c = Caption::new("x");
        let eps = p.predict(&request(&z, &c, a)).unwrap().data()[0];
        assert!((eps - reference).abs() < 1e-12);
    }

    #[test]
    fn gaussian_uninformative_limit() {
        // brute-force: noise vanishes as sigma grows
        let z = scalar(1.3);
        let c = Caption::new("x");
        let mut last = f64::INFINITY;
        for sigma in [1.0, 1e3, 1e6] {
            let eps = gaussian(0.0, sigma)
                .predict(&request(&z, &c, 0.4))
                .unwrap()
                .data()[0];
            let reference = 1.3 / 0.6f64.sqrt() * 0.6 / (0.4 * sigma * sigma + 0.6);
            assert!((eps - reference).abs() <= 1e-12 * reference.abs().max(1e-300));
            assert!(eps.abs() < last);
            last = eps.abs();
        }
        assert!(last < 1e-11);
    }

    #[test]
    fn gaussian_errors() {
        let p = gaussian(0.0, 0.0);
        let z = scalar(1.0);
        let other = Caption::new("y");
        assert!(matches!(
            p.predict(&request(&z, &other, 0.5)),
            Err(Error::UnknownCaption(_))
        ));
        let x = Caption::new("x");
        assert!(matches!(
            p.predict(&request(&z, &x, 1.0)),
            Err(Error::Numerical(_))
        ));
        let wide = LatentSequence::zeros(LatentShape::new(1, 1, 2, 1)).unwrap();
        assert!(matches!(
            p.predict(&request(&wide, &x, 0.5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn registry_json_round_trip() {
        let json = r#"{
            "": {"mu": [0.0, 0.0], "shape": [1, 2, 1], "sigma": 0.0},
            "A Tiger": {"mu": [1.0, 2.0], "shape": [1, 2, 1], "sigma": 0.5}
        }"#;
        let p = ToyGaussianPredictor::from_json(json).unwrap();
        assert_eq!(p.target("a tiger").unwrap().sigma, 0.5);
        assert!(p.target("").is_some());
        let again = ToyGaussianPredictor::from_json(&p.to_json()).unwrap();
        assert_eq!(again, p);
        assert!(ToyGaussianPredictor::from_json(
            r#"{"x": {"mu": [1.0], "shape": [1, 2, 1], "sigma": 0.0}}"#
        )
        .is_err());
    }

    fn small_latents() -> LatentSequence {
        let shape = LatentShape::new(2, 3, 3, 2);
        let data = (0..shape.len())
            .map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0)
            .collect();
        LatentSequence::new(shape, data, 0).unwrap()
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let p = TinyAttentionPredictor::new(7, 2);
        let z = small_latents();
        for frame in 0..2 {
            p.attention_map(&z, frame, 600, 1000)
                .unwrap()
                .validate()
                .unwrap();
        }
    }

    #[test]
    fn attention_predictor_is_deterministic() {
        let p = TinyAttentionPredictor::new(7, 2);
        let z = small_latents();
        let c = Caption::new("a red car");
        let a = p.predict(&request(&z, &c, 0.4)).unwrap();
        let b = p.predict(&request(&z, &c, 0.4)).unwrap();
        assert_eq!(a, b);
        let identity = p
            .clone()
            .with_attention_hook(|m: CrossAttentionMap, _: &HookContext<'_>| Ok(m));
        assert_eq!(identity.predict(&request(&z, &c, 0.4)).unwrap(), a);
    }

    #[test]
    fn zeroed_text_columns_remove_text_dependence() {
        let hook = |mut m: CrossAttentionMap, ctx: &HookContext<'_>| {
            if let Some(layout) = ctx.layout {
                for row in m.rows_mut() {
                    crate::ipr::redistribute_row_outside(row, &layout);
                }
            }
            Ok(m)
        };
        let base = TinyAttentionPredictor::new(3, 2).with_attention_hook(hook);
        let perturbed = base.clone().with_text_embedding_scale(1.1);
        let z = small_latents();
        let c = Caption::new("a blue bird");
        let a = base.predict(&request(&z, &c, 0.4)).unwrap();
        let b = perturbed.predict(&request(&z, &c, 0.4)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);

        // without the hook the text embedding matters
        let plain = TinyAttentionPredictor::new(3, 2);
        let plain_b = plain.clone().with_text_embedding_scale(1.1);
        let d = plain
            .predict(&request(&z, &c, 0.4))
            .unwrap()
            .max_abs_diff(&plain_b.predict(&request(&z, &c, 0.4)).unwrap())
            .unwrap();
        assert!(d > 1e-6);
    }

    #[test]
    fn hook_shape_mismatch_is_an_error() {
        let hook = |m: CrossAttentionMap, _: &HookContext<'_>| {
            CrossAttentionMap::new_unchecked(1, 1, m.n_ctx(), m.row(0).to_vec())
        };
        let p = TinyAttentionPredictor::new(3, 2).with_attention_hook(hook);
        let z = small_latents();
        let c = Caption::new("a cat");
        assert!(matches!(
            p.predict(&request(&z, &c, 0.4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_frame_count_is_checked() {
        let p = TinyAttentionPredictor::new(3, 2);
        let z = small_latents();
        let c = Caption::new("a cat");
        let masks = vec![PixelMask::filled(3, 3, true)];
        let mut req = request(&z, &c, 0.4);
        req.instance_mask = Some(&masks);
        assert!(p.predict(&req).is_err());
    }
}
