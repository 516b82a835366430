//! Noise schedule, the deterministic DDIM step pair and classifier-free
//! guidance.
//!
//! A [`NoiseSchedule`] owns the cumulative coefficients `alpha_bar[t]` for
//! every model timestep `t = 0..=horizon` and a *sampling map* from sampling
//! positions `0..=steps` to model timesteps. Position 0 is always model
//! timestep 0 (`alpha_bar = 1`), so a denoising trajectory closes on the clean
//! latent.
//!
//! The two step maps are exact algebraic inverses for a fixed noise estimate:
//!
//! ```text
//! denoise: z[p-1] = sqrt(a[p-1]) * (z[p] - sqrt(1 - a[p]) * eps) / sqrt(a[p]) + sqrt(1 - a[p-1]) * eps
//! invert:  z[p]   = sqrt(a[p]) * (z[p-1] - sqrt(1 - a[p-1]) * eps) / sqrt(a[p-1]) + sqrt(1 - a[p]) * eps
//! ```

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::predictor::{Caption, ControlSequence, Predictor, PredictorRequest};

/// Dimensions of a latent sequence: `frames x height x width x channels`,
/// stored row-major in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub const fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}x{}x{}x{}]",
            self.frames, self.height, self.width, self.channels
        )
    }
}

/// Per-frame latent grids living at one model timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    shape: LatentShape,
    data: Vec<f64>,
    timestep: usize,
}

impl LatentSequence {
    pub fn new(shape: LatentShape, data: Vec<f64>, timestep: usize) -> Result<Self> {
        if shape.frames == 0 {
            return Err(Error::Data(
                "latent sequence needs at least one frame".into(),
            ));
        }
        if shape.is_empty() {
            return Err(Error::Data(format!("latent shape {shape} has no elements")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            timestep,
        })
    }

    pub fn filled(shape: LatentShape, value: f64, timestep: usize) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()], timestep)
    }

    pub fn zeros(shape: LatentShape) -> Result<Self> {
        Self::filled(shape, 0.0, 0)
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn with_timestep(mut self, timestep: usize) -> Self {
        self.timestep = timestep;
        self
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        let n = self.shape.frame_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &LatentSequence) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &LatentSequence) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn zip_with(
        &self,
        other: &LatentSequence,
        timestep: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<LatentSequence> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(LatentSequence {
            shape: self.shape,
            data,
            timestep,
        })
    }
}

/// Cumulative noise coefficients plus the sampling-position map.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    timestep_map: Vec<usize>,
}

pub const DEFAULT_TRAIN_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear_beta(
            DEFAULT_TRAIN_TIMESTEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// `alpha_bar[t] = prod_{k<=t} (1 - beta_k)` with `beta` linear over
    /// `1..=train_timesteps` and `alpha_bar[0] = 1`.
    pub fn linear_beta(train_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_timesteps == 0 {
            return Err(Error::InvalidSchedule(
                "need at least one model timestep".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(train_timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for k in 0..train_timesteps {
            let beta = if train_timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * k as f64 / (train_timesteps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Accepts an explicit table indexed by model timestep. The sampling map
    /// is the identity, so every model timestep is a sampling position.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        match alpha_bar.first() {
            None => return Err(Error::InvalidSchedule("empty alpha_bar table".into())),
            Some(&first) if first != 1.0 => {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar[0] must be exactly 1, got {first}"
                )))
            }
            _ => {}
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar[{t}] = {a} is outside (0, 1]"
                )));
            }
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar must be strictly decreasing (index {})",
                t + 1
            )));
        }
        let timestep_map = (0..alpha_bar.len()).collect();
        Ok(Self {
            alpha_bar,
            timestep_map,
        })
    }

    /// Parses the one-value-per-line table format.
    pub fn parse_alpha_table(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>().map_err(|e| {
                    Error::InvalidSchedule(format!("line {i}: {l:?} is not a number ({e})"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_alpha_bar(values)
    }

    pub fn load_alpha_table(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_alpha_table(&text).map_err(|e| Error::format(path, e))
    }

    /// Uniform-stride sampling map with `steps` positions above 0: position
    /// `k >= 1` maps to model timestep `1 + (k - 1) * (horizon / steps)`.
    pub fn with_sampling_steps(&self, steps: usize) -> Result<Self> {
        let horizon = self.horizon();
        if steps > horizon {
            return Err(Error::Config(format!(
                "{steps} sampling steps exceed the {horizon}-step schedule"
            )));
        }
        let mut timestep_map = vec![0];
        if let Some(stride) = horizon.checked_div(steps) {
            timestep_map.extend((0..steps).map(|k| 1 + k * stride));
        }
        Ok(Self {
            alpha_bar: self.alpha_bar.clone(),
            timestep_map,
        })
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep_map(&self) -> &[usize] {
        &self.timestep_map
    }

    /// Largest model timestep.
    pub fn horizon(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Number of sampling steps (positions above 0).
    pub fn steps(&self) -> usize {
        self.timestep_map.len() - 1
    }

    pub fn timestep(&self, position: usize) -> Result<usize> {
        self.timestep_map
            .get(position)
            .copied()
            .ok_or(Error::ScheduleRange {
                position,
                len: self.timestep_map.len(),
            })
    }

    pub fn alpha_at(&self, position: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.timestep(position)?])
    }

    fn step_pair(&self, position: usize) -> Result<(f64, f64)> {
        if position == 0 {
            return Err(Error::ScheduleRange {
                position,
                len: self.timestep_map.len(),
            });
        }
        Ok((self.alpha_at(position)?, self.alpha_at(position - 1)?))
    }
}

/// One deterministic DDIM update from sampling position `position` to
/// `position - 1`.
pub fn ddim_denoise_step(
    z: &LatentSequence,
    eps: &LatentSequence,
    position: usize,
    sched: &NoiseSchedule,
) -> Result<LatentSequence> {
    let (a_t, a_prev) = sched.step_pair(position)?;
    let target = sched.timestep(position - 1)?;
    z.zip_with(eps, target, |z, e| ddim_move(z, e, a_t, a_prev))
}

/// Inverse of [`ddim_denoise_step`]: moves a latent from `position - 1` up to
/// `position`.
pub fn ddim_invert_step(
    z_prev: &LatentSequence,
    eps: &LatentSequence,
    position: usize,
    sched: &NoiseSchedule,
) -> Result<LatentSequence> {
    let (a_t, a_prev) = sched.step_pair(position)?;
    let target = sched.timestep(position)?;
    z_prev.zip_with(eps, target, |z, e| ddim_move(z, e, a_prev, a_t))
}

/// Moves `z` from coefficient `a_from` to `a_to` along the line fixed by the
/// noise estimate `eps`. Both DDIM directions are this map.
#[inline]
fn ddim_move(z: f64, eps: f64, a_from: f64, a_to: f64) -> f64 {
    let x0 = (z - (1.0 - a_from).sqrt() * eps) / a_from.sqrt();
    a_to.sqrt() * x0 + (1.0 - a_to).sqrt() * eps
}

/// `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(
    eps_uncond: &LatentSequence,
    eps_cond: &LatentSequence,
    scale: f64,
) -> Result<LatentSequence> {
    if !(scale >= 0.0) {
        return Err(Error::Config(format!(
            "guidance scale must be >= 0, got {scale}"
        )));
    }
    // the affine form is not bit-exact at the endpoints
    if scale == 1.0 {
        eps_uncond.ensure_same_shape(eps_cond)?;
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        eps_uncond.ensure_same_shape(eps_cond)?;
        return Ok(eps_uncond.clone().with_timestep(eps_cond.timestep()));
    }
    eps_uncond.zip_with(eps_cond, eps_cond.timestep(), |u, c| u + scale * (c - u))
}

/// Predicts the inversion noise for the step `position - 1 -> position`.
///
/// The predictor sees the current latent labelled with the *target* timestep:
/// evaluating at `alpha_bar = 1` is singular for closed-form predictors.
pub(crate) fn inversion_noise(
    z_prev: &LatentSequence,
    predictor: &dyn Predictor,
    sched: &NoiseSchedule,
    position: usize,
    control: Option<&ControlSequence>,
) -> Result<LatentSequence> {
    let empty = Caption::empty();
    let request = PredictorRequest {
        latents: z_prev,
        caption: &empty,
        instance_mask: None,
        control,
        timestep: sched.timestep(position)?,
        alpha_bar: sched.alpha_at(position)?,
        horizon: sched.horizon(),
        ipr: None,
    };
    predictor.predict(&request)
}

/// DDIM-inverts `z0` over `n_steps` uniformly strided sampling positions with
/// the empty caption at guidance scale 1. Entry `k` lives at position `k`;
/// entry 0 is the input itself.
pub fn invert_sequence(
    z0: &LatentSequence,
    predictor: &dyn Predictor,
    sched: &NoiseSchedule,
    n_steps: usize,
    control: Option<&ControlSequence>,
) -> Result<Vec<LatentSequence>> {
    let sampling = sched.with_sampling_steps(n_steps)?;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(z0.clone().with_timestep(0));
    for position in 1..=n_steps {
        let prev = &out[position - 1];
        let eps = inversion_noise(prev, predictor, &sampling, position, control)?;
        let next = ddim_invert_step(prev, &eps, position, &sampling)?;
        out.push(next);
    }
    Ok(out)
}
