//! Instance-centric probability redistribution on post-softmax
//! cross-attention maps.
//!
//! Rows of a map belong to image features, columns to context tokens laid out
//! as `S T.. E P..`. For one instance mask:
//!
//! - rows outside the mask hand all `T` and `E` probability to `S`;
//! - rows inside the mask move `lambda_s` (clamped per row to the available
//!   `S` mass) from `S` to `T` and `E`, split `lambda_r : 1 - lambda_r`.
//!
//! Padding columns are never touched, so row sums are preserved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column roles of a tokenized caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    n_text: usize,
    n_ctx: usize,
}

impl TokenLayout {
    pub fn new(n_text: usize, n_ctx: usize) -> Result<Self> {
        if n_text == 0 {
            return Err(Error::Data(
                "token layout needs at least one text token".into(),
            ));
        }
        if n_text + 2 > n_ctx {
            return Err(Error::Data(format!(
                "{n_text} text tokens do not fit a context of {n_ctx}"
            )));
        }
        Ok(Self { n_text, n_ctx })
    }

    pub const fn index_s(&self) -> usize {
        0
    }

    pub fn indices_t(&self) -> std::ops::Range<usize> {
        1..1 + self.n_text
    }

    pub const fn index_e(&self) -> usize {
        1 + self.n_text
    }

    pub fn indices_p(&self) -> std::ops::Range<usize> {
        2 + self.n_text..self.n_ctx
    }

    pub const fn n_text(&self) -> usize {
        self.n_text
    }

    pub const fn n_ctx(&self) -> usize {
        self.n_ctx
    }
}

/// Post-softmax attention probabilities: `height * width` rows by `n_ctx`
/// columns, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap {
    height: usize,
    width: usize,
    n_ctx: usize,
    values: Vec<f64>,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl CrossAttentionMap {
    pub fn new(height: usize, width: usize, n_ctx: usize, values: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(height, width, n_ctx, values)?;
        map.validate()?;
        Ok(map)
    }

    pub(crate) fn new_unchecked(
        height: usize,
        width: usize,
        n_ctx: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if n_ctx == 0 || values.len() != height * width * n_ctx {
            return Err(Error::shape(
                format!("{}x{} rows of {n_ctx}", height, width),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            n_ctx,
            values,
        })
    }

    /// Checks non-negativity and row-stochasticity.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Numerical(format!("attention row {i} has entry {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Numerical(format!("attention row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn feature_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn n_rows(&self) -> usize {
        self.height * self.width
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_ctx..(i + 1) * self.n_ctx]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.n_ctx)
    }

    pub(crate) fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.values.chunks_exact_mut(self.n_ctx)
    }
}

/// Binary instance mask at attention-feature resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl FeatureMask {
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

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IprConfig {
    /// Initial warm-up magnitude.
    pub lambda: f64,
    /// Share of the redistributed `S` mass that goes to the text tokens.
    pub lambda_r: f64,
    /// Fraction of the sampling steps over which the warm-up decays to 0.
    pub warmup_fraction: f64,
    /// Fraction of the sampling steps during which redistribution is active.
    pub ipr_fraction: f64,
}

impl Default for IprConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lambda_r: 0.5,
            warmup_fraction: 0.1,
            ipr_fraction: 0.1,
        }
    }
}

impl IprConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ipr.lambda", self.lambda),
            ("ipr.lambda_r", self.lambda_r),
            ("ipr.warmup_fraction", self.warmup_fraction),
            ("ipr.ipr_fraction", self.ipr_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Redistribution runs for sampling steps `0..active_steps`.
    pub fn active_steps(&self, total_steps: usize) -> usize {
        fraction_of_steps(self.ipr_fraction, total_steps)
    }
}

/// `ceil(fraction * total)`, guarded against representation error such as
/// `0.4 * 50 = 20.000000000000004`.
pub(crate) fn fraction_of_steps(fraction: f64, total: usize) -> usize {
    let raw = fraction * total as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (n.max(0.0) as usize).min(total)
}

/// Where in the denoising loop a map is being rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IprStep {
    /// Sampling step counted from the start of denoising.
    pub step_index: usize,
    pub total_steps: usize,
    /// Model timestep of the current latent.
    pub timestep: usize,
    /// Largest model timestep.
    pub horizon: usize,
}

/// Warm-up term: decays linearly from `lambda` at step 0 to 0 at
/// `warmup_fraction * total_steps`, and stays 0 afterwards.
pub fn warmup_value(step_index: usize, total_steps: usize, cfg: &IprConfig) -> f64 {
    let window = cfg.warmup_fraction * total_steps as f64;
    if window <= 0.0 {
        return 0.0;
    }
    cfg.lambda * (1.0 - step_index as f64 / window).max(0.0)
}

/// Amount of `S` probability moved inside the mask:
/// `(t / horizon) * (min(mean(a), min(a)) + warmup)`. An empty inside region
/// yields 0.
pub fn compute_lambda_s(inside_s: &[f64], timestep: usize, horizon: usize, warmup: f64) -> f64 {
    if inside_s.is_empty() || horizon == 0 {
        return 0.0;
    }
    let mean = inside_s.iter().sum::<f64>() / inside_s.len() as f64;
    let min = inside_s.iter().copied().fold(f64::INFINITY, f64::min);
    (timestep as f64 / horizon as f64) * (mean.min(min) + warmup)
}

/// Zeroes the `T` and `E` entries of a row and adds their mass to `S`.
pub fn redistribute_row_outside(row: &mut [f64], layout: &TokenLayout) {
    let e = layout.index_e();
    let moved: f64 = row[layout.indices_t()].iter().sum::<f64>() + row[e];
    row[layout.indices_t()].fill(0.0);
    row[e] = 0.0;
    row[layout.index_s()] += moved;
}

/// Moves up to `lambda_s` of the `S` entry into `T` (evenly, share
/// `lambda_r`) and `E` (share `1 - lambda_r`). The moved amount is clamped to
/// the row's `S` mass so no entry goes negative.
pub fn redistribute_row_inside(
    row: &mut [f64],
    layout: &TokenLayout,
    lambda_s: f64,
    lambda_r: f64,
) {
    let s = layout.index_s();
    let delta = lambda_s.min(row[s]);
    if !(delta > 0.0) {
        return;
    }
    row[s] -= delta;
    let per_text = delta * lambda_r / layout.n_text() as f64;
    for v in &mut row[layout.indices_t()] {
        *v += per_text;
    }
    row[layout.index_e()] += delta * (1.0 - lambda_r);
}

/// Rewrites one instance's map. Returns the input unchanged (and no
/// `lambda_s`) once `step.step_index` leaves the active window.
pub fn apply_ipr(
    map: &CrossAttentionMap,
    mask: &FeatureMask,
    layout: &TokenLayout,
    cfg: &IprConfig,
    step: &IprStep,
) -> Result<CrossAttentionMap> {
    apply_ipr_traced(map, mask, layout, cfg, step).map(|(m, _)| m)
}

/// [`apply_ipr`] that also reports the `lambda_s` it used.
pub fn apply_ipr_traced(
    map: &CrossAttentionMap,
    mask: &FeatureMask,
    layout: &TokenLayout,
    cfg: &IprConfig,
    step: &IprStep,
) -> Result<(CrossAttentionMap, Option<f64>)> {
    if mask.len() != map.n_rows() {
        return Err(Error::shape(
            format!("mask of {} cells", map.n_rows()),
            format!("mask of {} cells", mask.len()),
        ));
    }
    if layout.n_ctx() != map.n_ctx() {
        return Err(Error::shape(
            format!("{} context columns", map.n_ctx()),
            format!("layout of {} columns", layout.n_ctx()),
        ));
    }
    if step.step_index >= cfg.active_steps(step.total_steps) {
        return Ok((map.clone(), None));
    }

    let inside_s: Vec<f64> = map
        .rows()
        .zip(mask.bits())
        .filter(|(_, &inside)| inside)
        .map(|(row, _)| row[layout.index_s()])
        .collect();
    let warmup = warmup_value(step.step_index, step.total_steps, cfg);
    let lambda_s = compute_lambda_s(&inside_s, step.timestep, step.horizon, warmup);

    let mut out = map.clone();
    for (row, &inside) in out.rows_mut().zip(mask.bits()) {
        if inside {
            redistribute_row_inside(row, layout, lambda_s, cfg.lambda_r);
        } else {
            redistribute_row_outside(row, layout);
        }
    }
    Ok((out, Some(lambda_s)))
}
