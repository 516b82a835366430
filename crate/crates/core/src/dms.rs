//! Disentangled multi-instance sampling.
//!
//! A run inverts the source latents once, then:
//!
//! 1. **series sampling**: one branch per instance, each denoised with its own
//!    caption inside its mask and the reconstruction noise everywhere else;
//! 2. **fusion**: branch latents are pasted into their masks over the
//!    inverted background;
//! 3. **re-inversion**: the fused latent is pushed back up `l` steps;
//! 4. **parallel sampling**: a single shared latent is denoised to the end,
//!    every step mixing the per-instance noises by mask with the background
//!    reconstruction noise.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::PixelMask;
use crate::ipr::{fraction_of_steps, IprConfig};
use crate::predictor::{
    Caption, ControlSequence, IprRequest, Prediction, Predictor, PredictorRequest,
};
use crate::schedule::{
    cfg_combine, ddim_denoise_step, ddim_invert_step, inversion_noise, invert_sequence,
    LatentSequence, LatentShape, NoiseSchedule,
};

/// One instance to edit: a mask per frame and the caption to paint into it.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEdit {
    pub id: String,
    pub caption: Caption,
    pub masks: Vec<PixelMask>,
}

impl InstanceEdit {
    pub fn new(id: impl Into<String>, caption: &str, masks: Vec<PixelMask>) -> Self {
        Self {
            id: id.into(),
            caption: Caption::new(caption),
            masks,
        }
    }

    fn validate(&self, shape: &LatentShape) -> Result<()> {
        if self.masks.len() != shape.frames {
            return Err(Error::Data(format!(
                "instance {:?} has {} masks for {} frames",
                self.id,
                self.masks.len(),
                shape.frames
            )));
        }
        if let Some(m) = self
            .masks
            .iter()
            .find(|m| (m.height, m.width) != (shape.height, shape.width))
        {
            return Err(Error::Data(format!(
                "instance {:?}: mask is {}x{}, latents are {}x{}",
                self.id, m.height, m.width, shape.height, shape.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total_steps: usize,
    pub inversion_steps: usize,
    /// Leading fraction of the denoising steps run as independent branches.
    pub sns_fraction: f64,
    pub reinversion_steps: usize,
    pub cfg_scale: f64,
    pub ipr: IprConfig,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            total_steps: 50,
            inversion_steps: 100,
            sns_fraction: 0.4,
            reinversion_steps: 2,
            cfg_scale: 12.5,
            ipr: IprConfig::default(),
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.inversion_steps == 0 {
            return Err(Error::Config("inversion_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sns_fraction) {
            return Err(Error::Config(format!(
                "sns_fraction must lie in [0, 1], got {}",
                self.sns_fraction
            )));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!(
                "cfg_scale must be >= 0, got {}",
                self.cfg_scale
            )));
        }
        self.ipr.validate()
    }

    pub fn sns_steps(&self) -> usize {
        fraction_of_steps(self.sns_fraction, self.total_steps)
    }

    /// Re-inversion cannot climb above the top of the denoising schedule.
    pub fn effective_reinversion_steps(&self) -> usize {
        self.reinversion_steps.min(self.sns_steps())
    }

    pub fn mode(&self) -> RunMode {
        let sns = self.sns_steps();
        if sns == 0 {
            RunMode::PurePns
        } else if sns == self.total_steps && self.reinversion_steps == 0 {
            RunMode::PureSns
        } else if self.reinversion_steps == 0 {
            RunMode::SnsPns
        } else {
            RunMode::Full
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "pure SNS")]
    PureSns,
    #[serde(rename = "pure PNS")]
    PurePns,
    #[serde(rename = "SNS + PNS (no re-inv)")]
    SnsPns,
    #[serde(rename = "SNS + PNS + re-inv")]
    Full,
}

impl RunMode {
    pub fn label(&self) -> &'static str {
        match self {
            RunMode::PureSns => "pure SNS",
            RunMode::PurePns => "pure PNS",
            RunMode::SnsPns => "SNS + PNS (no re-inv)",
            RunMode::Full => "SNS + PNS + re-inv",
        }
    }
}

/// Inverted latents keyed by model timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedTrajectory {
    entries: Vec<LatentSequence>,
}

impl InvertedTrajectory {
    pub fn new(mut entries: Vec<LatentSequence>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("empty inverted trajectory".into()));
        }
        entries.sort_by_key(LatentSequence::timestep);
        if entries
            .windows(2)
            .any(|w| w[0].timestep() == w[1].timestep())
        {
            return Err(Error::Data(
                "duplicate timestep in inverted trajectory".into(),
            ));
        }
        let shape = entries[0].shape();
        if entries.iter().any(|e| e.shape() != shape) {
            return Err(Error::Data("inverted latents differ in shape".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LatentSequence] {
        &self.entries
    }

    pub fn shape(&self) -> LatentShape {
        self.entries[0].shape()
    }

    /// The stored latent whose timestep is closest to `timestep` (the lower
    /// one on ties).
    pub fn nearest(&self, timestep: usize) -> &LatentSequence {
        let idx = self.entries.partition_point(|e| e.timestep() < timestep);
        if idx == self.entries.len() {
            return &self.entries[idx - 1];
        }
        if idx == 0 {
            return &self.entries[0];
        }
        let (lo, hi) = (&self.entries[idx - 1], &self.entries[idx]);
        if hi.timestep() - timestep < timestep - lo.timestep() {
            hi
        } else {
            lo
        }
    }

    /// Exact lookup.
    pub fn get(&self, timestep: usize) -> Result<&LatentSequence> {
        self.entries
            .binary_search_by_key(&timestep, LatentSequence::timestep)
            .map(|i| &self.entries[i])
            .map_err(|_| Error::MissingTimestep(timestep))
    }
}

/// Shared, read-only state of the denoising loop.
#[derive(Clone, Copy)]
pub struct DmsContext<'a> {
    pub predictor: &'a dyn Predictor,
    /// Denoising schedule; positions `0..=plan.total_steps`.
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a SamplingPlan,
    pub trajectory: &'a InvertedTrajectory,
    pub control: Option<&'a ControlSequence>,
}

impl DmsContext<'_> {
    fn step_index(&self, position: usize) -> usize {
        self.schedule.steps().saturating_sub(position)
    }

    fn request<'r>(
        &self,
        latents: &'r LatentSequence,
        caption: &'r Caption,
        masks: Option<&'r [PixelMask]>,
        position: usize,
    ) -> Result<PredictorRequest<'r>>
    where
        Self: 'r,
    {
        Ok(PredictorRequest {
            latents,
            caption,
            instance_mask: masks,
            control: self.control,
            timestep: self.schedule.timestep(position)?,
            alpha_bar: self.schedule.alpha_at(position)?,
            horizon: self.schedule.horizon(),
            ipr: masks.map(|_| IprRequest {
                config: self.plan.ipr,
                step_index: self.step_index(position),
                total_steps: self.plan.total_steps,
            }),
        })
    }

    fn inverted_at(&self, position: usize) -> Result<&LatentSequence> {
        Ok(self.trajectory.nearest(self.schedule.timestep(position)?))
    }
}

/// `1 - sum_i m_i` per pixel and frame. Overlapping instance masks are
/// rejected.
pub fn background_mask(
    edits: &[InstanceEdit],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<PixelMask>> {
    let shape = LatentShape::new(frames, height, width, 1);
    for e in edits {
        e.validate(&shape)?;
    }
    (0..frames)
        .map(|k| {
            let mut owner: Vec<Option<usize>> = vec![None; height * width];
            for (i, e) in edits.iter().enumerate() {
                for (px, &bit) in e.masks[k].bits().iter().enumerate() {
                    if !bit {
                        continue;
                    }
                    if let Some(j) = owner[px] {
                        return Err(Error::OverlappingMasks {
                            first: edits[j].id.clone(),
                            second: e.id.clone(),
                            frame: k,
                        });
                    }
                    owner[px] = Some(i);
                }
            }
            PixelMask::new(height, width, owner.iter().map(Option::is_none).collect())
        })
        .collect()
}

/// Copies `src` into `dst` wherever `masks` is set, channel for channel.
fn paste_masked(dst: &mut LatentSequence, src: &LatentSequence, masks: &[PixelMask]) {
    let channels = dst.shape().channels;
    let frame_len = dst.shape().frame_len();
    let src = src.data();
    for (k, chunk) in dst.data_mut().chunks_exact_mut(frame_len).enumerate() {
        for (px, &bit) in masks[k].bits().iter().enumerate() {
            if bit {
                let r = px * channels..(px + 1) * channels;
                chunk[r.clone()]
                    .copy_from_slice(&src[k * frame_len + r.start..k * frame_len + r.end]);
            }
        }
    }
}

/// Reconstruction noise: the empty caption at guidance 1 on the inverted
/// latent of this position.
pub fn background_noise(ctx: &DmsContext<'_>, position: usize) -> Result<LatentSequence> {
    let inverted = ctx.inverted_at(position)?;
    let empty = Caption::empty();
    ctx.predictor
        .predict(&ctx.request(inverted, &empty, None, position)?)
}

/// Guided noise for one instance: `cfg(eps(z, empty), eps(z, caption, mask))`.
pub fn instance_noise(
    ctx: &DmsContext<'_>,
    latents: &LatentSequence,
    edit: &InstanceEdit,
    position: usize,
) -> Result<Prediction> {
    let cond = ctx.predictor.predict_traced(&ctx.request(
        latents,
        &edit.caption,
        Some(&edit.masks),
        position,
    )?)?;
    if ctx.plan.cfg_scale == 1.0 {
        return Ok(cond);
    }
    let empty = Caption::empty();
    let uncond = ctx
        .predictor
        .predict(&ctx.request(latents, &empty, None, position)?)?;
    Ok(Prediction {
        noise: cfg_combine(&uncond, &cond.noise, ctx.plan.cfg_scale)?,
        lambda_s: cond.lambda_s,
    })
}

/// Branch noise: the instance noise inside its mask, `background` outside.
pub fn sns_noise(
    ctx: &DmsContext<'_>,
    branch: &LatentSequence,
    edit: &InstanceEdit,
    background: &LatentSequence,
    position: usize,
) -> Result<Prediction> {
    let inst = instance_noise(ctx, branch, edit, position)?;
    let mut fused = background.clone();
    paste_masked(&mut fused, &inst.noise, &edit.masks);
    Ok(Prediction {
        noise: fused,
        lambda_s: inst.lambda_s,
    })
}

/// One series step of an instance branch from `position` to `position - 1`.
pub fn sns_step(
    ctx: &DmsContext<'_>,
    branch: &LatentSequence,
    edit: &InstanceEdit,
    position: usize,
) -> Result<(LatentSequence, Vec<f64>)> {
    let background = background_noise(ctx, position)?;
    sns_step_with_background(ctx, branch, edit, &background, position)
}

fn sns_step_with_background(
    ctx: &DmsContext<'_>,
    branch: &LatentSequence,
    edit: &InstanceEdit,
    background: &LatentSequence,
    position: usize,
) -> Result<(LatentSequence, Vec<f64>)> {
    let noise = sns_noise(ctx, branch, edit, background, position)?;
    let next = ddim_denoise_step(branch, &noise.noise, position, ctx.schedule)?;
    Ok((next, noise.lambda_s))
}

/// Pastes each branch into its mask over the inverted latent nearest to
/// `timestep`.
pub fn latent_fusion(
    branches: &[LatentSequence],
    trajectory: &InvertedTrajectory,
    edits: &[InstanceEdit],
    timestep: usize,
) -> Result<LatentSequence> {
    if branches.len() != edits.len() {
        return Err(Error::Data(format!(
            "{} branches for {} instances",
            branches.len(),
            edits.len()
        )));
    }
    if let Some(b) = branches.iter().find(|b| b.timestep() != timestep) {
        return Err(Error::Data(format!(
            "branch at timestep {} fused at timestep {timestep}",
            b.timestep()
        )));
    }
    let shape = trajectory.shape();
    background_mask(edits, shape.frames, shape.height, shape.width)?;
    let mut fused = trajectory.nearest(timestep).clone().with_timestep(timestep);
    for (branch, edit) in branches.iter().zip(edits) {
        fused.ensure_same_shape(branch)?;
        paste_masked(&mut fused, branch, &edit.masks);
    }
    Ok(fused)
}

/// `steps` DDIM inversion steps with the empty caption at guidance 1,
/// starting at sampling `position`.
pub fn reinvert(
    ctx: &DmsContext<'_>,
    fused: &LatentSequence,
    position: usize,
    steps: usize,
) -> Result<LatentSequence> {
    let top = position + steps;
    if top > ctx.schedule.steps() {
        return Err(Error::ScheduleRange {
            position: top,
            len: ctx.schedule.steps() + 1,
        });
    }
    let mut z = fused.clone();
    for p in position + 1..=top {
        let eps = inversion_noise(&z, ctx.predictor, ctx.schedule, p, ctx.control)?;
        z = ddim_invert_step(&z, &eps, p, ctx.schedule)?;
    }
    Ok(z)
}

/// Shared-latent noise: each instance noise inside its mask, the
/// reconstruction noise in the background. Also returns the per-instance
/// redistribution traces.
pub fn pns_noise(
    ctx: &DmsContext<'_>,
    latents: &LatentSequence,
    edits: &[InstanceEdit],
    background: &LatentSequence,
    position: usize,
) -> Result<(LatentSequence, Vec<Vec<f64>>)> {
    let per_instance = edits
        .par_iter()
        .map(|e| instance_noise(ctx, latents, e, position))
        .collect::<Result<Vec<_>>>()?;
    let mut combined = background.clone();
    let mut traces = Vec::with_capacity(edits.len());
    for (pred, edit) in per_instance.into_iter().zip(edits) {
        paste_masked(&mut combined, &pred.noise, &edit.masks);
        traces.push(pred.lambda_s);
    }
    Ok((combined, traces))
}

/// One parallel step of the shared latent from `position` to `position - 1`.
pub fn pns_step(
    ctx: &DmsContext<'_>,
    latents: &LatentSequence,
    edits: &[InstanceEdit],
    position: usize,
) -> Result<LatentSequence> {
    let background = background_noise(ctx, position)?;
    let (noise, _) = pns_noise(ctx, latents, edits, &background, position)?;
    ddim_denoise_step(latents, &noise, position, ctx.schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    /// Sampling positions, `start` to `end` inclusive. Inversion positions
    /// refer to the inversion schedule.
    pub start_position: usize,
    pub end_position: usize,
    pub start_timestep: usize,
    pub end_timestep: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub phase: String,
    pub step_index: usize,
    pub timestep: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrace {
    pub instance: String,
    pub entries: Vec<LambdaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub instances: Vec<String>,
    pub plan: SamplingPlan,
    pub sns_steps: usize,
    pub reinversion_steps: usize,
    pub pns_steps: usize,
    pub phases: Vec<PhaseRecord>,
    pub lambda_s: Vec<LambdaTrace>,
    /// Wall-clock milliseconds per phase. Not reproducible.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunReport {
    /// The report without wall-clock data.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings_ms: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Edited latents at timestep 0.
    pub latents: LatentSequence,
    /// Branch latents at the end of the series phase, one per instance.
    pub sns_branches: Vec<LatentSequence>,
    pub trajectory: InvertedTrajectory,
    pub report: RunReport,
}

fn record(
    name: &str,
    sched: &NoiseSchedule,
    start: usize,
    end: usize,
    steps: usize,
) -> Result<PhaseRecord> {
    Ok(PhaseRecord {
        name: name.into(),
        start_position: start,
        end_position: end,
        start_timestep: sched.timestep(start)?,
        end_timestep: sched.timestep(end)?,
        steps,
    })
}

/// Full pipeline: invert, series branches, fuse, re-invert, parallel to 0.
///
/// `schedule` is the model schedule; sampling maps for inversion and
/// denoising are derived from `plan`. Branch and per-instance work runs on the
/// current rayon pool; results do not depend on its size.
pub fn run_edit(
    z0: &LatentSequence,
    edits: &[InstanceEdit],
    plan: &SamplingPlan,
    predictor: &dyn Predictor,
    schedule: &NoiseSchedule,
    control: Option<&ControlSequence>,
) -> Result<RunOutput> {
    plan.validate()?;
    let shape = z0.shape();
    background_mask(edits, shape.frames, shape.height, shape.width)?;
    let mut timings = BTreeMap::new();

    let clock = Instant::now();
    let inversion = schedule.with_sampling_steps(plan.inversion_steps)?;
    let trajectory = InvertedTrajectory::new(
        invert_sequence(z0, predictor, schedule, plan.inversion_steps, control)
            .map_err(|e| e.in_phase("inversion"))?,
    )?;
    timings.insert("inversion".to_owned(), clock.elapsed().as_secs_f64() * 1e3);

    let denoise = schedule.with_sampling_steps(plan.total_steps)?;
    let ctx = DmsContext {
        predictor,
        schedule: &denoise,
        plan,
        trajectory: &trajectory,
        control,
    };
    let total = plan.total_steps;
    let sns_steps = plan.sns_steps();
    let fuse_at = total - sns_steps;
    let reinv_steps = plan.effective_reinversion_steps();
    let pns_top = fuse_at + reinv_steps;

    let mut traces: Vec<LambdaTrace> = edits
        .iter()
        .map(|e| LambdaTrace {
            instance: e.id.clone(),
            entries: Vec::new(),
        })
        .collect();
    let mut push_trace =
        |phase: &str, position: usize, per_instance: Vec<Vec<f64>>| -> Result<()> {
            for (trace, values) in traces.iter_mut().zip(per_instance) {
                if !values.is_empty() {
                    trace.entries.push(LambdaEntry {
                        phase: phase.into(),
                        step_index: total - position,
                        timestep: denoise.timestep(position)?,
                        values,
                    });
                }
            }
            Ok(())
        };

    let clock = Instant::now();
    let top_timestep = denoise.timestep(total)?;
    let start = trajectory
        .nearest(top_timestep)
        .clone()
        .with_timestep(top_timestep);
    let mut branches = vec![start; edits.len()];
    for position in (fuse_at + 1..=total).rev() {
        let step = || -> Result<Vec<(LatentSequence, Vec<f64>)>> {
            let background = background_noise(&ctx, position)?;
            branches
                .par_iter()
                .zip(edits.par_iter())
                .map(|(b, e)| sns_step_with_background(&ctx, b, e, &background, position))
                .collect()
        };
        let stepped = step().map_err(|e| e.in_phase("sns"))?;
        let (next, lambdas): (Vec<_>, Vec<_>) = stepped.into_iter().unzip();
        branches = next;
        push_trace("sns", position, lambdas)?;
    }
    timings.insert("sns".to_owned(), clock.elapsed().as_secs_f64() * 1e3);

    let clock = Instant::now();
    let fused = latent_fusion(&branches, &trajectory, edits, denoise.timestep(fuse_at)?)
        .map_err(|e| e.in_phase("fusion"))?;
    timings.insert("fusion".to_owned(), clock.elapsed().as_secs_f64() * 1e3);

    let clock = Instant::now();
    let mut z =
        reinvert(&ctx, &fused, fuse_at, reinv_steps).map_err(|e| e.in_phase("reinversion"))?;
    timings.insert(
        "reinversion".to_owned(),
        clock.elapsed().as_secs_f64() * 1e3,
    );

    let clock = Instant::now();
    for position in (1..=pns_top).rev() {
        let step = || -> Result<(LatentSequence, Vec<Vec<f64>>)> {
            let background = background_noise(&ctx, position)?;
            let (noise, lambdas) = pns_noise(&ctx, &z, edits, &background, position)?;
            Ok((ddim_denoise_step(&z, &noise, position, &denoise)?, lambdas))
        };
        let (next, lambdas) = step().map_err(|e| e.in_phase("pns"))?;
        z = next;
        push_trace("pns", position, lambdas)?;
    }
    timings.insert("pns".to_owned(), clock.elapsed().as_secs_f64() * 1e3);

    let phases = vec![
        record(
            "inversion",
            &inversion,
            0,
            plan.inversion_steps,
            plan.inversion_steps,
        )?,
        record("sns", &denoise, total, fuse_at, sns_steps)?,
        record("fusion", &denoise, fuse_at, fuse_at, 0)?,
        record("reinversion", &denoise, fuse_at, pns_top, reinv_steps)?,
        record("pns", &denoise, pns_top, 0, pns_top)?,
    ];
    let report = RunReport {
        mode: plan.mode(),
        instances: edits.iter().map(|e| e.id.clone()).collect(),
        plan: *plan,
        sns_steps,
        reinversion_steps: reinv_steps,
        pns_steps: pns_top,
        phases,
        lambda_s: traces,
        timings_ms: timings,
    };
    Ok(RunOutput {
        latents: z,
        sns_branches: branches,
        trajectory,
        report,
    })
}
