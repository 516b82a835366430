mod common;

use common::*;
use multiedit::dms::*;
use multiedit::error::{Error, ErrorClass};
use multiedit::io::PixelMask;
use multiedit::predictor::{
    Caption, ConstantPredictor, Predictor, PredictorRequest, TinyAttentionPredictor,
};
use multiedit::schedule::{
    cfg_combine, ddim_denoise_step, invert_sequence, LatentSequence, LatentShape, NoiseSchedule,
};

fn trajectory(z0: &LatentSequence, p: &dyn Predictor, plan: &SamplingPlan) -> InvertedTrajectory {
    let sched = NoiseSchedule::default();
    InvertedTrajectory::new(invert_sequence(z0, p, &sched, plan.inversion_steps, None).unwrap())
        .unwrap()
}

#[test]
fn background_mask_examples() {
    let s = SHAPE;
    let none = background_mask(&[], s.frames, s.height, s.width).unwrap();
    assert!(none.iter().all(|m| m.count_ones() == s.pixels_per_frame()));

    let full = vec![InstanceEdit::new(
        "a",
        "x",
        vec![PixelMask::filled(8, 8, true); 3],
    )];
    let bg = background_mask(&full, 3, 8, 8).unwrap();
    assert!(bg.iter().all(PixelMask::is_empty));

    let halves = vec![
        InstanceEdit::new("l", "x", vec![PixelMask::rect(8, 8, 0, 8, 0, 4); 3]),
        InstanceEdit::new("r", "y", vec![PixelMask::rect(8, 8, 0, 8, 4, 8); 3]),
    ];
    let bg = background_mask(&halves, 3, 8, 8).unwrap();
    for (k, b) in bg.iter().enumerate() {
        for px in 0..64 {
            let sum = u8::from(halves[0].masks[k].bits()[px])
                + u8::from(halves[1].masks[k].bits()[px])
                + u8::from(b.bits()[px]);
            assert_eq!(sum, 1);
        }
    }
}

#[test]
fn overlapping_masks_name_instances_and_frame() {
    let mut second = vec![PixelMask::filled(8, 8, false); 3];
    second[2] = PixelMask::rect(8, 8, 0, 2, 0, 2);
    let edits = vec![
        InstanceEdit::new("cat", "x", vec![PixelMask::rect(8, 8, 1, 3, 1, 3); 3]),
        InstanceEdit::new("dog", "y", second),
    ];
    let err = background_mask(&edits, 3, 8, 8).unwrap_err();
    assert!(
        matches!(&err, Error::OverlappingMasks { first, second, frame: 2 } if first == "cat" && second == "dog")
    );
    assert_eq!(err.class(), ErrorClass::Data);

    let z0 = LatentSequence::zeros(LatentShape::new(3, 8, 8, 1)).unwrap();
    let e = run_edit(
        &z0,
        &edits,
        &SamplingPlan::default(),
        &ConstantPredictor::new(0.1),
        &NoiseSchedule::default(),
        None,
    );
    assert!(matches!(e, Err(Error::OverlappingMasks { .. })));
}

#[test]
fn zero_mask_branch_follows_reconstruction_path() {
    let shape = SHAPE;
    let model = gaussian(shape, 0.5, &[("a cat", 0.9)]);
    let plan = SamplingPlan {
        sns_fraction: 1.0,
        reinversion_steps: 0,
        ..SamplingPlan::default()
    };
    let z0 = ramp(shape);
    let edit = InstanceEdit::new("a", "a cat", vec![PixelMask::filled(8, 8, false); 3]);
    let out = run_edit(&z0, &[edit], &plan, &model, &NoiseSchedule::default(), None).unwrap();

    // independent loop: start at the top inverted latent, step with the
    // empty-caption noise of the inverted latent at each timestep
    let traj = trajectory(&z0, &model, &plan);
    let denoise = NoiseSchedule::default()
        .with_sampling_steps(plan.total_steps)
        .unwrap();
    let empty = Caption::empty();
    let mut z = traj.get(denoise.timestep(50).unwrap()).unwrap().clone();
    for p in (1..=50).rev() {
        let inv = traj.get(denoise.timestep(p).unwrap()).unwrap();
        let eps = model
            .predict(&PredictorRequest {
                latents: inv,
                caption: &empty,
                instance_mask: None,
                control: None,
                timestep: denoise.timestep(p).unwrap(),
                alpha_bar: denoise.alpha_at(p).unwrap(),
                horizon: denoise.horizon(),
                ipr: None,
            })
            .unwrap();
        z = ddim_denoise_step(&z, &eps, p, &denoise).unwrap();
    }
    assert!(out.sns_branches[0].max_abs_diff(&z).unwrap() < 1e-5);
    let m0 = run_edit(&z0, &[], &plan, &model, &NoiseSchedule::default(), None).unwrap();
    assert!(out.latents.max_abs_diff(&m0.latents).unwrap() < 1e-5);
}

#[test]
fn full_mask_single_instance_reaches_target() {
    let shape = SHAPE;
    let model = gaussian(shape, 0.0, &[("a cat", 0.9)]);
    let plan = SamplingPlan {
        cfg_scale: 1.0,
        ..SamplingPlan::default()
    };
    let edit = InstanceEdit::new("a", "a cat", vec![PixelMask::filled(8, 8, true); 3]);
    let out = run_edit(
        &ramp(shape),
        &[edit],
        &plan,
        &model,
        &NoiseSchedule::default(),
        None,
    )
    .unwrap();
    assert!(out.latents.data().iter().all(|v| (v - 0.9).abs() < 1e-9));
}

#[test]
fn branches_ignore_other_instances() {
    let shape = SHAPE;
    let model = TinyAttentionPredictor::new(3, shape.channels);
    let plan = SamplingPlan::default();
    let z0 = ramp(shape);
    let sched = NoiseSchedule::default();
    let a = run_edit(
        &z0,
        &edits(shape, ["a red car", "a bird"]),
        &plan,
        &model,
        &sched,
        None,
    )
    .unwrap();
    let b = run_edit(
        &z0,
        &edits(shape, ["a red car", "a tall green tree"]),
        &plan,
        &model,
        &sched,
        None,
    )
    .unwrap();
    assert_eq!(a.sns_branches[0], b.sns_branches[0]);
    assert_ne!(a.sns_branches[1], b.sns_branches[1]);
}

#[test]
fn fusion_examples() {
    let shape = SHAPE;
    let t = 41;
    let c = LatentSequence::filled(shape, 3.0, t).unwrap();
    let traj = InvertedTrajectory::new(vec![
        LatentSequence::filled(shape, 9.0, 0).unwrap(),
        c.clone(),
    ])
    .unwrap();
    assert_eq!(latent_fusion(&[], &traj, &[], t).unwrap(), c);

    let branch = ramp(shape).with_timestep(t);
    let full = vec![InstanceEdit::new(
        "a",
        "x",
        vec![PixelMask::filled(8, 8, true); 3],
    )];
    assert_eq!(
        latent_fusion(std::slice::from_ref(&branch), &traj, &full, t).unwrap(),
        branch
    );

    let e = edits(shape, ["x", "y"]);
    let a = LatentSequence::filled(shape, 1.0, t).unwrap();
    let b = LatentSequence::filled(shape, 2.0, t).unwrap();
    let fused = latent_fusion(&[a.clone(), b.clone()], &traj, &e, t).unwrap();
    let bg = background_mask(&e, 3, 8, 8).unwrap();
    assert!(masked_values(&fused, &e[0].masks).iter().all(|&v| v == 1.0));
    assert!(masked_values(&fused, &e[1].masks).iter().all(|&v| v == 2.0));
    assert!(masked_values(&fused, &bg).iter().all(|&v| v == 3.0));

    let late = b.with_timestep(t + 1);
    assert!(latent_fusion(&[a, late], &traj, &e, t).is_err());
}

fn context<'a>(
    predictor: &'a dyn Predictor,
    schedule: &'a NoiseSchedule,
    plan: &'a SamplingPlan,
    trajectory: &'a InvertedTrajectory,
) -> DmsContext<'a> {
    DmsContext {
        predictor,
        schedule,
        plan,
        trajectory,
        control: None,
    }
}

#[test]
fn reinversion_round_trips() {
    let shape = SHAPE;
    let plan = SamplingPlan::default();
    let sched = NoiseSchedule::default().with_sampling_steps(50).unwrap();
    let constant = ConstantPredictor::new(0.3);
    let z = ramp(shape).with_timestep(sched.timestep(30).unwrap());
    let traj = trajectory(&ramp(shape), &constant, &plan);
    let ctx = context(&constant, &sched, &plan, &traj);
    assert_eq!(reinvert(&ctx, &z, 30, 0).unwrap(), z);

    let up = reinvert(&ctx, &z, 30, 2).unwrap();
    assert_eq!(up.timestep(), sched.timestep(32).unwrap());
    let eps = LatentSequence::filled(shape, 0.3, 0).unwrap();
    let mut back = up;
    for p in [32, 31] {
        back = ddim_denoise_step(&back, &eps, p, &sched).unwrap();
    }
    assert!(back.max_abs_diff(&z).unwrap() < 1e-9);
    assert!(reinvert(&ctx, &z, 49, 2).is_err());
}

/// Plain 64-bit loop of the two step formulas on one scalar.
fn scalar_round_trip(z: f64, mu: f64, sigma: f64, alphas: [f64; 3]) -> f64 {
    let eps =
        |z: f64, a: f64| (z - a.sqrt() * mu) * (1.0 - a).sqrt() / (a * sigma * sigma + 1.0 - a);
    let mv = |z: f64, e: f64, af: f64, at: f64| {
        at.sqrt() * (z - (1.0 - af).sqrt() * e) / af.sqrt() + (1.0 - at).sqrt() * e
    };
    let [a0, a1, a2] = alphas;
    let z1 = mv(z, eps(z, a1), a0, a1);
    let z2 = mv(z1, eps(z1, a2), a1, a2);
    let d1 = mv(z2, eps(z2, a2), a2, a1);
    mv(d1, eps(d1, a1), a1, a0)
}

#[test]
fn reinversion_l2_matches_reference_loop() {
    let shape = LatentShape::new(1, 1, 1, 1);
    let model = gaussian(shape, 0.7, &[]);
    let plan = SamplingPlan::default();
    let sched = NoiseSchedule::default().with_sampling_steps(50).unwrap();
    let start = 0.45;
    let z = LatentSequence::filled(shape, start, sched.timestep(30).unwrap()).unwrap();
    let traj = trajectory(
        &LatentSequence::filled(shape, start, 0).unwrap(),
        &model,
        &plan,
    );
    let ctx = context(&model, &sched, &plan, &traj);
    let up = reinvert(&ctx, &z, 30, 2).unwrap();

    let empty = Caption::empty();
    let mut back = up;
    for p in [32, 31] {
        let eps = model
            .predict(&PredictorRequest {
                latents: &back,
                caption: &empty,
                instance_mask: None,
                control: None,
                timestep: sched.timestep(p).unwrap(),
                alpha_bar: sched.alpha_at(p).unwrap(),
                horizon: sched.horizon(),
                ipr: None,
            })
            .unwrap();
        back = ddim_denoise_step(&back, &eps, p, &sched).unwrap();
    }
    let alphas = [
        sched.alpha_at(30).unwrap(),
        sched.alpha_at(31).unwrap(),
        sched.alpha_at(32).unwrap(),
    ];
    let reference = scalar_round_trip(start, SOURCE_MU, 0.7, alphas);
    assert!((back.data()[0] - reference).abs() < 1e-12);
    // inversion labels each step with its target timestep, so the loop is not exact
    assert!((reference - start).abs() < 1e-2);
}

#[test]
fn pns_with_equal_noises_is_a_plain_step() {
    let shape = SHAPE;
    let plan = SamplingPlan::default();
    let sched = NoiseSchedule::default().with_sampling_steps(50).unwrap();
    let constant = ConstantPredictor::new(-0.4);
    let traj = trajectory(&ramp(shape), &constant, &plan);
    let ctx = context(&constant, &sched, &plan, &traj);
    let z = ramp(shape).with_timestep(sched.timestep(20).unwrap());
    let stepped = pns_step(&ctx, &z, &edits(shape, ["x", "y"]), 20).unwrap();
    let eps = LatentSequence::filled(shape, -0.4, 0).unwrap();
    assert_eq!(stepped, ddim_denoise_step(&z, &eps, 20, &sched).unwrap());
}

fn direct_instance_noise(
    ctx: &DmsContext<'_>,
    z: &LatentSequence,
    edit: &InstanceEdit,
    p: usize,
) -> LatentSequence {
    let req = |caption, mask| PredictorRequest {
        latents: z,
        caption,
        instance_mask: mask,
        control: None,
        timestep: ctx.schedule.timestep(p).unwrap(),
        alpha_bar: ctx.schedule.alpha_at(p).unwrap(),
        horizon: ctx.schedule.horizon(),
        ipr: mask.map(|_| multiedit::predictor::IprRequest {
            config: ctx.plan.ipr,
            step_index: ctx.plan.total_steps - p,
            total_steps: ctx.plan.total_steps,
        }),
    };
    let empty = Caption::empty();
    let cond = ctx
        .predictor
        .predict(&req(&edit.caption, Some(&edit.masks[..])))
        .unwrap();
    let uncond = ctx.predictor.predict(&req(&empty, None)).unwrap();
    cfg_combine(&uncond, &cond, ctx.plan.cfg_scale).unwrap()
}

#[test]
fn pns_noise_inside_each_mask_is_that_instance_noise() {
    let shape = SHAPE;
    let plan = SamplingPlan::default();
    let sched = NoiseSchedule::default().with_sampling_steps(50).unwrap();
    let model = TinyAttentionPredictor::new(11, shape.channels);
    let traj = trajectory(&ramp(shape), &model, &plan);
    let ctx = context(&model, &sched, &plan, &traj);
    let e = edits(shape, ["a red car", "a small bird"]);
    let z = traj.nearest(sched.timestep(48).unwrap()).clone();
    let background = background_noise(&ctx, 48).unwrap();
    let (noise, _) = pns_noise(&ctx, &z, &e, &background, 48).unwrap();
    for edit in &e {
        let direct = direct_instance_noise(&ctx, &z, edit, 48);
        assert_eq!(
            masked_values(&noise, &edit.masks),
            masked_values(&direct, &edit.masks)
        );
    }
    let bg = background_mask(&e, 3, 8, 8).unwrap();
    assert_eq!(masked_values(&noise, &bg), masked_values(&background, &bg));

    // a single full-frame instance is an ordinary guided step
    let full = vec![InstanceEdit::new(
        "a",
        "a red car",
        vec![PixelMask::filled(8, 8, true); 3],
    )];
    let stepped = pns_step(&ctx, &z, &full, 48).unwrap();
    let eps = direct_instance_noise(&ctx, &z, &full[0], 48);
    assert_eq!(stepped, ddim_denoise_step(&z, &eps, 48, &sched).unwrap());
}

#[test]
fn background_matches_reconstruction_run() {
    let shape = SHAPE;
    let model = TinyAttentionPredictor::new(5, shape.channels);
    let plan = SamplingPlan::default();
    let sched = NoiseSchedule::default();
    let z0 = ramp(shape);
    let e = edits(shape, ["a red car", "a small bird"]);
    let out = run_edit(&z0, &e, &plan, &model, &sched, None).unwrap();
    let recon = run_edit(&z0, &[], &plan, &model, &sched, None).unwrap();
    let bg = background_mask(&e, 3, 8, 8).unwrap();
    assert!(
        max_abs(
            &masked_values(&out.latents, &bg),
            &masked_values(&recon.latents, &bg)
        ) < 1e-5
    );
    assert!(
        max_abs(
            &masked_values(&out.latents, &e[0].masks),
            &masked_values(&recon.latents, &e[0].masks)
        ) > 1e-3
    );
}

#[test]
fn constant_predictor_reconstructs_source() {
    let shape = SHAPE;
    let z0 = ramp(shape);
    for plan in [
        SamplingPlan::default(),
        SamplingPlan {
            sns_fraction: 0.0,
            ..SamplingPlan::default()
        },
        SamplingPlan {
            sns_fraction: 1.0,
            reinversion_steps: 0,
            ..SamplingPlan::default()
        },
    ] {
        let out = run_edit(
            &z0,
            &[],
            &plan,
            &ConstantPredictor::new(0.2),
            &NoiseSchedule::default(),
            None,
        )
        .unwrap();
        assert!(out.latents.max_abs_diff(&z0).unwrap() < 1e-9);
    }
}

#[test]
fn modes_and_phase_bookkeeping() {
    let cases = [
        (1.0, 0, "pure SNS", 50, 0),
        (0.0, 2, "pure PNS", 0, 0),
        (0.4, 0, "SNS + PNS (no re-inv)", 20, 0),
        (0.4, 2, "SNS + PNS + re-inv", 20, 2),
    ];
    let shape = LatentShape::new(1, 4, 4, 1);
    let z0 = LatentSequence::zeros(shape).unwrap();
    for (sns_fraction, l, label, sns, reinv) in cases {
        let plan = SamplingPlan {
            sns_fraction,
            reinversion_steps: l,
            ..SamplingPlan::default()
        };
        assert_eq!(plan.mode().label(), label);
        let out = run_edit(
            &z0,
            &[],
            &plan,
            &ConstantPredictor::new(0.0),
            &NoiseSchedule::default(),
            None,
        )
        .unwrap();
        let r = &out.report;
        assert_eq!((r.sns_steps, r.reinversion_steps), (sns, reinv));
        assert_eq!(r.pns_steps, 50 - sns + reinv);
        let names: Vec<&str> = r.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["inversion", "sns", "fusion", "reinversion", "pns"]);
        assert_eq!(out.latents.timestep(), 0);
    }
}

#[test]
fn ipr_trace_covers_early_steps_only() {
    let shape = SHAPE;
    let model = TinyAttentionPredictor::new(2, shape.channels);
    let out = run_edit(
        &ramp(shape),
        &edits(shape, ["a red car", "a bird"]),
        &SamplingPlan::default(),
        &model,
        &NoiseSchedule::default(),
        None,
    )
    .unwrap();
    for trace in &out.report.lambda_s {
        let steps: Vec<usize> = trace.entries.iter().map(|e| e.step_index).collect();
        assert_eq!(steps, [0, 1, 2, 3, 4]);
        assert!(trace
            .entries
            .iter()
            .all(|e| e.phase == "sns" && e.values.len() == 3));
    }
}

#[test]
fn phase_errors_carry_phase_name() {
    let shape = SHAPE;
    let model = gaussian(shape, 0.0, &[("a cat", 0.5)]);
    let e = edits(shape, ["a cat", "a unicorn"]);
    let err = run_edit(
        &ramp(shape),
        &e,
        &SamplingPlan::default(),
        &model,
        &NoiseSchedule::default(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Phase { phase: "sns", .. }), "{err}");
    let err = run_edit(
        &ramp(shape),
        &e,
        &SamplingPlan {
            sns_fraction: 0.0,
            ..SamplingPlan::default()
        },
        &model,
        &NoiseSchedule::default(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Phase { phase: "pns", .. }), "{err}");
}

#[test]
fn thread_count_does_not_change_output() {
    let shape = SHAPE;
    let model = TinyAttentionPredictor::new(9, shape.channels);
    let e = edits(shape, ["a red car", "a bird"]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                run_edit(
                    &ramp(shape),
                    &e,
                    &SamplingPlan::default(),
                    &model,
                    &NoiseSchedule::default(),
                    None,
                )
                .unwrap()
            })
    };
    let (one, many) = (run(1), run(6));
    assert_eq!(one.latents, many.latents);
    assert_eq!(one.report.without_timings(), many.report.without_timings());
}

#[test]
fn trajectory_lookup() {
    let shape = LatentShape::new(1, 1, 1, 1);
    let at = |t| LatentSequence::filled(shape, t as f64, t).unwrap();
    let traj = InvertedTrajectory::new(vec![at(21), at(0), at(11)]).unwrap();
    assert_eq!(
        traj.entries()
            .iter()
            .map(|e| e.timestep())
            .collect::<Vec<_>>(),
        [0, 11, 21]
    );
    assert_eq!(traj.nearest(16).timestep(), 11);
    assert_eq!(traj.nearest(17).timestep(), 21);
    assert_eq!(traj.nearest(500).timestep(), 21);
    assert!(traj.get(12).is_err());
    assert!(InvertedTrajectory::new(vec![]).is_err());
    assert!(InvertedTrajectory::new(vec![at(3), at(3)]).is_err());
}
