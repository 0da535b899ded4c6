//! One function per subcommand. Each builds the configured world, runs its
//! pipeline over the sample corpus, and writes artifacts through [`RunDir`].

use anyhow::{bail, Context, Result};
use latentlab::io::read_tensor;
use latentlab::metrics::{
    inversion_error_profile, kl_to_std_normal, masked_bitrate, masked_stats, mean, mean_profile,
    most_probable_triangle, nearest_targets, nn_assignment_accuracy, patch_corr_top20_batch,
    population_std, slerp, triangle_angles, ErrorProfile,
};
use latentlab::parallel::par_map;
use latentlab::pipeline::{
    decode, forward_steps_for_share, hybrid_seed, invert, round_trip_error, sample_from_noise,
    sample_many, InversionMethod, SampleRun, World,
};
use latentlab::report::format_g17;
use latentlab::{Mask, MetricsReport, Tensor, Trajectory};

use crate::config::ExperimentConfig;
use crate::run::RunDir;

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub world: World,
    pub workers: usize,
}

fn slug(m: InversionMethod) -> String {
    m.to_string().replace(':', "-")
}

fn idx(i: usize) -> String {
    format!("{i:04}")
}

fn g(v: f64) -> String {
    format_g17(v)
}

/// Sample corpus: freshly generated, or regenerated from the noises of an
/// earlier `sample` run and checked against its stored images.
fn corpus(ctx: &Ctx, run: &mut RunDir) -> Result<Vec<SampleRun>> {
    let cfg = ctx.cfg;
    let Some(input) = &cfg.input else {
        return Ok(sample_many(
            &ctx.world,
            cfg.samples,
            cfg.seed,
            cfg.eta,
            ctx.workers,
        )?);
    };
    if !input.is_dir() {
        bail!("input directory {} does not exist", input.display());
    }
    let noises = read_tensor(input.join("noises.tsr"))?.unstack()?;
    let stored = read_tensor(input.join("images.tsr"))?.unstack()?;
    if noises.len() != stored.len() {
        bail!(
            "{}: {} noises but {} images",
            input.display(),
            noises.len(),
            stored.len()
        );
    }
    let runs = par_map(ctx.workers, noises.len(), |i| {
        sample_from_noise(&ctx.world, noises[i].clone(), cfg.seed, cfg.eta, i)
    })?;
    let mismatched = runs
        .iter()
        .zip(&stored)
        .filter(|(r, s)| r.image() != *s)
        .count();
    run.check(
        "input_recomputes",
        mismatched == 0,
        format!(
            "{mismatched} of {} stored images differ from their recomputation",
            runs.len()
        ),
    );
    Ok(runs)
}

fn invert_all(ctx: &Ctx, runs: &[SampleRun], method: InversionMethod) -> Result<Vec<Trajectory>> {
    Ok(par_map(ctx.workers, runs.len(), |i| {
        invert(
            &ctx.world,
            runs[i].image(),
            method,
            hybrid_seed(ctx.cfg.seed, runs[i].index),
        )
    })?)
}

fn round_trips(ctx: &Ctx, runs: &[SampleRun], latents: &[Tensor]) -> Result<Vec<f64>> {
    Ok(par_map(ctx.workers, runs.len(), |i| {
        round_trip_error(&ctx.world, runs[i].image(), &latents[i])
    })?)
}

fn latents_of(trajs: &[Trajectory]) -> Vec<Tensor> {
    trajs.iter().map(|t| t.latent().clone()).collect()
}

fn noises_of(runs: &[SampleRun]) -> Vec<Tensor> {
    runs.iter().map(|r| r.noise.clone()).collect()
}

fn images_of(runs: &[SampleRun]) -> Vec<Tensor> {
    runs.iter().map(|r| r.image().clone()).collect()
}

fn pooled(xs: &[Tensor]) -> Vec<f64> {
    xs.iter().flat_map(|x| x.data().iter().copied()).collect()
}

fn all_finite(xs: &[Tensor]) -> bool {
    xs.iter().all(|x| x.data().iter().all(|v| v.is_finite()))
}

fn write_trajectories(run: &mut RunDir, prefix: &str, trajs: &[Trajectory]) -> Result<()> {
    for (i, t) in trajs.iter().enumerate() {
        run.tensor(
            &format!("trajectories/{prefix}_{}_states.tsr", idx(i)),
            &Tensor::stack(&t.states)?,
        )?;
        run.tensor(
            &format!("trajectories/{prefix}_{}_eps.tsr", idx(i)),
            &Tensor::stack(&t.eps_records)?,
        )?;
    }
    Ok(())
}

pub fn sample(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let images = images_of(&runs);
    run.stacked("noises.tsr", &noises_of(&runs))?;
    run.stacked("images.tsr", &images)?;
    let masks: Vec<Tensor> = runs.iter().map(|r| r.plain.to_tensor()).collect();
    run.stacked("plain_masks.tsr", &masks)?;
    let model = &ctx.world.model;
    run.tensor(
        "model/weights.tsr",
        &Tensor::from_vec(model.weights().to_vec()),
    )?;
    run.stacked("model/means.tsr", &model.means())?;
    run.tensor(
        "model/component_std.tsr",
        &Tensor::scalar(model.component_std()),
    )?;
    run.text("schedule.csv", &ctx.world.schedule.to_csv())?;
    let trajs: Vec<Trajectory> = runs.iter().map(|r| r.sampling.clone()).collect();
    write_trajectories(run, "sample", &trajs)?;

    let mut report = MetricsReport::new();
    for r in &runs {
        let px = (r.plain.height() * r.plain.width()) as f64;
        report.push(
            "plain_fraction",
            idx(r.index),
            "all",
            None,
            r.plain.count() as f64 / px,
        );
        report.push(
            "pixel_std",
            idx(r.index),
            "all",
            None,
            population_std(r.image().data()),
        );
    }
    run.report("sample.csv", &report)?;
    run.note("schedule.hash", ctx.world.schedule.hash());
    run.check(
        "images_finite",
        all_finite(&images),
        format!("{} generated images", images.len()),
    );
    Ok(())
}

pub fn invert_cmd(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let mut report = MetricsReport::new();
    let mut means = Vec::new();
    for method in ctx.cfg.methods() {
        let s = slug(method);
        let trajs = invert_all(ctx, &runs, method)?;
        let latents = latents_of(&trajs);
        let rts = round_trips(ctx, &runs, &latents)?;
        for (i, rt) in rts.iter().enumerate() {
            report.push("round_trip_error", idx(i), &s, None, *rt);
            if let Some(res) = trajs[i].residuals.as_ref().and_then(|r| r.last()) {
                report.push("fixedpoint_residual", idx(i), &s, None, *res);
            }
        }
        run.stacked(&format!("latents/{s}.tsr"), &latents)?;
        write_trajectories(run, &s, &trajs)?;
        if let InversionMethod::Hybrid(tp) = method {
            let mut csv = String::from("subject_id,forward_steps,jump_seed\n");
            for r in &runs {
                csv.push_str(&format!(
                    "{},{tp},{}\n",
                    idx(r.index),
                    hybrid_seed(ctx.cfg.seed, r.index)
                ));
            }
            run.text(&format!("latents/{s}_seeds.csv"), &csv)?;
        }
        run.check(
            &format!("{s}_finite"),
            all_finite(&latents) && rts.iter().all(|v| v.is_finite()),
            format!("mean round trip {}", g(mean(&rts))),
        );
        means.push((method, mean(&rts)));
    }
    run.report("invert.csv", &report)?;
    let naive = means.iter().find(|(m, _)| *m == InversionMethod::Naive);
    for (m, rt) in &means {
        if let (InversionMethod::FixedPoint(_), Some((_, base))) = (m, naive) {
            run.check(
                &format!("{}_beats_naive", slug(*m)),
                rt < base,
                format!("mean round trip {} vs naive {}", g(*rt), g(*base)),
            );
        }
    }
    Ok(())
}

const REGIONS: [&str; 3] = ["plain", "nonplain", "all"];

fn region_masks(plain: &Mask) -> [Mask; 3] {
    [
        plain.clone(),
        plain.complement(),
        Mask::filled(plain.height(), plain.width(), true),
    ]
}

pub fn metrics(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let noises = noises_of(&runs);
    let mut families: Vec<(String, Vec<Tensor>)> = vec![("noise".into(), noises.clone())];
    let mut round_trip = MetricsReport::new();
    for method in ctx.cfg.methods() {
        let latents = latents_of(&invert_all(ctx, &runs, method)?);
        let rts = round_trips(ctx, &runs, &latents)?;
        for (i, rt) in rts.iter().enumerate() {
            round_trip.push("round_trip_error", idx(i), slug(method), None, *rt);
        }
        families.push((slug(method), latents));
    }

    let (mut stats, mut bits, mut corr, mut dist) = (
        MetricsReport::new(),
        MetricsReport::new(),
        MetricsReport::new(),
        MetricsReport::new(),
    );
    let mut summary = String::from("method,region,err,std,corr,kl\n");
    let mut std_means = Vec::new();
    for (name, xs) in &families {
        let c = patch_corr_top20_batch(xs, 8, 20)?;
        corr.push("patch_corr_top20", "pooled", "all", None, c);
        let mut per_region = Vec::new();
        for (r, region) in REGIONS.iter().enumerate() {
            let (mut errs, mut stds, mut values) = (Vec::new(), Vec::new(), Vec::new());
            for (i, run_i) in runs.iter().enumerate() {
                let mask = &region_masks(&run_i.plain)[r];
                if mask.count() == 0 {
                    continue;
                }
                let st = masked_stats(&xs[i], &noises[i], mask)?;
                stats.push(
                    format!("{name}.mean_abs_err"),
                    idx(i),
                    *region,
                    None,
                    st.mean_abs_err,
                );
                stats.push(format!("{name}.std"), idx(i), *region, None, st.std);
                bits.push(
                    format!("{name}.bits_per_value"),
                    idx(i),
                    *region,
                    None,
                    masked_bitrate(&xs[i], mask)?,
                );
                errs.push(st.mean_abs_err);
                stds.push(st.std);
                values.extend(mask.select(&xs[i])?);
            }
            let kl = kl_to_std_normal(&values).ok();
            if let Some(kl) = kl {
                dist.push(format!("{name}.kl_std_normal"), "pooled", *region, None, kl);
            }
            let corr_cell = if *region == "all" {
                g(c)
            } else {
                String::new()
            };
            summary.push_str(&format!(
                "{name},{region},{},{},{corr_cell},{}\n",
                g(mean(&errs)),
                g(mean(&stds)),
                kl.map_or(String::new(), g)
            ));
            per_region.push(mean(&stds));
        }
        std_means.push((name.clone(), per_region));
    }
    run.report("stats.csv", &stats)?;
    run.report("bitrate.csv", &bits)?;
    run.report("correlation.csv", &corr)?;
    run.report("distribution.csv", &dist)?;
    run.report("roundtrip.csv", &round_trip)?;
    run.text("summary.csv", &summary)?;

    if let Some((_, s)) = std_means.iter().find(|(n, _)| n == "naive") {
        run.check(
            "naive_plain_std_below_nonplain",
            s[0] < s[1],
            format!(
                "naive latent std plain {} vs non-plain {}",
                g(s[0]),
                g(s[1])
            ),
        );
    }
    Ok(())
}

/// Population variance of the pixels of `x`.
fn pixel_variance(x: &Tensor) -> f64 {
    let s = population_std(x.data());
    s * s
}

pub fn interpolate(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    if runs.len() < 2 {
        bail!("invalid parameter `samples`: interpolation needs at least 2 samples");
    }
    let lambdas = &ctx.cfg.lambdas;
    if lambdas.is_empty() {
        bail!("invalid parameter `lambdas`: list is empty");
    }
    // Samples are i.i.d., so consecutive samples form a random pairing.
    let pairs: Vec<(usize, usize)> = (0..runs.len() / 2).map(|p| (2 * p, 2 * p + 1)).collect();

    let mut variants: Vec<(String, Vec<Tensor>, Vec<Tensor>)> =
        vec![("noise".into(), noises_of(&runs), images_of(&runs))];
    for method in ctx.cfg.methods() {
        let latents = latents_of(&invert_all(ctx, &runs, method)?);
        let decoded = par_map(ctx.workers, latents.len(), |i| {
            decode(&ctx.world, &latents[i])
        })?;
        variants.push((slug(method), latents, decoded));
    }

    let mut report = MetricsReport::new();
    let mut worst_endpoint: f64 = 0.0;
    let mid = lambdas
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
        .map(|(j, _)| j)
        .expect("non-empty");
    let mut mid_var = Vec::new();
    for (name, inputs, endpoint_images) in &variants {
        let per_pair = par_map(ctx.workers, pairs.len(), |p| {
            let (a, b) = pairs[p];
            let xs = lambdas
                .iter()
                .map(|&l| slerp(&inputs[a], &inputs[b], l))
                .collect::<latentlab::Result<Vec<_>>>()?;
            let recons = xs
                .iter()
                .map(|x| decode(&ctx.world, x))
                .collect::<latentlab::Result<Vec<_>>>()?;
            Ok::<_, latentlab::Error>((xs, recons))
        })?;
        let mut all_inputs = Vec::new();
        let mut all_recons = Vec::new();
        let mut mids = Vec::new();
        for (p, (xs, recons)) in per_pair.into_iter().enumerate() {
            let (a, b) = pairs[p];
            for (j, (l, r)) in lambdas.iter().zip(&recons).enumerate() {
                report.push(
                    "pixel_variance",
                    idx(p),
                    name,
                    Some(j as i64),
                    pixel_variance(r),
                );
                let end = if *l == 0.0 {
                    Some(&endpoint_images[a])
                } else if *l == 1.0 {
                    Some(&endpoint_images[b])
                } else {
                    None
                };
                if let Some(e) = end {
                    let d = r.max_abs_diff(e)?;
                    report.push("endpoint_error", idx(p), name, Some(j as i64), d);
                    worst_endpoint = worst_endpoint.max(d);
                }
            }
            mids.push(pixel_variance(&recons[mid]));
            all_inputs.push(Tensor::stack(&xs)?);
            all_recons.push(Tensor::stack(&recons)?);
        }
        run.stacked(&format!("interpolate/{name}_inputs.tsr"), &all_inputs)?;
        run.stacked(
            &format!("interpolate/{name}_reconstructions.tsr"),
            &all_recons,
        )?;
        mid_var.push((name.clone(), mean(&mids)));
    }
    let mut grid_csv = String::from("step,lambda\n");
    for (j, l) in lambdas.iter().enumerate() {
        grid_csv.push_str(&format!("{j},{}\n", g(*l)));
    }
    run.text("interpolate/lambdas.csv", &grid_csv)?;
    run.report("interpolate.csv", &report)?;

    run.check(
        "endpoints_reconstruct",
        worst_endpoint <= 1e-8,
        format!("max endpoint error {}", g(worst_endpoint)),
    );
    let find = |n: &str| mid_var.iter().find(|(m, _)| m == n).map(|(_, v)| *v);
    if let (Some(vn), Some(vl)) = (find("noise"), find("naive")) {
        run.check(
            "midpoint_variance_noise_ge_naive",
            vn >= vl,
            format!(
                "lambda {} pixel variance noise {} vs naive latent {}",
                g(lambdas[mid]),
                g(vn),
                g(vl)
            ),
        );
    }
    Ok(())
}

pub fn error_profile(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let w = &ctx.world;
    let profiles = par_map(ctx.workers, runs.len(), |i| {
        inversion_error_profile(&w.model, &w.schedule, &runs[i].sampling, &runs[i].plain)
    })?;
    let push = |report: &mut MetricsReport, subject: &str, p: &ErrorProfile| {
        for (k, &step) in p.steps.iter().enumerate() {
            let s = Some(step as i64);
            report.push("xi", subject, "plain", s, p.xi_plain[k]);
            report.push("xi", subject, "nonplain", s, p.xi_nonplain[k]);
            report.push("std_ratio", subject, "plain", s, p.std_ratio_plain[k]);
            report.push("std_ratio", subject, "nonplain", s, p.std_ratio_nonplain[k]);
        }
    };
    let mut per_sample = MetricsReport::new();
    for (i, p) in profiles.iter().enumerate() {
        push(&mut per_sample, &idx(i), p);
    }
    let m = mean_profile(&profiles)?;
    let mut averaged = MetricsReport::new();
    push(&mut averaged, "mean", &m);
    run.report("error_profile.csv", &per_sample)?;
    run.report("error_profile_mean.csv", &averaged)?;

    let window = ((w.grid.len() as f64 * 0.1).round() as usize).max(1);
    let (cp, cn) = (
        ErrorProfile::cumulative(&m.xi_plain, window),
        ErrorProfile::cumulative(&m.xi_nonplain, window),
    );
    run.check(
        "early_xi_plain_above_nonplain",
        cp > cn,
        format!(
            "cumulative xi over the first {window} steps: plain {} vs non-plain {}",
            g(cp),
            g(cn)
        ),
    );
    Ok(())
}

const MODE_MIN_SAMPLES: usize = 30;

pub fn triangles(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let mut report = MetricsReport::new();
    let mut modes = String::from("method,angle_x0,angle_xt,angle_latent\n");
    let mut worst_sum: f64 = 0.0;
    for method in ctx.cfg.methods() {
        let s = slug(method);
        let latents = latents_of(&invert_all(ctx, &runs, method)?);
        let tris = runs
            .iter()
            .zip(&latents)
            .map(|(r, l)| triangle_angles(&r.noise, r.image(), l))
            .collect::<latentlab::Result<Vec<_>>>()?;
        for (i, t) in tris.iter().enumerate() {
            report.push("angle_x0", idx(i), &s, None, t.angle_x0);
            report.push("angle_xt", idx(i), &s, None, t.angle_xt);
            report.push("angle_latent", idx(i), &s, None, t.angle_latent);
            worst_sum = worst_sum.max((t.sum() - 180.0).abs());
        }
        let collinear = tris.iter().filter(|t| t.is_near_collinear(1e-6)).count();
        run.note(&format!("triangles.{s}.near_collinear"), collinear);
        if tris.len() >= MODE_MIN_SAMPLES {
            let m = most_probable_triangle(&tris, 1.0)?;
            modes.push_str(&format!(
                "{s},{},{},{}\n",
                g(m.angle_x0),
                g(m.angle_xt),
                g(m.angle_latent)
            ));
        } else {
            run.note(
                &format!("triangles.{s}.mode"),
                format!("skipped: needs {MODE_MIN_SAMPLES} samples"),
            );
        }
    }
    run.report("triangles.csv", &report)?;
    run.text("triangles_mode.csv", &modes)?;
    run.check(
        "angle_sums",
        worst_sum <= 1e-9,
        format!("max |angle sum - 180| {}", g(worst_sum)),
    );
    Ok(())
}

pub fn assignment(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    let runs = corpus(ctx, run)?;
    let noises = noises_of(&runs);
    let images = images_of(&runs);
    let identity: Vec<usize> = (0..runs.len()).collect();
    let mut report = MetricsReport::new();
    let mut nearest_csv = String::from("direction,query,nearest\n");
    let mut record =
        |direction: &str, q: &[Tensor], t: &[Tensor], report: &mut MetricsReport| -> Result<f64> {
            let acc = nn_assignment_accuracy(q, t, &identity)?;
            report.push("nn_accuracy", "all", direction, None, acc);
            for (i, j) in nearest_targets(q, t)?.iter().enumerate() {
                nearest_csv.push_str(&format!("{direction},{i},{j}\n"));
            }
            Ok(acc)
        };
    record("image_to_noise", &images, &noises, &mut report)?;
    let plain = record("noise_to_image", &noises, &images, &mut report)?;
    let mut with_attractor = images.clone();
    with_attractor.push(Tensor::zeros(ctx.world.shape()));
    let attracted = record(
        "noise_to_image_with_attractor",
        &noises,
        &with_attractor,
        &mut report,
    )?;
    for method in ctx.cfg.methods() {
        let latents = latents_of(&invert_all(ctx, &runs, method)?);
        record(
            &format!("{}_latent_to_noise", slug(method)),
            &latents,
            &noises,
            &mut report,
        )?;
    }
    run.report("assignment.csv", &report)?;
    run.text("assignment_nearest.csv", &nearest_csv)?;
    run.check(
        "attractor_does_not_help",
        attracted <= plain,
        format!(
            "noise->image accuracy {} without vs {} with a zero attractor",
            g(plain),
            g(attracted)
        ),
    );
    Ok(())
}

pub fn sweep_forward(ctx: &Ctx, run: &mut RunDir) -> Result<()> {
    if ctx.cfg.sweep.is_empty() {
        bail!("invalid parameter `sweep`: list is empty");
    }
    let runs = corpus(ctx, run)?;
    let t = ctx.world.grid.len();
    let mut csv = String::from("percent,t_prime,corr,kl,round_trip\n");
    let mut kls = Vec::new();
    for (j, &pct) in ctx.cfg.sweep.iter().enumerate() {
        let tp = forward_steps_for_share(t, pct / 100.0);
        let latents = latents_of(&invert_all(ctx, &runs, InversionMethod::Hybrid(tp))?);
        let corr = patch_corr_top20_batch(&latents, 8, 20)?;
        let kl = kl_to_std_normal(&pooled(&latents)).context("KL over the pooled latents")?;
        let rt = mean(&round_trips(ctx, &runs, &latents)?);
        csv.push_str(&format!(
            "{},{tp},{},{},{}\n",
            g(pct),
            g(corr),
            g(kl),
            g(rt)
        ));
        run.stacked(&format!("sweep/latents_{j:02}.tsr"), &latents)?;
        kls.push((pct, kl));
    }
    run.text("sweep_forward.csv", &csv)?;
    let lo = kls
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty");
    let hi = kls
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty");
    if hi.0 > lo.0 {
        run.check(
            "forward_share_lowers_kl",
            hi.1 <= lo.1,
            format!(
                "KL {} at {}% vs {} at {}%",
                g(hi.1),
                g(hi.0),
                g(lo.1),
                g(lo.0)
            ),
        );
    }
    Ok(())
}
