//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use ddeq::autodiff::checks::op_checks;
use ddeq::autodiff::{Tape, Var};
use ddeq::checks::{check_inner_objective, tiny_params};
use ddeq::config::RunConfig;
use ddeq::diagnostics::{w2_distance, w2_distance_flow};
use ddeq::kernel::{wasserstein_gradient_pushforward, FlowTarget, KernelSpec};
use ddeq::measure::{rng_from_seed, synth_dataset, DiscreteMeasure, Rng as DdeqRng, ShapeFamily, SynthSpec, TaskKind};
use ddeq::net::{
    bilinear_forward, classify_head, coupling_forward, coupling_inverse, ddeq_core_forward, encoder_block, init_params,
    is_core_param, ModelConfig, ModelParams,
};
use ddeq::solver::{fixed_target_flow, solve_unrolled, FlowConfig, InnerProblem};
use ddeq::tensor::Tensor;
use ddeq::train::{
    cross_entropy_on_tape, evaluate, latent_init, loss_complete, predict, prepare, sample_step, train, SampleInputs,
    Target, TrainConfig,
};

/// Maxima of (pl_ratio, grad_discrepancy_ratio, theorem_ratio) over the
/// seeded classification run, frozen from its calibration.
const FROZEN_DIAGNOSTIC_MAXIMA: (f64, f64, f64) = (7.483100279547408, 16.07586400467656, 8.60554628573207);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut DdeqRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn normal(shape: &[usize], rng: &mut DdeqRng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn perm(n: usize, rng: &mut DdeqRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Largest deviation over the first `rows` rows.
fn active_diff(a: &Tensor, b: &Tensor, rows: usize) -> f64 {
    let c = a.cols();
    a.data()[..rows * c]
        .iter()
        .zip(&b.data()[..rows * c])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn desk_params(classes: usize, coupling: bool, seed: u64) -> ModelParams {
    let mut cfg = ModelConfig::desk(2).with_classes(classes);
    cfg.coupling = coupling;
    randomize(init_params(&cfg, seed).unwrap(), seed)
}

/// Replaces zero-initialized blocks so every layer is exercised.
fn randomize(mut params: ModelParams, seed: u64) -> ModelParams {
    let mut rng = rng_from_seed(seed ^ 0xacce);
    params.update(|name, t| {
        if name.starts_with("coupling.") || name.starts_with("bil.") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    });
    params
}

fn c1_equivariance() -> Outcome {
    let t0 = Instant::now();
    let params = desk_params(3, false, 1);
    let p_dim = params.config.latent_dim;
    let b_dim = params.config.bilinear_dim;
    let mut rng = rng_from_seed(101);
    let (mut bil, mut enc, mut core) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let (sn, sm) = (perm(n, &mut rng), perm(m, &mut rng));

        let z = uniform(&[n, b_dim], -1.5, 1.5, &mut rng);
        let xb = uniform(&[m, b_dim], -1.5, 1.5, &mut rng);
        let bilinear = |z: &Tensor, x: &Tensor| {
            let mut t = Tape::new();
            let p = params.bind(&mut t, false);
            let zv = t.constant(z.clone());
            let xv = t.constant(x.clone());
            let x_bar = t.masked_mean_rows(xv, &vec![true; m]).unwrap();
            let y = bilinear_forward(&mut t, zv, &vec![true; n], x_bar, p.get("bil.alpha").unwrap(), Some(p.get("bil.beta").unwrap()))
                .unwrap();
            t.value(y).clone()
        };
        let base = bilinear(&z, &xb);
        bil = bil.max(bilinear(&z.select_rows(&sn), &xb.select_rows(&sm)).max_abs_diff(&base.select_rows(&sn)));

        let h = uniform(&[n, p_dim], -1.5, 1.5, &mut rng);
        let src = uniform(&[m, p_dim], -1.5, 1.5, &mut rng);
        for prefix in ["x_self.0", "z_self.0", "cross.0"] {
            let block = |h: &Tensor, s: &Tensor| {
                let mut t = Tape::new();
                let p = params.bind(&mut t, false);
                let hv = t.constant(h.clone());
                let sv = t.constant(s.clone());
                let y = encoder_block(&mut t, &p, prefix, hv, sv, &vec![true; n], &vec![true; m], params.config.per_head_dim).unwrap();
                t.value(y).clone()
            };
            let base = block(&h, &src);
            enc = enc.max(block(&h.select_rows(&sn), &src.select_rows(&sm)).max_abs_diff(&base.select_rows(&sn)));
        }

        let z = normal(&[n, p_dim], &mut rng);
        let x = uniform(&[m, 2], -1.5, 1.5, &mut rng);
        let pins: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let pins_p: Vec<bool> = sn.iter().map(|&i| pins[i]).collect();
        let base = ddeq_core_forward(&params, &z, &vec![true; n], &x, &vec![true; m], &pins).unwrap();
        let out = ddeq_core_forward(&params, &z.select_rows(&sn), &vec![true; n], &x.select_rows(&sm), &vec![true; m], &pins_p).unwrap();
        core = core.max(out.max_abs_diff(&base.select_rows(&sn)));
    }
    let e = t0.elapsed();
    let worst = bil.max(enc).max(core);
    outcome(
        worst <= 1e-10 && within(e, 5.0),
        format!("bilinear {bil:.2e}, encoders {enc:.2e}, core {core:.2e} (≤1e-10); {e:.2?}"),
    )
}

fn c2_padding() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(202);
    let mut worst = [0.0f64; 5];
    for task in [TaskKind::Classify, TaskKind::Complete] {
        let coupling = task == TaskKind::Complete;
        let params = desk_params(if coupling { 0 } else { 3 }, coupling, 2);
        let cfg = TrainConfig {
            task,
            latent_particles: 5,
            flow: FlowConfig { iterations: 10, step_size: 1.0, record_every: 0, ..FlowConfig::default() },
            ..TrainConfig::default()
        };
        let data = synth_dataset(&SynthSpec {
            classes: 3,
            samples_per_class: 1,
            particles: 12,
            dim: 2,
            shape_family: ShapeFamily::Ring,
            seed: 3,
        })
        .unwrap();
        for s in prepare(&data, &cfg).unwrap() {
            let (z0, pins) = latent_init(&s, &params, &cfg, 4).unwrap();
            let base = SampleInputs::new(&s, z0, pins);
            let (n, m) = (base.z0.rows(), base.x.rows());
            let (loss0, head0, zs0) = predict(&params, &cfg, &base, &s.target).unwrap();
            let f0 = ddeq_core_forward(&params, &base.z0, &base.z_mask, &base.x, &base.x_mask, &base.pins).unwrap();
            for (ez, ex) in [(3, 0), (0, 4), (2, 5)] {
                let padded = base.padded(m + ex, n + ez);
                let f = ddeq_core_forward(&params, &padded.z0, &padded.z_mask, &padded.x, &padded.x_mask, &padded.pins).unwrap();
                worst[0] = worst[0].max(active_diff(&f, &f0, n));
                let (loss, head, zs) = predict(&params, &cfg, &padded, &s.target).unwrap();
                worst[1] = worst[1].max(active_diff(&zs, &zs0, n));
                let head_rows = if coupling { n } else { 1 };
                let head = if coupling { head } else { head.reshaped(&[1, 3]).unwrap() };
                let head0 = if coupling { head0.clone() } else { head0.clone().reshaped(&[1, 3]).unwrap() };
                worst[2] = worst[2].max(active_diff(&head, &head0, head_rows));
                let slot = if coupling { 4 } else { 3 };
                worst[slot] = worst[slot].max((loss - loss0).abs());
            }
            if let Target::Cloud(truth) = &s.target {
                let extra = rng.gen_range(1..4);
                let a = loss_complete(truth, truth).unwrap();
                let shifted = DiscreteMeasure::new(truth.points().map(|v| v + 0.1)).unwrap();
                let b0 = loss_complete(&shifted, truth).unwrap();
                let b = loss_complete(&shifted.padded(extra), &truth.padded(extra + 1)).unwrap();
                worst[4] = worst[4].max(a.abs()).max((b - b0).abs());
            }
        }
    }
    let e = t0.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max <= 1e-10 && within(e, 10.0),
        format!(
            "core {:.2e}, solver {:.2e}, heads {:.2e}, cross-entropy {:.2e}, completion loss {:.2e} (≤1e-10); {e:.2?}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn c3_gradients() -> Outcome {
    let t0 = Instant::now();
    let ops = op_checks(1e-5).unwrap();
    let g = check_inner_objective(&tiny_params(0, false, 3), 6, 5, 33, 1e-5).unwrap();
    let e = t0.elapsed();
    let worst_op = ops.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let worst_g = g.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = ops.iter().chain(&g).filter(|c| !c.report.passed).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty() && within(e, 60.0),
        format!(
            "{} ops max rel {worst_op:.2e}, G on 6 particles ({} inputs) max rel {worst_g:.2e} (≤1e-5){}; {e:.2?}",
            ops.len(),
            g.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

fn c4_pushforward_gradient() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..10 {
        let cfg = ModelConfig { pushforward_only: true, ..ModelConfig::desk(2) };
        let params = randomize(init_params(&cfg, 40 + i).unwrap(), 40 + i);
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=8);
        let z = normal(&[n, cfg.latent_dim], &mut rng);
        let x = uniform(&[m, 2], -1.5, 1.5, &mut rng);
        let problem = InnerProblem::new(&params, &x, &vec![true; m], &vec![true; n], &vec![false; n], KernelSpec::Riesz).unwrap();
        let mu = DiscreteMeasure::new(z.clone()).unwrap();
        let analytic = wasserstein_gradient_pushforward(&KernelSpec::Riesz, &mu, &problem).unwrap();
        let (_, auto, _) = problem.step_direction(&z, true).unwrap();
        worst = worst.max(analytic.max_abs_diff(&auto));
        scale = scale.max(auto.data().iter().fold(0.0, |a: f64, v| a.max(v.abs())));
    }
    let e = t0.elapsed();
    outcome(
        worst <= 1e-8 && within(e, 30.0),
        format!("max |analytic − N·autodiff| {worst:.2e} at gradient scale {scale:.2e} (≤1e-8); {e:.2?}"),
    )
}

fn c5_coupling() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(505);
    let mut round = 0.0f64;
    for i in 0..100 {
        let p_dim = 2 * rng.gen_range(1..=16);
        let cfg = ModelConfig { latent_dim: p_dim, per_head_dim: 2, ..ModelConfig::desk(2) }.with_coupling();
        let mut params = init_params(&cfg, i).unwrap();
        // Every coupling tensor, including the zero-initialized output
        // layers, drawn at initialization scale.
        params.update(|name, t| {
            if name.starts_with("coupling.") {
                let a = if t.shape().len() == 2 { 1.0 / (t.shape()[0] as f64).sqrt() } else { 0.5 };
                for v in t.data_mut() {
                    *v = rng.gen_range(-a..a);
                }
            }
        });
        let n = rng.gen_range(1..=20);
        let z = uniform(&[n, p_dim], -3.0, 3.0, &mut rng);
        let back = coupling_inverse(&params, &coupling_forward(&params, &z).unwrap()).unwrap();
        round = round.max(back.max_abs_diff(&z));
    }

    let params = desk_params(0, true, 5);
    let cfg = TrainConfig {
        task: TaskKind::Complete,
        flow: FlowConfig { iterations: 20, step_size: 1.0, record_every: 0, ..FlowConfig::default() },
        ..TrainConfig::default()
    };
    let data = synth_dataset(&SynthSpec {
        classes: 3,
        samples_per_class: 2,
        particles: 40,
        dim: 2,
        shape_family: ShapeFamily::Ring,
        seed: 6,
    })
    .unwrap();
    let mut kept = 0.0f64;
    for (i, s) in prepare(&data, &cfg).unwrap().iter().enumerate() {
        let (z0, pins) = latent_init(s, &params, &cfg, i as u64).unwrap();
        let inputs = SampleInputs::new(s, z0, pins);
        let (_, pred, _) = predict(&params, &cfg, &inputs, &s.target).unwrap();
        kept = kept.max(active_diff(&pred, s.input.points(), s.input.rows()));
    }
    let e = t0.elapsed();
    outcome(
        round <= 1e-10 && kept <= 1e-8 && within(e, 10.0),
        format!("max |q⁻¹(q(Z)) − Z| {round:.2e} (≤1e-10), input particles kept to {kept:.2e} (≤1e-8); {e:.2?}"),
    )
}

fn c6_fixed_target_flow() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(606);
    let target = DiscreteMeasure::new(normal(&[100, 2], &mut rng)).unwrap();
    let start = Normal::new(3.0, 0.5).unwrap();
    let mu0 = DiscreteMeasure::new(Tensor::from_fn(&[100, 2], |_| start.sample(&mut rng))).unwrap();
    let cfg = FlowConfig { iterations: 1000, step_size: FIXED_FLOW_STEP, ..FlowConfig::default() };
    let (_, trace) = fixed_target_flow(&mu0, FlowTarget::Fixed(&target), KernelSpec::Riesz, &cfg).unwrap();
    let v = &trace.objective;
    let decreasing = v.windows(2).filter(|w| w[1] < w[0]).count() as f64 / (v.len() - 1) as f64;
    let ratio = v[v.len() - 1] / v[0];
    let e = t0.elapsed();
    outcome(
        decreasing >= 0.95 && ratio <= 0.01 && within(e, 60.0),
        format!("MMD² decreased in {:.1}% of steps (≥95%), final/initial {ratio:.2e} (≤1e-2); {e:.2?}", 100.0 * decreasing),
    )
}

/// Step size of the fixed-target flow.
const FIXED_FLOW_STEP: f64 = 0.1;

fn c7_rotation(out_root: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut passed = true;
    for k in [5u32, 8] {
        let t0 = Instant::now();
        let out = out_root.join(format!("rotate-{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_ddeq"))
            .args(["rotate-flow", "--angle-div", &k.to_string(), "--iters", "2000", "--eta", "10", "--decay", "0.999"])
            .args(["--n", "200", "--seed", "0", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        let e = t0.elapsed();
        if !status.status.success() {
            passed = false;
            lines.push(format!("k={k}: exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
            continue;
        }
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        let ratio = report["final_mmd_sq"].as_f64().unwrap() / report["initial_mmd_sq"].as_f64().unwrap();
        let snaps: Vec<PathBuf> = [0, 10, 50, 200, 1000, 2000]
            .iter()
            .map(|s| out.join("snapshots").join(format!("flow_{s:05}.csv")))
            .collect();
        let all_snaps = snaps.iter().all(|p| p.exists()) && out.join("snapshots/rotated_final.csv").exists();
        let ok = ratio <= 1e-3 && all_snaps && within(e, 300.0);
        passed &= ok;
        lines.push(format!("k={k}: final/initial {ratio:.2e} (≤1e-3), snapshots {}, {e:.2?}", if all_snaps { "complete" } else { "missing" }));
    }
    outcome(passed, lines.join("; "))
}

fn c8_phantom() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    for (task, classes) in [(TaskKind::Classify, 3), (TaskKind::Complete, 0)] {
        let coupling = task == TaskKind::Complete;
        let params = tiny_params(classes, coupling, 8);
        let cfg = TrainConfig {
            task,
            latent_particles: 4,
            flow: FlowConfig { iterations: 0, step_size: 0.7, record_every: 0, ..FlowConfig::default() },
            ..TrainConfig::default()
        };
        let data = synth_dataset(&SynthSpec {
            classes: 3,
            samples_per_class: 1,
            particles: 8,
            dim: 2,
            shape_family: ShapeFamily::Cross,
            seed: 9,
        })
        .unwrap();
        let s = &prepare(&data, &cfg).unwrap()[1];
        let (z0, pins) = latent_init(s, &params, &cfg, 2).unwrap();
        let inputs = SampleInputs::new(s, z0.clone(), pins.clone());
        let out = sample_step(&params, &cfg, &inputs, &s.target).unwrap();

        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let x = tape.constant(inputs.x.clone());
        let zv = tape.constant(z0);
        let one = FlowConfig { iterations: 1, ..cfg.flow.clone() };
        let z1 = solve_unrolled(&mut tape, &p, &params, x, &inputs.x_mask, zv, &inputs.z_mask, &pins, &one).unwrap();
        let loss = match &s.target {
            Target::Class(c) => {
                let logits = classify_head(&mut tape, &p, z1, &inputs.z_mask).unwrap();
                cross_entropy_on_tape(&mut tape, logits, *c).unwrap()
            }
            Target::Cloud(t) => {
                let y = ddeq::net::coupling_inverse_on_tape(&mut tape, &p, z1, &inputs.z_mask).unwrap();
                let y = tape.slice_cols(y, 0, 2).unwrap();
                let tv = tape.constant(t.points().clone());
                let m = ddeq::kernel::mmd_sq_on_tape(&mut tape, &KernelSpec::Riesz, y, &inputs.z_mask, tv, t.mask()).unwrap();
                tape.scale(m, 0.5)
            }
        };
        let (names, vars): (Vec<&str>, Vec<Var>) = p.iter().unzip();
        let full = tape.grad_values(loss, &vars).unwrap();
        let num: f64 = names.iter().zip(&full).map(|(n, g)| out.grads[*n].zip_map(g, |a, b| a - b).norm_sq()).sum();
        let den: f64 = full.iter().map(Tensor::norm_sq).sum();
        worst = worst.max((num / den).sqrt());

        let still = TrainConfig { flow: FlowConfig { step_size: 0.0, iterations: 3, ..cfg.flow.clone() }, ..cfg.clone() };
        let out = sample_step(&params, &still, &inputs, &s.target).unwrap();
        for (name, g) in &out.grads {
            if is_core_param(name) && g.data().iter().any(|&v| v != 0.0) {
                zero_ok = false;
            }
        }
    }
    let e = t0.elapsed();
    outcome(
        worst <= 1e-10 && zero_ok && within(e, 10.0),
        format!(
            "phantom vs unrolled rel {worst:.2e} (≤1e-10), η=0 core gradients {}; {e:.2?}",
            if zero_ok { "exactly zero" } else { "NONZERO" }
        ),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn c9_exact_ot() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_from_seed(909);
    let perms = permutations(5);
    let (mut brute_err, mut flow_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let d = rng.gen_range(1..=3);
        let a = uniform(&[5, d], -2.0, 2.0, &mut rng);
        let b = uniform(&[5, d], -2.0, 2.0, &mut rng);
        let cost = |i: usize, j: usize| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let best = perms.iter().map(|p| (0..5).map(|i| cost(i, p[i])).sum::<f64>() / 5.0).fold(f64::INFINITY, f64::min);
        let (ma, mb) = (DiscreteMeasure::new(a.clone()).unwrap(), DiscreteMeasure::new(b.clone()).unwrap());
        let w = w2_distance(&ma, &mb).unwrap();
        brute_err = brute_err.max((w - best.sqrt()).abs());
        flow_err = flow_err.max((w2_distance_flow(&ma, &mb).unwrap() - w).abs());
    }
    let e = t0.elapsed();
    outcome(
        brute_err <= 1e-12 && flow_err <= 1e-12 && within(e, 10.0),
        format!(
            "{} permutations: max |W2 − brute force| {brute_err:.2e}, unequal-count path vs assignment {flow_err:.2e} (≤1e-12); {e:.2?}",
            perms.len()
        ),
    )
}

fn preset(name: &str) -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name)).unwrap()
}

struct Learning {
    classify: Outcome,
    complete: Outcome,
    diagnostics: Outcome,
}

fn c10_c11_learning() -> Learning {
    let rc = preset("desk-classify.toml");
    let t0 = Instant::now();
    let (tr, te) = rc.load_data().unwrap();
    let cfg = rc.train_config().unwrap();
    let classes = rc.resolve_classes(&tr);
    let params = init_params(&rc.model_config(2, classes).unwrap(), rc.seed).unwrap();
    let (trp, tep) = (prepare(&tr, &cfg).unwrap(), prepare(&te, &cfg).unwrap());
    let (trained, record) = train(params, &trp, &cfg, None).unwrap();
    let acc = evaluate(&trained, &tep, &cfg).unwrap().accuracy.unwrap();
    let e = t0.elapsed();
    let max_particles = tr.iter().chain(&te).map(|s| s.input.n_active()).max().unwrap();
    let classify = outcome(
        acc >= 0.90 && tr.len() == 300 && te.len() == 150 && max_particles <= 64 && within(e, 1800.0),
        format!(
            "test accuracy {acc:.3} (≥0.90) on {}/{} samples, p={}, L={}, {} epochs; {e:.2?}",
            tr.len(),
            te.len(),
            rc.latent_dim,
            rc.inner_iterations,
            rc.epochs
        ),
    );

    let series = &record.diagnostics;
    let (pl, gd, th) = series.maxima();
    let (fpl, fgd, fth) = FROZEN_DIAGNOSTIC_MAXIMA;
    let diagnostics = outcome(
        !series.is_empty() && series.all_finite() && pl <= 3.0 * fpl && gd <= 3.0 * fgd && th <= 3.0 * fth,
        format!(
            "{} rows, all finite: {}; maxima pl {pl:.3} (≤3×{fpl:.3}), grad discrepancy {gd:.3} (≤3×{fgd:.3}), theorem {th:.3} (≤3×{fth:.3})",
            series.len(),
            series.all_finite()
        ),
    );

    let rc = preset("desk-complete.toml");
    let t0 = Instant::now();
    let (tr, te) = rc.load_data().unwrap();
    let cfg = rc.train_config().unwrap();
    let params = init_params(&rc.model_config(2, 0).unwrap(), rc.seed).unwrap();
    let (trp, tep) = (prepare(&tr, &cfg).unwrap(), prepare(&te, &cfg).unwrap());
    let before = evaluate(&params, &tep, &cfg).unwrap().mmd_half.unwrap();
    let (trained, _) = train(params, &trp, &cfg, None).unwrap();
    let after = evaluate(&trained, &tep, &cfg).unwrap().mmd_half.unwrap();
    let e = t0.elapsed();
    let reduction = 1.0 - after / before;
    let complete = outcome(
        reduction >= 0.5 && tr.len() + te.len() == 200 && rc.synth_family == ShapeFamily::Ring && within(e, 1800.0),
        format!(
            "mean test ½MMD² {before:.4e} → {after:.4e}, reduction {:.1}% (≥50%) on {} samples; {e:.2?}",
            100.0 * reduction,
            tr.len() + te.len()
        ),
    );
    Learning { classify, complete, diagnostics }
}

fn main() {
    let only: Vec<usize> = std::env::var("DDEQ_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let run = |k: usize| only.is_empty() || only.contains(&k);
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |k: usize, name: &'static str, o: Outcome| {
        println!("criterion {k:>2} {:<4} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o));
    };
    if run(1) {
        record(1, "equivariance", c1_equivariance());
    }
    if run(2) {
        record(2, "padding inertness", c2_padding());
    }
    if run(3) {
        record(3, "gradient correctness", c3_gradients());
    }
    if run(4) {
        record(4, "analytic vs autodiff W-gradient", c4_pushforward_gradient());
    }
    if run(5) {
        record(5, "coupling invertibility", c5_coupling());
    }
    if run(6) {
        record(6, "fixed-target flow", c6_fixed_target_flow());
    }
    if run(7) {
        record(7, "rotation flow", c7_rotation(scratch.path()));
    }
    if run(8) {
        record(8, "phantom gradient", c8_phantom());
    }
    if run(9) {
        record(9, "exact OT", c9_exact_ot());
    }
    if run(10) || run(11) {
        let l = c10_c11_learning();
        record(10, "desk classification", l.classify);
        record(10, "desk completion", l.complete);
        record(11, "diagnostics boundedness", l.diagnostics);
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
