use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use ddeq::checks::{self, Preset};
use ddeq::config::RunConfig;
use ddeq::diagnostics::{eps_t, grad_discrepancy_ratio, pl_ratio, theorem_ratio, DiagnosticRow, DiagnosticSeries};
use ddeq::kernel::{FlowTarget, KernelSpec, LinearMap, MmdObjective, PushforwardMap};
use ddeq::measure::{derive_seed, rng_from_seed, DiscreteMeasure, Sample, TaskKind};
use ddeq::net::{init_params, ModelParams};
use ddeq::solver::{fixed_target_flow, FlowConfig, InnerProblem};
use ddeq::train::{evaluate, latent_init, prepare, sample_step, train, Metrics, SampleInputs};
use ddeq::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "ddeq", version, about = "Distributional deep equilibrium models")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a point-cloud classifier.
    TrainClassify {
        config: PathBuf,
        #[arg(long, default_value = "runs/train-classify")]
        out: PathBuf,
    },
    /// Train a point-cloud completion model.
    TrainComplete {
        config: PathBuf,
        #[arg(long, default_value = "runs/train-complete")]
        out: PathBuf,
    },
    /// MMD flow towards the image of the particles under a rotation.
    RotateFlow {
        #[arg(long)]
        angle_div: u32,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 10.0)]
        eta: f64,
        #[arg(long, default_value_t = 0.999)]
        decay: f64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/rotate-flow")]
        out: PathBuf,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
    /// Convergence monitors on a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value = "runs/diagnose")]
        out: PathBuf,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
}

/// Error with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    layout: Layout,
    config: C,
}

#[derive(Serialize)]
struct Layout {
    manifest: &'static str,
    metrics: &'static str,
    diagnostics: &'static str,
    snapshots: &'static str,
    checkpoints: &'static str,
    report: &'static str,
}

const LAYOUT: Layout = Layout {
    manifest: "manifest",
    metrics: "metrics.csv",
    diagnostics: "diagnostics.csv",
    snapshots: "snapshots/",
    checkpoints: "checkpoints/",
    report: "report.json",
};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, seed: u64, config: C) -> Result<(), Error> {
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        layout: LAYOUT,
        config,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("manifest"), text)
}

fn write_report<T: Serialize>(out: &Path, report: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Schema(e.to_string()))?;
    write(&out.join("report.json"), text + "\n")
}

fn print_metrics(label: &str, m: &Metrics) {
    print!("{label}: samples {} loss {:.6}", m.samples, m.mean_loss);
    if let Some(a) = m.accuracy {
        print!(" accuracy {a:.4}");
    }
    if let Some(v) = m.mmd_half {
        print!(" half_mmd_sq {v:.6}");
    }
    if let Some(v) = m.w2_free {
        print!(" w2_free {v:.6}");
    }
    if let Some(v) = m.w2_full {
        print!(" w2_full {v:.6}");
    }
    println!();
}

fn load_run(config: &Path, expect: Option<TaskKind>) -> Result<(RunConfig, Vec<Sample>, Vec<Sample>), Failure> {
    let cfg = RunConfig::load(config)?;
    if let Some(t) = expect {
        if cfg.task != t {
            return Err(usage(format!(
                "{}: task is {:?}, this command needs {:?}",
                config.display(),
                cfg.task,
                t
            )));
        }
    }
    let (tr, te) = cfg.load_data()?;
    if tr.is_empty() {
        return Err(usage(format!("{}: training split is empty", config.display())));
    }
    Ok((cfg, tr, te))
}

#[derive(Serialize)]
struct TrainReport {
    initial: Metrics,
    #[serde(rename = "final")]
    final_: Metrics,
    steps: usize,
}

fn cmd_train(config: &Path, out: &Path, task: TaskKind) -> CmdResult {
    let run = RunConfig::load(config)?;
    write_manifest(out, if task == TaskKind::Classify { "train-classify" } else { "train-complete" }, run.seed, &run)?;
    let (run, tr, te) = load_run(config, Some(task))?;
    let tcfg = run.train_config()?;
    let classes = run.resolve_classes(&tr);
    let model = run.model_config(tr[0].input.dim(), classes)?;
    let params = init_params(&model, run.seed)?;
    let train_set = prepare(&tr, &tcfg)?;
    let test_set = if te.is_empty() { train_set.clone() } else { prepare(&te, &tcfg)? };
    let initial = evaluate(&params, &test_set, &tcfg)?;
    print_metrics("initial", &initial);
    let (params, record) = train(params, &train_set, &tcfg, Some(out))?;
    record.write_csv(out.join("metrics.csv"))?;
    record.diagnostics.write_csv(out.join("diagnostics.csv"))?;
    let fin = evaluate(&params, &test_set, &tcfg)?;
    print_metrics("final", &fin);
    write_report(
        out,
        &TrainReport {
            initial,
            final_: fin,
            steps: record.rows.len(),
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct RotateConfig {
    angle_div: u32,
    iters: usize,
    eta: f64,
    decay: f64,
    n: usize,
    seed: u64,
}

#[derive(Serialize)]
struct RotateReport {
    angle: f64,
    initial_mmd_sq: f64,
    final_mmd_sq: f64,
    ratio: f64,
}

/// Iterations at which the rotation flow keeps snapshots.
const ROTATE_SNAPSHOTS: [usize; 6] = [0, 10, 50, 200, 1000, 2000];

fn cmd_rotate(c: RotateConfig, out: &Path) -> CmdResult {
    if c.angle_div == 0 {
        return Err(usage("--angle-div must be at least 1"));
    }
    if c.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    write_manifest(out, "rotate-flow", c.seed, &c)?;
    let mut rng = rng_from_seed(c.seed);
    let nx = Normal::new(-10.0, 1.0).expect("valid normal");
    let ny = Normal::new(0.0, 12f64.sqrt()).expect("valid normal");
    let pts = Tensor::from_fn(&[c.n, 2], |e| if e % 2 == 0 { nx.sample(&mut rng) } else { ny.sample(&mut rng) });
    let mu0 = DiscreteMeasure::new(pts)?;
    let angle = 2.0 * PI / c.angle_div as f64;
    let map = if c.angle_div == 1 { LinearMap::identity(2) } else { LinearMap::rotation(angle) };
    let flow = FlowConfig {
        iterations: c.iters,
        step_size: c.eta,
        step_decay: c.decay,
        snapshot_at: ROTATE_SNAPSHOTS.iter().copied().filter(|&s| s <= c.iters).collect(),
        ..FlowConfig::default()
    };
    let (mu, trace) = fixed_target_flow(&mu0, FlowTarget::Pushforward(&map), KernelSpec::Riesz, &flow)?;
    trace.write_csv(out.join("metrics.csv"))?;
    let snaps = out.join("snapshots");
    trace.write_snapshots(&snaps, "flow", mu.mask())?;
    let rotated = DiscreteMeasure::new(map.apply(mu.points())?)?;
    ddeq::measure::save_points_csv(
        &[Sample {
            id: "rotated-final".into(),
            input: rotated,
            label: None,
            target: None,
        }],
        snaps.join("rotated_final.csv"),
    )?;
    let obj = MmdObjective {
        kernel: KernelSpec::Riesz,
        target: FlowTarget::Pushforward(&map),
    };
    let initial = obj.mmd_sq(&mu0)?;
    let fin = obj.mmd_sq(&mu)?;
    let ratio = if initial > 0.0 { fin / initial } else { 0.0 };
    println!("rotation 2π/{}: MMD² {initial:.6e} → {fin:.6e} (ratio {ratio:.3e})", c.angle_div);
    write_report(
        out,
        &RotateReport {
            angle,
            initial_mmd_sq: initial,
            final_mmd_sq: fin,
            ratio,
        },
    )?;
    Ok(())
}

fn cmd_gradcheck(preset: &str, out: &Path) -> CmdResult {
    let p: Preset = preset.parse()?;
    #[derive(Serialize)]
    struct Cfg<'a> {
        preset: &'a str,
        tolerance: f64,
    }
    write_manifest(out, "gradcheck", 0, Cfg { preset, tolerance: checks::DEFAULT_TOL })?;
    let results = checks::run(p, checks::DEFAULT_TOL)?;
    let mut csv = String::from("check,max_rel_err,tol,passed\n");
    let mut failed = 0;
    for c in &results {
        let ok = c.report.passed;
        failed += usize::from(!ok);
        println!("{} {:<48} {:.3e}", if ok { "PASS" } else { "FAIL" }, c.name, c.report.max_rel_err);
        csv.push_str(&format!("\"{}\",{:?},{:?},{}\n", c.name, c.report.max_rel_err, c.report.tol, ok));
    }
    write(&out.join("metrics.csv"), csv)?;
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} gradient checks failed"),
        });
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, Failure> {
    ModelParams::load(path).map_err(|e| match e {
        Error::Io { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

fn cmd_diagnose(checkpoint: &Path, config: &Path, samples: usize, out: &Path) -> CmdResult {
    let run = RunConfig::load(config)?;
    write_manifest(out, "diagnose", run.seed, &run)?;
    let params = load_checkpoint(checkpoint)?;
    let (run, tr, _) = load_run(config, None)?;
    let tcfg = run.train_config()?;
    let data = prepare(&tr[..samples.min(tr.len())], &tcfg)?;
    let mut norms = Vec::new();
    let mut series = DiagnosticSeries::default();
    for (i, s) in data.iter().enumerate() {
        let t = i + 1;
        let (z0, pins) = latent_init(s, &params, &tcfg, derive_seed(run.seed, &[9, i as u64]))?;
        let inputs = SampleInputs::new(s, z0, pins);
        let outcome = sample_step(&params, &tcfg, &inputs, &s.target)?;
        norms.push(outcome.grads.values().map(Tensor::norm_sq).sum::<f64>());
        if t < 2 {
            continue;
        }
        let problem = InnerProblem::new(&params, &inputs.x, &inputs.x_mask, &inputs.z_mask, &inputs.pins, tcfg.flow.kernel)?;
        let mu_star = DiscreteMeasure::with_mask(outcome.z_star.clone(), inputs.z_mask.clone())?;
        let pl = match pl_ratio(&tcfg.flow.kernel, &mu_star, tcfg.pl_samples, derive_seed(run.seed, &[10, t as u64])) {
            Ok(v) => v,
            Err(Error::AllTermsSkipped) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        series.push(DiagnosticRow {
            t,
            eps_t: eps_t(t),
            pl_ratio: pl,
            grad_discrepancy_ratio: grad_discrepancy_ratio(&problem, &outcome.z_star, &mu_star, t)?,
            theorem_ratio: theorem_ratio(&norms, t)?,
        });
    }
    series.write_csv(out.join("diagnostics.csv"))?;
    println!("{:>4} {:>12} {:>12} {:>12}", "t", "pl", "grad_disc", "theorem");
    for r in &series.rows {
        println!("{:>4} {:>12.4e} {:>12.4e} {:>12.4e}", r.t, r.pl_ratio, r.grad_discrepancy_ratio, r.theorem_ratio);
    }
    if !series.all_finite() {
        return Err(Failure {
            code: 1,
            msg: "non-finite diagnostic values".into(),
        });
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, config: &Path, out: &Path) -> CmdResult {
    let run = RunConfig::load(config)?;
    write_manifest(out, "eval", run.seed, &run)?;
    let params = load_checkpoint(checkpoint)?;
    let (run, tr, te) = load_run(config, None)?;
    let tcfg = run.train_config()?;
    let data = prepare(if te.is_empty() { &tr } else { &te }, &tcfg)?;
    let m = evaluate(&params, &data, &tcfg)?;
    print_metrics("eval", &m);
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("samples,{}\nmean_loss,{:?}\n", m.samples, m.mean_loss));
    for (k, v) in [("accuracy", m.accuracy), ("half_mmd_sq", m.mmd_half), ("w2_free", m.w2_free), ("w2_full", m.w2_full)] {
        if let Some(v) = v {
            csv.push_str(&format!("{k},{v:?}\n"));
        }
    }
    write(&out.join("metrics.csv"), csv)?;
    write_report(out, &m)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::TrainClassify { config, out } => cmd_train(&config, &out, TaskKind::Classify),
        Command::TrainComplete { config, out } => cmd_train(&config, &out, TaskKind::Complete),
        Command::RotateFlow {
            angle_div,
            iters,
            eta,
            decay,
            n,
            seed,
            out,
        } => cmd_rotate(
            RotateConfig {
                angle_div,
                iters,
                eta,
                decay,
                n,
                seed,
            },
            &out,
        ),
        Command::Gradcheck { preset, out } => cmd_gradcheck(&preset, &out),
        Command::Diagnose {
            checkpoint,
            config,
            samples,
            out,
        } => cmd_diagnose(&checkpoint, &config, samples, &out),
        Command::Eval { checkpoint, config, out } => cmd_eval(&checkpoint, &config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
