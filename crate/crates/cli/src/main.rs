// `!(x > 0.0)` validation guards are deliberate: unlike `x <= 0.0` they
// also reject NaN coming out of the parsed configuration.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Config-driven batch front end for the separated-expansion solver.
//!
//! Subcommands cover the full workflow: `solve` builds the expansion,
//! `update` re-solves coefficients on the frozen basis for a fresh sample
//! set, `mcs` produces full-order reference histories, `compare` writes
//! error tables and density curves, `restart` extends a saved expansion,
//! and `kl-info` reports truncated covariance expansions.
//!
//! Exit codes: 0 success, 1 error, 2 solve/restart hit the term limit
//! before the requested accuracy.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{build_problem, parse_config, BuiltProblem, RunConfig};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use stolatin::{
    l2_error, load_ensemble, load_state, pdf_estimate, pdf_estimate_with_support, project_samples,
    run_mcs, save_ensemble, save_reduced, save_state, solve, update_stage, write_convergence_log,
    write_error_table, write_pdf_curves, EnsembleResult, Error, LatinState, McsOptions,
    PdfEstimate, ReducedSolution, Result, StopReason,
};

#[derive(Parser)]
#[command(
    name = "stolatin",
    version,
    about = "Separated-expansion solver for elastoplastic problems with random inputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the separated expansion for the configured problem.
    Solve(CommonArgs),
    /// Re-solve time-stochastic coefficients on a saved basis for a fresh
    /// sample set.
    Update(StateArgs),
    /// Full-order Monte Carlo reference histories at the watched dofs.
    Mcs(CommonArgs),
    /// Error tables and density curves of reduced results against a
    /// reference ensemble.
    Compare(CompareArgs),
    /// Extend a saved expansion toward the configured tolerance.
    Restart(StateArgs),
    /// Report the truncated expansions behind spatially varying fields.
    KlInfo(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Saved expansion directory (default: <out>/state).
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Saved expansion directory, or a second ensemble to compare
    /// directly (default: <out>/state).
    #[arg(long)]
    state: Option<PathBuf>,
    /// Reference ensemble directory (default: <out>/ensemble).
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

fn main() {
    // Die quietly when stdout closes early (e.g. piped into `head`) the
    // way other command-line filters do, instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Solve(args) => cmd_solve(&args),
        Command::Update(args) => cmd_update(&args),
        Command::Mcs(args) => cmd_mcs(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Restart(args) => cmd_restart(&args),
        Command::KlInfo(args) => cmd_kl_info(&args),
    }
}

/// Configuration plus the resolved output directory.
struct Ctx {
    cfg: RunConfig,
    cfg_text: String,
    out: PathBuf,
}

fn load_ctx(args: &CommonArgs) -> Result<Ctx> {
    let cfg_text = fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&cfg_text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::IllPosed(format!("thread pool: {e}")))?;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok(Ctx { cfg, cfg_text, out })
}

/// Exclusive-create lock file that guards a directory against concurrent
/// runs; removed when the guard drops.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::IllPosed(
                format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn stop_name(reason: StopReason) -> &'static str {
    match reason {
        StopReason::Tolerance => "tolerance reached",
        StopReason::BasisExhausted => "basis exhausted",
        StopReason::TermLimit => "term limit reached",
    }
}

/// 0 when the expansion met its target (or cannot grow further), 2 when
/// the term limit cut the run short of the requested accuracy.
fn solve_exit(state: &LatinState, eps_u: f64) -> i32 {
    match state.stop_reason {
        StopReason::Tolerance | StopReason::BasisExhausted => 0,
        StopReason::TermLimit => {
            let last = state.eps_u_log.last().copied().unwrap_or(f64::INFINITY);
            if last <= eps_u {
                0
            } else {
                2
            }
        }
    }
}

fn write_convergence_csv(dir: &Path, state: &LatinState) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("convergence.csv"))?);
    write_convergence_log(&mut w, state)?;
    w.flush()?;
    Ok(())
}

fn report_state(state: &LatinState, dir: &Path) {
    println!("terms: {}", state.k());
    println!("stop: {}", stop_name(state.stop_reason));
    if let Some(last) = state.eps_u_log.last() {
        println!("indicator: {last:.3e}");
    }
    println!("state: {}", dir.display());
}

fn cmd_solve(args: &CommonArgs) -> Result<i32> {
    let ctx = load_ctx(args)?;
    let built = build_problem(&ctx.cfg)?;
    let n_s1 = ctx.cfg.iteration_samples(&built.problem);
    let samples = built.problem.draw_samples(n_s1, ctx.cfg.seed)?;
    let _lock = Lock::acquire(&ctx.out)?;
    let opts = ctx.cfg.solver_options();
    let mut state = solve(&built.problem, samples, &opts)?;
    state.config_snapshot = ctx.cfg_text.clone();
    let state_dir = ctx.out.join("state");
    save_state(&state_dir, &state)?;
    write_convergence_csv(&state_dir, &state)?;
    report_state(&state, &state_dir);
    Ok(solve_exit(&state, ctx.cfg.solver.eps_u))
}

fn require_n_s2(cfg: &RunConfig) -> Result<usize> {
    if cfg.solver.n_s2 == 0 {
        return Err(Error::IllPosed(
            "solver.n_s2 must be at least 1 for this command".into(),
        ));
    }
    Ok(cfg.solver.n_s2)
}

fn cmd_update(args: &StateArgs) -> Result<i32> {
    let ctx = load_ctx(&args.common)?;
    let built = build_problem(&ctx.cfg)?;
    let n_s2 = require_n_s2(&ctx.cfg)?;
    let state_dir = args
        .state
        .clone()
        .unwrap_or_else(|| ctx.out.join("state"));
    let _lock = Lock::acquire(&ctx.out)?;
    let state = load_state(&state_dir)?;
    // Fresh samples, decoupled from the iteration set by a shifted seed.
    let samples = built.problem.draw_samples(n_s2, ctx.cfg.seed + 1)?;
    let red = update_stage(&built.problem, &state, &samples, &ctx.cfg.update_options())?;
    let red_dir = ctx.out.join("reduced");
    save_reduced(&red_dir, &red)?;
    let mut w = std::io::BufWriter::new(fs::File::create(ctx.out.join("update_summary.csv"))?);
    writeln!(w, "sample,converged,iterations")?;
    for s in 0..red.n_samples() {
        writeln!(w, "{s},{},{}", red.converged[s], red.iterations[s])?;
    }
    w.flush()?;
    let n_conv = red.converged.iter().filter(|&&c| c).count();
    println!("samples: {} converged: {n_conv}", red.n_samples());
    println!("reduced: {}", red_dir.display());
    Ok(0)
}

fn cmd_mcs(args: &CommonArgs) -> Result<i32> {
    let ctx = load_ctx(args)?;
    let built = build_problem(&ctx.cfg)?;
    let n_s2 = require_n_s2(&ctx.cfg)?;
    let samples = built.problem.draw_samples(n_s2, ctx.cfg.seed + 1)?;
    let tracked = ctx.cfg.tracked_dofs(&built.problem)?;
    let _lock = Lock::acquire(&ctx.out)?;
    let opts = McsOptions {
        eps_newton: ctx.cfg.solver.eps_newton,
        max_newton: ctx.cfg.solver.max_newton,
        ..McsOptions::default()
    };
    let ens = run_mcs(&built.problem, &samples, &tracked, &opts)?;
    let ens_dir = ctx.out.join("ensemble");
    save_ensemble(&ens_dir, &ens)?;
    let n_conv = ens.converged.iter().filter(|&&c| c).count();
    let n_yield = ens.yielded.iter().filter(|&&y| y).count();
    println!(
        "samples: {} converged: {n_conv} yielded: {n_yield}",
        ens.n_samples()
    );
    println!("ensemble: {}", ens_dir.display());
    Ok(0)
}

enum Candidate {
    State(Box<LatinState>),
    Ensemble(Box<EnsembleResult>),
}

fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    let ctx = load_ctx(&args.common)?;
    let built = build_problem(&ctx.cfg)?;
    let ens_dir = args
        .ensemble
        .clone()
        .unwrap_or_else(|| ctx.out.join("ensemble"));
    let ens = load_ensemble(&ens_dir)?;
    let state_dir = args
        .state
        .clone()
        .unwrap_or_else(|| ctx.out.join("state"));
    let candidate = match load_state(&state_dir) {
        Ok(state) => Candidate::State(Box::new(state)),
        Err(Error::Integrity(msg)) => match load_ensemble(&state_dir) {
            Ok(other) => Candidate::Ensemble(Box::new(other)),
            Err(_) => return Err(Error::Integrity(msg)),
        },
        Err(e) => return Err(e),
    };
    if ens.n_steps() != built.problem.n_steps() {
        return Err(Error::DimensionMismatch(format!(
            "ensemble has {} steps, configuration asks for {}",
            ens.n_steps(),
            built.problem.n_steps()
        )));
    }
    let _lock = Lock::acquire(&ctx.out)?;

    let n_s = ens.n_samples();
    let n_t = ens.n_steps();
    let n_j = ens.tracked_dofs.len();
    let reference_series = |s: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n_t * n_j);
        for t in 0..n_t {
            for j in 0..n_j {
                out.push(ens.get(s, t, j));
            }
        }
        out
    };

    let mut with_update = vec![f64::NAN; n_s];
    let mut without_update = vec![f64::NAN; n_s];
    let mut skipped = 0usize;
    let red: Option<ReducedSolution>;

    match candidate {
        Candidate::Ensemble(other) => {
            if other.n_steps() != n_t || other.tracked_dofs != ens.tracked_dofs {
                return Err(Error::DimensionMismatch(
                    "candidate ensemble tracks different dofs or steps than the reference".into(),
                ));
            }
            if other.n_samples() != n_s {
                return Err(Error::DimensionMismatch(format!(
                    "candidate has {} samples, reference {n_s}",
                    other.n_samples()
                )));
            }
            println!("candidate is an ensemble; both error columns are the direct error");
            for s in 0..n_s {
                if !(ens.converged[s] && other.converged[s]) {
                    skipped += 1;
                    continue;
                }
                let mut cand = Vec::with_capacity(n_t * n_j);
                for t in 0..n_t {
                    for j in 0..n_j {
                        cand.push(other.get(s, t, j));
                    }
                }
                match l2_error(&reference_series(s), &cand) {
                    Ok(e) => {
                        with_update[s] = e;
                        without_update[s] = e;
                    }
                    Err(_) => {
                        log::warn!("sample {s}: reference trajectory is zero, skipped");
                        skipped += 1;
                    }
                }
            }
            red = None;
        }
        Candidate::State(state) => {
            if ctx.cfg.tracked_dofs(&built.problem)? != ens.tracked_dofs {
                return Err(Error::DimensionMismatch(
                    "ensemble tracks different dofs than the configuration".into(),
                ));
            }
            let reduced =
                update_stage(&built.problem, &state, &ens.samples, &ctx.cfg.update_options())?;
            let coeffs = project_samples(
                &built.problem,
                &state,
                &ens.samples,
                &ctx.cfg.solver_options(),
            )?;
            for s in 0..n_s {
                if !ens.converged[s] {
                    skipped += 1;
                    continue;
                }
                let reference = reference_series(s);
                if reduced.converged[s] {
                    let mut cand = Vec::with_capacity(n_t * n_j);
                    for t in 0..n_t {
                        for &dof in &ens.tracked_dofs {
                            let mut v = 0.0;
                            for l in 0..reduced.k() {
                                v += reduced.coeff(s, t, l) * reduced.basis[l][dof];
                            }
                            cand.push(v);
                        }
                    }
                    match l2_error(&reference, &cand) {
                        Ok(e) => with_update[s] = e,
                        Err(_) => log::warn!("sample {s}: reference trajectory is zero"),
                    }
                } else {
                    log::warn!("sample {s}: reduced solve did not converge, skipped");
                }
                let mut cand = Vec::with_capacity(n_t * n_j);
                for t in 0..n_t {
                    for &dof in &ens.tracked_dofs {
                        let mut v = 0.0;
                        for (l, trip) in state.triplets.iter().enumerate() {
                            v += coeffs[(s, l)] * trip.profile[t] * trip.shape[dof];
                        }
                        cand.push(v);
                    }
                }
                if let Ok(e) = l2_error(&reference, &cand) {
                    without_update[s] = e;
                }
                if with_update[s].is_nan() && without_update[s].is_nan() {
                    skipped += 1;
                }
            }
            red = Some(reduced);
        }
    }

    let mut w = std::io::BufWriter::new(fs::File::create(ctx.out.join("errors.csv"))?);
    write_error_table(&mut w, &with_update, &without_update)?;
    w.flush()?;

    let finite = |xs: &[f64]| -> Vec<f64> { xs.iter().copied().filter(|x| x.is_finite()).collect() };
    let wu = finite(&with_update);
    let wo = finite(&without_update);
    if !wu.is_empty() {
        println!(
            "with update:    median {:.3e} max {:.3e} over {} samples",
            median(&wu),
            wu.iter().cloned().fold(0.0, f64::max),
            wu.len()
        );
    }
    if !wo.is_empty() {
        println!(
            "without update: median {:.3e} max {:.3e} over {} samples",
            median(&wo),
            wo.iter().cloned().fold(0.0, f64::max),
            wo.len()
        );
    }
    let both: Vec<usize> = (0..n_s)
        .filter(|&s| with_update[s].is_finite() && without_update[s].is_finite())
        .collect();
    if !both.is_empty() {
        let better = both
            .iter()
            .filter(|&&s| with_update[s] <= without_update[s])
            .count();
        println!(
            "update at least as accurate for {better} of {} samples",
            both.len()
        );
    }
    if skipped > 0 {
        println!("skipped: {skipped} samples");
    }
    println!("errors: {}", ctx.out.join("errors.csv").display());

    write_pdf_outputs(&ctx, &ens, red.as_ref())?;
    Ok(0)
}

/// Density curves (reference vs reduced values) at the configured time
/// steps, evaluated on a shared support so curves can be overlaid.
fn write_pdf_outputs(
    ctx: &Ctx,
    ens: &EnsembleResult,
    red: Option<&ReducedSolution>,
) -> Result<()> {
    if ctx.cfg.output.pdf_steps.is_empty() {
        return Ok(());
    }
    let n_t = ens.n_steps();
    let dof = match ens.tracked_dofs.first() {
        Some(&d) => d,
        None => return Ok(()),
    };
    let keep: Vec<usize> = (0..ens.n_samples()).filter(|&s| ens.converged[s]).collect();
    if keep.len() < 30 {
        log::warn!(
            "density curves need at least 30 converged samples, have {}",
            keep.len()
        );
        return Ok(());
    }
    let mut curves: Vec<(String, PdfEstimate)> = Vec::new();
    for &step in &ctx.cfg.output.pdf_steps {
        if step >= n_t {
            return Err(Error::IllPosed(format!(
                "output.pdf_steps entry {step} outside the grid (0..{n_t})"
            )));
        }
        let reference: Vec<f64> = keep.iter().map(|&s| ens.get(s, step, 0)).collect();
        let base = match pdf_estimate(&reference, 401) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("step {step}: density skipped ({e})");
                continue;
            }
        };
        if let Some(red) = red {
            let vals: Vec<f64> = keep
                .iter()
                .filter(|&&s| red.converged[s])
                .map(|&s| {
                    (0..red.k())
                        .map(|l| red.coeff(s, step, l) * red.basis[l][dof])
                        .sum::<f64>()
                })
                .collect();
            if vals.len() >= 30 {
                match pdf_estimate_with_support(&vals, base.support.clone()) {
                    Ok(p) => curves.push((format!("with_update_t{step}"), p)),
                    Err(e) => log::warn!("step {step}: reduced density skipped ({e})"),
                }
            }
        }
        curves.push((format!("reference_t{step}"), base));
    }
    if curves.is_empty() {
        return Ok(());
    }
    let mut w = std::io::BufWriter::new(fs::File::create(ctx.out.join("pdfs.csv"))?);
    let labeled: Vec<(&str, &PdfEstimate)> =
        curves.iter().map(|(l, p)| (l.as_str(), p)).collect();
    write_pdf_curves(&mut w, &labeled)?;
    w.flush()?;
    println!("pdfs: {}", ctx.out.join("pdfs.csv").display());
    Ok(())
}

fn median(sorted_src: &[f64]) -> f64 {
    let mut xs = sorted_src.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn cmd_restart(args: &StateArgs) -> Result<i32> {
    let ctx = load_ctx(&args.common)?;
    let built = build_problem(&ctx.cfg)?;
    let state_dir = args
        .state
        .clone()
        .unwrap_or_else(|| ctx.out.join("state"));
    let _lock = Lock::acquire(&state_dir)?;
    let state = load_state(&state_dir)?;
    let target = ctx.cfg.solver.eps_u;
    let last = state.eps_u_log.last().copied().unwrap_or(f64::INFINITY);
    match state.stop_reason {
        StopReason::Tolerance if last <= target => {
            println!("already converged (indicator {last:.3e} <= {target:.3e}); nothing to do");
            report_state(&state, &state_dir);
            return Ok(0);
        }
        StopReason::BasisExhausted => {
            log::warn!("expansion basis is exhausted; a restart cannot improve it");
            println!("basis exhausted at {} terms; nothing to do", state.k());
            report_state(&state, &state_dir);
            return Ok(0);
        }
        _ => {}
    }
    let mut state = stolatin::resume(&built.problem, state, &ctx.cfg.solver_options())?;
    state.config_snapshot = ctx.cfg_text.clone();
    save_state(&state_dir, &state)?;
    write_convergence_csv(&state_dir, &state)?;
    report_state(&state, &state_dir);
    Ok(solve_exit(&state, target))
}

fn cmd_kl_info(args: &CommonArgs) -> Result<i32> {
    let ctx = load_ctx(args)?;
    let BuiltProblem { kl_reports, .. } = build_problem(&ctx.cfg)?;
    if kl_reports.is_empty() {
        println!("no spatially varying fields in this configuration");
        return Ok(0);
    }
    let _lock = Lock::acquire(&ctx.out)?;
    let path = ctx.out.join("kl_info.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "field,mode,eigenvalue,ratio")?;
    for (name, kl) in &kl_reports {
        let total: f64 = kl.eigenvalues.iter().sum();
        println!(
            "{name}: {} modes, spectral tail {:.3e}",
            kl.n_terms(),
            kl.truncation
        );
        for (i, ev) in kl.eigenvalues.iter().enumerate() {
            writeln!(w, "{name},{},{:.17e},{:.17e}", i + 1, ev, ev / total)?;
        }
    }
    w.flush()?;
    println!("modes: {}", path.display());
    Ok(0)
}
