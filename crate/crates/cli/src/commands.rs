//! Subcommand dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use kamdesk::kam_engine::{
    extract_torus, ode_validate, run_iteration, sample_lines, schedule, toeplitz_check, toeplitz_constant, birkhoff_second_derivative, KamConfig,
    KamState,
};
use kamdesk::lattice_resonance::{search_admissible_with, verify_admissible, SearchConfig, Site, TangentialSet};
use kamdesk::measure_estimator::{excluded_measures, gamma_scaling_fit, MeasureContext};
use kamdesk::normal_form::{build_normal_form_with, check_a1_a2, classify_sites, galerkin_modes, BuildConfig, Parameters};

use crate::config::RunConfig;
use crate::report::{to_stable_csv, to_stable_json, write_file, Format};

#[derive(Parser, Debug)]
#[command(name = "kamdesk", version, about = "Desk-scale KAM workbench for the cubic NLS on T²")]
pub struct Cli {
    /// TOML configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Random search for an admissible tangential set.
    Admissible(#[command(flatten)] RunConfig),
    /// Resonant pairs of a tangential set in a window.
    Resonances(#[command(flatten)] RunConfig),
    /// Birkhoff normal form on the Galerkin disk.
    NormalForm(#[command(flatten)] RunConfig),
    /// KAM iteration; CSV of the ε trajectory.
    KamRun(#[command(flatten)] RunConfig),
    /// Monte-Carlo excluded measure.
    Measure(#[command(flatten)] RunConfig),
    /// Galerkin ODE frequency check and Töplitz–Lipschitz lines.
    Validate(#[command(flatten)] RunConfig),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Admissible(_) => "admissible",
            Command::Resonances(_) => "resonances",
            Command::NormalForm(_) => "normal-form",
            Command::KamRun(_) => "kam-run",
            Command::Measure(_) => "measure",
            Command::Validate(_) => "validate",
        }
    }

    fn flags(&self) -> &RunConfig {
        match self {
            Command::Admissible(c) | Command::Resonances(c) | Command::NormalForm(c) | Command::KamRun(c) | Command::Measure(c) | Command::Validate(c) => c,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Failure {
    pub module: String,
    pub condition: String,
    pub message: String,
}

impl Failure {
    fn new(module: &str, condition: &str, message: impl ToString) -> Self {
        Failure { module: module.into(), condition: condition.into(), message: message.to_string() }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a Failure,
}

pub fn error_json(f: &Failure) -> String {
    to_stable_json(&ErrorReport { error: f }).unwrap_or_else(|_| format!("{{\"error\": {{\"message\": {:?}}}}}\n", f.message))
}

fn report_err(e: crate::report::ReportError) -> Failure {
    Failure::new("cli", "io", e)
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Failure::new("cli", "invalid_parameter", format!("{name} must be positive and finite, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<f64, Failure> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Failure::new("cli", "invalid_parameter", format!("{name} must be nonnegative and finite, got {v}")))
    }
}

fn at_least<T: PartialOrd + std::fmt::Display + Copy>(name: &str, v: T, lo: T) -> Result<T, Failure> {
    if v >= lo {
        Ok(v)
    } else {
        Err(Failure::new("cli", "invalid_parameter", format!("{name} must be >= {lo}, got {v}")))
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn sites(&self) -> Result<TangentialSet, Failure> {
        let raw = self.cfg.sites.clone().unwrap_or(vec![[1, 2], [3, 1]]);
        TangentialSet::new(raw.into_iter().map(Site::from).collect()).map_err(|e| Failure::new("lattice_resonance", "invalid_sites", e))
    }

    fn params(&self, s: &TangentialSet, eps_default: f64) -> Result<Parameters, Failure> {
        let xi = self.cfg.xi.clone().unwrap_or_else(|| [1.3, 1.7, 1.5, 1.1].iter().cycle().take(s.b()).copied().collect());
        for &x in &xi {
            positive("xi", x)?;
        }
        if xi.len() != s.b() {
            return Err(Failure::new("cli", "invalid_parameter", format!("xi has {} entries for {} sites", xi.len(), s.b())));
        }
        let eps = positive("eps", self.cfg.eps.unwrap_or(eps_default))?;
        let bx = self.xi_box()?;
        Ok(Parameters::new(xi, eps, bx))
    }

    fn xi_box(&self) -> Result<(f64, f64), Failure> {
        let b = self.cfg.xi_box.clone().unwrap_or(vec![1.0, 2.0]);
        if b.len() != 2 || !(b[0] > 0.0 && b[1] > b[0] && b[1].is_finite()) {
            return Err(Failure::new("cli", "invalid_parameter", format!("box must be lo,hi with 0 < lo < hi, got {b:?}")));
        }
        Ok((b[0], b[1]))
    }

    fn write(&self, name: &str, text: &str) -> Result<String, Failure> {
        let p = self.out.join(name);
        write_file(&p, text).map_err(report_err)?;
        Ok(p.display().to_string())
    }

    fn format(&self, default: Format) -> Format {
        self.cfg.format.unwrap_or(default)
    }

    /// Writes `rows` as CSV or JSON, plus `summary` as JSON; returns the summary text.
    fn emit<R: Serialize, S: Serialize>(&self, stem: &str, rows: &[R], columns: Option<&[&str]>, summary: &S, default: Format) -> Result<String, Failure> {
        match self.format(default) {
            Format::Csv => {
                let csv = to_stable_csv(rows, columns).map_err(report_err)?;
                self.write(&format!("{stem}.csv"), &csv)?;
            }
            Format::Json => {
                let j = to_stable_json(rows).map_err(report_err)?;
                self.write(&format!("{stem}_rows.json"), &j)?;
            }
        }
        let text = to_stable_json(summary).map_err(report_err)?;
        self.write(&format!("{stem}.json"), &text)?;
        Ok(text)
    }
}

fn admissible(c: &Ctx) -> Result<String, Failure> {
    let b = at_least("b", c.cfg.b.unwrap_or(2), 2)?;
    let bound = at_least("bound", c.cfg.bound.unwrap_or(10), 1)?;
    let check = at_least("check_bound", c.cfg.check_bound.unwrap_or(60), 1)?;
    let seed = c.cfg.seed.unwrap_or(0);
    let (s, rep) = search_admissible_with(b, bound, seed, SearchConfig { check_bound: check, ..SearchConfig::default() })
        .map_err(|e| Failure::new("lattice_resonance", "search_failed", e))?;
    #[derive(Serialize)]
    struct Out<'a> {
        sites: &'a [Site],
        certificate: &'a kamdesk::lattice_resonance::AdmissibilityReport,
        seed: u64,
    }
    let text = to_stable_json(&Out { sites: &s.sites, certificate: &rep, seed }).map_err(report_err)?;
    c.write("admissible.json", &text)?;
    Ok(text)
}

fn resonances(c: &Ctx) -> Result<String, Failure> {
    let s = c.sites()?;
    let bound = at_least("bound", c.cfg.bound.unwrap_or(10), 1)?;
    let check = at_least("check_bound", c.cfg.check_bound.unwrap_or(60), 1)?;
    let rep = verify_admissible(&s, check).map_err(|e| Failure::new("lattice_resonance", "verify_failed", e))?;
    let sites: Vec<Site> = galerkin_modes(bound).into_iter().filter(|n| !s.contains(*n)).collect();
    let maps = classify_sites(&s, &sites).map_err(|e| Failure::new("normal_form", "classify_failed", e))?;
    #[derive(Serialize)]
    struct Row {
        kind: &'static str,
        n: Site,
        m: Site,
        i: Site,
        j: Site,
    }
    let mut rows = Vec::new();
    for (kind, map) in [("first", &maps.l1), ("second", &maps.l2)] {
        for p in map.values() {
            rows.push(Row { kind, n: p.n, m: p.m, i: p.i, j: p.j });
        }
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        sites: &'a [Site],
        window: i64,
        first_type: usize,
        second_type: usize,
        admissibility: &'a kamdesk::lattice_resonance::AdmissibilityReport,
    }
    let summary = Summary { sites: &s.sites, window: bound, first_type: maps.l1.len(), second_type: maps.l2.len(), admissibility: &rep };
    c.emit("resonances", &rows, Some(&["kind", "n", "m", "i", "j"]), &summary, Format::Csv)
}

fn build_cfg(c: &Ctx, mode_default: i64) -> Result<BuildConfig, Failure> {
    Ok(BuildConfig {
        mode_bound: at_least("mode_bound", c.cfg.mode_bound.unwrap_or(mode_default), 1)?,
        degree_bound: at_least("degree_bound", c.cfg.degree_bound.unwrap_or(4), 2)?,
        check_bound: at_least("check_bound", c.cfg.check_bound.unwrap_or(60), 1)?,
        ..BuildConfig::default()
    })
}

fn normal_form(c: &Ctx) -> Result<String, Failure> {
    let s = c.sites()?;
    let p = c.params(&s, 1e-2)?;
    let cfg = build_cfg(c, 8)?;
    let build = build_normal_form_with(&p, &s, cfg).map_err(|e| Failure::new("normal_form", "build_failed", e))?;
    let a12 = check_a1_a2(&p, &s).map_err(|e| Failure::new("normal_form", "a1a2_failed", e))?;
    #[derive(Serialize)]
    struct Out<'a> {
        state: &'a kamdesk::normal_form::NormalFormState,
        nondegeneracy: &'a kamdesk::normal_form::A1A2Report,
        p_terms: usize,
        birkhoff_terms: usize,
        mode_bound: i64,
    }
    let text = to_stable_json(&Out { state: &build.state, nondegeneracy: &a12, p_terms: build.p.len(), birkhoff_terms: build.birkhoff.len(), mode_bound: cfg.mode_bound })
        .map_err(report_err)?;
    c.write("normal_form.json", &text)?;
    Ok(text)
}

fn kam_state(c: &Ctx, eps_default: f64, s0_default: f64, mode_default: i64) -> Result<KamState, Failure> {
    let s = c.sites()?;
    let p = c.params(&s, eps_default)?;
    let cfg = build_cfg(c, mode_default)?;
    let build = build_normal_form_with(&p, &s, cfg).map_err(|e| Failure::new("normal_form", "build_failed", e))?;
    let r0 = positive("r0", c.cfg.r0.unwrap_or(1.0))?;
    let s0 = positive("s0", c.cfg.s0.unwrap_or(s0_default))?;
    let k0 = at_least("K0", c.cfg.k0.unwrap_or(5), 1)?;
    let gamma = nonneg("gamma", c.cfg.gamma.unwrap_or(1e-3))?;
    let tau = nonneg("tau", c.cfg.tau.unwrap_or(1.0))?;
    KamState::new(&build, r0, s0, k0, gamma, tau).map_err(|e| Failure::new("kam_engine", "invalid_state", e))
}

fn kam_run(c: &Ctx) -> Result<String, Failure> {
    let state = kam_state(c, 5e-5, 5e-5, 8)?;
    let steps = at_least("steps", c.cfg.steps.unwrap_or(3), 1)?;
    let lie_order = at_least("lie_order", c.cfg.lie_order.unwrap_or(3), 1)?;
    let cfg = KamConfig { lie_order, ..KamConfig::default() };
    let (rep, fin) = run_iteration(&state, steps, &cfg);
    #[derive(Serialize)]
    struct Summary<'a> {
        iteration: &'a kamdesk::kam_engine::IterationReport,
        base: &'a kamdesk::kam_engine::ScheduleBase,
        target_schedule: Vec<kamdesk::kam_engine::ScheduleParams>,
        omega_final: Vec<f64>,
    }
    let target: Vec<_> = (0..=rep.steps.len()).map(|nu| schedule(nu, &state.base)).collect();
    let summary = Summary { iteration: &rep, base: &state.base, target_schedule: target, omega_final: fin.normal.omega() };
    let cols = [
        "nu", "K", "eps_before", "eps_after", "contraction_exponent_estimate", "divisor_flags", "F_norm", "remainder_norm", "pruned_mass",
        "omega_shift", "omega_ok", "p011_weighted", "p011_ok", "smallest_divisor", "r_terms", "f_terms", "p_terms",
    ];
    let text = c.emit("kam_steps", &rep.steps, Some(&cols), &summary, Format::Csv)?;
    if let Some(msg) = &rep.aborted {
        return Err(Failure::new("kam_engine", "aborted", msg));
    }
    Ok(text)
}

fn measure(c: &Ctx) -> Result<String, Failure> {
    let s = c.sites()?;
    let eps = positive("eps", c.cfg.eps.unwrap_or(1e-2))?;
    let bx = c.xi_box()?;
    let mode_bound = at_least("mode_bound", c.cfg.mode_bound.unwrap_or(8), 1)?;
    let k = at_least("K", c.cfg.k.unwrap_or(10), 1)?;
    let tau = nonneg("tau", c.cfg.tau.unwrap_or(1.0))?;
    let samples = at_least("samples", c.cfg.samples.unwrap_or(10_000), 1000)?;
    let seed = c.cfg.seed.unwrap_or(1);
    let gammas = c.cfg.gammas.clone().unwrap_or(vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2]);
    for &g in &gammas {
        nonneg("gamma", g)?;
    }
    let ctx = MeasureContext::new(&s, eps, bx, mode_bound, k).map_err(|e| Failure::new("measure_estimator", "context_failed", e))?;
    let est = excluded_measures(&ctx, &gammas, tau, samples, seed).map_err(|e| Failure::new("measure_estimator", "sampling_failed", e))?;
    let fit = gamma_scaling_fit(&est, &gammas);
    #[derive(Serialize)]
    struct Summary<'a> {
        estimates: &'a [kamdesk::measure_estimator::MeasureEstimate],
        fitted_exponent: Option<f64>,
        fitted_constant: Option<f64>,
        fit_error: Option<String>,
        spec_count: usize,
        mode_bound: i64,
    }
    let (fe, fc, ferr) = match fit {
        Ok((a, b)) => (Some(a), Some(b), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let summary = Summary { estimates: &est, fitted_exponent: fe, fitted_constant: fc, fit_error: ferr, spec_count: ctx.specs.len(), mode_bound };
    c.emit("measure", &est, Some(&["gamma", "K", "tau", "samples", "fraction", "ci95"]), &summary, Format::Csv)
}

fn validate(c: &Ctx) -> Result<String, Failure> {
    let state = kam_state(c, 0.1, 1e-2, 5)?;
    let steps = c.cfg.steps.unwrap_or(1);
    let lie_order = at_least("lie_order", c.cfg.lie_order.unwrap_or(3), 1)?;
    let (rep, fin) = run_iteration(&state, steps, &KamConfig { lie_order, divergence_factor: f64::INFINITY, ..KamConfig::default() });
    let torus = extract_torus(&fin);
    let t_final = positive("t_final", c.cfg.t_final.unwrap_or(1000.0))?;
    let dt = positive("dt", c.cfg.dt.unwrap_or(0.01))?;
    let mode_bound = fin.normal.modes.sites().iter().chain(&fin.tangential.sites).map(|s| s.norm().ceil() as i64).max().unwrap_or(1);
    let ode = ode_validate(&torus, mode_bound, t_final, dt).map_err(|e| Failure::new("kam_engine", "ode_failed", e))?;
    let lines = sample_lines(&fin.tangential, 50, false, 5, c.cfg.seed.unwrap_or(7));
    let tl = toeplitz_check(&birkhoff_second_derivative(&fin.tangential, &fin.xi), &lines, 100);
    let max_offset = ode.refined_frequencies.iter().zip(&ode.unperturbed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    #[derive(Serialize)]
    struct Summary<'a> {
        kam_steps: usize,
        ode: &'a kamdesk::kam_engine::OdeReport,
        max_frequency_offset: f64,
        toeplitz_worst_constant: f64,
        toeplitz_bound: f64,
        eps_trajectory: Vec<f64>,
    }
    let summary = Summary {
        kam_steps: rep.steps.len(),
        ode: &ode,
        max_frequency_offset: max_offset,
        toeplitz_worst_constant: tl.worst_constant,
        toeplitz_bound: toeplitz_constant(&fin.xi),
        eps_trajectory: rep.steps.iter().map(|s| s.eps_after).collect(),
    };
    let text = to_stable_json(&summary).map_err(report_err)?;
    c.write("validate.json", &text)?;
    Ok(text)
}

pub const USAGE: &str = "usage: kamdesk <admissible|resonances|normal-form|kam-run|measure|validate> [--config FILE] [flags]\n       kamdesk --help";

/// Runs one invocation; returns the exit status. Reports go to the output directory,
/// the main report to stdout, and failures to stderr as JSON.
pub fn run(argv: Vec<String>) -> i32 {
    if argv.len() <= 1 {
        eprintln!("{USAGE}");
        return 2;
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let kind = match e.kind() {
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => "unknown_subcommand",
                _ => "malformed_arguments",
            };
            eprint!("{}", error_json(&Failure::new("cli", kind, e.to_string().trim())));
            return 2;
        }
    };
    let name = cli.command.name();
    let file = match &cli.config {
        Some(p) => match RunConfig::from_toml(p) {
            Ok(c) => c,
            Err(msg) => {
                eprint!("{}", error_json(&Failure::new("cli", "malformed_config", msg)));
                return 2;
            }
        },
        None => RunConfig::default(),
    };
    let cfg = file.overridden_by(cli.command.flags());
    if let Some(t) = cli.threads {
        if t == 0 {
            eprint!("{}", error_json(&Failure::new("cli", "invalid_parameter", "threads must be >= 1")));
            return 2;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let ctx = Ctx { cfg, out };
    let res = match &cli.command {
        Command::Admissible(_) => admissible(&ctx),
        Command::Resonances(_) => resonances(&ctx),
        Command::NormalForm(_) => normal_form(&ctx),
        Command::KamRun(_) => kam_run(&ctx),
        Command::Measure(_) => measure(&ctx),
        Command::Validate(_) => validate(&ctx),
    };
    match res {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(f) => {
            let code = if f.module == "cli" { 2 } else { 1 };
            eprint!("{}", error_json(&Failure { condition: format!("{}: {}", name, f.condition), ..f }));
            code
        }
    }
}
