//! Command-line surface: `check`, `theory <sub>`, `train`, `sweep`.
//!
//! Exit codes: 0 success, 1 failed check or statistical test, 2 config
//! error, 3 runtime abort.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::curvature::{decompose, psd_check, CurvatureRecord};
use crate::diff::{
    analytic_hhat, fd_hessian, fd_output_hessian, ggn_vp, hhat_grad_product_cases, hvp, output_gradient, FdStep,
    DEFAULT_DENSE_CAP,
};
use crate::error::{Error, Result};
use crate::experiment::{prepare_run, sgd_train, width_sweep, Dataset, RunLog};
use crate::linalg::{relative_error, relative_frobenius};
use crate::loss::Batch;
use crate::network::{init_network, Architecture, Network};
use crate::rng::RngStream;
use crate::theory::{
    mc_bilinear_identity, mc_cross_sample, mc_grad_norm, mc_hhat_samples, multipliers, predicted_variance_scale,
    random_unit, thm2_bound, thm2_comparison, DeltaTable, McConfig, McSummary, Thm2Inputs,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "curvkit", version, about = "Curvature diagnostics for feedforward networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Oracle-equivalence suite on small networks.
    Check(CommonArgs),
    /// Monte Carlo checks at random initialization.
    Theory {
        #[arg(value_enum)]
        sub: TheorySub,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// SGD with curvature probes.
    Train(CommonArgs),
    /// Width x seed grid of training runs.
    Sweep(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TheorySub {
    Thm1,
    Thm2,
    Norm,
    Identities,
    Cross,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Check(c) | Command::Train(c) | Command::Sweep(c) => c,
            Command::Theory { common, .. } => common,
        }
    }

    fn name(&self) -> String {
        match self {
            Command::Check(_) => "check".into(),
            Command::Train(_) => "train".into(),
            Command::Sweep(_) => "sweep".into(),
            Command::Theory { sub, .. } => format!("theory {}", sub.to_possible_value().unwrap().get_name()),
        }
    }
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::UnsupportedActivation(_)
        | Error::Architecture(_)
        | Error::Capacity { .. }
        | Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let common = cli.command.common().clone();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(common.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot build thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli.command, &common)) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Context {
    cfg: RunConfig,
    raw: String,
    out: PathBuf,
    command: String,
    started: Instant,
    started_unix: u64,
}

fn dispatch(cmd: &Command, common: &CommonArgs) -> Result<bool> {
    let (mut cfg, raw) = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => (RunConfig::default(), String::new()),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out.directory = out.clone();
    }
    let ctx = Context {
        out: cfg.out.directory.clone(),
        cfg,
        raw,
        command: cmd.name(),
        started: Instant::now(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    match cmd {
        Command::Check(_) => cmd_check(&ctx),
        Command::Theory { sub, .. } => cmd_theory(&ctx, *sub),
        Command::Train(_) => cmd_train(&ctx),
        Command::Sweep(_) => cmd_sweep(&ctx),
    }
}

/// CSV text with a schema-version comment line and a header row.
pub struct Csv {
    text: String,
    cols: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = format!("# schema_version: {SCHEMA_VERSION}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text, cols: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.cols, "CSV row width");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

/// Shortest round-trip formatting.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn widths_cell(w: &[usize]) -> String {
    w.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-")
}

impl Context {
    fn prepare_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn write_csv(&self, name: &str, csv: &Csv, outputs: &mut Vec<String>) -> Result<()> {
        csv.write(&self.out.join(name))?;
        outputs.push(name.to_string());
        Ok(())
    }

    fn write_manifest(&self, seeds: serde_json::Value, outputs: &[String], extra: serde_json::Value) -> Result<()> {
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.cfg,
            "config_text": self.raw,
            "seeds": seeds,
            "started_unix": self.started_unix,
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
            "outputs": outputs,
            "details": extra,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(self.out.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    fn mc_config(&self, widths: &[usize]) -> Result<McConfig> {
        let arch = Architecture::new(widths.to_vec(), self.cfg.activation()?).map_err(|e| Error::Config(e.to_string()))?;
        let mut mc = McConfig::new(arch, self.cfg.mc.trials, self.cfg.mc.seed);
        mc.init = self.cfg.init_scheme()?;
        if mc.n_trials < 2 {
            return Err(Error::Config(format!("mc.trials must be at least 2, got {}", mc.n_trials)));
        }
        Ok(mc)
    }

    fn compare_cells(&self) -> Vec<Vec<usize>> {
        self.cfg
            .mc
            .compare_widths
            .clone()
            .unwrap_or_else(|| vec![self.cfg.arch.widths.clone()])
    }
}

struct CheckLine {
    name: &'static str,
    net: usize,
    value: f64,
    tol: f64,
}

impl CheckLine {
    fn passed(&self) -> bool {
        self.value <= self.tol
    }
}

fn cmd_check(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let arch = cfg.architecture()?;
    arch.require_single_output()?;
    arch.require_linear("the oracle suite (closed-form output Hessian)")?;
    let loss = cfg.loss()?;
    let p = arch.param_count();
    if p > 2000 {
        return Err(Error::Capacity { params: p, cap: 2000 });
    }
    let nets: Vec<Network> = match &cfg.arch.weights_file {
        Some(path) => vec![Network::load(path)?],
        None => (0..cfg.check.nets.max(1) as u64)
            .map(|i| init_network(&arch, cfg.init_scheme()?, &mut RngStream::new(cfg.init.seed, i).rng()))
            .collect::<Result<_>>()?,
    };
    ctx.prepare_out()?;
    let mut lines: Vec<CheckLine> = Vec::new();
    macro_rules! push {
        ($label:lifetime, $line:expr) => {{
            lines.push($line);
            if !lines.last().unwrap().passed() {
                break $label;
            }
        }};
    }
    // stops at the first failing line; later checks assume finite values
    'nets: for (k, net) in nets.iter().enumerate() {
        let mut rng = RngStream::new(cfg.data.seed, k as u64).rng();
        let n0 = net.arch().input_dim();
        let xs: Vec<Vec<f64>> = (0..cfg.check.batch.max(1)).map(|_| random_unit(n0, &mut rng)).collect();
        let ts: Vec<f64> = xs.iter().map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let batch = Batch::from_samples(&xs, &ts)?;
        let x = &xs[0];

        let hhat = analytic_hhat(net, x, DEFAULT_DENSE_CAP)?;
        let asym = hhat.max_asymmetry();
        let scale = hhat.max_abs();
        push!('nets, CheckLine {
            name: "hhat_symmetry",
            net: k,
            value: if !hhat.is_finite() {
                f64::INFINITY
            } else if asym == 0.0 {
                0.0
            } else {
                asym / scale
            },
            tol: 1e-10,
        });
        let fd_out = fd_output_hessian(net, x, FdStep::Auto, DEFAULT_DENSE_CAP)?;
        push!('nets, CheckLine {
            name: "hhat_vs_fd",
            net: k,
            value: relative_frobenius(&fd_out, &hhat),
            tol: 1e-5,
        });
        let g = output_gradient(net, x)?;
        push!('nets, CheckLine {
            name: "case_product_vs_dense",
            net: k,
            value: relative_error(&hhat_grad_product_cases(net, x)?, &hhat.matvec(&g.values)?),
            tol: 1e-10,
        });
        let dec = decompose(net, &batch, &loss, DEFAULT_DENSE_CAP)?;
        let fd_loss = fd_hessian(net, &batch, &loss, FdStep::Auto, DEFAULT_DENSE_CAP)?;
        push!('nets, CheckLine {
            name: "decomposition_vs_fd",
            net: k,
            value: relative_frobenius(&dec.hessian, &fd_loss),
            tol: 1e-4,
        });
        let psd = psd_check(&dec.g)?;
        push!('nets, CheckLine {
            name: "ggn_psd",
            net: k,
            value: (-psd.min_eigenvalue / psd.frobenius.max(f64::MIN_POSITIVE)).max(0.0),
            tol: 1e-8,
        });
        let (mut worst_h, mut worst_g) = (0.0f64, 0.0f64);
        for _ in 0..5 {
            let v: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            worst_h = worst_h.max(relative_error(&hvp(net, &batch, &loss, &v)?.values, &dec.hessian.matvec(&v)?));
            worst_g = worst_g.max(relative_error(&ggn_vp(net, &batch, &loss, &v)?.values, &dec.g.matvec(&v)?));
        }
        push!('nets, CheckLine {
            name: "hvp_vs_dense",
            net: k,
            value: worst_h,
            tol: 1e-4,
        });
        push!('nets, CheckLine {
            name: "ggn_vp_vs_dense",
            net: k,
            value: worst_g,
            tol: 1e-12,
        });
    }
    let mut csv = Csv::new(&["check", "net", "value", "tolerance", "passed"]);
    let mut report = String::new();
    for l in &lines {
        csv.row(&[l.name.into(), l.net.to_string(), num(l.value), num(l.tol), l.passed().to_string()]);
        writeln!(
            report,
            "{} {:<24} net {:<3} value {:.3e} (tol {:.0e})",
            if l.passed() { "PASS" } else { "FAIL" },
            l.name,
            l.net,
            l.value,
            l.tol
        )
        .unwrap();
    }
    print!("{report}");
    let mut outputs = Vec::new();
    ctx.write_csv("check.csv", &csv, &mut outputs)?;
    let failed = lines.iter().find(|l| !l.passed());
    if let Some(f) = failed {
        eprintln!("first failing check: {} (net {})", f.name, f.net);
    }
    ctx.write_manifest(
        json!({ "init": cfg.init.seed, "data": cfg.data.seed }),
        &outputs,
        json!({ "first_failure": failed.map(|f| f.name) }),
    )?;
    Ok(failed.is_none())
}

fn cmd_theory(ctx: &Context, sub: TheorySub) -> Result<bool> {
    let tol = &ctx.cfg.mc.tolerances;
    ctx.cfg.activation()?;
    ctx.prepare_out()?;
    let mut outputs = Vec::new();
    let mut ok = true;
    let mut details = json!({});
    match sub {
        TheorySub::Thm1 | TheorySub::Cross => {
            let cells = ctx.compare_cells();
            let mut summaries = Vec::new();
            let mut csv = Csv::new(&[
                "widths", "n_trials", "mean", "variance", "stderr", "min", "max", "second_moment", "predicted_scale",
                "mean_ok",
            ]);
            for w in &cells {
                let mc = ctx.mc_config(w)?;
                let samples = if sub == TheorySub::Thm1 { mc_hhat_samples(&mc)? } else { mc_cross_sample(&mc, false)? };
                let s = McSummary::from_samples(&samples)?;
                let mean_ok = s.mean_within(tol.mean_stderrs);
                ok &= mean_ok;
                println!(
                    "{} widths {:?}: mean {:.4e} ± {:.2e} (|mean|/stderr {:.2}), variance {:.4e}",
                    if mean_ok { "PASS" } else { "FAIL" },
                    w,
                    s.mean,
                    s.stderr,
                    s.mean.abs() / s.stderr.max(f64::MIN_POSITIVE),
                    s.variance
                );
                csv.row(&[
                    widths_cell(w),
                    s.n_trials.to_string(),
                    num(s.mean),
                    num(s.variance),
                    num(s.stderr),
                    num(s.min),
                    num(s.max),
                    num(s.second_moment()),
                    num(predicted_variance_scale(w)),
                    mean_ok.to_string(),
                ]);
                summaries.push(s);
            }
            let name = if sub == TheorySub::Thm1 { "thm1" } else { "cross" };
            ctx.write_csv(&format!("{name}.csv"), &csv, &mut outputs)?;
            if cells.len() >= 2 {
                let mut ratios = Csv::new(&["from", "to", "measured_ratio", "predicted_ratio", "relative_deviation", "ok"]);
                for i in 1..cells.len() {
                    // variance for the zero-mean check, second moment for the cross-sample reading
                    let stat = |s: &McSummary| if sub == TheorySub::Thm1 { s.variance } else { s.second_moment() };
                    let measured = stat(&summaries[i - 1]) / stat(&summaries[i]);
                    let predicted = predicted_variance_scale(&cells[i - 1]) / predicted_variance_scale(&cells[i]);
                    let dev = (measured / predicted - 1.0).abs();
                    let r_ok = dev <= tol.variance_ratio;
                    ok &= r_ok;
                    println!(
                        "{} ratio {:?} -> {:?}: measured {:.4} predicted {:.4} (deviation {:.1}%, tol {:.0}%)",
                        if r_ok { "PASS" } else { "FAIL" },
                        cells[i - 1],
                        cells[i],
                        measured,
                        predicted,
                        100.0 * dev,
                        100.0 * tol.variance_ratio
                    );
                    ratios.row(&[
                        widths_cell(&cells[i - 1]),
                        widths_cell(&cells[i]),
                        num(measured),
                        num(predicted),
                        num(dev),
                        r_ok.to_string(),
                    ]);
                }
                ctx.write_csv(&format!("{name}_ratios.csv"), &ratios, &mut outputs)?;
            }
        }
        TheorySub::Norm => {
            let cells = ctx.compare_cells();
            let mut csv = Csv::new(&["widths", "n_trials", "mean", "variance", "stderr", "limit", "relative_deviation", "ok"]);
            let mut delta = Csv::new(&["widths", "eps", "delta"]);
            let mut tables: Vec<DeltaTable> = Vec::new();
            for w in &cells {
                let r = mc_grad_norm(&ctx.mc_config(w)?, &ctx.cfg.mc.epsilons)?;
                let dev = (r.summary.mean / r.limit - 1.0).abs();
                let m_ok = dev <= tol.grad_norm_rel;
                ok &= m_ok;
                println!(
                    "{} widths {:?}: mean ‖g‖² {:.4} vs limit {:.4} (deviation {:.2}%)",
                    if m_ok { "PASS" } else { "FAIL" },
                    w,
                    r.summary.mean,
                    r.limit,
                    100.0 * dev
                );
                csv.row(&[
                    widths_cell(w),
                    r.summary.n_trials.to_string(),
                    num(r.summary.mean),
                    num(r.summary.variance),
                    num(r.summary.stderr),
                    num(r.limit),
                    num(dev),
                    m_ok.to_string(),
                ]);
                for (e, d) in r.delta.eps.iter().zip(&r.delta.delta) {
                    delta.row(&[widths_cell(w), num(*e), num(*d)]);
                }
                tables.push(r.delta);
            }
            for i in 1..tables.len() {
                let (a, b) = (&tables[i - 1].delta, &tables[i].delta);
                let tighter = a.iter().zip(b).all(|(x, y)| y <= x) && a.iter().zip(b).any(|(x, y)| y < x);
                ok &= tighter;
                println!(
                    "{} concentration {:?} -> {:?}: δ {:?} -> {:?}",
                    if tighter { "PASS" } else { "FAIL" },
                    cells[i - 1],
                    cells[i],
                    a,
                    b
                );
            }
            ctx.write_csv("norm.csv", &csv, &mut outputs)?;
            ctx.write_csv("norm_delta.csv", &delta, &mut outputs)?;
        }
        TheorySub::Thm2 => {
            let t = &ctx.cfg.thm2;
            if let Some(gamma) = t.gamma {
                let mut csv = Csv::new(&["n", "eps", "bound"]);
                let zero = DeltaTable { eps: vec![f64::MIN_POSITIVE], delta: vec![0.0] };
                for &n in &t.n {
                    for &eps in &ctx.cfg.mc.epsilons {
                        let b = thm2_bound(&Thm2Inputs {
                            eps,
                            alpha: t.alpha,
                            beta: t.beta,
                            gamma,
                            multipliers: t.multipliers.clone(),
                            n,
                            y0_norm_sq: t.y0_norm_sq,
                            delta: zero.clone(),
                        })?;
                        println!("n {n} eps {eps}: bound {b:.7}");
                        csv.row(&[num(n), num(eps), num(b)]);
                    }
                }
                ctx.write_csv("thm2_bound.csv", &csv, &mut outputs)?;
            } else {
                let loss = ctx.cfg.loss()?;
                let mut csv = Csv::new(&[
                    "widths", "eps", "empirical", "wilson_upper", "bound", "consistent", "alpha", "beta", "gamma_fit",
                ]);
                let mut params = Vec::new();
                for w in &ctx.compare_cells() {
                    let mc = ctx.mc_config(w)?;
                    multipliers(&mc.arch)?;
                    let r = thm2_comparison(&mc, &loss, &ctx.cfg.mc.epsilons)?;
                    for row in &r.rows {
                        ok &= row.consistent;
                        println!(
                            "{} widths {:?} eps {}: empirical {:.4} (upper {:.4}) bound {}",
                            if row.consistent { "PASS" } else { "FAIL" },
                            w,
                            row.eps,
                            row.empirical,
                            row.wilson_upper,
                            row.bound.map_or("n/a".into(), |b| format!("{b:.4}"))
                        );
                        csv.row(&[
                            widths_cell(w),
                            num(row.eps),
                            num(row.empirical),
                            num(row.wilson_upper),
                            opt(row.bound),
                            row.consistent.to_string(),
                            num(r.alpha),
                            num(r.beta),
                            num(r.gamma),
                        ]);
                    }
                    params.push(json!({ "widths": w, "alpha": r.alpha, "beta": r.beta, "gamma_fit": r.gamma }));
                }
                ctx.write_csv("thm2.csv", &csv, &mut outputs)?;
                details = json!({ "matched_parameters": params });
            }
        }
        TheorySub::Identities => {
            let w = &ctx.cfg.arch.widths;
            let (n_in, n_out) = (w[0], w[1]);
            let kind = ctx.cfg.init_kind_gain()?.kind;
            let mut rng = RngStream::new(ctx.cfg.mc.seed, u64::MAX).rng();
            let e = random_unit(n_out, &mut rng);
            let mut sets = vec![("aligned", std::array::from_fn(|_| e.clone()))];
            if n_out >= 2 {
                // v1 ⟂ v2 via one Gram-Schmidt step against e
                let r = random_unit(n_out, &mut rng);
                let c = crate::linalg::dot(&r, &e);
                let perp = crate::linalg::sub(&r, &crate::linalg::scaled(c, &e));
                let pn = crate::linalg::norm(&perp);
                let perp: Vec<f64> = perp.iter().map(|v| v / pn).collect();
                let mut vs: [Vec<f64>; 6] = std::array::from_fn(|_| e.clone());
                vs[1] = perp;
                sets.push(("orthogonal", vs));
            }
            let mut csv = Csv::new(&[
                "vectors", "variant", "n_in", "n_out", "mean", "stderr", "printed", "fan_in_leading", "gaussian_exact",
            ]);
            for (label, vs) in &sets {
                for row in mc_bilinear_identity(n_in, n_out, kind, vs, ctx.cfg.mc.trials, ctx.cfg.mc.seed)? {
                    let variant = serde_json::to_value(row.variant).unwrap().as_str().unwrap().to_string();
                    println!(
                        "{label} {variant}: measured {:.5} ± {:.1e}, printed {:.5}, fan-in leading {:.5}{}",
                        row.measured.mean,
                        row.measured.stderr,
                        row.printed,
                        row.fan_in_leading,
                        row.gaussian_exact.map_or(String::new(), |g| format!(", gaussian exact {g:.5}"))
                    );
                    csv.row(&[
                        label.to_string(),
                        variant,
                        n_in.to_string(),
                        n_out.to_string(),
                        num(row.measured.mean),
                        num(row.measured.stderr),
                        num(row.printed),
                        num(row.fan_in_leading),
                        opt(row.gaussian_exact),
                    ]);
                }
            }
            ctx.write_csv("identities.csv", &csv, &mut outputs)?;
        }
    }
    ctx.write_manifest(json!({ "mc": ctx.cfg.mc.seed }), &outputs, details)?;
    Ok(ok)
}

const TRAIN_HEADER: [&str; 10] = [
    "step",
    "epoch",
    "lr",
    "loss",
    "grad_norm_sq",
    "curv_estimate",
    "curv_exact_half",
    "G_proj",
    "H_proj",
    "Hess_proj",
];

pub fn records_csv(records: &[CurvatureRecord]) -> Csv {
    let mut csv = Csv::new(&TRAIN_HEADER);
    for r in records {
        csv.row(&[
            r.step.to_string(),
            r.epoch.to_string(),
            num(r.lr),
            num(r.loss),
            num(r.grad_norm_sq),
            opt(r.curv_estimate),
            opt(r.curv_exact_half),
            opt(r.g_proj),
            opt(r.h_proj),
            opt(r.hess_proj),
        ]);
    }
    csv
}

fn data_seed_json(seed: u64, n0: usize) -> serde_json::Value {
    json!({ "master_seed": seed, "stream_index": n0 })
}

fn cmd_train(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let tc = cfg.train_config()?;
    let (mut net, data) = match &cfg.arch.weights_file {
        Some(path) => {
            let net = Network::load(path)?;
            if net.arch() != &tc.arch {
                return Err(Error::Config(format!("weights file {} does not match [arch]", path.display())));
            }
            let data = Dataset::generate(cfg.data.n_samples, tc.arch.input_dim(), tc.data_seed)?;
            (net, data)
        }
        None => prepare_run(&tc, cfg.data.n_samples)?,
    };
    ctx.prepare_out()?;
    let result = sgd_train(&mut net, &data, &tc);
    let (log, abort) = match result {
        Ok(log) => (log, None),
        Err(Error::Diverged { step, loss, partial }) => (*partial, Some((step, loss))),
        Err(e) => return Err(e),
    };
    let mut outputs = Vec::new();
    ctx.write_csv("train.csv", &records_csv(&log.records), &mut outputs)?;
    let seeds = json!({
        "init": { "master_seed": tc.init_seed, "stream_index": 0 },
        "data": data_seed_json(tc.data_seed, tc.arch.input_dim()),
    });
    ctx.write_manifest(seeds, &outputs, train_details(&log, abort))?;
    if let Some((step, loss)) = abort {
        return Err(Error::Diverged {
            step,
            loss,
            partial: Box::new(log),
        });
    }
    println!(
        "trained {} steps; final epoch loss {:.6}; probed 𝓗_ĝ ≥ 0 in {:.1}% of probes",
        log.records.len(),
        log.epoch_losses.last().copied().unwrap_or(f64::NAN),
        100.0 * log.positivity_fraction().unwrap_or(f64::NAN)
    );
    Ok(true)
}

fn train_details(log: &RunLog, abort: Option<(usize, f64)>) -> serde_json::Value {
    json!({
        "epoch_losses": log.epoch_losses,
        "positivity_fraction": log.positivity_fraction(),
        "median_functional_share": log.median_functional_share(),
        "aborted": abort.map(|(step, loss)| json!({ "step": step, "loss": loss })),
        "train_wall_time_secs": log.wall_time_secs,
        "labels": "re-drawn per input dimension from the data seed (stream index = n_0)",
    })
}

fn cmd_sweep(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.cfg;
    let base = cfg.train_config()?;
    let widths = &cfg.sweep.widths;
    if widths.is_empty() || cfg.sweep.n_seeds == 0 {
        return Err(Error::Config("sweep needs at least one width and one seed".into()));
    }
    ctx.prepare_out()?;
    let report = width_sweep(&base, widths, cfg.sweep.n_seeds, cfg.data.n_samples)?;
    let mut csv = Csv::new(&["width", "seed_index", "init_H_abs", "init_Hess", "final_loss", "positivity_fraction"]);
    for c in &report.cells {
        csv.row(&[
            c.width.to_string(),
            c.seed_index.to_string(),
            num(c.init_h_abs),
            num(c.init_hess),
            num(c.final_loss),
            num(c.positivity_fraction),
        ]);
    }
    let mut summary = Csv::new(&["width", "mean_init_H_abs"]);
    for (w, m) in &report.mean_init_h_abs {
        summary.row(&[w.to_string(), num(*m)]);
        println!("width {w}: mean |H_ĝ| at init {m:.5}");
    }
    let verdict = match report.decreasing {
        Some(true) => "decreasing",
        Some(false) => "not decreasing",
        None => "no verdict (single width)",
    };
    println!("trend: {verdict}");
    let mut outputs = Vec::new();
    ctx.write_csv("sweep.csv", &csv, &mut outputs)?;
    ctx.write_csv("sweep_summary.csv", &summary, &mut outputs)?;
    let seeds = json!({
        "init": { "master_seed": base.init_seed, "stream_indices": (0..cfg.sweep.n_seeds).collect::<Vec<_>>() },
        "data": widths.iter().map(|&w| data_seed_json(base.data_seed, w)).collect::<Vec<_>>(),
    });
    ctx.write_manifest(seeds, &outputs, json!({ "trend": verdict, "mean_init_H_abs": report.mean_init_h_abs }))?;
    Ok(report.decreasing != Some(false))
}
