use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use econvnext::arch::{self, ArchConfig};
use econvnext::cost::{self, targets, worked};
use econvnext::net::Network;
use econvnext::train::{self, DatasetHandle, TrainConfig};
use econvnext::verify;

/// Writes to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(args: std::fmt::Arguments) {
    if let Err(e) = std::io::stdout().lock().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

macro_rules! put {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! say {
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

#[derive(Parser)]
#[command(name = "econvnext", version, about = "Build, cost, verify and train E-ConvNeXt style networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArg {
    /// Named preset, e.g. e_convnext_tiny
    #[arg(long)]
    preset: Option<String>,
    /// Architecture JSON file
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<ArchConfig> {
        match (&self.preset, &self.config) {
            (Some(name), _) => Ok(arch::preset(name)?),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(ArchConfig::from_json(&text)?)
            }
            (None, None) => bail!("pass --preset or --config"),
        }
    }

    fn name(&self) -> Option<&str> {
        self.preset.as_deref()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Grad,
    Oracle,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Sec311,
    Table8,
    Table3,
}

#[derive(Subcommand)]
enum Command {
    /// Print the configuration and its shape trace
    Describe {
        #[command(flatten)]
        model: ModelArg,
        /// Emit the configuration and trace as JSON
        #[arg(long)]
        json: bool,
    },
    /// Per-layer FLOPs and parameter report
    Flops {
        #[command(flatten)]
        model: ModelArg,
        /// Square input resolution
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        json: bool,
        /// Count two FLOPs per multiply-accumulate
        #[arg(long)]
        macs2: bool,
    },
    /// Total parameter count
    Params {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Gradient checks and equivalence oracles
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a directory of ETF images with a manifest
    Train {
        #[command(flatten)]
        model: ModelArg,
        /// Dataset directory containing manifest.json
        #[arg(long)]
        data: PathBuf,
        /// Generate this many synthetic blob samples into --data first
        #[arg(long)]
        generate: Option<usize>,
        /// JSON file with training settings; defaults to the desk settings
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate per 128 samples
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the epoch history as CSV
        #[arg(long)]
        history: Option<PathBuf>,
        /// Save trained weights as ETF files into this directory
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Time layer norm against batch norm after a 2x2 stride-2 conv
    BenchNorm {
        #[arg(long, default_value_t = 56)]
        h: usize,
        #[arg(long, default_value_t = 56)]
        w: usize,
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// Reproduce published cost tables
    Reproduce {
        #[arg(value_enum)]
        table: Table,
    },
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn describe(cfg: &ArchConfig, json: bool) -> Result<bool> {
    let trace = arch::shape_trace(cfg)?;
    if json {
        let doc = serde_json::json!({ "config": cfg, "trace": trace });
        say!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(true);
    }
    say!("{}", cfg.to_json()?);
    for row in trace {
        let d = row.dims;
        if d.h == 1 && d.w == 1 {
            say!("{:<32} {}", row.name, d.c);
        } else {
            say!("{:<32} {}@{}x{}", row.name, d.c, d.h, d.w);
        }
    }
    Ok(true)
}

fn flops(model: &ModelArg, input: Option<usize>, json: bool, macs2: bool) -> Result<bool> {
    let mut cfg = model.load()?;
    if let Some(s) = input {
        cfg.input_size = [s, s];
    }
    let graph = arch::build(&cfg)?;
    let report = cost::model_cost_at(&graph, graph.input_dims(1), macs2)?;
    if json {
        say!("{}", report.to_json());
        return Ok(true);
    }
    put!("{}", report.to_text());
    let target = model.name().and_then(targets::target_for);
    match target {
        Some(t) if cfg.input_size == [224, 224] && !macs2 => {
            let v = targets::Verdict::new(t, report.total_flops, report.total_params);
            say!("{}", v.line());
            Ok(v.passes())
        }
        _ => Ok(true),
    }
}

fn params(model: &ModelArg) -> Result<bool> {
    let cfg = model.load()?;
    let report = cost::model_cost(&arch::build(&cfg)?)?;
    say!("{} params: {} ({})", cfg.name, report.total_params, cost::human(report.total_params));
    match model.name().and_then(targets::target_for) {
        Some(t) => {
            let v = targets::Verdict::new(t, report.total_flops, report.total_params);
            say!(
                "target {:.1}M ±{:.0}%: {:+.1}% {}",
                t.params / 1e6,
                t.params_tol * 100.0,
                v.params_dev * 100.0,
                verdict(v.params_ok())
            );
            Ok(v.params_ok())
        }
        None => Ok(true),
    }
}

fn run_verify(suite: Suite, seed: u64) -> Result<bool> {
    let mut ok = true;
    if matches!(suite, Suite::Grad | Suite::All) {
        for r in verify::grad_suite(seed, verify::grad::DEFAULT_TOLERANCE)? {
            say!("grad   {:<36} max rel err {:.2e}  {}", r.name, r.max_error(), verdict(r.passes()));
            if !r.passes() && ok {
                for g in r.groups.iter().filter(|g| g.max_rel_err > r.tolerance) {
                    eprintln!("first failure: {} / {} rel err {:.3e}", r.name, g.name, g.max_rel_err);
                }
            }
            ok &= r.passes();
        }
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        for r in verify::oracle_suite(seed, 10)? {
            say!("oracle {:<36} max rel err {:.2e}  {}", r.name, r.max_rel_err, verdict(r.passes()));
            if !r.passes() && ok {
                eprintln!("first failure: {} rel err {:.3e}", r.name, r.max_rel_err);
            }
            ok &= r.passes();
        }
    }
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    model: &ModelArg,
    data: &Path,
    generate: Option<usize>,
    train_config: Option<&PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    history: Option<&PathBuf>,
    save: Option<&PathBuf>,
) -> Result<bool> {
    let cfg = model.load()?;
    if let Some(n) = generate {
        let size = cfg.input_size[0];
        train::generate_blobs(data, n, cfg.num_classes, size, seed.unwrap_or(0))?;
    }
    let ds = DatasetHandle::load(data).with_context(|| format!("loading dataset from {}", data.display()))?;
    let mut tc = match train_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::desk(),
    };
    tc.epochs = epochs.unwrap_or(tc.epochs);
    tc.batch_size = batch_size.unwrap_or(tc.batch_size);
    tc.base_lr = lr.unwrap_or(tc.base_lr);
    tc.seed = seed.unwrap_or(tc.seed);
    let mut net = Network::new(&cfg, tc.seed)?;
    let h = train::train(&mut net, &ds, &tc)?;
    let csv = h.to_csv();
    put!("{csv}");
    if let Some(p) = history {
        std::fs::write(p, &csv)?;
    }
    if let Some(dir) = save {
        net.save(dir)?;
    }
    Ok(true)
}

fn bench(h: usize, w: usize, c: usize, batch: usize, iters: usize) -> Result<bool> {
    let r = verify::bench_norm(h, w, c, batch, iters)?;
    say!("input [{batch}, {c}, {h}, {w}], {iters} iterations of 2x2 s2 conv + norm, forward and backward");
    say!("layer norm (channel-first): {:.4} s", r.ln_seconds);
    say!("batch norm:                 {:.4} s", r.bn_seconds);
    if r.bn_faster() {
        say!("batch norm faster: yes");
    } else {
        say!("warning: batch norm was not faster on this hardware; the directional claim is not confirmed here");
    }
    Ok(true)
}

fn reproduce(table: Table) -> Result<bool> {
    match table {
        Table::Sec311 => {
            let blocks = worked::all_blocks();
            put!("{}", worked::render(&blocks));
            Ok(blocks.iter().all(|b| b.passes()))
        }
        Table::Table8 => {
            let v = targets::table8()?;
            put!("{}", targets::render_table8(&v)?);
            Ok(v.iter().all(|v| v.passes()))
        }
        Table::Table3 => {
            let (a, b) = targets::csp_reduction()?;
            let cut = 1.0 - b as f64 / a as f64;
            say!("csp_original            {:>6.3}G", a as f64 / 1e9);
            say!("csp_original + ch_mid   {:>6.3}G", b as f64 / 1e9);
            for name in ["csp_chmid", "csp_final"] {
                let r = cost::model_cost(&arch::build(&arch::preset(name)?)?)?;
                say!("{name:<23} {:>6.3}G", r.total_flops as f64 / 1e9);
            }
            say!("reduction {:.1}% (need >= 35%) {}", cut * 100.0, verdict(cut >= 0.35));
            Ok(cut >= 0.35)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    econvnext::configure_threads()?;
    match cli.command {
        Command::Describe { model, json } => describe(&model.load()?, json),
        Command::Flops { model, input, json, macs2 } => flops(&model, input, json, macs2),
        Command::Params { model } => params(&model),
        Command::Verify { suite, seed } => run_verify(suite, seed),
        Command::Train { model, data, generate, train_config, epochs, batch_size, lr, seed, history, save } => {
            run_train(
                &model,
                &data,
                generate,
                train_config.as_ref(),
                epochs,
                batch_size,
                lr,
                seed,
                history.as_ref(),
                save.as_ref(),
            )
        }
        Command::BenchNorm { h, w, c, batch, iters } => bench(h, w, c, batch, iters),
        Command::Reproduce { table } => reproduce(table),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
