use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpcompress::accountant::{
    calibrate_sigma, default_delta, epsilon_for, PrivacyBudget, ACCOUNTANT_ID,
};
use dpcompress::harness::{
    compare_runs, evaluate, format_table, load_csv, run_to_dir, write_csv, DataSource,
    FinetuneInit, PipelineConfig, PipelineKind, Preset, SyntheticSpec, LR_GRID,
};
use dpcompress::model::{InitKind, LayeredClassifier};

#[derive(Parser)]
#[command(name = "dpcompress", version, about = "Differentially private model compression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// DPSGD fine-tuning of the teacher or of a student.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// teacher, random or zeroshot-pt
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        keep_blocks: Option<usize>,
    },
    /// Private knowledge distillation.
    Dpkd {
        #[command(flatten)]
        common: Common,
        /// random, zeroshot-pt or zeroshot-ft
        #[arg(long)]
        init: Option<InitKind>,
        #[arg(long)]
        keep_blocks: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        teacher_fraction: Option<f64>,
    },
    /// Private layer dropping.
    DpimpStructured {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        imp: ImpArgs,
        #[arg(long)]
        drop_blocks: Option<usize>,
    },
    /// Private magnitude pruning with weight reset.
    DpimpUnstructured {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        imp: ImpArgs,
        /// Target sparsity in percent.
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Budget queries.
    Accountant {
        #[command(subcommand)]
        query: AccountantQuery,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        d_in: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 1)]
        clusters: usize,
        /// Split tag; different tags give independent draws from one distribution.
        #[arg(long, default_value_t = 0)]
        split: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Aggregate run directories (or a runs root) into one table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run a config once per learning rate in the fixed grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum AccountantQuery {
    /// ε for given (q, σ, steps, δ).
    Epsilon {
        #[command(flatten)]
        mech: Mechanism,
        #[arg(long)]
        sigma: f64,
    },
    /// Smallest σ meeting a target ε.
    Sigma {
        #[command(flatten)]
        mech: Mechanism,
        #[arg(long)]
        epsilon: f64,
    },
}

#[derive(Args)]
struct Mechanism {
    /// Sampling rate; or give --n and --batch.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Dataset size; also sets δ = 1/(10N) when --delta is absent.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// eps4 or eps425
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Training CSV; switches the data source from synthetic to CSV.
    #[arg(long)]
    train_csv: Option<PathBuf>,
    #[arg(long)]
    test_csv: Option<PathBuf>,
    #[arg(long)]
    public_csv: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Shift of the public split's cluster centres, in units of separation/sqrt(d_in).
    #[arg(long)]
    public_shift: Option<f64>,
}

#[derive(Args)]
struct ImpArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_iters: Option<u64>,
    #[arg(long)]
    m_iters: Option<u64>,
    /// Share of the step budget spent in pruning rounds when n/m are derived.
    #[arg(long)]
    prune_fraction: Option<f64>,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn base_config(c: &Common, kind: PipelineKind) -> AnyResult<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let mut cfg = PipelineConfig::load(p)?;
            if cfg.pipeline != kind {
                return Err(format!(
                    "config pipeline is `{}` but subcommand is `{}`",
                    cfg.pipeline.label(),
                    kind.label()
                )
                .into());
            }
            cfg.seed = c.seed;
            cfg
        }
        None => PipelineConfig::canonical(kind, c.seed),
    };
    if let Some(v) = &c.name {
        cfg.name = v.clone();
    } else if c.config.is_none() {
        cfg.name = format!("{}-s{}", kind.label(), c.seed);
    }
    set(&mut cfg.epochs, c.epochs);
    if let Some(e) = c.epsilon {
        cfg.privacy.epsilon = Some(e);
    }
    if let Some(p) = c.preset {
        cfg.privacy.preset = Some(p);
        cfg.privacy.epsilon = None;
    }
    if c.delta.is_some() {
        cfg.privacy.delta = c.delta;
    }
    set(&mut cfg.dp.learning_rate, c.learning_rate);
    set(&mut cfg.dp.expected_batch_size, c.batch_size);
    set(&mut cfg.dp.clip_norm, c.clip_norm);
    set(&mut cfg.model.hidden, c.hidden);
    set(&mut cfg.model.blocks, c.blocks);
    if let Some(train) = &c.train_csv {
        let classes = c.classes.ok_or("--classes is required with --train-csv")?;
        cfg.data = DataSource::Csv {
            classes,
            train: train.clone(),
            test: c.test_csv.clone(),
            public: c.public_csv.clone(),
        };
    } else if let DataSource::Synthetic {
        classes,
        n_train,
        separation,
        public_shift,
        ..
    } = &mut cfg.data
    {
        set(classes, c.classes);
        set(n_train, c.n_train);
        set(separation, c.separation);
        set(public_shift, c.public_shift);
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn execute(cfg: &PipelineConfig, out_dir: &std::path::Path) -> AnyResult<()> {
    cfg.validate()?;
    let (art, dir) = run_to_dir(cfg, out_dir)?;
    println!("{}", dir.display());
    println!(
        "accuracy {:.4}  ε {:.4} (δ {:.3e}, {})  blocks {}  sparsity {:.1}%",
        art.metrics.eval_accuracy,
        art.privacy.total_epsilon,
        art.privacy.delta,
        art.privacy.accountant,
        art.metrics.block_count,
        100.0 * art.metrics.sparsity
    );
    Ok(())
}

fn mechanism(m: &Mechanism) -> AnyResult<(f64, u64, f64)> {
    let q = match (m.q, m.n, m.batch) {
        (Some(q), _, _) => q,
        (None, Some(n), Some(b)) => (b as f64 / n as f64).min(1.0),
        _ => return Err("give --q, or --n with --batch".into()),
    };
    let steps = match (m.steps, m.n, m.batch, m.epochs) {
        (Some(s), ..) => s,
        (None, Some(n), Some(b), Some(e)) => (e * n as f64 / b as f64).round() as u64,
        _ => return Err("give --steps, or --n with --batch and --epochs".into()),
    };
    let delta = match (m.delta, m.n) {
        (Some(d), _) => d,
        (None, Some(n)) => default_delta(n),
        _ => return Err("give --delta or --n".into()),
    };
    Ok((q, steps, delta))
}

fn main_inner(cli: Cli) -> AnyResult<()> {
    match cli.cmd {
        Cmd::Finetune {
            common,
            init,
            keep_blocks,
        } => {
            let mut cfg = base_config(&common, PipelineKind::Finetune)?;
            if let Some(i) = init {
                cfg.finetune.init = match i.as_str() {
                    "teacher" => FinetuneInit::Teacher,
                    "random" => FinetuneInit::Random,
                    "zeroshot-pt" => FinetuneInit::ZeroshotPt,
                    other => return Err(format!("unknown finetune init `{other}`").into()),
                };
            }
            if keep_blocks.is_some() {
                cfg.finetune.keep_blocks = keep_blocks;
            }
            execute(&cfg, &common.out_dir)
        }
        Cmd::Dpkd {
            common,
            init,
            keep_blocks,
            lambda,
            temperature,
            teacher_fraction,
        } => {
            let mut cfg = base_config(&common, PipelineKind::Dpkd)?;
            set(&mut cfg.kd.init, init);
            if keep_blocks.is_some() {
                cfg.kd.keep_blocks = keep_blocks;
            }
            set(&mut cfg.kd.lambda, lambda);
            set(&mut cfg.kd.temperature, temperature);
            set(&mut cfg.kd.teacher_fraction, teacher_fraction);
            execute(&cfg, &common.out_dir)
        }
        Cmd::DpimpStructured {
            common,
            imp,
            drop_blocks,
        } => {
            let mut cfg = base_config(&common, PipelineKind::DpimpStructured)?;
            apply_imp(&mut cfg, &imp);
            if drop_blocks.is_some() {
                cfg.imp.drop_blocks = drop_blocks;
            }
            execute(&cfg, &common.out_dir)
        }
        Cmd::DpimpUnstructured {
            common,
            imp,
            sparsity,
        } => {
            let mut cfg = base_config(&common, PipelineKind::DpimpUnstructured)?;
            apply_imp(&mut cfg, &imp);
            set(&mut cfg.imp.sparsity, sparsity);
            execute(&cfg, &common.out_dir)
        }
        Cmd::Accountant { query } => match query {
            AccountantQuery::Epsilon { mech, sigma } => {
                let (q, steps, delta) = mechanism(&mech)?;
                let e = epsilon_for(q, sigma, steps, delta);
                if mech.json {
                    println!(
                        "{}",
                        serde_json::json!({
                            "epsilon": if e.epsilon.is_finite() { Some(e.epsilon) } else { None },
                            "delta": delta, "q": q, "sigma": sigma, "steps": steps,
                            "order_used": e.order, "accountant": ACCOUNTANT_ID,
                        })
                    );
                } else {
                    println!(
                        "ε = {:.6} at δ = {delta:.3e} (q = {q:.6}, σ = {sigma}, {steps} steps, order {}, {ACCOUNTANT_ID})",
                        e.epsilon,
                        e.order.map_or("-".into(), |o| o.to_string())
                    );
                }
                Ok(())
            }
            AccountantQuery::Sigma { mech, epsilon } => {
                let (q, steps, delta) = mechanism(&mech)?;
                let cal = calibrate_sigma(PrivacyBudget::new(epsilon, delta)?, q, steps)?;
                if mech.json {
                    println!(
                        "{}",
                        serde_json::json!({
                            "sigma": cal.sigma, "epsilon": cal.epsilon, "saturated": cal.saturated,
                            "delta": delta, "q": q, "steps": steps, "accountant": ACCOUNTANT_ID,
                        })
                    );
                } else {
                    println!(
                        "σ = {:.6} spends ε = {:.6} at δ = {delta:.3e} (q = {q:.6}, {steps} steps{})",
                        cal.sigma,
                        cal.epsilon,
                        if cal.saturated { ", target does not constrain σ" } else { "" }
                    );
                }
                Ok(())
            }
        },
        Cmd::Synth {
            classes,
            n,
            d_in,
            seed,
            separation,
            clusters,
            split,
            out,
        } => {
            let ds = SyntheticSpec {
                classes,
                d_in,
                separation,
                clusters_per_class: clusters,
                seed,
            }
            .sample("synthetic", n, split)?;
            write_csv(&ds, &out)?;
            println!("wrote {} rows to {}", ds.len(), out.display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            classes,
        } => {
            let model = LayeredClassifier::load(&checkpoint)?;
            let ds = load_csv(&data, classes.unwrap_or(model.dims.classes))?;
            println!("{}", evaluate(&model, &ds)?);
            Ok(())
        }
        Cmd::Compare { runs, json } => {
            let rows = compare_runs(&runs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_table(&rows));
            }
            Ok(())
        }
        Cmd::Sweep { common } => {
            let cfg = match &common.config {
                Some(p) => PipelineConfig::load(p)?.pipeline,
                None => PipelineKind::Finetune,
            };
            let base = base_config(&common, cfg)?;
            let mut dirs = Vec::new();
            for lr in LR_GRID {
                let mut c = base.clone();
                c.dp.learning_rate = lr;
                c.name = format!("{}-lr{lr}", base.name);
                let (_, dir) = run_to_dir(&c, &common.out_dir)?;
                dirs.push(dir);
            }
            print!("{}", format_table(&compare_runs(&dirs)?));
            Ok(())
        }
    }
}

fn apply_imp(cfg: &mut PipelineConfig, imp: &ImpArgs) {
    set(&mut cfg.imp.alpha, imp.alpha);
    if imp.n_iters.is_some() {
        cfg.imp.n_iters = imp.n_iters;
    }
    if imp.m_iters.is_some() {
        cfg.imp.m_iters = imp.m_iters;
    }
    if imp.prune_fraction.is_some() {
        cfg.imp.prune_fraction = imp.prune_fraction;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
