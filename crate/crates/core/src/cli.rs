//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or checkpoint
//! error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::baseline_train;
use crate::batch;
use crate::blocks::Block;
use crate::checkpoint::{load_model, save_model, NmfBasis};
use crate::config::{Method, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::accuracy;
use crate::metrics::{write_metrics_csv, MetricsRecord};
use crate::nmf::{deepfacto_train, project_test_time, write_s_csv};
use crate::online::online_train;
use crate::rng::Rng;
use crate::schedule::{convergence_mode_train, write_trace_csv, TraceRow};
use crate::standard::standard_admm_train;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "block-admm", version, about = "Block-wise ADMM training for feed-forward networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train with the configured method; writes metrics.csv and model.bin.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split accuracy of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Scores of the test split against a saved NMF basis, as s.csv.
    NmfProject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the configured synthetic dataset as train.csv and test.csv.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs several methods on one config, one metrics CSV per method.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated method names.
        #[arg(long, default_value = "block-admm,online,adam")]
        methods: String,
    },
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub blocks: Vec<Block>,
    pub nmf: Option<NmfBasis>,
    pub scores: Option<Tensor>,
    pub trace: Option<Vec<TraceRow>>,
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Data first, then the model, both from the config seed.
pub fn prepare(cfg: &TrainConfig) -> Result<(Dataset, Dataset, Rng)> {
    let root = Rng::new(cfg.seed);
    let (train, test) = cfg.load_data(&mut root.fork(0x01))?;
    Ok((train, test, root.fork(0x02)))
}

pub fn run_method(cfg: &TrainConfig, train: &Dataset, test: &Dataset, model_rng: &mut Rng) -> Result<RunOutput> {
    cfg.validate()?;
    let plain = |metrics, blocks| RunOutput { metrics, blocks, nmf: None, scores: None, trace: None };
    Ok(match cfg.method {
        Method::BlockAdmm => {
            let r = batch::train(cfg.build_blocks(model_rng)?, train, Some(test), &cfg.batch_config())?;
            plain(r.metrics, r.blocks)
        }
        Method::Online => {
            let r = online_train(cfg.build_blocks(model_rng)?, train, Some(test), &cfg.online_config())?;
            plain(r.metrics, r.blocks)
        }
        Method::Sgd | Method::Adam => {
            let r = baseline_train(cfg.build_layers(model_rng)?, train, Some(test), &cfg.baseline_config())?;
            plain(r.metrics, vec![r.model])
        }
        Method::StandardAdmm => {
            let r = standard_admm_train(train, Some(test), &cfg.layers, &cfg.standard_config())?;
            plain(r.metrics, r.state.to_blocks()?)
        }
        Method::Convergence => {
            let r = convergence_mode_train(cfg.build_blocks(model_rng)?, train, Some(test), &cfg.convergence_config()?)?;
            RunOutput { trace: Some(r.trace), ..plain(r.metrics, r.blocks) }
        }
        Method::DeepFacto => {
            let dcfg = cfg.deepfacto_config();
            let r = deepfacto_train(cfg.build_deepfacto_blocks(model_rng)?, train, Some(test), &dcfg)?;
            RunOutput {
                metrics: r.metrics,
                blocks: r.blocks,
                nmf: Some(NmfBasis { position: dcfg.position, m: r.nmf.m }),
                scores: Some(r.nmf.s),
                trace: None,
            }
        }
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", dir.display())))
}

fn train_cmd(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (train, test, mut rng) = prepare(&cfg)?;
    let run = run_method(&cfg, &train, &test, &mut rng)?;
    create_dir(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    write_metrics_csv(&out.join("metrics.csv"), &run.metrics)?;
    save_model(&out.join("model.bin"), &run.blocks, run.nmf.as_ref())?;
    if let Some(s) = &run.scores {
        write_s_csv(&out.join("s_train.csv"), s)?;
    }
    if let Some(t) = &run.trace {
        write_trace_csv(&out.join("trace.csv"), t)?;
    }
    if let Some(last) = run.metrics.last() {
        println!(
            "{}: {} epochs, train loss {:.6}, test accuracy {:.4}",
            cfg.method.name(),
            last.epoch,
            last.train_loss,
            last.test_accuracy
        );
    }
    Ok(())
}

fn eval_cmd(common: &Common, model: &Path) -> Result<f64> {
    let cfg = load_config(common)?;
    let (_, test, _) = prepare(&cfg)?;
    let m = load_model(model)?;
    let acc = accuracy(&test.y, &m.predict(&test.x)?)?;
    println!("accuracy {acc:.4} on {} samples", test.len());
    Ok(acc)
}

fn nmf_project_cmd(common: &Common, model: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (_, test, _) = prepare(&cfg)?;
    let m = load_model(model)?;
    let basis = m
        .nmf
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no NMF basis", model.display())))?;
    let mut h = test.x.clone();
    for b in &m.blocks[..=basis.position] {
        h = b.forward(&h)?;
    }
    let s = project_test_time(&basis.m, &h)?;
    create_dir(out)?;
    write_s_csv(&out.join("s.csv"), &s)?;
    Ok(())
}

fn dataset_csv(d: &Dataset) -> String {
    let mut out = String::from("label");
    for i in 0..d.features() {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    let labels = d.labels();
    for j in 0..d.len() {
        out.push_str(&labels[j].to_string());
        for i in 0..d.features() {
            out.push_str(&format!(",{:e}", d.x.get(i, j)));
        }
        out.push('\n');
    }
    out
}

fn gen_synth_cmd(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let crate::config::DataSource::Synth(kind) = cfg.data else {
        return Err(Error::Config("gen-synth needs data = synth:KIND".into()));
    };
    let synth = crate::data::synth::synth_gen(&cfg.synth_spec(kind), &mut Rng::new(cfg.seed).fork(0x01))?;
    create_dir(out)?;
    std::fs::File::create(out.join("train.csv"))?.write_all(dataset_csv(&synth.train).as_bytes())?;
    std::fs::File::create(out.join("test.csv"))?.write_all(dataset_csv(&synth.test).as_bytes())?;
    Ok(())
}

fn bench_cmd(common: &Common, out: &Path, methods: &str) -> Result<()> {
    let base = load_config(common)?;
    let list = methods
        .split(',')
        .map(|m| Method::parse(m.trim()).ok_or_else(|| Error::Config(format!("unknown method {m:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (train, test, rng) = prepare(&base)?;
    create_dir(out)?;
    for method in list {
        let cfg = TrainConfig { method, ..base.clone() };
        let run = run_method(&cfg, &train, &test, &mut rng.clone())?;
        write_metrics_csv(&out.join(format!("{}.csv", method.name())), &run.metrics)?;
        let last = run.metrics.last().map_or(0.0, |m| m.test_accuracy);
        println!("{}: test accuracy {last:.4}", method.name());
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train { common, out } => train_cmd(common, out),
        Command::Eval { common, model } => eval_cmd(common, model).map(|_| ()),
        Command::NmfProject { common, model, out } => nmf_project_cmd(common, model, out),
        Command::GenSynth { common, out } => gen_synth_cmd(common, out),
        Command::Bench { common, out, methods } => bench_cmd(common, out, methods),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
