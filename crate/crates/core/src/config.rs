//! Run configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value
//! list_key = 1e-3, 2e-3
//! ```
//!
//! Keys are flat. Blank lines and `#` comments are ignored, repeated or
//! unknown keys are errors. Lists are comma separated. Typed values:
//!
//! - `init`: `normal:STD`, `he`, `uniform:LO:HI`
//! - `dual_init`: `zero`, `uniform:LO:HI`
//! - `data`: `mnist:DIR` or `synth:KIND` with KIND one of `linear-teacher`, `two-moons-like`, `low-rank-nonneg`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baseline::BaselineConfig;
use crate::batch::{BatchAdmmConfig, DualInit, PrimalRepeat};
use crate::blocks::{boundaries_per_linear, dense_layers, split_network, Block, Layer, WeightInit};
use crate::data::idx::load_mnist_dir;
use crate::data::synth::{synth_gen, SynthKind, SynthSpec};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nmf::{DeepFactoConfig, NmfInit};
use crate::online::{OnlineConfig, PenaltyForm};
use crate::optim::OptimizerKind;
use crate::rng::Rng;
use crate::schedule::{ConvergenceConfig, PenaltySchedule};
use crate::standard::StandardAdmmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    BlockAdmm,
    Online,
    StandardAdmm,
    Sgd,
    Adam,
    DeepFacto,
    Convergence,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "block-admm" => Self::BlockAdmm,
            "online" => Self::Online,
            "standard-admm" => Self::StandardAdmm,
            "sgd" => Self::Sgd,
            "adam" => Self::Adam,
            "deepfacto" => Self::DeepFacto,
            "convergence" => Self::Convergence,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BlockAdmm => "block-admm",
            Self::Online => "online",
            Self::StandardAdmm => "standard-admm",
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::DeepFacto => "deepfacto",
            Self::Convergence => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist(PathBuf),
    Synth(SynthKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub layers: Vec<usize>,
    pub bias: bool,
    pub init: WeightInit,
    /// Layer indices where a new block starts; empty means one block per linear layer.
    pub boundaries: Vec<usize>,
    pub loss: LossKind,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub z_lr: Vec<f64>,
    pub theta_lr: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub primal_steps: usize,
    pub repeat: PrimalRepeat,
    pub theta_steps: Option<usize>,
    pub z_optimizer: OptimizerKind,
    pub theta_optimizer: OptimizerKind,
    pub dual_init: DualInit,
    pub online_form: PenaltyForm,
    pub z_steps: usize,
    pub nmf_rank: usize,
    pub nmf_position: usize,
    pub nmf_phase1_iters: usize,
    pub nmf_phase1_tol: f64,
    pub nmf_init: NmfInit,
    pub rho0: f64,
    pub contraction: f64,
    pub residual_bound0: f64,
    pub residual_decay: f64,
    pub tolerance0: f64,
    pub tolerance_decay: f64,
    pub outer_iters: usize,
    pub inner_cap: usize,
    pub batch_growth: f64,
    pub seed: u64,
    pub data: DataSource,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub synth_features: usize,
    pub synth_classes: usize,
    pub synth_rank: usize,
    pub synth_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch = BatchAdmmConfig::default();
        let schedule = PenaltySchedule::default();
        let nmf = DeepFactoConfig::default();
        let synth = SynthSpec::default();
        Self {
            method: Method::BlockAdmm,
            layers: vec![784, 128, 128, 10],
            bias: true,
            init: WeightInit::Normal(0.05),
            boundaries: Vec::new(),
            loss: LossKind::Mse,
            beta: batch.beta,
            gamma: vec![nmf.gamma],
            z_lr: batch.z_lr,
            theta_lr: batch.theta_lr,
            lambda: StandardAdmmConfig::default().lambda,
            lr: BaselineConfig::default().lr,
            epochs: 10,
            batch_size: batch.batch_size,
            primal_steps: batch.primal_steps,
            repeat: batch.repeat,
            theta_steps: None,
            z_optimizer: batch.z_optimizer,
            theta_optimizer: batch.theta_optimizer,
            dual_init: batch.dual_init,
            online_form: PenaltyForm::NormPlusDual,
            z_steps: 1,
            nmf_rank: nmf.rank,
            nmf_position: nmf.position,
            nmf_phase1_iters: nmf.phase1_iters,
            nmf_phase1_tol: nmf.phase1_tol,
            nmf_init: nmf.init,
            rho0: schedule.rho0,
            contraction: schedule.contraction,
            residual_bound0: schedule.residual_bound0,
            residual_decay: schedule.residual_decay,
            tolerance0: schedule.tolerance0,
            tolerance_decay: schedule.tolerance_decay,
            outer_iters: 50,
            inner_cap: 200,
            batch_growth: 1.2,
            seed: 0,
            data: DataSource::Mnist(PathBuf::from("data/mnist-sample")),
            train_size: Some(5000),
            test_size: Some(1000),
            synth_features: synth.features,
            synth_classes: synth.classes,
            synth_rank: synth.rank,
            synth_noise: synth.noise,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {value:?} as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn range(key: &str, rest: &str) -> Result<(f64, f64)> {
    let (lo, hi) = rest.split_once(':').ok_or_else(|| bad(key, rest, "LO:HI"))?;
    Ok((num(key, lo)?, num(key, hi)?))
}

fn parse_init(key: &str, v: &str) -> Result<WeightInit> {
    if v == "he" {
        return Ok(WeightInit::He);
    }
    match v.split_once(':') {
        Some(("normal", s)) => Ok(WeightInit::Normal(num(key, s)?)),
        Some(("uniform", r)) => {
            let (lo, hi) = range(key, r)?;
            Ok(WeightInit::Uniform(lo, hi))
        }
        _ => Err(bad(key, v, "normal:STD, he or uniform:LO:HI")),
    }
}

fn init_text(init: WeightInit) -> String {
    match init {
        WeightInit::Normal(s) => format!("normal:{s}"),
        WeightInit::He => "he".into(),
        WeightInit::Uniform(lo, hi) => format!("uniform:{lo}:{hi}"),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if seen.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: key {k} given twice", no + 1)));
            }
        }
        let mut c = Self::default();
        for (k, v) in &seen {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "method" => self.method = Method::parse(v).ok_or_else(|| bad(k, v, "a method"))?,
            "layers" => self.layers = list(k, v)?,
            "activation" => {
                if v != "relu" {
                    return Err(bad(k, v, "relu (the only supported activation)"));
                }
            }
            "bias" => self.bias = num(k, v)?,
            "init" => self.init = parse_init(k, v)?,
            "boundaries" => self.boundaries = list(k, v)?,
            "loss" => self.loss = LossKind::parse(v).ok_or_else(|| bad(k, v, "mse or ce"))?,
            "beta" => self.beta = list(k, v)?,
            "gamma" => self.gamma = list(k, v)?,
            "z_lr" => self.z_lr = list(k, v)?,
            "theta_lr" => self.theta_lr = list(k, v)?,
            "lambda" => self.lambda = list(k, v)?,
            "lr" => self.lr = num(k, v)?,
            "epochs" => self.epochs = num(k, v)?,
            "batch_size" => self.batch_size = num(k, v)?,
            "primal_steps" => self.primal_steps = num(k, v)?,
            "repeat" => self.repeat = PrimalRepeat::parse(v).ok_or_else(|| bad(k, v, "full-sweep or z-only"))?,
            "theta_steps" => self.theta_steps = if v == "pass" { None } else { Some(num(k, v)?) },
            "z_optimizer" => self.z_optimizer = OptimizerKind::parse(v).ok_or_else(|| bad(k, v, "sgd or adam"))?,
            "theta_optimizer" => self.theta_optimizer = OptimizerKind::parse(v).ok_or_else(|| bad(k, v, "sgd or adam"))?,
            "dual_init" => {
                self.dual_init = match v.split_once(':') {
                    None if v == "zero" => DualInit::Zero,
                    Some(("uniform", r)) => {
                        let (lo, hi) = range(k, r)?;
                        DualInit::Uniform(lo, hi)
                    }
                    _ => return Err(bad(k, v, "zero or uniform:LO:HI")),
                }
            }
            "online_form" => self.online_form = PenaltyForm::parse(v).ok_or_else(|| bad(k, v, "norm-plus-dual or squared-plus-dual"))?,
            "z_steps" => self.z_steps = num(k, v)?,
            "nmf_rank" => self.nmf_rank = num(k, v)?,
            "nmf_position" => self.nmf_position = num(k, v)?,
            "nmf_phase1_iters" => self.nmf_phase1_iters = num(k, v)?,
            "nmf_phase1_tol" => self.nmf_phase1_tol = num(k, v)?,
            "nmf_init" => {
                self.nmf_init = match v.split_once(':') {
                    None if v == "identity" => NmfInit::Identity,
                    Some(("abs-normal", s)) => NmfInit::AbsNormal(num(k, s)?),
                    _ => return Err(bad(k, v, "identity or abs-normal:STD")),
                }
            }
            "rho0" => self.rho0 = num(k, v)?,
            "contraction" => self.contraction = num(k, v)?,
            "residual_bound0" => self.residual_bound0 = num(k, v)?,
            "residual_decay" => self.residual_decay = num(k, v)?,
            "tolerance0" => self.tolerance0 = num(k, v)?,
            "tolerance_decay" => self.tolerance_decay = num(k, v)?,
            "outer_iters" => self.outer_iters = num(k, v)?,
            "inner_cap" => self.inner_cap = num(k, v)?,
            "batch_growth" => self.batch_growth = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "data" => {
                self.data = match v.split_once(':') {
                    Some(("mnist", dir)) => DataSource::Mnist(PathBuf::from(dir)),
                    Some(("synth", kind)) => DataSource::Synth(SynthKind::parse(kind).ok_or_else(|| bad(k, v, "a synthetic kind"))?),
                    _ => return Err(bad(k, v, "mnist:DIR or synth:KIND")),
                }
            }
            "train_size" => self.train_size = if v == "all" { None } else { Some(num(k, v)?) },
            "test_size" => self.test_size = if v == "all" { None } else { Some(num(k, v)?) },
            "synth_features" => self.synth_features = num(k, v)?,
            "synth_classes" => self.synth_classes = num(k, v)?,
            "synth_rank" => self.synth_rank = num(k, v)?,
            "synth_noise" => self.synth_noise = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// The config as it would be written to a file; `parse(to_text())` restores it.
    pub fn to_text(&self) -> String {
        let opt = |o: Option<usize>| o.map_or("all".to_string(), |v| v.to_string());
        let mut lines = vec![
            format!("method = {}", self.method.name()),
            format!("layers = {}", join(&self.layers)),
            format!("bias = {}", self.bias),
            format!("init = {}", init_text(self.init)),
            format!("boundaries = {}", join(&self.boundaries)),
            format!("loss = {}", self.loss.name()),
            format!("beta = {}", join(&self.beta)),
            format!("gamma = {}", join(&self.gamma)),
            format!("z_lr = {}", join(&self.z_lr)),
            format!("theta_lr = {}", join(&self.theta_lr)),
            format!("lambda = {}", join(&self.lambda)),
            format!("lr = {}", self.lr),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("primal_steps = {}", self.primal_steps),
            format!("repeat = {}", self.repeat.name()),
            format!("theta_steps = {}", self.theta_steps.map_or("pass".to_string(), |v| v.to_string())),
            format!("z_optimizer = {}", self.z_optimizer.name()),
            format!("theta_optimizer = {}", self.theta_optimizer.name()),
            format!(
                "dual_init = {}",
                match self.dual_init {
                    DualInit::Zero => "zero".to_string(),
                    DualInit::Uniform(lo, hi) => format!("uniform:{lo}:{hi}"),
                }
            ),
            format!("online_form = {}", self.online_form.name()),
            format!("z_steps = {}", self.z_steps),
            format!("nmf_rank = {}", self.nmf_rank),
            format!("nmf_position = {}", self.nmf_position),
            format!("nmf_phase1_iters = {}", self.nmf_phase1_iters),
            format!("nmf_phase1_tol = {}", self.nmf_phase1_tol),
            format!(
                "nmf_init = {}",
                match self.nmf_init {
                    NmfInit::Identity => "identity".to_string(),
                    NmfInit::AbsNormal(s) => format!("abs-normal:{s}"),
                }
            ),
            format!("rho0 = {}", self.rho0),
            format!("contraction = {}", self.contraction),
            format!("residual_bound0 = {}", self.residual_bound0),
            format!("residual_decay = {}", self.residual_decay),
            format!("tolerance0 = {}", self.tolerance0),
            format!("tolerance_decay = {}", self.tolerance_decay),
            format!("outer_iters = {}", self.outer_iters),
            format!("inner_cap = {}", self.inner_cap),
            format!("batch_growth = {}", self.batch_growth),
            format!("seed = {}", self.seed),
            format!(
                "data = {}",
                match &self.data {
                    DataSource::Mnist(p) => format!("mnist:{}", p.display()),
                    DataSource::Synth(k) => format!("synth:{}", k.name()),
                }
            ),
            format!("train_size = {}", opt(self.train_size)),
            format!("test_size = {}", opt(self.test_size)),
            format!("synth_features = {}", self.synth_features),
            format!("synth_classes = {}", self.synth_classes),
            format!("synth_rank = {}", self.synth_rank),
            format!("synth_noise = {}", self.synth_noise),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return Err(Error::Config(format!("layers needs at least two positive sizes, got {:?}", self.layers)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.z_steps == 0 {
            return Err(Error::Config("z_steps must be at least 1".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("boundaries must be strictly increasing".into()));
        }
        match self.method {
            Method::BlockAdmm => self.batch_config().validate(self.block_count())?,
            Method::Online => self.online_config().validate(self.block_count())?,
            Method::Sgd | Method::Adam => self.baseline_config().validate()?,
            Method::DeepFacto => {
                self.batch_config().validate(self.block_count())?;
                if self.nmf_position + 1 >= self.block_count() {
                    return Err(Error::Config(format!(
                        "nmf_position {} needs a block after it ({} blocks)",
                        self.nmf_position,
                        self.block_count()
                    )));
                }
            }
            Method::Convergence => {
                self.schedule()?;
            }
            Method::StandardAdmm => {
                let layers = self.layers.len() - 1;
                for (name, v) in [("beta", &self.beta), ("gamma", &self.gamma), ("lambda", &self.lambda)] {
                    if v.len() != 1 && v.len() != layers {
                        return Err(Error::Config(format!("{name} has {} entries for {layers} layers", v.len())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Layer indices (in the flat layer list) where blocks start.
    pub fn layer_boundaries(&self) -> Vec<usize> {
        if self.boundaries.is_empty() {
            // one linear layer per block, with its ReLU
            (1..self.layers.len() - 1).map(|i| 2 * i).collect()
        } else {
            self.boundaries.clone()
        }
    }

    pub fn block_count(&self) -> usize {
        self.layer_boundaries().len() + 1
    }

    pub fn build_layers(&self, rng: &mut Rng) -> Result<Vec<Layer>> {
        dense_layers(&self.layers, self.bias, self.init, rng)
    }

    pub fn build_blocks(&self, rng: &mut Rng) -> Result<Vec<Block>> {
        let layers = self.build_layers(rng)?;
        let b = if self.boundaries.is_empty() { boundaries_per_linear(&layers) } else { self.boundaries.clone() };
        split_network(layers, &b)
    }

    /// Like [`Self::build_blocks`], but the first linear layer after the NMF
    /// insert reads `nmf_rank` scores instead of the full activation.
    pub fn build_deepfacto_blocks(&self, rng: &mut Rng) -> Result<Vec<Block>> {
        let mut blocks = self.build_blocks(rng)?;
        let next = self.nmf_position + 1;
        if next >= blocks.len() {
            return Err(Error::Config(format!("nmf_position {} needs a block after it", self.nmf_position)));
        }
        let mut layers = blocks[next].clone().into_layers();
        let first = layers
            .iter_mut()
            .find_map(|l| match l {
                Layer::Linear(lin) => Some(lin),
                Layer::Relu => None,
            })
            .ok_or_else(|| Error::Config("the block after the NMF insert has no linear layer".into()))?;
        first.weight = self.init.sample(first.weight.rows(), self.nmf_rank, rng)?;
        blocks[next] = Block::new(next, layers)?;
        Ok(blocks)
    }

    /// Training and test sets, subset or generated according to the config.
    pub fn load_data(&self, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Mnist(dir) => {
                let mut train = load_mnist_dir(dir, Split::Train)?;
                let mut test = load_mnist_dir(dir, Split::Test)?;
                if let Some(n) = self.train_size {
                    train = train.stratified_subset(n, rng)?;
                }
                if let Some(n) = self.test_size {
                    test = test.stratified_subset(n, rng)?;
                }
                Ok((train, test))
            }
            DataSource::Synth(kind) => {
                let synth = synth_gen(&self.synth_spec(*kind), rng)?;
                Ok((synth.train, synth.test))
            }
        }
    }

    pub fn synth_spec(&self, kind: SynthKind) -> SynthSpec {
        let d = SynthSpec::default();
        SynthSpec {
            kind,
            features: self.synth_features,
            classes: self.synth_classes,
            train: self.train_size.unwrap_or(d.train),
            test: self.test_size.unwrap_or(d.test),
            rank: self.synth_rank,
            noise: self.synth_noise,
        }
    }

    pub fn batch_config(&self) -> BatchAdmmConfig {
        BatchAdmmConfig {
            beta: self.beta.clone(),
            z_lr: self.z_lr.clone(),
            theta_lr: self.theta_lr.clone(),
            primal_steps: self.primal_steps,
            repeat: self.repeat,
            batch_size: self.batch_size,
            theta_steps: self.theta_steps,
            z_optimizer: self.z_optimizer,
            theta_optimizer: self.theta_optimizer,
            dual_init: self.dual_init,
            loss: self.loss,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn online_config(&self) -> OnlineConfig {
        OnlineConfig {
            beta: self.beta.clone(),
            z_lr: self.z_lr.clone(),
            theta_lr: self.theta_lr.clone(),
            z_steps: self.z_steps,
            batch_size: self.batch_size,
            z_optimizer: self.z_optimizer,
            theta_optimizer: self.theta_optimizer,
            form: self.online_form,
            loss: self.loss,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn standard_config(&self) -> StandardAdmmConfig {
        StandardAdmmConfig {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            lambda: self.lambda.clone(),
            loss: self.loss,
            epochs: self.epochs,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            optimizer: if self.method == Method::Sgd { OptimizerKind::Sgd } else { OptimizerKind::Adam },
            lr: self.lr,
            batch_size: self.batch_size,
            loss: self.loss,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn deepfacto_config(&self) -> DeepFactoConfig {
        DeepFactoConfig {
            admm: self.batch_config(),
            position: self.nmf_position,
            rank: self.nmf_rank,
            gamma: self.gamma[0],
            phase1_iters: self.nmf_phase1_iters,
            phase1_tol: self.nmf_phase1_tol,
            init: self.nmf_init,
            ..Default::default()
        }
    }

    pub fn schedule(&self) -> Result<PenaltySchedule> {
        PenaltySchedule::new(
            self.rho0,
            self.contraction,
            self.residual_bound0,
            self.residual_decay,
            self.tolerance0,
            self.tolerance_decay,
        )
    }

    pub fn convergence_config(&self) -> Result<ConvergenceConfig> {
        Ok(ConvergenceConfig {
            admm: self.batch_config(),
            schedule: self.schedule()?,
            outer_iters: self.outer_iters,
            inner_cap: self.inner_cap,
            batch0: self.batch_size,
            batch_growth: self.batch_growth,
        })
    }
}
