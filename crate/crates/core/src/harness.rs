//! Experiment configuration and the two desk-scale experiments: singular
//! value suppression with and without the regularizer, and the four
//! rank × initialization compression paths.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::{compress_network, CompressionReport, Source};
use crate::data::{load_mnist, resolve_data_dir, Split};
use crate::error::{Error, Result};
use crate::nn::{
    accuracy, build_network, lenet5_with_inserted_conv, save_network, toy_mnist, LayerSpec, Network, Shape3,
    TrainConfig, TOY_MNIST_INPUT,
};
use crate::nrmf::{select_network_ranks, train, write_rank_csv, Penalty, RankMethod, RankPair, Samples, SvTrajectory, TrainOptions};
use crate::vbmf::vbmf_network_ranks;

/// Default data location inside the repository.
pub const REPO_DATA_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRecipe {
    /// LeNet-5 with an inserted 3×3×16×32 conv.
    LenetDesk,
    /// LeNet-5 with an inserted 3×3×128×256 conv.
    LenetFull,
    /// Three-conv classifier on 14×14 digits.
    Toy,
}

impl ModelRecipe {
    pub fn layers(self) -> Vec<LayerSpec> {
        match self {
            ModelRecipe::LenetDesk => lenet5_with_inserted_conv(16, 32),
            ModelRecipe::LenetFull => lenet5_with_inserted_conv(128, 256),
            ModelRecipe::Toy => toy_mnist(),
        }
    }

    pub fn input(self) -> Shape3 {
        match self {
            ModelRecipe::Toy => TOY_MNIST_INPUT,
            _ => [28, 28, 1],
        }
    }

    /// Average-pooling factor applied to 28×28 digits.
    pub fn pool(self) -> usize {
        28 / self.input()[0]
    }
}

/// Flat experiment configuration; every key is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelRecipe,
    /// Directory with the IDX files; falls back to `$NRMF_DATA_DIR`, then the
    /// repository copy.
    pub data_dir: Option<PathBuf>,
    /// Subsample sizes; 0 keeps the whole split.
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
    /// Weight initialization and minibatch order.
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub p: f64,
    pub penalty: Penalty,
    pub method: RankMethod,
    /// Layers whose spectra are logged; empty means every regularized layer.
    pub monitored: Vec<usize>,
    /// Optional stage before the two arms of the four-path experiment.
    pub pretrain_epochs: usize,
    pub pretrain_alpha: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Start the four-path experiment from saved arms instead of training.
    pub plain_checkpoint: Option<PathBuf>,
    pub regularized_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelRecipe::LenetDesk,
            data_dir: None,
            train_samples: 5000,
            test_samples: 1000,
            data_seed: 0,
            seed: 0,
            batch_size: 64,
            lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 1000,
            epochs: 5,
            alpha: 1e-2,
            p: 0.95,
            penalty: Penalty::GramTrace,
            method: RankMethod::Nrmf,
            monitored: Vec::new(),
            pretrain_epochs: 0,
            pretrain_alpha: 0.0,
            finetune_epochs: 5,
            finetune_lr: 0.01,
            plain_checkpoint: None,
            regularized_checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.finetune_config().validate()?;
        if !(self.pretrain_alpha >= 0.0 && self.pretrain_alpha.is_finite()) {
            return Err(Error::Config("pretrain_alpha must be non-negative".into()));
        }
        if self.method == RankMethod::Full {
            return Err(Error::Config("method must be nrmf or vbmf".into()));
        }
        for p in [&self.plain_checkpoint, &self.regularized_checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            epochs: self.epochs,
            alpha: self.alpha,
            seed: self.seed,
            p: self.p,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { lr: self.finetune_lr, epochs: self.finetune_epochs, alpha: 0.0, ..self.train_config() }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            monitored: if self.monitored.is_empty() { None } else { Some(self.monitored.clone()) },
            penalty: self.penalty,
        }
    }

    pub fn initial_network(&self) -> Result<Network> {
        build_network(&self.model.layers(), self.model.input(), self.seed)
    }

    /// Normalized train and test samples for the configured model.
    pub fn load_data(&self) -> Result<(Samples, Samples)> {
        let dir = resolve_data_dir(self.data_dir.as_deref(), Path::new(REPO_DATA_DIR));
        let pick = |split, n: usize, salt: u64| -> Result<Samples> {
            let d = load_mnist(&dir, split)?;
            let d = if n == 0 { d } else { d.subsample(n, self.data_seed.wrapping_add(salt)) };
            d.to_samples(self.model.pool())
        };
        Ok((pick(Split::Train, self.train_samples, 0)?, pick(Split::Test, self.test_samples, 1)?))
    }
}

pub fn test_accuracy(net: &Network, test: &Samples) -> Result<f64> {
    accuracy(net, &test.images, &test.labels, 256)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_trajectories(dir: &Path, trajectories: &[SvTrajectory]) -> Result<()> {
    for t in trajectories {
        let mut w = create(&dir.join(format!("layer{:02}.csv", t.layer)))?;
        t.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn write_ranks(path: &Path, ranks: &[RankPair]) -> Result<()> {
    let mut w = create(path)?;
    write_rank_csv(&mut w, ranks)?;
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, report: &CompressionReport) -> Result<()> {
    let mut w = create(path)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Ranks of every regularized layer by the given method.
pub fn network_ranks(net: &Network, method: RankMethod, p: f64) -> Result<Vec<RankPair>> {
    match method {
        RankMethod::Nrmf => select_network_ranks(net, p),
        RankMethod::Vbmf => vbmf_network_ranks(net),
        RankMethod::Full => Ok(net
            .regularized_layers()
            .into_iter()
            .map(|id| net.conv(id).map(|c| RankPair::full(id, &c.kernel)))
            .collect::<Result<_>>()?),
    }
}

/// Energy trend of one monitored layer in one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: &'static str,
    pub alpha: f64,
    pub layer: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub xi_start: f64,
    pub xi_end: f64,
    /// Σλ never increases from epoch 1 onward.
    pub monotone_after_first: bool,
}

impl ArmSummary {
    pub fn decreased(&self) -> bool {
        self.lambda_end < self.lambda_start
    }
}

#[derive(Clone, Debug)]
pub struct SvExperiment {
    pub regularized: Vec<SvTrajectory>,
    pub plain: Vec<SvTrajectory>,
    pub summary: Vec<ArmSummary>,
}

pub const SV_SUMMARY_HEADER: &str =
    "arm,alpha,layer,sum_lambda_start,sum_lambda_end,sum_xi_start,sum_xi_end,monotone_after_first,trend";

fn summarize(arm: &'static str, alpha: f64, trajectories: &[SvTrajectory]) -> Vec<ArmSummary> {
    trajectories
        .iter()
        .filter_map(|t| {
            let e = t.energies();
            let (first, last) = (e.first()?, e.last()?);
            Some(ArmSummary {
                arm,
                alpha,
                layer: t.layer,
                lambda_start: first.1,
                lambda_end: last.1,
                xi_start: first.2,
                xi_end: last.2,
                monotone_after_first: e.iter().skip(1).zip(e.iter().skip(2)).all(|(a, b)| b.1 <= a.1),
            })
        })
        .collect()
}

/// Train twice from the same initialization, with `spec.alpha` and with no
/// regularizer, logging spectra of the monitored layers every epoch.
///
/// Writes `trajectories/{regularized,plain}/layerNN.csv`, `ranks/nrmf.csv`
/// for the regularized arm, `checkpoints/{regularized,plain}/` and the
/// summary as `report.csv`.
pub fn run_sv_experiment(spec: &ExperimentSpec) -> Result<SvExperiment> {
    spec.validate()?;
    let (train_set, _) = spec.load_data()?;
    let net = spec.initial_network()?;
    let opts = spec.train_options();
    let reg_cfg = spec.train_config();
    let plain_cfg = TrainConfig { alpha: 0.0, ..reg_cfg.clone() };
    let reg = train(&net, &reg_cfg, &train_set, &opts)?;
    let plain = train(&net, &plain_cfg, &train_set, &opts)?;

    let out = &spec.out_dir;
    write_trajectories(&out.join("trajectories/regularized"), &reg.trajectories)?;
    write_trajectories(&out.join("trajectories/plain"), &plain.trajectories)?;
    write_ranks(&out.join("ranks/nrmf.csv"), &select_network_ranks(&reg.net, spec.p)?)?;
    save_network(&reg.net, &out.join("checkpoints/regularized"))?;
    save_network(&plain.net, &out.join("checkpoints/plain"))?;

    let mut summary = summarize("regularized", spec.alpha, &reg.trajectories);
    summary.extend(summarize("plain", 0.0, &plain.trajectories));
    let mut w = create(&out.join("report.csv"))?;
    writeln!(w, "{SV_SUMMARY_HEADER}")?;
    for s in &summary {
        writeln!(
            w,
            "{},{:e},{},{:e},{:e},{:e},{:e},{},{}",
            s.arm,
            s.alpha,
            s.layer,
            s.lambda_start,
            s.lambda_end,
            s.xi_start,
            s.xi_end,
            s.monotone_after_first,
            if s.decreased() { "decreasing" } else { "non-decreasing" }
        )?;
    }
    w.flush()?;
    Ok(SvExperiment { regularized: reg.trajectories, plain: plain.trajectories, summary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    /// `a`..`d`.
    pub path: char,
    pub ranks: RankMethod,
    pub init: RankMethod,
    pub report: CompressionReport,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

#[derive(Clone, Debug)]
pub struct FourPaths {
    /// Accuracy of the uncompressed, unregularized model.
    pub baseline_accuracy: f64,
    pub vbmf_ranks: Vec<RankPair>,
    pub nrmf_ranks: Vec<RankPair>,
    pub paths: Vec<PathResult>,
}

pub const FOUR_PATHS_HEADER: &str =
    "path,ranks,init,original_params,compressed_params,ratio,accuracy_before,accuracy_after,baseline_accuracy";

impl FourPaths {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FOUR_PATHS_HEADER}")?;
        for p in &self.paths {
            let (o, c) = (p.report.total_original(), p.report.total_compressed());
            writeln!(
                w,
                "{},{},{},{o},{c},{:.6},{:.4},{:.4},{:.4}",
                p.path,
                p.ranks,
                p.init,
                o as f64 / c as f64,
                p.accuracy_before,
                p.accuracy_after,
                self.baseline_accuracy
            )?;
        }
        Ok(())
    }
}

/// Compress, fine-tune and score the four combinations of {VBMF, NRMF}
/// ranks × {VBMF, NRMF} initialization. Paths a and d factorize the plain
/// and regularized models at their own ranks; b and c swap ranks on those
/// factorizations. Inputs are not modified.
pub fn four_paths_from(
    spec: &ExperimentSpec,
    plain: &Network,
    regularized: &Network,
    vbmf_ranks: &[RankPair],
    nrmf_ranks: &[RankPair],
    train_set: &Samples,
    test_set: &Samples,
) -> Result<FourPaths> {
    let (a, ra) = compress_network(plain, vbmf_ranks, Source::FreshDecompose)?;
    let (d, rd) = compress_network(regularized, nrmf_ranks, Source::FreshDecompose)?;
    let (b, rb) = compress_network(&a, nrmf_ranks, Source::RankSwap)?;
    let (c, rc) = compress_network(&d, vbmf_ranks, Source::RankSwap)?;
    let ft = spec.finetune_config();
    let opts = TrainOptions { monitored: Some(Vec::new()), penalty: spec.penalty };
    let mut paths = Vec::with_capacity(4);
    let combos = [
        ('a', RankMethod::Vbmf, RankMethod::Vbmf, a, ra),
        ('b', RankMethod::Nrmf, RankMethod::Vbmf, b, rb),
        ('c', RankMethod::Vbmf, RankMethod::Nrmf, c, rc),
        ('d', RankMethod::Nrmf, RankMethod::Nrmf, d, rd),
    ];
    for (path, ranks, init, net, report) in combos {
        let accuracy_before = test_accuracy(&net, test_set)?;
        let tuned = if ft.epochs > 0 { train(&net, &ft, train_set, &opts)?.net } else { net };
        let accuracy_after = test_accuracy(&tuned, test_set)?;
        save_network(&tuned, &spec.out_dir.join(format!("checkpoints/path_{path}")))?;
        paths.push(PathResult { path, ranks, init, report, accuracy_before, accuracy_after });
    }
    Ok(FourPaths {
        baseline_accuracy: test_accuracy(plain, test_set)?,
        vbmf_ranks: vbmf_ranks.to_vec(),
        nrmf_ranks: nrmf_ranks.to_vec(),
        paths,
    })
}

/// Full pipeline: optional pretraining, a plain and a regularized arm from
/// the pretrained weights (or the configured checkpoints), VBMF ranks on the
/// plain arm, NRMF ranks on the regularized arm, then [`four_paths_from`].
///
/// Writes `ranks/{vbmf,nrmf}.csv`, `checkpoints/{plain,regularized,path_*}/`
/// and the four rows as `report.csv`.
pub fn run_four_paths(spec: &ExperimentSpec) -> Result<FourPaths> {
    spec.validate()?;
    let (train_set, test_set) = spec.load_data()?;
    let quiet = TrainOptions { monitored: Some(Vec::new()), penalty: spec.penalty };
    let cfg = spec.train_config();
    let (plain, regularized) = match (&spec.plain_checkpoint, &spec.regularized_checkpoint) {
        (Some(p), Some(r)) => (crate::nn::load_network(p)?, crate::nn::load_network(r)?),
        (None, None) => {
            let mut net = spec.initial_network()?;
            if spec.pretrain_epochs > 0 {
                let pre = TrainConfig { epochs: spec.pretrain_epochs, alpha: spec.pretrain_alpha, ..cfg.clone() };
                net = train(&net, &pre, &train_set, &quiet)?.net;
            }
            let plain = train(&net, &TrainConfig { alpha: 0.0, ..cfg.clone() }, &train_set, &quiet)?.net;
            let reg = train(&net, &cfg, &train_set, &quiet)?.net;
            (plain, reg)
        }
        _ => return Err(Error::Config("give both plain_checkpoint and regularized_checkpoint, or neither".into())),
    };
    let vbmf_ranks = vbmf_network_ranks(&plain)?;
    let nrmf_ranks = select_network_ranks(&regularized, spec.p)?;
    let out = &spec.out_dir;
    write_ranks(&out.join("ranks/vbmf.csv"), &vbmf_ranks)?;
    write_ranks(&out.join("ranks/nrmf.csv"), &nrmf_ranks)?;
    if spec.plain_checkpoint.is_none() {
        save_network(&plain, &out.join("checkpoints/plain"))?;
        save_network(&regularized, &out.join("checkpoints/regularized"))?;
    }
    let result = four_paths_from(spec, &plain, &regularized, &vbmf_ranks, &nrmf_ranks, &train_set, &test_set)?;
    let mut w = create(&out.join("report.csv"))?;
    result.write_csv(&mut w)?;
    w.flush()?;
    Ok(result)
}
