//! Command-line driver. Every subcommand is a thin sequence of library
//! calls; exit codes are 0 on success, 1 on usage errors and 2 on runtime
//! failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    cost_report, grid_csv, grid_table, model_gradcheck, op_suite, shrink_grid, GradcheckConfig, GRID_STEPS,
};
use crate::arch::{build_model, NetworkSpec};
use crate::checkpoint::Checkpoint;
use crate::data::{derive_rng, make_synthetic_dataset, read_index, ImageSet, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{average_results, distance_matrix, evaluate, DistMat, EvalResult, Labels, Metric};
use crate::introspect::{activation_maps, collect_gating, kmeans, nearest};
use crate::tensor::{load_tensor, save_tensor, Scalar, Tensor};
use crate::train::{
    extract_features, BatchMode, Features, LossConfig, OptimConfig, OptimKind, Schedule, TrainConfig, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "osnet", version, about = "Omni-scale re-identification network tools")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for initialization, sampling and augmentation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Single-threaded kernels for bitwise-reproducible outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Network spec manifest (key=value lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and multiply-add table.
    Summarize(SummarizeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic multi-scale dataset.
    Synth(SynthArgs),
    Train(TrainArgs),
    /// Write embeddings of an index as a tensor file.
    Extract(ExtractArgs),
    /// CMC and mAP of a query/gallery split.
    Eval(EvalArgs),
    /// Activation maps and gating-vector clusters.
    Introspect(IntrospectArgs),
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Width × resolution multiplier grid instead of the layer table.
    #[arg(long)]
    pub grid: bool,
    /// Also write a comma-separated dump.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    /// Print the output-shape ladder.
    #[arg(long)]
    pub shapes: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only the primitive op suite.
    #[arg(long, conflicts_with = "model_only")]
    pub ops_only: bool,
    /// Only the full model.
    #[arg(long)]
    pub model_only: bool,
    /// Batch of the model check; train-mode batch norm over two samples is
    /// too ill-conditioned for finite differences.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub op_tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub model_tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ids: usize,
    #[arg(long, default_value_t = 40)]
    pub per_id: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Images per identity in the training split; the rest form query
    /// (camera 0) and gallery (camera 1).
    #[arg(long, default_value_t = 20)]
    pub train_per_id: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training index file.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Metrics log (`epoch,lr,loss,acc`).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint; the spec comes from it.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Identity sampling with P identities × K images (`P,K`).
    #[arg(long, value_name = "P,K")]
    pub pk: Option<String>,
    #[arg(long, value_enum, default_value_t = OptimName::Amsgrad)]
    pub optimizer: OptimName,
    #[arg(long, default_value_t = 0.0015)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// `constant`, `step:M1/M2/...:FACTOR` or `cosine:T[:MIN]`.
    #[arg(long, default_value = "constant")]
    pub schedule: String,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long, default_value_t = 0.0)]
    pub triplet_weight: f64,
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    #[arg(long)]
    pub no_erase: bool,
    #[arg(long)]
    pub random_patch: bool,
    /// Epochs during which only `--open-layers` are trained.
    #[arg(long, default_value_t = 0)]
    pub fixbase_epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "classifier")]
    pub open_layers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimName {
    Amsgrad,
    Sgd,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Index file of the images to embed.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Output tensor file (n, feature_dim).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// ℓ2-normalize every embedding.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Query index files; several pairs are averaged as random splits.
    #[arg(long, value_name = "FILE", required = true)]
    pub query: Vec<PathBuf>,
    /// Gallery index files, paired with `--query` in order.
    #[arg(long, value_name = "FILE", required = true)]
    pub gallery: Vec<PathBuf>,
    /// Embed both sides with this checkpoint.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["query_features", "distmat"])]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed query embeddings, one file per split.
    #[arg(long, value_name = "FILE", requires = "gallery_features", conflicts_with = "distmat")]
    pub query_features: Vec<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "query_features")]
    pub gallery_features: Vec<PathBuf>,
    /// Precomputed (query × gallery) distance tensors, one per split.
    #[arg(long, value_name = "FILE")]
    pub distmat: Vec<PathBuf>,
    #[arg(long, default_value = "euclidean")]
    pub metric: String,
    #[arg(long, default_value_t = 20)]
    pub max_rank: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Write the full report (protocol, mAP, CMC) here.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IntrospectArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Index file of the images to inspect.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Write conv5 activation maps.
    #[arg(long)]
    pub activation_maps: bool,
    /// Cluster last-block gating vectors; options `k=N`, `top=N`, `iters=N`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    pub gating_clusters: Option<Vec<String>>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{}", text);
            0
        }
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

/// Parses and runs `argv` (program name first), returning standard output.
/// Help and version requests return their text.
pub fn run_args<I, S>(argv: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(&cli),
        Err(e) if !e.use_stderr() => Ok(e.to_string()),
        Err(e) => Err(Error::invalid(e.to_string().trim_end())),
    }
}

/// Runs a parsed command and returns its standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let g = &cli.global;
    let go = || match &cli.command {
        Command::Summarize(a) => summarize(g, a),
        Command::Gradcheck(a) => gradcheck_cmd(g, a),
        Command::Synth(a) => synth(g, a),
        Command::Train(a) => match g.precision {
            Precision::F32 => train::<f32>(g, a),
            Precision::F64 => train::<f64>(g, a),
        },
        Command::Extract(a) => match g.precision {
            Precision::F32 => extract::<f32>(a),
            Precision::F64 => extract::<f64>(a),
        },
        Command::Eval(a) => match g.precision {
            Precision::F32 => eval_cmd::<f32>(a),
            Precision::F64 => eval_cmd::<f64>(a),
        },
        Command::Introspect(a) => match g.precision {
            Precision::F32 => introspect::<f32>(g, a),
            Precision::F64 => introspect::<f64>(g, a),
        },
    };
    if g.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(go)
    } else {
        go()
    }
}

fn load_spec(g: &Global, fallback: NetworkSpec) -> Result<NetworkSpec> {
    match &g.spec {
        Some(path) => NetworkSpec::from_manifest(&std::fs::read_to_string(path)?),
        None => Ok(fallback),
    }
}

fn summarize(g: &Global, a: &SummarizeArgs) -> Result<String> {
    let spec = load_spec(g, NetworkSpec::default())?;
    if a.grid {
        let rows = shrink_grid(&spec, &GRID_STEPS, &GRID_STEPS)?;
        if let Some(path) = &a.csv {
            std::fs::write(path, grid_csv(&rows))?;
        }
        return Ok(grid_table(&rows));
    }
    let (model, store) = build_model::<f32>(&spec, g.seed)?;
    let report = cost_report(&model, &store, spec.input_height, spec.input_width)?;
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv())?;
    }
    let mut s = String::new();
    if a.shapes {
        for (name, [c, h, w]) in model.shape_ladder(spec.input_height, spec.input_width)? {
            let _ = writeln!(s, "{:<16} {}x{}x{}", name, h, w, c);
        }
    }
    s.push_str(&report.to_table());
    Ok(s)
}

fn gradcheck_cmd(g: &Global, a: &GradcheckArgs) -> Result<String> {
    let mut s = String::new();
    let mut ok = true;
    if !a.model_only {
        let cfg = GradcheckConfig {
            tolerance: a.op_tolerance,
            seed: g.seed,
            ..Default::default()
        };
        for (name, r) in op_suite(&cfg)? {
            ok &= r.passed();
            let _ = writeln!(s, "{:<20} {}", name, r.summary());
        }
    }
    if !a.ops_only {
        let spec = load_spec(
            g,
            NetworkSpec {
                num_classes: 5,
                ..NetworkSpec::tiny()
            },
        )?;
        let cfg = GradcheckConfig {
            tolerance: a.model_tolerance,
            sample_size: a.samples,
            seed: g.seed,
            ..Default::default()
        };
        let r = model_gradcheck(&spec, a.batch, &cfg)?;
        ok &= r.passed();
        let _ = writeln!(s, "{:<20} {}", "model", r.summary());
    }
    if ok {
        Ok(s)
    } else {
        Err(Error::invalid(format!("{}gradient check failed", s)))
    }
}

fn synth(g: &Global, a: &SynthArgs) -> Result<String> {
    let cfg = SynthConfig {
        num_ids: a.ids,
        images_per_id: a.per_id,
        height: a.height,
        width: a.width,
        ..SynthConfig::default()
    };
    let set = make_synthetic_dataset(&cfg, &mut derive_rng(g.seed, &[]))?;
    let (train, query, gallery) = set.split_by_identity(a.train_per_id)?;
    std::fs::create_dir_all(&a.out)?;
    train.write(&a.out, "train")?;
    query.write(&a.out, "query")?;
    gallery.write(&a.out, "gallery")?;
    Ok(format!(
        "wrote {} images: train {} query {} gallery {}\n",
        set.len(),
        train.len(),
        query.len(),
        gallery.len()
    ))
}

fn load_set(path: &Path, split: Split) -> Result<ImageSet> {
    ImageSet::load(read_index(path, split)?)
}

fn optim_config(a: &TrainArgs) -> Result<OptimConfig> {
    let kind = match a.optimizer {
        OptimName::Amsgrad => OptimKind::amsgrad(),
        OptimName::Sgd => OptimKind::sgd(a.momentum),
    };
    let cfg = OptimConfig {
        kind,
        lr: a.lr,
        weight_decay: a.weight_decay,
        schedule: a.schedule.parse::<Schedule>()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn batch_mode(a: &TrainArgs) -> Result<BatchMode> {
    let Some(pk) = &a.pk else {
        return Ok(BatchMode::Random {
            batch_size: a.batch_size,
        });
    };
    let bad = || Error::invalid(format!("--pk expects P,K, got '{}'", pk));
    let (p, k) = pk.split_once(',').ok_or_else(bad)?;
    Ok(BatchMode::Identity {
        p: p.trim().parse().map_err(|_| bad())?,
        k: k.trim().parse().map_err(|_| bad())?,
    })
}

fn train<T: Scalar>(g: &Global, a: &TrainArgs) -> Result<String> {
    let data = load_set(&a.data, Split::Train)?;
    let optim = optim_config(a)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::<T>::resume(&Checkpoint::load(path)?, optim.clone())?,
        None => {
            let mut spec = load_spec(g, NetworkSpec::default())?;
            if spec.num_classes == 0 {
                spec.num_classes = data.index.num_pids();
            }
            Trainer::<T>::new(&spec, optim.clone(), g.seed)?
        }
    };
    let mut cfg = TrainConfig::new(a.epochs, trainer.model.spec.input_height);
    cfg.batch = batch_mode(a)?;
    cfg.loss = LossConfig {
        label_smoothing: a.label_smoothing,
        triplet_margin: a.margin,
        triplet_weight: a.triplet_weight,
    };
    cfg.optim = optim;
    if a.no_erase {
        cfg.augment.erase = None;
    }
    if a.random_patch {
        cfg.augment.patch = Some(Default::default());
    }
    cfg.seed = g.seed;
    cfg.deterministic = g.deterministic;
    cfg.fixbase_epochs = a.fixbase_epochs;
    cfg.open_layers = a.open_layers.clone();
    cfg.checkpoint = Some(a.out.clone());
    cfg.log = a.log.clone();
    let start = trainer.epoch;
    trainer.run(&data, &cfg)?;
    let mut s = String::new();
    for e in &trainer.log[start.min(trainer.log.len())..] {
        let _ = writeln!(s, "{}", e);
    }
    Ok(s)
}

fn load_model<T: Scalar>(path: &Path) -> Result<(crate::arch::OSNetModel, crate::params::ParamStore<T>)> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let model = ckpt.model()?;
    Ok((model, ckpt.store))
}

fn extract<T: Scalar>(a: &ExtractArgs) -> Result<String> {
    let (model, mut store) = load_model::<T>(&a.checkpoint)?;
    let set = load_set(&a.data, Split::Query)?;
    let f = extract_features(&model, &mut store, &set, a.batch_size, a.normalize)?;
    save_tensor(&a.out, &f.matrix)?;
    Ok(format!("wrote {} x {} features\n", f.len(), f.dim()))
}

fn features_from_file(path: &Path, set: &ImageSet) -> Result<Features> {
    let matrix: Tensor<f32> = load_tensor(path)?;
    let (n, _) = matrix.dims2("features")?;
    if n != set.len() {
        return Err(Error::invalid(format!(
            "{} holds {} rows but its index lists {} images",
            path.display(),
            n,
            set.len()
        )));
    }
    Ok(Features {
        matrix,
        pids: set.index.pids(),
        camids: set.index.camids(),
    })
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> Result<String> {
    let splits = a.query.len();
    if a.gallery.len() != splits {
        return Err(Error::invalid("--query and --gallery must be given the same number of times"));
    }
    for (flag, n) in [
        ("--query-features", a.query_features.len()),
        ("--gallery-features", a.gallery_features.len()),
        ("--distmat", a.distmat.len()),
    ] {
        if n != 0 && n != splits {
            return Err(Error::invalid(format!("{} must be given once per split", flag)));
        }
    }
    let metric: Metric = a.metric.parse()?;
    let mut model = match &a.checkpoint {
        Some(path) => Some(load_model::<T>(path)?),
        None => None,
    };
    let mut results: Vec<EvalResult> = Vec::with_capacity(splits);
    for i in 0..splits {
        let qi = read_index(&a.query[i], Split::Query)?;
        let gi = read_index(&a.gallery[i], Split::Gallery)?;
        let r = if !a.distmat.is_empty() {
            let t: Tensor<f64> = load_tensor(&a.distmat[i])?;
            let (rows, cols) = t.dims2("distmat")?;
            let d = DistMat::new(rows, cols, t.into_data())?;
            let (qp, qc, gp, gc) = (qi.pids(), qi.camids(), gi.pids(), gi.camids());
            evaluate(&d, Labels { pids: &qp, camids: &qc }, Labels { pids: &gp, camids: &gc }, a.max_rank)?
        } else {
            let (q, gal) = (ImageSet::load(qi)?, ImageSet::load(gi)?);
            let (qf, gf) = match &mut model {
                Some((m, store)) => (
                    extract_features(m, store, &q, a.batch_size, false)?,
                    extract_features(m, store, &gal, a.batch_size, false)?,
                ),
                None if !a.query_features.is_empty() => (
                    features_from_file(&a.query_features[i], &q)?,
                    features_from_file(&a.gallery_features[i], &gal)?,
                ),
                None => return Err(Error::invalid("eval needs --checkpoint, --query-features or --distmat")),
            };
            let d = distance_matrix(&qf, &gf, metric)?;
            let mut r = evaluate(&d, Labels::of(&qf), Labels::of(&gf), a.max_rank)?;
            r.protocol.metric = metric.to_string();
            r
        };
        results.push(r);
    }
    let r = average_results(&results)?;
    if let Some(path) = &a.report {
        std::fs::write(path, r.to_report())?;
    }
    Ok(format!("{}\n", r.summary_line()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterOptions {
    pub k: usize,
    pub top: usize,
    pub iters: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            k: 4,
            top: 15,
            iters: 100,
        }
    }
}

impl ClusterOptions {
    /// Parses `k=N`, `top=N` and `iters=N` items.
    pub fn parse(items: &[String]) -> Result<Self> {
        let mut o = ClusterOptions::default();
        for item in items {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected KEY=VALUE, got '{}'", item)))?;
            let v: usize = value
                .parse()
                .map_err(|_| Error::invalid(format!("invalid value '{}' for {}", value, key)))?;
            match key {
                "k" => o.k = v,
                "top" => o.top = v,
                "iters" => o.iters = v,
                _ => return Err(Error::invalid(format!("unknown clustering option '{}'", key))),
            }
        }
        Ok(o)
    }
}

fn introspect<T: Scalar>(g: &Global, a: &IntrospectArgs) -> Result<String> {
    if !a.activation_maps && a.gating_clusters.is_none() {
        return Err(Error::invalid("nothing to do: pass --activation-maps and/or --gating-clusters"));
    }
    let clusters = a.gating_clusters.as_deref().map(ClusterOptions::parse).transpose()?;
    let (model, mut store) = load_model::<T>(&a.checkpoint)?;
    let set = load_set(&a.data, Split::Query)?;
    std::fs::create_dir_all(&a.out)?;
    let mut s = String::new();
    if a.activation_maps {
        let maps = activation_maps(&model, &mut store, &set, a.batch_size)?;
        save_tensor(a.out.join("activation_maps.ostn"), &maps)?;
        let mut manifest = String::from("row,path,pid,camid\n");
        for (i, r) in set.index.records.iter().enumerate() {
            let _ = writeln!(manifest, "{},{},{},{}", i, r.path, r.pid, r.camid);
        }
        std::fs::write(a.out.join("activation_maps.txt"), manifest)?;
        let _ = writeln!(s, "activation maps {:?}", maps.shape());
    }
    if let Some(o) = clusters {
        let records = collect_gating(&model, &mut store, &set, a.batch_size)?;
        let vectors: Vec<Vec<f64>> = records.iter().map(|r| r.vector.clone()).collect();
        let dim = vectors.first().map_or(0, Vec::len);
        let flat: Vec<f64> = vectors.iter().flatten().copied().collect();
        save_tensor(a.out.join("gating.ostn"), &Tensor::from_vec(&[vectors.len(), dim], flat)?)?;
        let km = kmeans(&vectors, o.k, o.iters, g.seed)?;
        let mut manifest = String::from("cluster,size,file\n");
        for (j, center) in km.centers.iter().enumerate() {
            let size = km.assignments.iter().filter(|&&c| c == j).count();
            let name = format!("cluster_{}.txt", j);
            let mut body = String::from("rank,row,path,pid,camid\n");
            for (rank, i) in nearest(&vectors, center, o.top).into_iter().enumerate() {
                let r = &set.index.records[records[i].image];
                let _ = writeln!(body, "{},{},{},{},{}", rank, records[i].image, r.path, r.pid, r.camid);
            }
            std::fs::write(a.out.join(&name), body)?;
            let _ = writeln!(manifest, "{},{},{}", j, size, name);
        }
        let objective = km.objective.last().copied().unwrap_or(0.0);
        let _ = writeln!(manifest, "# objective={:.6} converged={}", objective, km.converged);
        std::fs::write(a.out.join("clusters.txt"), manifest)?;
        let _ = writeln!(
            s,
            "gating vectors {} x {}, {} clusters, objective {:.6}",
            vectors.len(),
            dim,
            o.k,
            objective
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_options() {
        let o = ClusterOptions::parse(&["k=3".into(), "top=5".into()]).unwrap();
        assert_eq!((o.k, o.top, o.iters), (3, 5, 100));
        assert!(ClusterOptions::parse(&["x=1".into()]).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["osnet", "frobnicate"]), 1);
        assert_eq!(dispatch(["osnet", "summarize", "--bogus"]), 1);
    }
}
