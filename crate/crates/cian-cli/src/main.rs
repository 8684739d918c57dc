//! Command-line entry point: synthetic data generation, training,
//! evaluation, explanation and embedding export, one subcommand each.
//!
//! Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numeric failure.

use cian_core::{
    aggregate_category_attention, build_pairs, evaluate, explain_merchant, generate_dataset,
    init_params, load_checkpoint, read_jsonl, save_checkpoint, write_jsonl, Error, GeneratorConfig,
    MerchantRecord, ModelConfig, PackageOp, PairSample, PartnerPolicy, TrainHyper, Variant,
};
use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cian", version, about = "Transaction-text matching model and explainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Fc,
    Intra,
    Cross,
    Both,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Fc => Variant::Fc,
            VariantArg::Intra => Variant::IntraOnly,
            VariantArg::Cross => Variant::CrossOnly,
            VariantArg::Both => Variant::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PackageOpArg {
    Dot,
    Gaussian,
    KernelGaussian,
}

impl From<PackageOpArg> for PackageOp {
    fn from(op: PackageOpArg) -> PackageOp {
        match op {
            PackageOpArg::Dot => PackageOp::DotProduct,
            PackageOpArg::Gaussian => PackageOp::Gaussian,
            PackageOpArg::KernelGaussian => PackageOp::KernelGaussian,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with train/val/test splits and the
    /// ground-truth sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset; writes checkpoint, loss trace
    /// and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<VariantArg>,
        #[arg(long)]
        package_op: Option<PackageOpArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Select a threshold on validation pairs and report test metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate on the validation split instead of the test split.
        #[arg(long)]
        on_val: bool,
    },
    /// Explain merchants' transaction features; writes per-merchant JSON
    /// lines and a category-aggregate CSV.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated merchant ids.
        #[arg(long, value_delimiter = ',', conflicts_with = "all")]
        merchants: Vec<String>,
        /// Explain every merchant in the dataset.
        #[arg(long)]
        all: bool,
        /// Cross-modal block to explain.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = cian_core::DEFAULT_BUDGET)]
        budget: f64,
        #[arg(long, default_value_t = cian_core::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Export pre- and post-embedding transaction features as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    train: f64,
    val: f64,
    test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    generator: GeneratorConfig,
    train: TrainHyper,
    negatives_per_positive: usize,
    split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainHyper::default(),
            negatives_per_positive: 1,
            split: SplitConfig::default(),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<(), Error> {
        if self.model.t_dim != self.generator.t_dim || self.model.d_dim != self.generator.d_dim {
            return Err(Error::Parameter(format!(
                "model dims ({}, {}) do not match generator dims ({}, {})",
                self.model.t_dim, self.model.d_dim, self.generator.t_dim, self.generator.d_dim
            )));
        }
        let s = &self.split;
        if s.train <= 0.0 || s.val <= 0.0 || s.test <= 0.0 || s.train + s.val + s.test > 1.0 + 1e-9
        {
            return Err(Error::Parameter(format!("invalid split fractions {s:?}")));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Parameter("negatives_per_positive must be >= 1".to_string()));
        }
        Ok(())
    }

    fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        variant: Option<VariantArg>,
        package_op: Option<PackageOpArg>,
        epochs: Option<usize>,
    ) {
        if let Some(seed) = seed {
            self.generator.seed = seed;
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(v) = variant {
            self.model.variant = v.into();
        }
        if let Some(op) = package_op {
            self.model.package_op = op.into();
        }
        if let Some(e) = epochs {
            self.train.epochs = e;
        }
    }
}

/// Configuration problems always exit 2, so config-file I/O failures are
/// reported as parameter errors rather than I/O errors.
fn load_config(path: Option<&Path>, data_dir: Option<&Path>) -> Result<RunConfig, Error> {
    let path = match (path, data_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => {
            let p = dir.join("config.json");
            if !p.exists() {
                return Ok(RunConfig::default());
            }
            p
        }
        (None, None) => return Ok(RunConfig::default()),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parameter(format!("bad config {}: {e}", path.display())))
}

fn write_resolved_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out_dir.join("config.json"), text + "\n")?;
    Ok(())
}

fn split_records(
    records: &[MerchantRecord],
    split: &SplitConfig,
    seed: u64,
) -> (Vec<MerchantRecord>, Vec<MerchantRecord>, Vec<MerchantRecord>) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = cian_core::tensor::seeded_rng(seed.wrapping_add(0x51_17));
    order.shuffle(&mut rng);
    let n = records.len();
    let n_train = (n as f64 * split.train).round() as usize;
    let n_val = (n as f64 * split.val).round() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    (
        take(&order[..n_train]),
        take(&order[n_train..(n_train + n_val).min(n)]),
        take(&order[(n_train + n_val).min(n)..]),
    )
}

/// Split-specific pair seeds, derived from the generator seed so pair
/// construction is reproducible from the resolved config alone.
fn pair_seed(cfg: &RunConfig, split: &str) -> u64 {
    let offset = match split {
        "train" => 1,
        "val" => 2,
        _ => 3,
    };
    cfg.generator.seed.wrapping_mul(1_000_003).wrapping_add(offset)
}

fn load_split(data_dir: &Path, name: &str) -> Result<Vec<MerchantRecord>, Error> {
    read_jsonl(&data_dir.join(format!("{name}.jsonl")))
}

fn load_pairs(data_dir: &Path, cfg: &RunConfig, split: &str) -> Result<Vec<PairSample>, Error> {
    let records = load_split(data_dir, split)?;
    build_pairs(&records, cfg.negatives_per_positive, pair_seed(cfg, split))
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = load_config(config, None)?;
    if config.is_none() && !out.join("config.json").exists() {
        // No explicit config: still honor one already present in `out`.
    }
    cfg.apply_overrides(seed, None, None, None);
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let records = generate_dataset(&cfg.generator)?;
    let (train, val, test) = split_records(&records, &cfg.split, cfg.generator.seed);
    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        write_jsonl(split, &out.join(format!("{name}.jsonl")))?;
        // Fail now, not at training time, if a split cannot form pairs.
        build_pairs(split, cfg.negatives_per_positive, pair_seed(&cfg, name))?;
    }
    let gt = cfg.generator.ground_truth()?;
    let text = serde_json::to_string_pretty(&gt).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out.join("ground_truth.json"), text + "\n")?;
    write_resolved_config(&cfg, out)?;
    log::info!(
        "wrote {} train / {} val / {} test records to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    variant: Option<VariantArg>,
    package_op: Option<PackageOpArg>,
    epochs: Option<usize>,
) -> Result<(), Error> {
    let mut cfg = load_config(config, Some(data))?;
    cfg.apply_overrides(seed, variant, package_op, epochs);
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let train_pairs = load_pairs(data, &cfg, "train")?;
    let val_pairs = load_pairs(data, &cfg, "val")?;
    let mut params = init_params(&cfg.model)?;
    let trace = cian_core::train(&mut params, &cfg.model, &train_pairs, &val_pairs, &cfg.train)?;
    save_checkpoint(&out.join("model.ckpt"), &cfg.model, &params)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("loss_trace.jsonl"))?);
    for epoch in &trace {
        let line = serde_json::to_string(epoch).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    write_resolved_config(&cfg, out)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsOut {
    precision: f64,
    recall: f64,
    f1: f64,
    threshold: f64,
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    on_val: bool,
) -> Result<(), Error> {
    let (model_cfg, params) = load_checkpoint(checkpoint)?;
    let mut cfg = load_config(config, Some(data))?;
    cfg.model = model_cfg;
    cfg.validate()?;
    let val_pairs = load_pairs(data, &cfg, "val")?;
    let scored = cian_core::learning::score_pairs(&val_pairs, &params, &cfg.model)?;
    let threshold = cian_core::select_threshold(&scored)?;
    let eval_pairs =
        if on_val { val_pairs } else { load_pairs(data, &cfg, "test")? };
    let m = evaluate(&eval_pairs, &params, &cfg.model, threshold)?;
    let out_metrics = MetricsOut {
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        threshold: m.threshold,
    };
    std::fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(&out_metrics).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out.join("metrics.json"), text.clone() + "\n")?;
    write_resolved_config(&cfg, out)?;
    println!("{text}");
    Ok(())
}

fn load_all_records(data: &Path) -> Result<Vec<MerchantRecord>, Error> {
    let mut records = Vec::new();
    for name in ["train", "val", "test"] {
        let path = data.join(format!("{name}.jsonl"));
        if path.exists() {
            records.extend(read_jsonl(&path)?);
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no dataset files found in {}", data.display())));
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn cmd_explain(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    merchants: &[String],
    all: bool,
    block: usize,
    budget: f64,
    top_k: usize,
) -> Result<(), Error> {
    if merchants.is_empty() && !all {
        return Err(Error::Parameter(
            "nothing to explain: pass --merchants id,... or --all".to_string(),
        ));
    }
    let (model_cfg, params) = load_checkpoint(checkpoint)?;
    let records = load_all_records(data)?;
    let selected: Vec<&MerchantRecord> = if all {
        records.iter().collect()
    } else {
        let missing: Vec<&String> =
            merchants.iter().filter(|id| !records.iter().any(|r| &r.id == *id)).collect();
        if !missing.is_empty() {
            return Err(Error::Parameter(format!(
                "unknown merchant ids: {}",
                missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        merchants.iter().map(|id| records.iter().find(|r| &r.id == id).unwrap()).collect()
    };

    let mut explanations = Vec::with_capacity(selected.len());
    for rec in selected {
        explanations.push(explain_merchant(rec, &params, &model_cfg, block, budget, top_k)?);
    }

    std::fs::create_dir_all(out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("explanations.jsonl"))?);
    for e in &explanations {
        let line = serde_json::to_string(e).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    drop(f);

    // Aggregate over the union of reported top features.
    let mut features: Vec<usize> =
        explanations.iter().flat_map(|e| e.top_features.iter().map(|t| t.index)).collect();
    features.sort_unstable();
    features.dedup();
    let mut categories: Vec<usize> = explanations.iter().map(|e| e.category).collect();
    categories.sort_unstable();
    categories.dedup();
    let agg = aggregate_category_attention(&explanations, &categories, &features)?;
    let mut w = csv::Writer::from_path(out.join("aggregate.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["category".to_string()];
    header.extend(agg.features.iter().map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for (c, row) in agg.categories.iter().zip(&agg.rows) {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_export_embeddings(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Error> {
    let (model_cfg, params) = load_checkpoint(checkpoint)?;
    let records = load_all_records(data)?;
    let rows = cian_core::export_embeddings(
        &records,
        &params,
        &model_cfg,
        &PartnerPolicy::OwnDescription,
    )?;
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("embeddings.csv"))
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut header = vec!["id".to_string(), "category".to_string()];
    header.extend((0..model_cfg.t_dim).map(|j| format!("t{j}")));
    header.extend((0..model_cfg.common_dim).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for row in &rows {
        let mut rec = vec![row.id.clone(), row.category.to_string()];
        rec.extend(row.raw.iter().map(|x| format!("{x}")));
        rec.extend(row.embedded.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), &out, seed),
        Cmd::Train { config, data, out, seed, variant, package_op, epochs } => {
            cmd_train(config.as_deref(), &data, &out, seed, variant, package_op, epochs)
        }
        Cmd::Eval { checkpoint, data, out, config, on_val } => {
            cmd_eval(&checkpoint, &data, &out, config.as_deref(), on_val)
        }
        Cmd::Explain { checkpoint, data, out, merchants, all, block, budget, top_k } => {
            cmd_explain(&checkpoint, &data, &out, &merchants, all, block, budget, top_k)
        }
        Cmd::ExportEmbeddings { checkpoint, data, out } => {
            cmd_export_embeddings(&checkpoint, &data, &out)
        }
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::Numeric(_) | Error::Degenerate { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CIAN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
