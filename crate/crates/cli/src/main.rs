use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use groupformer::ablation::{run_ablation, to_csv, Plan};
use groupformer::checkpoint::Checkpoint;
use groupformer::config::{DataConfig, RunConfig};
use groupformer::cstt::Variant;
use groupformer::gradcheck::check_model;
use groupformer::synth::{Batch, Dataset, Split};
use groupformer::training::{evaluate, train_with};

/// GroupFormer on synthetic multi-agent clips.
#[derive(Parser, Debug)]
#[command(name = "groupformer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the dataset described by the config as CSTT binary + JSON sidecar.
    Gen(Common),
    /// Train, writing metrics.jsonl and checkpoints/.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate [default: <out>/checkpoints/best.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Finite-difference check of every model parameter.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Clips in the checked batch.
        #[arg(long, default_value_t = 2)]
        clips: usize,
    },
    /// Train one model per ablation arm and write ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// variants | clusters | attention | blocks
        #[arg(long, default_value = "variants")]
        plan: String,
        /// Explicit arms, overriding --plan (e.g. ours,clusters=2,intra=off+inter=on).
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
    },
    /// Write the cluster assignment of every individual to clusters.json.
    ExportClusters {
        #[command(flatten)]
        common: Common,
        /// Model to run [default: freshly initialized from the config].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Number of clips to export.
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run config; without it the built-in defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, value_parser = ["baseline", "spatial", "stacked", "parallel", "ours"])]
    variant: Option<String>,
    #[arg(long)]
    no_grg: bool,
    #[arg(long, value_enum)]
    intra: Option<Switch>,
    #[arg(long, value_enum)]
    inter: Option<Switch>,
}

impl Common {
    /// Config file (or `fallback`) with flag overrides applied.
    fn resolve(&self, fallback: impl FnOnce(u64) -> RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => fallback(self.seed.unwrap_or(0)),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(c) = self.clusters {
            cfg.model.clusters = c;
        }
        if let Some(b) = self.blocks {
            cfg.model.blocks = b;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = Variant::parse(v)?;
        }
        if self.no_grg {
            cfg.model.grg = false;
        }
        if let Some(s) = self.intra {
            cfg.model.intra = s == Switch::On;
        }
        if let Some(s) = self.inter {
            cfg.model.inter = s == Switch::On;
        }
        cfg.sync_model_dims();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    seed: u64,
    version: String,
    out_dir: &'a Path,
}

fn write_manifest(command: &str, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let manifest = RunManifest {
        command,
        config: cfg,
        seed: cfg.seed,
        version: format!("groupformer {}", env!("CARGO_PKG_VERSION")),
        out_dir: out,
    };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn default_run(seed: u64) -> RunConfig {
    RunConfig::new(seed, DataConfig::with_clips(2000))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let cfg = common.resolve(default_run)?;
            write_manifest("gen", &cfg, &common.out)?;
            let data = Dataset::generate(&cfg.generator(), cfg.data.clips)?;
            data.export(&common.out, "dataset")?;
            println!(
                "wrote {} clips to {}",
                data.len(),
                common.out.join("dataset.bin").display()
            );
        }
        Command::Train(common) => {
            let cfg = common.resolve(default_run)?;
            let out = &common.out;
            write_manifest("train", &cfg, out)?;
            let data = Dataset::generate(&cfg.generator(), cfg.data.clips)?;
            let path = out.join("metrics.jsonl");
            let mut metrics = BufWriter::new(File::create(&path).with_context(|| format!("cannot write {}", path.display()))?);
            let outcome = train_with(&cfg, &data, |rec| {
                let line = serde_json::to_string(rec).expect("epoch record serializes");
                writeln!(metrics, "{line}")
                    .and_then(|_| metrics.flush())
                    .map_err(|e| groupformer::Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                if let Some(v) = &rec.val {
                    eprintln!(
                        "epoch {} loss {:.4} val group {:.4} ind {:.4}",
                        rec.epoch, rec.train_loss, v.group_acc, v.ind_acc
                    );
                }
                Ok(())
            })?;
            let dir = out.join("checkpoints");
            outcome.best.save(&dir.join("best.ckpt"))?;
            outcome.last.save(&dir.join("last.ckpt"))?;
            match outcome.history.last().and_then(|r| r.val.as_ref()) {
                Some(m) => println!("group_acc {:.6} ind_acc {:.6}", m.group_acc, m.ind_acc),
                None => println!("trained 0 epochs"),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let path = checkpoint.unwrap_or_else(|| common.out.join("checkpoints").join("best.ckpt"));
            let ckpt = Checkpoint::load(&path)?;
            let cfg = if common.config.is_some() {
                let cfg = common.resolve(default_run)?;
                ckpt.ensure_compatible(&cfg.model)?;
                cfg
            } else {
                ckpt.config.clone()
            };
            write_manifest("eval", &cfg, &common.out)?;
            let model = ckpt.to_model()?;
            let data = Dataset::generate(&cfg.generator(), cfg.data.clips)?;
            let clips = data.split(split.into());
            if clips.is_empty() {
                bail!("split {split:?} is empty");
            }
            let m = evaluate(&model, &clips, cfg.train.batch_size)?;
            let eval_path = common.out.join("eval.json");
            std::fs::write(&eval_path, serde_json::to_string_pretty(&m)? + "\n")
                .with_context(|| format!("cannot write {}", eval_path.display()))?;
            println!("group_acc {:.6} ind_acc {:.6}", m.group_acc, m.ind_acc);
        }
        Command::Gradcheck {
            common,
            tol,
            step,
            clips,
        } => {
            let cfg = common.resolve(RunConfig::tiny)?;
            write_manifest("gradcheck", &cfg, &common.out)?;
            let report = check_model(&cfg, clips, step, tol)?;
            for p in report.failures() {
                println!("FAIL {} max_rel_error {:.3e}", p.name, p.max_rel_error);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "max_rel_error {:.3e} tol {:.0e} skipped {} {verdict}",
                report.max_rel_error(),
                tol,
                report.skipped()
            );
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Ablate { common, plan, arms } => {
            let cfg = common.resolve(default_run)?;
            write_manifest("ablate", &cfg, &common.out)?;
            let arms = if arms.is_empty() { Plan::parse(&plan)?.arms() } else { arms };
            let data = Dataset::generate(&cfg.generator(), cfg.data.clips)?;
            let rows = run_ablation(&arms, &cfg, &data, |r| {
                eprintln!("{} group {:.4} ind {:.4}", r.arm, r.group_acc, r.ind_acc);
            })?;
            let csv = to_csv(&rows);
            let path = common.out.join("ablation.csv");
            std::fs::write(&path, &csv).with_context(|| format!("cannot write {}", path.display()))?;
            print!("{csv}");
        }
        Command::ExportClusters {
            common,
            checkpoint,
            split,
            clips,
        } => {
            let (cfg, model) = match checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    let cfg = if common.config.is_some() {
                        let cfg = common.resolve(default_run)?;
                        ckpt.ensure_compatible(&cfg.model)?;
                        cfg
                    } else {
                        ckpt.config.clone()
                    };
                    (cfg, ckpt.to_model()?)
                }
                None => {
                    let cfg = common.resolve(default_run)?;
                    let model = groupformer::model::GroupFormer::new(
                        &cfg.model,
                        cfg.stream_seed(groupformer::config::SeedStream::Init),
                        cfg.stream_seed(groupformer::config::SeedStream::Kmeans),
                    )?;
                    (cfg, model)
                }
            };
            write_manifest("export-clusters", &cfg, &common.out)?;
            let data = Dataset::generate(&cfg.generator(), cfg.data.clips)?;
            let chosen: Vec<_> = data.split(split.into()).into_iter().take(clips.max(1)).collect();
            let batch = Batch::stack(&chosen)?;
            let (_, trace) = model.predict_traced(&batch)?;
            let entries = export::cluster_entries(&trace, &chosen, cfg.data.frames, cfg.data.individuals);
            let path = common.out.join("clusters.json");
            std::fs::write(&path, serde_json::to_string_pretty(&entries)? + "\n")
                .with_context(|| format!("cannot write {}", path.display()))?;
            println!("wrote {} assignments to {}", entries.len(), path.display());
        }
    }
    Ok(())
}

mod export {
    use groupformer::forward::ClusterRecord;
    use groupformer::synth::SyntheticSample;
    use serde::Serialize;

    #[derive(Serialize)]
    pub struct Entry {
        pub clip: usize,
        pub site: String,
        pub frame: usize,
        pub individual: usize,
        pub cluster: usize,
    }

    /// Flatten each record's labels back to `(clip, frame, individual)`;
    /// spatial sites store labels clip/frame/individual-major, temporal
    /// sites clip/individual/frame-major.
    pub fn cluster_entries(trace: &[ClusterRecord], clips: &[&SyntheticSample], t: usize, n: usize) -> Vec<Entry> {
        let mut out = Vec::new();
        for rec in trace {
            let temporal = rec.site.ends_with(".temporal");
            for (k, &cluster) in rec.labels.iter().enumerate() {
                let b = k / (t * n);
                let (frame, individual) = if temporal {
                    (k % t, (k / t) % n)
                } else {
                    ((k / n) % t, k % n)
                };
                out.push(Entry {
                    clip: clips[b].index,
                    site: rec.site.clone(),
                    frame,
                    individual,
                    cluster,
                });
            }
        }
        out
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use groupformer::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Config(_)) => "config",
        Some(E::Incompatible(_)) => "incompatible",
        Some(E::Io { .. }) => "io",
        Some(E::Format(_)) => "format",
        Some(E::NonFinite { .. }) => "nonfinite",
        Some(E::Shape { .. }) | Some(E::Contract(_)) => "internal",
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "failed",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", error_kind(&e), one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
