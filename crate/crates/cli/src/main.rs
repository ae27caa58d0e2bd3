use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use partseg_core::eval::{AblationReport, EvalReport, Thresholds};
use partseg_core::image::overlay;
use partseg_core::model::{ModelConfig, Reference};
use partseg_core::synth::{generate_corpus, parse_view_mix, CorpusConfig, Dataset, Split};
use partseg_core::train::trainer::build_ontology;
use partseg_core::train::{
    evaluate, load_checkpoint, run_matrix, train, AblationPlan, GalleryIndex, ReferenceBank, RunConfig, RunResult,
    TrainConfig,
};
use partseg_core::{Image, LabelMap};

#[derive(Parser)]
#[command(name = "partseg", version, about = "Vehicle part segmentation with graph and visual prototypes")]
struct Cli {
    /// Worker threads (default 1, which keeps every run deterministic).
    #[arg(long, global = true, env = "PARTSEG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic vehicle corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 768)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `all`, or a comma list such as `left,right` or `left:2,front:1`.
        #[arg(long, default_value = "all")]
        view_mix: String,
    },
    /// Write the weighted part graph of a corpus's training split.
    BuildGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Exit nonzero when the mIoU falls below this.
        #[arg(long)]
        min_miou: Option<f64>,
    },
    /// Segment one image, retrieving references from a gallery index.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_overlay: Option<PathBuf>,
    },
    /// Build a gallery index from a checkpoint's retrieval embedder.
    Index {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `train`, `val`, `test` or `all`.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// List the nearest gallery entries of a query image.
    Retrieve {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(short = 'k', default_value_t = 5)]
        k: usize,
    },
    /// Run the component, graph-depth and reference-count matrix.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train distinct runs concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Run the gradient, oracle and invariant checks.
    Selftest,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with `[model]`, `[train]`, `[ablation]` and `[thresholds]`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use plain label embeddings instead of graph-refined ones.
    #[arg(long)]
    no_gtp: bool,
    /// Drop visual prototypes from retrieved references.
    #[arg(long)]
    no_vp: bool,
    /// Skip ROI score refinement.
    #[arg(long)]
    no_ram: bool,
    /// Graph attention depth.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
    gat_layers: Option<u64>,
    /// References retrieved per image.
    #[arg(long)]
    refs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    model: ModelConfig,
    train: TrainConfig,
    ablation: AblationPlan,
    thresholds: Thresholds,
}

impl ConfigArgs {
    /// The config file with command-line overrides applied.
    fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => CliConfig::default(),
        };
        let ab = &mut cfg.model.ablation;
        ab.gtp &= !self.no_gtp;
        ab.vp &= !self.no_vp;
        ab.ram &= !self.no_ram;
        if let Some(l) = self.gat_layers {
            let l = l as usize;
            if l != cfg.model.gat.layers {
                cfg.model.gat = partseg_core::model::GatConfig {
                    layers: l,
                    heads: partseg_core::model::GatConfig::with_layers(l).heads,
                    ..cfg.model.gat
                };
            }
        }
        if let Some(k) = self.refs {
            cfg.model.refs = k;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        let run = RunConfig {
            model: cfg.model.clone(),
            train: cfg.train.clone(),
        };
        run.validate()?;
        Ok(cfg)
    }

    fn run(cfg: &CliConfig) -> RunConfig {
        RunConfig {
            model: cfg.model.clone(),
            train: cfg.train.clone(),
        }
    }
}

/// Bad invocations (exit 2) versus failures while running (exit 1).
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<partseg_core::Error> for Failure {
    fn from(e: partseg_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn must_exist(p: &Path, what: &str) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, Failure> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        _ => Err(Failure::Usage(format!("unknown split `{s}` (train, val, test or all)"))),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct EvalFile<'a> {
    checkpoint: &'a Path,
    split: &'a str,
    run: &'a RunConfig,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct PredictFile<'a> {
    checkpoint: &'a Path,
    image: &'a Path,
    run: &'a RunConfig,
    references: Vec<&'a str>,
    scores: &'a [f64],
    presence: &'a [bool],
}

#[derive(Serialize)]
struct AblateFile<'a> {
    config: &'a CliConfig,
    report: &'a AblationReport,
    runs: &'a [RunResult],
    unmet: &'a [String],
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData {
            out,
            count,
            seed,
            view_mix,
        } => {
            let views = parse_view_mix(&view_mix).map_err(|e| Failure::Usage(e.to_string()))?;
            let data = generate_corpus(&CorpusConfig {
                count,
                seed,
                views,
                ..CorpusConfig::default()
            })?;
            data.write(&out)?;
            println!("wrote {} samples to {}", data.samples.len(), out.display());
        }
        Cmd::BuildGraph { data, out } => {
            must_exist(&data, "data directory")?;
            let ds = Dataset::load(&data)?;
            let g = build_ontology(&ds)?;
            std::fs::write(&out, g.serialize()).with_context(|| format!("writing {}", out.display()))?;
            println!("{} edges written to {}", g.num_edges(), out.display());
        }
        Cmd::Train { cfg, data, out } => {
            if let Some(c) = &cfg.config {
                must_exist(c, "config")?;
            }
            must_exist(&data, "data directory")?;
            let resolved = cfg.resolve().map_err(|e| Failure::Usage(format!("{e:#}")))?;
            let ds = Dataset::load(&data)?;
            let outcome = train(&ConfigArgs::run(&resolved), &ds, Some(&out))?;
            if let Some(m) = outcome.metrics.last() {
                println!(
                    "trained {} epochs; final loss {:.4}, val mIoU {}",
                    m.epoch,
                    m.loss,
                    m.val_miou.map_or("-".into(), |v| format!("{v:.2}"))
                );
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            report,
            split,
            min_miou,
        } => {
            must_exist(&ckpt, "checkpoint")?;
            must_exist(&data, "data directory")?;
            let which = parse_split(&split)?;
            let (model, run) = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let bank = ReferenceBank::build(&model, &ds.split(Split::Train))?;
            let samples: Vec<_> = ds
                .samples
                .iter()
                .filter(|s| which.map_or(true, |w| s.record.split == w))
                .collect();
            let r = evaluate(&model, Some(&bank), &samples)?;
            write_json(
                &report,
                &EvalFile {
                    checkpoint: &ckpt,
                    split: &split,
                    run: &run,
                    report: &r,
                },
            )?;
            print!("{}", r.to_text());
            let unmet = Thresholds {
                miou: min_miou,
                ..Thresholds::default()
            }
            .check_eval(&r);
            if !unmet.is_empty() {
                return Err(Failure::Runtime(anyhow!("threshold unmet: {}", unmet.join("; "))));
            }
        }
        Cmd::Predict {
            ckpt,
            image,
            gallery,
            out_mask,
            out_overlay,
        } => {
            must_exist(&ckpt, "checkpoint")?;
            must_exist(&image, "image")?;
            must_exist(&gallery, "gallery")?;
            let (model, run) = load_checkpoint(&ckpt)?;
            let img = Image::read_ppm(&image)?;
            let index = GalleryIndex::load(&gallery)?;
            let mut names = Vec::new();
            let mut refs = Vec::new();
            if model.uses_references() {
                let ds = Dataset::load(&index.info.data)?;
                for hit in index.retrieve(&img, model.cfg.refs)? {
                    let name = &index.gallery.entries[hit.index].name;
                    let s = ds
                        .samples
                        .iter()
                        .find(|s| &s.record.name == name)
                        .ok_or_else(|| anyhow!("gallery entry {name} missing from {}", index.info.data.display()))?;
                    refs.push(Reference {
                        feat: model.reference_features(&s.image.to_tensor())?,
                        mask: s.mask.clone(),
                    });
                    names.push(name.as_str());
                }
            }
            let pred = model.predict(&img, &refs)?;
            pred.label_map.write_pgm(&out_mask)?;
            if let Some(p) = &out_overlay {
                overlay(&img, &pred.label_map)?.write_ppm(p)?;
            }
            let side = out_mask.with_extension("json");
            write_json(
                &side,
                &PredictFile {
                    checkpoint: &ckpt,
                    image: &image,
                    run: &run,
                    references: names,
                    scores: &pred.scores,
                    presence: &pred.presence,
                },
            )?;
            let present: Vec<&str> = LabelMap::present_classes(&pred.label_map)
                .into_iter()
                .map(|c| partseg_core::CLASS_NAMES[c])
                .collect();
            println!("{}: {}", out_mask.display(), present.join(", "));
        }
        Cmd::Index {
            ckpt,
            data,
            out,
            split,
        } => {
            must_exist(&ckpt, "checkpoint")?;
            must_exist(&data, "data directory")?;
            let which = parse_split(&split)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let index = GalleryIndex::build(&model, &data, &ds, which)?;
            index.write(&out)?;
            println!("indexed {} images into {}", index.gallery.len(), out.display());
        }
        Cmd::Retrieve { gallery, query, k } => {
            must_exist(&gallery, "gallery")?;
            must_exist(&query, "query image")?;
            if k == 0 {
                return Err(Failure::Usage("-k must be at least 1".into()));
            }
            let index = GalleryIndex::load(&gallery)?;
            let img = Image::read_ppm(&query)?;
            for (rank, hit) in index.retrieve(&img, k)?.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, index.gallery.entries[hit.index].name, hit.score);
            }
        }
        Cmd::Ablate {
            cfg,
            data,
            out,
            parallel,
        } => {
            if let Some(c) = &cfg.config {
                must_exist(c, "config")?;
            }
            must_exist(&data, "data directory")?;
            let resolved = cfg.resolve().map_err(|e| Failure::Usage(format!("{e:#}")))?;
            let ds = Dataset::load(&data)?;
            let (report, runs) = run_matrix(&ConfigArgs::run(&resolved), &ds, &resolved.ablation, &out, parallel)?;
            let unmet = resolved.thresholds.check_ablation(&report);
            let text = report.to_text();
            std::fs::write(out.join("report.txt"), &text).context("writing report.txt")?;
            write_json(
                &out.join("report.json"),
                &AblateFile {
                    config: &resolved,
                    report: &report,
                    runs: &runs,
                    unmet: &unmet,
                },
            )?;
            print!("{text}");
            if !unmet.is_empty() {
                return Err(Failure::Runtime(anyhow!("thresholds unmet: {}", unmet.join("; "))));
            }
        }
        Cmd::Selftest => {
            let results = partseg_core::selftest::run_all();
            let mut failed = 0;
            for r in &results {
                println!("{} {:<40} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Runtime(anyhow!("{failed} of {} checks failed", results.len())));
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
