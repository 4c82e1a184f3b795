//! Command-line front end. Every command validates its inputs before
//! touching the filesystem, and every output file is written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::classifier::{Detector, FusionMode, ImageSet, TrainConfig};
use crate::config::ExperimentConfig;
use crate::datagen::{benchmark_images, write_benchmark, TEST_MANIFEST, TRAIN_MANIFEST};
use crate::error::{Error, Result};
use crate::io::{read_checkpoint, read_image, read_manifest, write_atomic, write_checkpoint, write_ntf};
use crate::metrics::{evaluate, load_sources, render_table, results_tsv, EvalResult, TSV_HEADER};
use crate::operators::{build_operator, OperatorSpec};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Parser)]
#[command(name = "dio", version, about = "Data-independent operators for generated-image detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's experiment seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location: dataset dir for `gen`, run dir for `train`, `eval`
    /// and `bench`, NTF file for `apply` and `export-features`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark and its manifests.
    Gen,
    /// Train a detector on the dataset's training manifest.
    Train,
    /// Score checkpoints on every test source.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Apply one operator to one image and dump the result.
    Apply {
        #[arg(long)]
        operator: String,
        #[arg(long)]
        image: PathBuf,
    },
    /// Pooled classifier features for every image of a manifest.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and score the whole comparison grid.
    Bench,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dioc";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const BENCH_TABLE_FILE: &str = "bench.txt";
pub const BENCH_TSV_FILE: &str = "bench.tsv";

struct Ctx {
    config: ExperimentConfig,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn run_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.config.out.clone())
    }

    fn out_file(&self, verb: &str) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::config(format!("`{verb}` needs --out <file.ntf>")))
    }

    fn train_source(&self) -> String {
        self.config.sources()[0].id.clone()
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: load_config(cli.config.as_deref(), cli.seed)?,
        out: cli.out,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval { checkpoints } => cmd_eval(&ctx, &checkpoints),
        Command::Apply { operator, image } => cmd_apply(&ctx, &operator, &image),
        Command::ExportFeatures { checkpoint, manifest } => cmd_export_features(&ctx, &checkpoint, &manifest),
        Command::Bench => cmd_bench(&ctx),
    }
}

fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let dir = ctx.out.clone().unwrap_or_else(|| ctx.config.data_dir.clone());
    if dir.exists() && fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some() {
        return Err(Error::config(format!("{} is not empty; gen writes into a fresh directory", dir.display())));
    }
    // Generate beside the target and move it into place once complete.
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let tmp = dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    let sources = ctx.config.sources();
    let (train, test) = write_benchmark(&sources, &tmp)?;
    if dir.exists() {
        fs::remove_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    ctx.note(&format!(
        "wrote {} training and {} test images from {} sources to {}",
        train.len(),
        test.len(),
        sources.len(),
        dir.display()
    ));
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config.train_config();
    let manifest = read_manifest(&ctx.config.data_dir.join(TRAIN_MANIFEST))?;
    let images = ImageSet::load(&manifest)?;
    ctx.note(&format!("training {} on {} images", describe(&cfg), images.len()));
    let (detector, logs) = Detector::train(&cfg, &images)?;
    let dir = ctx.run_dir();
    for (i, log) in logs.iter().enumerate() {
        let file = if i == 0 {
            TRAIN_LOG_FILE.to_string()
        } else {
            format!("train_log.{i}.tsv")
        };
        write_atomic(&dir.join(file), log.to_tsv().as_bytes())?;
        if let Some(last) = log.epochs.last() {
            ctx.note(&format!("model {i}: final loss {:.4}, train acc {:.3}", last.loss, last.train_acc));
        }
    }
    write_checkpoint(&detector.to_checkpoint(&cfg)?, &dir.join(CHECKPOINT_FILE))?;
    ctx.note(&format!("wrote {}", dir.join(CHECKPOINT_FILE).display()));
    Ok(())
}

fn describe(cfg: &TrainConfig) -> String {
    let ops: Vec<String> = cfg.operators.iter().map(|o| o.to_string()).collect();
    format!("{} [{}]", cfg.fusion, ops.join(";"))
}

fn cmd_eval(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<()> {
    let detectors: Vec<Detector> = checkpoints
        .iter()
        .map(|p| Detector::from_checkpoint(&read_checkpoint(p)?))
        .collect::<Result<_>>()?;
    let sources = load_sources(&read_manifest(&ctx.config.data_dir.join(TEST_MANIFEST))?)?;
    let train_source = ctx.train_source();
    let mut rows = Vec::new();
    for d in &detectors {
        let r = evaluate(d, &sources, Some(&train_source), ctx.config.include_train)?;
        rows.push((d.name(), r));
    }
    if !ctx.quiet {
        print!("{}", render_table(&rows));
    }
    write_atomic(&ctx.run_dir().join(METRICS_FILE), results_tsv(&rows).as_bytes())
}

fn cmd_apply(ctx: &Ctx, operator: &str, image: &Path) -> Result<()> {
    let out = ctx.out_file("apply")?;
    let spec: OperatorSpec = operator.parse()?;
    let op = build_operator::<f64>(&spec)?;
    let x = read_image(image)?;
    let p = op.apply(&x)?;
    ctx.note(&format!("{spec}: {:?} -> {:?}", x.shape(), p.shape()));
    write_ntf(&p, &out)
}

fn cmd_export_features(ctx: &Ctx, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let out = ctx.out_file("export-features")?;
    let detector = Detector::from_checkpoint(&read_checkpoint(checkpoint)?)?;
    let images = ImageSet::load(&read_manifest(manifest)?)?;
    if images.is_empty() {
        return Err(Error::config("manifest has no images"));
    }
    let feats = detector.embed_images(&images)?;
    let d = feats[0].len();
    let t = Tensor::new(Shape::new(feats.len(), d, 1, 1), feats.concat())?;
    ctx.note(&format!("{} feature vectors of length {d}", feats.len()));
    write_ntf(&t, &out)
}

/// One row of the comparison grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchCell {
    pub section: &'static str,
    pub name: String,
    pub train: TrainConfig,
}

pub const SECTION_OPERATORS: &str = "operators";
pub const SECTION_FUSION: &str = "fusion";
pub const SECTION_SEEDS: &str = "seeds";

/// Grid cells in table order: single operators, fusions, then the seed
/// ablation of the first random operator.
pub fn bench_cells(cfg: &ExperimentConfig) -> Vec<BenchCell> {
    let g = &cfg.bench;
    let base = cfg.train_config();
    let single = |op: &OperatorSpec| TrainConfig {
        operators: vec![op.clone()],
        fusion: FusionMode::Single,
        batch_size: g.dio_batch_size,
        decay_interval: g.dio_decay_interval,
        ..base.clone()
    };
    let mut cells: Vec<BenchCell> = g
        .operators
        .iter()
        .map(|op| BenchCell {
            section: SECTION_OPERATORS,
            name: op.to_string(),
            train: single(op),
        })
        .collect();
    let joined = g.fusion_operators.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("|");
    for &fusion in &g.fusions {
        cells.push(BenchCell {
            section: SECTION_FUSION,
            name: format!("{fusion}({joined})"),
            train: TrainConfig {
                operators: g.fusion_operators.clone(),
                fusion,
                batch_size: g.mdio_batch_size,
                decay_interval: g.mdio_decay_interval,
                ..base.clone()
            },
        });
    }
    if let Some(OperatorSpec::RandomConv { out_c, k, .. }) =
        g.operators.iter().find(|o| matches!(o, OperatorSpec::RandomConv { .. }))
    {
        for &seed in &g.seeds {
            let op = OperatorSpec::RandomConv { seed, out_c: *out_c, k: *k };
            cells.push(BenchCell {
                section: SECTION_SEEDS,
                name: op.to_string(),
                train: single(&op),
            });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<(BenchCell, EvalResult)>,
}

impl BenchReport {
    pub fn section(&self, section: &str) -> Vec<(String, EvalResult)> {
        self.rows
            .iter()
            .filter(|(c, _)| c.section == section)
            .map(|(c, r)| (c.name.clone(), r.clone()))
            .collect()
    }

    pub fn find(&self, section: &str, name: &str) -> Option<&EvalResult> {
        self.rows
            .iter()
            .find(|(c, _)| c.section == section && c.name == name)
            .map(|(_, r)| r)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for section in [SECTION_OPERATORS, SECTION_FUSION, SECTION_SEEDS] {
            let rows = self.section(section);
            if !rows.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n{}", render_table(&rows)));
            }
        }
        out
    }

    /// `results_tsv` rows with the section prepended.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("section\t{TSV_HEADER}");
        for (cell, r) in &self.rows {
            for line in r.to_tsv_rows(&cell.name).lines() {
                out.push_str(&format!("{}\t{line}\n", cell.section));
            }
        }
        out
    }
}

/// Trains and scores every grid cell. Cells with identical training
/// settings (the seed-ablation row matching a single-operator row) are
/// computed once.
pub fn run_bench(
    cells: &[BenchCell],
    train: &ImageSet,
    tests: &BTreeMap<String, ImageSet>,
    train_source: &str,
    include_train: bool,
    progress: &mut dyn FnMut(&BenchCell, &EvalResult, f64),
) -> Result<BenchReport> {
    let mut done: Vec<(TrainConfig, EvalResult)> = Vec::new();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let start = Instant::now();
        let result = match done.iter().find(|(c, _)| *c == cell.train) {
            Some((_, r)) => r.clone(),
            None => {
                let (detector, _) = Detector::train(&cell.train, train)?;
                let r = evaluate(&detector, tests, Some(train_source), include_train)?;
                done.push((cell.train.clone(), r.clone()));
                r
            }
        };
        progress(cell, &result, start.elapsed().as_secs_f64());
        rows.push((cell.clone(), result));
    }
    if rows.len() != cells.len() {
        return Err(Error::config(format!("bench produced {} rows for {} cells", rows.len(), cells.len())));
    }
    Ok(BenchReport { rows })
}

fn cmd_bench(ctx: &Ctx) -> Result<()> {
    let cells = bench_cells(&ctx.config);
    let start = Instant::now();
    let (train, tests) = benchmark_images(&ctx.config.sources())?;
    ctx.note(&format!(
        "{} cells, {} training images, {} test sources ({:.1}s to generate)",
        cells.len(),
        train.len(),
        tests.len(),
        start.elapsed().as_secs_f64()
    ));
    let report = run_bench(
        &cells,
        &train,
        &tests,
        &ctx.train_source(),
        ctx.config.include_train,
        &mut |cell, r, secs| {
            ctx.note(&format!(
                "{:<10} {:<40} mean acc {:5.1}  mean ap {:5.1}  ({secs:.1}s)",
                cell.section,
                cell.name,
                100.0 * r.mean_acc,
                100.0 * r.mean_ap
            ))
        },
    )?;
    let table = report.render();
    if !ctx.quiet {
        print!("{table}");
    }
    let dir = ctx.run_dir();
    write_atomic(&dir.join(BENCH_TSV_FILE), report.to_tsv().as_bytes())?;
    write_atomic(&dir.join(BENCH_TABLE_FILE), table.as_bytes())?;
    ctx.note(&format!("bench finished in {:.1}s", start.elapsed().as_secs_f64()));
    Ok(())
}
