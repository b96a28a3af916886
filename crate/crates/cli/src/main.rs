use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mmkd::pipeline::{self, Layout, PipelineConfig};
use mmkd::survival::cohort::{planted_cohort, read_cohort, write_cohort};
use mmkd::synth::{Corpus, World};
use mmkd::trainer::TrainConfig;
use mmkd::KdWeights;

/// Multi-teacher distillation of a compact vision-language student, with
/// zero-shot, linear-probe, retrieval and survival evaluation.
#[derive(Debug, Parser)]
#[command(name = "mmkd", version)]
struct Cli {
    /// Pipeline config JSON. Defaults to `<out>/config.json` when present,
    /// otherwise the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is found.
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// Run seed; every component seed is derived from it.
    #[arg(long, global = true, env = pipeline::SEED_ENV)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpus and survival cohort.
    SynthCorpus {
        /// Training pairs (overrides the config).
        #[arg(long)]
        n_pairs: Option<usize>,
        /// Class count (overrides the config).
        #[arg(long)]
        n_classes: Option<usize>,
    },
    /// Contrastive pretraining of the student on the train split.
    Pretrain {
        /// Train manifest; defaults to `<out>/corpus/train.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train teacher projection heads and shared autoencoders.
    AlignTeachers {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the trust test and write quadruplet shards.
    SelectTeachers {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `<out>/shards`.
        #[arg(long)]
        shard_dir: Option<PathBuf>,
    },
    /// Distill the pretrained student from stored quadruplets.
    Distill {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        shard_dir: Option<PathBuf>,
        #[arg(long, default_value = "full_kd", value_parser = ["full_kd", "no_fd", "no_icl"])]
        variant: String,
    },
    /// Zero-shot classification AUC and accuracy on the test split.
    EvalZeroshot {
        /// Checkpoint name under `<out>/checkpoints`.
        #[arg(long, default_value = "full_kd")]
        student: String,
    },
    /// Linear probes on frozen image features at each training fraction.
    EvalLinear {
        #[arg(long, default_value = "full_kd")]
        student: String,
    },
    /// Recall@K image-to-text and text-to-image on the test split.
    EvalRetrieval {
        #[arg(long, default_value = "full_kd")]
        student: String,
    },
    /// Cross-validated survival models on a cohort file.
    EvalSurvival {
        /// Number of CV folds (overrides the config).
        #[arg(long)]
        folds: Option<usize>,
        /// Cohort JSONL; defaults to `<out>/cohort/cohort.jsonl`, generated
        /// from the config if missing.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Every stage end to end, then all evaluations.
    RunAll {
        /// Exit nonzero if any acceptance check fails.
        #[arg(long)]
        check: bool,
    },
    /// Summarize `<out>/report.json`.
    Report {
        #[arg(long)]
        check: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let layout = Layout::new(&cli.out);
    let path = cli.config.clone().or_else(|| Some(layout.config()).filter(|p| p.exists()));
    let mut cfg = match &path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => PipelineConfig::preset(&cli.preset, 7)?,
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn save_config(layout: &Layout, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.config(), cfg.to_json_pretty()?)?;
    Ok(())
}

fn world(cfg: &PipelineConfig) -> Result<World> {
    Ok(World::new(cfg.world.clone())?)
}

fn corpus(layout: &Layout, manifest: Option<&Path>, split: &str, world: &World) -> Result<Corpus> {
    let path = manifest.map_or_else(|| layout.manifest(split), Path::to_path_buf);
    pipeline::read_corpus(&path, world).with_context(|| format!("reading corpus {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_report(layout: &Layout, name: &str, report: &mmkd::eval::EvalReport) -> Result<()> {
    std::fs::create_dir_all(layout.reports())?;
    std::fs::write(layout.reports().join(format!("{name}.json")), report.to_json_pretty()?)?;
    print_json(report)
}

fn print_checks(checks: &[pipeline::CheckResult]) -> bool {
    for c in checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn run(cli: &Cli) -> Result<bool> {
    let layout = Layout::new(&cli.out);
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::SynthCorpus { n_pairs, n_classes } => {
            if let Some(n) = n_pairs {
                cfg.train_pairs = *n;
            }
            if let Some(c) = n_classes {
                cfg.world.n_classes = *c;
            }
            cfg.validate().context("invalid corpus size")?;
            let c = pipeline::synth_corpora(&cfg)?;
            save_config(&layout, &cfg)?;
            pipeline::write_corpus(&layout.corpus(), &c.world, &c.train, "train")?;
            pipeline::write_corpus(&layout.corpus(), &c.world, &c.test, "test")?;
            std::fs::write(layout.prompts(), serde_json::to_string_pretty(&c.world.prompt_set().to_json())?)?;
            write_cohort(&layout.cohort(), &planted_cohort(&cfg.cohort)?)?;
            print_json(&serde_json::json!({
                "train": c.train.tally(),
                "test": c.test.tally(),
                "total": c.train.len(),
            }))?;
        }
        Command::Pretrain { manifest } => {
            let w = world(&cfg)?;
            let train = corpus(&layout, manifest.as_deref(), "train", &w)?;
            let mut s = pipeline::new_student(&cfg, &w)?;
            std::fs::create_dir_all(layout.checkpoints())?;
            pipeline::save_student(&layout.checkpoint("untrained"), &s)?;
            let log = mmkd::trainer::pretrain(&mut s, &train, &cfg.pretrain)?;
            pipeline::save_student(&layout.checkpoint("pretrain_only"), &s)?;
            print_json(&log.epoch_loss)?;
        }
        Command::AlignTeachers { manifest } => {
            let w = world(&cfg)?;
            let train = corpus(&layout, manifest.as_deref(), "train", &w)?;
            let teachers = pipeline::build_teachers(&cfg, &w)?;
            let (model, log) = pipeline::align_teachers(&cfg, &teachers, &train)?;
            std::fs::create_dir_all(layout.checkpoints())?;
            pipeline::save_alignment(&layout.checkpoint("alignment"), &model, &teachers)?;
            print_json(&log)?;
        }
        Command::SelectTeachers { manifest, shard_dir } => {
            let w = world(&cfg)?;
            let train = corpus(&layout, manifest.as_deref(), "train", &w)?;
            let teachers = pipeline::build_teachers(&cfg, &w)?;
            let alignment = pipeline::load_alignment(&layout.checkpoint("alignment"))
                .context("loading alignment checkpoint; run align-teachers first")?;
            let sel = pipeline::select_teachers(&cfg, &teachers, &alignment, &train)?;
            let dir = shard_dir.clone().unwrap_or_else(|| layout.shards());
            pipeline::write_quadruplets(&dir, &sel.quadruplets)?;
            print_json(&sel.summary)?;
        }
        Command::Distill { manifest, shard_dir, variant } => {
            let w = world(&cfg)?;
            let train = corpus(&layout, manifest.as_deref(), "train", &w)?;
            let quads = pipeline::read_quadruplets(&shard_dir.clone().unwrap_or_else(|| layout.shards()))?;
            let mut s = pipeline::load_student(&layout.checkpoint("pretrain_only"))
                .context("loading pretrained student; run pretrain first")?;
            let base = cfg.distill.kd_weights;
            let weights = match variant.as_str() {
                "no_fd" => KdWeights { alpha2: 0.0, ..base },
                "no_icl" => KdWeights { alpha3: 0.0, ..base },
                _ => base,
            };
            let dcfg = TrainConfig {
                kd_weights: weights,
                ..cfg.distill.clone()
            };
            let log = mmkd::trainer::distill(&mut s, &quads, &train, &dcfg)?;
            pipeline::save_student(&layout.checkpoint(variant), &s)?;
            print_json(&pipeline::TrainSummary::from_log(&log, &dcfg))?;
        }
        Command::EvalZeroshot { student } => {
            let w = world(&cfg)?;
            let test = corpus(&layout, None, "test", &w)?;
            let s = pipeline::load_student(&layout.checkpoint(student))?;
            let z = pipeline::eval_zeroshot(&s, &w, &test, cfg.bootstrap_replicates, cfg.confidence, cfg.seed)?;
            write_report(&layout, &format!("zero_shot_{student}"), &z.report)?;
        }
        Command::EvalLinear { student } => {
            let w = world(&cfg)?;
            let train = corpus(&layout, None, "train", &w)?;
            let test = corpus(&layout, None, "test", &w)?;
            let s = pipeline::load_student(&layout.checkpoint(student))?;
            let r = pipeline::eval_linear(
                &s,
                &train,
                &test,
                &cfg.probe_fractions,
                &cfg.probe,
                cfg.bootstrap_replicates,
                cfg.confidence,
                cfg.seed,
            )?;
            write_report(&layout, &format!("linear_probe_{student}"), &r)?;
        }
        Command::EvalRetrieval { student } => {
            let w = world(&cfg)?;
            let test = corpus(&layout, None, "test", &w)?;
            let s = pipeline::load_student(&layout.checkpoint(student))?;
            let r = pipeline::eval_retrieval(&s, &test, &cfg.retrieval_ks, cfg.bootstrap_replicates, cfg.confidence, cfg.seed)?;
            write_report(&layout, &format!("retrieval_{student}"), &r)?;
        }
        Command::EvalSurvival { folds, cohort } => {
            if let Some(f) = folds {
                cfg.folds = *f;
            }
            cfg.validate().context("invalid fold count")?;
            let path = match cohort {
                Some(p) => p.clone(),
                None if layout.cohort_file().exists() => layout.cohort_file(),
                None => write_cohort(&layout.cohort(), &planted_cohort(&cfg.cohort)?)?,
            };
            let subjects = read_cohort(&path).with_context(|| format!("reading cohort {}", path.display()))?;
            let e = pipeline::eval_survival(
                &subjects,
                &cfg.survival,
                cfg.folds,
                cfg.bootstrap_replicates,
                cfg.confidence,
                cfg.seed,
            )?;
            write_report(&layout, "survival", &e.report)?;
        }
        Command::RunAll { check } => {
            let out = pipeline::run_all(&cfg, &layout.root)?;
            for s in &out.manifest.stages {
                eprintln!("{:>10} {:8.1}s", s.stage, s.seconds);
            }
            println!("run {} -> {}", out.manifest.run_id, layout.report().display());
            let ok = print_checks(&pipeline::check_run(&out.report));
            return Ok(ok || !check);
        }
        Command::Report { check } => {
            let path = layout.report();
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: pipeline::RunReport = serde_json::from_str(&text)?;
            println!("run {} seed {} config {}", report.preset, report.seed, &report.config_hash[..12]);
            println!("{:<14} {:>8} {:>8} {:>10} {:>10}", "variant", "zs_auc", "zs_acc", "i2t@10", "probe@1");
            for (name, v) in &report.variants {
                let p = |r: &mmkd::eval::EvalReport, k: &str| r.point(k).map_or("-".into(), |x| format!("{x:.4}"));
                println!(
                    "{:<14} {:>8} {:>8} {:>10} {:>10}",
                    name,
                    p(&v.zero_shot, "auc"),
                    p(&v.zero_shot, "accuracy"),
                    p(&v.retrieval, "image_to_text@10"),
                    p(&v.linear_probe, "auc@1"),
                );
            }
            for (fusion, cv) in &report.survival_cv {
                println!("survival {fusion:<13} C {:.4}  C_td {:.4}  IBS {:.4}", cv.mean.c_index, cv.mean.c_index_td, cv.mean.ibs);
            }
            let ok = print_checks(&pipeline::check_run(&report));
            return Ok(ok || !check);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("acceptance checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
