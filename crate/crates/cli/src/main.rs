use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fdi_core::checksum::{crc64, to_hex};
use fdi_core::datacube::{generate_synthetic_cube, load_cube, payload_checksums, save_cube, DataCube, Normalizer};
use fdi_core::evaluation::{read_summary, write_report, EvalReport};
use fdi_core::inference::{ensemble_average, read_map, render_map, FdiMap};
use fdi_core::models::{build_model, build_report, load_weights, save_weights, ModelBundle};
use fdi_core::pipeline::{
    build_datasets, draw_samples, evaluate, fit_training_normalizer, infer_days, EvalDays, RunConfig,
};
use fdi_core::sampling::{read_manifest, write_manifest};
use fdi_core::trainer::{compute_metrics, predict, train, train_ensemble, write_history, TrainHistory};
use fdi_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "fdi", version, about = "Fire danger index workbench: synthetic cubes, training, full-map inference and evaluation")]
#[command(after_long_help = config_help())]
struct Cli {
    /// Worker threads for tile and ensemble parallelism (1 = bitwise reproducible training).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic datacube.
    CubeGen {
        #[command(flatten)]
        common: Common,
    },
    /// Draw fire and no-fire samples from a cube.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
    },
    /// Train one model and keep its best-validation snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Train independently seeded ensemble members.
    TrainEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Full-map inference of one model on the evaluation days.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Member and ensemble-average maps on the evaluation days.
    InferEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Evaluate maps produced by `infer` or `infer-ensemble`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        maps: PathBuf,
    },
    /// Write CSV tables, SVG charts and the JSON summary of an evaluation.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eval: PathBuf,
    },
}

fn config_help() -> String {
    let mut s = String::from("CONFIGURATION (defaults; [model] keys left unset follow the architecture):\n\n");
    s.push_str(&RunConfig::default().to_toml());
    s.push_str("\nArchitecture defaults:\n");
    for a in fdi_core::models::ArchitectureId::ALL {
        let m = fdi_core::models::ModelConfig::default_for(a);
        s.push_str(&format!(
            "  {a}: conv_channels {:?}, classifier_widths {:?}, convlstm_hidden {}, temporal_len {}, kernel {}, dropout {}, embedding_dim {}\n",
            m.conv_channels, m.classifier_widths, m.convlstm_hidden, m.temporal_len, m.kernel, m.dropout, m.embedding_dim
        ));
    }
    s.push_str("\nExit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.\n");
    s
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    threads: usize,
    /// Set when training ran on several threads; weights are then only
    /// reproducible per member.
    parallel_training: bool,
    version: String,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    threads: usize,
    command: &'static str,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn start(command: &'static str, common: &Common, threads: usize) -> Outcome<Self> {
        let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
        let out = common.out.clone();
        if out.exists() {
            if !common.force {
                return Err(Failure::Usage(format!(
                    "output directory {} exists; pass --force to replace it",
                    out.display()
                )));
            }
            fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            cfg,
            out,
            threads,
            command,
            inputs: BTreeMap::new(),
        })
    }

    /// Records the CRC-64 of every file below `dir` (manifests excluded).
    fn input(&mut self, dir: &Path) -> Outcome<()> {
        if !dir.exists() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist")).into());
        }
        if dir.join("header.json").exists() {
            for (file, crc) in payload_checksums(dir)? {
                self.inputs.insert(format!("{}/{file}", dir.display()), crc);
            }
            return Ok(());
        }
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        for f in files {
            if f.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            self.inputs.insert(f.display().to_string(), to_hex(crc64(&bytes)));
        }
        Ok(())
    }

    fn finish(self, parallel_training: bool) -> Outcome<()> {
        let c = &self.cfg;
        let mut seeds = BTreeMap::new();
        seeds.insert("cube".to_string(), c.cube.seed);
        seeds.insert("sampling".to_string(), c.sampling.seed);
        seeds.insert("init".to_string(), c.model.init_seed);
        seeds.insert("shuffle".to_string(), c.train.shuffle_seed);
        seeds.insert("dropout".to_string(), c.train.dropout_seed);
        seeds.insert("ensemble".to_string(), c.ensemble.base_seed);
        seeds.insert("nofire_days".to_string(), c.eval.nofire_seed);
        let m = Manifest {
            command: self.command.to_string(),
            config_hash: c.hash(),
            seeds,
            inputs: self.inputs,
            threads: self.threads,
            parallel_training,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_text(&self.out.join("config.toml"), c.to_toml())?;
        write_json(&self.out.join("manifest.json"), &m)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Outcome<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: String) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_text(path, text + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Json {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn samples_file(dir: &Path) -> PathBuf {
    dir.join("samples.csv")
}

fn save_training(dir: &Path, bundle: &ModelBundle, history: &TrainHistory, norm: &Normalizer) -> Outcome<()> {
    save_weights(bundle, dir)?;
    write_history(dir.join("history.csv"), history)?;
    write_json(&dir.join("normalizer.json"), norm)?;
    Ok(())
}

fn member_dirs(root: &Path) -> Outcome<Vec<PathBuf>> {
    let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
    for e in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = e.map_err(|e| Error::io(root, e))?.path();
        if let Some(i) = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("member_"))
            .and_then(|n| n.parse().ok())
        {
            dirs.push((i, p));
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

fn load_member(dir: &Path, run: &Run) -> Outcome<(ModelBundle, Normalizer)> {
    let bundle = load_weights(dir, Some(run.cfg.model.architecture))?;
    let norm = read_json(&dir.join("normalizer.json"))?;
    Ok((bundle, norm))
}

fn render_all(maps: &[FdiMap], dir: &Path) -> Outcome<()> {
    for m in maps {
        render_map(m, dir)?;
    }
    Ok(())
}

fn prepare(run: &mut Run, cube_dir: &Path, samples_dir: &Path) -> Outcome<(DataCube, Vec<fdi_core::sampling::SampleIndex>)> {
    run.input(cube_dir)?;
    run.input(samples_dir)?;
    let cube = load_cube(cube_dir)?;
    let samples = read_manifest(samples_file(samples_dir))?;
    Ok((cube, samples))
}

fn dispatch(cli: Cli) -> Outcome<()> {
    let threads = cli.threads;
    match cli.command {
        Command::CubeGen { common } => {
            let run = Run::start("cube-gen", &common, threads)?;
            let cube = generate_synthetic_cube(&run.cfg.cube)?;
            save_cube(&cube, &run.out)?;
            log::info!("cube {}x{}x{} written to {}", cube.height(), cube.width(), cube.days(), run.out.display());
            run.finish(false)
        }
        Command::Sample { common, cube } => {
            let mut run = Run::start("sample", &common, threads)?;
            run.input(&cube)?;
            let c = load_cube(&cube)?;
            let samples = draw_samples(&c, &run.cfg.sampling)?;
            write_manifest(samples_file(&run.out), &samples)?;
            let fires = samples.iter().filter(|s| s.label == fdi_core::sampling::FIRE).count();
            println!("{} samples ({fires} fire, {} no-fire)", samples.len(), samples.len() - fires);
            run.finish(false)
        }
        Command::Train { common, cube, samples } => {
            let mut run = Run::start("train", &common, threads)?;
            let (c, s) = prepare(&mut run, &cube, &samples)?;
            let mc = run.cfg.model_config()?;
            let report = build_report(&mc)?;
            println!("{report}");
            write_text(&run.out.join("build_report.txt"), format!("{report}\n"))?;
            let split = run.cfg.split_years(&c)?;
            let norm = fit_training_normalizer(&c, &split)?;
            let ds = build_datasets(&c, &s, &split, &norm, &mc)?;
            let (best, history) = train(&build_model(&mc)?, &ds.train, &ds.val, &run.cfg.train)?;
            let m = compute_metrics(&predict(&best.network, &ds.test, run.cfg.train.batch_size)?, &ds.test.labels())?;
            println!(
                "best epoch {} (validation loss {:.5}); test recall {:.4} precision {:.4} F1 {:.4}",
                history.best_epoch, history.best_val_loss, m.recall, m.precision, m.f1
            );
            write_json(&run.out.join("test_metrics.json"), &m)?;
            save_training(&run.out, &best, &history, &norm)?;
            run.finish(false)
        }
        Command::TrainEnsemble { common, cube, samples } => {
            let mut run = Run::start("train-ensemble", &common, threads)?;
            let (c, s) = prepare(&mut run, &cube, &samples)?;
            let mc = run.cfg.model_config()?;
            let split = run.cfg.split_years(&c)?;
            let norm = fit_training_normalizer(&c, &split)?;
            let ds = build_datasets(&c, &s, &split, &norm, &mc)?;
            let members = train_ensemble(&run.cfg.ensemble, &mc, &ds.train, &ds.val, &run.cfg.train)?;
            for (i, (bundle, history)) in members.iter().enumerate() {
                let m = compute_metrics(&predict(&bundle.network, &ds.test, run.cfg.train.batch_size)?, &ds.test.labels())?;
                println!(
                    "member {i} (seed {}): best epoch {}, test F1 {:.4}",
                    bundle.provenance.init_seed, history.best_epoch, m.f1
                );
                save_training(&run.out.join(format!("member_{i}")), bundle, history, &norm)?;
            }
            run.finish(threads > 1)
        }
        Command::Infer { common, cube, model } => {
            let mut run = Run::start("infer", &common, threads)?;
            run.input(&cube)?;
            run.input(&model)?;
            let c = load_cube(&cube)?;
            let (bundle, norm) = load_member(&model, &run)?;
            let days = run.cfg.eval_days(&c)?;
            let maps = infer_days(&bundle, &c, &norm, &days, &run.cfg.eval)?;
            render_all(&maps, &run.out)?;
            write_json(&run.out.join("eval_days.json"), &days)?;
            run.finish(false)
        }
        Command::InferEnsemble { common, cube, models } => {
            let mut run = Run::start("infer-ensemble", &common, threads)?;
            run.input(&cube)?;
            run.input(&models)?;
            let c = load_cube(&cube)?;
            let days = run.cfg.eval_days(&c)?;
            let dirs = member_dirs(&models)?;
            if dirs.is_empty() {
                return Err(Error::Empty(format!("no member_<i> directories in {}", models.display())).into());
            }
            let mut all = Vec::new();
            for (i, d) in dirs.iter().enumerate() {
                let (bundle, norm) = load_member(d, &run)?;
                let maps = infer_days(&bundle, &c, &norm, &days, &run.cfg.eval)?;
                render_all(&maps, &run.out.join(format!("member_{i}")))?;
                all.push(maps);
            }
            let avg: Vec<FdiMap> = (0..days.all().len())
                .map(|k| ensemble_average(&all.iter().map(|m| m[k].clone()).collect::<Vec<_>>()))
                .collect::<Result<_, _>>()?;
            render_all(&avg, &run.out.join("ensemble"))?;
            write_json(&run.out.join("eval_days.json"), &days)?;
            run.finish(false)
        }
        Command::Eval { common, cube, maps } => {
            let mut run = Run::start("eval", &common, threads)?;
            run.input(&cube)?;
            run.input(&maps)?;
            let c = load_cube(&cube)?;
            let days: EvalDays = read_json(&maps.join("eval_days.json"))?;
            let dirs = member_dirs(&maps)?;
            let dirs = if dirs.is_empty() { vec![maps.clone()] } else { dirs };
            let members: Vec<Vec<FdiMap>> = dirs
                .iter()
                .map(|d| days.all().into_iter().map(|day| read_map(d, day)).collect::<Result<_, _>>())
                .collect::<Result<_, _>>()?;
            let report = evaluate(&c, &members, &days, &run.cfg.eval)?;
            print_summary(&report);
            write_json(&run.out.join("summary.json"), &report)?;
            run.finish(false)
        }
        Command::Report { common, eval } => {
            let mut run = Run::start("report", &common, threads)?;
            run.input(&eval)?;
            let report = read_summary(&eval)?;
            write_report(&report, &run.out)?;
            println!("report written to {}", run.out.display());
            run.finish(false)
        }
    }
}

fn print_summary(r: &EvalReport) {
    println!("{} fire days evaluated", r.daily_recall.len());
    if let Some(q) = &r.quantiles {
        for (l, v) in q.levels.iter().zip(&q.values) {
            println!("  recall Q{l}: {v:.3}");
        }
    }
    for d in &r.distributions {
        println!("  no-fire day {}: skewness {:.4} over {} pixels", d.date, d.skewness, d.n_valid);
    }
    if !r.consistency.is_empty() {
        let mean = r.consistency.iter().map(|c| c.gap).sum::<f64>() / r.consistency.len() as f64;
        println!("  ensemble consistency: mean |lhs - rhs| {mean:.4} over {} days", r.consistency.len());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: cannot configure {} threads: {e}", cli.threads);
        return ExitCode::from(1);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
