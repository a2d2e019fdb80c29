use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cycle_medgan::checkpoint;
use cycle_medgan::config::RunConfig;
use cycle_medgan::data::{self, split_paired, PairedValidationSet, ValidationPair};
use cycle_medgan::exec;
use cycle_medgan::gradcheck;
use cycle_medgan::metrics::{self, MetricReport, ReportMetadata};
use cycle_medgan::nn::pretrain_feature_extractor;
use cycle_medgan::synth;
use cycle_medgan::training::{self, RunOutput, TrainState};
use cycle_medgan::{Error, Result};

const PRECEDENCE: &str = "\
Configuration precedence, lowest first: built-in defaults, the --config file \
(flat `key = value` lines, `#` comments), then flags (--seed, --variant, \
--resolution, --run-dir, --set key=value). The effective configuration is \
written to <run_dir>/run_manifest.

Paired roots hold X/ and Y/ with matching file names. The group of a file is \
its name up to the first underscore; validation splits whole groups.";

#[derive(Parser)]
#[command(name = "cycle-medgan", version, about = "Unpaired image translation with cycle-perceptual and cycle-style losses", after_help = PRECEDENCE)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// cycle_gan or cycle_medgan.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override any config key, e.g. --set epochs=5. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus under data_root (or --out).
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the feature extractor on the training Y images; writes <run_dir>/extractor.
    PretrainExtractor,
    /// Train both generators and discriminators.
    Train,
    /// Translate every PNG of a folder with G1.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write input|output side-by-side images.
        #[arg(long)]
        grid: bool,
    },
    /// Score G1 of a checkpoint on paired data; writes <run_dir>/metrics.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        paired_root: PathBuf,
        /// Score every pair instead of the validation groups only.
        #[arg(long)]
        all_pairs: bool,
        /// Model name in the report; defaults to the variant.
        #[arg(long)]
        model: Option<String>,
    },
    /// Merge the metrics.csv of several run directories into one table.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the generator gradients.
    CheckGrads,
}

fn overrides(c: &Common) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &c.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = c.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(v) = &c.variant {
        out.push(("variant".into(), v.clone()));
    }
    if let Some(r) = c.resolution {
        out.push(("resolution".into(), r.to_string()));
    }
    if let Some(d) = &c.run_dir {
        out.push(("run_dir".into(), d.display().to_string()));
    }
    Ok(out)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { context: format!("creating {}", p.display()), source: e })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io { context: format!("writing {}", p.display()), source: e })
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    create_dir(&cfg.run_dir)?;
    let text = format!(
        "# cycle-medgan {} {command}\n# created {}\n{}",
        env!("CARGO_PKG_VERSION"),
        checkpoint::timestamp(),
        cfg.to_text()
    );
    write_text(&cfg.run_dir.join("run_manifest"), &text)
}

fn cmd_synth(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.data_root.clone());
    let summary = synth::generate_corpus(&cfg.synth, &dir)?;
    println!(
        "wrote {} pairs to {} (mean SSIM(x, T(x)) = {:.4})",
        summary.spec.n_images,
        dir.display(),
        summary.identity_ssim
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let split = split_paired(&cfg.data_root, cfg.val_fraction, cfg.seed, cfg.resolution)?;
    let out = pretrain_feature_extractor(&split.train_y, cfg.extractor_arch.clone(), cfg.pretrain)?;
    write_manifest(cfg, "pretrain-extractor")?;
    let dir = cfg.run_dir.join("extractor");
    checkpoint::save_extractor(&out.extractor, cfg.seed, &out.holdout_history, &dir)?;
    println!(
        "held-out reconstruction MSE {:.6} -> {:.6}; extractor saved to {}",
        out.initial_holdout_loss(),
        out.final_holdout_loss(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let extractor = cfg
        .require_extractor()?
        .map(|p| checkpoint::load_extractor(p, Some(cfg.resolution)))
        .transpose()?;
    let split = split_paired(&cfg.data_root, cfg.val_fraction, cfg.seed, cfg.resolution)?;
    write_manifest(cfg, "train")?;
    let state = TrainState::new(cfg.network.clone(), extractor, &cfg.train)?;
    let output = RunOutput { run_dir: Some(cfg.run_dir.clone()) };
    let out = training::train(state, &cfg.train, &split.train_x, &split.train_y, Some(&split.validation), &output)?;
    let f = out.state.networks.extractor.as_ref();
    let mut report = metrics::evaluate_on_validation(&cfg.variant.to_string(), &out.state.networks.g1, &split.validation, f)?;
    report.metadata = ReportMetadata {
        dataset: cfg.data_root.display().to_string(),
        checkpoint: format!("ckpt_{}", out.state.step),
        timestamp: checkpoint::timestamp(),
    };
    report.write_csv(&cfg.run_dir.join("metrics.csv"))?;
    let s = report.models[0].scores;
    println!("{} steps; validation SSIM {:.4}, PSNR {:.2} dB", out.state.step, s.ssim, s.psnr_db);
    Ok(())
}

fn cmd_translate(ckpt: &Path, input: &Path, output: &Path, grid: bool) -> Result<()> {
    let (state, _) = checkpoint::load(ckpt, None)?;
    let g1 = &state.networks.g1;
    let r = g1.config.input_resolution;
    create_dir(output)?;
    let files = data::png_files(input)?;
    let results = exec::map_indexed(files.len(), |i| -> Result<()> {
        let path = &files[i];
        let x = data::load_image(path, r)?;
        let y = g1.translate(&x)?;
        let name = path.file_name().expect("file name");
        data::save_png(&output.join(name), &y)?;
        if grid {
            let stem = path.file_stem().expect("file stem").to_string_lossy();
            let mut bytes = Vec::with_capacity(2 * r * r);
            for row in 0..r {
                for img in [&x, &y] {
                    let px = &img.tensor().data()[row * r..(row + 1) * r];
                    bytes.extend(px.iter().map(|&v| data::denormalize_u8(v)));
                }
            }
            data::save_gray8(&output.join(format!("{stem}_grid.png")), 2 * r as u32, r as u32, bytes)?;
        }
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    println!("translated {} images into {}", files.len(), output.display());
    Ok(())
}

fn all_pairs(root: &Path, resolution: usize) -> Result<PairedValidationSet> {
    let xs = data::load_dataset(&root.join("X"), resolution, data::Domain::X)?;
    let ys = data::load_dataset(&root.join("Y"), resolution, data::Domain::Y)?;
    if xs.ids() != ys.ids() {
        return Err(Error::PairingMismatch(format!("{}: X/ and Y/ file names differ", root.display())));
    }
    let pairs = xs
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| ValidationPair { id: id.clone(), x: xs.get(i).clone(), y_truth: ys.get(i).clone() })
        .collect();
    Ok(PairedValidationSet { pairs })
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path, root: &Path, every: bool, model: Option<String>) -> Result<()> {
    let (state, _) = checkpoint::load(ckpt, None)?;
    let r = state.networks.g1.config.input_resolution;
    let val = if every { all_pairs(root, r)? } else { split_paired(root, cfg.val_fraction, cfg.seed, r)?.validation };
    let f = match &cfg.extractor {
        Some(p) => Some(checkpoint::load_extractor(p, Some(r))?),
        None => state.networks.extractor.clone(),
    };
    let name = model.unwrap_or_else(|| cfg.variant.to_string());
    let mut report = metrics::evaluate_on_validation(&name, &state.networks.g1, &val, f.as_ref())?;
    report.metadata = ReportMetadata {
        dataset: root.display().to_string(),
        checkpoint: ckpt.display().to_string(),
        timestamp: checkpoint::timestamp(),
    };
    create_dir(&cfg.run_dir)?;
    let out = cfg.run_dir.join("metrics.csv");
    report.write_csv(&out)?;
    print!("{}", report.to_csv());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let mut merged = MetricReport::default();
    for d in dirs {
        let path = d.join("metrics.csv");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Io { context: format!("reading {}", path.display()), source: e })?;
        merged.models.extend(MetricReport::from_csv(&text)?.models);
    }
    let csv = merged.to_csv();
    match out {
        Some(p) => write_text(&p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("note: lpd is a distance over this project's own feature extractor, not published LPIPS");
    Ok(())
}

fn cmd_check_grads(cfg: &RunConfig) -> Result<bool> {
    let r = gradcheck::check_generator_gradients(cfg.seed, gradcheck::DEFAULT_STEP)?;
    println!(
        "checked {} generator parameters of a {}-parameter bundle: max relative error {:.3e} at {}",
        r.checked, r.bundle_parameters, r.max_relative_error, r.worst_parameter
    );
    if !r.passed() {
        println!("FAIL worst parameter {}", r.worst_parameter);
    }
    Ok(r.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides(&cli.common)?)?;
    exec::set_parallel(cfg.parallel);
    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out)?,
        Command::PretrainExtractor => cmd_pretrain(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Translate { checkpoint, input, output, grid } => {
            cmd_translate(&checkpoint, &input, &output, grid)?
        }
        Command::Evaluate { checkpoint, paired_root, all_pairs, model } => {
            cmd_evaluate(&cfg, &checkpoint, &paired_root, all_pairs, model)?
        }
        Command::Report { run_dirs, out } => cmd_report(&run_dirs, out)?,
        Command::CheckGrads => return cmd_check_grads(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

