use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptseg::generator::GeneratorKind;
use promptseg::image::{Mask, RgbImage};
use promptseg::metrics::{overlay, write_report, EvalRecord};
use promptseg::pipeline::eval::{evaluate_arm_seeds, record, single_domain};
use promptseg::pipeline::*;
use promptseg::prompt::{BoxPrompt, PromptSet};
use promptseg::synth::{generate, DomainId, DomainSpec, Manifest, Sample};
use promptseg::{Error, Result};

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Promptable segmentation with automatic box prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (holds manifest.tsv).
    #[arg(long)]
    data: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        domain: DomainId,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder, prompt encoder and decoder jointly.
    Pretrain(TrainArgs),
    /// Train the decoder with everything else frozen.
    Finetune {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Detector bundle to attach; its boxes become the training prompts.
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Train the box detector.
    TrainDetector(TrainArgs),
    /// Train the baseline mask segmenter.
    TrainSegmenter(TrainArgs),
    /// Segment one image; writes a P5 mask and a P6 overlay.
    Segment {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "detector_box")]
        generator: GeneratorKind,
        /// Ground-truth mask, needed by gt_* generators.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Manual box `x0,y0,x1,y1` in [0, 1]; replaces the generator.
        #[arg(long = "box", value_name = "X0,Y0,X1,Y1")]
        manual_box: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Point-count and box prompt comparison on zero-shot domains.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        data_c: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SWEEP_SEEDS)]
        seeds: u64,
    },
    /// Detector versus segmenter box prompts.
    GenTable {
        #[arg(long)]
        bundle: PathBuf,
        /// Segmenter bundle to attach.
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// No prompt, GT box and detector box on zero-shot domains.
    ZeroshotTable {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One prompt source on one dataset.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generator: GeneratorKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Training samples of a dataset: the train side of the fixed split, then
/// the validation carve-out.
fn training_data(data: &Path, cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>, Vec<DomainId>)> {
    let m = Manifest::load(data)?;
    let domain = single_domain(&m)?;
    let (train, _) = m.split(cfg.train_fraction, cfg.split_seed)?;
    let (t, v) = split_validation(train.load_all()?, cfg.validation_fraction, cfg.split_seed);
    Ok((t, v, vec![domain]))
}

/// Held-out split for domains the bundle was trained on, everything otherwise.
fn eval_data(bundle: &ModelBundle, data: &Path, config: Option<&Path>) -> Result<EvalSet> {
    let m = Manifest::load(data)?;
    let domain = single_domain(&m)?;
    let m = if bundle.training_domains().contains(&domain) {
        let (_, cfg) = load_config(config, Stage::Finetune)?;
        m.split(cfg.train_fraction, cfg.split_seed)?.1
    } else {
        m
    };
    EvalSet::from_manifest(bundle, &m)
}

fn train_config(args: &TrainArgs, stage: Stage) -> Result<(ModelConfig, TrainConfig)> {
    let (model, mut cfg) = load_config(args.config.as_deref(), stage)?;
    let seed = args
        .seed
        .ok_or_else(|| Error::Config(format!("missing required flag --seed for `{}`", stage_command(stage))))?;
    cfg.seed = Some(seed);
    Ok((model, cfg))
}

fn parse_box(text: &str) -> Result<BoxPrompt> {
    let v: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Prompt(format!("cannot parse box `{text}`")))?;
    match v.as_slice() {
        &[x0, y0, x1, y1] => BoxPrompt::new(x0, y0, x1, y1),
        _ => Err(Error::Prompt(format!("box needs four numbers, got `{text}`"))),
    }
}

fn stage_command(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
        Stage::Detector => "train-detector",
        Stage::Segmenter => "train-segmenter",
    }
}

fn report(b: &ModelBundle, out: &Path) {
    if let Some(r) = b.provenance.last() {
        eprintln!("{r}");
    }
    eprintln!("wrote {}", out.display());
}

fn write_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    write_report(records, path)?;
    for r in records {
        eprintln!(
            "{:<16} {:<14} {} {:>6.2} {:>6.2} {:>6.2}",
            r.method, r.generator, r.eval_domain, r.miou, r.mpa, r.acc
        );
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { domain, n, seed, out } => {
            let m = generate(&DomainSpec::preset(domain), n, seed, &out)?;
            eprintln!("wrote {} samples of domain {domain} to {}", m.len(), out.display());
        }
        Command::Pretrain(args) => {
            let (model, cfg) = train_config(&args, Stage::Pretrain)?;
            let (train, val, domains) = training_data(&args.data, &cfg)?;
            let (b, _) = pretrain_base(model, &train, &val, &cfg, &domains)?;
            b.save(&args.out)?;
            report(&b, &args.out);
        }
        Command::Finetune { bundle, train: args, detector } => {
            let (_, cfg) = train_config(&args, Stage::Finetune)?;
            let mut b = ModelBundle::load(&bundle)?;
            if let Some(d) = detector {
                b.attach(&ModelBundle::load(&d)?)?;
            }
            let (train, val, domains) = training_data(&args.data, &cfg)?;
            let (b, _) = finetune_decoder(b, &train, &val, &cfg, &domains)?;
            b.save(&args.out)?;
            report(&b, &args.out);
        }
        Command::TrainDetector(args) => {
            let (model, cfg) = train_config(&args, Stage::Detector)?;
            let (train, val, domains) = training_data(&args.data, &cfg)?;
            let b = train_detector(model, &train, &val, &cfg, &domains)?;
            b.save(&args.out)?;
            report(&b, &args.out);
        }
        Command::TrainSegmenter(args) => {
            let (model, cfg) = train_config(&args, Stage::Segmenter)?;
            let (train, val, domains) = training_data(&args.data, &cfg)?;
            let b = train_segmenter(model, &train, &val, &cfg, &domains)?;
            b.save(&args.out)?;
            report(&b, &args.out);
        }
        Command::Segment {
            bundle,
            image,
            generator,
            mask,
            manual_box,
            seed,
            out,
        } => {
            let b = ModelBundle::load(&bundle)?;
            let n = b.config.encoder.input_size;
            let img = RgbImage::load_ppm(&image)?;
            let gt = mask.as_deref().map(Mask::load_pgm).transpose()?;
            if let Some(g) = &gt {
                if (g.width, g.height) != (img.width, img.height) {
                    return Err(Error::Data(format!(
                        "mask is {}×{} but image is {}×{}",
                        g.width, g.height, img.width, img.height
                    )));
                }
            }
            let resized = img.resize_bilinear(n, n);
            let gt_resized = gt.as_ref().map(|g| g.resize_nearest(n, n));
            let pred = match manual_box {
                Some(text) => segment_with_prompts(&b, &resized, PromptSet::from_box(parse_box(&text)?))?,
                None => segment_end_to_end(&b, &resized, generator, gt_resized.as_ref(), seed)?,
            }
            .resize_nearest(img.width, img.height);
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let mask_path = out.join(format!("{stem}_mask.pgm"));
            let overlay_path = out.join(format!("{stem}_overlay.ppm"));
            pred.save_pgm(&mask_path)?;
            overlay(&img, &pred)?.save_ppm(&overlay_path)?;
            eprintln!(
                "foreground {:.1}%; wrote {} and {}",
                100.0 * pred.coverage(),
                mask_path.display(),
                overlay_path.display()
            );
        }
        Command::Sweep {
            bundle,
            data_b,
            data_c,
            out_csv,
            seed,
            seeds,
        } => {
            let b = ModelBundle::load(&bundle)?;
            let sb = EvalSet::from_manifest(&b, &Manifest::load(&data_b)?)?;
            let sc = EvalSet::from_manifest(&b, &Manifest::load(&data_c)?)?;
            let recs = run_prompt_sweep(&b, &[&sb, &sc], &SWEEP_K, seed, seeds)?;
            write_csv(&recs, &out_csv)?;
        }
        Command::GenTable {
            bundle,
            segmenter,
            data,
            config,
            out_csv,
            seed,
        } => {
            let mut b = ModelBundle::load(&bundle)?;
            if let Some(s) = segmenter {
                b.attach(&ModelBundle::load(&s)?)?;
            }
            let sets = data
                .iter()
                .map(|d| eval_data(&b, d, config.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EvalSet> = sets.iter().collect();
            write_csv(&run_generator_table(&b, &refs, seed)?, &out_csv)?;
        }
        Command::ZeroshotTable {
            bundle,
            data,
            out_csv,
            seed,
        } => {
            let b = ModelBundle::load(&bundle)?;
            let sets = data
                .iter()
                .map(|d| EvalSet::from_manifest(&b, &Manifest::load(d)?))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EvalSet> = sets.iter().collect();
            write_csv(&run_zeroshot_table(&b, &refs, seed)?, &out_csv)?;
        }
        Command::Eval {
            bundle,
            data,
            generator,
            config,
            out_csv,
            seed,
        } => {
            let b = ModelBundle::load(&bundle)?;
            let set = eval_data(&b, &data, config.as_deref())?;
            let m = evaluate_arm_seeds(&b, &set, generator, seed, SWEEP_SEEDS)?;
            write_csv(&[record(&b, "eval", generator, &set, m, seed)], &out_csv)?;
        }
    }
    Ok(())
}
