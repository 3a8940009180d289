use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use nvae::checkpoint::{Checkpoint, LIBRARY_VERSION};
use nvae::config::{Ini, RunConfig};
use nvae::data::Dataset;
use nvae::diagnostics::{self, AugmentConfig, GapSearch, ProbeConfig};
use nvae::image::ImageGrid;
use nvae::model::{NvaeModel, TraversalSeed};
use nvae::rng;
use nvae::training::{self, CheckpointPolicy, Trainer};

use crate::manifest::{digests, RunManifest};
use crate::{AugmentArgs, DiagnoseArgs, DiagnoseCommand, SampleArgs, TrainArgs, TraverseArgs};

struct Run {
    command: &'static str,
    args: Vec<String>,
    out_dir: PathBuf,
    started: Instant,
    seed: Option<u64>,
    config: Option<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, args: &[String], out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            command,
            args: args.to_vec(),
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            library_version: LIBRARY_VERSION.to_string(),
            seed: self.seed,
            config: self.config,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest.write(&self.out_dir)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn load_ini(path: &Path) -> Result<Ini> {
    let text = std::fs::read_to_string(path).map_err(|e| nvae::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ini::parse(&text).with_context(|| format!("in {}", path.display()))
}

fn load_run_config(path: &Path, ini: &Ini) -> Result<RunConfig> {
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::from_ini(ini, base).with_context(|| format!("in {}", path.display()))
}

fn load_data(cfg: &RunConfig, run: &mut Run) -> Result<(Dataset, Dataset)> {
    for f in cfg.data.input_files() {
        if !f.exists() {
            return Err(nvae::Error::Io {
                path: f.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            })
            .context("loading dataset");
        }
    }
    run.inputs.extend(cfg.data.input_files());
    cfg.data.load().context("loading dataset")
}

fn load_checkpoint(path: &Path, run: &mut Run) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    run.inputs.push(path.to_path_buf());
    Ok(ckpt)
}

/// Images are assumed square.
fn image_side(model: &NvaeModel) -> Result<usize> {
    let d = model.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        bail!("input dimension {d} is not a square image");
    }
    Ok(side)
}

pub fn train(a: TrainArgs, args: &[String]) -> Result<()> {
    let mut run = Run::start("train", args, &a.out.out_dir)?;
    let mut ini = load_ini(&a.config)?;
    if let Some(seed) = a.seed {
        ini.set("train", "seed", seed.to_string());
    }
    if let Some(epochs) = a.epochs {
        ini.set("train", "epochs", epochs.to_string());
    }
    let cfg = load_run_config(&a.config, &ini)?;
    run.inputs.push(a.config.clone());
    run.config = Some(ini.to_text());
    run.seed = Some(cfg.train.seed);
    let (train_set, test_set) = load_data(&cfg, &mut run)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(load_checkpoint(path, &mut run)?)?;
            if t.config() != &cfg.train {
                eprintln!("note: continuing with the training settings stored in {}", path.display());
            }
            if t.is_done() {
                bail!("{} has already completed {} epochs", path.display(), t.epoch());
            }
            t
        }
        None => {
            let mc = cfg.model_config(train_set.dim(), train_set.classes())?;
            let model = NvaeModel::new(mc, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    eprintln!(
        "training on {} examples ({} test), {} parameters",
        train_set.len(),
        test_set.len(),
        trainer.model().num_parameters()
    );

    let policy = CheckpointPolicy::in_dir(&run.out_dir);
    let total = trainer.config().epochs;
    let result = training::resume(&mut trainer, &train_set, Some(&test_set), &policy, &mut |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {}/{}  objective {:.3}  recon {:.3}  kl_s {:.3}  kl_c {:.4}  nll {}  train_acc {}  test_acc {}  ({:.1}s)",
            r.epoch,
            total,
            r.objective,
            r.recon,
            r.kl_shared,
            r.kl_class,
            fmt(r.class_nll),
            fmt(r.train_acc),
            fmt(r.test_acc),
            r.wall_time_s
        );
    });
    run.write("train_report.csv", trainer.report().to_csv())?;
    if let Err(e) = result {
        if let (nvae::Error::Diverged { .. }, Some(last)) = (&e, policy.last_path()) {
            if last.exists() {
                eprintln!("last good checkpoint: {}", last.display());
            }
        }
        return Err(e.into());
    }
    let final_path = run.out("model.ckpt");
    trainer.checkpoint().save(&final_path)?;
    if let Some(last) = policy.last_path() {
        let _ = std::fs::remove_file(last);
    }
    run.outputs.push(final_path);
    run.finish()
}

pub fn traverse(a: TraverseArgs, args: &[String]) -> Result<()> {
    let mut run = Run::start("traverse", args, &a.out.out_dir)?;
    let model = load_checkpoint(&a.checkpoint, &mut run)?.model;
    let layout = *model.layout();
    let side = image_side(&model)?;
    let (targets, label, name) = match a.class {
        Some(c) => {
            if c >= layout.classes {
                bail!("--class {c} is out of range for {} classes", layout.classes);
            }
            (diagnostics::class_targets(&layout, c), c, format!("traverse_class{c}.pgm"))
        }
        None => (diagnostics::shared_targets(&layout), a.label, "traverse_shared.pgm".to_string()),
    };
    if targets.is_empty() {
        bail!("the selected latent block has no dimensions");
    }
    let seed = match (a.input_index, &a.config) {
        (Some(i), Some(cfg_path)) => {
            let ini = load_ini(cfg_path)?;
            let cfg = load_run_config(cfg_path, &ini)?;
            run.inputs.push(cfg_path.clone());
            let (_, test) = load_data(&cfg, &mut run)?;
            if i >= test.len() {
                bail!("--input-index {i} is out of range for {} test examples", test.len());
            }
            TraversalSeed::Input {
                x: test.image(i).to_vec(),
                label: Some(if a.class.is_some() { label } else { test.labels()[i] }),
            }
        }
        _ => TraversalSeed::Class(label),
    };
    let grid = diagnostics::traversal_grid(&model, &targets, a.steps, &seed, side, side)?;
    run.write(&name, grid.to_pgm())?;
    eprintln!("{} rows × {} steps", grid.rows, grid.cols);
    run.finish()
}

pub fn sample(a: SampleArgs, args: &[String]) -> Result<()> {
    let mut run = Run::start("sample", args, &a.out.out_dir)?;
    let model = load_checkpoint(&a.checkpoint, &mut run)?.model;
    if a.class >= model.layout().classes {
        bail!("--class {} is out of range for {} classes", a.class, model.layout().classes);
    }
    if a.count == 0 {
        bail!("--count must be positive");
    }
    run.seed = Some(a.seed);
    let side = image_side(&model)?;
    let mut rng = rng::stream(a.seed, &[rng::label::GENERATE]);
    let images = model.generate_batch(&vec![a.class; a.count], a.sigma, &mut rng)?;
    let cols = (a.count as f64).sqrt().ceil() as usize;
    let rows = a.count.div_ceil(cols);
    let mut tiles: Vec<Vec<f64>> = (0..a.count).map(|r| images.row_slice(r).to_vec()).collect();
    tiles.resize(rows * cols, vec![0.0; side * side]);
    let grid = ImageGrid::from_images(&tiles, rows, cols, side, side)?;
    run.write(&format!("sample_class{}_sigma{}.pgm", a.class, a.sigma), grid.to_pgm())?;
    run.finish()
}

pub fn diagnose(what: DiagnoseCommand, args: &[String]) -> Result<()> {
    let (name, a) = match &what {
        DiagnoseCommand::Kl(a) => ("diagnose-kl", a),
        DiagnoseCommand::Confusion(a) => ("diagnose-confusion", a),
        DiagnoseCommand::Gap(a) => ("diagnose-gap", a),
    };
    let DiagnoseArgs {
        checkpoint,
        config,
        train_split,
        seed,
        out,
    } = a;
    let mut run = Run::start(name, args, &out.out_dir)?;
    let model = load_checkpoint(checkpoint, &mut run)?.model;
    let ini = load_ini(config)?;
    let cfg = load_run_config(config, &ini)?;
    run.inputs.push(config.clone());
    let (train, test) = load_data(&cfg, &mut run)?;
    let data = if *train_split { train } else { test };
    match what {
        DiagnoseCommand::Kl(_) => {
            let p = diagnostics::kl_profile(&model, &data)?;
            run.write("kl_profile.csv", p.to_csv())?;
            eprintln!(
                "mean KL per dim: shared {:.4}, z_c {:.4}, z_cy {:.4}, off-class {:.4}",
                p.mean_shared(),
                p.mean_class(),
                p.mean_z_cy(),
                p.mean_off_class()
            );
        }
        DiagnoseCommand::Confusion(_) => {
            let m = diagnostics::class_kl_confusion(&model, &data)?;
            run.write("class_kl_confusion.csv", diagnostics::confusion_csv(&m))?;
        }
        DiagnoseCommand::Gap(_) => {
            let stats = diagnostics::surrogate_gap(&model, &data)?;
            run.write("surrogate_gap.csv", stats.to_csv())?;
            let c = model.config();
            let search = GapSearch::default();
            run.seed = Some(*seed);
            let b = diagnostics::surrogate_gap_bound(c.alpha_p, c.alpha_q, c.layout.classes, &search, *seed)?;
            run.write(
                "surrogate_gap_bound.csv",
                format!(
                    "radius,samples,k_hat,sample_max,validation_max,validation_exceed\n{},{},{},{},{},{}\n",
                    search.radius, search.samples, b.k_hat, b.sample_max, b.validation_max, b.validation_exceed
                ),
            )?;
            eprintln!(
                "gap on data: min {:.4} mean {:.4} max {:.4}; k̂ = {:.4}",
                stats.min, stats.mean, stats.max, b.k_hat
            );
        }
    }
    run.finish()
}

pub fn augment(a: AugmentArgs, args: &[String]) -> Result<()> {
    let mut run = Run::start("augment", args, &a.out.out_dir)?;
    let model = load_checkpoint(&a.checkpoint, &mut run)?.model;
    let ini = load_ini(&a.config)?;
    let cfg = load_run_config(&a.config, &ini)?;
    run.inputs.push(a.config.clone());
    run.seed = Some(a.seed);
    let (train, test) = load_data(&cfg, &mut run)?;
    let acfg = AugmentConfig {
        p_sub: a.p_sub,
        sigma: a.sigma,
        repetitions: a.reps,
        probe: ProbeConfig {
            epochs: a.probe_epochs,
            ..ProbeConfig::default()
        },
        seed: a.seed,
    };
    let result = diagnostics::augmentation_experiment(&model, &train, &test, &acfg)?;
    run.write(&format!("augment_p{}_sigma{}.csv", a.p_sub, a.sigma), result.to_csv())?;
    eprintln!("test error {:.4} ± {:.4} over {} repetitions", result.mean, result.std, a.reps);
    run.finish()
}
