use std::path::{Path, PathBuf};

use luxmix::classical::DualBandParams;
use luxmix::config::RunConfig;
use luxmix::experiment::{provenance, run_baseline, run_repro, split_sims, stage1_sets, SUMMARY_FILE};
use luxmix::models::acusa::ARCH_HU;
use luxmix::models::{corrected_examples, history_csv, AcuNet, AcuSa, FitOutcome, TrainConfig};
use luxmix::nn::checkpoint::{self, Checkpoint, Dtype};
use luxmix::pipeline::evaluate::evaluate;
use luxmix::pipeline::render::parse_map_csv;
use luxmix::pipeline::{
    dark_subtract, foreground_mask, load_cube, read_dataset, render_map, split_dataset, unmix_cube, write_dataset, Engine,
    Map2d,
};
use luxmix::simulate::{augment_linear_labeled, simulate_dataset, simulate_with_truth};
use luxmix::spectral::{EndmemberLibrary, LabeledSample};
use luxmix::sweep::{gradient_sweep, SWEEP_EPS, SWEEP_TOLERANCE};
use luxmix::{Error, Result};

use crate::{Cli, Command, DataArgs, EngineArgs, EvalArgs, GradcheckArgs, Model, RenderArgs, TrainArgs, UnmixArgs};

pub const DATASET_FILE: &str = "dataset.csv";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(cli: &Cli, what: &str) -> Result<Self> {
        let cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = cfg.resolve(cli.seed)?;
        std::fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
        cfg.write_resolved(&cli.out)?;
        let run = Self { cfg, out: cli.out.clone() };
        run.write("run.json", pretty(&provenance(cli.seed, what)))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: String) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    fn library(&self) -> Result<EndmemberLibrary> {
        self.cfg.sim.library()
    }

    /// Samples from `--data`, or a fresh simulation.
    fn samples(&self, data: &DataArgs) -> Result<Vec<LabeledSample>> {
        match &data.data {
            Some(p) => read_dataset(p),
            None => simulate_dataset(&self.cfg.sim.to_sim_config()?),
        }
    }

    fn split(&self, data: &DataArgs, tc: &TrainConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
        split_dataset(&self.samples(data)?, tc.split, self.cfg.seed)
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value") + "\n"
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => synth(&cli),
        Command::Baseline(d) => baseline(&cli, d),
        Command::Train(t) => train(&cli, t),
        Command::Eval(e) => eval(&cli, e),
        Command::UnmixCube(u) => unmix(&cli, u),
        Command::Render(r) => render(&cli, r),
        Command::Gradcheck(g) => gradcheck(&cli, g),
        Command::Repro => repro(&cli),
    }
}

fn synth(cli: &Cli) -> Result<()> {
    let run = Run::open(cli, "synth")?;
    let samples = simulate_dataset(&run.cfg.sim.to_sim_config()?)?;
    let p = run.path(DATASET_FILE);
    write_dataset(&samples, &p)?;
    println!("wrote {} samples to {}", samples.len(), p.display());
    Ok(())
}

fn baseline(cli: &Cli, data: &DataArgs) -> Result<()> {
    let run = Run::open(cli, "baseline")?;
    let lib = run.library()?;
    let (train, test) = run.split(data, &run.cfg.train.acunet)?;
    let (cal, report) = run_baseline(&lib, &train, &test, &run.cfg.baseline)?;
    run.write(
        "calibration.json",
        pretty(&serde_json::json!({ "alpha": cal.params.alpha, "beta": cal.params.beta, "train_r": cal.r })),
    )?;
    run.write("baseline_predictions.csv", report.to_csv())?;
    run.write("baseline_report.txt", report.summary())?;
    println!("beta {}\n{}", cal.params.beta, report.summary());
    Ok(())
}

fn epochs(tc: &TrainConfig, over: Option<usize>) -> TrainConfig {
    TrainConfig { epochs: over.unwrap_or(tc.epochs), ..*tc }
}

fn report_fit(run: &Run, name: &str, fit: &FitOutcome) -> Result<()> {
    run.write(&format!("{name}_history.csv"), history_csv(&fit.history))?;
    let last = fit.history.last().map_or(f64::NAN, |r| r.test_r);
    println!("{name}: {} epochs, best epoch {}, final test R {last:.4}", fit.history.len(), fit.best_epoch);
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let run = Run::open(cli, "train")?;
    let lib = run.library()?;
    let prov = provenance(run.cfg.seed, "train");
    match (args.model, args.stage) {
        (Model::AcuNet, None) => {
            let tc = epochs(&run.cfg.train.acunet, args.epochs);
            let (train, test) = run.split(&args.data, &tc)?;
            let mut net = AcuNet::build(&run.cfg.acunet)?;
            let fit = net.train(&lib, &train, &test, &tc)?;
            net.params = fit.best.clone();
            net.save(&run.path("acu-net.ckpt"), prov)?;
            report_fit(&run, "acu-net", &fit)
        }
        (Model::AcuNet, Some(_)) => Err(Error::Usage("--stage applies to acu-sa only".into())),
        (Model::AcuSa, None) => Err(Error::Usage("acu-sa needs --stage 1 or --stage 2".into())),
        (Model::AcuSa, Some(1)) => {
            let tc = epochs(&run.cfg.train.stage1, args.epochs);
            let (tr, te) = if args.data.data.is_some() {
                // Measured spectra carry no unattenuated truth, so the
                // stage-1 sets are synthetic mixtures sized like the split.
                let (train, test) = run.split(&args.data, &tc)?;
                let sigma = run.cfg.sim.noise.read_sigma;
                let seed = run.cfg.seed.wrapping_add(3);
                let a = augment_linear_labeled(&lib, train.len().max(1), seed, sigma)?;
                let b = augment_linear_labeled(&lib, test.len().max(1), seed.wrapping_add(1), 0.0)?;
                (corrected_examples(&a, lib.m())?, corrected_examples(&b, lib.m())?)
            } else {
                let sims = simulate_with_truth(&run.cfg.sim.to_sim_config()?)?;
                let (a, b) = split_sims(&sims, tc.split, run.cfg.seed)?;
                let sigma = run.cfg.sim.noise.read_sigma;
                stage1_sets(&lib, &a, &b, run.cfg.train.augment_ratio, sigma, run.cfg.seed.wrapping_add(3))?
            };
            let mut sa = AcuSa::build(&run.cfg.acusa, &lib)?;
            let fit = sa.train_stage1(&tr, &te, &tc)?;
            sa.hu_params = fit.best.clone();
            let cfg = serde_json::to_value(&sa.cfg).map_err(|e| Error::Config(e.to_string()))?;
            checkpoint::save(&run.path("acu-sa-hu.ckpt"), ARCH_HU, cfg, prov, &sa.hu_params, Dtype::F64)?;
            println!("guidance argmax {:?}", sa.guidance_argmax()?);
            report_fit(&run, "acu-sa_stage1", &fit)
        }
        (Model::AcuSa, Some(_)) => {
            let hu = args
                .hu
                .as_ref()
                .ok_or_else(|| Error::Usage("stage 2 needs --hu with a stage-1 encoder checkpoint".into()))?;
            let mut sa = AcuSa::from_checkpoints(&lib, &checkpoint::load(hu)?, None)?;
            let tc = epochs(&run.cfg.train.stage2, args.epochs);
            let (train, test) = run.split(&args.data, &tc)?;
            let fit = sa.train_stage2(&train, &test, &tc)?;
            sa.norm_params = fit.best.clone();
            sa.save(&run.path("acu-sa-hu.ckpt"), &run.path("acu-sa-norm.ckpt"), prov)?;
            report_fit(&run, "acu-sa_stage2", &fit)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path)
}

fn engine(run: &Run, lib: &EndmemberLibrary, checkpoint: Option<&Path>, norm: Option<&Path>, beta: Option<f64>) -> Result<Engine> {
    let Some(path) = checkpoint else {
        let params = DualBandParams { beta: beta.unwrap_or(run.cfg.baseline.beta), ..run.cfg.baseline };
        params.validate()?;
        return Ok(Engine::Baseline { lib: lib.clone(), params });
    };
    let ck = load_checkpoint(path)?;
    match ck.manifest.arch.as_str() {
        luxmix::models::acunet::ARCH => {
            Ok(Engine::AcuNet { lib: lib.clone(), net: Box::new(AcuNet::from_checkpoint(&ck)?) })
        }
        ARCH_HU => {
            let norm = norm.ok_or_else(|| Error::Usage("an ACU-SA encoder checkpoint needs --norm".into()))?;
            let n = load_checkpoint(norm)?;
            Ok(Engine::AcuSa(Box::new(AcuSa::from_checkpoints(lib, &ck, Some(&n))?)))
        }
        other => Err(Error::Usage(format!(
            "{} holds '{other}'; pass an acu-net or acu-sa-hu checkpoint",
            path.display()
        ))),
    }
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let e: &EngineArgs = &args.engine;
    if e.checkpoint.is_none() && !e.baseline {
        return Err(Error::Usage("eval needs --checkpoint or --baseline".into()));
    }
    let run = Run::open(cli, "eval")?;
    let lib = run.library()?;
    let engine = engine(&run, &lib, e.checkpoint.as_deref(), e.norm.as_deref(), e.beta)?;
    let test = match &args.data.data {
        Some(_) => run.samples(&args.data)?,
        None => run.split(&args.data, &run.cfg.train.acunet)?.1,
    };
    let report = evaluate(&engine, &test)?;
    run.write(&format!("{}_predictions.csv", report.method), report.to_csv())?;
    run.write(&format!("{}_report.txt", report.method), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn unmix(cli: &Cli, args: &UnmixArgs) -> Result<()> {
    let run = Run::open(cli, "unmix-cube")?;
    let mut fluo = load_cube(&args.fluo)?;
    let mut white = load_cube(&args.white)?;
    if let Some(d) = &args.dark {
        let dark = load_cube(d)?;
        fluo = dark_subtract(&fluo, &dark)?;
        white = dark_subtract(&white, &dark)?;
    }
    let lib = run.library()?;
    let checkpoint = (args.engine != "baseline").then(|| PathBuf::from(&args.engine));
    let engine = engine(&run, &lib, checkpoint.as_deref(), args.norm.as_deref(), args.beta)?;
    let fg = foreground_mask(&white);
    if fg.degenerate {
        return Err(Error::Degenerate {
            op: "foreground_mask",
            reason: format!("no foreground found in {}", args.white.display()),
        });
    }
    let maps = unmix_cube(&fluo, &white, &fg.mask, &engine, args.region)?;
    for (name, plane) in maps.names.iter().zip(&maps.planes) {
        let map = Map2d::new(maps.width, maps.height, plane.clone(), Some(maps.valid.clone()))?;
        render_map(&map, &run.path(&format!("{name}.pgm")))?;
    }
    let map = Map2d::new(maps.width, maps.height, maps.intensity.clone(), Some(maps.valid.clone()))?;
    render_map(&map, &run.path("intensity_634.pgm"))?;
    println!(
        "{} foreground pixels, {} maps written to {}",
        fg.mask.count(),
        maps.names.len() + 1,
        run.out.display()
    );
    Ok(())
}

fn render(cli: &Cli, args: &RenderArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| io(&args.input, e))?;
    let map = parse_map_csv(&text, &args.input.display().to_string())?;
    let output = match &args.output {
        Some(p) => p.clone(),
        None => {
            std::fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
            let stem = args.input.file_stem().map_or("map".into(), |s| s.to_string_lossy().into_owned());
            cli.out.join(format!("{stem}.pgm"))
        }
    };
    render_map(&map, &output)?;
    println!("wrote {} ({}×{})", output.display(), map.width, map.height);
    Ok(())
}

fn gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    if args.probes == 0 {
        return Err(Error::Usage("--probes must be ≥ 1".into()));
    }
    let run = Run::open(cli, "gradcheck")?;
    let cases = gradient_sweep(args.probes, run.cfg.seed)?;
    let mut text = format!("eps {SWEEP_EPS:e}, {} probes per case, tolerance {SWEEP_TOLERANCE:e}\n", args.probes);
    for c in &cases {
        text += &format!(
            "{:<34} max rel error {:.3e}  skipped {:<3} {}\n",
            c.name,
            c.report.max_rel_error,
            c.report.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    run.write("gradcheck.txt", text.clone())?;
    print!("{text}");
    match cases.iter().find(|c| !c.passed()) {
        None => Ok(()),
        Some(c) => Err(Error::Solver {
            op: "gradcheck",
            reason: format!("{} exceeds the tolerance ({:.3e})", c.name, c.report.max_rel_error),
        }),
    }
}

fn repro(cli: &Cli) -> Result<()> {
    let run = Run::open(cli, "repro")?;
    let outcome = run_repro(&run.cfg, &run.out)?;
    let text = std::fs::read_to_string(run.path(SUMMARY_FILE)).map_err(|e| io(&run.path(SUMMARY_FILE), e))?;
    print!("{text}");
    log::info!("{} files written to {}", outcome.files.len(), run.out.display());
    Ok(())
}
