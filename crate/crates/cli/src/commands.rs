use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cacc::adapt::{harden_seg, CounterNet};
use cacc::dataset::{generate, load_dataset, save_dataset, CrowdScene, Dataset};
use cacc::density::DensityMap;
use cacc::experiment::{
    dataset_coverage, evaluate, run_adapt, run_pcs, run_pretrain, AblationMode, CountRow, EvalReport,
    ExperimentConfig,
};
use cacc::pcs::{coverage, infer_segmentation, load_segmentation, save_segmentation, WeakLearner};
use cacc::{io, Error, Result};
use serde::Serialize;

use crate::{provenance, Command, Common};

/// Config file with the command-line overrides applied.
struct Ctx {
    config: ExperimentConfig,
}

impl Ctx {
    fn load(args: &Common) -> Result<Ctx> {
        if !args.config.exists() {
            return Err(Error::MissingArtifact {
                what: "config file".into(),
                path: args.config.clone(),
            });
        }
        let mut config: ExperimentConfig = io::read_json(&args.config)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(mode) = args.ablation {
            config.ablation = mode;
        }
        if let Some(out) = &args.out {
            config.paths.out = out.clone();
        }
        config.validate()?;
        Ok(Ctx { config })
    }

    fn out(&self, sub: &str) -> PathBuf {
        self.config.paths.out.join(sub)
    }

    fn source(&self) -> Result<Dataset> {
        load_dataset(&self.config.paths.source_dir())
    }

    fn target(&self) -> Result<Dataset> {
        load_dataset(&self.config.paths.target_dir())
    }

    fn weak_learner(&self) -> Result<WeakLearner<f32>> {
        WeakLearner::load(&self.out("pcs/weak_learner.ckpt"), self.config.synth.channels, self.config.pcs.hidden)
    }

    fn pretrained(&self) -> Result<CounterNet<f32>> {
        CounterNet::load(&self.out("pretrain/counter.ckpt"), &self.config.counter)
    }

    fn adapted(&self, mode: AblationMode) -> Result<CounterNet<f32>> {
        CounterNet::load(&self.out(&format!("adapt/{mode}/counter.ckpt")), &self.config.counter)
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(&args),
        Command::TrainPcs(args) => train_pcs(&args),
        Command::Seg(args) => seg(&args),
        Command::Pretrain(args) => pretrain(&args),
        Command::Adapt(args) => adapt(&args),
        Command::Eval(args) => eval(&args.common, args.oracle),
        Command::Render(args) => render(&args.common, &args.input, args.output.as_deref()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())
}

#[derive(Serialize)]
struct LossRecord {
    iter: usize,
    loss: f64,
}

fn loss_records(losses: &[f64]) -> Vec<LossRecord> {
    losses.iter().enumerate().map(|(iter, &loss)| LossRecord { iter, loss }).collect()
}

fn gen_data(args: &Common) -> Result<()> {
    let mut ctx = Ctx::load(args)?;
    if let Some(seed) = args.seed {
        ctx.config.synth.seed = seed;
    }
    let (source, target) = generate(&ctx.config.synth)?;
    let (sdir, tdir) = (ctx.config.paths.source_dir(), ctx.config.paths.target_dir());
    save_dataset(&source, &sdir)?;
    save_dataset(&target, &tdir)?;
    for (d, dir) in [(&source, &sdir), (&target, &tdir)] {
        println!(
            "{}: {} train, {} test scenes -> {}",
            d.domain.as_str(),
            d.train.len(),
            d.test.len(),
            dir.display()
        );
    }
    provenance::write(&ctx.out("data"), "gen-data", &ctx.config)
}

fn train_pcs(args: &Common) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let source = ctx.source()?;
    let stage = run_pcs(&ctx.config, &source)?;
    let dir = ctx.out("pcs");
    stage.learner.save(&dir.join("weak_learner.ckpt"))?;
    write_jsonl(&dir.join("log.jsonl"), &loss_records(&stage.log.losses))?;
    let held_out = if source.test.is_empty() { &source.train } else { &source.test };
    let cov = dataset_coverage(&stage.learner, held_out)?;
    let report = serde_json::json!({
        "crowd_bags": stage.log.crowd_bags,
        "background_bags": stage.log.background_bags,
        "bag_accuracy": stage.held_out,
        "coverage": cov,
    });
    io::write_json(&dir.join("report.json"), &report)?;
    println!(
        "weak learner: held-out bag accuracy {:.4}, coverage {:.2}%",
        stage.held_out.overall, cov
    );
    provenance::write(&dir, "train-pcs", &ctx.config)
}

fn seg(args: &Common) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let f = ctx.weak_learner()?;
    let dir = ctx.out("seg");
    let mut summary = serde_json::Map::new();
    for data in [ctx.source()?, ctx.target()?] {
        let ddir = dir.join(data.domain.as_str());
        let scenes: Vec<&CrowdScene> = data.train.iter().chain(&data.test).collect();
        let (mut covered, mut total) = (0.0, 0usize);
        for s in scenes {
            let map = infer_segmentation(&f, s)?;
            save_segmentation(&map, &ddir.join(format!("{}.seg", s.id)))?;
            let hard = harden_seg(&cacc::adapt::normalize_seg(&map.data()[..s.width * s.height])?);
            let pixels: Vec<u8> = hard.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
            io::write_pgm(&ddir.join(format!("{}.pgm", s.id)), s.width, s.height, &pixels)?;
            let mask: Vec<bool> = hard.iter().map(|&v| v > 0.5).collect();
            covered += coverage(&mask, s.width, &s.points) / 100.0 * s.points.len() as f64;
            total += s.points.len();
        }
        let cov = if total == 0 { 100.0 } else { 100.0 * covered / total as f64 };
        println!("{}: coverage {:.2}%", data.domain.as_str(), cov);
        summary.insert(data.domain.as_str().into(), cov.into());
    }
    io::write_json(&dir.join("coverage.json"), &summary)?;
    provenance::write(&dir, "seg", &ctx.config)
}

fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    io::write_json(&dir.join("report.json"), report)?;
    io::write_atomic(&dir.join("counts.csv"), report.to_csv().as_bytes())
}

fn pretrain(args: &Common) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let source = ctx.source()?;
    let (counter, losses) = run_pretrain(&ctx.config, &source)?;
    let dir = ctx.out("pretrain");
    counter.save(&dir.join("counter.ckpt"))?;
    write_jsonl(&dir.join("log.jsonl"), &loss_records(&losses))?;
    let target = ctx.target()?;
    let report = evaluate(&counter, &target.test, ctx.config.train.density_scale, None)?;
    write_eval(&dir, &report)?;
    println!("pretrained counter: target test MAE {:.3}, RMSE {:.3}", report.mae, report.rmse);
    provenance::write(&dir, "pretrain", &ctx.config)
}

fn adapt(args: &Common) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let mode = ctx.config.ablation;
    let pretrained = ctx.pretrained()?;
    let pcs = if mode.uses_pcs() { Some(ctx.weak_learner()?) } else { None };
    let (source, target) = (ctx.source()?, ctx.target()?);
    let run = run_adapt(&ctx.config, mode, &pretrained, pcs.as_ref(), &source, &target)?;
    let dir = ctx.out(&format!("adapt/{mode}"));
    run.counter.save(&dir.join("counter.ckpt"))?;
    write_jsonl(&dir.join("log.jsonl"), &run.log)?;
    let mut counts = String::from("id,count\n");
    for (s, n) in target.train.iter().zip(&run.final_counts) {
        let _ = writeln!(counts, "{},{}", s.id, n);
    }
    io::write_atomic(&dir.join("pseudo_counts.csv"), counts.as_bytes())?;
    println!("adapted ({mode}): {} iterations", run.log.len());
    provenance::write(&dir, "adapt", &ctx.config)
}

fn eval(args: &Common, oracle: bool) -> Result<()> {
    let ctx = Ctx::load(args)?;
    let mode = ctx.config.ablation;
    let target = ctx.target()?;
    if target.test.is_empty() {
        return Err(Error::Empty("target test split is empty".into()));
    }
    let pcs = if ctx.out("pcs/weak_learner.ckpt").exists() { Some(ctx.weak_learner()?) } else { None };
    let (dir, report) = if oracle {
        let rows = target
            .test
            .iter()
            .map(|s| CountRow {
                id: s.id.clone(),
                gt: s.count() as f64,
                est: s.count() as f64,
            })
            .collect();
        (ctx.out("eval/oracle"), EvalReport::from_rows(rows, None)?)
    } else {
        let counter = ctx.adapted(mode)?;
        let scale = ctx.config.train.density_scale;
        let dir = ctx.out(&format!("eval/{mode}"));
        for s in &target.test {
            let pred = counter.predict(s.to_tensor().reshape(vec![1, s.channels, s.height, s.width])?)?;
            let values = pred.data().iter().map(|&v| (v as f64 / scale) as f32).collect();
            DensityMap::from_values(s.width, s.height, values)?.save(&dir.join(format!("density/{}.density", s.id)))?;
        }
        (dir.clone(), evaluate(&counter, &target.test, scale, pcs.as_ref())?)
    };
    write_eval(&dir, &report)?;
    match report.coverage {
        Some(c) => println!("MAE {:.3}  RMSE {:.3}  coverage {:.2}%", report.mae, report.rmse, c),
        None => println!("MAE {:.3}  RMSE {:.3}", report.mae, report.rmse),
    }
    provenance::write(&dir, "eval", &ctx.config)
}

fn render(args: &Common, input: &Path, output: Option<&Path>) -> Result<()> {
    let ctx = Ctx::load(args)?;
    if !input.exists() {
        return Err(Error::MissingArtifact {
            what: "map to render".into(),
            path: input.to_path_buf(),
        });
    }
    let (w, h, values) = match DensityMap::load(input) {
        Ok(map) => (map.width(), map.height(), map.values().to_vec()),
        Err(_) => {
            let seg = load_segmentation(input)?;
            let (h, w) = (seg.shape()[1], seg.shape()[2]);
            (w, h, seg.data()[..w * h].to_vec())
        }
    };
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("pgm"));
    io::write_pgm(&out, w, h, &io::render_max_normalized(&values))?;
    println!("{}", out.display());
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    provenance::write(dir, "render", &ctx.config)
}
