use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use dcchi_core::experiments::{
    breakdown_ablation, cg_ablation, correlation_suite, network_gradchecks, primitive_gradchecks, BreakdownRow, CgRow,
    CheckRow, DeskData, DeskScale,
};
use dcchi_core::io::{load_tensor, save_tensor, Checkpoint, RunConfig};
use dcchi_core::metrics::{proxy_compare, CorrProxyReport, QualityReport};
use dcchi_core::sensing::{MeasurementPair, NoiseModel, SensingSystem};
use dcchi_core::solver::{train, CgConfig, Model, Sample, TrainConfig};
use dcchi_core::synth::blob_scene;
use dcchi_core::{Error, Result, Tensor};

use crate::{Cli, Command, Global};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Cg,
    Breakdown,
    All,
}

const DEFAULT_SHAPE: [usize; 3] = [32, 32, 8];

fn default_train() -> TrainConfig {
    TrainConfig {
        steps: 200,
        lr: 1e-3,
        min_lr: 1e-5,
        batch_size: 1,
        grad_clip: None,
    }
}

/// Loads `--config` (or builds defaults for `shape`) and applies flag overrides.
fn load_config(g: &Global, shape: Option<[usize; 3]>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let [h, w, c] = shape.unwrap_or(DEFAULT_SHAPE);
            RunConfig::simulation(h, w, c, 0)
        }
    };
    if let Some(s) = g.seed {
        cfg.model_seed = s;
        cfg.noise.seed = s;
    }
    if let Some(k) = g.cg_iters {
        cfg.cg.max_iters = k;
    }
    if let Some(k) = g.stages {
        cfg.stages = k;
    }
    let t = &mut cfg.arch.toggles;
    t.crw &= !g.disable_crw;
    t.mha_c &= !g.disable_mhac;
    t.mha_s &= !g.disable_mhas;
    cfg.validate()?;
    Ok(cfg)
}

fn cube_shape(t: &Tensor, what: &Path) -> Result<[usize; 3]> {
    match *t.shape() {
        [h, w, c] => Ok([h, w, c]),
        ref s => Err(Error::Dimension(format!(
            "{} holds shape {s:?}, expected [H, W, C]",
            what.display()
        ))),
    }
}

fn load_cube(path: &Path) -> Result<Tensor> {
    let t = load_tensor(path)?.to_f64();
    cube_shape(&t, path)?;
    Ok(t)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Output directory plus the run record written next to every result.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_owned());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(p, body)?;
        Ok(())
    }

    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let p = self.path(name);
        save_tensor(p, t)
    }

    /// Writes `run.toml` (a replayable config) and `manifest.toml` (command,
    /// config hash, produced files).
    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        self.text("run.toml", &cfg.to_toml())?;
        let mut m = format!(
            "command = \"{command}\"\nconfig_hash = \"{}\"\nfiles = [",
            cfg.model_spec().hash()
        );
        let list: Vec<String> = self.files.iter().map(|f| format!("\"{f}\"")).collect();
        m.push_str(&list.join(", "));
        m.push_str("]\n");
        fs::write(self.dir.join("manifest.toml"), m)?;
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { scene, synthetic } => simulate(g, scene.as_deref(), *synthetic),
        Command::Reconstruct {
            cassi,
            pan,
            checkpoint,
            scene,
            identity,
        } => reconstruct(
            g,
            cassi.as_deref(),
            pan.as_deref(),
            checkpoint.as_deref(),
            scene.as_deref(),
            *identity,
        ),
        Command::Train {
            dataset,
            synthetic,
            steps,
            lr,
        } => train_cmd(g, dataset.as_deref(), *synthetic, *steps, *lr),
        Command::Gradcheck { quick } => gradcheck(g, *quick),
        Command::Ablate {
            study,
            checkpoint,
            scene,
            steps,
            repeats,
        } => ablate(g, *study, checkpoint.as_deref(), scene.as_deref(), *steps, *repeats),
        Command::AnalyzeCorr { scenes, synthetic } => analyze_corr(g, scenes, *synthetic),
    }
}

/// Flag path, else the config path, else an error naming both.
fn input(flag: Option<&Path>, cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => cfg
            .path(key)
            .map_err(|_| Error::Config(format!("no {key} given: pass --{key} or set paths.{key}"))),
    }
}

fn scene_from_flag_or_config(g: &Global, flag: Option<&Path>) -> Result<(RunConfig, Tensor, PathBuf)> {
    let pre = match (flag, &g.config) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(_)) => load_config(g, None)?.path("scene")?,
        (None, None) => return Err(Error::Config("no scene given: pass --scene or set paths.scene".into())),
    };
    let cube = load_cube(&pre)?;
    let cfg = load_config(g, Some(cube_shape(&cube, &pre)?))?;
    Ok((cfg, cube, pre))
}

fn simulate(g: &Global, scene: Option<&Path>, synthetic: bool) -> Result<()> {
    let mut out = Output::new(&g.out)?;
    let (mut cfg, cube, scene_path) = if synthetic {
        let cfg = load_config(g, None)?;
        let s = &cfg.sensing;
        let cube = blob_scene(s.height, s.width, s.bands, cfg.model_seed.wrapping_add(10_000));
        let p = out.path("scene.dct");
        save_tensor(&p, &cube)?;
        (cfg, cube, p)
    } else {
        scene_from_flag_or_config(g, scene)?
    };
    let sys = cfg.sensing.build(&cfg.base_dir)?;
    let y = sys.simulate(&cube, &cfg.noise)?;
    out.tensor("cassi.dct", &y.cassi)?;
    out.tensor("pan.dct", &y.pan)?;
    let mask_file = if cfg.sensing.mask_seed.is_none() {
        out.tensor("mask.dct", sys.mask().transmission())?;
        Some("mask.dct")
    } else {
        None
    };
    if let Some(f) = mask_file {
        cfg.sensing.mask_file = Some(f.into());
    }
    out.text("sensing.toml", &cfg.sensing.to_toml())?;
    cfg.paths.scene = Some(absolute(&scene_path));
    cfg.paths.cassi = Some("cassi.dct".into());
    cfg.paths.pan = Some("pan.dct".into());
    println!(
        "cassi {:?} pan {:?} d={} noise=({}, {})",
        y.cassi.shape(),
        y.pan.shape(),
        sys.step(),
        cfg.noise.sigma_c,
        cfg.noise.sigma_p
    );
    out.finish("simulate", &cfg)
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let spec = cfg.model_spec();
    let mut model = Model::new(&spec.arch, spec.stages, cfg.model_seed)?;
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_spec(&spec)?;
            ck.load_into(model.params_mut())?;
        }
        None => model.make_denoisers_identity(),
    }
    Ok(model)
}

fn reconstruct(
    g: &Global,
    cassi: Option<&Path>,
    pan: Option<&Path>,
    checkpoint: Option<&Path>,
    scene: Option<&Path>,
    identity: bool,
) -> Result<()> {
    let mut cfg = load_config(g, None)?;
    let cassi_path = input(cassi, &cfg, "cassi")?;
    let pan_path = input(pan, &cfg, "pan")?;
    let ck_path = if identity {
        None
    } else {
        Some(input(checkpoint, &cfg, "checkpoint")?)
    };
    let scene_path = match scene {
        Some(p) => Some(p.to_path_buf()),
        None => cfg.path("scene").ok(),
    };
    let sys = Arc::new(cfg.sensing.build(&cfg.base_dir)?);
    let y = MeasurementPair::new(
        &sys,
        load_tensor(&cassi_path)?.to_f64(),
        load_tensor(&pan_path)?.to_f64(),
    )?;
    let model = model_for(&cfg, ck_path.as_deref())?;
    let r = model.reconstruct(&y, &sys, &cfg.cg)?;
    let mut out = Output::new(&g.out)?;
    out.tensor("recon.dct", &r.cube)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    let mut summary = format!(
        "shape={:?}\nstages={}\ncg_iters={}\nmu={}\nsigma={}\n",
        r.cube.shape(),
        model.stages(),
        cfg.cg.max_iters,
        fmt(&r.params.mu),
        fmt(&r.params.sigma)
    );
    if let Some(p) = &scene_path {
        let truth = load_cube(p)?;
        let q = QualityReport::evaluate(&r.cube, &truth)?;
        summary.push_str(&q.to_kv());
        out.text("quality.csv", &q.to_csv())?;
        println!("psnr_db={:.4} ssim={:.5}", q.psnr_db, q.ssim);
        cfg.paths.scene = Some(absolute(p));
    }
    out.text("summary.txt", &summary)?;
    cfg.paths.cassi = Some(absolute(&cassi_path));
    cfg.paths.pan = Some(absolute(&pan_path));
    cfg.paths.checkpoint = ck_path.map(|p| absolute(&p));
    out.finish("reconstruct", &cfg)
}

fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dct"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("dataset {} holds no .dct cubes", dir.display())));
    }
    Ok(files)
}

fn train_cmd(
    g: &Global,
    dataset: Option<&Path>,
    synthetic: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
) -> Result<()> {
    let (mut cfg, cubes) = match synthetic {
        Some(n) => {
            let cfg = load_config(g, None)?;
            let [h, w, c] = [cfg.sensing.height, cfg.sensing.width, cfg.sensing.bands];
            let cubes: Vec<Tensor> = (0..n as u64)
                .map(|i| blob_scene(h, w, c, cfg.model_seed + 1 + i))
                .collect();
            (cfg, cubes)
        }
        None => {
            let dir = match (dataset, &g.config) {
                (Some(d), _) => d.to_path_buf(),
                (None, Some(_)) => load_config(g, None)?.path("dataset")?,
                (None, None) => {
                    return Err(Error::Config(
                        "no dataset: pass --dataset, --synthetic or set paths.dataset".into(),
                    ))
                }
            };
            let files = dataset_files(&dir)?;
            let cubes = files.iter().map(|f| load_cube(f)).collect::<Result<Vec<_>>>()?;
            let mut cfg = load_config(g, Some(cube_shape(&cubes[0], &files[0])?))?;
            cfg.paths.dataset = Some(absolute(&dir));
            (cfg, cubes)
        }
    };
    if cubes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut tc = cfg.train.clone().unwrap_or_else(default_train);
    if let Some(s) = steps {
        tc.steps = s;
    }
    if let Some(l) = lr {
        // the annealing floor never exceeds the peak
        tc.lr = l;
        tc.min_lr = tc.min_lr.min(l);
    }
    cfg.train = Some(tc.clone());
    let sys = Arc::new(cfg.sensing.build(&cfg.base_dir)?);
    let samples = cubes
        .into_iter()
        .enumerate()
        .map(|(i, cube)| {
            let noise = NoiseModel {
                seed: cfg.noise.seed.wrapping_add(i as u64),
                ..cfg.noise
            };
            Sample::simulate(cube, &sys, &noise)
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = cfg.model_spec();
    let mut model = Model::new(&spec.arch, spec.stages, cfg.model_seed)?;
    let every = (tc.steps / 20).max(1);
    let report = train(&mut model, &samples, &sys, &cfg.cg, &tc, |s, l| {
        if s % every == 0 || s + 1 == tc.steps {
            eprintln!("step {s:>5}  loss {l:.6}");
        }
    })?;
    let mut out = Output::new(&g.out)?;
    let mut log = String::from("step,lr,loss\n");
    for (s, (l, r)) in report.loss_trace.iter().zip(&report.lr_trace).enumerate() {
        log.push_str(&format!("{s},{r:.6e},{l:.9}\n"));
    }
    out.text("loss.csv", &log)?;
    let ck = out.path("model.dck");
    Checkpoint::from_store(&spec, model.params()).save(&ck)?;
    cfg.paths.checkpoint = Some("model.dck".into());
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        println!("steps={} loss {first:.6} -> {last:.6}", report.loss_trace.len());
    }
    out.finish("train", &cfg)
}

fn gradcheck(g: &Global, quick: bool) -> Result<()> {
    let cfg = load_config(g, None)?;
    let seed = cfg.model_seed;
    let mut rows: Vec<CheckRow> = primitive_gradchecks(seed, 1e-4)?;
    if !quick {
        rows.extend(network_gradchecks(seed, 1e-3, 4)?);
    }
    let mut report = String::new();
    for r in &rows {
        let line = format!("{:<28} {}", r.name, r.report);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    let worst = rows
        .iter()
        .max_by(|a, b| (a.report.max_rel_error / a.report.tol).total_cmp(&(b.report.max_rel_error / b.report.tol)))
        .expect("at least one check");
    let failed = rows.iter().filter(|r| !r.report.passed).count();
    let tail = format!(
        "worst: {} {}\n{} of {} checks passed\n",
        worst.name,
        worst.report,
        rows.len() - failed,
        rows.len()
    );
    print!("{tail}");
    report.push_str(&tail);
    let mut out = Output::new(&g.out)?;
    out.text("gradcheck.txt", &report)?;
    out.finish("gradcheck", &cfg)?;
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn ablate(
    g: &Global,
    study: Study,
    checkpoint: Option<&Path>,
    scene: Option<&Path>,
    steps: usize,
    repeats: usize,
) -> Result<()> {
    let mut cfg = load_config(g, None)?;
    let sys = Arc::new(cfg.sensing.build(&cfg.base_dir)?);
    let [h, w, c] = sys.cube_shape();
    let truth = match scene {
        Some(p) => load_cube(p)?,
        None => blob_scene(h, w, c, cfg.model_seed.wrapping_add(10_000)),
    };
    let held_out = Sample::simulate(truth, &sys, &cfg.noise)?;
    let mut out = Output::new(&g.out)?;
    if matches!(study, Study::Cg | Study::All) {
        let ck = checkpoint
            .map(Path::to_path_buf)
            .or_else(|| cfg.path("checkpoint").ok());
        let model = model_for(&cfg, ck.as_deref())?;
        let rows = cg_ablation(&model, &held_out, &sys, &CgConfig::PRESETS, repeats)?;
        let csv = table(CgRow::CSV_HEADER, rows.iter().map(CgRow::csv_row));
        print!("{csv}");
        out.text("ablation_cg.csv", &csv)?;
        cfg.paths.checkpoint = ck.map(|p| absolute(&p));
    }
    if matches!(study, Study::Breakdown | Study::All) {
        let desk = DeskScale {
            height: h,
            width: w,
            bands: c,
            stages: cfg.stages,
            window: cfg.arch.window,
            cg: cfg.cg,
            seed: cfg.model_seed,
            ..DeskScale::default()
        };
        let data = DeskData {
            train: (0..desk.train_scenes as u64)
                .map(|i| Sample::simulate(blob_scene(h, w, c, desk.seed + 1 + i), &sys, &cfg.noise))
                .collect::<Result<_>>()?,
            sys: sys.clone(),
            held_out: held_out.clone(),
        };
        let tc = TrainConfig {
            steps,
            ..cfg.train.clone().unwrap_or_else(default_train)
        };
        let rows = breakdown_ablation(&desk, &data, &tc, repeats)?;
        let csv = table(BreakdownRow::CSV_HEADER, rows.iter().map(BreakdownRow::csv_row));
        print!("{csv}");
        out.text("ablation_breakdown.csv", &csv)?;
    }
    out.finish("ablate", &cfg)
}

fn table(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn analyze_corr(g: &Global, scenes: &[PathBuf], synthetic: usize) -> Result<()> {
    let (cfg, reports, names) = if scenes.is_empty() {
        let cfg = load_config(g, None)?;
        let s = &cfg.sensing;
        let reports = correlation_suite(s.height, s.width, s.bands, synthetic, cfg.model_seed, &cfg.correlation)?;
        let names: Vec<String> = (0..synthetic).map(|i| format!("synthetic{i}")).collect();
        (cfg, reports, names)
    } else {
        let cubes = scenes.iter().map(|p| load_cube(p)).collect::<Result<Vec<_>>>()?;
        let cfg = load_config(g, Some(cube_shape(&cubes[0], &scenes[0])?))?;
        let sys: SensingSystem = cfg.sensing.build(&cfg.base_dir)?;
        let reports = cubes
            .iter()
            .map(|cube| proxy_compare(cube, &sys.pan_forward(cube)?, &cfg.correlation))
            .collect::<Result<Vec<_>>>()?;
        let names = scenes
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect();
        (cfg, reports, names)
    };
    let n = reports.len().max(1) as f64;
    let mean = CorrProxyReport {
        rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
        correlation: reports.iter().map(|r| r.correlation).sum::<f64>() / n,
        psnr_db: reports.iter().map(|r| r.psnr_db).sum::<f64>() / n,
    };
    let rows = names
        .iter()
        .zip(&reports)
        .map(|(name, r)| r.csv_row(name))
        .chain(std::iter::once(mean.csv_row("mean")));
    let csv = table(CorrProxyReport::CSV_HEADER, rows);
    print!("{csv}");
    let mut out = Output::new(&g.out)?;
    out.text("corr.csv", &csv)?;
    out.finish("analyze-corr", &cfg)
}
