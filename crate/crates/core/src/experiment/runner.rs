use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Kind, NormChoice};
use super::manifest::{summarize, Manifest, SummaryStat, MANIFEST_FILE};
use crate::data::{self, BayesClassifier, Dataset, DeviationProbe, GmmSpec};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::lpnorm::LpNormLayer;
use crate::metrics::{representation_snapshot, silhouette};
use crate::models::{build_probe, Activation, Classifier, ClassifierSpec};
use crate::render::{self, ClassGrid};
use crate::seed;
use crate::train::{self, Evaluation, RunRecord, RUN_CSV_HEADER};

// Streams under the master seed.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_VAL_DATA: u64 = 2;
const STREAM_DEVIATION: u64 = 3;
const STREAM_TRIALS: u64 = 4;

// Streams under a trial seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Seed of trial `t` under `master`. Data, validation set and deviation
/// sample are shared by all trials; trials differ in initialization and
/// shuffling.
pub fn trial_seed(master: u64, t: usize) -> u64 {
    seed::derive(seed::derive(master, STREAM_TRIALS), t as u64)
}

/// Files written so far, relative to the output root.
struct Outputs {
    root: PathBuf,
    written: Mutex<BTreeSet<String>>,
}

impl Outputs {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        fsutil::write_atomic(&self.root.join(rel), bytes)?;
        self.note(rel);
        Ok(())
    }

    fn note(&self, rel: &str) {
        self.written.lock().expect("lock").insert(rel.to_string());
    }
}

#[derive(Clone, Debug)]
enum Plan {
    Poc { dim: usize, norm: Option<LpNormLayer> },
    Probe { hidden: usize, norm: Option<LpNormLayer> },
}

#[derive(Clone, Debug)]
struct Cell {
    trial: usize,
    setting: String,
    plan: Plan,
}

impl Cell {
    fn name(&self) -> String {
        match self.plan {
            Plan::Poc { dim, .. } => format!("{}_d{dim}", self.setting),
            Plan::Probe { .. } => self.setting.clone(),
        }
    }
}

/// Everything a cell reports back.
struct CellResult {
    cell: Cell,
    dim: usize,
    record: RunRecord,
    metrics: Vec<(String, f64)>,
    extra_rows: Vec<String>,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    train: Dataset,
    val: Dataset,
    probe: DeviationProbe,
    bayes_grid: Option<ClassGrid>,
    out: &'a Outputs,
}

fn plans(cfg: &ExperimentConfig) -> Vec<(String, Plan)> {
    let poc = |s: NormChoice, dim| (s.label(), Plan::Poc { dim, norm: s.layer(cfg.norm.alpha) });
    match cfg.kind {
        Kind::Boundary | Kind::PSweep | Kind::Projection => {
            cfg.settings().into_iter().map(|s| poc(s, cfg.model.penultimate)).collect()
        }
        Kind::BayesDim => cfg
            .settings()
            .into_iter()
            .flat_map(|s| cfg.model.dims.iter().map(move |&d| poc(s, d)))
            .collect(),
        Kind::AlphaSweep => {
            let p = cfg.norm.p.order();
            [super::AlphaChoice::Value(1.0), super::AlphaChoice::Learnable]
                .into_iter()
                .map(|a| {
                    (
                        a.label(),
                        Plan::Poc {
                            dim: cfg.model.penultimate,
                            norm: Some(LpNormLayer::new(p, a.radius())),
                        },
                    )
                })
                .collect()
        }
        Kind::ProbeSilhouette => cfg
            .model
            .probe_hidden
            .iter()
            .map(|&h| {
                (
                    format!("h{h}"),
                    Plan::Probe {
                        hidden: h,
                        norm: cfg.single_layer(),
                    },
                )
            })
            .collect(),
    }
}

fn build(cfg: &ExperimentConfig, plan: &Plan, input_dim: usize, num_classes: usize, seed: u64) -> Result<Classifier> {
    match plan {
        Plan::Poc { dim, norm } => Classifier::new(ClassifierSpec {
            input_dim,
            hidden: vec![cfg.model.hidden, *dim],
            activation: Activation::Tanh,
            norm: *norm,
            num_classes,
            init_seed: seed,
        }),
        Plan::Probe { hidden, norm } => build_probe(*hidden, input_dim, *norm, num_classes, seed),
    }
}

fn run_cell(sh: &Shared<'_>, cell: Cell) -> Result<CellResult> {
    let cfg = sh.cfg;
    let ts = trial_seed(cfg.seed, cell.trial);
    let dir = format!("trial-{}", cell.trial);
    let name = cell.name();
    let mut model = build(
        cfg,
        &cell.plan,
        sh.train.dim(),
        sh.train.num_classes.max(sh.val.num_classes),
        seed::derive(ts, STREAM_INIT),
    )?;
    let dim = model.spec().penultimate_dim();
    let tcfg = cfg.train.train_config(seed::derive(ts, STREAM_SHUFFLE));
    let eval = Evaluation {
        validation: Some(&sh.val),
        deviation: (cfg.kind != Kind::ProbeSilhouette).then_some(&sh.probe),
        deviation_every: (cfg.kind == Kind::BayesDim).then_some(cfg.train.eval_every),
    };

    let mut metrics = Vec::new();
    let mut extra_rows = Vec::new();
    let record = train::train_with(&mut model, &sh.train, &tcfg, &eval, |epoch, c| {
        if cfg.kind != Kind::Boundary {
            return Ok(());
        }
        let grid = render::decision_grid(c, 2, cfg.render.bounds(), cfg.render.resolution)?;
        sh.out.write(&format!("{dir}/boundary_{}_e{epoch}.pgm", cell.setting), &grid.to_pgm()?)?;
        let rel = format!("{dir}/checkpoints/{}_e{epoch}.lpn", cell.setting);
        c.save(&sh.out.root.join(&rel))?;
        sh.out.note(&rel);
        let bayes_grid = sh.bayes_grid.as_ref().expect("boundary runs have a Bayes grid");
        let grid_dis = grid.disagreement(bayes_grid);
        let dev = sh.probe.deviation(c)?.estimate;
        metrics.push((format!("bayes_dev/{}/e{epoch}", cell.setting), dev));
        metrics.push((format!("grid_disagreement/{}/e{epoch}", cell.setting), grid_dis));
        extra_rows.push(format!("{},{epoch},{dev},{grid_dis}", cell.setting));
        Ok(())
    })?;

    let last = record.last().clone();
    let key = match cfg.kind {
        Kind::BayesDim => name.clone(),
        _ => cell.setting.clone(),
    };
    match cfg.kind {
        Kind::Boundary => {}
        Kind::ProbeSilhouette => {
            let snap = representation_snapshot(&model, &sh.val)?;
            let norm = silhouette(&snap.normalized, &snap.labels)?.overall;
            let raw = silhouette(&snap.raw, &snap.labels)?.overall;
            metrics.push((format!("silhouette_norm/{key}"), norm));
            metrics.push((format!("silhouette_raw/{key}"), raw));
            metrics.push((format!("val_acc/{key}"), last.val_acc.unwrap_or(f64::NAN)));
            let hidden = match cell.plan {
                Plan::Probe { hidden, .. } => hidden,
                Plan::Poc { .. } => unreachable!("probe kind builds probes"),
            };
            extra_rows.push(format!("{hidden},{norm},{raw},{}", fsutil::opt_field(last.val_acc)));
        }
        _ => {
            metrics.push((format!("val_acc/{key}"), last.val_acc.unwrap_or(f64::NAN)));
            metrics.push((format!("train_loss/{key}"), last.train_loss));
            if let Some(dev) = last.bayes_dev {
                metrics.push((format!("bayes_dev/{key}"), dev));
            }
            if let Some(p) = last.p_decoded.filter(|_| model.params().iter().any(|p| p.name == "lpnorm.p_raw")) {
                metrics.push((format!("p_decoded/{key}"), p));
            }
            if let Some(a) = last.alpha_decoded.filter(|_| model.params().iter().any(|p| p.name == "lpnorm.alpha_raw")) {
                metrics.push((format!("alpha_decoded/{key}"), a));
            }
        }
    }
    if cfg.kind == Kind::Projection {
        let snap = representation_snapshot(&model, &sh.val)?;
        sh.out.write(&format!("{dir}/projection_{key}.csv"), snap.to_csv().as_bytes())?;
        for (kind, pts) in [("raw", &snap.raw), ("norm", &snap.normalized)] {
            let img = render::scatter_image(pts, &snap.labels, render::DEFAULT_RESOLUTION)?;
            sh.out.write(&format!("{dir}/projection_{key}_{kind}.ppm"), &img.to_ppm())?;
        }
        let norm = silhouette(&snap.normalized, &snap.labels)?.overall;
        metrics.push((format!("silhouette_norm/{key}"), norm));
    }
    if cfg.kind != Kind::Boundary {
        let rel = format!("{dir}/checkpoints/{name}.lpn");
        model.save(&sh.out.root.join(&rel))?;
        sh.out.note(&rel);
    }
    Ok(CellResult {
        cell,
        dim,
        record,
        metrics,
        extra_rows,
    })
}

fn load_or_sample(path: Option<&Path>, spec: &GmmSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::read_csv(p),
        None => data::sample(spec, n_per_class, seed),
    }
}

fn ensure_empty(dir: &Path) -> Result<()> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(Error::Domain(format!(
                    "output directory {} is not empty",
                    dir.display()
                )));
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Runs `cfg` into the empty (or absent) directory `out` on `jobs` worker
/// threads and returns the manifest, which is written last.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate(Path::new("<config>"))?;
    ensure_empty(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| run_in_pool(cfg, out))
}

fn run_in_pool(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let outputs = Outputs {
        root: out.to_path_buf(),
        written: Mutex::new(BTreeSet::new()),
    };
    let spec = data::poc_spec();
    let train_data = load_or_sample(
        cfg.data.train_csv.as_deref(),
        &spec,
        cfg.data.n_per_class,
        seed::derive(cfg.seed, STREAM_TRAIN_DATA),
    )?;
    let val = load_or_sample(
        cfg.data.val_csv.as_deref(),
        &spec,
        cfg.data.val_per_class,
        seed::derive(cfg.seed, STREAM_VAL_DATA),
    )?;
    if train_data.dim() != val.dim() {
        return Err(Error::Dimension {
            op: "validation set",
            left: vec![train_data.dim()],
            right: vec![val.dim()],
        });
    }
    outputs.write("data/train.csv", train_data.to_csv().as_bytes())?;
    outputs.write("data/val.csv", val.to_csv().as_bytes())?;
    let probe = DeviationProbe::new(&spec, cfg.data.deviation_samples, seed::derive(cfg.seed, STREAM_DEVIATION))?;
    let bayes_grid = if cfg.kind == Kind::Boundary {
        let g = render::decision_grid(&BayesClassifier(&spec), 2, cfg.render.bounds(), cfg.render.resolution)?;
        outputs.write("bayes.pgm", &g.to_pgm()?)?;
        Some(g)
    } else {
        None
    };
    let shared = Shared {
        cfg,
        train: train_data,
        val,
        probe,
        bayes_grid,
        out: &outputs,
    };

    let cells: Vec<Cell> = (0..cfg.trials)
        .flat_map(|trial| {
            plans(cfg)
                .into_iter()
                .map(move |(setting, plan)| Cell { trial, setting, plan })
        })
        .collect();
    let results: Vec<CellResult> = cells
        .into_par_iter()
        .map(|c| run_cell(&shared, c))
        .collect::<Result<_>>()?;

    let mut per_trial: Vec<Vec<(String, f64)>> = vec![Vec::new(); cfg.trials];
    for t in 0..cfg.trials {
        let dir = format!("trial-{t}");
        let mine: Vec<&CellResult> = results.iter().filter(|r| r.cell.trial == t).collect();

        let mut runs = format!("setting,dim,{RUN_CSV_HEADER}\n");
        for r in &mine {
            for e in &r.record.epochs {
                let _ = writeln!(runs, "{},{},{}", r.cell.setting, r.dim, e.csv_fields());
            }
        }
        outputs.write(&format!("{dir}/runs.csv"), runs.as_bytes())?;

        let extra_header = match cfg.kind {
            Kind::Boundary => Some(("disagreement.csv", "setting,epoch,bayes_dev,grid_disagreement")),
            Kind::ProbeSilhouette => Some(("silhouette.csv", "hidden,silhouette_norm,silhouette_raw,val_acc")),
            _ => None,
        };
        if let Some((file, header)) = extra_header {
            let mut text = format!("{header}\n");
            for row in mine.iter().flat_map(|r| &r.extra_rows) {
                let _ = writeln!(text, "{row}");
            }
            outputs.write(&format!("{dir}/{file}"), text.as_bytes())?;
        }

        let mut text = String::from("metric,value\n");
        for r in &mine {
            for (m, v) in &r.metrics {
                let _ = writeln!(text, "{m},{v}");
                per_trial[t].push((m.clone(), *v));
            }
        }
        outputs.write(&format!("{dir}/metrics.csv"), text.as_bytes())?;
    }

    let summary: Vec<SummaryStat> = per_trial[0]
        .iter()
        .map(|(metric, _)| {
            let values: Vec<f64> = per_trial
                .iter()
                .map(|rows| rows.iter().find(|(m, _)| m == metric).map_or(f64::NAN, |r| r.1))
                .collect();
            summarize(metric, &values)
        })
        .collect();
    let mut text = String::from("metric,trials,mean,sd,ci_low,ci_high\n");
    for s in &summary {
        let _ = writeln!(text, "{},{},{},{},{},{}", s.metric, s.trials, s.mean, s.sd, s.ci_low, s.ci_high);
    }
    outputs.write("summary.csv", text.as_bytes())?;

    let mut echo = cfg.clone();
    echo.out = None;
    outputs.note(MANIFEST_FILE);
    let manifest = Manifest {
        tool: format!("lpnlab {}", env!("CARGO_PKG_VERSION")),
        kind: cfg.kind,
        config_hash: echo.hash(),
        master_seed: cfg.seed,
        trial_seeds: (0..cfg.trials).map(|t| trial_seed(cfg.seed, t)).collect(),
        config: echo,
        artifacts: outputs.written.lock().expect("lock").iter().cloned().collect(),
        summary,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fsutil::write_atomic(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}
