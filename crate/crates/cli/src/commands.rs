use std::path::{Path, PathBuf};

use uniinit::data::{
    load_raw_files, load_raw_split, locate, read_idx, read_task_file, sample_tasks, write_task_file, Dataset, Idx,
    RawSplit, Split, StandardizationStats,
};
use uniinit::experiments::{
    bounds_probe, diagnose_dead, diagnose_ds, dump_prediction_density, pretrain as run_pretrain, pretrain_random_label,
    run_benchmark, sig6, write_benchmark_csv, write_bounds_csv, write_dead_csv, write_density_csv, write_ds_csv,
    write_loss_log, write_summary_csv, BenchmarkSpec, Candidate, DensityMode, DiagnosticConfig, InitScheme,
};
use uniinit::mlp::{read_checkpoint, write_checkpoint, ParamSet};
use uniinit::stochastics::{SeededRng, Stream};

use crate::config::{PretrainMode, RunConfig};
use crate::{
    BenchmarkArgs, CliError, CommonArgs, DensityModeArg, DiagnoseArgs, MakeTasksArgs, ParseCheckArgs, PretrainArgs,
    Probe,
};

type Result<T> = std::result::Result<T, CliError>;

fn resolve(common: &CommonArgs, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    if let Some(d) = &common.dims {
        cfg.arch.dims = d.clone();
    }
    if common.train_limit.is_some() {
        cfg.data.train_limit = common.train_limit;
    }
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Clone>(field: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *field = v.clone();
    }
}

fn raw_split(cfg: &RunConfig, split: Split) -> Result<RawSplit> {
    let d = &cfg.data;
    let explicit = match split {
        Split::Train => (&d.train_images, &d.train_labels),
        Split::Test => (&d.test_images, &d.test_labels),
    };
    Ok(match explicit {
        (Some(i), Some(l)) => load_raw_files(i, l)?,
        (None, None) => load_raw_split(&d.resolved_dir(), split)?,
        _ => {
            return Err(CliError::Config(
                "data: give both image and label paths for a split, or neither".into(),
            ))
        }
    })
}

/// Standardised training split (limited to `train_limit` rows) and, when
/// asked for, the test split standardised with the same statistics.
fn load_data(cfg: &RunConfig, with_test: bool) -> Result<(Dataset<f32>, Option<Dataset<f32>>)> {
    let train_raw = raw_split(cfg, Split::Train)?;
    let stats = StandardizationStats::fit(&train_raw)?;
    let mut train = Dataset {
        images: stats.apply(&train_raw)?,
        labels: train_raw.labels,
        split: Split::Train,
    };
    if let Some(n) = cfg.data.train_limit {
        train = train.head(n);
    }
    let test = if with_test {
        let raw = raw_split(cfg, Split::Test)?;
        Some(Dataset {
            images: stats.apply(&raw)?,
            labels: raw.labels,
            split: Split::Test,
        })
    } else {
        None
    };
    log::info!("loaded {} training examples", train.len());
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Lib(uniinit::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        CliError::Lib(uniinit::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        let p = &mut c.pretrain;
        set(&mut p.mode, &a.mode);
        set(&mut p.init, &a.init);
        set(&mut p.lr, &a.lr);
        set(&mut p.epochs, &a.epochs);
        set(&mut p.batch, &a.batch);
        set(&mut p.n_perturb, &a.n_perturb);
        set(&mut p.n_uniform, &a.n_uniform);
        set(&mut p.s, &a.s);
        set(&mut p.lambda, &a.lambda);
        set(&mut p.xi, &a.xi);
        set(&mut p.window, &a.window);
        set(&mut p.seed, &a.seed);
        if a.max_steps.is_some() {
            p.max_steps = a.max_steps;
        }
    })?;
    if a.common.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let arch = cfg.architecture()?;
    let p = &cfg.pretrain;
    let init_scheme: InitScheme = p.init.into();
    let init: ParamSet<f32> = init_scheme.sample(&arch, &mut SeededRng::for_purpose(p.seed, Stream::Init));
    let (train, _) = load_data(&cfg, false)?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    let ckpt = out.join("checkpoint.bin");
    let log_path = out.join("loss_log.csv");
    let outcome = match p.mode {
        PretrainMode::None => {
            write_checkpoint(&ckpt, &init)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            println!(
                "wrote untrained {} checkpoint to {}",
                init_scheme.name(),
                ckpt.display()
            );
            return Ok(());
        }
        PretrainMode::Ours => run_pretrain(&train.images, init, &p.to_config())?,
        PretrainMode::RandomLabel => pretrain_random_label(&train.images, init, &p.to_config())?,
    };
    write_checkpoint(&ckpt, &outcome.params)?;
    write_loss_log(&log_path, &outcome.windows, p.mode == PretrainMode::Ours)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let w = &outcome.windows[outcome.selected];
    println!(
        "selected window ending at step {} of {} ({} steps, mean loss {})",
        w.end_step,
        outcome.steps,
        w.steps,
        sig6(w.mean.total)
    );
    println!("checkpoint: {}", ckpt.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

pub fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut task_file: Option<PathBuf> = None;
    let cfg = resolve(&a.common, |c| {
        let f = &mut c.finetune;
        set(&mut f.n, &a.n);
        set(&mut f.seeds, &a.seeds);
        set(&mut f.seed, &a.seed);
        set(&mut f.lr, &a.lr);
        set(&mut f.epochs, &a.epochs);
        set(&mut f.batch, &a.batch);
        set(&mut c.pretrain.init, &a.init);
        if let Some(t) = &a.tasks {
            match t.parse::<usize>() {
                Ok(k) => f.tasks = k,
                Err(_) => task_file = Some(PathBuf::from(t)),
            }
        }
    })?;
    if a.common.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let fixed_tasks = match &task_file {
        Some(p) => Some(read_task_file(p).map_err(|e| match e {
            uniinit::Error::Io { .. } => CliError::Config(format!("task file: {e}")),
            other => CliError::Lib(other),
        })?),
        None => None,
    };
    let scheme: InitScheme = cfg.pretrain.init.into();
    let mut dims = cfg.arch.dims.clone();
    let mut candidates: Vec<Candidate<f32>> = Vec::new();
    if let Some(path) = &a.pretrained {
        let params: ParamSet<f32> = read_checkpoint(path)?;
        dims = params.arch().dims().to_vec();
        candidates.push(Candidate {
            init: scheme,
            pretrain: a.pretrain_label.clone().unwrap_or_else(|| "ours".into()),
            pretrained: Some(params),
        });
    }
    if a.pretrained.is_none() || a.compare_scratch {
        candidates.push(Candidate {
            init: scheme,
            pretrain: if a.pretrained.is_none() {
                a.pretrain_label.clone().unwrap_or_else(|| "none".into())
            } else {
                "none".into()
            },
            pretrained: None,
        });
    }
    let (train, test) = load_data(&cfg, true)?;
    let spec = BenchmarkSpec {
        dims,
        ns: cfg.finetune.n.clone(),
        seeds: cfg.finetune.seed_list(),
        tasks: cfg.finetune.tasks,
        fixed_tasks,
        finetune: cfg.finetune.to_config(),
    };
    let report = run_benchmark(&candidates, &spec, &train, &test.expect("test split loaded"))?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    write_benchmark_csv(&out.join("benchmark.csv"), &report.rows)?;
    write_summary_csv(&out.join("summary.csv"), &report.summary)?;
    for s in &report.summary {
        println!(
            "{} {} N={}: {} ± {} (task std {}, {} runs)",
            s.init,
            s.pretrain,
            s.n,
            sig6(s.mean_acc.mean),
            sig6(s.mean_acc.std),
            sig6(s.task_std.mean),
            s.runs
        );
    }
    Ok(())
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let cfg = resolve(&a.common, |c| {
        let d = &mut c.diagnose;
        set(&mut d.batches, &a.batches);
        set(&mut d.batch_size, &a.batch_size);
        set(&mut d.n_perturb, &a.n_perturb);
        set(&mut d.seed, &a.seed);
        set(&mut c.pretrain.s, &a.s);
    })?;
    if a.common.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let params: ParamSet<f32> = read_checkpoint(&a.checkpoint)?;
    let (train, _) = load_data(&cfg, false)?;
    let dc = DiagnosticConfig {
        batches: cfg.diagnose.batches,
        batch_size: cfg.diagnose.batch_size,
        n_perturb: cfg.diagnose.n_perturb,
        scale: cfg.pretrain.s,
        seed: cfg.diagnose.seed,
    };
    let name = match a.probe {
        Probe::Ds => "ds",
        Probe::Dead => "dead",
        Probe::Density => "density",
        Probe::Bounds => "bounds",
    };
    create_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join(format!("{name}.csv"));
    match a.probe {
        Probe::Ds => {
            let ds = diagnose_ds(&params, &train.images, &dc)?;
            write_ds_csv(&path, &ds)?;
            println!("degenerate softmax: {} ± {} %", sig6(ds.mean), sig6(ds.std));
        }
        Probe::Dead => {
            let dead = diagnose_dead(&params, &train.images, &dc)?;
            write_dead_csv(&path, &dead)?;
            for (l, s) in dead.iter().enumerate() {
                println!("hidden {}: {} ± {} % fully dead", l + 1, sig6(s.mean), sig6(s.std));
            }
        }
        Probe::Density => {
            let mode = match a.mode {
                DensityModeArg::PerInput => DensityMode::PerInput,
                DensityModeArg::PerPerturbation => DensityMode::PerPerturbation,
            };
            let rows = dump_prediction_density(&params, &train.images, &dc, mode, a.anchors)?;
            write_density_csv(&path, &rows)?;
            println!("{} density rows", rows.len());
        }
        Probe::Bounds => {
            let rep = bounds_probe(&params, &train.images, &dc, a.r, a.draws)?;
            write_bounds_csv(&path, &rep)?;
            match rep.tail_bound {
                Some(b) => println!("tail: bound {} vs Monte-Carlo {}", sig6(b), sig6(rep.tail_mc)),
                None => println!(
                    "tail: bound undefined (r^2 = {} <= m*alpha* = {}), Monte-Carlo {}",
                    sig6(rep.r * rep.r),
                    sig6(rep.m as f64 * rep.alpha_star),
                    sig6(rep.tail_mc)
                ),
            }
            for v in &rep.vertex {
                println!(
                    "class {}: bound {} vs observed {}",
                    v.class,
                    sig6(v.bound),
                    sig6(v.empirical)
                );
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn make_tasks(a: MakeTasksArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let k = a.k.unwrap_or(cfg.finetune.tasks);
    let seed = a.seed.unwrap_or(cfg.finetune.seed);
    if k == 0 {
        return Err(CliError::Config("--k must be positive".into()));
    }
    let tasks = sample_tasks(k, &mut SeededRng::for_purpose(seed, Stream::Tasks))?;
    match &a.out {
        Some(p) => {
            write_task_file(p, Some(seed), &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), p.display());
        }
        None => print!("{}", uniinit::data::format_task_file(Some(seed), &tasks)),
    }
    Ok(())
}

pub fn parse_check(a: ParseCheckArgs) -> Result<()> {
    let files = if a.files.is_empty() {
        let dir = crate::config::DataSection {
            dir: a.data_dir.clone(),
            ..Default::default()
        }
        .resolved_dir();
        let stems = [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ];
        stems
            .iter()
            .map(|s| locate(&dir, s))
            .collect::<uniinit::Result<Vec<_>>>()?
    } else {
        a.files
    };
    for f in &files {
        match read_idx(f).map_err(|e| match e {
            uniinit::Error::Parse { offset, message } => uniinit::Error::Parse {
                offset,
                message: format!("{}: {message}", f.display()),
            },
            other => other,
        })? {
            Idx::Images { count, rows, cols, .. } => println!("{}: ok, {count} images of {rows}x{cols}", f.display()),
            Idx::Labels(l) => println!("{}: ok, {} labels", f.display(), l.len()),
        }
    }
    Ok(())
}
