use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use boovae::autodiff::Tensor;
use boovae::data::{
    binarize, load_checkpoint, load_idx_images, load_idx_labels, make_class_split_stream, save_checkpoint,
    synthetic_cluster_tasks, Checkpoint, Task, TaskStream,
};
use boovae::distributions::DiagGaussian;
use boovae::metrics::{eval_suite, image_grid, train_probe_classifier, ProbeClassifier, ReportRow};
use boovae::prior::sample_prior;
use boovae::trainer::{train_task, ContinualState, EpochLog};
use boovae::vae::VaeModel;
use boovae::{Error, Result};

use crate::config::{parse_config, DatasetConfig, RunConfig, DATA_DIR_ENV};

/// 1 for configuration problems, 3 for numeric failures, 2 for the rest
/// (unreadable or corrupt data and checkpoints).
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config_from_text(&text)
}

fn config_from_text(text: &str) -> Result<RunConfig> {
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    parse_config(text, data_dir.as_deref())
}

fn cap(task: Task, max: usize) -> Task {
    if max == 0 || task.len() <= max {
        return task;
    }
    let idx: Vec<usize> = (0..max).collect();
    Task {
        examples: task.examples.select_rows(&idx),
        labels: task.labels[..max].to_vec(),
        classes: task.classes,
    }
}

/// Training and test streams, truncated to `cfg.tasks` when set.
fn load_streams(cfg: &RunConfig) -> Result<(TaskStream, TaskStream)> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes_per_task,
            binarize: mode,
            max_per_task,
        } => {
            let tr_x = binarize(&load_idx_images(train_images)?, *mode);
            let tr_y = load_idx_labels(train_labels)?;
            let te_x = binarize(&load_idx_images(test_images)?, *mode);
            let te_y = load_idx_labels(test_labels)?;
            let mut train = make_class_split_stream(&tr_x, &tr_y, *classes_per_task)?;
            train.tasks = train.tasks.into_iter().map(|t| cap(t, *max_per_task)).collect();
            (train, make_class_split_stream(&te_x, &te_y, *classes_per_task)?)
        }
        DatasetConfig::Synthetic { tasks, per_task, test_per_task, dim, separation } => {
            // the generator seed is fixed by the run seed, so train and eval agree
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
            let (all, _) = synthetic_cluster_tasks(*tasks, per_task + test_per_task, *dim, *separation, &mut rng)?;
            let mut train = TaskStream::default();
            let mut test = TaskStream::default();
            for t in all.tasks {
                let a: Vec<usize> = (0..*per_task).collect();
                let b: Vec<usize> = (*per_task..t.len()).collect();
                train.tasks.push(Task {
                    examples: t.examples.select_rows(&a),
                    labels: t.labels[..*per_task].to_vec(),
                    classes: t.classes.clone(),
                });
                test.tasks.push(Task {
                    examples: t.examples.select_rows(&b),
                    labels: t.labels[*per_task..].to_vec(),
                    classes: t.classes,
                });
            }
            (train, test)
        }
    };
    let n = if cfg.tasks == 0 { train.len() } else { cfg.tasks.min(train.len()) };
    Ok((train.prefix(n), test.prefix(n)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

fn probe_for(cfg: &RunConfig, train: &TaskStream) -> Result<Option<ProbeClassifier>> {
    if !cfg.run_eval || train.len() < 2 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e0b_e000);
    let probe = train_probe_classifier(train, &cfg.probe, &mut rng)?;
    info!("probe classifier accuracy {:.4}", probe.accuracy);
    Ok(Some(probe))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let (train, test) = load_streams(&cfg)?;
    if train.is_empty() {
        return Err(Error::Data("no tasks to train".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let probe = probe_for(&cfg, &train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input_dim = train.tasks[0].examples.row_len();
    let model = VaeModel::new(cfg.spec(input_dim), &mut rng)?;
    let mut state = ContinualState::new(model);
    let mut log = format!("{}\n", EpochLog::CSV_HEADER);
    let mut report = format!("{}\n", ReportRow::CSV_HEADER);
    for (t, task) in train.tasks.iter().enumerate() {
        info!("training task {} of {}", t + 1, train.len());
        for row in train_task(&mut state, &task.examples, &cfg.train, &mut rng)? {
            log.push_str(&row.csv_row());
            log.push('\n');
        }
        write_file(&cfg.out_dir.join("train_log.csv"), log.as_bytes())?;
        let ck = Checkpoint {
            config: cfg.text.clone(),
            state: state.clone(),
            rng: rng.clone(),
        };
        save_checkpoint(&cfg.out_dir.join(format!("ckpt_task_{}", t + 1)), &ck)?;
        if cfg.run_eval {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + t as u64));
            let r = eval_suite(&state, &test, probe.as_ref(), &cfg.eval, &mut eval_rng)?;
            info!("after task {}: cumulative NLL {:.3}", t + 1, r.row.cumulative_nll);
            report.push_str(&r.row.csv_row());
            report.push('\n');
            write_file(&cfg.out_dir.join("report.csv"), report.as_bytes())?;
            write_file(&cfg.out_dir.join(format!("samples_task_{}.pgm", t + 1)), &r.grid.to_bytes())?;
        }
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => config_from_text(&ck.config)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (train, test) = load_streams(&cfg)?;
    let probe = probe_for(&cfg, &train)?;
    let seen = ck.state.current_task();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seen as u64));
    let r = eval_suite(&ck.state, &test, probe.as_ref(), &cfg.eval, &mut rng)?;
    fs::create_dir_all(&out)?;
    let report = format!("{}\n{}\n", ReportRow::CSV_HEADER, r.row.csv_row());
    write_file(&out.join(format!("eval_task_{seen}.csv")), report.as_bytes())?;
    write_file(&out.join(format!("eval_samples_task_{seen}.pgm")), &r.grid.to_bytes())?;
    println!("{}", r.row.csv_row());
    Ok(())
}

pub fn sample(checkpoint: &Path, n: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let state = &ck.state;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let (z, comps) = if state.prior.is_empty() {
        let g = DiagGaussian::standard(state.model.spec().latent_dim);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| g.sample(&mut rng)).collect();
        (Tensor::from_rows(&rows)?, None)
    } else {
        let (z, idx) = sample_prior(&state.prior, n, &mut rng)?;
        (z, Some(idx))
    };
    let x = state.model.decode_means(&z)?;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows: Vec<Tensor> = (0..n)
        .step_by(cols)
        .map(|s| x.select_rows(&(s..(s + cols).min(n)).collect::<Vec<_>>()))
        .collect();
    write_file(out, &image_grid(&rows)?.to_bytes())?;
    let mut side = String::from("index,component,task_id\n");
    for i in 0..n {
        match &comps {
            Some(idx) => {
                let k = idx[i];
                side.push_str(&format!("{i},{k},{}\n", state.prior.components()[k].task_id));
            }
            None => side.push_str(&format!("{i},,\n")),
        }
    }
    write_file(&out.with_extension("csv"), side.as_bytes())?;
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let s = &ck.state;
    println!("tasks seen: {}  counts: {:?}", s.current_task(), s.seen_counts);
    println!("bank entries: {}", s.bank.len());
    println!("component,task_id,weight,mean");
    for (i, c) in s.prior.components().iter().enumerate() {
        let mean: Vec<String> = c.snapshot.mean.iter().map(|m| format!("{m:.3}")).collect();
        println!("{i},{},{:.6},{}", c.task_id, c.weight(), mean.join(" "));
    }
    Ok(())
}
