use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bsce_core::data::{class_counts, load_dataset, save_dataset, synth_dataset, Dataset, Split};
use bsce_core::ensemble::{benchmark_loss_sweep, ensemble_eval, evaluate, tta_sweep};
use bsce_core::losses::class_weights;
use bsce_core::report::{SweepReport, SweepRow};
use bsce_core::trainer::{init_model, load_checkpoint, save_checkpoint, train, TrainState};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.io.resolve(&cfg.io.dataset);
    load_dataset(&path).map_err(CliError::at(&path))
}

fn load_state(path: &Path) -> Result<TrainState> {
    load_checkpoint(path).map_err(CliError::at(path))
}

fn emit(cfg: &RunConfig, name: &str, report: &SweepReport) -> Result<()> {
    ensure_dir(&cfg.io.out_dir)?;
    write_file(&cfg.io.out_dir.join(name), &report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let data = synth_dataset(&cfg.dataset)?;
    ensure_dir(&cfg.io.out_dir)?;
    let path = cfg.io.resolve(&cfg.io.dataset);
    save_dataset(&data, &path).map_err(CliError::at(&path))?;
    info!("wrote {}", path.display());

    let observed = class_counts(&data)?;
    let mut clean = vec![0u64; data.classes];
    data.train.iter().for_each(|s| clean[s.true_label] += 1);
    // Weights are undefined once noise empties a class.
    let weights = match class_weights(&observed) {
        Ok(w) => Some(w),
        Err(e) => {
            warn!("class weights unavailable: {e}");
            None
        }
    };

    let mut out = String::new();
    writeln!(
        out,
        "{} classes, {} train / {} val / {} test images of side {}",
        data.classes,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.image_side
    )
    .unwrap();
    writeln!(
        out,
        "{:>5}  {:>6}  {:>8}  {:>10}",
        "class", "clean", "observed", "weight"
    )
    .unwrap();
    for k in 0..data.classes {
        let w = weights
            .as_ref()
            .map(|w| format!("{:.6}", w.weights()[k]))
            .unwrap_or_else(|| "-".into());
        writeln!(out, "{k:>5}  {:>6}  {:>8}  {w:>10}", clean[k], observed[k]).unwrap();
    }
    print!("{out}");
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let tc = &cfg.train;
    info!(
        "train config: {}",
        serde_json::to_string(tc).map_err(|e| CliError::Config(e.to_string()))?
    );
    let model = init_model(
        tc.model.input_side,
        tc.model.hidden_dim,
        data.classes,
        tc.seed,
    )?;
    let state = train(&data, model, tc)?;

    ensure_dir(&cfg.io.out_dir)?;
    let ckpt = cfg.io.resolve(&cfg.io.checkpoint);
    save_checkpoint(&state, &ckpt).map_err(CliError::at(&ckpt))?;
    info!("wrote {}", ckpt.display());

    let mut csv = String::from("epoch,train_loss,val_error,lr,lr_reduced\n");
    for r in &state.history {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_error, r.lr, r.lr_reduced
        )
        .unwrap();
    }
    write_file(&cfg.io.out_dir.join("history.csv"), &csv)?;

    match state.history.last() {
        Some(last) => println!(
            "trained {} epochs: train loss {:.6}, val error {:.4}, lr {:?} ({} reductions)",
            state.epochs_done(),
            last.train_loss,
            last.val_error,
            state.current_lr,
            state.lr_reductions()
        ),
        None => println!("trained 0 epochs: checkpoint holds the initialisation"),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let ckpt = cfg.io.resolve(&cfg.io.checkpoint);
    let state = load_state(&ckpt)?;
    let samples = data.split(cfg.sweep.split);
    let label = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let report = SweepReport {
        rows: vec![SweepRow {
            label,
            split: cfg.sweep.split,
            mean_top1_error: evaluate(&state.params, samples, None)?,
            n: samples.len(),
            seed: Some(state.config.seed),
        }],
        footer: Vec::new(),
    };
    emit(cfg, "eval.csv", &report)
}

pub fn tta(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let state = load_state(&cfg.io.resolve(&cfg.io.checkpoint))?;
    let report = tta_sweep(
        &state.params,
        data.split(cfg.sweep.split),
        cfg.sweep.split,
        &cfg.tta,
    )?;
    emit(cfg, "tta.csv", &report)
}

pub fn ensemble(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let paths = if cfg.io.ensemble.is_empty() {
        vec![cfg.io.checkpoint.clone()]
    } else {
        cfg.io.ensemble.clone()
    };
    let models = paths
        .iter()
        .map(|p| load_state(&cfg.io.resolve(p)).map(|s| s.params))
        .collect::<Result<Vec<_>>>()?;
    let tta = cfg.sweep.ensemble_tta.then_some(&cfg.tta);
    let row = ensemble_eval(&models, data.split(cfg.sweep.split), cfg.sweep.split, tta)?;
    let report = SweepReport {
        rows: vec![row],
        footer: Vec::new(),
    };
    emit(cfg, "ensemble.csv", &report)
}

/// Loss comparison; each seed re-draws the dataset from `dataset` with that seed.
pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let (report, _) = benchmark_loss_sweep(
        &cfg.dataset,
        &cfg.train,
        &cfg.sweep.losses,
        &cfg.sweep.seeds,
    )?;
    ensure_dir(&cfg.io.out_dir)?;
    write_file(&cfg.io.out_dir.join("sweep.csv"), &report.to_csv())?;
    print!("{}", report.pivot(Split::Test));
    for line in &report.footer {
        println!("# {line}");
    }
    Ok(())
}
