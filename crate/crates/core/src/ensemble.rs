//! Top-1 error, top-1 voting ensembles, and the loss / TTA sweep harnesses.

use rayon::prelude::*;

use crate::data::{synth_dataset, Dataset, DatasetSpec, LabeledImage, Split};
use crate::losses::{LossConfig, LossKind};
use crate::prob::{softmax_slice, top1, ClassIndex, ProbabilityVector};
use crate::report::{SweepReport, SweepRow};
use crate::trainer::{init_model, train, ModelParams, TrainConfig, TrainState};
use crate::tta::{center_crop, tta_predict, TtaConfig};
use crate::{Error, Result};

/// Full-scale loss comparison (ce, bce, sce, bsce) on the product benchmark.
pub const REFERENCE_LOSS_ERRORS: [(&str, f64); 4] = [
    ("ce", 0.1530),
    ("bce", 0.1430),
    ("sce", 0.1492),
    ("bsce", 0.1407),
];
/// Full-scale per-side and combined TTA errors.
pub const REFERENCE_TTA_ERRORS: [(&str, f64); 6] = [
    ("384", 0.1407),
    ("412", 0.1386),
    ("424", 0.1384),
    ("436", 0.1383),
    ("464", 0.1425),
    ("tta", 0.1354),
];

/// Fraction of positions where the prediction differs from the label.
pub fn mean_top1_error(predictions: &[ClassIndex], labels: &[ClassIndex]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

pub fn accuracy(predictions: &[ClassIndex], labels: &[ClassIndex]) -> Result<f64> {
    let err = mean_top1_error(predictions, labels)?;
    let right = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    debug_assert_eq!(
        right + (err * labels.len() as f64).round() as usize,
        labels.len()
    );
    Ok(right as f64 / labels.len() as f64)
}

/// Plurality of per-model argmax votes.
///
/// Ties go to the tied class with the highest probability summed over all
/// models, then to the lowest class index.
pub fn top1_vote(model_probs: &[ProbabilityVector]) -> Result<ClassIndex> {
    let first = model_probs
        .first()
        .ok_or_else(|| Error::Config("no models to vote".into()))?;
    let classes = first.len();
    if let Some(p) = model_probs.iter().find(|p| p.len() != classes) {
        return Err(Error::Shape {
            expected: classes,
            got: p.len(),
        });
    }
    let mut votes = vec![0usize; classes];
    let mut mass = vec![0.0; classes];
    for p in model_probs {
        votes[top1(p)] += 1;
        mass.iter_mut().zip(p.as_slice()).for_each(|(m, v)| *m += v);
    }
    let most = *votes.iter().max().unwrap();
    let mut winner = None::<ClassIndex>;
    for k in (0..classes).filter(|k| votes[*k] == most) {
        if winner.is_none_or(|w| mass[k] > mass[w]) {
            winner = Some(k);
        }
    }
    Ok(winner.unwrap())
}

/// Class probabilities for one image: TTA when configured, else center crop.
pub fn predict_probs(
    params: &ModelParams,
    sample: &LabeledImage,
    tta: Option<&TtaConfig>,
) -> Result<ProbabilityVector> {
    match tta {
        Some(cfg) => tta_predict(params, &sample.to_image(), cfg),
        None => {
            let crop = center_crop(&sample.to_image(), params.input_side())?;
            let (_, logits) = params.forward(&crop)?;
            softmax_slice(logits.as_slice())
        }
    }
}

/// Per-model, per-sample probabilities and their argmax.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub probs: Vec<Vec<ProbabilityVector>>,
    pub top1: Vec<Vec<ClassIndex>>,
}

impl PredictionSet {
    pub fn collect(
        models: &[ModelParams],
        samples: &[LabeledImage],
        tta: Option<&TtaConfig>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("ensemble needs at least one model".into()));
        }
        let classes = models[0].classes();
        if let Some(m) = models.iter().find(|m| m.classes() != classes) {
            return Err(Error::Shape {
                expected: classes,
                got: m.classes(),
            });
        }
        let probs = models
            .iter()
            .map(|m| {
                samples
                    .iter()
                    .map(|s| predict_probs(m, s, tta))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let top1 = probs
            .iter()
            .map(|ps| ps.iter().map(top1).collect())
            .collect();
        Ok(Self { probs, top1 })
    }

    pub fn votes(&self) -> Result<Vec<ClassIndex>> {
        let n = self.probs[0].len();
        (0..n)
            .map(|i| {
                let per_model: Vec<_> = self.probs.iter().map(|m| m[i].clone()).collect();
                top1_vote(&per_model)
            })
            .collect()
    }
}

fn labels(samples: &[LabeledImage]) -> Vec<ClassIndex> {
    samples.iter().map(|s| s.true_label).collect()
}

/// Error of a single model on `samples`.
pub fn evaluate(
    model: &ModelParams,
    samples: &[LabeledImage],
    tta: Option<&TtaConfig>,
) -> Result<f64> {
    let preds = samples
        .iter()
        .map(|s| predict_probs(model, s, tta).map(|p| top1(&p)))
        .collect::<Result<Vec<_>>>()?;
    mean_top1_error(&preds, &labels(samples))
}

/// Top-1-vote ensemble of `models` evaluated on one split.
pub fn ensemble_eval(
    models: &[ModelParams],
    samples: &[LabeledImage],
    split: Split,
    tta: Option<&TtaConfig>,
) -> Result<SweepRow> {
    let set = PredictionSet::collect(models, samples, tta)?;
    let error = mean_top1_error(&set.votes()?, &labels(samples))?;
    Ok(SweepRow {
        label: format!("ensemble-{}", models.len()),
        split,
        mean_top1_error: error,
        n: samples.len(),
        seed: None,
    })
}

/// One trained cell of a loss sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub kind: LossKind,
    pub seed: u64,
    pub state: TrainState,
    pub val_error: f64,
    pub test_error: f64,
}

fn train_cell(
    dataset: &Dataset,
    base: &TrainConfig,
    kind: LossKind,
    seed: u64,
) -> Result<SweepCell> {
    let cfg = TrainConfig {
        loss: LossConfig { kind, ..base.loss },
        seed,
        ..base.clone()
    };
    let model = init_model(
        cfg.model.input_side,
        cfg.model.hidden_dim,
        dataset.classes,
        seed,
    )?;
    let state = train(dataset, model, &cfg)?;
    let val_error = evaluate(&state.params, &dataset.val, None)?;
    let test_error = evaluate(&state.params, &dataset.test, None)?;
    Ok(SweepCell {
        kind,
        seed,
        state,
        val_error,
        test_error,
    })
}

fn label_error(kind: LossKind, seed: u64, e: Error) -> Error {
    Error::Sweep {
        cell: format!("{kind}/seed {seed}"),
        source: Box::new(e),
    }
}

/// Trains one model per `(kind, seed)` on a fixed dataset. Cells run in
/// parallel; results come back in `kinds × seeds` order.
pub fn loss_sweep_cells(
    dataset: &Dataset,
    base: &TrainConfig,
    kinds: &[LossKind],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    base.validate()?;
    let grid: Vec<(LossKind, u64)> = kinds
        .iter()
        .flat_map(|k| seeds.iter().map(move |s| (*k, *s)))
        .collect();
    grid.par_iter()
        .map(|&(kind, seed)| {
            train_cell(dataset, base, kind, seed).map_err(|e| label_error(kind, seed, e))
        })
        .collect()
}

fn cell_rows(cells: &[SweepCell], dataset: &Dataset) -> Vec<SweepRow> {
    cells
        .iter()
        .flat_map(|c| {
            [
                (Split::Val, c.val_error, dataset.val.len()),
                (Split::Test, c.test_error, dataset.test.len()),
            ]
            .map(|(split, err, n)| SweepRow {
                label: c.kind.to_string(),
                split,
                mean_top1_error: err,
                n,
                seed: Some(c.seed),
            })
        })
        .collect()
}

fn loss_footer() -> String {
    let cols: Vec<String> = REFERENCE_LOSS_ERRORS
        .iter()
        .map(|(k, v)| format!("{k} {v:.4}"))
        .collect();
    format!(
        "reference (full-scale product benchmark): {}",
        cols.join(", ")
    )
}

/// Loss comparison on one dataset: one val row and one test row per
/// `(kind, seed)`.
pub fn loss_sweep(
    dataset: &Dataset,
    base: &TrainConfig,
    kinds: &[LossKind],
    seeds: &[u64],
) -> Result<SweepReport> {
    let cells = loss_sweep_cells(dataset, base, kinds, seeds)?;
    Ok(SweepReport {
        rows: cell_rows(&cells, dataset),
        footer: vec![loss_footer()],
    })
}

/// Loss comparison where every seed also re-draws the dataset (`spec.seed = seed`).
pub fn benchmark_loss_sweep(
    spec: &DatasetSpec,
    base: &TrainConfig,
    kinds: &[LossKind],
    seeds: &[u64],
) -> Result<(SweepReport, Vec<SweepCell>)> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &seed in seeds {
        let dataset = synth_dataset(&DatasetSpec {
            seed,
            ..spec.clone()
        })?;
        let cells = loss_sweep_cells(&dataset, base, kinds, &[seed])?;
        rows.extend(cell_rows(&cells, &dataset));
        all.extend(cells);
    }
    Ok((
        SweepReport {
            rows,
            footer: vec![loss_footer()],
        },
        all,
    ))
}

/// One row per single resize side plus a combined `tta` row.
pub fn tta_sweep(
    model: &ModelParams,
    samples: &[LabeledImage],
    split: Split,
    cfg: &TtaConfig,
) -> Result<SweepReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.resize_sides.len() + 1);
    for &side in &cfg.resize_sides {
        let single = TtaConfig::single(side, cfg.crop_side, cfg.mode);
        rows.push(SweepRow {
            label: format!("side-{side}"),
            split,
            mean_top1_error: evaluate(model, samples, Some(&single))?,
            n: samples.len(),
            seed: None,
        });
    }
    rows.push(SweepRow {
        label: "tta".into(),
        split,
        mean_top1_error: evaluate(model, samples, Some(cfg))?,
        n: samples.len(),
        seed: None,
    });
    let cols: Vec<String> = REFERENCE_TTA_ERRORS
        .iter()
        .map(|(k, v)| format!("{k} {v:.4}"))
        .collect();
    Ok(SweepReport {
        rows,
        footer: vec![format!(
            "reference (full-scale, crop 331): {}",
            cols.join(", ")
        )],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn error_examples() {
        assert_eq!(mean_top1_error(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(mean_top1_error(&[1, 2, 0], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(mean_top1_error(&[0, 1, 2, 0], &[0, 1, 1, 1]).unwrap(), 0.5);
        assert!(mean_top1_error(&[0], &[0, 1]).is_err());
        assert!(mean_top1_error(&[], &[]).is_err());
    }

    #[test]
    fn vote_examples() {
        let c2 = pv(&[0.1, 0.2, 0.7]);
        assert_eq!(top1_vote(&[c2.clone(), c2.clone(), c2]).unwrap(), 2);
        let a = pv(&[0.6, 0.3, 0.1]);
        let b = pv(&[0.2, 0.5, 0.3]);
        assert_eq!(top1_vote(&[a.clone(), b.clone(), b.clone()]).unwrap(), 1);
        // one vote each; summed mass 0.8 vs 0.8 for classes 0/1 -> lowest index
        assert_eq!(top1_vote(&[a.clone(), b.clone()]).unwrap(), 0);
        // one vote each; summed mass 0.9 vs 1.0 favours class 1
        let d = pv(&[0.5, 0.4, 0.1]);
        let e = pv(&[0.4, 0.6, 0.0]);
        assert_eq!(top1_vote(&[d.clone(), e]).unwrap(), 1);
        assert!(matches!(top1_vote(&[]), Err(Error::Config(_))));
        assert!(matches!(
            top1_vote(&[d, pv(&[0.5, 0.5])]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn accuracy_complements_error() {
        let p = [0, 1, 2, 2, 1];
        let l = [0, 2, 2, 1, 1];
        assert_eq!(
            mean_top1_error(&p, &l).unwrap() + accuracy(&p, &l).unwrap(),
            1.0
        );
    }
}
