use brainage::cohort::{inverse_frequency_weights, SessionRecord, SplitName};
use brainage::model::{decode_checkpoint, encode_checkpoint, predict_samples, train as fit, Checkpoint, Network, Sample};
use brainage::stats::eval_metrics;
use serde::Serialize;

use crate::data::{sample, Manifest};
use crate::error::{CliError, Classify};
use crate::output::{num, Provenance, Run};

const PREDICT_CHUNK: usize = 8;

fn load_samples(manifest: &Manifest, records: &[&SessionRecord]) -> Result<Vec<Sample>, CliError> {
    let mut out: Vec<Sample> = Vec::with_capacity(records.len());
    for r in records {
        let s = sample(&manifest.load(r)?, r);
        if let Some(first) = out.first() {
            if first.input.shape() != s.input.shape() {
                return Err(CliError::Validation(format!(
                    "volume for {}/{} has shape {:?}, expected {:?}",
                    r.subject_id,
                    r.session_id,
                    s.input.shape(),
                    first.input.shape()
                )));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn train(mut run: Run) -> Result<Run, CliError> {
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let train_recs = manifest.records_in(SplitName::Train)?;
    let val_recs = manifest.records_in(SplitName::Val)?;
    let mut train_set = load_samples(&manifest, &train_recs)?;
    let val_set = load_samples(&manifest, &val_recs)?;
    let first = train_set.first().ok_or_else(|| CliError::Validation("manifest has no training rows".into()))?;
    let spec = run.cfg.network_spec(first.input.shape()[1..].to_vec());
    let cfg = run.cfg.train_config();
    if cfg.weighted {
        let owned: Vec<SessionRecord> = train_recs.iter().map(|r| (*r).clone()).collect();
        let weights = inverse_frequency_weights(&owned, &run.cfg.bins()?).invalid("training weights")?;
        for (s, w) in train_set.iter_mut().zip(weights) {
            s.weight = w as f32;
        }
    }
    run.seed("network_init", spec.seed);
    run.seed("training", cfg.seed);
    let network = Network::build(spec).invalid("network")?;
    let (mut ckpt, history) = fit(network, &train_set, &val_set, &cfg).failed("training")?;
    ckpt.meta.provenance = Some(serde_json::to_value(run.provenance()).failed("provenance")?);
    run.write_bytes("checkpoint.vage", &encode_checkpoint(&ckpt).failed("encoding checkpoint")?)?;
    let rows: Vec<Vec<String>> = history
        .epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), num(e.train_loss), num(e.train_mae), num(e.val_mae)])
        .collect();
    run.write_csv("history.csv", &["epoch", "train_loss", "train_mae", "val_mae"], &rows)?;
    #[derive(Serialize)]
    struct Summary {
        best_epoch: usize,
        val_mae: f64,
        parameters: usize,
        train_samples: usize,
        val_samples: usize,
    }
    run.write_report(
        "train.json",
        &Summary {
            best_epoch: ckpt.meta.epoch,
            val_mae: ckpt.meta.val_mae,
            parameters: ckpt.network.spec.parameter_count(),
            train_samples: train_set.len(),
            val_samples: val_set.len(),
        },
    )?;
    println!("best epoch {} with validation MAE {:.3}", ckpt.meta.epoch, ckpt.meta.val_mae);
    Ok(run)
}

pub(crate) fn load_checkpoint(run: &mut Run) -> Result<Checkpoint, CliError> {
    let path = run.cfg.require("checkpoint", &run.cfg.paths.checkpoint)?;
    run.input(&path)?;
    let bytes = std::fs::read(&path).failed("reading checkpoint")?;
    decode_checkpoint(&bytes).invalid(&format!("checkpoint {}", path.display()))
}

fn check_input(ckpt: &Checkpoint, samples: &[Sample]) -> Result<(), CliError> {
    let want = ckpt.network.input_shape();
    match samples.iter().find(|s| s.input.shape() != want.as_slice()) {
        Some(s) => Err(CliError::Validation(format!(
            "volume for {} has shape {:?}, the checkpoint expects {want:?}",
            s.subject_id,
            s.input.shape()
        ))),
        None => Ok(()),
    }
}

/// Predicts the rows of the manifest (the test split when present, else all rows).
fn predictions(run: &mut Run, test_only: bool) -> Result<(Checkpoint, Vec<SessionRecord>, Vec<f64>, Option<SplitName>), CliError> {
    let ckpt = load_checkpoint(run)?;
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let (records, which): (Vec<&SessionRecord>, _) = match (&manifest.splits, test_only) {
        (Some(_), true) => (manifest.records_in(SplitName::Test)?, Some(SplitName::Test)),
        _ => (manifest.records.iter().collect(), None),
    };
    if records.is_empty() {
        return Err(CliError::Validation("no rows to predict".into()));
    }
    let samples = load_samples(&manifest, &records)?;
    check_input(&ckpt, &samples)?;
    let preds = predict_samples(&ckpt.network, &samples, PREDICT_CHUNK).failed("prediction")?;
    let owned = records.into_iter().cloned().collect();
    Ok((ckpt, owned, preds.into_iter().map(f64::from).collect(), which))
}

fn prediction_rows(records: &[SessionRecord], preds: &[f64]) -> Vec<Vec<String>> {
    records
        .iter()
        .zip(preds)
        .map(|(r, p)| vec![r.subject_id.clone(), r.session_id.clone(), num(r.age), num(*p), num(p - r.age)])
        .collect()
}

const PREDICTION_HEADER: [&str; 5] = ["subject_id", "session_id", "age", "predicted_age", "age_diff"];

pub fn eval(mut run: Run) -> Result<Run, CliError> {
    let (ckpt, records, preds, which) = predictions(&mut run, true)?;
    let ages: Vec<f64> = records.iter().map(|r| r.age).collect();
    let report = eval_metrics(&preds, &ages, &run.cfg.bins()?).invalid("evaluation")?;
    run.write_csv("predictions.csv", &PREDICTION_HEADER, &prediction_rows(&records, &preds))?;
    #[derive(Serialize)]
    struct Report<'a> {
        split: &'a str,
        mae: f64,
        pearson_r: f64,
        bin_mae_ratio: Option<f64>,
        per_bin: &'a [brainage::stats::BinMae],
        unbinned: usize,
        checkpoint_provenance: Option<Provenance>,
    }
    let checkpoint_provenance = ckpt.meta.provenance.clone().and_then(|v| serde_json::from_value(v).ok());
    run.write_report(
        "eval.json",
        &Report {
            split: which.map_or("all", SplitName::as_str),
            mae: report.mae,
            pearson_r: report.pearson_r,
            bin_mae_ratio: report.bin_mae_ratio(),
            per_bin: &report.per_bin,
            unbinned: report.unbinned,
            checkpoint_provenance,
        },
    )?;
    println!("MAE {:.3} years, r {:.4} over {} scans", report.mae, report.pearson_r, records.len());
    Ok(run)
}

pub fn predict(mut run: Run) -> Result<Run, CliError> {
    let (_, records, preds, _) = predictions(&mut run, false)?;
    run.write_csv("predictions.csv", &PREDICTION_HEADER, &prediction_rows(&records, &preds))?;
    println!("{} predictions written", records.len());
    Ok(run)
}
