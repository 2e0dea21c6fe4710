use std::collections::BTreeMap;

use brainage::ablation::{lobe_eval, octant_masks, slice_sweep, RegionMask, SweepNetwork, PLOT_CAP};
use brainage::cohort::{natural_cmp, write_manifest_to, Gender, SessionRecord};
use brainage::preprocess::{encode_vvol, read_vvol, Volume};
use brainage::saliency::{activation_map, group_average};
use brainage::stats::{bonferroni_threshold, ols_interaction, partial_correlation, retest_summary};
use serde::{Deserialize, Serialize};

use super::model::load_checkpoint;
use crate::data::Manifest;
use crate::error::{CliError, Classify};
use crate::output::{num, Run};

fn file_stem(r: &SessionRecord) -> String {
    format!("{}_{}", r.subject_id, r.session_id).replace(['/', '\\'], "_")
}

pub fn saliency_map(mut run: Run) -> Result<Run, CliError> {
    let ckpt = load_checkpoint(&mut run)?;
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let layer = run.cfg.saliency.layer.clone();
    let modifier = run.cfg.saliency.modifier;
    let mut records = Vec::new();
    let mut flags = Vec::new();
    let mut degenerate = 0;
    for r in &manifest.records {
        let volume = manifest.load(r)?;
        let map = activation_map(&ckpt.network, &volume.to_tensor(), layer.as_deref(), modifier)
            .invalid(&format!("activation map for {}/{}", r.subject_id, r.session_id))?;
        let name = format!("maps/{}.vvol", file_stem(r));
        run.write_bytes(&name, &encode_vvol(&map.volume))?;
        degenerate += usize::from(map.degenerate);
        flags.push(map.degenerate.to_string());
        records.push(SessionRecord { path: name, ..r.clone() });
    }
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &records, Some(("degenerate", &flags))).failed("writing map manifest")?;
    run.write_bytes("maps.csv", &buf)?;
    #[derive(Serialize)]
    struct Report {
        layer: String,
        modifier: String,
        maps: usize,
        degenerate: usize,
    }
    let layer = layer.unwrap_or_else(|| ckpt.network.spec.last_feature_layer());
    run.write_report("maps.json", &Report { layer, modifier: modifier.id().into(), maps: records.len(), degenerate })?;
    println!("{} maps written ({degenerate} degenerate)", records.len());
    Ok(run)
}

pub fn saliency_group(mut run: Run) -> Result<Run, CliError> {
    let path = run.cfg.require("maps", &run.cfg.paths.maps)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let maps: Vec<Volume> = manifest.records.iter().map(|r| manifest.load(r)).collect::<Result<_, _>>()?;
    let ages: Vec<f64> = manifest.records.iter().map(|r| r.age).collect();
    let threshold = run.cfg.saliency.threshold;
    let group = group_average(&maps, &ages, &run.cfg.bins()?, threshold).invalid("group average")?;
    #[derive(Serialize)]
    struct Group {
        bin: usize,
        label: String,
        count: usize,
        voxels_above: usize,
        centroid: Option<[f64; 3]>,
        mean: String,
        mask: String,
    }
    let mut groups = Vec::new();
    for g in &group.groups {
        let mean = format!("groups/bin{:02}_mean.vvol", g.bin);
        let mask = format!("groups/bin{:02}_mask.vvol", g.bin);
        run.write_bytes(&mean, &encode_vvol(&g.mean))?;
        let values = g.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask_volume = Volume::new(g.mean.extents(), g.mean.spacing(), values).failed("mask volume")?;
        run.write_bytes(&mask, &encode_vvol(&mask_volume))?;
        groups.push(Group {
            bin: g.bin,
            label: g.label.clone(),
            count: g.count,
            voxels_above: g.voxels_above(),
            centroid: g.centroid(),
            mean,
            mask,
        });
        println!("{:<10} {:>4} maps, {:>6} voxels above {threshold}", g.label, g.count, g.voxels_above());
    }
    #[derive(Serialize)]
    struct Report<'a> {
        threshold: f64,
        groups: Vec<Group>,
        warnings: &'a [String],
    }
    run.write_report("groups.json", &Report { threshold, groups, warnings: &group.warnings })?;
    Ok(run)
}

fn ablation_manifest(run: &mut Run) -> Result<Manifest, CliError> {
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    Manifest::read(&path)
}

pub fn ablate_slices(mut run: Run) -> Result<Run, CliError> {
    let data = ablation_manifest(&mut run)?.ablation_data()?;
    let a = run.cfg.ablation.clone();
    let cfg = run.cfg.train_config();
    let net = SweepNetwork { num_stages: a.slice_stages, base_features: a.slice_base_features, seed: run.cfg.seed };
    run.seed("network_init", net.seed);
    run.seed("training", cfg.seed);
    let sweep = slice_sweep(&data, a.axis, a.stride, net, &cfg).invalid("slice sweep")?;
    let capped = sweep.capped(PLOT_CAP);
    let rows: Vec<Vec<String>> = sweep
        .centers
        .iter()
        .zip(&sweep.mae)
        .zip(&capped)
        .map(|((c, m), k)| vec![c.to_string(), num(*m), num(*k)])
        .collect();
    run.write_csv("slices.csv", &["center", "mae", "mae_capped"], &rows)?;
    #[derive(Serialize)]
    struct Report<'a> {
        axis: String,
        stride: usize,
        argmin: usize,
        min_mae: f64,
        plot_cap: f64,
        centers: &'a [usize],
        mae: &'a [f64],
    }
    let min_mae = sweep.mae.iter().cloned().fold(f64::INFINITY, f64::min);
    run.write_report(
        "slices.json",
        &Report {
            axis: a.axis.to_string(),
            stride: a.stride,
            argmin: sweep.argmin,
            min_mae,
            plot_cap: PLOT_CAP,
            centers: &sweep.centers,
            mae: &sweep.mae,
        },
    )?;
    println!("{} slabs along {}: best center {} (MAE {min_mae:.3})", sweep.centers.len(), a.axis, sweep.argmin);
    Ok(run)
}

pub fn ablate_lobes(mut run: Run) -> Result<Run, CliError> {
    let data = ablation_manifest(&mut run)?.ablation_data()?;
    let first = data.train.first().ok_or_else(|| CliError::Validation("manifest has no training rows".into()))?;
    let extents = first.volume.extents();
    let regions = run.cfg.ablation.regions.clone();
    let masks = if regions.is_empty() {
        octant_masks(extents)
    } else {
        let mut masks = Vec::new();
        for r in &regions {
            let path = run.cfg.resolve(&r.path);
            run.input(&path)?;
            let v = read_vvol(&path).invalid(&format!("region `{}`", r.name))?;
            if v.extents() != extents {
                return Err(CliError::Validation(format!(
                    "region `{}` has extents {:?}, the volumes {extents:?}",
                    r.name,
                    v.extents()
                )));
            }
            let mask = v.values().iter().map(|&x| x != 0.0).collect();
            masks.push(RegionMask::new(r.name.clone(), extents, mask).invalid("ablation.regions")?);
        }
        masks
    };
    let spec = run.cfg.network_spec(first.volume.tensor_extents());
    let cfg = run.cfg.train_config();
    run.seed("network_init", spec.seed);
    run.seed("training", cfg.seed);
    let results = lobe_eval(&data, &masks, &spec, &cfg).invalid("region ablation")?;
    let voxels: BTreeMap<&str, usize> = masks.iter().map(|m| (m.name.as_str(), m.voxels())).collect();
    let whole: usize = extents.iter().product();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| vec![r.region.clone(), voxels.get(r.region.as_str()).copied().unwrap_or(whole).to_string(), num(r.mae)])
        .collect();
    run.write_csv("regions.csv", &["region", "voxels", "mae"], &rows)?;
    #[derive(Serialize)]
    struct Report<'a> {
        regions: &'a [brainage::ablation::RegionResult],
    }
    run.write_report("regions.json", &Report { regions: &results })?;
    for r in &results {
        println!("{:<14} MAE {:.3}", r.region, r.mae);
    }
    Ok(run)
}

#[derive(Debug, Deserialize)]
struct AssocRow {
    subject_id: String,
    score: f64,
    age: f64,
    predicted_age: f64,
    gender: Gender,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>, CliError> {
    let context = format!("table {}", path.display());
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).invalid(&context)?;
    rdr.deserialize().collect::<Result<Vec<T>, _>>().invalid(&context)
}

pub fn stats_assoc(mut run: Run) -> Result<Run, CliError> {
    let path = run.cfg.require("table", &run.cfg.paths.table)?;
    run.input(&path)?;
    let rows: Vec<AssocRow> = read_rows(&path)?;
    if let Some(r) = rows.iter().find(|r| ![r.score, r.age, r.predicted_age].iter().all(|v| v.is_finite())) {
        return Err(CliError::Validation(format!("non-finite value for subject {}", r.subject_id)));
    }
    let score: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let age: Vec<f64> = rows.iter().map(|r| r.age).collect();
    let age_diff: Vec<f64> = rows.iter().map(|r| r.predicted_age - r.age).collect();
    let gender: Vec<Gender> = rows.iter().map(|r| r.gender).collect();
    let fit = ols_interaction(&score, &age, &age_diff, &gender).invalid("regression")?;
    let g: Vec<f64> = gender.iter().map(|g| g.indicator()).collect();
    let partial = partial_correlation(&score, &age_diff, &[&age, &g]).invalid("partial correlation")?;
    let s = run.cfg.stats.clone();
    let threshold = bonferroni_threshold(s.alpha, s.tests);
    let table: Vec<Vec<String>> = fit
        .terms
        .iter()
        .map(|t| vec![t.name.clone(), num(t.beta), num(t.std_error), num(t.t), num(t.p), (t.p < threshold).to_string()])
        .collect();
    run.write_csv("regression.csv", &["term", "beta", "std_error", "t", "p", "significant"], &table)?;
    #[derive(Serialize)]
    struct Report<'a> {
        n: usize,
        alpha: f64,
        tests: usize,
        threshold: f64,
        regression: &'a brainage::stats::RegressionResult,
        partial_correlation: brainage::stats::PartialCorrelation,
        partial_significant: bool,
    }
    run.write_report(
        "assoc.json",
        &Report {
            n: rows.len(),
            alpha: s.alpha,
            tests: s.tests,
            threshold,
            regression: &fit,
            partial_correlation: partial,
            partial_significant: partial.p < threshold,
        },
    )?;
    for t in &fit.terms {
        println!("{:<16} beta {:>12.5e}  p {:.3e}", t.name, t.beta, t.p);
    }
    println!("partial r(score, age_diff | age, gender) = {:.4}, p {:.3e}", partial.r, partial.p);
    Ok(run)
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    subject_id: String,
    predicted_age: f64,
}

pub fn stats_retest(mut run: Run) -> Result<Run, CliError> {
    let path = run.cfg.require("predictions", &run.cfg.paths.predictions)?;
    run.input(&path)?;
    let rows: Vec<PredictionRow> = read_rows(&path)?;
    let mut by_subject: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_subject.entry(r.subject_id).or_default().push(r.predicted_age);
    }
    let mut subjects: Vec<(String, Vec<f64>)> = by_subject.into_iter().collect();
    subjects.sort_by(|a, b| natural_cmp(&a.0, &b.0));
    let summary = retest_summary(&subjects).invalid("retest")?;
    let table: Vec<Vec<String>> = summary
        .iter()
        .map(|s| vec![s.subject.clone(), s.scans.to_string(), num(s.mean), s.std.map(num).unwrap_or_default()])
        .collect();
    run.write_csv("retest.csv", &["subject_id", "scans", "mean", "std"], &table)?;
    for s in &summary {
        match s.std {
            Some(sd) => println!("{:<12} {:>3} scans  mean {:.2}  std {sd:.3}", s.subject, s.scans, s.mean),
            None => println!("{:<12} {:>3} scans  mean {:.2}", s.subject, s.scans, s.mean),
        }
    }
    Ok(run)
}
