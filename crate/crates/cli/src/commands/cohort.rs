use brainage::cohort::{
    balance_cohort, bin_sessions, inverse_frequency_weights, stratified_split, write_manifest_to, BalanceAction, BalancedCohort,
    Gender, SessionRecord, SplitRatios,
};
use brainage::phantom::generate_phantom;
use brainage::preprocess::encode_vvol;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{reject_out_of_range, Manifest};
use crate::error::{CliError, Classify};
use crate::output::Run;

pub fn phantom_gen(mut run: Run) -> Result<Run, CliError> {
    let cfg = run.cfg.clone();
    let p = &cfg.phantom;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run.seed("phantom", cfg.seed);
    let mut records = Vec::new();
    for s in 0..p.subjects {
        let age = (rng.random_range(p.spec.age_min..p.spec.age_max) * 100.0).round() / 100.0;
        let gender = if rng.random_bool(0.5) { Gender::M } else { Gender::F };
        let subject_id = format!("sub-{:04}", s + 1);
        for session in 1..=p.sessions {
            let volume = generate_phantom(age, &p.spec, rng.random()).invalid("phantom.spec")?;
            let path = format!("volumes/{subject_id}_{session}.vvol");
            run.write_bytes(&path, &encode_vvol(&volume))?;
            records.push(SessionRecord {
                subject_id: subject_id.clone(),
                session_id: session.to_string(),
                age,
                gender,
                site: p.sites[s % p.sites.len()].clone(),
                path,
            });
        }
    }
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &records, None).failed("writing manifest")?;
    run.write_bytes("manifest.csv", &buf)?;
    println!("generated {} phantom scans of {} subjects", records.len(), p.subjects);
    Ok(run)
}

/// Reads the manifest, rejects out-of-range ages and balances the bins.
fn balanced(mut run: Run) -> Result<(Run, BalancedCohort, Manifest), CliError> {
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let bins = run.cfg.bins()?;
    let run = reject_out_of_range(run, &manifest.records, &bins)?;
    let opts = run.cfg.balance_options();
    let cohort = balance_cohort(&bin_sessions(&manifest.records, &bins), &opts).invalid("cohort")?;
    let mut run = run;
    run.seed("balance", opts.seed);
    Ok((run, cohort, manifest))
}

/// Re-roots volume paths from the input manifest's directory to `dir`.
fn rebase(records: &[SessionRecord], manifest: &Manifest, dir: &std::path::Path) -> Vec<SessionRecord> {
    records
        .iter()
        .map(|r| {
            let abs = manifest.volume_path(r);
            let path = relative_to(&abs, dir);
            SessionRecord { path, ..r.clone() }
        })
        .collect()
}

fn relative_to(target: &std::path::Path, base: &std::path::Path) -> String {
    let canon = |p: &std::path::Path| p.canonicalize().or_else(|_| std::path::absolute(p)).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (canon(target), canon(base));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = std::path::PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out.to_string_lossy().replace('\\', "/")
}

#[derive(Serialize)]
struct AuditReport<'a> {
    target: usize,
    oversample_bins: Vec<usize>,
    counts: Vec<usize>,
    bins: &'a [brainage::cohort::BinAudit],
}

pub fn cohort_balance(run: Run) -> Result<Run, CliError> {
    let (mut run, cohort, manifest) = balanced(run)?;
    let selected = rebase(&cohort.selected(), &manifest, run.dir());
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &selected, None).failed("writing balanced manifest")?;
    run.write_bytes("balanced.csv", &buf)?;
    run.write_report(
        "audit.json",
        &AuditReport {
            target: cohort.target,
            oversample_bins: cohort.oversample_bins.iter().copied().collect(),
            counts: cohort.counts(),
            bins: &cohort.audit,
        },
    )?;
    for a in &cohort.audit {
        let action = match &a.action {
            BalanceAction::Kept => "kept".to_string(),
            BalanceAction::Undersampled { eligible, kept } => format!("undersampled {eligible} -> {kept}"),
            BalanceAction::Oversampled { subjects, sessions } => format!("oversampled {subjects} subjects, {sessions} sessions"),
        };
        println!("{:<10} {:>4} selected  ({action})", a.label, a.selected);
    }
    println!("target {} per bin, {} sessions selected", cohort.target, cohort.len());
    Ok(run)
}

pub fn cohort_split(run: Run) -> Result<Run, CliError> {
    let (mut run, cohort, manifest) = balanced(run)?;
    let seed = run.cfg.split_seed();
    run.seed("split", seed);
    let split = stratified_split(&cohort, SplitRatios(run.cfg.cohort.ratios), seed).invalid("cohort split")?;
    let records: Vec<SessionRecord> = split.assignments.iter().map(|(r, _)| r.clone()).collect();
    let records = rebase(&records, &manifest, run.dir());
    let names: Vec<String> = split.assignments.iter().map(|(_, s)| s.as_str().to_string()).collect();
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &records, Some(("split", &names))).failed("writing split manifest")?;
    run.write_bytes("split.csv", &buf)?;
    #[derive(Serialize)]
    struct Report<'a> {
        strata: &'a [brainage::cohort::StratumSplit],
        warnings: &'a [String],
    }
    run.write_report("strata.json", &Report { strata: &split.strata, warnings: &split.warnings })?;
    let mut totals = [0usize; 3];
    for s in &split.strata {
        for (t, c) in totals.iter_mut().zip(s.counts) {
            *t += c;
        }
    }
    println!("subjects train/val/test: {}/{}/{} across {} strata", totals[0], totals[1], totals[2], split.strata.len());
    Ok(run)
}

pub fn cohort_weights(mut run: Run) -> Result<Run, CliError> {
    let path = run.cfg.require("manifest", &run.cfg.paths.manifest)?;
    run.input(&path)?;
    let manifest = Manifest::read(&path)?;
    let bins = run.cfg.bins()?;
    let mut run = reject_out_of_range(run, &manifest.records, &bins)?;
    let weights = inverse_frequency_weights(&manifest.records, &bins).invalid("weights")?;
    let records = rebase(&manifest.records, &manifest, run.dir());
    let values: Vec<String> = weights.iter().map(|w| crate::output::num(*w)).collect();
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, &records, Some(("weight", &values))).failed("writing weights")?;
    run.write_bytes("weights.csv", &buf)?;
    println!("weights for {} sessions written", records.len());
    Ok(run)
}
