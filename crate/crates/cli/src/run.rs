use std::path::{Path, PathBuf};

use ato_core::efficiency::{efficiency_curve_for_operator, CovEps};
use ato_core::features::{
    project, r2_histogram, read_dictionary, score_features, scores_to_csv, FeatureDictionary,
    SkipReason,
};
use ato_core::operator::{fit_cv, read_operator, write_operator, FitConfig, TransportOperator};
use ato_core::synth::{generate_planted, PlantConfig};
use ato_core::tensor_io::{atomic_write, read_pairset, split_pairset, write_pairset, SplitSpec};
use ato_core::toy::{build_model, causal_reports_to_csv, run_causal_protocol, CausalProtocol, ToyModelConfig};
use ato_core::{Error, Result};
use serde_json::json;

use crate::args::{
    AlphaGrid, CausalArgs, EfficiencyArgs, EvalFeaturesArgs, FitArgs, SynthArgs, ValidateArgs,
};
use crate::validate::{validate, Outcome};

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        })
    }
}

fn require_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if parent.is_dir() && !path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        })
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let truth_path = a.truth.clone().unwrap_or_else(|| with_suffix(&a.out, ".truth.json"));
    require_output(&a.out)?;
    require_output(&truth_path)?;
    let cfg = PlantConfig::new(a.d_model, a.rows, a.rank, a.seed)
        .with_noise(a.sigma)
        .with_gain(a.gain)
        .with_synth_dims(a.synth_dims);
    let (pairs, truth) = generate_planted(&cfg)?;
    write_pairset(&pairs, &a.out)?;
    let mut doc = truth.to_json();
    doc["synth_linear_r2"] = json!(truth.synth_linear_r2);
    doc["config"] = serde_json::to_value(&cfg)?;
    write_json(&truth_path, &doc)?;
    println!("wrote {} ({} rows, d_model {})", a.out.display(), a.rows, a.d_model);
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    require_input(&a.pairs)?;
    require_output(&a.out)?;
    let AlphaGrid(grid) = a.alpha_grid.clone();
    let cfg = FitConfig {
        alpha_grid: grid,
        n_folds: a.folds,
        fold_seed: a.fold_seed,
    };
    cfg.validate()?;
    let spec = SplitSpec::new(a.split.split, a.split.split_seed)?;
    let pairs = read_pairset(&a.pairs)?;
    let (train, _, _) = split_pairset(&pairs, &spec)?;
    let mut op = fit_cv(train.x(), train.y(), &cfg)?;
    op.fit_stats.split = Some(spec);
    write_operator(&op, &a.out)?;
    println!(
        "alpha {} cv_r2 {} train_r2 {}",
        op.alpha,
        op.fit_stats.selected_cv_r2(op.alpha).unwrap_or(f64::NAN),
        op.fit_stats.train_r2
    );
    Ok(())
}

/// Rows the operator was not fitted on: the test part of its recorded split.
fn held_out_split(
    pairs_path: &Path,
    op: &TransportOperator,
    split_seed: u64,
) -> Result<(ato_core::tensor_io::ActivationPairset, ato_core::tensor_io::ActivationPairset)> {
    let pairs = read_pairset(pairs_path)?;
    if pairs.d_model() != op.d_in() {
        return Err(Error::DimensionMismatch(format!(
            "pairset d_model {} vs operator {}",
            pairs.d_model(),
            op.d_in()
        )));
    }
    let spec = op.fit_stats.split.unwrap_or_else(|| SplitSpec::standard(split_seed));
    let (train, _, test) = split_pairset(&pairs, &spec)?;
    Ok((train, test))
}

pub fn efficiency(a: &EfficiencyArgs) -> Result<()> {
    require_input(&a.pairs)?;
    require_input(&a.op)?;
    require_output(&a.out)?;
    if let Some(j) = &a.json {
        require_output(j)?;
    }
    let op = read_operator(&a.op)?;
    let (train, test) = held_out_split(&a.pairs, &op, a.split_seed)?;
    let ranks = a.ranks.resolve(op.d_in());
    let report = efficiency_curve_for_operator(&op, &train, &test, &ranks, CovEps::default())?;
    for flag in &report.flags {
        log::warn!("{flag}");
    }
    atomic_write(&a.out, report.to_csv().as_bytes())?;
    if let Some(j) = &a.json {
        write_json(j, &serde_json::to_value(&report)?)?;
    }
    println!("d_eff {} over {} ranks", report.d_eff, report.ranks.len());
    Ok(())
}

fn skip_label(r: SkipReason) -> &'static str {
    match r {
        SkipReason::TooFewActivations(_) => "too_few_activations",
        SkipReason::ConstantActivation => "constant_activation",
        SkipReason::BelowFloor => "below_floor",
    }
}

pub fn eval_features(a: &EvalFeaturesArgs) -> Result<()> {
    require_input(&a.pairs)?;
    require_input(&a.op)?;
    if let Some(d) = &a.dict {
        require_input(d)?;
    }
    require_output(&a.out)?;
    if let Some(j) = &a.json {
        require_output(j)?;
    }
    let op = read_operator(&a.op)?;
    let (_, test) = held_out_split(&a.pairs, &op, a.split_seed)?;
    let dict = match &a.dict {
        Some(p) => read_dictionary(p)?,
        None => FeatureDictionary::identity(op.d_out(), test.meta().target_layer()),
    };
    let truth = project(&dict, test.y())?;
    let pred = project(&dict, &op.predict(test.x())?)?;
    let scoring = score_features(&truth, &pred, &dict, a.min_count, a.r2_floor)?;
    atomic_write(&a.out, scores_to_csv(&scoring.scores).as_bytes())?;
    let edges: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let hist = r2_histogram(&scoring.scores, &edges)?;
    if let Some(j) = &a.json {
        let skipped: Vec<_> = scoring
            .skipped
            .iter()
            .map(|s| json!({"feature_id": s.feature_id, "reason": skip_label(s.reason)}))
            .collect();
        let doc = json!({
            "n_features": dict.n_features(),
            "n_scored": scoring.scores.len(),
            "histogram": hist,
            "skipped": skipped,
        });
        write_json(j, &doc)?;
    }
    println!(
        "{} of {} features scored, {} above r2 {}",
        scoring.scores.len(),
        dict.n_features(),
        hist.high_transport,
        ato_core::features::HIGH_TRANSPORT_R2
    );
    Ok(())
}

pub fn causal(a: &CausalArgs) -> Result<()> {
    require_output(&a.out)?;
    if let Some(j) = &a.json {
        require_output(j)?;
    }
    let cfg = ToyModelConfig {
        vocab: a.vocab,
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_seq: a.seq_len.max(2),
        seed: a.seed,
        weight_scale: a.weight_scale,
    };
    let protocol = CausalProtocol {
        target_layer: a.target_layer,
        leaps: a.leaps.clone(),
        seq_len: a.seq_len,
        n_train_sequences: a.train_seqs,
        n_eval_sequences: a.eval_seqs,
        train_seed: a.train_seed,
        eval_seed: a.eval_seed,
        positions: a.positions,
        n_position_sets: a.position_sets,
        position_seed: a.position_seed,
        fit: FitConfig::default(),
    };
    let model = build_model(&cfg)?;
    let reports = run_causal_protocol(&model, &protocol)?;
    atomic_write(&a.out, causal_reports_to_csv(&reports).as_bytes())?;
    if let Some(j) = &a.json {
        let doc = json!({"model": cfg, "protocol": protocol, "reports": reports});
        write_json(j, &doc)?;
    }
    for r in &reports {
        println!(
            "k={} ppl unedited {:.4} ato {:.4} zero {:.4} degradation {:.4}",
            r.leap, r.ppl_unedited, r.ppl_ato, r.ppl_zero, r.degradation_ato
        );
    }
    Ok(())
}

/// Prints one line per check; true when every check passed.
pub fn validate_file(a: &ValidateArgs) -> Result<bool> {
    let bytes = std::fs::read(&a.path).map_err(|source| Error::Io {
        path: a.path.clone(),
        source,
    })?;
    let (format, checks) = validate(&a.path, &bytes);
    if let Some(f) = format {
        println!("format {f:?}");
    }
    for c in &checks {
        println!("{c}");
    }
    let ok = checks.iter().all(|c| c.outcome == Outcome::Pass);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}
