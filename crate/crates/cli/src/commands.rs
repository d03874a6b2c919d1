// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use salve::alphacrit::{
    alpha_crit, suppression_term_distribution, summarize_alpha_crit, write_samples_csv, AlphaCritSample, AlphaGrid,
    Estimate, Method,
};
use salve::bundle::{train_split, validate_dataset, FEATURE_MAPS, GRADFAM_GRADS};
use salve::edits::{
    apply_weight_edit, default_rome_key, feature_contributions, make_steering_vector, rome_update, steer_dataset,
    Direction, EditPlan, RomeEdit, ROME_SUPPRESSED_LOGIT,
};
use salve::eval::{
    accuracy_sweep, alpha_50, confusion_matrix, seed_robustness_sweeps, steering_sweep, uniform_grid,
    DEFAULT_SWEEP_MAX, DEFAULT_SWEEP_STEP,
};
use salve::features::{class_conditional_means, dominant_feature, dominant_features, ClassLatentProfile};
use salve::gradfam::{gradfam_avgpool_analytic, gradfam_from_gradients, FeatureMapStack};
use salve::sae::{encode, sae_manifest, train_sae, SaeParams, SaeTrainConfig};
use salve::synth::{HeadTrainConfig, SynthBenchmark, SynthConfig};
use salve::{ActivationDataset, ConfusionMatrix, Error, HeadWeights, RobustnessResult, SweepCurve, TensorBundle};

use crate::args::*;
use crate::output::{write_atomic, write_json};

/// Range of the validity histogram and its bin count (width 0.5).
const VALIDITY_RANGE: (f64, f64) = (-20.0, 1.0);
const VALIDITY_BINS: usize = 42;
/// Default steering sweep.
const STEER_BETA_MAX: f64 = 20.0;
const STEER_BETA_STEP: f64 = 0.1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::TrainSae(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Edit(a) => edit(a),
        Command::Sweep(a) => sweep(a),
        Command::AlphaCrit(a) => alpha_crit_cmd(a),
        Command::Rome(a) => rome(a),
        Command::Steer(a) => steer(a),
        Command::Gradfam(a) => gradfam(a),
        Command::Report(a) => report(a),
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn require_inputs(paths: &[&Path]) -> CliResult<()> {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(CliError::Usage(format!("input file {} does not exist", p.display()))),
        None => Ok(()),
    }
}

struct Loaded {
    bundle: TensorBundle,
    dataset: ActivationDataset,
    head: HeadWeights,
}

fn load(input: &Input) -> CliResult<Loaded> {
    require_inputs(&[&input.bundle])?;
    let bundle = TensorBundle::read_file(&input.bundle)?;
    let (test, head) = validate_dataset(&bundle)?;
    let dataset = match input.split {
        Split::Test => test,
        Split::Train => train_split(&bundle)?
            .ok_or_else(|| Error::Schema(format!("{} has no train split", input.bundle.display())))?,
    };
    Ok(Loaded { bundle, dataset, head })
}

fn load_sae(path: &Path, dataset: &ActivationDataset) -> CliResult<(SaeParams, TensorBundle)> {
    require_inputs(&[path])?;
    let bundle = TensorBundle::read_file(path)?;
    let params = SaeParams::from_bundle(&bundle)?;
    if params.input_dim() != dataset.num_features() {
        return Err(Error::Data(format!(
            "SAE input dimension {} does not match {} activation features",
            params.input_dim(),
            dataset.num_features()
        ))
        .into());
    }
    Ok((params, bundle))
}

fn profile_of(params: &SaeParams, dataset: &ActivationDataset) -> CliResult<ClassLatentProfile> {
    let z = encode(params, &dataset.x)?;
    Ok(class_conditional_means(&z, &dataset.labels, dataset.num_classes())?)
}

/// The requested latent, or the class's dominant one.
fn resolve_latent(target: &Target, params: &SaeParams, profile: &ClassLatentProfile) -> CliResult<usize> {
    if target.class >= profile.num_classes() {
        return Err(Error::Index(format!(
            "class {} out of range for {} classes",
            target.class,
            profile.num_classes()
        ))
        .into());
    }
    match target.feature {
        Some(l) if l >= params.latent_dim() => Err(Error::Index(format!(
            "feature {l} out of range for {} latents",
            params.latent_dim()
        ))
        .into()),
        Some(l) => Ok(l),
        None => Ok(dominant_feature(profile, target.class)?),
    }
}

fn sweep_grid(grid: &GridArgs, max: f64, step: f64) -> CliResult<Vec<f64>> {
    Ok(uniform_grid(grid.alpha_max.unwrap_or(max), grid.alpha_step.unwrap_or(step))?)
}

fn alpha_grid(grid: &GridArgs) -> CliResult<AlphaGrid> {
    let d = AlphaGrid::default();
    Ok(AlphaGrid::new(grid.alpha_max.unwrap_or(d.alpha_max), grid.alpha_step.unwrap_or(d.step))?)
}

fn direction(d: DirectionArg) -> Direction {
    match d {
        DirectionArg::Suppress => Direction::Suppress,
        DirectionArg::Enhance => Direction::Enhance,
    }
}

/// SAE config for retraining, from the SAE manifest with optional overrides.
fn manifest_config(sae_bundle: &TensorBundle, epochs: Option<usize>) -> CliResult<SaeTrainConfig> {
    let manifest = sae_bundle.manifest_json()?;
    let mut cfg = match manifest.get("config") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Schema(format!("SAE manifest config: {e}")))?,
        None => SaeTrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

/// Matrix the SAE is retrained on: the train split when present.
fn training_matrix(bundle: &TensorBundle, fallback: &ActivationDataset) -> CliResult<salve::Matrix> {
    Ok(match train_split(bundle)? {
        Some(t) => t.x,
        None => fallback.x.clone(),
    })
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

fn write_bundle_file(path: &Path, bundle: &TensorBundle) -> CliResult<()> {
    Ok(write_atomic(path, |w| salve::write_bundle(bundle, w))?)
}

fn write_curve(report: &Report, curve: &SweepCurve) -> CliResult<()> {
    match report.format {
        Format::Csv => write_atomic(&report.out, |w| curve.write_csv(w))?,
        Format::Json => write_json(&report.out, &serde_json::to_value(curve)?)?,
    }
    Ok(())
}

fn write_robustness_csv(w: &mut dyn Write, r: &RobustnessResult) -> salve::Result<()> {
    write!(w, "alpha,mean,std")?;
    for s in &r.seeds {
        write!(w, ",seed_{s}")?;
    }
    writeln!(w)?;
    for (g, alpha) in r.alphas.iter().enumerate() {
        write!(w, "{alpha},{},{}", r.mean[g], r.std[g])?;
        for c in &r.curves {
            write!(w, ",{}", c[g])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn confusion_json(cm: &ConfusionMatrix) -> Value {
    json!({
        "counts": cm.counts,
        "per_class_accuracy": cm.per_class_accuracy(),
        "overall_accuracy": cm.overall_accuracy(),
    })
}

fn summary_json(results: &[AlphaCritSample], method: Method) -> Value {
    match summarize_alpha_crit(results, method) {
        Ok(s) => serde_json::to_value(s).unwrap_or(Value::Null),
        Err(_) => Value::Null,
    }
}

fn validity_json(results: &[AlphaCritSample], c: &[f32]) -> Value {
    match suppression_term_distribution(results, c) {
        Ok(d) => json!({
            "terms": d.terms.len(),
            "fraction_negative": d.fraction_negative,
            "histogram": {
                "lo": VALIDITY_RANGE.0,
                "hi": VALIDITY_RANGE.1,
                "counts": d.histogram(VALIDITY_RANGE.0, VALIDITY_RANGE.1, VALIDITY_BINS),
            },
        }),
        Err(_) => Value::Null,
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn synth(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    let bench = SynthBenchmark::build(&cfg, &HeadTrainConfig::default())?;
    write_bundle_file(&a.out, &bench.to_bundle()?)
}

fn train(a: TrainSaeArgs) -> CliResult<()> {
    let input = Input {
        bundle: a.bundle.clone(),
        split: Split::Test,
    };
    let loaded = load(&input)?;
    let x = training_matrix(&loaded.bundle, &loaded.dataset)?;
    let cfg = SaeTrainConfig {
        latent_dim: a.latent_dim,
        lambda1: a.lambda1,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        ..SaeTrainConfig::default()
    };
    let (params, trace) = train_sae(&x, &cfg)?;
    write_bundle_file(&a.out, &params.to_bundle(&sae_manifest(&cfg, &trace))?)
}

fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, _) = load_sae(&a.sae, &loaded.dataset)?;
    let profile = profile_of(&params, &loaded.dataset)?;
    match a.report.format {
        Format::Csv => write_atomic(&a.report.out, |w| profile.write_csv(w))?,
        Format::Json => {
            let means: Vec<&[f32]> = (0..profile.num_classes()).map(|k| profile.mu.row(k)).collect();
            write_json(
                &a.report.out,
                &json!({
                    "class_names": loaded.dataset.class_names,
                    "counts": profile.counts,
                    "means": means,
                    "dominant": dominant_features(&profile)?,
                }),
            )?
        }
    }
    Ok(())
}

fn edit(a: EditArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, _) = load_sae(&a.sae, &loaded.dataset)?;
    let profile = profile_of(&params, &loaded.dataset)?;
    let latent = resolve_latent(&a.target, &params, &profile)?;
    let c = feature_contributions(&params, latent)?;
    let plan = EditPlan::new(latent, direction(a.direction), a.alpha)?;
    let edited = apply_weight_edit(&loaded.head, &c, &plan)?;

    let mut out = loaded.bundle;
    edited.store(&mut out)?;
    let mut manifest = out.manifest_json()?;
    if let Some(m) = manifest.as_object_mut() {
        m.insert("edit".into(), json!({"kind": "weight", "class": a.target.class, "plan": plan}));
    }
    out.set_manifest(&manifest);
    write_bundle_file(&a.out, &out)
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, sae_bundle) = load_sae(&a.sae, &loaded.dataset)?;
    let grid = sweep_grid(&a.grid, DEFAULT_SWEEP_MAX, DEFAULT_SWEEP_STEP)?;
    let k = a.target.class;

    if let Some(seeds) = &a.seeds {
        if a.target.feature.is_some() {
            return Err(CliError::Usage("--feature cannot be combined with --seeds; each seed uses its dominant latent".into()));
        }
        if a.direction != DirectionArg::Suppress {
            return Err(CliError::Usage("--seeds supports --direction suppress only".into()));
        }
        let cfg = manifest_config(&sae_bundle, a.epochs)?;
        let x = training_matrix(&loaded.bundle, &loaded.dataset)?;
        let result = seed_robustness_sweeps(&x, &loaded.dataset, &loaded.head, &cfg, seeds, &[k], &grid)?.remove(0);
        match a.report.format {
            Format::Csv => write_atomic(&a.report.out, |w| write_robustness_csv(w, &result))?,
            Format::Json => write_json(&a.report.out, &serde_json::to_value(&result)?)?,
        }
        return Ok(());
    }

    let profile = profile_of(&params, &loaded.dataset)?;
    let latent = resolve_latent(&a.target, &params, &profile)?;
    let c = feature_contributions(&params, latent)?;
    let curve = accuracy_sweep(&loaded.head, &loaded.dataset, &c, direction(a.direction), k, &grid)?;
    write_curve(&a.report, &curve)
}

fn alpha_crit_cmd(a: AlphaCritArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, _) = load_sae(&a.sae, &loaded.dataset)?;
    let profile = profile_of(&params, &loaded.dataset)?;
    let latent = resolve_latent(&a.target, &params, &profile)?;
    let c = feature_contributions(&params, latent)?;
    let grid = alpha_grid(&a.grid)?;
    let mut results = alpha_crit(&loaded.head, &loaded.dataset, &c, a.target.class, &grid)?;

    if let Some(n) = a.sample {
        if n >= loaded.dataset.num_samples() {
            return Err(Error::Index(format!("sample {n} out of range for {} samples", loaded.dataset.num_samples())).into());
        }
        results.retain(|s| s.index == n);
        let Some(sample) = results.first() else {
            return Err(Error::Data(format!(
                "sample {n} has label {}, not class {}",
                loaded.dataset.labels[n], a.target.class
            ))
            .into());
        };
        if let Some(Estimate::Excluded(why)) = sample.numerical {
            return Err(Error::Numerical(format!("sample {n}: {why} up to alpha {}", grid.alpha_max)).into());
        }
    }

    match a.report.format {
        Format::Csv => write_atomic(&a.report.out, |w| write_samples_csv(&results, w))?,
        Format::Json => write_json(
            &a.report.out,
            &json!({
                "class": a.target.class,
                "latent": latent,
                "grid": grid,
                "samples": results,
                "analytical": summary_json(&results, Method::Analytical),
                "numerical": summary_json(&results, Method::Numerical),
            }),
        )?,
    }
    Ok(())
}

fn rome(a: RomeArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let k = a.class;
    if k >= loaded.head.num_classes() {
        return Err(Error::Index(format!("class {k} out of range for {} classes", loaded.head.num_classes())).into());
    }
    let key_index = match a.sample {
        Some(n) if n >= loaded.dataset.num_samples() => {
            return Err(Error::Index(format!("sample {n} out of range for {} samples", loaded.dataset.num_samples())).into())
        }
        Some(n) => n,
        None => default_rome_key(&loaded.head, &loaded.dataset, k)?,
    };
    let key = loaded.dataset.x.row(key_index);
    let edited = rome_update(&loaded.head, &RomeEdit::suppress_class(&loaded.head, key, k, ROME_SUPPRESSED_LOGIT)?)?;

    let mut out = loaded.bundle;
    edited.store(&mut out)?;
    let mut manifest = out.manifest_json()?;
    if let Some(m) = manifest.as_object_mut() {
        m.insert(
            "edit".into(),
            json!({"kind": "rank_one", "class": k, "key_sample": key_index, "suppressed_logit": ROME_SUPPRESSED_LOGIT}),
        );
    }
    out.set_manifest(&manifest);
    write_bundle_file(&a.out, &out)
}

fn steer(a: SteerArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, _) = load_sae(&a.sae, &loaded.dataset)?;
    let profile = profile_of(&params, &loaded.dataset)?;
    let latent = resolve_latent(&a.target, &params, &profile)?;
    let k = a.target.class;

    let Some(beta) = a.beta else {
        let betas = sweep_grid(&a.grid, STEER_BETA_MAX, STEER_BETA_STEP)?;
        let curve = steering_sweep(&loaded.head, &loaded.dataset, &params, &profile, k, latent, &betas)?;
        return write_curve(&a.report, &curve);
    };
    let v = make_steering_vector(&params, &profile, k, latent, beta)?;
    let steered = steer_dataset(&loaded.dataset, &v)?;
    let cm = confusion_matrix(&loaded.head, &steered)?;
    match a.report.format {
        Format::Csv => write_atomic(&a.report.out, |w| cm.write_csv(w))?,
        Format::Json => write_json(
            &a.report.out,
            &json!({"class": k, "latent": latent, "beta": beta, "vector": v, "confusion": confusion_json(&cm)}),
        )?,
    }
    Ok(())
}

fn gradfam(a: GradfamArgs) -> CliResult<()> {
    require_inputs(&[&a.bundle, &a.sae])?;
    let bundle = TensorBundle::read_file(&a.bundle)?;
    let maps = FeatureMapStack::from_tensor(bundle.require(FEATURE_MAPS)?)?;
    let params = SaeParams::from_bundle(&TensorBundle::read_file(&a.sae)?)?;
    if a.feature >= params.latent_dim() {
        return Err(Error::Index(format!("feature {} out of range for {} latents", a.feature, params.latent_dim())).into());
    }
    if maps.channels() != params.input_dim() {
        return Err(Error::Data(format!(
            "{} feature-map channels vs SAE input dimension {}",
            maps.channels(),
            params.input_dim()
        ))
        .into());
    }
    let (heatmap, source) = match bundle.get(GRADFAM_GRADS) {
        Some(t) => {
            let grads = FeatureMapStack::from_tensor(t)?;
            (gradfam_from_gradients(&maps, &grads)?, "gradients")
        }
        None => (gradfam_avgpool_analytic(&maps, params.enc_w.row(a.feature))?, "avgpool_analytic"),
    };
    match a.report.format {
        Format::Csv => write_atomic(&a.report.out, |w| heatmap.write_csv(w))?,
        Format::Json => write_json(
            &a.report.out,
            &json!({"feature": a.feature, "source": source, "heatmap": heatmap.rows(), "argmax": heatmap.argmax()}),
        )?,
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult<()> {
    let loaded = load(&a.input)?;
    let (params, sae_bundle) = load_sae(&a.sae, &loaded.dataset)?;
    let (head, dataset) = (&loaded.head, &loaded.dataset);
    let grid = sweep_grid(&a.grid, DEFAULT_SWEEP_MAX, DEFAULT_SWEEP_STEP)?;
    let profile = profile_of(&params, dataset)?;
    let dominant = dominant_features(&profile)?;
    let crit_grid = AlphaGrid::default();

    let mut classes = Vec::with_capacity(dominant.len());
    for d in &dominant {
        let k = d.class;
        let c = feature_contributions(&params, d.latent)?;
        let curve = accuracy_sweep(head, dataset, &c, Direction::Suppress, k, &grid)?;
        // Strength used for the edited confusion matrix: the first grid
        // point where the target class is fully suppressed, else the last.
        let g = curve
            .class_curve(k)
            .iter()
            .position(|acc| *acc == 0.0)
            .unwrap_or(curve.len() - 1);
        let edited = apply_weight_edit(head, &c, &EditPlan::suppress(d.latent, curve.alphas[g])?)?;
        let results = alpha_crit(head, dataset, &c, k, &crit_grid)?;
        classes.push(json!({
            "class": k,
            "name": dataset.class_names[k],
            "dominant": d,
            "alpha_50": alpha_50(&curve, k),
            "curve": curve,
            "edited_alpha": curve.alphas[g],
            "edited_confusion": confusion_json(&confusion_matrix(&edited, dataset)?),
            "alpha_crit": {
                "analytical": summary_json(&results, Method::Analytical),
                "numerical": summary_json(&results, Method::Numerical),
            },
            "validity": validity_json(&results, &c),
        }));
    }

    let mut doc = json!({
        "class_names": dataset.class_names,
        "split": match a.input.split { Split::Test => "test", Split::Train => "train" },
        "baseline_confusion": confusion_json(&confusion_matrix(head, dataset)?),
        "alpha_crit_grid": crit_grid,
        "classes": classes,
    });
    if let Some(seeds) = &a.seeds {
        let cfg = manifest_config(&sae_bundle, a.epochs)?;
        let x = training_matrix(&loaded.bundle, dataset)?;
        let all: Vec<usize> = (0..dataset.num_classes()).collect();
        let robustness = seed_robustness_sweeps(&x, dataset, head, &cfg, seeds, &all, &grid)?;
        doc["robustness"] = serde_json::to_value(robustness)?;
    }
    Ok(write_json(&a.out, &doc)?)
}
