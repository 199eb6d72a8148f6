use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use sernet_core::data::{load_manifest, load_split, synth_dataset, Raster, SegSample, Split};
use sernet_core::gradsuite;
use sernet_core::metrics::{iou_table_csv, ConfusionMatrix};
use sernet_core::model::{ablate, layout_param_count, param_breakdown, Model, ModelConfig, Toggle};
use sernet_core::seed::derive_seed;
use sernet_core::train::{evaluate, history_csv, train, ClassWeights};
use sernet_core::{Error, Result};

use crate::config::RunConfig;

const REFERENCE_PARAMS: f64 = 44.2e6;

fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.run.out;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    write(out.join("config.toml"), cfg.to_toml())
}

/// Samples of one split plus the class names used in reports.
fn load_data(cfg: &RunConfig, split: Split) -> Result<(Vec<SegSample>, Vec<String>)> {
    let classes = cfg.model.num_classes;
    let generic = || (0..classes).map(|k| format!("class{k}")).collect::<Vec<_>>();
    match &cfg.data.manifest {
        Some(path) => {
            let m = load_manifest(path)?;
            if !m.class_names.is_empty() && m.class_names.len() != classes {
                return Err(Error::Config(format!(
                    "manifest {} names {} classes, model.num_classes is {classes}",
                    path.display(),
                    m.class_names.len()
                )));
            }
            let samples = load_split(&m, split, derive_seed(cfg.run.seed, "train"))?;
            for s in &samples {
                s.validate(classes).map_err(|e| match e {
                    Error::Data(msg) => Error::Data(format!("{}: {msg}", s.id)),
                    other => other,
                })?;
            }
            let names = if m.class_names.is_empty() { generic() } else { m.class_names };
            Ok((samples, names))
        }
        None => {
            let count = match split {
                Split::Train => cfg.data.synth_train,
                Split::Val => cfg.data.synth_val,
                Split::Test => cfg.data.synth_test,
            };
            let seed = derive_seed(cfg.run.seed, &format!("synth.{split}"));
            let samples = synth_dataset(seed, count, cfg.model.input_h, cfg.model.input_w, classes)?;
            Ok((samples, generic()))
        }
    }
}

fn class_weights(cfg: &RunConfig, data: &[SegSample]) -> Result<ClassWeights> {
    let labels: Vec<_> = data.iter().map(|s| &s.labels).collect();
    let ignore = Some(cfg.data.ignore);
    let counts = ClassWeights::count(&labels, cfg.model.num_classes, ignore)?;
    ClassWeights::from_counts(&counts, cfg.weight_scheme()?, ignore)
}

fn fit(cfg: &RunConfig, model_cfg: &ModelConfig, train_set: &[SegSample]) -> Result<(Model, String)> {
    let weights = class_weights(cfg, train_set)?;
    let mut model = Model::build(model_cfg)?;
    let history = train(&mut model, train_set, &weights, &cfg.train_config())?;
    Ok((model, history_csv(&history)))
}

fn eval_matrix(cfg: &RunConfig, model: &Model, data: &[SegSample]) -> Result<ConfusionMatrix> {
    evaluate(model, data, cfg.train.batch_size, Some(cfg.data.ignore))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (train_set, names) = load_data(cfg, Split::Train)?;
    let (val_set, _) = load_data(cfg, Split::Val)?;
    prepare_out(cfg)?;
    let started = Instant::now();
    let (model, history) = fit(cfg, &cfg.model_config(), &train_set)?;
    let out = &cfg.run.out;
    write(out.join("history.csv"), history)?;
    model.save(out.join("model.serk"))?;

    let mut rows = vec![("train", eval_matrix(cfg, &model, &train_set)?)];
    if !val_set.is_empty() {
        rows.push(("val", eval_matrix(cfg, &model, &val_set)?));
    }
    let table: Vec<(&str, &ConfusionMatrix)> = rows.iter().map(|(l, m)| (*l, m)).collect();
    write(out.join("report.csv"), iou_table_csv(&names, &table)?)?;
    for (label, m) in &rows {
        println!("{label} mIoU {:.4}", m.mean_iou()?);
    }
    println!("trained in {:.1}s; artifacts in {}", started.elapsed().as_secs_f64(), out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<()> {
    let model = Model::load(&cfg.model_config(), checkpoint)?;
    let (data, names) = load_data(cfg, split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("split '{split}' has no samples")));
    }
    let cm = eval_matrix(cfg, &model, &data)?;
    let out = &cfg.run.out;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    write(out.join(format!("eval_{split}.csv")), iou_table_csv(&names, &[(split.as_str(), &cm)])?)?;
    println!("{split} mIoU {:.4} over {} images", cm.mean_iou()?, data.len());
    Ok(())
}

/// Variant label and the toggle it drops; `None` is the full model.
pub const VARIANTS: [(&str, Option<Toggle>); 5] = [
    ("full", None),
    ("-abm5", Some(Toggle::AbM5)),
    ("-dbn", Some(Toggle::DbN)),
    ("-afn1", Some(Toggle::AfN1)),
    ("-afn2", Some(Toggle::AfN2)),
];

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate.seeds is empty".into()));
    }
    prepare_out(cfg)?;
    let mut runs = String::from("seed,variant,miou\n");
    let mut sums = [0.0; VARIANTS.len()];
    for &seed in &cfg.ablate.seeds {
        let mut c = cfg.clone();
        c.run.seed = seed;
        let (train_set, _) = load_data(&c, Split::Train)?;
        let (val_set, _) = load_data(&c, Split::Val)?;
        if val_set.is_empty() {
            return Err(Error::Data("ablation needs a non-empty val split".into()));
        }
        let base = c.model_config();
        for (k, (label, drop)) in VARIANTS.iter().enumerate() {
            let model_cfg = drop.map_or(base.clone(), |t| ablate(&base, t));
            let (model, _) = fit(&c, &model_cfg, &train_set)?;
            let miou = eval_matrix(&c, &model, &val_set)?.mean_iou()?;
            log::info!("seed {seed} {label}: val mIoU {miou:.4}");
            let _ = writeln!(runs, "{seed},{label},{miou}");
            sums[k] += miou;
        }
    }
    let n = cfg.ablate.seeds.len() as f64;
    let full = sums[0] / n;
    let base = cfg.model_config();
    let mut table = String::from("variant,abm5,dbn,afn1,afn2,miou,delta\n");
    for ((label, drop), sum) in VARIANTS.iter().zip(sums) {
        let m = drop.map_or(base.clone(), |t| ablate(&base, t));
        let mean = sum / n;
        let flags = Toggle::ALL.map(|t| if m.toggle(t) { "1" } else { "0" }).join(",");
        let _ = writeln!(table, "{label},{flags},{mean:.6},{:.6}", mean - full);
        println!("{label:<6} mIoU {mean:.4}  delta {:+.4}", mean - full);
    }
    write(cfg.run.out.join("ablation_runs.csv"), runs)?;
    write(cfg.run.out.join("ablation.csv"), table)?;
    Ok(())
}

pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let started = Instant::now();
    let outcomes = gradsuite::run_all(seed)?;
    for o in &outcomes {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        println!("{:<32} max rel err {:.3e}  tol {:.0e}  {verdict}", o.name, o.max_rel_err, o.tolerance);
    }
    println!("{} checks in {:.1}s", outcomes.len(), started.elapsed().as_secs_f64());
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn cmd_params(model_cfg: &ModelConfig) -> Result<()> {
    for (group, n) in param_breakdown(model_cfg)? {
        println!("{group:<8} {n:>12}");
    }
    let total = layout_param_count(model_cfg)?;
    println!("total    {total:>12}");
    println!(
        "{:.2}M learnable parameters ({:+.1}% vs the 44.2M reference model)",
        total as f64 / 1e6,
        (total as f64 / REFERENCE_PARAMS - 1.0) * 100.0
    );
    Ok(())
}

/// Writes every split as PPM/PGM pairs plus a `manifest.tsv` that the
/// `data.manifest` key can point at.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let out = &cfg.run.out;
    let mut manifest = String::from("#classes");
    for k in 0..cfg.model.num_classes {
        let _ = write!(manifest, "\tclass{k}");
    }
    manifest.push('\n');
    let mut total = 0;
    for split in Split::ALL {
        let mut c = cfg.clone();
        c.data.manifest = None;
        let (samples, _) = load_data(&c, split)?;
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{split}_{i:04}");
            Raster::from_image(&s.image)?.write(out.join(format!("{stem}.ppm")))?;
            Raster::from_labels(&s.labels)?.write(out.join(format!("{stem}.pgm")))?;
            let _ = writeln!(manifest, "{split}\t{stem}.ppm\t{stem}.pgm");
        }
        total += samples.len();
    }
    write(out.join("manifest.tsv"), manifest)?;
    println!("wrote {total} image pairs and manifest.tsv to {}", out.display());
    Ok(())
}
