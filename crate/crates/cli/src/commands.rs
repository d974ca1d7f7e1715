use std::collections::BTreeSet;
use std::fmt::Write as _;

use fundus_t2d::aggregate::{
    aggregate, aggregated_from_csv, aggregated_to_csv, extract_features, features_to_csv, group_by_individual,
    strategy_auc, AggregationStrategy, LearnedAggregators,
};
use fundus_t2d::data_model::{split_cohort_with, CohortManifest, Split, SplitAssignment};
use fundus_t2d::io::{csv_reader, read_to_string, write_atomic, Provenance};
use fundus_t2d::metrics::{roc_auc, summarize_seeds};
use fundus_t2d::model::Model;
use fundus_t2d::synthgen::generate_cohort;
use fundus_t2d::train::{evaluate_auc, summarize_runs, train_strategy, SeedResult, SplitData, TrainConfig, TrainInputs};
use fundus_t2d::uncertainty::{
    predictions_from_csv, predictions_to_csv, referral_curve_records, referral_svg, referral_to_csv, tta_predict,
    PredictionRecord,
};
use fundus_t2d::{Error, Result};

use crate::config::{ExperimentConfig, Layout};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub provenance: Provenance,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, layout: Layout) -> Self {
        let provenance = cfg.provenance();
        Self {
            cfg,
            layout,
            provenance,
        }
    }

    fn manifest(&self) -> Result<CohortManifest> {
        CohortManifest::from_csv(&read_to_string(&self.layout.manifest(&self.cfg))?)
    }

    fn split(&self) -> Result<SplitAssignment> {
        SplitAssignment::from_csv(&read_to_string(&self.layout.split())?)
    }

    fn predictions(&self, seed: u64) -> Result<Vec<PredictionRecord>> {
        predictions_from_csv(&read_to_string(&self.layout.predictions(seed))?)
    }
}

fn csv_bytes(prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut s = format!("{}\n{}\n", prov.comment_line(), header.join(","));
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s.into_bytes()
}

pub fn synth(ctx: &Context) -> Result<()> {
    let manifest_path = ctx.layout.manifest(&ctx.cfg);
    let root = ctx.layout.image_root(&ctx.cfg);
    let manifest = generate_cohort(&ctx.cfg.synth, &root)?;
    write_atomic(&manifest_path, &manifest.to_csv(Some(&ctx.provenance))?)
}

pub fn split(ctx: &Context) -> Result<()> {
    let manifest = ctx.manifest()?;
    let d = &ctx.cfg.data;
    let split = split_cohort_with(&manifest, d.split_ratios, ctx.cfg.split_seed(), d.stratify)?;
    write_atomic(&ctx.layout.split(), &split.to_csv(Some(&ctx.provenance))?)
}

fn load_data(ctx: &Context) -> Result<SplitData> {
    let manifest = ctx.manifest()?;
    let split = ctx.split()?;
    SplitData::load(&manifest, &split, &ctx.layout.image_root(&ctx.cfg), ctx.cfg.data.resize_to)
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = load_data(ctx)?;
    let crop = cfg.model.input_size;
    let inputs = TrainInputs {
        train: &data.train,
        validation: &data.validation,
        augment: &cfg.augment,
        crop_size: crop,
    };
    let hash = ctx.provenance.config_hash.clone();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut first_error = None;
    for &seed in &cfg.seeds {
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let ckpt = ctx.layout.checkpoint(seed);
        let result = train_strategy(&cfg.strategy, &cfg.model, inputs, &train_cfg, Some((&ckpt, &hash)))
            .and_then(|out| Ok((evaluate_auc(&out.best_model, &data.test, crop)?, out.report)));
        match result {
            Ok((auc, report)) => {
                let prov = Provenance::new(hash.clone(), seed);
                write_atomic(&ctx.layout.train_log(seed), &report.to_jsonl(Some(&prov)))?;
                rows.push(vec![
                    seed.to_string(),
                    report.best_epoch.to_string(),
                    report.best_score.to_string(),
                    auc.to_string(),
                    String::new(),
                ]);
                runs.push(SeedResult {
                    seed,
                    test_auc: Some(auc),
                    error: None,
                    report: Some(report),
                });
            }
            Err(e) => {
                let msg = e.code().to_string();
                rows.push(vec![seed.to_string(), "NA".into(), "NA".into(), "NA".into(), msg.clone()]);
                runs.push(SeedResult {
                    seed,
                    test_auc: None,
                    error: Some(msg),
                    report: None,
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error.filter(|_| runs.iter().all(|r| r.test_auc.is_none())) {
        return Err(e);
    }
    let summary = summarize_runs(runs)?;
    rows.push(vec![
        "mean".into(),
        String::new(),
        String::new(),
        summary.mean.to_string(),
        String::new(),
    ]);
    rows.push(vec![
        "std".into(),
        String::new(),
        String::new(),
        summary.std.to_string(),
        String::new(),
    ]);
    write_atomic(
        &ctx.layout.train_summary(),
        &csv_bytes(
            &ctx.provenance,
            &["seed", "best_epoch", "best_validation", "test_auc", "error"],
            &rows,
        ),
    )
}

/// Seeds whose checkpoint exists.
fn trained_seeds(ctx: &Context) -> Vec<u64> {
    ctx.cfg
        .seeds
        .iter()
        .copied()
        .filter(|&s| ctx.layout.checkpoint(s).exists())
        .collect()
}

fn require_seeds(seeds: Vec<u64>, what: &str) -> Result<Vec<u64>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(format!("no {what} found; run the previous step first")));
    }
    Ok(seeds)
}

pub fn predict(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let seeds = require_seeds(trained_seeds(ctx), "checkpoints")?;
    let data = load_data(ctx)?;
    let crop = cfg.model.input_size;
    let mut rows = Vec::new();
    for seed in seeds {
        let model = Model::load_checkpoint(&ctx.layout.checkpoint(seed))?;
        let tta_seed = cfg.tta_seed(seed);
        let mut records = Vec::new();
        let mut test_means = Vec::new();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let ds = data.get(split);
            for (meta, img) in ds.samples.iter().zip(&ds.images) {
                let dist = tta_predict(&model, img, &meta.image_id, cfg.tta.k, &cfg.augment, tta_seed, crop)?;
                if split == Split::Test {
                    test_means.push(dist.mean);
                }
                records.push(PredictionRecord::new(meta, &dist));
            }
        }
        let prov = Provenance::new(ctx.provenance.config_hash.clone(), seed);
        write_atomic(
            &ctx.layout.predictions(seed),
            &predictions_to_csv(&records, cfg.tta.write_replicas, Some(&prov))?,
        )?;
        let labels = data.test.labels();
        rows.push(vec![
            seed.to_string(),
            evaluate_auc(&model, &data.test, crop)?.to_string(),
            roc_auc(&test_means, &labels)?.to_string(),
        ]);
    }
    write_atomic(
        &ctx.layout.predict_summary(),
        &csv_bytes(&ctx.provenance, &["seed", "test_auc", "test_auc_tta"], &rows),
    )
}

fn write_referral(ctx: &Context, records: &[PredictionRecord], tag: &str, prov: &Provenance) -> Result<()> {
    let r = &ctx.cfg.referral;
    let curves = r
        .measures
        .iter()
        .map(|&m| referral_curve_records(records, &r.fractions, m))
        .collect::<Result<Vec<_>>>()?;
    let (csv_path, svg_path) = ctx.layout.referral(tag);
    write_atomic(&csv_path, &referral_to_csv(&curves, Some(prov))?)?;
    write_atomic(&svg_path, referral_svg(&curves, Some(prov)).as_bytes())
}

fn prediction_seeds(ctx: &Context) -> Vec<u64> {
    ctx.cfg
        .seeds
        .iter()
        .copied()
        .filter(|&s| ctx.layout.predictions(s).exists())
        .collect()
}

pub fn refer(ctx: &Context) -> Result<()> {
    if let Some(path) = &ctx.cfg.referral.predictions {
        let records = predictions_from_csv(&read_to_string(path)?)?;
        return write_referral(ctx, &records, "predictions", &ctx.provenance);
    }
    let split = ctx.split()?;
    for seed in require_seeds(prediction_seeds(ctx), "prediction files")? {
        let test: Vec<PredictionRecord> = ctx
            .predictions(seed)?
            .into_iter()
            .filter(|r| split.split_of(&r.individual_id) == Some(Split::Test))
            .collect();
        let prov = Provenance::new(ctx.provenance.config_hash.clone(), seed);
        write_referral(ctx, &test, &format!("seed_{seed}"), &prov)?;
    }
    Ok(())
}

pub fn aggregate_cmd(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let split = ctx.split()?;
    let strategies = &cfg.aggregation.strategies;
    for seed in require_seeds(prediction_seeds(ctx), "prediction files")? {
        let groups = group_by_individual(&ctx.predictions(seed)?)?;
        let features = groups
            .iter()
            .map(|(id, ind)| extract_features(id, ind))
            .collect::<Result<Vec<_>>>()?;
        let prov = Provenance::new(ctx.provenance.config_hash.clone(), seed);
        write_atomic(&ctx.layout.features(seed), &features_to_csv(&features, Some(&prov))?)?;

        let learned = if strategies.iter().any(|s| s.is_learned()) {
            let fit_rows: Vec<_> = features
                .iter()
                .filter(|f| matches!(split.split_of(&f.individual_id), Some(Split::Train | Split::Validation)))
                .cloned()
                .collect();
            Some(LearnedAggregators::fit(&fit_rows, &cfg.aggregation.logreg)?)
        } else {
            None
        };
        let test_groups = groups
            .into_iter()
            .filter(|(id, _)| split.split_of(id) == Some(Split::Test))
            .collect();
        let preds = aggregate(&test_groups, strategies, learned.as_ref())?;
        write_atomic(&ctx.layout.aggregated(seed), &aggregated_to_csv(&preds, Some(&prov))?)?;
    }
    Ok(())
}

/// Reads `column` of every data row whose `seed` column parses as a seed.
fn per_seed_column(text: &str, column: &str) -> Result<Vec<(u64, Option<f64>)>> {
    let mut reader = csv_reader(text);
    let header = reader.headers()?.clone();
    let idx = header.iter().position(|h| h == column).ok_or(Error::MissingField {
        field: column.to_string(),
        row: 0,
    })?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if let Ok(seed) = rec[0].parse::<u64>() {
            out.push((seed, rec.get(idx).and_then(|v| v.parse().ok())));
        }
    }
    Ok(out)
}

struct Row {
    section: &'static str,
    name: String,
    values: Vec<f64>,
}

impl Row {
    fn stats(&self) -> (f64, f64) {
        summarize_seeds(&self.values).unwrap_or((f64::NAN, f64::NAN))
    }
}

/// Summary tables built from earlier outputs only.
pub fn report(ctx: &Context) -> Result<()> {
    let layout = &ctx.layout;
    let mut rows: Vec<Row> = Vec::new();
    let strategy = ctx.cfg.strategy.name().to_string();

    if layout.train_summary().exists() {
        let vals = per_seed_column(&read_to_string(&layout.train_summary())?, "test_auc")?;
        rows.push(Row {
            section: "image_level",
            name: strategy.clone(),
            values: vals.into_iter().filter_map(|(_, v)| v).collect(),
        });
    }
    if layout.predict_summary().exists() {
        let vals = per_seed_column(&read_to_string(&layout.predict_summary())?, "test_auc_tta")?;
        rows.push(Row {
            section: "image_level",
            name: format!("{strategy}+tta"),
            values: vals.into_iter().filter_map(|(_, v)| v).collect(),
        });
    }

    let mut agg: Vec<(AggregationStrategy, Vec<f64>)> = Vec::new();
    let mut referral: std::collections::BTreeMap<(String, String), Vec<f64>> = Default::default();
    for &seed in &ctx.cfg.seeds {
        let path = layout.aggregated(seed);
        if path.exists() {
            let preds = aggregated_from_csv(&read_to_string(&path)?)?;
            let present: BTreeSet<AggregationStrategy> = preds.iter().map(|p| p.strategy).collect();
            for s in present {
                let auc = strategy_auc(&preds, s)?;
                match agg.iter_mut().find(|(k, _)| *k == s) {
                    Some((_, v)) => v.push(auc),
                    None => agg.push((s, vec![auc])),
                }
            }
        }
        let (csv_path, _) = layout.referral(&format!("seed_{seed}"));
        if csv_path.exists() {
            let text = read_to_string(&csv_path)?;
            for rec in csv_reader(&text).records() {
                let rec = rec?;
                if let Ok(a) = rec[3].parse::<f64>() {
                    referral.entry((rec[0].to_string(), rec[1].to_string())).or_default().push(a);
                }
            }
        }
    }
    agg.sort_by_key(|(s, _)| *s);
    for (s, values) in agg {
        rows.push(Row {
            section: "individual_level",
            name: s.as_str().to_string(),
            values,
        });
    }
    let mut ref_keys: Vec<_> = referral.into_iter().collect();
    ref_keys.sort_by(|a, b| {
        a.0 .0.cmp(&b.0 .0).then_with(|| {
            let fa: f64 = a.0 .1.parse().unwrap_or(0.0);
            let fb: f64 = b.0 .1.parse().unwrap_or(0.0);
            fa.total_cmp(&fb)
        })
    });
    for ((measure, q), values) in ref_keys {
        rows.push(Row {
            section: "referral",
            name: format!("{measure}@{q}"),
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no result files to report on".into()));
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (m, s) = r.stats();
            vec![
                r.section.to_string(),
                r.name.clone(),
                r.values.len().to_string(),
                m.to_string(),
                s.to_string(),
            ]
        })
        .collect();
    let (csv_path, md_path) = layout.report();
    write_atomic(
        &csv_path,
        &csv_bytes(&ctx.provenance, &["section", "name", "n", "mean_auc", "std_auc"], &csv_rows),
    )?;

    let mut md = format!("<!-- {} -->\n", ctx.provenance);
    for (section, title) in [
        ("image_level", "Image-level ROC-AUC"),
        ("individual_level", "Individual-level ROC-AUC (test split)"),
        ("referral", "ROC-AUC after referral (measure@fraction)"),
    ] {
        let sel: Vec<&Row> = rows.iter().filter(|r| r.section == section).collect();
        if sel.is_empty() {
            continue;
        }
        let _ = writeln!(md, "\n## {title}\n\n| name | n | ROC-AUC [±std] |\n|---|---|---|");
        for r in sel {
            let (m, s) = r.stats();
            let _ = writeln!(md, "| {} | {} | {m:.3} [±{s:.3}] |", r.name, r.values.len());
        }
    }
    write_atomic(&md_path, md.as_bytes())?;
    Ok(())
}
