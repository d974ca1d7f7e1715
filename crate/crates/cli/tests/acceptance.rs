//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --release -p fundus-t2d-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use fundus_t2d::aggregate::{
    aggregate, eye_mean_aggregate, extract_features, group_by_individual, strategy_auc, AggregationStrategy,
    IndividualSlots, LearnedAggregators, LogRegConfig,
};
use fundus_t2d::augment::{apply_augmentation, flip_horizontal, flip_vertical, rotate, AugmentParams, AugmentationSpec};
use fundus_t2d::data_model::{split_cohort, CohortManifest, Centering, Eye, SampleMeta, Split};
use fundus_t2d::metrics::{permutation_null, roc_auc};
use fundus_t2d::model::{init_model, ConvBlock, HeadMode, Init, Model, ModelConfig, Targets};
use fundus_t2d::seeding::rng_for;
use fundus_t2d::synthgen::{generate_cohort, latent_bayes_auc, SynthConfig};
use fundus_t2d::train::{
    evaluate_auc, predict_center, train_strategy, Dataset, LrSchedule, SplitData, Strategy, TrainConfig, TrainInputs,
};
use fundus_t2d::uncertainty::{
    pearson, referral_curve, referral_curve_from_scores, tta_predict, tta_predict_dataset, uncertainty_score,
    PredictionDistribution, PredictionRecord, UncertaintyMeasure,
};
use fundus_t2d::ImageTensor;

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const CROP: usize = 48;
const RESIZE: usize = 64;
const TTA_K: usize = 30;

#[derive(Default)]
struct Suite {
    failed: Vec<&'static str>,
    total: usize,
}

impl Suite {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        self.total += 1;
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name);
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                num += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    num as f64 / (2 * pairs) as f64
}

fn auc_oracle(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = rng_for(2024, &[1]);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 200 {
        let n = rng.random_range(2..=100);
        let levels = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        done += 1;
        if roc_auc(&scores, &labels).unwrap() != brute_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "auc_oracle",
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatches in 200 tie-containing instances, {secs:.2}s (< 5s)"),
    );
}

fn grad_model(mode: HeadMode, seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: 10,
        in_channels: 3,
        conv_blocks: vec![
            ConvBlock::new(4),
            ConvBlock { out_channels: 5, stride: 1, pool: false },
            ConvBlock { out_channels: 6, stride: 2, pool: true },
        ],
        trunk_feature_dim: 6,
        head_mode: mode,
        init: Init::Random { seed },
    };
    let mut model = init_model(&cfg).unwrap();
    let mut rng = rng_for(seed, &[2]);
    for p in model.params_mut() {
        *p += 0.1 * (2.0 * rng.random::<f64>() - 1.0);
    }
    model
}

fn gradients(s: &mut Suite) {
    let start = Instant::now();
    let h = 1e-4;
    let (lambda, l2) = (0.5, 1e-3);
    let mut worst: f64 = 0.0;
    for (k, mode) in [HeadMode::T2dOnly, HeadMode::BiomarkersOnly, HeadMode::MultiTarget].into_iter().enumerate() {
        let model = grad_model(mode, 40 + k as u64);
        let mut rng = rng_for(41 + k as u64, &[3]);
        let images: Vec<ImageTensor> = (0..3)
            .map(|_| ImageTensor::from_fn(10, 10, 3, |_, _, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let targets = Targets {
            labels: Some(vec![0, 1, 1]),
            biomarkers: Some((0..3).map(|_| std::array::from_fn(|_| rng.random::<f64>() - 0.5)).collect()),
        };
        let loss = |m: &Model| m.gradients(&images, &targets, lambda, l2).unwrap().0.total;
        let (_, grad) = model.gradients(&images, &targets, lambda, l2).unwrap();
        for _ in 0..50 {
            let i = rng.random_range(0..model.n_params());
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.params_mut()[i] += h;
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((grad[i] - fd).abs() / (grad[i].abs() + 1e-8));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "gradient_correctness",
        worst < 1e-4 && secs < 30.0,
        format!("worst relative error {worst:.2e} over 3 heads x 50 coordinates (< 1e-4), {secs:.2}s (< 30s)"),
    );
}

fn random_manifest(rng: &mut impl Rng) -> CohortManifest {
    let n = rng.random_range(1..=300);
    let mut samples = Vec::new();
    for i in 0..n {
        let label = u8::from(rng.random_bool(0.35));
        for j in 0..rng.random_range(1..=5) {
            samples.push(SampleMeta {
                image_id: format!("I{i}_{j}"),
                individual_id: format!("I{i}"),
                eye: if j % 2 == 0 { Eye::Left } else { Eye::Right },
                centering: Centering::OpticDisc,
                label,
                biomarkers: [0.0; 4],
                path: String::new(),
            });
        }
    }
    CohortManifest::from_samples(samples).unwrap()
}

fn split_hygiene(s: &mut Suite) {
    let mut rng = rng_for(77, &[]);
    let (mut leaks, mut size_errors) = (0, 0);
    for c in 0..50u64 {
        let manifest = random_manifest(&mut rng);
        let a: f64 = rng.random_range(0.1..1.0);
        let b: f64 = rng.random_range(0.1..1.0);
        let d: f64 = rng.random_range(0.1..1.0);
        let ratios = [a / (a + b + d), b / (a + b + d), d / (a + b + d)];
        let split = split_cohort(&manifest, ratios, c).unwrap();
        for id in manifest.individual_ids() {
            let sides: std::collections::BTreeSet<_> = manifest
                .samples_of(id)
                .map(|smp| split.split_of(&smp.individual_id))
                .collect();
            if sides.len() != 1 || sides.contains(&None) {
                leaks += 1;
            }
        }
        let n = manifest.n_individuals() as f64;
        let sizes = split.sizes();
        if sizes.iter().sum::<usize>() != manifest.n_individuals()
            || sizes.iter().zip(ratios).any(|(&k, r)| (k as f64 - n * r).abs() >= 1.0)
        {
            size_errors += 1;
        }
    }
    s.record(
        "split_hygiene",
        leaks == 0 && size_errors == 0,
        format!("50 cohorts: {leaks} leaking individuals, {size_errors} cohorts with a split size off its quota by >= 1"),
    );
}

fn augmentation_algebra(s: &mut Suite) {
    let mut rng = rng_for(5, &[]);
    let img = ImageTensor::from_fn(17, 17, 3, |_, _, _| rng.random::<f64>() * 4.0 - 2.0);
    let identity = apply_augmentation(&img, &AugmentationSpec::identity()) == img;
    let flips = flip_horizontal(&flip_horizontal(&img)) == img && flip_vertical(&flip_vertical(&img)) == img;
    let mut r = img.clone();
    let mut period_ok = true;
    for k in 1..=4 {
        r = rotate(&r, 90.0);
        period_ok &= (k == 4) == (r == img);
    }
    let model = init_model(&ModelConfig {
        input_size: 16,
        conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(8)],
        trunk_feature_dim: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    let tta_zero = (0..5).all(|i| {
        let im = ImageTensor::from_fn(20, 20, 3, |y, x, c| ((y * 3 + x * 5 + c + i) % 7) as f64 - 3.0);
        tta_predict(&model, &im, &format!("img{i}"), 8, &AugmentParams::none(), 9, 16)
            .unwrap()
            .variance
            == 0.0
    });
    s.record(
        "augmentation_algebra",
        identity && flips && period_ok && tta_zero,
        format!(
            "identity bitwise {identity}, flip involutions {flips}, 90deg period exactly 4 {period_ok}, identity TTA variance 0 {tta_zero}"
        ),
    );
}

fn desk_synth(latent_shift: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n_individuals: 600,
        latent_shift,
        images_per_eye: [1, 2],
        image_size: 64,
        seed,
        ..SynthConfig::default()
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        batch_size: 18,
        epochs: 10,
        lr0: 1e-3,
        lr_schedule: LrSchedule::Step {
            factor: 0.5,
            every_n_epochs: 10,
        },
        l2: 1e-4,
        lambda_bio: 0.25,
        ..TrainConfig::default()
    }
}

fn desk_augment() -> AugmentParams {
    AugmentParams {
        translate_px: 2,
        ..AugmentParams::default()
    }
}

fn load_cohort(cfg: &SynthConfig, dir: &Path) -> SplitData {
    let manifest = generate_cohort(cfg, dir).unwrap();
    let split = split_cohort(&manifest, [0.6, 0.2, 0.2], cfg.seed).unwrap();
    SplitData::load(&manifest, &split, dir, RESIZE).unwrap()
}

struct Run {
    model: Model,
    test_auc: f64,
    secs: f64,
}

fn train_runs(data: &SplitData, strategy: &Strategy) -> Vec<Run> {
    let aug = desk_augment();
    let inputs = TrainInputs {
        train: &data.train,
        validation: &data.validation,
        augment: &aug,
        crop_size: CROP,
    };
    let base = ModelConfig {
        input_size: CROP,
        ..ModelConfig::default()
    };
    DESK_SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let cfg = TrainConfig { seed, ..desk_train() };
            let out = train_strategy(strategy, &base, inputs, &cfg, None).unwrap();
            let test_auc = evaluate_auc(&out.best_model, &data.test, CROP).unwrap();
            Run {
                model: out.best_model,
                test_auc,
                secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn aucs(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.test_auc).collect()
}

fn end_to_end(s: &mut Suite, runs: &[Run]) {
    let a = aucs(runs);
    let bound = latent_bayes_auc(1.0);
    let m = mean(&a);
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    s.record(
        "end_to_end_learning",
        m >= 0.85 && m <= bound + 0.02 && slowest < 600.0,
        format!(
            "MULTI_TARGET test AUC {} mean {m:.4} (>= 0.85, <= Bayes {bound:.4} + 0.02), slowest seed {slowest:.0}s (< 600s)",
            fmt(&a)
        ),
    );
}

fn group_ids(ds: &Dataset) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    ds.samples
        .iter()
        .map(|smp| {
            let next = ids.len();
            *ids.entry(smp.individual_id.as_str()).or_insert(next)
        })
        .collect()
}

fn null_control(s: &mut Suite) {
    let dir = tempfile::tempdir().unwrap();
    let data = load_cohort(&desk_synth(0.0, 12), dir.path());
    let runs = train_runs(&data, &Strategy::MtlRandom);
    let labels = data.test.labels();
    let groups = group_ids(&data.test);
    let mut details = Vec::new();
    let mut all_in = true;
    for (run, seed) in runs.iter().zip(DESK_SEEDS) {
        let scores = predict_center(&run.model, &data.test, CROP).unwrap().t2d_prob.unwrap();
        let (m, sd) = permutation_null(&scores, &labels, &groups, 1000, seed).unwrap();
        let inside = (run.test_auc - m).abs() <= 3.0 * sd;
        all_in &= inside;
        details.push(format!("{:.4} in {:.4}±{:.4}", run.test_auc, m, 3.0 * sd));
    }
    s.record(
        "null_signal_control",
        all_in,
        format!("latent_shift 0, test AUC vs individual-permutation null 3 sigma: {}", details.join("; ")),
    );
}

/// Heteroscedastic oracle: the logit is the class offset plus noise of a
/// known, per-image standard deviation.
fn oracle_curves(seed: u64, fractions: &[f64]) -> [Vec<f64>; 2] {
    let mut rng = rng_for(seed, &[31]);
    let n = 1000;
    let normal = rand_distr::StandardNormal;
    let mut ids = Vec::new();
    let (mut means, mut var, mut prox_unc, mut labels) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let y = u8::from(rng.random_bool(0.5));
        let sigma: f64 = rng.random_range(0.25..2.5);
        let eps: f64 = rng.sample(normal);
        let z = if y == 1 { 1.0 } else { -1.0 } + sigma * eps;
        let m = 1.0 / (1.0 + (-z).exp());
        ids.push(format!("{i:05}"));
        means.push(m);
        var.push(sigma * sigma);
        prox_unc.push(0.5 - (m - 0.5).abs());
        labels.push(y);
    }
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let curve = |unc: &[f64], measure| {
        referral_curve_from_scores(&ids, &means, unc, &labels, fractions, measure)
            .unwrap()
            .auc
            .into_iter()
            .map(|a| a.unwrap())
            .collect()
    };
    [curve(&var, UncertaintyMeasure::Variance), curve(&prox_unc, UncertaintyMeasure::Proximity)]
}

struct DeskTta {
    /// Per seed, TTA distributions for train, validation and test.
    dists: Vec<[Vec<PredictionDistribution>; 3]>,
}

fn desk_tta(data: &SplitData, runs: &[Run]) -> DeskTta {
    let aug = desk_augment();
    let dists = runs
        .iter()
        .zip(DESK_SEEDS)
        .map(|(run, seed)| {
            [Split::Train, Split::Validation, Split::Test]
                .map(|sp| tta_predict_dataset(&run.model, data.get(sp), TTA_K, &aug, 1000 + seed, CROP).unwrap())
        })
        .collect();
    DeskTta { dists }
}

fn referral(s: &mut Suite, data: &SplitData, tta: &DeskTta) {
    let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let mut sums = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for seed in 0..20 {
        for (acc, c) in sums.iter_mut().zip(oracle_curves(seed, &grid)) {
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v / 20.0);
        }
    }
    let monotone = sums.iter().all(|c| c.windows(2).all(|w| w[1] >= w[0]));

    let labels = data.test.labels();
    let mut improved = [0; 2];
    let mut pairs = [vec![], vec![]];
    let mut corr = Vec::new();
    for seed_dists in &tta.dists {
        let test = &seed_dists[2];
        for (k, measure) in UncertaintyMeasure::ALL.into_iter().enumerate() {
            let c = referral_curve(test, &labels, &[0.0, 0.2], measure).unwrap();
            let (a0, a2) = (c.auc[0].unwrap(), c.auc[1].unwrap());
            improved[k] += usize::from(a2 >= a0);
            pairs[k].push(format!("{a0:.4}->{a2:.4}"));
        }
        let v: Vec<f64> = test.iter().map(|d| uncertainty_score(d, UncertaintyMeasure::Variance)).collect();
        let p: Vec<f64> = test.iter().map(|d| uncertainty_score(d, UncertaintyMeasure::Proximity)).collect();
        corr.push(pearson(&v, &p).unwrap_or(f64::NAN));
    }
    s.record(
        "referral_property",
        monotone && improved.iter().all(|&k| k >= 2),
        format!(
            "oracle mean AUC over 20 seeds VARIANCE {} PROXIMITY {} non-decreasing {monotone}; desk AUC@0->AUC@0.2 VARIANCE [{}] ({}/3), PROXIMITY [{}] ({}/3); score correlation {}",
            fmt(&sums[0]),
            fmt(&sums[1]),
            pairs[0].join(", "),
            improved[0],
            pairs[1].join(", "),
            improved[1],
            fmt(&corr)
        ),
    );
}

/// Two-eye noise model: each image prediction is the individual's latent
/// score plus independent noise.
fn two_eye_trial(seed: u64) -> (f64, f64) {
    let mut rng = rng_for(seed, &[41]);
    let normal = rand_distr::StandardNormal;
    let (mut img_scores, mut img_labels) = (vec![], vec![]);
    let (mut ind_scores, mut ind_labels) = (vec![], vec![]);
    for i in 0..300 {
        let y = u8::from(rng.random_bool(0.35));
        let latent = f64::from(y) * 1.0 + rng.sample::<f64, _>(normal);
        let mut ind = IndividualSlots {
            label: y,
            ..Default::default()
        };
        for slot in 0..4 {
            for _ in 0..rng.random_range(0..=1) + usize::from(slot % 2 == 0) {
                let z = latent + 1.5 * rng.sample::<f64, _>(normal);
                let p = 1.0 / (1.0 + (-z).exp());
                ind.slots[slot].push(p);
                img_scores.push(p);
                img_labels.push(y);
            }
        }
        ind_scores.push(eye_mean_aggregate(&format!("{i}"), &ind).unwrap());
        ind_labels.push(y);
    }
    (
        roc_auc(&img_scores, &img_labels).unwrap(),
        roc_auc(&ind_scores, &ind_labels).unwrap(),
    )
}

fn records(ds: &Dataset, dists: &[PredictionDistribution]) -> Vec<PredictionRecord> {
    ds.samples.iter().zip(dists).map(|(m, d)| PredictionRecord::new(m, d)).collect()
}

fn aggregation(s: &mut Suite, data: &SplitData, tta: &DeskTta) {
    let trials: Vec<(f64, f64)> = (0..20).map(two_eye_trial).collect();
    let wins = trials.iter().filter(|(img, ind)| ind > img).count();

    let mut by_strategy: BTreeMap<AggregationStrategy, Vec<f64>> = BTreeMap::new();
    for seed_dists in &tta.dists {
        let fit_records: Vec<PredictionRecord> = records(&data.train, &seed_dists[0])
            .into_iter()
            .chain(records(&data.validation, &seed_dists[1]))
            .collect();
        let fit_groups = group_by_individual(&fit_records).unwrap();
        let rows: Vec<_> = fit_groups.iter().map(|(id, g)| extract_features(id, g).unwrap()).collect();
        let learned = LearnedAggregators::fit(&rows, &LogRegConfig::default()).unwrap();
        let test_groups = group_by_individual(&records(&data.test, &seed_dists[2])).unwrap();
        let preds = aggregate(&test_groups, &AggregationStrategy::ALL, Some(&learned)).unwrap();
        for strategy in AggregationStrategy::ALL {
            by_strategy.entry(strategy).or_default().push(strategy_auc(&preds, strategy).unwrap());
        }
    }
    let m = |k: AggregationStrategy| mean(&by_strategy[&k]);
    let eye_max = m(AggregationStrategy::EyeMax);
    let learned_ok = m(AggregationStrategy::LogReg) >= eye_max - 0.02 && m(AggregationStrategy::Gnb) >= eye_max - 0.02;
    let detail: Vec<String> = by_strategy
        .iter()
        .map(|(k, v)| format!("{} {} mean {:.4}", k.as_str(), fmt(v), mean(v)))
        .collect();
    s.record(
        "aggregation_property",
        wins >= 18 && learned_ok,
        format!(
            "two-eye model eye-mean > image-level in {wins}/20 seeds (>= 18); desk individual-level AUC {} (logreg, gnb >= eye_max - 0.02)",
            detail.join("; ")
        ),
    );
}

fn mtl_vs_single(s: &mut Suite, mtl: &[Run], single: &[Run]) {
    let (a, b) = (aucs(mtl), aucs(single));
    let (ma, mb) = (mean(&a), mean(&b));
    s.record(
        "mtl_vs_single_task",
        ma >= mb - 0.01,
        format!("MULTI_TARGET {} mean {ma:.4} vs T2D_ONLY {} mean {mb:.4} (>= T2D_ONLY - 0.01)", fmt(&a), fmt(&b)),
    );
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fundus-t2d"))
}

fn run_cli(args: &[&str], config: &Path, out: &Path) -> bool {
    Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .map(|st| st.success())
        .unwrap_or(false)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY_CONFIG: &str = r#"
seed = 4
seeds = [1, 2]

[synth]
n_individuals = 40

[model]
input_size = 32
conv_blocks = [{ out_channels = 4 }, { out_channels = 8 }]
trunk_feature_dim = 8

[train]
epochs = 2

[tta]
k = 3
"#;

fn fixtures(s: &mut Suite) {
    let ids = ["a", "b", "c", "d", "e", "f"];
    let means = [0.9, 0.8, 0.6, 0.4, 0.2, 0.1];
    let labels = [1, 1, 0, 1, 0, 0];
    let unc = [0.0, 0.1, 0.4, 0.5, 0.1, 0.0];
    let c = referral_curve_from_scores(&ids, &means, &unc, &labels, &[0.0, 1.0 / 3.0], UncertaintyMeasure::Variance)
        .unwrap();
    let lib_referral = (c.auc[0].unwrap() - 8.0 / 9.0).abs() < 1e-12 && c.auc[1] == Some(1.0);

    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("image_id,individual_id,eye,centering,label,k,mean,variance,proximity\n");
    for i in 0..6 {
        csv += &format!("{},{},L,OD,{},1,{},{},{}\n", ids[i], ids[i], labels[i], means[i], unc[i], (means[i] - 0.5f64).abs());
    }
    std::fs::write(dir.path().join("fixture.csv"), csv).unwrap();
    let config = dir.path().join("fixture.toml");
    std::fs::write(
        &config,
        "[referral]\npredictions = \"fixture.csv\"\nfractions = [0.0, 0.3333333333333333]\nmeasures = [\"VARIANCE\"]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let cli_ok = run_cli(&["refer"], &config, &out);
    let cli_referral = cli_ok
        && std::fs::read_to_string(out.join("referral/predictions.csv"))
            .map(|t| t.lines().any(|l| l == "VARIANCE,0.3333333333333333,4,1"))
            .unwrap_or(false);

    let mut ind = IndividualSlots::default();
    ind.slots[1] = vec![0.6, 0.8];
    let fv = extract_features("x", &ind).unwrap();
    let expected = [0.7, 0.01, 0.0, 0.7, 0.01, 2.0, 0.7, 0.01, 0.0, 0.7, 0.01, 0.0];
    let padding = fv.features.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12) && fv.padded_slots == [0, 2, 3];

    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let steps = ["synth", "split", "train", "predict", "refer", "aggregate", "report"];
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    let chain_ok = [&a, &b].iter().all(|out| steps.iter().all(|st| run_cli(&[st], &config, out)));
    let (ta, tb) = (tree(&a), tree(&b));
    let deterministic = chain_ok && !ta.is_empty() && ta == tb;

    s.record(
        "worked_fixtures",
        lib_referral && cli_referral && padding && deterministic,
        format!(
            "6-image referral 8/9 -> 1.0 library {lib_referral} cli {cli_referral}; padding vector {padding}; {} output files byte-identical across reruns {deterministic}",
            ta.len()
        ),
    );
}

fn main() {
    let start = Instant::now();
    let mut s = Suite::default();
    auc_oracle(&mut s);
    gradients(&mut s);
    split_hygiene(&mut s);
    augmentation_algebra(&mut s);
    fixtures(&mut s);

    let dir = tempfile::tempdir().unwrap();
    let desk = load_cohort(&desk_synth(1.0, 11), dir.path());
    let mtl = train_runs(&desk, &Strategy::MtlRandom);
    end_to_end(&mut s, &mtl);
    null_control(&mut s);
    let tta = desk_tta(&desk, &mtl);
    referral(&mut s, &desk, &tta);
    aggregation(&mut s, &desk, &tta);
    let single = train_runs(&desk, &Strategy::Random);
    mtl_vs_single(&mut s, &mtl, &single);

    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        s.total - s.failed.len(),
        s.total,
        start.elapsed().as_secs_f64()
    );
    if !s.failed.is_empty() {
        println!("failed: {}", s.failed.join(", "));
        std::process::exit(1);
    }
}
