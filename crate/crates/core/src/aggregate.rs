//! Individual-level scores from image-level predictions: eye-mean, eye-max,
//! and logistic regression / Gaussian naive Bayes on a 12-feature summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_model::{Centering, Eye};
use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, finish_csv, Provenance};
use crate::model::sigmoid;
use crate::uncertainty::PredictionRecord;

pub const N_SLOTS: usize = 4;
pub const N_FEATURES: usize = 3 * N_SLOTS;
pub const SLOT_NAMES: [&str; N_SLOTS] = ["l_od", "l_fovea", "r_od", "r_fovea"];

pub fn slot_index(eye: Eye, centering: Centering) -> usize {
    let e = match eye {
        Eye::Left => 0,
        Eye::Right => 2,
    };
    e + match centering {
        Centering::OpticDisc => 0,
        Centering::Fovea => 1,
    }
}

/// Image predictions of one individual, by (eye, centering) slot in
/// [`SLOT_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndividualSlots {
    pub label: u8,
    pub slots: [Vec<f64>; N_SLOTS],
}

impl IndividualSlots {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.slots.iter().flatten().copied()
    }

    pub fn eye(&self, eye: Eye) -> impl Iterator<Item = f64> + '_ {
        let first = slot_index(eye, Centering::OpticDisc);
        self.slots[first..first + 2].iter().flatten().copied()
    }

    pub fn n_images(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }
}

/// Partitions image predictions (TTA means) by individual and slot,
/// keeping input order within a slot.
pub fn group_by_individual(records: &[PredictionRecord]) -> Result<BTreeMap<String, IndividualSlots>> {
    let mut out: BTreeMap<String, IndividualSlots> = BTreeMap::new();
    for r in records {
        if r.individual_id.is_empty() {
            return Err(Error::UnknownIndividual(r.image_id.clone()));
        }
        let entry = out.entry(r.individual_id.clone()).or_insert_with(|| IndividualSlots {
            label: r.label,
            ..Default::default()
        });
        if entry.label != r.label {
            return Err(Error::LabelConflict {
                individual: r.individual_id.clone(),
                first: entry.label,
                second: r.label,
            });
        }
        entry.slots[slot_index(r.eye, r.centering)].push(r.mean);
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn no_images(id: &str) -> Error {
    Error::NoImages(id.to_string())
}

/// Mean of the per-eye means over the eyes that have images.
pub fn eye_mean_aggregate(id: &str, ind: &IndividualSlots) -> Result<f64> {
    let per_eye: Vec<f64> = [Eye::Left, Eye::Right]
        .into_iter()
        .filter_map(|e| mean(ind.eye(e)))
        .collect();
    mean(per_eye.into_iter()).ok_or_else(|| no_images(id))
}

/// Mean over all of the individual's images, both eyes pooled.
pub fn image_mean_aggregate(id: &str, ind: &IndividualSlots) -> Result<f64> {
    mean(ind.all()).ok_or_else(|| no_images(id))
}

pub fn eye_max_aggregate(id: &str, ind: &IndividualSlots) -> Result<f64> {
    ind.all().reduce(f64::max).ok_or_else(|| no_images(id))
}

/// (mean, population variance, count) per slot with average padding.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualFeatureVector {
    pub individual_id: String,
    pub label: u8,
    pub features: [f64; N_FEATURES],
    /// Slot indices whose mean and variance were copied from another slot.
    pub padded_slots: Vec<usize>,
}

impl IndividualFeatureVector {
    pub fn slot(&self, s: usize) -> (f64, f64, f64) {
        (self.features[3 * s], self.features[3 * s + 1], self.features[3 * s + 2])
    }
}

/// Builds the 12 features. Missing slots are padded in two passes: within
/// an eye from the other centering, then a fully missing eye from the other
/// eye slot-to-slot. Counts are not padded.
pub fn extract_features(id: &str, ind: &IndividualSlots) -> Result<IndividualFeatureVector> {
    if ind.n_images() == 0 {
        return Err(no_images(id));
    }
    let mut stats: [Option<(f64, f64)>; N_SLOTS] = [None; N_SLOTS];
    let mut counts = [0usize; N_SLOTS];
    for (s, preds) in ind.slots.iter().enumerate() {
        counts[s] = preds.len();
        if let Some(m) = mean(preds.iter().copied()) {
            let v = preds.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / preds.len() as f64;
            stats[s] = Some((m, v));
        }
    }
    let mut padded = Vec::new();
    for eye_base in [0, 2] {
        for (s, other) in [(eye_base, eye_base + 1), (eye_base + 1, eye_base)] {
            if stats[s].is_none() && counts[other] > 0 {
                stats[s] = stats[other];
                padded.push(s);
            }
        }
    }
    for (eye_base, other_base) in [(0, 2), (2, 0)] {
        if stats[eye_base].is_none() {
            for j in 0..2 {
                stats[eye_base + j] = stats[other_base + j];
                padded.push(eye_base + j);
            }
        }
    }
    padded.sort_unstable();
    let mut features = [0.0; N_FEATURES];
    for s in 0..N_SLOTS {
        let (m, v) = stats[s].expect("at least one slot is present");
        features[3 * s] = m;
        features[3 * s + 1] = v;
        features[3 * s + 2] = counts[s] as f64;
    }
    Ok(IndividualFeatureVector {
        individual_id: id.to_string(),
        label: ind.label,
        features,
        padded_slots: padded,
    })
}

pub fn feature_columns() -> Vec<String> {
    SLOT_NAMES
        .iter()
        .flat_map(|s| ["m", "v", "c"].map(|p| format!("{p}_{s}")))
        .collect()
}

pub fn features_to_csv(rows: &[IndividualFeatureVector], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut w = csv_writer(provenance);
    let mut header = vec!["individual_id".to_string(), "label".to_string()];
    header.extend(feature_columns());
    header.push("padded".into());
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.individual_id.clone(), r.label.to_string()];
        row.extend(r.features.iter().map(|f| f.to_string()));
        row.push(
            r.padded_slots
                .iter()
                .map(|&s| SLOT_NAMES[s])
                .collect::<Vec<_>>()
                .join(";"),
        );
        w.write_record(&row)?;
    }
    finish_csv(w)
}

pub fn features_from_csv(text: &str) -> Result<Vec<IndividualFeatureVector>> {
    let mut reader = csv_reader(text);
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| Error::MissingField {
            field: field.to_string(),
            row: row + 1,
        };
        if rec.len() != N_FEATURES + 3 {
            return Err(bad("padded"));
        }
        let mut features = [0.0; N_FEATURES];
        for (j, f) in features.iter_mut().enumerate() {
            *f = rec[j + 2].parse().map_err(|_| bad(&feature_columns()[j]))?;
        }
        let padded_slots = rec[N_FEATURES + 2]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| SLOT_NAMES.iter().position(|n| *n == s).ok_or_else(|| bad("padded")))
            .collect::<Result<_>>()?;
        out.push(IndividualFeatureVector {
            individual_id: rec[0].to_string(),
            label: match &rec[1] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("label")),
            },
            features,
            padded_slots,
        });
    }
    Ok(out)
}

fn check_both_classes(rows: &[IndividualFeatureVector]) -> Result<()> {
    let pos = rows.iter().filter(|r| r.label == 1).count();
    if pos == 0 || pos == rows.len() {
        return Err(Error::OneClassOnly);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            iterations: 2000,
            l2: 1e-3,
        }
    }
}

/// Logistic regression on per-column standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: [f64; N_FEATURES],
    pub bias: f64,
    pub center: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
    pub config: LogRegConfig,
}

impl LogRegModel {
    fn standardize(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.center[j]) / self.scale[j])
    }

    pub fn predict(&self, fv: &IndividualFeatureVector) -> f64 {
        let z = self.standardize(&fv.features);
        sigmoid(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }
}

/// Full-batch gradient descent on mean BCE + `l2 * |w|^2`. Columns with zero
/// spread are centered but not scaled.
pub fn fit_logreg(rows: &[IndividualFeatureVector], config: &LogRegConfig) -> Result<LogRegModel> {
    check_both_classes(rows)?;
    let n = rows.len() as f64;
    let mut center = [0.0; N_FEATURES];
    let mut scale = [1.0; N_FEATURES];
    for j in 0..N_FEATURES {
        let m = rows.iter().map(|r| r.features[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r.features[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        center[j] = m;
        if sd > 1e-12 {
            scale[j] = sd;
        }
    }
    let mut model = LogRegModel {
        weights: [0.0; N_FEATURES],
        bias: 0.0,
        center,
        scale,
        config: *config,
    };
    let xs: Vec<[f64; N_FEATURES]> = rows.iter().map(|r| model.standardize(&r.features)).collect();
    for _ in 0..config.iterations {
        let mut gw = [0.0; N_FEATURES];
        let mut gb = 0.0;
        for (x, r) in xs.iter().zip(rows) {
            let z = model.bias + x.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>();
            let err = sigmoid(z) - f64::from(r.label);
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        model.bias -= config.lr * gb / n;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.lr * (g / n + 2.0 * config.l2 * *w);
        }
    }
    Ok(model)
}

pub const GNB_VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GnbModel {
    /// Class priors, index = label.
    pub priors: [f64; 2],
    pub means: [[f64; N_FEATURES]; 2],
    pub variances: [[f64; N_FEATURES]; 2],
}

impl GnbModel {
    fn log_joint(&self, x: &[f64; N_FEATURES], c: usize) -> f64 {
        let ll: f64 = (0..N_FEATURES)
            .map(|j| {
                let v = self.variances[c][j];
                let d = x[j] - self.means[c][j];
                -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v)
            })
            .sum();
        self.priors[c].ln() + ll
    }

    /// Posterior probability of class 1.
    pub fn predict(&self, fv: &IndividualFeatureVector) -> f64 {
        let l0 = self.log_joint(&fv.features, 0);
        let l1 = self.log_joint(&fv.features, 1);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        e1 / (e0 + e1)
    }
}

pub fn fit_gnb(rows: &[IndividualFeatureVector], variance_floor: f64) -> Result<GnbModel> {
    check_both_classes(rows)?;
    let mut model = GnbModel {
        priors: [0.0; 2],
        means: [[0.0; N_FEATURES]; 2],
        variances: [[0.0; N_FEATURES]; 2],
    };
    for c in 0..2 {
        let members: Vec<&IndividualFeatureVector> = rows.iter().filter(|r| usize::from(r.label) == c).collect();
        let k = members.len() as f64;
        model.priors[c] = k / rows.len() as f64;
        for j in 0..N_FEATURES {
            let m = members.iter().map(|r| r.features[j]).sum::<f64>() / k;
            let v = members.iter().map(|r| (r.features[j] - m).powi(2)).sum::<f64>() / k;
            model.means[c][j] = m;
            model.variances[c][j] = v.max(variance_floor);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    EyeMean,
    EyeMax,
    LogReg,
    Gnb,
    ImageMean,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 5] = [
        AggregationStrategy::EyeMean,
        AggregationStrategy::EyeMax,
        AggregationStrategy::LogReg,
        AggregationStrategy::Gnb,
        AggregationStrategy::ImageMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationStrategy::EyeMean => "eye_mean",
            AggregationStrategy::EyeMax => "eye_max",
            AggregationStrategy::LogReg => "logreg",
            AggregationStrategy::Gnb => "gnb",
            AggregationStrategy::ImageMean => "image_mean",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, AggregationStrategy::LogReg | AggregationStrategy::Gnb)
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::BadEnum {
                field: "strategy",
                value: s.to_string(),
            })
    }
}

/// One individual-level score.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub individual_id: String,
    pub label: u8,
    pub strategy: AggregationStrategy,
    pub score: f64,
}

/// Fitted learned aggregators.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedAggregators {
    pub logreg: LogRegModel,
    pub gnb: GnbModel,
}

impl LearnedAggregators {
    pub fn fit(rows: &[IndividualFeatureVector], logreg: &LogRegConfig) -> Result<Self> {
        Ok(Self {
            logreg: fit_logreg(rows, logreg)?,
            gnb: fit_gnb(rows, GNB_VARIANCE_FLOOR)?,
        })
    }
}

/// Scores every individual with each requested strategy. Learned
/// strategies need `learned`.
pub fn aggregate(
    groups: &BTreeMap<String, IndividualSlots>,
    strategies: &[AggregationStrategy],
    learned: Option<&LearnedAggregators>,
) -> Result<Vec<AggregatedPrediction>> {
    let mut out = Vec::new();
    for &strategy in strategies {
        for (id, ind) in groups {
            let score = match strategy {
                AggregationStrategy::EyeMean => eye_mean_aggregate(id, ind)?,
                AggregationStrategy::EyeMax => eye_max_aggregate(id, ind)?,
                AggregationStrategy::ImageMean => image_mean_aggregate(id, ind)?,
                AggregationStrategy::LogReg | AggregationStrategy::Gnb => {
                    let l = learned.ok_or_else(|| {
                        Error::InvalidConfig(format!("{} needs fitted aggregators", strategy.as_str()))
                    })?;
                    let fv = extract_features(id, ind)?;
                    if strategy == AggregationStrategy::LogReg {
                        l.logreg.predict(&fv)
                    } else {
                        l.gnb.predict(&fv)
                    }
                }
            };
            out.push(AggregatedPrediction {
                individual_id: id.clone(),
                label: ind.label,
                strategy,
                score,
            });
        }
    }
    Ok(out)
}

/// Individual-level ROC-AUC of one strategy.
pub fn strategy_auc(preds: &[AggregatedPrediction], strategy: AggregationStrategy) -> Result<f64> {
    let (s, l): (Vec<f64>, Vec<u8>) = preds
        .iter()
        .filter(|p| p.strategy == strategy)
        .map(|p| (p.score, p.label))
        .unzip();
    crate::metrics::roc_auc(&s, &l)
}

pub fn aggregated_to_csv(preds: &[AggregatedPrediction], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut w = csv_writer(provenance);
    w.write_record(["individual_id", "label", "strategy", "score"])?;
    for p in preds {
        w.write_record([
            p.individual_id.clone(),
            p.label.to_string(),
            p.strategy.as_str().to_string(),
            p.score.to_string(),
        ])?;
    }
    finish_csv(w)
}

pub fn aggregated_from_csv(text: &str) -> Result<Vec<AggregatedPrediction>> {
    let mut reader = csv_reader(text);
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| Error::MissingField {
            field: field.to_string(),
            row: row + 1,
        };
        if rec.len() != 4 {
            return Err(bad("score"));
        }
        out.push(AggregatedPrediction {
            individual_id: rec[0].to_string(),
            label: match &rec[1] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad("label")),
            },
            strategy: rec[2].parse()?,
            score: rec[3].parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(out)
}
