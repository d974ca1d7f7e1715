//! Test-time augmentation (TTA) prediction distributions, the two
//! uncertainty measures and referral curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, sample_augmentation, AugmentParams, AugmentationSpec};
use crate::data_model::{Centering, Eye, SampleMeta};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{csv_reader, csv_writer, finish_csv, Provenance};
use crate::metrics::roc_auc;
use crate::model::Model;
use crate::preprocess::center_crop;
use crate::seeding::{hash_str, rng_for};
use crate::train::Dataset;

const STREAM_TTA: u64 = 20;

/// The K TTA predictions of one image with their summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub image_id: String,
    pub replicas: Vec<f64>,
    pub k: usize,
    pub mean: f64,
    /// Population variance (divides by K).
    pub variance: f64,
    /// `|mean - 0.5|`.
    pub proximity: f64,
}

impl PredictionDistribution {
    pub fn from_replicas(image_id: impl Into<String>, replicas: Vec<f64>) -> Result<Self> {
        if replicas.is_empty() {
            return Err(Error::Empty);
        }
        let k = replicas.len();
        // Shifted by the first replica so constant replicas give an exact
        // mean and zero variance.
        let r0 = replicas[0];
        let shift = replicas.iter().map(|r| r - r0).sum::<f64>() / k as f64;
        let mean = r0 + shift;
        let variance = replicas.iter().map(|r| (r - r0 - shift).powi(2)).sum::<f64>() / k as f64;
        Ok(Self {
            image_id: image_id.into(),
            replicas,
            k,
            mean,
            variance,
            proximity: (mean - 0.5).abs(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UncertaintyMeasure {
    Variance,
    Proximity,
}

impl UncertaintyMeasure {
    pub const ALL: [UncertaintyMeasure; 2] = [UncertaintyMeasure::Variance, UncertaintyMeasure::Proximity];

    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintyMeasure::Variance => "VARIANCE",
            UncertaintyMeasure::Proximity => "PROXIMITY",
        }
    }

    /// Score from the summary statistics; higher means more uncertain.
    pub fn score(self, variance: f64, proximity: f64) -> f64 {
        match self {
            UncertaintyMeasure::Variance => variance,
            UncertaintyMeasure::Proximity => 0.5 - proximity,
        }
    }
}

impl std::str::FromStr for UncertaintyMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VARIANCE" => Ok(UncertaintyMeasure::Variance),
            "PROXIMITY" => Ok(UncertaintyMeasure::Proximity),
            _ => Err(Error::BadEnum {
                field: "measure",
                value: s.to_string(),
            }),
        }
    }
}

pub fn uncertainty_score(dist: &PredictionDistribution, measure: UncertaintyMeasure) -> f64 {
    measure.score(dist.variance, dist.proximity)
}

/// The augmentation specs of the K replicas of one image. Replica `j` does
/// not depend on K.
pub fn tta_specs(params: &AugmentParams, k: usize, seed: u64, image_id: &str) -> Vec<AugmentationSpec> {
    let mut rng = rng_for(seed, &[STREAM_TTA, hash_str(image_id)]);
    (0..k).map(|_| sample_augmentation(params, &mut rng)).collect()
}

/// K augmented, center-cropped forward passes of one prepared image.
pub fn tta_predict(
    model: &Model,
    image: &ImageTensor,
    image_id: &str,
    k: usize,
    params: &AugmentParams,
    seed: u64,
    crop_size: usize,
) -> Result<PredictionDistribution> {
    if k == 0 {
        return Err(Error::InvalidConfig("TTA needs k >= 1".into()));
    }
    if !model.head_mode().has_t2d() {
        return Err(Error::ModeMismatch("TTA needs a T2D head".into()));
    }
    let inputs = tta_specs(params, k, seed, image_id)
        .iter()
        .map(|spec| center_crop(&apply_augmentation(image, spec), crop_size))
        .collect::<Result<Vec<_>>>()?;
    let replicas = model
        .forward(&inputs)?
        .t2d_prob
        .expect("T2D head checked above");
    PredictionDistribution::from_replicas(image_id, replicas)
}

/// [`tta_predict`] for every image of a dataset, in dataset order.
pub fn tta_predict_dataset(
    model: &Model,
    data: &Dataset,
    k: usize,
    params: &AugmentParams,
    seed: u64,
    crop_size: usize,
) -> Result<Vec<PredictionDistribution>> {
    data.samples
        .iter()
        .zip(&data.images)
        .map(|(s, img)| tta_predict(model, img, &s.image_id, k, params, seed, crop_size))
        .collect()
}

/// Number of items referred at fraction `q` of `n`: `ceil(q n)`. The small
/// guard keeps fractions such as 1/3 from rounding up past the exact count.
pub fn referral_count(n: usize, q: f64) -> usize {
    ((q * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Order in which items are referred: highest uncertainty first, ties by
/// id ascending.
pub fn referral_order(uncertainty: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..uncertainty.len()).collect();
    order.sort_by(|&a, &b| {
        uncertainty[b]
            .total_cmp(&uncertainty[a])
            .then_with(|| ids[a].cmp(ids[b]))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferralCurve {
    pub measure: UncertaintyMeasure,
    pub fractions: Vec<f64>,
    pub retained_n: Vec<usize>,
    /// `None` where the retained set lacks a class.
    pub auc: Vec<Option<f64>>,
}

/// Referral curve from per-item scores (the TTA means) and precomputed
/// uncertainty scores.
pub fn referral_curve_from_scores(
    ids: &[&str],
    means: &[f64],
    uncertainty: &[f64],
    labels: &[u8],
    fractions: &[f64],
    measure: UncertaintyMeasure,
) -> Result<ReferralCurve> {
    let n = ids.len();
    if means.len() != n || uncertainty.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch("referral inputs differ in length".into()));
    }
    if fractions.iter().any(|q| !(0.0..1.0).contains(q)) || fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(
            "referral fractions must be sorted and lie in [0, 1)".into(),
        ));
    }
    let order = referral_order(uncertainty, ids);
    let mut retained_n = Vec::with_capacity(fractions.len());
    let mut auc = Vec::with_capacity(fractions.len());
    for &q in fractions {
        let kept = &order[referral_count(n, q)..];
        let s: Vec<f64> = kept.iter().map(|&i| means[i]).collect();
        let l: Vec<u8> = kept.iter().map(|&i| labels[i]).collect();
        retained_n.push(kept.len());
        auc.push(match roc_auc(&s, &l) {
            Ok(a) => Some(a),
            Err(Error::OneClassOnly) => None,
            Err(e) => return Err(e),
        });
    }
    Ok(ReferralCurve {
        measure,
        fractions: fractions.to_vec(),
        retained_n,
        auc,
    })
}

pub fn referral_curve(
    dists: &[PredictionDistribution],
    labels: &[u8],
    fractions: &[f64],
    measure: UncertaintyMeasure,
) -> Result<ReferralCurve> {
    let ids: Vec<&str> = dists.iter().map(|d| d.image_id.as_str()).collect();
    let means: Vec<f64> = dists.iter().map(|d| d.mean).collect();
    let unc: Vec<f64> = dists.iter().map(|d| uncertainty_score(d, measure)).collect();
    referral_curve_from_scores(&ids, &means, &unc, labels, fractions, measure)
}

/// `{0, 0.05, ..., 0.5}`.
pub fn default_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 20.0).collect()
}

/// One row of the predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub individual_id: String,
    pub eye: Eye,
    pub centering: Centering,
    pub label: u8,
    pub k: usize,
    pub mean: f64,
    pub variance: f64,
    pub proximity: f64,
    pub replicas: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(meta: &SampleMeta, dist: &PredictionDistribution) -> Self {
        Self {
            image_id: meta.image_id.clone(),
            individual_id: meta.individual_id.clone(),
            eye: meta.eye,
            centering: meta.centering,
            label: meta.label,
            k: dist.k,
            mean: dist.mean,
            variance: dist.variance,
            proximity: dist.proximity,
            replicas: dist.replicas.clone(),
        }
    }

    pub fn uncertainty(&self, measure: UncertaintyMeasure) -> f64 {
        measure.score(self.variance, self.proximity)
    }
}

pub const PREDICTION_COLUMNS: [&str; 9] = [
    "image_id",
    "individual_id",
    "eye",
    "centering",
    "label",
    "k",
    "mean",
    "variance",
    "proximity",
];

/// Predictions CSV; `with_replicas` appends columns `r1..rK`.
pub fn predictions_to_csv(
    records: &[PredictionRecord],
    with_replicas: bool,
    provenance: Option<&Provenance>,
) -> Result<Vec<u8>> {
    let k_max = if with_replicas {
        records.iter().map(|r| r.replicas.len()).max().unwrap_or(0)
    } else {
        0
    };
    let mut w = csv_writer(provenance);
    let mut header: Vec<String> = PREDICTION_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=k_max).map(|j| format!("r{j}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.image_id.clone(),
            r.individual_id.clone(),
            r.eye.as_str().to_string(),
            r.centering.as_str().to_string(),
            r.label.to_string(),
            r.k.to_string(),
            r.mean.to_string(),
            r.variance.to_string(),
            r.proximity.to_string(),
        ];
        row.extend((0..k_max).map(|j| r.replicas.get(j).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    finish_csv(w)
}

pub fn predictions_from_csv(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv_reader(text);
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or(Error::MissingField {
            field: name.to_string(),
            row: 0,
        })
    };
    let idx: Vec<usize> = PREDICTION_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let replica_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix('r').is_some_and(|d| d.parse::<usize>().is_ok()))
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let field = |j: usize| rec.get(idx[j]).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j).parse().map_err(|_| Error::MissingField {
                field: PREDICTION_COLUMNS[j].to_string(),
                row,
            })
        };
        let label = match field(4) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::BadEnum {
                    field: "label",
                    value: other.to_string(),
                })
            }
        };
        let replicas = replica_cols
            .iter()
            .filter_map(|&c| rec.get(c).filter(|v| !v.is_empty()))
            .map(|v| {
                v.parse().map_err(|_| Error::MissingField {
                    field: "replica".into(),
                    row,
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(PredictionRecord {
            image_id: field(0).to_string(),
            individual_id: field(1).to_string(),
            eye: field(2).parse()?,
            centering: field(3).parse()?,
            label,
            k: field(5).parse().map_err(|_| Error::MissingField {
                field: "k".into(),
                row,
            })?,
            mean: num(6)?,
            variance: num(7)?,
            proximity: num(8)?,
            replicas,
        });
    }
    Ok(out)
}

/// Referral curve computed from prediction records.
pub fn referral_curve_records(
    records: &[PredictionRecord],
    fractions: &[f64],
    measure: UncertaintyMeasure,
) -> Result<ReferralCurve> {
    let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let means: Vec<f64> = records.iter().map(|r| r.mean).collect();
    let unc: Vec<f64> = records.iter().map(|r| r.uncertainty(measure)).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    referral_curve_from_scores(&ids, &means, &unc, &labels, fractions, measure)
}

/// `measure,fraction,retained_n,auc`; undefined AUCs are written as `NA`.
pub fn referral_to_csv(curves: &[ReferralCurve], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut w = csv_writer(provenance);
    w.write_record(["measure", "fraction", "retained_n", "auc"])?;
    for c in curves {
        for ((q, n), a) in c.fractions.iter().zip(&c.retained_n).zip(&c.auc) {
            w.write_record([
                c.measure.as_str().to_string(),
                q.to_string(),
                n.to_string(),
                a.map_or_else(|| "NA".to_string(), |a| a.to_string()),
            ])?;
        }
    }
    finish_csv(w)
}

/// Line plot of AUC against referral fraction, one polyline per curve.
pub fn referral_svg(curves: &[ReferralCurve], provenance: Option<&Provenance>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let defined = || curves.iter().flat_map(|c| c.auc.iter().flatten().copied());
    let lo = defined().fold(f64::INFINITY, f64::min);
    let hi = defined().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() {
        let pad = ((hi - lo) * 0.1).max(0.005);
        (lo - pad, hi + pad)
    } else {
        (0.0, 1.0)
    };
    let q_max = curves
        .iter()
        .flat_map(|c| c.fractions.iter().copied())
        .fold(0.0, f64::max)
        .max(1e-9);
    let px = |q: f64| M + q / q_max * (W - 2.0 * M);
    let py = |a: f64| H - M - (a - lo) / (hi - lo) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    if let Some(p) = provenance {
        let _ = writeln!(s, "<!-- {p} -->");
    }
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = M,
        bottom = H - M,
        right = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{y}" text-anchor="middle" font-size="12">referral fraction</text>"#,
        x = W / 2.0,
        y = H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{y}" font-size="12" transform="rotate(-90 14 {y})" text-anchor="middle">ROC-AUC</text>"#,
        y = H / 2.0
    );
    for (label, anchor_y) in [(format!("{lo:.3}"), H - M), (format!("{hi:.3}"), M)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{anchor_y}" text-anchor="end" font-size="10">{label}</text>"#,
            x = M - 4.0
        );
    }
    for (label, q) in [("0".to_string(), 0.0), (format!("{q_max}"), q_max)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="middle" font-size="10">{label}</text>"#,
            x = px(q),
            y = H - M + 14.0
        );
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (i, c) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let points: Vec<String> = c
            .fractions
            .iter()
            .zip(&c.auc)
            .filter_map(|(&q, a)| a.map(|a| format!("{:.2},{:.2}", px(q), py(a))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="11" fill="{color}">{name}</text>"#,
            x = W - M - 90.0,
            y = M + 14.0 * (i as f64 + 1.0),
            name = c.measure.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_replicas_have_zero_variance() {
        for v in [0.1, 0.3, 0.7123456789, 1.0 / 3.0] {
            let d = PredictionDistribution::from_replicas("x", vec![v; 30]).unwrap();
            assert_eq!((d.mean, d.variance), (v, 0.0));
        }
    }

    fn fixture() -> (Vec<&'static str>, Vec<f64>, Vec<u8>, Vec<f64>) {
        (
            vec!["a", "b", "c", "d", "e", "f"],
            vec![0.9, 0.8, 0.6, 0.4, 0.2, 0.1],
            vec![1, 1, 0, 1, 0, 0],
            vec![0.0, 0.1, 0.4, 0.5, 0.1, 0.0],
        )
    }

    #[test]
    fn six_image_referral() {
        let (ids, means, labels, unc) = fixture();
        let c = referral_curve_from_scores(&ids, &means, &unc, &labels, &[0.0, 1.0 / 3.0], UncertaintyMeasure::Variance)
            .unwrap();
        assert_eq!(c.retained_n, vec![6, 4]);
        assert!((c.auc[0].unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(c.auc[1], Some(1.0));
    }

    #[test]
    fn zero_fraction_matches_full_auc() {
        let (ids, means, labels, unc) = fixture();
        let c = referral_curve_from_scores(&ids, &means, &unc, &labels, &[0.0], UncertaintyMeasure::Proximity).unwrap();
        assert_eq!(c.auc[0].unwrap(), roc_auc(&means, &labels).unwrap());
    }

    #[test]
    fn ties_refer_by_id_and_degenerate_sets() {
        let ids = ["d", "c", "b", "a"];
        let unc = [0.3; 4];
        assert_eq!(referral_order(&unc, &ids), vec![3, 2, 1, 0]);
        // Refers "a" and "b"; "c" and "d" are both label 0.
        let c = referral_curve_from_scores(&ids, &[0.1, 0.2, 0.3, 0.4], &unc, &[0, 0, 1, 1], &[0.5], UncertaintyMeasure::Variance)
            .unwrap();
        assert_eq!(c.retained_n, vec![2]);
        assert_eq!(c.auc, vec![None]);
    }

    #[test]
    fn referral_counts() {
        assert_eq!(referral_count(6, 1.0 / 3.0), 2);
        assert_eq!(referral_count(10, 0.0), 0);
        assert_eq!(referral_count(10, 0.05), 1);
        assert_eq!(referral_count(10, 0.25), 3);
        assert_eq!(referral_count(100, 0.3), 30);
    }

    #[test]
    fn bad_fractions() {
        let (ids, means, labels, unc) = fixture();
        for f in [vec![1.0], vec![0.3, 0.1], vec![-0.1]] {
            assert!(referral_curve_from_scores(&ids, &means, &unc, &labels, &f, UncertaintyMeasure::Variance).is_err());
        }
    }

    #[test]
    fn distribution_statistics() {
        let d = PredictionDistribution::from_replicas("x", vec![0.0, 1.0]).unwrap();
        assert_eq!((d.mean, d.variance, d.proximity), (0.5, 0.25, 0.0));
        assert_eq!(uncertainty_score(&d, UncertaintyMeasure::Proximity), 0.5);

        let d = PredictionDistribution::from_replicas("x", vec![0.9; 5]).unwrap();
        assert_eq!(uncertainty_score(&d, UncertaintyMeasure::Variance), 0.0);
        assert!((uncertainty_score(&d, UncertaintyMeasure::Proximity) - 0.1).abs() < 1e-12);

        let d = PredictionDistribution::from_replicas("x", vec![0.3]).unwrap();
        assert_eq!((d.k, d.mean, d.variance), (1, 0.3, 0.0));
        assert!(PredictionDistribution::from_replicas("x", vec![]).is_err());
    }

    #[test]
    fn tta_specs_prefix_stable() {
        let p = AugmentParams::default();
        let a = tta_specs(&p, 3, 9, "img");
        let b = tta_specs(&p, 5, 9, "img");
        assert_eq!(a[..], b[..3]);
        assert_ne!(tta_specs(&p, 3, 9, "other"), a);
    }

    #[test]
    fn default_grid() {
        let g = default_fractions();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.15);
        assert_eq!(g[10], 0.5);
    }

    #[test]
    fn predictions_csv_round_trip() {
        let rec = PredictionRecord {
            image_id: "P00001_L0".into(),
            individual_id: "P00001".into(),
            eye: Eye::Left,
            centering: Centering::Fovea,
            label: 1,
            k: 2,
            mean: 0.1 + 0.2,
            variance: 1.0 / 3.0,
            proximity: 0.2,
            replicas: vec![0.25, 0.35],
        };
        let prov = Provenance::new("abc", 3);
        for with in [true, false] {
            let text = String::from_utf8(predictions_to_csv(std::slice::from_ref(&rec), with, Some(&prov)).unwrap()).unwrap();
            let back = predictions_from_csv(&text).unwrap();
            let expect = PredictionRecord {
                replicas: if with { rec.replicas.clone() } else { vec![] },
                ..rec.clone()
            };
            assert_eq!(back, vec![expect]);
        }
    }

    #[test]
    fn referral_csv_marks_undefined() {
        let c = ReferralCurve {
            measure: UncertaintyMeasure::Variance,
            fractions: vec![0.0, 0.5],
            retained_n: vec![4, 2],
            auc: vec![Some(0.75), None],
        };
        let text = String::from_utf8(referral_to_csv(std::slice::from_ref(&c), None).unwrap()).unwrap();
        assert_eq!(text, "measure,fraction,retained_n,auc\nVARIANCE,0,4,0.75\nVARIANCE,0.5,2,NA\n");
        let svg = referral_svg(&[c], None);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn correlation() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.99).abs() < 0.01);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }
}
