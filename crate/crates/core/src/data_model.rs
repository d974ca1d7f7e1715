//! Cohort metadata, manifest validation and the grouped train/validation/test
//! split.
//!
//! Labels are stored per image but T2D is a property of the individual, so a
//! manifest in which one individual carries two labels is rejected. Splits
//! are drawn over individuals, never over images: every image of an
//! individual ends up in the same partition.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, finish_csv, Provenance};

pub const N_BIOMARKERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Centering {
    OpticDisc,
    Fovea,
}

impl Eye {
    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
        }
    }

    pub fn other(self) -> Eye {
        match self {
            Eye::Left => Eye::Right,
            Eye::Right => Eye::Left,
        }
    }
}

impl Centering {
    pub fn as_str(self) -> &'static str {
        match self {
            Centering::OpticDisc => "OD",
            Centering::Fovea => "FOVEA",
        }
    }

    pub fn other(self) -> Centering {
        match self {
            Centering::OpticDisc => Centering::Fovea,
            Centering::Fovea => Centering::OpticDisc,
        }
    }
}

impl FromStr for Eye {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Eye::Left),
            "R" => Ok(Eye::Right),
            _ => Err(Error::BadEnum {
                field: "eye",
                value: s.to_string(),
            }),
        }
    }
}

impl FromStr for Centering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OD" => Ok(Centering::OpticDisc),
            "FOVEA" => Ok(Centering::Fovea),
            _ => Err(Error::BadEnum {
                field: "centering",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Centering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metadata of one fundus image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub image_id: String,
    pub individual_id: String,
    pub eye: Eye,
    pub centering: Centering,
    pub label: u8,
    pub biomarkers: [f64; N_BIOMARKERS],
    pub path: String,
}

/// One manifest row as parsed from CSV, before validation.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct RawRecord {
    pub image_id: Option<String>,
    pub individual_id: Option<String>,
    pub eye: Option<String>,
    pub centering: Option<String>,
    pub label: Option<String>,
    pub bio1: Option<String>,
    pub bio2: Option<String>,
    pub bio3: Option<String>,
    pub bio4: Option<String>,
    pub path: Option<String>,
}

impl From<&SampleMeta> for RawRecord {
    fn from(s: &SampleMeta) -> Self {
        let [b1, b2, b3, b4] = s.biomarkers.map(|b| Some(b.to_string()));
        RawRecord {
            image_id: Some(s.image_id.clone()),
            individual_id: Some(s.individual_id.clone()),
            eye: Some(s.eye.to_string()),
            centering: Some(s.centering.to_string()),
            label: Some(s.label.to_string()),
            bio1: b1,
            bio2: b2,
            bio3: b3,
            bio4: b4,
            path: Some(s.path.clone()),
        }
    }
}

fn required<'a>(value: &'a Option<String>, field: &str, row: usize) -> Result<&'a str> {
    match value.as_deref().map(str::trim) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::MissingField {
            field: field.to_string(),
            row,
        }),
    }
}

fn parse_real(value: &Option<String>, field: &str, row: usize) -> Result<f64> {
    let v = required(value, field, row)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::MissingField {
            field: field.to_string(),
            row,
        }),
    }
}

impl RawRecord {
    fn to_sample(&self, row: usize) -> Result<SampleMeta> {
        let label = match required(&self.label, "label", row)? {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::BadEnum {
                    field: "label",
                    value: other.to_string(),
                })
            }
        };
        Ok(SampleMeta {
            image_id: required(&self.image_id, "image_id", row)?.to_string(),
            individual_id: required(&self.individual_id, "individual_id", row)?.to_string(),
            eye: required(&self.eye, "eye", row)?.parse()?,
            centering: required(&self.centering, "centering", row)?.parse()?,
            label,
            biomarkers: [
                parse_real(&self.bio1, "bio1", row)?,
                parse_real(&self.bio2, "bio2", row)?,
                parse_real(&self.bio3, "bio3", row)?,
                parse_real(&self.bio4, "bio4", row)?,
            ],
            path: required(&self.path, "path", row)?.to_string(),
        })
    }
}

/// A validated collection of samples with an individual index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    samples: Vec<SampleMeta>,
    /// individual id -> indices into `samples`, in manifest order.
    individuals: BTreeMap<String, Vec<usize>>,
}

impl CohortManifest {
    /// Validates already-typed samples.
    pub fn from_samples(samples: Vec<SampleMeta>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut individuals: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::DuplicateImageId(s.image_id.clone()));
            }
            if s.label > 1 {
                return Err(Error::BadEnum {
                    field: "label",
                    value: s.label.to_string(),
                });
            }
            let members = individuals.entry(s.individual_id.clone()).or_default();
            if let Some(&first) = members.first() {
                let first_label = samples[first].label;
                if first_label != s.label {
                    return Err(Error::LabelConflict {
                        individual: s.individual_id.clone(),
                        first: first_label,
                        second: s.label,
                    });
                }
            }
            members.push(i);
        }
        Ok(Self {
            samples,
            individuals,
        })
    }

    pub fn samples(&self) -> &[SampleMeta] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    /// Individual ids in sorted order.
    pub fn individual_ids(&self) -> impl Iterator<Item = &str> {
        self.individuals.keys().map(String::as_str)
    }

    /// Samples of one individual, in manifest order.
    pub fn samples_of<'a>(&'a self, individual_id: &str) -> impl Iterator<Item = &'a SampleMeta> {
        self.individuals
            .get(individual_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.samples[i])
    }

    pub fn label_of(&self, individual_id: &str) -> Option<u8> {
        self.samples_of(individual_id).next().map(|s| s.label)
    }

    /// Manifest CSV bytes, optionally led by a provenance comment.
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
        let mut w = csv_writer(provenance);
        w.write_record(MANIFEST_COLUMNS)?;
        for s in &self.samples {
            let b = s.biomarkers.map(|x| x.to_string());
            w.write_record([
                s.image_id.as_str(),
                s.individual_id.as_str(),
                s.eye.as_str(),
                s.centering.as_str(),
                if s.label == 1 { "1" } else { "0" },
                &b[0],
                &b[1],
                &b[2],
                &b[3],
                s.path.as_str(),
            ])?;
        }
        finish_csv(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        validate_manifest(&parse_manifest_rows(text)?)
    }
}

pub const MANIFEST_COLUMNS: [&str; 10] = [
    "image_id",
    "individual_id",
    "eye",
    "centering",
    "label",
    "bio1",
    "bio2",
    "bio3",
    "bio4",
    "path",
];

/// Parses manifest CSV text into raw records. The header must list exactly
/// the manifest columns, in order.
pub fn parse_manifest_rows(text: &str) -> Result<Vec<RawRecord>> {
    let mut rdr = csv_reader(text);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(MANIFEST_COLUMNS) {
        let missing = MANIFEST_COLUMNS
            .iter()
            .find(|c| !headers.iter().any(|h| h == **c))
            .map(|c| c.to_string())
            .unwrap_or_else(|| "header".to_string());
        return Err(Error::MissingField {
            field: missing,
            row: 0,
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<RawRecord>() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Validates parsed rows into a manifest.
pub fn validate_manifest(rows: &[RawRecord]) -> Result<CohortManifest> {
    let samples = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_sample(i + 1))
        .collect::<Result<Vec<_>>>()?;
    CohortManifest::from_samples(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::BadEnum {
                field: "split",
                value: s.to_string(),
            }),
        }
    }
}

/// Individual-level partition of a cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, individual_id: &str) -> Option<Split> {
        self.assignment.get(individual_id).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in self.assignment.values() {
            sizes[*s as usize] += 1;
        }
        sizes
    }

    pub fn individuals_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
    }

    /// Samples of `manifest` whose individual falls in `split`.
    pub fn samples<'a>(
        &'a self,
        manifest: &'a CohortManifest,
        split: Split,
    ) -> impl Iterator<Item = &'a SampleMeta> {
        manifest
            .samples()
            .iter()
            .filter(move |s| self.split_of(&s.individual_id) == Some(split))
    }

    pub fn to_csv(&self, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
        let mut w = csv_writer(provenance);
        w.write_record(["individual_id", "split"])?;
        for (id, s) in &self.assignment {
            w.write_record([id.as_str(), s.as_str()])?;
        }
        finish_csv(w)
    }

    /// Parses a split file; the seed is taken from its provenance line when
    /// present, 0 otherwise.
    pub fn from_csv(text: &str) -> Result<Self> {
        let seed = crate::io::read_provenance(text).map_or(0, |p| p.seed);
        let mut rdr = csv_reader(text);
        let mut assignment = BTreeMap::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize, name: &str| {
                rec.get(i)
                    .filter(|v| !v.is_empty())
                    .map(str::to_string)
                    .ok_or(Error::MissingField {
                        field: name.to_string(),
                        row: row + 1,
                    })
            };
            let id = field(0, "individual_id")?;
            let split: Split = field(1, "split")?.parse()?;
            assignment.insert(id, split);
        }
        Ok(Self { assignment, seed })
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`; leftover
/// items go to the largest fractional parts, earlier index first on ties.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    // 1e-9 absorbs representation error such as 0.6 * 10 = 5.999...
    let mut sizes = quotas.map(|q| (q + 1e-9).floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must be positive")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must sum to 1")));
    }
    Ok(())
}

fn assign_contiguous(
    ids: &[&str],
    sizes: [usize; 3],
    assignment: &mut BTreeMap<String, Split>,
) {
    let mut it = ids.iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            assignment.insert(id.to_string(), split);
        }
    }
}

/// Seeded individual-level split: shuffle individuals, then cut the
/// shuffled list into contiguous blocks of largest-remainder sizes.
pub fn split_cohort(manifest: &CohortManifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    split_cohort_with(manifest, ratios, seed, false)
}

/// As [`split_cohort`]; with `stratify` the apportionment is done per class
/// so that each split keeps the cohort's class balance.
pub fn split_cohort_with(
    manifest: &CohortManifest,
    ratios: [f64; 3],
    seed: u64,
    stratify: bool,
) -> Result<SplitAssignment> {
    check_ratios(ratios)?;
    if manifest.n_individuals() == 0 {
        return Err(Error::EmptyCohort);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&str> = manifest.individual_ids().collect();
    ids.shuffle(&mut rng);

    let mut assignment = BTreeMap::new();
    if stratify {
        for label in [0u8, 1] {
            let class_ids: Vec<&str> = ids
                .iter()
                .copied()
                .filter(|id| manifest.label_of(id) == Some(label))
                .collect();
            let sizes = largest_remainder(class_ids.len(), ratios);
            assign_contiguous(&class_ids, sizes, &mut assignment);
        }
    } else {
        let sizes = largest_remainder(ids.len(), ratios);
        assign_contiguous(&ids, sizes, &mut assignment);
    }
    Ok(SplitAssignment { assignment, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(image: &str, individual: &str, label: &str) -> RawRecord {
        RawRecord {
            image_id: Some(image.into()),
            individual_id: Some(individual.into()),
            eye: Some("L".into()),
            centering: Some("OD".into()),
            label: Some(label.into()),
            bio1: Some("0.1".into()),
            bio2: Some("-0.2".into()),
            bio3: Some("0".into()),
            bio4: Some("1.5".into()),
            path: Some(format!("img/{image}.png")),
        }
    }

    pub(crate) fn manifest_with(n_individuals: usize, per: usize) -> CohortManifest {
        let rows: Vec<RawRecord> = (0..n_individuals)
            .flat_map(|i| {
                (0..per).map(move |j| {
                    row(&format!("i{i}_{j}"), &format!("p{i:04}"), if i % 3 == 0 { "1" } else { "0" })
                })
            })
            .collect();
        validate_manifest(&rows).unwrap()
    }

    #[test]
    fn label_conflict() {
        let rows = [row("a", "p1", "0"), row("b", "p1", "1")];
        assert!(matches!(validate_manifest(&rows), Err(Error::LabelConflict { .. })));
    }

    #[test]
    fn empty_rows() {
        let m = validate_manifest(&[]).unwrap();
        assert_eq!(m.len(), 0);
        assert_eq!(m.n_individuals(), 0);
    }

    #[test]
    fn four_rows_two_individuals() {
        let rows = [
            row("a", "p1", "0"),
            row("b", "p2", "1"),
            row("c", "p1", "0"),
            row("d", "p2", "1"),
        ];
        let m = validate_manifest(&rows).unwrap();
        assert_eq!(m.n_individuals(), 2);
        assert_eq!(m.samples_of("p1").count(), 2);
        assert_eq!(m.samples_of("p2").count(), 2);
        assert_eq!(m.label_of("p2"), Some(1));
    }

    #[test]
    fn field_errors() {
        let rows = [row("a", "p1", "0"), row("a", "p2", "0")];
        assert!(matches!(validate_manifest(&rows), Err(Error::DuplicateImageId(_))));

        let mut bad = row("a", "p1", "0");
        bad.eye = Some("X".into());
        assert!(matches!(validate_manifest(&[bad]), Err(Error::BadEnum { field: "eye", .. })));

        let mut bad = row("a", "p1", "0");
        bad.centering = Some("MACULA".into());
        assert!(matches!(
            validate_manifest(&[bad]),
            Err(Error::BadEnum { field: "centering", .. })
        ));

        let mut bad = row("a", "p1", "0");
        bad.bio3 = None;
        assert!(matches!(validate_manifest(&[bad]), Err(Error::MissingField { .. })));

        let mut bad = row("a", "p1", "0");
        bad.bio1 = Some("abc".into());
        assert!(matches!(validate_manifest(&[bad]), Err(Error::MissingField { .. })));

        assert!(matches!(
            validate_manifest(&[row("a", "p1", "2")]),
            Err(Error::BadEnum { field: "label", .. })
        ));
    }

    #[test]
    fn csv_header_must_match() {
        let text = "image_id,individual_id,eye\na,b,L\n";
        assert!(matches!(CohortManifest::from_csv(text), Err(Error::MissingField { .. })));
    }

    #[test]
    fn split_sizes_exact_rounding() {
        let m = manifest_with(10, 1);
        let s = split_cohort(&m, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(s.sizes(), [6, 2, 2]);
    }

    #[test]
    fn split_sizes_full_cohort() {
        assert_eq!(largest_remainder(2336, [0.6, 0.2, 0.2]), [1402, 467, 467]);
        assert_eq!(largest_remainder(0, [0.6, 0.2, 0.2]), [0, 0, 0]);
        assert_eq!(largest_remainder(1, [0.6, 0.2, 0.2]), [1, 0, 0]);
    }

    #[test]
    fn split_is_deterministic_and_grouped() {
        let m = manifest_with(37, 3);
        let a = split_cohort(&m, [0.6, 0.2, 0.2], 99).unwrap();
        let b = split_cohort(&m, [0.6, 0.2, 0.2], 99).unwrap();
        assert_eq!(a, b);
        let c = split_cohort(&m, [0.6, 0.2, 0.2], 100).unwrap();
        assert_ne!(a.assignment, c.assignment);
        for id in m.individual_ids() {
            let split = a.split_of(id).unwrap();
            assert!(m
                .samples_of(id)
                .all(|s| a.split_of(&s.individual_id) == Some(split)));
        }
    }

    #[test]
    fn split_errors() {
        let m = CohortManifest::default();
        assert!(matches!(split_cohort(&m, [0.6, 0.2, 0.2], 0), Err(Error::EmptyCohort)));
        let m = manifest_with(5, 1);
        assert!(split_cohort(&m, [0.6, 0.2, 0.3], 0).is_err());
        assert!(split_cohort(&m, [0.8, 0.2, 0.0], 0).is_err());
    }

    #[test]
    fn stratified_split_balances_classes() {
        let m = manifest_with(30, 1);
        let s = split_cohort_with(&m, [0.6, 0.2, 0.2], 5, true).unwrap();
        let positives = |split| {
            s.individuals_in(split)
                .filter(|id| m.label_of(id) == Some(1))
                .count()
        };
        // 10 positives -> 6/2/2
        assert_eq!(
            [positives(Split::Train), positives(Split::Validation), positives(Split::Test)],
            [6, 2, 2]
        );
        assert_eq!(s.sizes(), [18, 6, 6]);
    }

    #[test]
    fn split_csv_round_trip() {
        let m = manifest_with(12, 2);
        let s = split_cohort(&m, [0.6, 0.2, 0.2], 4).unwrap();
        let bytes = s.to_csv(Some(&Provenance::new("ab", 4))).unwrap();
        let back = SplitAssignment::from_csv(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
