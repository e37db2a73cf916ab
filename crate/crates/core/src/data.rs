//! Multi-site cohorts: representation, patient-disjoint splits, minimum-size
//! filtering, CSV ingestion and a synthetic cohort generator.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{sigmoid, Batch};
use crate::rng;
use crate::{Error, Result};

/// Prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mortality,
    /// Prolonged length of stay (> 7 days).
    Plos,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Mortality, Task::Plos];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::Plos => "plos",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "mortality" => Some(Task::Mortality),
            "plos" => Some(Task::Plos),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub patient_id: String,
    pub admission_id: String,
    pub features: Vec<u8>,
    pub label_mortality: u8,
    pub label_plos: u8,
}

impl Record {
    pub fn label(&self, task: Task) -> u8 {
        match task {
            Task::Mortality => self.label_mortality,
            Task::Plos => self.label_plos,
        }
    }
}

/// All admissions of one hospital. One row is one admission; a patient may
/// own several.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteCohort {
    site_id: String,
    width: usize,
    records: Vec<Record>,
}

impl SiteCohort {
    pub fn new(site_id: impl Into<String>, width: usize, records: Vec<Record>) -> Result<Self> {
        let site_id = site_id.into();
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.features.len() != width {
                return Err(Error::Dimension(format!(
                    "site {site_id}: admission {} has {} features, expected {width}",
                    r.admission_id,
                    r.features.len()
                )));
            }
            if r.features.iter().any(|&v| v > 1) || r.label_mortality > 1 || r.label_plos > 1 {
                return Err(Error::InvalidParam(format!(
                    "site {site_id}: admission {} has a non-binary value",
                    r.admission_id
                )));
            }
            if !seen.insert(r.admission_id.as_str()) {
                return Err(Error::InvalidParam(format!(
                    "site {site_id}: duplicate admission_id {}",
                    r.admission_id
                )));
            }
        }
        Ok(Self {
            site_id,
            width,
            records,
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Features and `task` labels of the records at `indices`.
    pub fn batch(&self, task: Task, indices: &[usize]) -> Batch {
        let mut b = Batch::empty(self.width);
        for &i in indices {
            let r = &self.records[i];
            b.push_unchecked(&r.features, r.label(task));
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Record indices of a site's train/val/test partitions, ascending within
/// each partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub site_id: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn indices(&self, part: Partition) -> &[usize] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn admission_ids<'a>(&self, cohort: &'a SiteCohort, part: Partition) -> Vec<&'a str> {
        self.indices(part)
            .iter()
            .map(|&i| cohort.records[i].admission_id.as_str())
            .collect()
    }
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Split a site by patient: patients are shuffled by `seed` and cut at the
/// cumulative fractions of the patient count; every admission follows its
/// patient.
pub fn split_by_patient(cohort: &SiteCohort, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if cohort.is_empty() {
        return Err(Error::Empty(format!("site {} has no records", cohort.site_id)));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidParam(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in &cohort.records {
        index.entry(r.patient_id.as_str()).or_insert_with(|| {
            patients.push(r.patient_id.as_str());
            patients.len() - 1
        });
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut rng::stream(seed, &["split", &cohort.site_id]));

    let p = patients.len() as f64;
    let cut1 = (fractions[0] * p).round() as usize;
    let cut2 = (((fractions[0] + fractions[1]) * p).round() as usize).max(cut1);
    let mut part_of = vec![Partition::Test; patients.len()];
    for (rank, &pid) in order.iter().enumerate() {
        part_of[pid] = if rank < cut1 {
            Partition::Train
        } else if rank < cut2 {
            Partition::Val
        } else {
            Partition::Test
        };
    }
    let mut split = SplitAssignment {
        site_id: cohort.site_id.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in cohort.records.iter().enumerate() {
        match part_of[index[r.patient_id.as_str()]] {
            Partition::Train => split.train.push(i),
            Partition::Val => split.val.push(i),
            Partition::Test => split.test.push(i),
        }
    }
    Ok(split)
}

/// Site ids whose training partition holds strictly more than `min_train`
/// admissions, in input order.
pub fn filter_min_train_size(splits: &[SplitAssignment], min_train: usize) -> Vec<String> {
    splits
        .iter()
        .filter(|s| s.train.len() > min_train)
        .map(|s| s.site_id.clone())
        .collect()
}

/// Hospital ids and admission counts of the 31-site cohort.
pub const HOSPITAL_SITES: [(&str, usize); 31] = [
    ("73", 4381),
    ("264", 3875),
    ("420", 3167),
    ("338", 3139),
    ("243", 3026),
    ("458", 2723),
    ("167", 2680),
    ("300", 2678),
    ("443", 2666),
    ("188", 2591),
    ("208", 2484),
    ("252", 2449),
    ("199", 2215),
    ("122", 2103),
    ("176", 1942),
    ("281", 1783),
    ("411", 1747),
    ("413", 1730),
    ("449", 1613),
    ("394", 1509),
    ("283", 1478),
    ("307", 1433),
    ("331", 1397),
    ("148", 1386),
    ("345", 1372),
    ("417", 1369),
    ("165", 1336),
    ("248", 1334),
    ("416", 1330),
    ("110", 1305),
    ("183", 1268),
];

pub const MORTALITY_INCIDENCE: f64 = 0.073;
pub const PLOS_INCIDENCE: f64 = 0.344;

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// (site_id, admission count) per site.
    pub sites: Vec<(String, usize)>,
    pub width: usize,
    pub mortality_incidence: f64,
    pub plos_incidence: f64,
    /// Standard deviation of the per-site perturbation of the ground-truth
    /// coefficients.
    pub tau: f64,
    /// Standard deviation of the shared ground-truth coefficients.
    pub coef_scale: f64,
    /// Per-feature observation rates are drawn uniformly from this range.
    pub feature_rate: (f64, f64),
    /// Probability that a patient has one more admission (geometric tail).
    pub repeat_admission: f64,
    pub max_admissions_per_patient: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n_sites` sites of `admissions` each, named `site00`, `site01`, ...
    pub fn uniform(n_sites: usize, admissions: usize, width: usize, seed: u64) -> Self {
        Self {
            sites: (0..n_sites).map(|i| (format!("site{i:02}"), admissions)).collect(),
            width,
            mortality_incidence: MORTALITY_INCIDENCE,
            plos_incidence: PLOS_INCIDENCE,
            tau: 0.3,
            coef_scale: 2.0,
            feature_rate: (0.003, 0.04),
            repeat_admission: 0.15,
            max_admissions_per_patient: 5,
            seed,
        }
    }

    /// The 31 hospitals at their real admission counts.
    pub fn hospital_cohort(width: usize, seed: u64) -> Self {
        Self {
            sites: HOSPITAL_SITES.iter().map(|&(id, n)| (id.to_string(), n)).collect(),
            ..Self::uniform(0, 0, width, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("synthetic spec: {m}")));
        if self.sites.is_empty() {
            return bad("no sites");
        }
        if self.sites.iter().any(|(_, n)| *n == 0) {
            return bad("site admission counts must be positive");
        }
        let ids: HashSet<&str> = self.sites.iter().map(|(id, _)| id.as_str()).collect();
        if ids.len() != self.sites.len() {
            return bad("duplicate site ids");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        for r in [self.mortality_incidence, self.plos_incidence] {
            if !(r > 0.0 && r < 1.0) {
                return bad("incidences must lie in (0, 1)");
            }
        }
        if !(self.tau >= 0.0) || !(self.coef_scale >= 0.0) {
            return bad("tau and coef_scale must be >= 0");
        }
        let (lo, hi) = self.feature_rate;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("feature_rate must satisfy 0 <= lo <= hi <= 1");
        }
        if !(0.0..1.0).contains(&self.repeat_admission) || self.max_admissions_per_patient == 0 {
            return bad("repeat_admission must lie in [0, 1) and max admissions be >= 1");
        }
        Ok(())
    }
}

/// Intercept that makes the mean predicted risk over `linear` hit `target`.
fn calibrate_intercept(linear: &[f64], target: f64) -> f64 {
    let mean_risk = |b: f64| linear.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / linear.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_risk(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Ground-truth coefficients of one task at one site.
fn site_coefficients(spec: &SyntheticSpec, site: &str, task: Task) -> Vec<f64> {
    let global = Normal::new(0.0, spec.coef_scale).expect("validated scale");
    let mut g = rng::stream(spec.seed, &["coef", task.name()]);
    let mut coefs: Vec<f64> = (0..spec.width).map(|_| global.sample(&mut g)).collect();
    if spec.tau > 0.0 {
        let noise = Normal::new(0.0, spec.tau).expect("validated tau");
        let mut r = rng::stream(spec.seed, &["site", site, "coef", task.name()]);
        for c in &mut coefs {
            *c += noise.sample(&mut r);
        }
    }
    coefs
}

/// Ground-truth coefficients actually used for `site_id`, exposed for tests
/// and diagnostics.
pub fn ground_truth(spec: &SyntheticSpec, site_id: &str, task: Task) -> Vec<f64> {
    site_coefficients(spec, site_id, task)
}

fn generate_site(spec: &SyntheticSpec, rates: &[f64], site: &str, n: usize) -> SiteCohort {
    let d = spec.width;
    let mut fr = rng::stream(spec.seed, &["site", site, "features"]);
    let features: Vec<Vec<u8>> = (0..n)
        .map(|_| rates.iter().map(|&p| u8::from(fr.random::<f64>() < p)).collect())
        .collect();

    let mut pr = rng::stream(spec.seed, &["site", site, "patients"]);
    let mut patient_of = Vec::with_capacity(n);
    let mut patient = 0usize;
    while patient_of.len() < n {
        let mut k = 1;
        while k < spec.max_admissions_per_patient && pr.random::<f64>() < spec.repeat_admission {
            k += 1;
        }
        for _ in 0..k.min(n - patient_of.len()) {
            patient_of.push(patient);
        }
        patient += 1;
    }

    let mut labels = [vec![0u8; n], vec![0u8; n]];
    for (slot, (task, target)) in [
        (Task::Mortality, spec.mortality_incidence),
        (Task::Plos, spec.plos_incidence),
    ]
    .into_iter()
    .enumerate()
    {
        let w = site_coefficients(spec, site, task);
        let linear: Vec<f64> = features
            .iter()
            .map(|x| w.iter().zip(x).filter(|(_, &xi)| xi == 1).map(|(wi, _)| wi).sum())
            .collect();
        let b = calibrate_intercept(&linear, target);
        let mut lr = rng::stream(spec.seed, &["site", site, "labels", task.name()]);
        for (y, &s) in labels[slot].iter_mut().zip(&linear) {
            *y = u8::from(lr.random::<f64>() < sigmoid(s + b));
        }
    }

    let records = features
        .into_iter()
        .enumerate()
        .map(|(i, x)| Record {
            patient_id: format!("{site}-p{}", patient_of[i]),
            admission_id: format!("{site}-a{i}"),
            features: x,
            label_mortality: labels[0][i],
            label_plos: labels[1][i],
        })
        .collect();
    debug_assert_eq!(d, rates.len());
    SiteCohort {
        site_id: site.to_string(),
        width: d,
        records,
    }
}

/// Generate cohorts for every site in `spec`. Pure in `spec`: each site draws
/// from its own named streams, so sites are built in parallel.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SiteCohort>> {
    spec.validate()?;
    let (lo, hi) = spec.feature_rate;
    let mut rr = rng::stream(spec.seed, &["rates"]);
    let rates: Vec<f64> = (0..spec.width).map(|_| lo + (hi - lo) * rr.random::<f64>()).collect();
    Ok(spec
        .sites
        .par_iter()
        .map(|(id, n)| generate_site(spec, &rates, id, *n))
        .collect())
}

const FIXED_COLUMNS: [&str; 5] = ["site_id", "patient_id", "admission_id", "label_mortality", "label_plos"];

fn header(width: usize) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..width).map(|j| format!("f{j}")))
        .collect()
}

/// Write cohorts in the ingestion schema.
pub fn write_csv_to<W: Write>(writer: W, cohorts: &[SiteCohort]) -> Result<()> {
    let width = cohorts.first().map_or(0, |c| c.width);
    if cohorts.iter().any(|c| c.width != width) {
        return Err(Error::Dimension("cohorts differ in feature width".into()));
    }
    let to_io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(width)).map_err(to_io)?;
    let mut row: Vec<String> = Vec::with_capacity(5 + width);
    for c in cohorts {
        for r in &c.records {
            row.clear();
            row.push(c.site_id.clone());
            row.push(r.patient_id.clone());
            row.push(r.admission_id.clone());
            row.push(r.label_mortality.to_string());
            row.push(r.label_plos.to_string());
            row.extend(r.features.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(to_io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, cohorts: &[SiteCohort]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, cohorts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load_csv(path: impl AsRef<Path>, width: usize) -> Result<Vec<SiteCohort>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, width, path)
}

fn binary(field: &str, what: &str, line: u64, path: &Path) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Csv {
            path: path.into(),
            line,
            msg: format!("{what} must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parse the ingestion schema from any reader; `origin` labels errors.
pub fn read_csv_from<R: Read>(reader: R, width: usize, origin: &Path) -> Result<Vec<SiteCohort>> {
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: origin.into(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let head = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let expected = header(width);
    if head.len() != expected.len() {
        return Err(csv_err(
            1,
            format!(
                "header has {} feature columns, expected width {width}",
                head.len().saturating_sub(FIXED_COLUMNS.len())
            ),
        ));
    }
    if let Some((got, want)) = head.iter().zip(&expected).find(|(g, w)| g != w) {
        return Err(csv_err(1, format!("header column {got:?}, expected {want:?}")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_site: HashMap<String, (Vec<Record>, HashSet<String>)> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != expected.len() {
            return Err(csv_err(
                line,
                format!("{} fields, expected {}", row.len(), expected.len()),
            ));
        }
        let site = &row[0];
        let features = (0..width)
            .map(|j| binary(&row[5 + j], &format!("feature f{j}"), line, origin))
            .collect::<Result<Vec<u8>>>()?;
        let record = Record {
            patient_id: row[1].to_string(),
            admission_id: row[2].to_string(),
            label_mortality: binary(&row[3], "label_mortality", line, origin)?,
            label_plos: binary(&row[4], "label_plos", line, origin)?,
            features,
        };
        let (records, seen) = by_site.entry(site.to_string()).or_insert_with(|| {
            order.push(site.to_string());
            (Vec::new(), HashSet::new())
        });
        if !seen.insert(record.admission_id.clone()) {
            return Err(csv_err(
                line,
                format!("duplicate admission_id {:?} in site {site:?}", record.admission_id),
            ));
        }
        records.push(record);
    }
    Ok(order
        .into_iter()
        .map(|site| {
            let (records, _) = by_site.remove(&site).expect("grouped");
            SiteCohort {
                site_id: site,
                width,
                records,
            }
        })
        .collect())
}
