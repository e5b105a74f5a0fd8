//! Pixel-level (F1, MCC) and image-level (AUC, accuracy) scoring, report
//! aggregation and report files.

mod plot;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::Family;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::urn::UrnModel;

pub use plot::{line_chart, Series};

/// Decision threshold for F1, MCC and accuracy.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

/// Counts `pred ≥ thr` against the binary `gt`.
pub fn confusion(pred: &Tensor, gt: &Tensor, thr: f64) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= thr, g >= 0.5) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp as u128 + c.fp as u128 + c.fn_ as u128;
    if den == 0 {
        0.0
    } else {
        (2 * c.tp as u128) as f64 / den as f64
    }
}

/// Matthews correlation, 0 when any marginal is 0.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as u128, c.tn as u128, c.fp as u128, c.fn_ as u128);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    // Exact integer numerator; each pairwise product fits in u128.
    let (pos, neg) = (tp * tn, fp * fn_);
    let num = if pos >= neg { (pos - neg) as f64 } else { -((neg - pos) as f64) };
    let (left, right) = (factors[0] * factors[1], factors[2] * factors[3]);
    let den = match left.checked_mul(right) {
        Some(p) => (p as f64).sqrt(),
        None => (left as f64).sqrt() * (right as f64).sqrt(),
    };
    (num / den).clamp(-1.0, 1.0)
}

/// Maximum pixel probability.
pub fn image_score(y_v: &Tensor) -> f64 {
    y_v.data().iter().copied().fold(0.0, f64::max)
}

/// Rank-based ROC AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of `score ≥ thr` decisions that match the labels.
pub fn accuracy(scores: &[f64], labels: &[bool], thr: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s >= thr) == l).count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub spliced: bool,
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub mcc: f64,
    /// Image-level score.
    pub score: f64,
}

impl ImageResult {
    pub fn new(id: impl Into<String>, spliced: bool, y_v: &Tensor, gt: &Tensor, thr: f64) -> Result<Self> {
        let counts = confusion(y_v, gt, thr)?;
        Ok(Self {
            id: id.into(),
            spliced,
            counts,
            f1: f1(&counts),
            mcc: mcc(&counts),
            score: image_score(y_v),
        })
    }
}

/// Scores of one model on one (possibly attacked) dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Attack slug, `none` for the clean set.
    pub spec: String,
    pub threshold: f64,
    pub images: Vec<ImageResult>,
    /// Mean over spliced images.
    pub f1: f64,
    /// Mean over spliced images.
    pub mcc: f64,
    /// `None` when the set holds a single class.
    pub auc: Option<f64>,
    pub acc: f64,
}

impl MetricsReport {
    pub fn from_images(spec: impl Into<String>, images: Vec<ImageResult>, thr: f64) -> Result<Self> {
        let spliced: Vec<&ImageResult> = images.iter().filter(|r| r.spliced).collect();
        let mean = |f: fn(&ImageResult) -> f64| {
            if spliced.is_empty() {
                0.0
            } else {
                spliced.iter().map(|r| f(r)).sum::<f64>() / spliced.len() as f64
            }
        };
        let scores: Vec<f64> = images.iter().map(|r| r.score).collect();
        let labels: Vec<bool> = images.iter().map(|r| r.spliced).collect();
        let auc = match auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        let report = Self {
            spec: spec.into(),
            threshold: thr,
            f1: mean(|r| r.f1),
            mcc: mean(|r| r.mcc),
            auc,
            acc: accuracy(&scores, &labels, thr)?,
            images,
        };
        report.check_ranges();
        Ok(report)
    }

    fn check_ranges(&self) {
        let unit = 0.0..=1.0;
        assert!(unit.contains(&self.f1) && unit.contains(&self.acc), "{}: F1/Acc out of range", self.spec);
        assert!((-1.0..=1.0).contains(&self.mcc), "{}: MCC out of range", self.spec);
        assert!(self.auc.is_none_or(|a| unit.contains(&a)), "{}: AUC out of range", self.spec);
    }

    pub fn row(&self) -> CsvRow {
        CsvRow {
            spec: self.spec.clone(),
            f1: round6(self.f1),
            mcc: round6(self.mcc),
            auc: self.auc.map(round6),
            acc: round6(self.acc),
        }
    }
}

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Scores `model` on `samples`. Stage-1 dropout is seeded per image from
/// `seed`.
pub fn evaluate(model: &UrnModel, samples: &[ImageSample], seed: u64, spec: &str) -> Result<MetricsReport> {
    let images = samples
        .iter()
        .map(|s| {
            let out = model.infer_sample(s, seed)?;
            ImageResult::new(&s.id, s.label.is_spliced(), &out.y_v, &s.mask, THRESHOLD)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_images(spec, images, THRESHOLD)
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub spec: String,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "MCC")]
    pub mcc: f64,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(rename = "Acc")]
    pub acc: f64,
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(&json, e))?;
    let mut wtr = csv::Writer::from_path(dir.join("report.csv"))?;
    for r in reports {
        wtr.serialize(r.row())?;
    }
    wtr.flush().map_err(|e| Error::io(dir.join("report.csv"), e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    csv::Reader::from_path(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes one chart per degradation family present in `reports` to
/// `dir/<family>.png`, parameter on the x-axis and F1, MCC, AUC, Acc as
/// lines. Returns the files written.
pub fn plot_families(dir: &Path, reports: &[MetricsReport]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for family in Family::ALL {
        let mut points: Vec<(f64, &MetricsReport)> = reports
            .iter()
            .filter_map(|r| {
                let spec = r.spec.parse().ok()?;
                Family::of(&spec).filter(|(f, _)| *f == family).map(|(_, x)| (x, r))
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line = |f: fn(&MetricsReport) -> Option<f64>| -> Vec<(f64, f64)> {
            points.iter().filter_map(|(x, r)| f(r).map(|y| (*x, y))).collect()
        };
        let series = [
            Series::new("F1", [214, 39, 40], line(|r| Some(r.f1))),
            Series::new("MCC", [31, 119, 180], line(|r| Some(r.mcc))),
            Series::new("AUC", [44, 160, 44], line(|r| r.auc)),
            Series::new("Acc", [255, 127, 14], line(|r| Some(r.acc))),
        ];
        let path = dir.join(format!("{}.png", family.name()));
        line_chart(&path, &series)?;
        written.push(path);
    }
    Ok(written)
}
