//! Binary segmentation metrics from pooled confusion counts, overlays, and
//! CSV reports.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Pixelwise counts with foreground = 1.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            "confusion",
            format!("prediction {}×{} vs ground truth {}×{}", pred.width, pred.height, gt.width, gt.height),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean over the classes present in the prediction or ground truth.
fn class_mean(fg: (u64, u64), bg: (u64, u64)) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (num, den) in [fg, bg] {
        if den > 0 {
            sum += num as f64 / den as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

pub fn miou(c: &ConfusionCounts) -> f64 {
    class_mean((c.tp, c.tp + c.fp + c.fn_), (c.tn, c.tn + c.fn_ + c.fp))
}

/// Per-class accuracy is undefined for a class missing from the ground
/// truth; false positives of that class still lower the other class.
pub fn mpa(c: &ConfusionCounts) -> f64 {
    class_mean((c.tp, c.tp + c.fn_), (c.tn, c.tn + c.fp))
}

pub fn acc(c: &ConfusionCounts) -> f64 {
    if c.total() == 0 {
        return 0.0;
    }
    100.0 * (c.tp + c.tn) as f64 / c.total() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub method: String,
    pub generator: String,
    pub train_domain: String,
    pub eval_domain: String,
    pub miou: f64,
    pub mpa: f64,
    pub acc: f64,
    pub seed: u64,
    pub n: usize,
}

/// Sums per-image counts, then computes each metric once.
pub fn aggregate(counts: &[ConfusionCounts]) -> Result<(ConfusionCounts, [f64; 3])> {
    if counts.is_empty() {
        return Err(Error::Data("cannot aggregate zero images".into()));
    }
    let total = counts.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
    Ok((total, [miou(&total), mpa(&total), acc(&total)]))
}

/// Foreground pixels averaged with pure blue using integer floor.
pub fn overlay(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::shape(
            "overlay",
            format!("image {}×{} vs mask {}×{}", image.width, image.height, mask.width, mask.height),
        ));
    }
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_exact_mut(3).zip(&mask.data) {
        if m != 0 {
            px[0] /= 2;
            px[1] /= 2;
            px[2] = ((px[2] as u16 + 255) / 2) as u8;
        }
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "method,generator,train_domain,eval_domain,miou,mpa,acc,seed,n";

/// CSV with two-decimal metrics, rows sorted by method then eval domain.
pub fn report_csv(records: &[EvalRecord]) -> String {
    let mut rows: Vec<&EvalRecord> = records.iter().collect();
    rows.sort_by(|a, b| (&a.method, &a.eval_domain).cmp(&(&b.method, &b.eval_domain)));
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.2},{:.2},{:.2},{},{}",
            r.method, r.generator, r.train_domain, r.eval_domain, r.miou, r.mpa, r.acc, r.seed, r.n
        )
        .unwrap();
    }
    out
}

pub fn write_report(records: &[EvalRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, report_csv(records)).map_err(|e| Error::io(path, e))
}
