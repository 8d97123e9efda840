//! Ownership verification: the white-box similarity score `T_sim`, the
//! black-box label-flip score `T_cls`, threshold calibration and the
//! uniqueness comparison against forged watermarks.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::error::{Error, Result};
use crate::models::{DownstreamModel, EncoderModel};
use crate::numcore::Tensor;
use crate::watermark::{wat_loss, Watermark};

/// Something that labels images and reveals nothing else.
pub trait LabelOracle {
    fn predict(&mut self, images: &Tensor) -> Result<Vec<usize>>;
}

impl LabelOracle for DownstreamModel {
    fn predict(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        DownstreamModel::predict(self, images)
    }
}

/// Adapts a closure to [`LabelOracle`].
pub struct FnOracle<F>(pub F);

impl<F: FnMut(&Tensor) -> Result<Vec<usize>>> LabelOracle for FnOracle<F> {
    fn predict(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        (self.0)(images)
    }
}

/// Mean KL between softmax embeddings of clean and watermarked images.
pub fn t_sim(encoder: &EncoderModel, images: &Tensor, w: &Watermark) -> Result<f64> {
    if images.rows() == 0 {
        return Err(Error::Invalid("T_sim needs at least one image".into()));
    }
    wat_loss(encoder, images, w)
}

/// Fraction of images whose predicted label changes when the watermark is
/// added.
pub fn t_cls(oracle: &mut dyn LabelOracle, images: &Tensor, w: &Watermark) -> Result<f64> {
    let n = images.rows();
    if n == 0 {
        return Err(Error::Invalid("T_cls needs at least one image".into()));
    }
    let clean = oracle.predict(images)?;
    let marked = oracle.predict(&w.apply(images)?)?;
    if clean.len() != n || marked.len() != n {
        return Err(Error::Oracle(format!(
            "expected {n} labels, got {} and {}",
            clean.len(),
            marked.len()
        )));
    }
    Ok(disagreement(&clean, &marked))
}

/// Fraction of positions where the two label sequences differ.
pub fn disagreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    WhiteBox,
    BlackBox,
}

impl Mode {
    pub fn score_name(self) -> &'static str {
        match self {
            Self::WhiteBox => "T_sim",
            Self::BlackBox => "T_cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationReport {
    pub mode: Mode,
    pub score: f64,
    pub threshold: f64,
    pub verdict: bool,
    /// Fingerprint of the suspect model, or a description of the predictor.
    pub subject: String,
    pub watermark: String,
    pub sample_count: usize,
    /// Set when the watermark perturbation is all zeros.
    pub degenerate: bool,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Invalid(format!("verification report: {e}")))
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: {} = {:.6e} {} threshold {:.6e}{}",
            if self.verdict { "VERIFIED" } else { "NOT VERIFIED" },
            self.mode.score_name(),
            self.score,
            if self.verdict { "<" } else { ">=" },
            self.threshold,
            if self.degenerate {
                " (degenerate: zero watermark)"
            } else {
                ""
            }
        )
    }
}

/// Current time for reports, honouring `SOURCE_DATE_EPOCH` so that reruns can
/// be made byte-identical.
pub fn report_timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `score < threshold`, strictly.
pub fn verdict(score: f64, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    Ok(score < threshold)
}

pub struct Subject<'a> {
    pub id: &'a str,
    pub sample_count: usize,
}

pub fn verify(
    mode: Mode,
    score: f64,
    threshold: f64,
    subject: Subject,
    w: &Watermark,
) -> Result<VerificationReport> {
    Ok(VerificationReport {
        mode,
        score,
        threshold,
        verdict: verdict(score, threshold)?,
        subject: subject.id.to_string(),
        watermark: w.fingerprint(),
        sample_count: subject.sample_count,
        degenerate: w.is_zero(),
        timestamp: report_timestamp(),
    })
}

/// Geometric mean of the largest marked score and the smallest clean score.
/// Fails if the populations overlap.
pub fn calibrate_threshold(clean: &[f64], marked: &[f64]) -> Result<f64> {
    if clean.is_empty() || marked.is_empty() {
        return Err(Error::Invalid("calibration needs clean and marked scores".into()));
    }
    if clean.iter().chain(marked).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid("calibration scores must be finite and >= 0".into()));
    }
    let max_marked = marked.iter().cloned().fold(f64::MIN, f64::max);
    let min_clean = clean.iter().cloned().fold(f64::MAX, f64::min);
    if !(max_marked < min_clean) {
        return Err(Error::Overlap {
            max_marked,
            min_clean,
        });
    }
    Ok((max_marked * min_clean).sqrt())
}

/// Splits `images` into `parts` strided chunks (row `i` goes to chunk
/// `i mod parts`), so that class-ordered splits give every chunk the same
/// class mix.
pub fn chunks(images: &Tensor, parts: usize) -> Vec<Tensor> {
    let n = images.rows();
    let parts = parts.clamp(1, n.max(1));
    (0..parts)
        .map(|p| images.select_rows(&(p..n).step_by(parts).collect::<Vec<_>>()))
        .filter(|t| t.rows() > 0)
        .collect()
}

/// Floors a score so it can enter a geometric mean.
pub fn floor_score(score: f64, floor: f64) -> f64 {
    score.max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessRow {
    pub label: String,
    pub t_sim: f64,
    pub t_cls: f64,
    pub verdict_sim: bool,
    pub verdict_cls: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessTable {
    pub rows: Vec<UniquenessRow>,
    /// Whether the first (correct) row has strictly the smallest scores.
    pub correct_is_best: bool,
}

impl UniquenessTable {
    pub const CSV_HEADER: &'static str = "label,t_sim,t_cls,verdict_sim,verdict_cls";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{},{}",
                r.label, r.t_sim, r.t_cls, r.verdict_sim, r.verdict_cls
            );
        }
        s
    }
}

/// Scores the correct watermark and every forgery against the same marked
/// encoder and downstream oracle.
pub fn uniqueness_suite(
    encoder: &EncoderModel,
    oracle: &mut dyn LabelOracle,
    correct: &Watermark,
    forged: &[(String, Watermark)],
    verify_images: &Tensor,
    downstream: &Subset,
    t_s: f64,
    t_c: f64,
) -> Result<UniquenessTable> {
    let mut rows = Vec::with_capacity(forged.len() + 1);
    let entries = std::iter::once(("correct".to_string(), correct)).chain(forged.iter().map(|(l, w)| (l.clone(), w)));
    for (label, w) in entries {
        let s = t_sim(encoder, verify_images, w)?;
        let c = t_cls(oracle, &downstream.images, w)?;
        rows.push(UniquenessRow {
            label,
            t_sim: s,
            t_cls: c,
            verdict_sim: verdict(s, t_s)?,
            verdict_cls: verdict(c, t_c)?,
        });
    }
    let best = &rows[0];
    let correct_is_best = rows[1..]
        .iter()
        .all(|r| best.t_sim < r.t_sim && best.t_cls < r.t_cls);
    Ok(UniquenessTable {
        rows,
        correct_is_best,
    })
}
