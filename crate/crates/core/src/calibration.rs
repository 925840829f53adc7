//! Calibration metrics over (confidence, correct) points.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::records::AnswerRecord;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no evaluation points ({unparsed} responses had no parseable confidence)")]
    Empty { unparsed: usize },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("confidence {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
    #[error("min_dp must be in (0, 1], got {0}")]
    BadMinDp(f64),
    #[error("no threshold in the grid keeps at least {min_dp} of the data")]
    Infeasible { min_dp: f64 },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    #[default]
    Verbalized,
    FirstTokenProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub question_id: String,
    pub confidence: f64,
    pub correct: u8,
    pub source: PointSource,
}

impl EvalPoint {
    pub fn new(
        question_id: impl Into<String>,
        confidence: f64,
        correct: bool,
        source: PointSource,
    ) -> Result<Self, CalibrationError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CalibrationError::OutOfRange(confidence));
        }
        Ok(EvalPoint {
            question_id: question_id.into(),
            confidence,
            correct: u8::from(correct),
            source,
        })
    }
}

static CONFIDENCE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)my\s+confidence\s+is\s*(\d+(?:\.\d+)?)\s*%").expect("valid regex")
});

/// Confidence from the last "My confidence is X%" statement in `text`.
/// Percentages above 100 count as absent.
pub fn parse_confidence(text: &str) -> Option<f64> {
    let caps = CONFIDENCE_RE.captures_iter(text).last()?;
    let pct: f64 = caps[1].parse().ok()?;
    (pct <= 100.0).then_some(pct / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0 when the bin is empty.
    pub acc: f64,
    /// 0 when the bin is empty.
    pub conf: f64,
}

/// `b` equal-width bins over [0, 1]; the last bin is right-closed.
pub fn bin_points(points: &[EvalPoint], b: usize) -> Result<Vec<Bin>, CalibrationError> {
    if b < 2 {
        return Err(CalibrationError::TooFewBins(b));
    }
    if points.is_empty() {
        return Err(CalibrationError::Empty { unparsed: 0 });
    }
    let mut counts = vec![0usize; b];
    let mut hits = vec![0usize; b];
    let mut conf_sum = vec![0f64; b];
    for p in points {
        if !(0.0..=1.0).contains(&p.confidence) {
            return Err(CalibrationError::OutOfRange(p.confidence));
        }
        let i = ((p.confidence * b as f64).floor() as usize).min(b - 1);
        counts[i] += 1;
        hits[i] += p.correct as usize;
        conf_sum[i] += p.confidence;
    }
    Ok((0..b)
        .map(|i| {
            let n = counts[i];
            let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
            Bin {
                index: i,
                lo: i as f64 / b as f64,
                hi: (i + 1) as f64 / b as f64,
                count: n,
                acc: mean(hits[i] as f64),
                conf: mean(conf_sum[i]),
            }
        })
        .collect())
}

/// Bin-weighted mean |acc − conf|, in [0, 1].
pub fn ece(bins: &[Bin]) -> Result<f64, CalibrationError> {
    let s: usize = bins.iter().map(|b| b.count).sum();
    if s == 0 {
        return Err(CalibrationError::Empty { unparsed: 0 });
    }
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / s as f64 * (b.acc - b.conf).abs())
        .sum())
}

/// A correlation that may be undefined. Serialized as a number or the string
/// `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Undefined => None,
        }
    }
}

impl Serialize for Correlation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Correlation::Defined(r) => s.serialize_f64(*r),
            Correlation::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(Correlation::Defined(r)),
            Raw::Str(s) if s == "undefined" => Ok(Correlation::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad correlation {s:?}"))),
        }
    }
}

/// Pearson r over `(x, y)` pairs; undefined for fewer than two pairs or a
/// constant series.
pub fn pearson_pairs(pairs: &[(f64, f64)]) -> Correlation {
    let n = pairs.len();
    if n < 2 {
        return Correlation::Undefined;
    }
    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let tiny = |ss: f64, m: f64| ss / nf <= 1e-15 * m.abs().max(1.0).powi(2);
    if tiny(sxx, mx) || tiny(syy, my) {
        return Correlation::Undefined;
    }
    Correlation::Defined((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r between per-bin accuracy and confidence over nonempty bins.
pub fn pearson(bins: &[Bin]) -> Correlation {
    let pairs: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.acc, b.conf))
        .collect();
    pearson_pairs(&pairs)
}

pub fn accuracy(points: &[EvalPoint]) -> Result<f64, CalibrationError> {
    if points.is_empty() {
        return Err(CalibrationError::Empty { unparsed: 0 });
    }
    Ok(points.iter().map(|p| p.correct as f64).sum::<f64>() / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub t: f64,
    /// Absent when no point exceeds `t`.
    pub acc_t: Option<f64>,
    pub dp: f64,
}

/// Accuracy over points with confidence strictly above `t`, and their share.
pub fn acc_at_threshold(points: &[EvalPoint], t: f64) -> Result<ThresholdRow, CalibrationError> {
    if points.is_empty() {
        return Err(CalibrationError::Empty { unparsed: 0 });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CalibrationError::BadThreshold(t));
    }
    let kept: Vec<&EvalPoint> = points.iter().filter(|p| p.confidence > t).collect();
    let acc_t = (!kept.is_empty())
        .then(|| kept.iter().map(|p| p.correct as f64).sum::<f64>() / kept.len() as f64);
    Ok(ThresholdRow {
        t,
        acc_t,
        dp: kept.len() as f64 / points.len() as f64,
    })
}

/// Grid threshold with the best ACC_t among those keeping at least `min_dp`
/// of the points; ties go to the smaller threshold.
pub fn find_threshold(
    points: &[EvalPoint],
    grid: &[f64],
    min_dp: f64,
) -> Result<f64, CalibrationError> {
    if !(min_dp > 0.0 && min_dp <= 1.0) {
        return Err(CalibrationError::BadMinDp(min_dp));
    }
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let row = acc_at_threshold(points, t)?;
        let Some(acc) = row.acc_t else { continue };
        if row.dp < min_dp {
            continue;
        }
        best = match best {
            Some((bt, ba)) if ba > acc || (ba == acc && bt <= t) => Some((bt, ba)),
            _ => Some((t, acc)),
        };
    }
    best.map(|(t, _)| t)
        .ok_or(CalibrationError::Infeasible { min_dp })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstProbPoints {
    pub points: Vec<EvalPoint>,
    /// Completed records that carried no token probability.
    pub missing: usize,
}

/// First-token-probability points from completed records.
pub fn first_prob_points(records: &[AnswerRecord]) -> FirstProbPoints {
    let mut points = Vec::new();
    let mut missing = 0;
    for r in records.iter().filter(|r| !r.failed) {
        match r.first_token_probability {
            Some(p) if p > 0.0 && p <= 1.0 => points.push(EvalPoint {
                question_id: r.question_id.clone(),
                confidence: p,
                correct: r.p,
                source: PointSource::FirstTokenProb,
            }),
            _ => missing += 1,
        }
    }
    if points.is_empty() && missing > 0 {
        log::warn!("first-token probabilities unavailable for all {missing} records");
    }
    FirstProbPoints { points, missing }
}

pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub threshold_grid: Vec<f64>,
    pub min_dp: f64,
    /// Also write reliability.svg.
    pub diagram: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bins: 10,
            threshold_grid: default_grid(),
            min_dp: 0.2,
            diagram: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.bins < 2 {
            return Err(CalibrationError::TooFewBins(self.bins));
        }
        if let Some(&t) = self
            .threshold_grid
            .iter()
            .find(|t| !(0.0..=1.0).contains(*t))
        {
            return Err(CalibrationError::BadThreshold(t));
        }
        if !(self.min_dp > 0.0 && self.min_dp <= 1.0) {
            return Err(CalibrationError::BadMinDp(self.min_dp));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub s: usize,
    pub unparsed: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub ece_x100: f64,
    pub pearson: Correlation,
    pub bins: Vec<Bin>,
    pub thresholds: Vec<ThresholdRow>,
    /// `None` when no grid threshold keeps `min_dp` of the data.
    pub chosen_threshold: Option<f64>,
    pub config: CalibrationConfig,
}

pub fn report(
    points: &[EvalPoint],
    config: &CalibrationConfig,
    unparsed: usize,
) -> Result<CalibrationReport, CalibrationError> {
    config.validate()?;
    if points.is_empty() {
        return Err(CalibrationError::Empty { unparsed });
    }
    let bins = bin_points(points, config.bins)?;
    let e = ece(&bins)?;
    let thresholds = config
        .threshold_grid
        .iter()
        .map(|&t| acc_at_threshold(points, t))
        .collect::<Result<Vec<_>, _>>()?;
    let chosen_threshold = match find_threshold(points, &config.threshold_grid, config.min_dp) {
        Ok(t) => Some(t),
        Err(CalibrationError::Infeasible { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(CalibrationReport {
        s: points.len(),
        unparsed,
        accuracy: accuracy(points)?,
        ece: e,
        ece_x100: e * 100.0,
        pearson: pearson(&bins),
        bins,
        thresholds,
        chosen_threshold,
        config: config.clone(),
    })
}

pub fn bins_csv(bins: &[Bin]) -> String {
    let mut s = String::from("lo,hi,s_b,acc,conf\n");
    for b in bins {
        writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf).expect("string write");
    }
    s
}

/// Reliability diagram: per-bin accuracy bars against the diagonal.
pub fn reliability_svg(bins: &[Bin]) -> String {
    let (w, h, pad) = (400.0, 400.0, 40.0);
    let (pw, ph) = (w - 2.0 * pad, h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    );
    for b in bins.iter().filter(|b| b.count > 0) {
        let x = pad + b.lo * pw;
        let bw = (b.hi - b.lo) * pw;
        let bh = b.acc * ph;
        writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{bh:.2}\" fill=\"steelblue\" stroke=\"white\"/>",
            pad + ph - bh
        )
        .expect("string write");
    }
    writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{pad}\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">confidence</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">accuracy</text>\n</svg>",
        pad + ph,
        pad + pw,
        w / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0
    )
    .expect("string write");
    s
}

/// Writes report.json, bins.csv and, if configured, reliability.svg.
pub fn write_report(r: &CalibrationReport, dir: &Path) -> Result<(), CalibrationError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(r).expect("report serializes") + "\n";
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("bins.csv"), bins_csv(&r.bins))?;
    if r.config.diagram {
        std::fs::write(dir.join("reliability.svg"), reliability_svg(&r.bins))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: f64, y: u8) -> EvalPoint {
        EvalPoint::new("q", c, y == 1, PointSource::Verbalized).unwrap()
    }

    fn bin(index: usize, count: usize, acc: f64, conf: f64) -> Bin {
        Bin {
            index,
            lo: 0.0,
            hi: 1.0,
            count,
            acc,
            conf,
        }
    }

    /// Textbook two-pass Pearson.
    fn oracle_r(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn parses_statements() {
        assert_eq!(
            parse_confidence("The correct answer is D. atlas. My confidence is 61.5%."),
            Some(0.615)
        );
        assert_eq!(parse_confidence("My confidence is 100%."), Some(1.0));
        assert_eq!(parse_confidence("my confidence is 7 %"), Some(0.07));
        assert_eq!(
            parse_confidence("My confidence is 20%. Actually, my confidence is 30%."),
            Some(0.3)
        );
        assert_eq!(parse_confidence("No statement here."), None);
        assert_eq!(parse_confidence("My confidence is 140%."), None);
    }

    #[test]
    fn two_bin_example() {
        let bins = bin_points(&[pt(0.2, 0), pt(0.8, 1)], 2).unwrap();
        assert_eq!((bins[0].count, bins[0].acc, bins[0].conf), (1, 0.0, 0.2));
        assert_eq!((bins[1].count, bins[1].acc, bins[1].conf), (1, 1.0, 0.8));
    }

    #[test]
    fn right_closed_last_bin() {
        let pts: Vec<_> = (0..7).map(|_| pt(1.0, 1)).collect();
        let bins = bin_points(&pts, 10).unwrap();
        assert_eq!(bins[9].count, 7);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 7);
    }

    #[test]
    fn bin_errors() {
        assert!(matches!(
            bin_points(&[pt(0.5, 1)], 1),
            Err(CalibrationError::TooFewBins(1))
        ));
        assert!(matches!(
            bin_points(&[], 10),
            Err(CalibrationError::Empty { .. })
        ));
    }

    #[test]
    fn ece_examples() {
        // gaps 0.1 and 0.3 on equal mass: 0.5*0.1 + 0.5*0.3
        let bins = [bin(0, 5, 0.3, 0.2), bin(1, 5, 0.4, 0.7)];
        assert!((ece(&bins).unwrap() - 0.2).abs() < 1e-15);
        let one = [bin(0, 0, 0.0, 0.0), bin(1, 8, 0.4, 0.9)];
        assert!((ece(&one).unwrap() - 0.5).abs() < 1e-15);
        let perfect = [bin(0, 3, 0.25, 0.25), bin(1, 9, 0.75, 0.75)];
        assert_eq!(ece(&perfect).unwrap(), 0.0);
    }

    #[test]
    fn pearson_examples() {
        let id = [
            bin(0, 1, 0.1, 0.1),
            bin(1, 1, 0.5, 0.5),
            bin(2, 1, 0.9, 0.9),
        ];
        assert!((pearson(&id).value().unwrap() - 1.0).abs() < 1e-12);
        let anti = [
            bin(0, 1, 0.9, 0.1),
            bin(1, 1, 0.5, 0.5),
            bin(2, 1, 0.1, 0.9),
        ];
        assert!((pearson(&anti).value().unwrap() + 1.0).abs() < 1e-12);
        let pairs = [
            bin(0, 1, 0.1, 0.2),
            bin(1, 1, 0.5, 0.4),
            bin(2, 1, 0.9, 0.9),
        ];
        let expected = oracle_r(&[0.1, 0.5, 0.9], &[0.2, 0.4, 0.9]);
        assert!((expected - 0.970_725_343_394_151).abs() < 1e-12);
        assert!((pearson(&pairs).value().unwrap() - expected).abs() < 1e-6);
        let flat = [bin(0, 4, 0.2, 0.9), bin(1, 6, 0.8, 0.9)];
        assert_eq!(pearson(&flat), Correlation::Undefined);
        assert_eq!(pearson(&[bin(0, 4, 0.2, 0.3)]), Correlation::Undefined);
    }

    #[test]
    fn correlation_serialization() {
        assert_eq!(
            serde_json::to_string(&Correlation::Undefined).unwrap(),
            "\"undefined\""
        );
        assert_eq!(
            serde_json::to_string(&Correlation::Defined(0.5)).unwrap(),
            "0.5"
        );
        let back: Correlation = serde_json::from_str("\"undefined\"").unwrap();
        assert_eq!(back, Correlation::Undefined);
    }

    fn four() -> Vec<EvalPoint> {
        vec![pt(0.9, 1), pt(0.9, 1), pt(0.3, 0), pt(0.3, 0)]
    }

    #[test]
    fn thresholds() {
        let p = four();
        assert_eq!(accuracy(&p).unwrap(), 0.5);
        let r = acc_at_threshold(&p, 0.55).unwrap();
        assert_eq!((r.acc_t, r.dp), (Some(1.0), 0.5));
        let r = acc_at_threshold(&p, 0.0).unwrap();
        assert_eq!((r.acc_t, r.dp), (Some(0.5), 1.0));
        let r = acc_at_threshold(&p, 1.0).unwrap();
        assert_eq!((r.acc_t, r.dp), (None, 0.0));
        let all = vec![pt(0.9, 1); 5];
        assert_eq!(acc_at_threshold(&all, 0.9).unwrap().dp, 0.0);
    }

    #[test]
    fn threshold_search() {
        let p = four();
        assert_eq!(find_threshold(&p, &[0.5], 0.2).unwrap(), 0.5);
        // 0.3 through 0.85 all give ACC_t = 1 at DP 0.5; smallest wins.
        assert_eq!(find_threshold(&p, &default_grid(), 0.2).unwrap(), 0.3);
        let low = vec![pt(0.3, 1); 4];
        assert!(matches!(
            find_threshold(&low, &[0.5], 0.1),
            Err(CalibrationError::Infeasible { .. })
        ));
    }

    #[test]
    fn report_files() {
        let pts = vec![pt(0.2, 0), pt(0.2, 1), pt(0.8, 1), pt(0.8, 1)];
        let cfg = CalibrationConfig {
            bins: 2,
            diagram: true,
            ..Default::default()
        };
        let r = report(&pts, &cfg, 3).unwrap();
        assert_eq!(r.s, 4);
        assert_eq!(r.unparsed, 3);
        let dir = tempfile::tempdir().unwrap();
        write_report(&r, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("bins.csv")).unwrap();
        assert_eq!(csv, "lo,hi,s_b,acc,conf\n0,0.5,2,0.5,0.2\n0.5,1,2,1,0.8\n");
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: CalibrationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap() + "\n", json);
        assert!(dir.path().join("reliability.svg").exists());
        assert!(matches!(
            report(&[], &cfg, 9),
            Err(CalibrationError::Empty { unparsed: 9 })
        ));
    }

    #[test]
    fn first_prob() {
        use crate::corpus::Question;
        use crate::records::test_support::record;
        let q = Question::mcq("q", "s", &["a", "b"], 1);
        let mut a = record(&q, 0, 1, false);
        a.first_token_probability = Some(0.73);
        let b = record(&q, 1, 0, false);
        let c = record(&q, 2, 0, true);
        let fp = first_prob_points(&[a, b, c]);
        assert_eq!(fp.missing, 1);
        assert_eq!(fp.points.len(), 1);
        assert_eq!((fp.points[0].confidence, fp.points[0].correct), (0.73, 1));
        assert_eq!(fp.points[0].source, PointSource::FirstTokenProb);
    }
}
