//! Two-step question sampling, answer fuzziness and decoding-profile rotation.
//!
//! Phase 1 draws `k * n` questions uniformly with replacement. After phase 1
//! completes, every question whose answer fuzziness exceeds `tau` gets `m`
//! more draws (phase 2). Draw indices are global across both phases so the
//! profile rotation and per-draw seeds continue without gaps.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionSet;
use crate::mutation::{MutationConfig, VariantSpec};
use crate::records::QuestionHistory;
use crate::seed::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("fuzziness of an empty answer list")]
    EmptyAnswers,
    #[error("profile list is empty")]
    NoProfiles,
    #[error("invalid decoding profile: {0}")]
    InvalidProfile(String),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Decoding parameters for one draw. Each strategy carries exactly its own
/// fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodingProfile {
    RandomTemperature { temperature: f64 },
    TopK { temperature: f64, k_cutoff: u32 },
    TopP { temperature: f64, p_cutoff: f64 },
}

impl DecodingProfile {
    pub fn temperature(&self) -> f64 {
        match *self {
            DecodingProfile::RandomTemperature { temperature }
            | DecodingProfile::TopK { temperature, .. }
            | DecodingProfile::TopP { temperature, .. } => temperature,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let t = self.temperature();
        if !(t > 0.0 && t.is_finite()) {
            return Err(SamplingError::InvalidProfile(format!(
                "temperature {t} must be > 0"
            )));
        }
        match *self {
            DecodingProfile::TopK { k_cutoff: 0, .. } => Err(SamplingError::InvalidProfile(
                "k_cutoff must be >= 1".into(),
            )),
            DecodingProfile::TopP { p_cutoff, .. } if !(p_cutoff > 0.0 && p_cutoff <= 1.0) => Err(
                SamplingError::InvalidProfile(format!("p_cutoff {p_cutoff} must lie in (0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    /// Temperature 1.0, top-k 40 at 0.8, top-p 0.9 at 0.8.
    pub fn defaults() -> Vec<DecodingProfile> {
        vec![
            DecodingProfile::RandomTemperature { temperature: 1.0 },
            DecodingProfile::TopK {
                temperature: 0.8,
                k_cutoff: 40,
            },
            DecodingProfile::TopP {
                temperature: 0.8,
                p_cutoff: 0.9,
            },
        ]
    }
}

/// Round-robin over a fixed profile list.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRotation {
    profiles: Vec<DecodingProfile>,
}

impl ProfileRotation {
    pub fn new(profiles: Vec<DecodingProfile>) -> Result<Self, SamplingError> {
        if profiles.is_empty() {
            return Err(SamplingError::NoProfiles);
        }
        for p in &profiles {
            p.validate()?;
        }
        Ok(ProfileRotation { profiles })
    }

    pub fn next_profile(&self, draw_index: u64) -> DecodingProfile {
        self.profiles[(draw_index % self.profiles.len() as u64) as usize]
    }

    pub fn profiles(&self) -> &[DecodingProfile] {
        &self.profiles
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub draw_index: u64,
    pub question_id: String,
    pub variant: VariantSpec,
    pub profile: DecodingProfile,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawPlan {
    pub draws: Vec<Draw>,
}

impl DrawPlan {
    pub fn total(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Shared context for building draws.
#[derive(Debug, Clone)]
pub struct Planner<'a> {
    pub questions: &'a QuestionSet,
    pub mutation: &'a MutationConfig,
    pub profiles: &'a ProfileRotation,
    pub seed: u64,
}

impl Planner<'_> {
    fn draw(&self, draw_index: u64, question_index: usize) -> Draw {
        let q = &self.questions.questions()[question_index];
        let variant_seed = seed::derive(self.seed, Stream::Variant, draw_index);
        Draw {
            draw_index,
            question_id: q.id.clone(),
            variant: self.mutation.sample(q, variant_seed),
            profile: self.profiles.next_profile(draw_index),
        }
    }

    /// Phase 1: `k * n` draws with question ids sampled uniformly with
    /// replacement. Indices run `0..k*n`.
    pub fn plan_draws(&self, k: usize) -> Result<DrawPlan, SamplingError> {
        if k == 0 {
            return Err(SamplingError::ZeroK);
        }
        let n = self.questions.n();
        let mut rng = seed::rng(self.seed, Stream::Plan, 0);
        let draws = (0..(k * n) as u64)
            .map(|i| self.draw(i, rng.random_range(0..n)))
            .collect();
        Ok(DrawPlan { draws })
    }

    /// Phase 2: `m` draws for every question with fuzziness strictly above
    /// `tau`, in history order, indexed from `start_index`. Histories without
    /// a defined fuzziness are not requeried.
    pub fn select_requery(
        &self,
        histories: &[QuestionHistory],
        tau: f64,
        m: usize,
        start_index: u64,
    ) -> DrawPlan {
        let mut next = start_index;
        let mut draws = Vec::new();
        for h in histories {
            if !h.fuzziness.is_some_and(|f| f > tau) {
                continue;
            }
            let Some(qi) = self.questions.iter().position(|q| q.id == h.question_id) else {
                continue;
            };
            for _ in 0..m {
                draws.push(self.draw(next, qi));
                next += 1;
            }
        }
        DrawPlan { draws }
    }
}

/// Dispersion measure for MCQ option scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuzzinessMeasure {
    /// Mean absolute deviation from the mean score.
    #[default]
    Mad,
    /// Population variance of the scores.
    Variance,
}

/// Fuzziness of MCQ answers from their canonical option scores.
pub fn fuzziness_mcq(scores: &[usize], measure: FuzzinessMeasure) -> Result<f64, SamplingError> {
    if scores.is_empty() {
        return Err(SamplingError::EmptyAnswers);
    }
    let k = scores.len() as f64;
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / k;
    let dev = |s: usize| s as f64 - mean;
    Ok(match measure {
        FuzzinessMeasure::Mad => scores.iter().map(|&s| dev(s).abs()).sum::<f64>() / k,
        FuzzinessMeasure::Variance => scores.iter().map(|&s| dev(s).powi(2)).sum::<f64>() / k,
    })
}

/// Fuzziness of numeric answers: distinct answers over answer count.
pub fn fuzziness_numeric<S: AsRef<str>>(answers: &[S]) -> Result<f64, SamplingError> {
    if answers.is_empty() {
        return Err(SamplingError::EmptyAnswers);
    }
    let distinct: std::collections::HashSet<&str> = answers.iter().map(|a| a.as_ref()).collect();
    Ok(distinct.len() as f64 / answers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Question;

    fn set(n: usize) -> QuestionSet {
        QuestionSet::new(
            (0..n)
                .map(|i| Question::mcq(&format!("q{i}"), "s", &["a", "b", "c", "d"], 1))
                .collect(),
        )
        .unwrap()
    }

    fn planner<'a>(
        qs: &'a QuestionSet,
        m: &'a MutationConfig,
        p: &'a ProfileRotation,
        seed: u64,
    ) -> Planner<'a> {
        Planner {
            questions: qs,
            mutation: m,
            profiles: p,
            seed,
        }
    }

    #[test]
    fn mcq_fixtures() {
        let mad = FuzzinessMeasure::Mad;
        assert_eq!(fuzziness_mcq(&[3, 3, 3, 3], mad).unwrap(), 0.0);
        assert_eq!(fuzziness_mcq(&[1, 5], mad).unwrap(), 2.0);
        assert_eq!(fuzziness_mcq(&[1, 1, 5, 5], mad).unwrap(), 2.0);
        assert_eq!(
            fuzziness_mcq(&[1, 5], FuzzinessMeasure::Variance).unwrap(),
            4.0
        );
        assert_eq!(fuzziness_mcq(&[], mad), Err(SamplingError::EmptyAnswers));
    }

    #[test]
    fn numeric_fixtures() {
        assert_eq!(fuzziness_numeric(&["4", "4", "4"]).unwrap(), 1.0 / 3.0);
        assert_eq!(fuzziness_numeric(&["1", "2", "3"]).unwrap(), 1.0);
        assert_eq!(fuzziness_numeric(&["7", "7", "9", "9", "9"]).unwrap(), 0.4);
        assert!(fuzziness_numeric::<&str>(&[]).is_err());
    }

    #[test]
    fn profile_rotation() {
        let p = DecodingProfile::defaults();
        let rot = ProfileRotation::new(p.clone()).unwrap();
        assert_eq!(rot.next_profile(4), p[1]);
        let mut counts = [0; 3];
        for i in 0..9 {
            let got = rot.next_profile(i);
            counts[p.iter().position(|x| *x == got).unwrap()] += 1;
        }
        assert_eq!(counts, [3, 3, 3]);
        let single = ProfileRotation::new(vec![p[2]]).unwrap();
        assert!((0..5).all(|i| single.next_profile(i) == p[2]));
        assert_eq!(ProfileRotation::new(vec![]), Err(SamplingError::NoProfiles));
        assert!(ProfileRotation::new(vec![DecodingProfile::TopP {
            temperature: 1.0,
            p_cutoff: 1.5
        }])
        .is_err());
        assert!(
            ProfileRotation::new(vec![DecodingProfile::RandomTemperature {
                temperature: 0.0
            }])
            .is_err()
        );
        assert!(ProfileRotation::new(vec![DecodingProfile::TopK {
            temperature: 1.0,
            k_cutoff: 0
        }])
        .is_err());
    }

    #[test]
    fn profile_serde_shape() {
        let p = DecodingProfile::TopK {
            temperature: 0.8,
            k_cutoff: 40,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"strategy":"top_k","temperature":0.8,"k_cutoff":40}"#
        );
        let bad: Result<DecodingProfile, _> = serde_json::from_str(
            r#"{"strategy":"random_temperature","temperature":1.0,"k_cutoff":3}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn plan_counts() {
        let m = MutationConfig::default();
        let p = ProfileRotation::new(DecodingProfile::defaults()).unwrap();
        let qs = set(3);
        let plan = planner(&qs, &m, &p, 1).plan_draws(4).unwrap();
        assert_eq!(plan.total(), 12);
        assert!(plan
            .draws
            .iter()
            .enumerate()
            .all(|(i, d)| d.draw_index == i as u64));
        let one = set(1);
        let plan = planner(&one, &m, &p, 1).plan_draws(5).unwrap();
        assert!(plan.draws.iter().all(|d| d.question_id == "q0"));
        assert_eq!(
            planner(&one, &m, &p, 1).plan_draws(0),
            Err(SamplingError::ZeroK)
        );
        assert_eq!(
            planner(&qs, &m, &p, 9).plan_draws(4).unwrap(),
            planner(&qs, &m, &p, 9).plan_draws(4).unwrap()
        );
    }

    #[test]
    fn plan_counts_are_uniform_on_average() {
        let m = MutationConfig::default();
        let p = ProfileRotation::new(DecodingProfile::defaults()).unwrap();
        let qs = set(50);
        let k = 20;
        let mut totals = vec![0usize; 50];
        let seeds = 200;
        for s in 0..seeds {
            for d in planner(&qs, &m, &p, s).plan_draws(k).unwrap().draws {
                totals[d.question_id[1..].parse::<usize>().unwrap()] += 1;
            }
        }
        let k = k as f64;
        let n_draws = 50.0 * k;
        // per-seed count is Binomial(k*n, 1/n); standard error of a 200-seed mean
        let se = (n_draws * (1.0 / 50.0) * (1.0 - 1.0 / 50.0) / seeds as f64).sqrt();
        let rel: Vec<f64> = totals
            .iter()
            .map(|&t| (t as f64 / seeds as f64 - k) / k)
            .collect();
        for r in &rel {
            assert!((r * k).abs() < 4.0 * se, "{r}");
        }
        let rms = (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
        assert!(rms < 0.02, "rms relative deviation {rms}");
        let pooled = totals.iter().sum::<usize>() as f64 / (50.0 * seeds as f64);
        assert_eq!(pooled, k);
    }

    #[test]
    fn requery_threshold_is_strict() {
        let m = MutationConfig::default();
        let p = ProfileRotation::new(DecodingProfile::defaults()).unwrap();
        let qs = set(3);
        let pl = planner(&qs, &m, &p, 2);
        let hist = |id: &str, f: Option<f64>| QuestionHistory {
            question_id: id.into(),
            records: vec![],
            k_effective: 1,
            f: 0,
            fuzziness: f,
        };
        let all_zero = [hist("q0", Some(0.0)), hist("q1", Some(0.0))];
        assert!(pl.select_requery(&all_zero, 0.3, 4, 12).is_empty());

        let mixed = [
            hist("q0", Some(0.0)),
            hist("q1", Some(0.5)),
            hist("q2", Some(0.9)),
        ];
        let plan = pl.select_requery(&mixed, 0.3, 4, 12);
        assert_eq!(plan.total(), 8);
        assert!(plan.draws.iter().all(|d| d.question_id != "q0"));
        assert_eq!(plan.draws[0].draw_index, 12);
        assert_eq!(plan.draws[7].draw_index, 19);

        let boundary = [hist("q0", Some(0.01)), hist("q1", None)];
        let plan = pl.select_requery(&boundary, 0.0, 2, 0);
        assert_eq!(plan.total(), 2);
        assert!(plan.draws.iter().all(|d| d.question_id == "q0"));
    }
}
