//! Matching sparse-feature activations against clusters.
//!
//! A feature is "unusually active" at the target of a context when its
//! target activation reaches `max(p90 over the window, 0.1)`. A cluster is
//! matched by the first of its top-ranked features (by mean target
//! activation over a sample of contexts) whose activation frequency reaches
//! the threshold; the match's baseline is the same frequency pooled over
//! contexts from randomly chosen other clusters.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::nearest_rank_percentile;

pub const MIN_THRESHOLD: f64 = 0.1;
pub const WINDOW_PERCENTILE: u32 = 90;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One context of the dump. `acts` holds `(position, feature, activation)`;
/// missing entries are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationContext {
    pub context_id: String,
    pub window_tokens: Vec<u32>,
    pub target_pos: usize,
    pub acts: Vec<(usize, u32, f64)>,
}

impl ActivationContext {
    pub fn validate(&self) -> Result<(), String> {
        let t = self.window_tokens.len();
        if self.target_pos >= t {
            return Err(format!("target position {} outside window of {t}", self.target_pos));
        }
        for &(p, f, v) in &self.acts {
            if p >= t {
                return Err(format!("activation position {p} outside window of {t}"));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("feature {f} has activation {v}"));
            }
        }
        Ok(())
    }

    /// Dense activations of one feature over the window.
    pub fn feature_window(&self, feature: u32) -> Vec<f64> {
        let mut w = vec![0.0; self.window_tokens.len()];
        for &(p, f, v) in &self.acts {
            if f == feature {
                w[p] = v;
            }
        }
        w
    }

    pub fn target_activation(&self, feature: u32) -> f64 {
        self.acts
            .iter()
            .filter(|&&(p, f, _)| p == self.target_pos && f == feature)
            .map(|a| a.2)
            .fold(0.0, f64::max)
    }

    pub fn fires(&self, feature: u32) -> bool {
        binarize(&self.feature_window(feature), self.target_pos)
    }
}

/// Target activation against `max(nearest-rank p90 of the window, 0.1)`.
/// The target position counts toward the percentile.
pub fn binarize(window: &[f64], target_pos: usize) -> bool {
    if window.is_empty() || target_pos >= window.len() {
        return false;
    }
    let tau = nearest_rank_percentile(window, WINDOW_PERCENTILE).max(MIN_THRESHOLD);
    window[target_pos] >= tau
}

/// Fraction of contexts where the feature fires at the target.
pub fn activation_frequency(feature: u32, contexts: &[&ActivationContext]) -> Result<f64, SaeError> {
    if contexts.is_empty() {
        return Err(SaeError::Domain("no contexts to score".into()));
    }
    let hits = contexts.iter().filter(|c| c.fires(feature)).count();
    Ok(hits as f64 / contexts.len() as f64)
}

pub fn parse_dump(reader: impl BufRead) -> Result<Vec<ActivationContext>, SaeError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx: ActivationContext = serde_json::from_str(&line).map_err(|e| SaeError::Dump {
            line: i + 1,
            message: e.to_string(),
        })?;
        ctx.validate()
            .map_err(|message| SaeError::Dump { line: i + 1, message })?;
        out.push(ctx);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub threshold: f64,
    pub max_contexts: usize,
    pub baseline_clusters: usize,
    /// Number of top-ranked features scanned for a match.
    pub max_features: usize,
    pub rng_seed: u64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            max_contexts: 30,
            baseline_clusters: 20,
            max_features: 50,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub cluster: usize,
    pub matched_feature: Option<u32>,
    /// Frequency of the match, or of the best scanned feature without one.
    pub activation_frequency: f64,
    pub best_feature: Option<u32>,
    pub baseline_frequency: Option<f64>,
    pub sampled_contexts: usize,
    pub baseline_contexts: usize,
    pub baseline_clusters: usize,
    /// Fewer other clusters than requested were available for the baseline.
    pub baseline_short: bool,
}

fn sample_up_to<'a>(rng: &mut ChaCha8Rng, members: &[&'a ActivationContext], cap: usize) -> Vec<&'a ActivationContext> {
    if members.len() <= cap {
        return members.to_vec();
    }
    let mut idx = sample(rng, members.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| members[i]).collect()
}

/// Features ranked by mean target activation over the sample, ties to the
/// lower id. Features never active at a target are left out; they cannot
/// fire.
pub fn rank_features(contexts: &[&ActivationContext]) -> Vec<(u32, f64)> {
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    for c in contexts {
        let mut at_target: BTreeMap<u32, f64> = BTreeMap::new();
        for &(p, f, v) in &c.acts {
            if p == c.target_pos {
                let e = at_target.entry(f).or_insert(0.0);
                *e = e.max(v);
            }
        }
        for (f, v) in at_target {
            *sums.entry(f).or_insert(0.0) += v;
        }
    }
    let n = contexts.len().max(1) as f64;
    let mut ranked: Vec<(u32, f64)> = sums
        .into_iter()
        .filter(|e| e.1 > 0.0)
        .map(|(f, s)| (f, s / n))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Match every cluster. `clusters[c]` lists context ids; ids absent from the
/// dump are skipped. Each cluster draws from its own random stream.
pub fn match_clusters(
    dump: &[ActivationContext],
    clusters: &[Vec<String>],
    params: &MatchParams,
) -> Result<Vec<MatchReport>, SaeError> {
    if !(0.0..=1.0).contains(&params.threshold) {
        return Err(SaeError::Domain(format!(
            "threshold {} outside [0, 1]",
            params.threshold
        )));
    }
    if params.max_contexts == 0 {
        return Err(SaeError::Domain("max_contexts must be positive".into()));
    }
    let by_id: HashMap<&str, &ActivationContext> = dump.iter().map(|c| (c.context_id.as_str(), c)).collect();
    let members: Vec<Vec<&ActivationContext>> = clusters
        .iter()
        .map(|ids| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect())
        .collect();
    let reports = (0..clusters.len())
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
            rng.set_stream(c as u64);
            let own = sample_up_to(&mut rng, &members[c], params.max_contexts);
            let mut report = MatchReport {
                cluster: c,
                matched_feature: None,
                activation_frequency: 0.0,
                best_feature: None,
                baseline_frequency: None,
                sampled_contexts: own.len(),
                baseline_contexts: 0,
                baseline_clusters: 0,
                baseline_short: false,
            };
            if own.is_empty() {
                return report;
            }
            for &(f, _) in rank_features(&own).iter().take(params.max_features) {
                let freq = activation_frequency(f, &own).expect("nonempty sample");
                if report.best_feature.is_none() || freq > report.activation_frequency {
                    report.best_feature = Some(f);
                    report.activation_frequency = freq;
                }
                if freq >= params.threshold {
                    report.matched_feature = Some(f);
                    report.best_feature = Some(f);
                    report.activation_frequency = freq;
                    break;
                }
            }
            let Some(f) = report.matched_feature else {
                return report;
            };
            let others: Vec<usize> = (0..clusters.len())
                .filter(|&o| o != c && !members[o].is_empty())
                .collect();
            let chosen: Vec<usize> = if others.len() <= params.baseline_clusters {
                report.baseline_short = others.len() < params.baseline_clusters;
                others
            } else {
                let mut idx = sample(&mut rng, others.len(), params.baseline_clusters).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| others[i]).collect()
            };
            let mut pool = Vec::new();
            for &o in &chosen {
                pool.extend(sample_up_to(&mut rng, &members[o], params.max_contexts));
            }
            report.baseline_clusters = chosen.len();
            report.baseline_contexts = pool.len();
            report.baseline_frequency = activation_frequency(f, &pool).ok();
            report
        })
        .collect();
    Ok(reports)
}
