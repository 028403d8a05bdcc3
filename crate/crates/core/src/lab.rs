//! Desk-scale susceptibility estimation.
//!
//! A small softmax sequence model is trained on a finite synthetic
//! distribution, sampled around its optimum with preconditioned SGLD (or
//! with isotropic Gaussian noise), and per-token susceptibilities are read
//! off as negative covariances between component observables and centered
//! per-token losses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{IngestError, SusceptibilityMatrix};
use crate::modes::DiscreteDistribution;
use crate::numeric::{exact_sum, ExactSum};

pub const DRAWS_MAGIC: &[u8; 4] = b"DRWS";
pub const DRAWS_VERSION: u32 = 1;
const DRAWS_HEADER: usize = 4 + 4 + 4 * 8;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("chain {chain} diverged at step {step}: loss {loss:.6e}")]
    Divergence { chain: usize, step: usize, loss: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad draws file: {0}")]
    Format(String),
    #[error("draws file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// pSGLD hyperparameters. Defaults are the 14M-parameter row of the
/// published table; the RMSProp constants and burn-in are additions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub gamma: f64,
    pub n_beta: f64,
    pub step_eps: f64,
    pub batch_size: usize,
    pub chains: usize,
    pub draws: usize,
    pub steps_between_draws: usize,
    pub rng_seed: u64,
    /// Steps discarded before the first draw.
    pub burnin_steps: usize,
    pub rms_decay: f64,
    pub rms_floor: f64,
    /// Stop updating the RMSProp accumulator after this many steps, which
    /// turns the sampler into SGLD with a constant diagonal preconditioner.
    pub freeze_preconditioner_after: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            gamma: 300.0,
            n_beta: 3.0,
            step_eps: 1e-5,
            batch_size: 16,
            chains: 4,
            draws: 100,
            steps_between_draws: 55,
            rng_seed: 0,
            burnin_steps: 0,
            rms_decay: 0.99,
            rms_floor: 1e-8,
            freeze_preconditioner_after: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.n_beta > 0.0 && self.n_beta.is_finite()) {
            return bad("n_beta must be positive");
        }
        if !(self.step_eps > 0.0 && self.step_eps.is_finite()) {
            return bad("step_eps must be positive");
        }
        if self.batch_size == 0 || self.chains == 0 || self.draws == 0 {
            return bad("batch_size, chains and draws must be at least 1");
        }
        if self.steps_between_draws == 0 {
            return bad("steps_between_draws must be at least 1");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) || !(self.rms_floor > 0.0) {
            return bad("rms_decay must lie in (0, 1) and rms_floor must be positive");
        }
        Ok(())
    }
}

/// What the samplers need from a model.
pub trait Posterior: Sync {
    fn dim(&self) -> usize;
    /// Disjoint weight index sets, one per component.
    fn components(&self) -> &[Vec<usize>];
    /// Weights of the evaluation pairs; sums to 1.
    fn eval_weights(&self) -> &[f64];
    fn eval_losses(&self, w: &[f64], out: &mut [f64]);
    /// Exact population loss, used by the observables.
    fn population_loss(&self, w: &[f64]) -> f64;
    /// Minibatch gradient of the loss; returns the minibatch loss.
    fn batch_grad(&self, w: &[f64], batch: usize, rng: &mut ChaCha8Rng, grad: &mut [f64]) -> f64;
}

/// `phi_C(w) = L(hybrid) - L(w*)`, where the hybrid takes component `C`
/// from `w` and everything else from `w*`.
pub fn observable_phi<M: Posterior + ?Sized>(model: &M, w_star: &[f64], w: &[f64], component: usize) -> f64 {
    let base = model.population_loss(w_star);
    phi_with_base(model, w_star, w, component, base, &mut w_star.to_vec())
}

fn phi_with_base<M: Posterior + ?Sized>(
    model: &M,
    w_star: &[f64],
    w: &[f64],
    component: usize,
    base: f64,
    scratch: &mut Vec<f64>,
) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(w_star);
    for &i in &model.components()[component] {
        scratch[i] = w[i];
    }
    model.population_loss(scratch) - base
}

/// Draw record, laid out `[chain][draw][...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub chains: usize,
    pub draws: usize,
    pub h: usize,
    pub n_eval: usize,
    pub phi: Vec<f64>,
    pub losses: Vec<f64>,
    /// eval_q-weighted mean of each draw's losses.
    pub population: Vec<f64>,
    pub eval_q: Vec<f64>,
}

impl PosteriorDraws {
    pub fn total(&self) -> usize {
        self.chains * self.draws
    }

    pub fn phi_of(&self, d: usize) -> &[f64] {
        &self.phi[d * self.h..(d + 1) * self.h]
    }

    pub fn losses_of(&self, d: usize) -> &[f64] {
        &self.losses[d * self.n_eval..(d + 1) * self.n_eval]
    }

    fn from_chains(chains: Vec<ChainRecord>, draws: usize, h: usize, eval_q: Vec<f64>) -> Self {
        let n_eval = eval_q.len();
        let mut out = Self {
            chains: chains.len(),
            draws,
            h,
            n_eval,
            phi: Vec::with_capacity(chains.len() * draws * h),
            losses: Vec::with_capacity(chains.len() * draws * n_eval),
            population: Vec::with_capacity(chains.len() * draws),
            eval_q,
        };
        for c in chains {
            out.phi.extend(c.phi);
            out.losses.extend(c.losses);
            out.population.extend(c.population);
        }
        out
    }

    /// Keep only the listed chains, in the given order.
    pub fn select_chains(&self, order: &[usize]) -> Self {
        let mut out = Self {
            chains: order.len(),
            phi: Vec::new(),
            losses: Vec::new(),
            population: Vec::new(),
            ..self.clone()
        };
        for &c in order {
            let r = c * self.draws..(c + 1) * self.draws;
            out.phi.extend_from_slice(&self.phi[r.start * self.h..r.end * self.h]);
            out.losses
                .extend_from_slice(&self.losses[r.start * self.n_eval..r.end * self.n_eval]);
            out.population.extend_from_slice(&self.population[r]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(DRAWS_MAGIC)?;
        f.write_all(&DRAWS_VERSION.to_le_bytes())?;
        for v in [self.chains, self.draws, self.h, self.n_eval] {
            f.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.phi.iter().chain(&self.losses) {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in &self.eval_q {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LabError> {
        if bytes.len() < DRAWS_HEADER {
            return Err(LabError::Truncated {
                expected: DRAWS_HEADER,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != DRAWS_MAGIC {
            return Err(LabError::Format("missing DRWS magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != DRAWS_VERSION {
            return Err(LabError::Format(format!("unsupported version {version}")));
        }
        let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
        let (chains, draws, h, n_eval) = (dim(0), dim(1), dim(2), dim(3));
        let n = chains
            .checked_mul(draws)
            .ok_or_else(|| LabError::Format("dimension overflow".into()))?;
        let floats = n
            .checked_mul(h.saturating_add(n_eval))
            .ok_or_else(|| LabError::Format("dimension overflow".into()))?;
        let expected = DRAWS_HEADER + 4 * floats + 8 * n_eval;
        if bytes.len() != expected {
            return Err(LabError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut at = DRAWS_HEADER;
        let mut f32s = |count: usize| -> Vec<f64> {
            let v = bytes[at..at + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            at += 4 * count;
            v
        };
        let phi = f32s(n * h);
        let losses = f32s(n * n_eval);
        let eval_q: Vec<f64> = bytes[DRAWS_HEADER + 4 * floats..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if phi.iter().chain(&losses).chain(&eval_q).any(|v| !v.is_finite()) {
            return Err(LabError::Format("non-finite value in draws".into()));
        }
        let population = (0..n)
            .map(|d| weighted_mean(&eval_q, &losses[d * n_eval..(d + 1) * n_eval]))
            .collect();
        Ok(Self {
            chains,
            draws,
            h,
            n_eval,
            phi,
            losses,
            population,
            eval_q,
        })
    }
}

fn weighted_mean(q: &[f64], v: &[f64]) -> f64 {
    exact_sum(q.iter().zip(v).map(|(a, b)| a * b))
}

struct ChainRecord {
    phi: Vec<f64>,
    losses: Vec<f64>,
    population: Vec<f64>,
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

fn record_draw<M: Posterior + ?Sized>(
    model: &M,
    w_star: &[f64],
    base: f64,
    w: &[f64],
    rec: &mut ChainRecord,
    scratch: &mut Vec<f64>,
) {
    for c in 0..model.components().len() {
        rec.phi.push(phi_with_base(model, w_star, w, c, base, scratch));
    }
    let start = rec.losses.len();
    rec.losses.resize(start + model.eval_weights().len(), 0.0);
    model.eval_losses(w, &mut rec.losses[start..]);
    rec.population
        .push(weighted_mean(model.eval_weights(), &rec.losses[start..]));
}

fn check_model<M: Posterior + ?Sized>(model: &M, w_star: &[f64]) -> Result<(), LabError> {
    if w_star.len() != model.dim() {
        return Err(LabError::Shape(format!(
            "w* has {} entries, model has {}",
            w_star.len(),
            model.dim()
        )));
    }
    let mut seen = vec![false; model.dim()];
    for comp in model.components() {
        for &i in comp {
            if i >= model.dim() || std::mem::replace(&mut seen[i], true) {
                return Err(LabError::Shape(format!(
                    "component index {i} is out of range or repeated"
                )));
            }
        }
    }
    let q = model.eval_weights();
    if q.iter().any(|&v| v < 0.0) || (exact_sum(q.iter().copied()) - 1.0).abs() > 1e-9 {
        return Err(LabError::Shape(
            "evaluation weights must be a probability vector".into(),
        ));
    }
    Ok(())
}

/// Localized pSGLD. Each chain starts at `w*` and follows
///
/// ```text
/// V <- decay V + (1 - decay) g^2,   G = 1 / max(sqrt(V), floor)
/// w <- w - (eps G / 2) g + N(0, eps G),   g = n_beta grad L_batch + gamma (w - w*)
/// ```
///
/// with `V` initialized to 1. With exact gradients the adaptive `G` follows
/// the current position and inflates the stationary spread; freezing it
/// (see [`SamplerConfig::freeze_preconditioner_after`]) removes that bias.
pub fn sgld_sample<M: Posterior + ?Sized>(
    model: &M,
    w_star: &[f64],
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws, LabError> {
    cfg.validate()?;
    check_model(model, w_star)?;
    let base = model.population_loss(w_star);
    if !base.is_finite() {
        return Err(LabError::Domain("loss at w* is not finite".into()));
    }
    let limit = 1e3 * base.abs().max(1e-3);
    let dim = model.dim();
    let chains: Result<Vec<ChainRecord>, LabError> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(cfg.rng_seed, chain);
            let mut w = w_star.to_vec();
            let mut v = vec![1.0; dim];
            let mut g = vec![0.0; dim];
            let mut scratch = Vec::with_capacity(dim);
            let mut rec = ChainRecord {
                phi: Vec::with_capacity(cfg.draws * model.components().len()),
                losses: Vec::with_capacity(cfg.draws * model.eval_weights().len()),
                population: Vec::with_capacity(cfg.draws),
            };
            let total = cfg.burnin_steps + cfg.draws * cfg.steps_between_draws;
            for step in 1..=total {
                let loss = model.batch_grad(&w, cfg.batch_size, &mut rng, &mut g);
                if !loss.is_finite() || loss > limit {
                    return Err(LabError::Divergence { chain, step, loss });
                }
                let adapt = cfg.freeze_preconditioner_after.is_none_or(|f| step <= f);
                for i in 0..dim {
                    let gi = cfg.n_beta * g[i] + cfg.gamma * (w[i] - w_star[i]);
                    if adapt {
                        v[i] = cfg.rms_decay * v[i] + (1.0 - cfg.rms_decay) * gi * gi;
                    }
                    let h = cfg.step_eps / v[i].sqrt().max(cfg.rms_floor);
                    let z: f64 = rng.sample(StandardNormal);
                    w[i] += -0.5 * h * gi + h.sqrt() * z;
                }
                if step > cfg.burnin_steps && (step - cfg.burnin_steps) % cfg.steps_between_draws == 0 {
                    record_draw(model, w_star, base, &w, &mut rec, &mut scratch);
                }
            }
            Ok(rec)
        })
        .collect();
    Ok(PosteriorDraws::from_chains(
        chains?,
        cfg.draws,
        model.components().len(),
        model.eval_weights().to_vec(),
    ))
}

/// Gaussian baseline: i.i.d. draws `w ~ N(w*, lambda I)`, with the same
/// chain layout and record as [`sgld_sample`]. Only `chains`, `draws` and
/// `rng_seed` of the config are used.
pub fn gaussian_sample<M: Posterior + ?Sized>(
    model: &M,
    w_star: &[f64],
    lambda: f64,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws, LabError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LabError::Domain(format!("variance must be positive, got {lambda}")));
    }
    if cfg.chains == 0 || cfg.draws == 0 {
        return Err(LabError::Config("chains and draws must be at least 1".into()));
    }
    check_model(model, w_star)?;
    let base = model.population_loss(w_star);
    let sd = lambda.sqrt();
    let chains: Vec<ChainRecord> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(cfg.rng_seed, chain);
            let mut w = vec![0.0; model.dim()];
            let mut scratch = Vec::new();
            let mut rec = ChainRecord {
                phi: Vec::new(),
                losses: Vec::new(),
                population: Vec::new(),
            };
            for _ in 0..cfg.draws {
                for (wi, &c) in w.iter_mut().zip(w_star) {
                    let z: f64 = rng.sample(StandardNormal);
                    *wi = c + sd * z;
                }
                record_draw(model, w_star, base, &w, &mut rec, &mut scratch);
            }
            rec
        })
        .collect();
    Ok(PosteriorDraws::from_chains(
        chains,
        cfg.draws,
        model.components().len(),
        model.eval_weights().to_vec(),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One covariance over all draws of all chains.
    #[default]
    Pooled,
    /// Mean of the per-chain covariances.
    PerChain,
}

/// `chi^C_xy = -Cov[phi_C, l_xy - L]` with population covariances. `L` is
/// recomputed per draw as the eval_q-weighted mean of the recorded losses.
/// Sums are exactly rounded, so the result does not depend on chain order.
pub fn per_token_susceptibility(draws: &PosteriorDraws, pooling: Pooling) -> Result<SusceptibilityMatrix, LabError> {
    let min = match pooling {
        Pooling::Pooled => draws.total(),
        Pooling::PerChain => draws.draws,
    };
    if min < 2 {
        return Err(LabError::Domain("covariance needs at least two draws".into()));
    }
    let groups: Vec<Vec<usize>> = match pooling {
        Pooling::Pooled => vec![(0..draws.total()).collect()],
        Pooling::PerChain => (0..draws.chains)
            .map(|c| (c * draws.draws..(c + 1) * draws.draws).collect())
            .collect(),
    };
    let (h, n_eval) = (draws.h, draws.n_eval);
    let big_l: Vec<f64> = (0..draws.total())
        .map(|d| weighted_mean(&draws.eval_q, draws.losses_of(d)))
        .collect();
    let mut acc = vec![vec![ExactSum::new(); h]; n_eval];
    for group in &groups {
        let n = group.len() as f64;
        let phi_mean: Vec<f64> = (0..h)
            .map(|c| exact_sum(group.iter().map(|&d| draws.phi_of(d)[c])) / n)
            .collect();
        let centered: Vec<Vec<f64>> = group
            .iter()
            .map(|&d| draws.phi_of(d).iter().zip(&phi_mean).map(|(p, m)| p - m).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..n_eval)
            .into_par_iter()
            .map(|i| {
                let dl: Vec<f64> = group.iter().map(|&d| draws.losses_of(d)[i] - big_l[d]).collect();
                let dl_mean = exact_sum(dl.iter().copied()) / n;
                (0..h)
                    .map(|c| {
                        let cov = exact_sum(centered.iter().zip(&dl).map(|(p, l)| p[c] * (l - dl_mean))) / n;
                        -cov
                    })
                    .collect()
            })
            .collect();
        for (a, r) in acc.iter_mut().zip(rows) {
            for (s, v) in a.iter_mut().zip(r) {
                s.add(v);
            }
        }
    }
    let k = groups.len() as f64;
    let values = acc
        .into_iter()
        .flat_map(|r| r.into_iter().map(move |s| s.value() / k))
        .collect();
    Ok(SusceptibilityMatrix::new(n_eval, h, values)?)
}

/// Mean of the member rows.
pub fn per_pattern_susceptibility(m: &SusceptibilityMatrix, members: &[usize]) -> Result<Vec<f64>, LabError> {
    if members.is_empty() {
        return Err(LabError::Domain("pattern has no members".into()));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= m.rows()) {
        return Err(LabError::Shape(format!("member {bad} outside {} rows", m.rows())));
    }
    let n = members.len() as f64;
    Ok((0..m.cols())
        .map(|c| exact_sum(members.iter().map(|&i| m.get(i, c))) / n)
        .collect())
}

/// `sum_p q'(p) chi_p` for a mixture over evaluation pairs.
pub fn perturbation_susceptibility(m: &SusceptibilityMatrix, mixture: &[f64]) -> Result<Vec<f64>, LabError> {
    if mixture.len() != m.rows() {
        return Err(LabError::Shape(format!(
            "{} weights for {} rows",
            mixture.len(),
            m.rows()
        )));
    }
    let total = exact_sum(mixture.iter().copied());
    if mixture.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(LabError::Domain(format!(
            "mixture must be a probability vector (sums to {total})"
        )));
    }
    Ok((0..m.cols())
        .map(|c| exact_sum(mixture.iter().enumerate().map(|(i, p)| p * m.get(i, c))))
        .collect())
}

/// A finite next-token task: contexts are token sequences of equal length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTask {
    pub vocab: usize,
    pub context_len: usize,
    pub contexts: Vec<Vec<u32>>,
    pub dist: DiscreteDistribution,
    /// Planted mode of each context, when known.
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

impl SequenceTask {
    pub fn validate(&self) -> Result<(), LabError> {
        self.dist.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if self.dist.n_tokens() != self.vocab || self.dist.n_contexts() != self.contexts.len() {
            return Err(LabError::Config(
                "distribution does not match vocab and contexts".into(),
            ));
        }
        if self
            .contexts
            .iter()
            .any(|c| c.len() != self.context_len || c.iter().any(|&t| t as usize >= self.vocab))
        {
            return Err(LabError::Config(
                "context of wrong length or with out-of-vocabulary token".into(),
            ));
        }
        if self.labels.as_ref().is_some_and(|l| l.len() != self.contexts.len()) {
            return Err(LabError::Config("one label per context required".into()));
        }
        Ok(())
    }

    /// Pairs with positive probability, context-major.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for x in 0..self.contexts.len() {
            for y in 0..self.vocab {
                if self.dist.joint(x, y) > 0.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// A task with two planted modes. The vocabulary holds `2 * per_mode`
/// ordinary tokens plus two targets. Contexts are all pairs `(a, b)` of
/// ordinary tokens; the half containing `a` selects the mode, whose target
/// follows with probability `fidelity`. The remaining mass is spread
/// uniformly over the ordinary tokens.
pub fn two_mode_task(per_mode: usize, fidelity: f64) -> Result<SequenceTask, LabError> {
    if per_mode < 1 {
        return Err(LabError::Config("need at least one token per mode".into()));
    }
    if !(fidelity > 0.0 && fidelity < 1.0) {
        return Err(LabError::Config("fidelity must lie in (0, 1)".into()));
    }
    let ordinary = 2 * per_mode;
    let vocab = ordinary + 2;
    let mut contexts = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for a in 0..ordinary {
        for b in 0..ordinary {
            let label = a / per_mode;
            let mut row = vec![(1.0 - fidelity) / ordinary as f64; vocab];
            row[ordinary] = 0.0;
            row[ordinary + 1] = 0.0;
            row[ordinary + label] = fidelity;
            contexts.push(vec![a as u32, b as u32]);
            rows.push(row);
            labels.push(label);
        }
    }
    let n = contexts.len();
    let mut dist =
        DiscreteDistribution::new(vec![1.0 / n as f64; n], rows).map_err(|e| LabError::Config(e.to_string()))?;
    dist.contexts = contexts.iter().map(|c| format!("{}_{}", c[0], c[1])).collect();
    dist.tokens = (0..ordinary)
        .map(|t| format!("t{t}"))
        .chain(["A".to_string(), "B".to_string()])
        .collect();
    Ok(SequenceTask {
        vocab,
        context_len: 2,
        contexts,
        dist,
        labels: Some(labels),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub heads: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            heads: 4,
            hidden: 4,
            init_scale: 0.5,
            seed: 0,
        }
    }
}

/// Multi-head two-block softmax predictor:
///
/// ```text
/// h_k = tanh(sum_pos E_k[pos][x_pos]),   logits = b + sum_k O_k^T h_k
/// ```
///
/// Components are the per-position embedding blocks of each head and each
/// head's output block. The bias belongs to no component.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub vocab: usize,
    pub context_len: usize,
    pub heads: usize,
    pub hidden: usize,
    components: Vec<Vec<usize>>,
    pub component_names: Vec<String>,
    out_offset: usize,
    bias_offset: usize,
    dim: usize,
}

impl ToyModel {
    pub fn new(vocab: usize, context_len: usize, spec: &ModelSpec) -> Result<Self, LabError> {
        if vocab == 0 || context_len == 0 || spec.heads == 0 || spec.hidden == 0 {
            return Err(LabError::Config("model sizes must be positive".into()));
        }
        let emb = context_len * vocab * spec.hidden;
        let out = spec.hidden * vocab;
        let out_offset = spec.heads * emb;
        let bias_offset = out_offset + spec.heads * out;
        let mut components = Vec::new();
        let mut names = Vec::new();
        let block = vocab * spec.hidden;
        for k in 0..spec.heads {
            for pos in 0..context_len {
                let start = (k * context_len + pos) * block;
                components.push((start..start + block).collect());
                names.push(format!("embed{k}p{pos}"));
            }
        }
        for k in 0..spec.heads {
            components.push((out_offset + k * out..out_offset + (k + 1) * out).collect());
            names.push(format!("out{k}"));
        }
        Ok(Self {
            vocab,
            context_len,
            heads: spec.heads,
            hidden: spec.hidden,
            components,
            component_names: names,
            out_offset,
            bias_offset,
            dim: bias_offset + vocab,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn init(&self, spec: &ModelSpec) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut w: Vec<f64> = (0..self.dim)
            .map(|_| spec.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        w[self.bias_offset..].fill(0.0);
        w
    }

    fn emb_index(&self, k: usize, pos: usize, tok: usize) -> usize {
        ((k * self.context_len + pos) * self.vocab + tok) * self.hidden
    }

    fn out_index(&self, k: usize, j: usize) -> usize {
        self.out_offset + (k * self.hidden + j) * self.vocab
    }

    /// Hidden activations (`heads * hidden`) and logits.
    pub fn forward(&self, w: &[f64], ctx: &[u32], hid: &mut [f64], logits: &mut [f64]) {
        for k in 0..self.heads {
            for j in 0..self.hidden {
                let mut pre = 0.0;
                for (pos, &t) in ctx.iter().enumerate() {
                    pre += w[self.emb_index(k, pos, t as usize) + j];
                }
                hid[k * self.hidden + j] = pre.tanh();
            }
        }
        logits.copy_from_slice(&w[self.bias_offset..]);
        for k in 0..self.heads {
            for j in 0..self.hidden {
                let a = hid[k * self.hidden + j];
                let o = self.out_index(k, j);
                for (l, wo) in logits.iter_mut().zip(&w[o..o + self.vocab]) {
                    *l += a * wo;
                }
            }
        }
    }

    /// Accumulate `d(sum_v dlogits[v] * logits[v]) / dw` into `grad`.
    pub fn backward(&self, w: &[f64], ctx: &[u32], hid: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        for (g, d) in grad[self.bias_offset..].iter_mut().zip(dlogits) {
            *g += d;
        }
        for k in 0..self.heads {
            for j in 0..self.hidden {
                let a = hid[k * self.hidden + j];
                let o = self.out_index(k, j);
                let mut dh = 0.0;
                for v in 0..self.vocab {
                    grad[o + v] += a * dlogits[v];
                    dh += w[o + v] * dlogits[v];
                }
                let dpre = dh * (1.0 - a * a);
                for (pos, &t) in ctx.iter().enumerate() {
                    grad[self.emb_index(k, pos, t as usize) + j] += dpre;
                }
            }
        }
    }
}

/// In-place log-softmax.
fn log_softmax(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    for l in logits {
        *l -= z;
    }
}

/// A toy model bound to a task. Minibatches are drawn from the full joint
/// distribution; the evaluation pairs are the support pairs with
/// `q(y|x) >= min_conditional`, weighted by `q(x, y)` renormalized.
pub struct TaskModel {
    pub task: SequenceTask,
    pub model: ToyModel,
    pub pairs: Vec<(usize, usize)>,
    eval_q: Vec<f64>,
    train_pairs: Vec<(usize, usize)>,
    sampler: WeightedIndex<f64>,
}

impl TaskModel {
    pub fn new(task: SequenceTask, spec: &ModelSpec) -> Result<Self, LabError> {
        Self::with_eval_threshold(task, spec, 0.0)
    }

    pub fn with_eval_threshold(task: SequenceTask, spec: &ModelSpec, min_conditional: f64) -> Result<Self, LabError> {
        task.validate()?;
        let model = ToyModel::new(task.vocab, task.context_len, spec)?;
        let train_pairs = task.support();
        let joint: Vec<f64> = train_pairs.iter().map(|&(x, y)| task.dist.joint(x, y)).collect();
        let sampler = WeightedIndex::new(&joint).map_err(|e| LabError::Config(e.to_string()))?;
        let pairs: Vec<(usize, usize)> = train_pairs
            .iter()
            .copied()
            .filter(|&(x, y)| task.dist.q_y_given_x[x][y] >= min_conditional)
            .collect();
        if pairs.is_empty() {
            return Err(LabError::Config(format!("no pair has q(y|x) >= {min_conditional}")));
        }
        let raw: Vec<f64> = pairs.iter().map(|&(x, y)| task.dist.joint(x, y)).collect();
        let total = exact_sum(raw.iter().copied());
        let eval_q = raw.iter().map(|p| p / total).collect();
        Ok(Self {
            task,
            model,
            pairs,
            eval_q,
            train_pairs,
            sampler,
        })
    }

    pub fn pair_ids(&self) -> Vec<String> {
        self.pairs
            .iter()
            .map(|&(x, y)| format!("{}>{}", self.task.dist.contexts[x], self.task.dist.tokens[y]))
            .collect()
    }

    pub fn pair_labels(&self) -> Option<Vec<usize>> {
        let l = self.task.labels.as_ref()?;
        Some(self.pairs.iter().map(|&(x, _)| l[x]).collect())
    }

    /// Exact loss and its gradient.
    pub fn full_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let (v, hd) = (self.model.vocab, self.model.heads * self.model.hidden);
        let (mut hid, mut lp, mut d) = (vec![0.0; hd], vec![0.0; v], vec![0.0; v]);
        let mut loss = 0.0;
        for (x, ctx) in self.task.contexts.iter().enumerate() {
            let qx = self.task.dist.q_x[x];
            let qy = &self.task.dist.q_y_given_x[x];
            self.model.forward(w, ctx, &mut hid, &mut lp);
            log_softmax(&mut lp);
            for y in 0..v {
                if qy[y] > 0.0 {
                    loss -= qx * qy[y] * lp[y];
                }
                d[y] = qx * (lp[y].exp() - qy[y]);
            }
            self.model.backward(w, ctx, &hid, &d, grad);
        }
        loss
    }
}

impl Posterior for TaskModel {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn components(&self) -> &[Vec<usize>] {
        self.model.components()
    }

    fn eval_weights(&self) -> &[f64] {
        &self.eval_q
    }

    fn eval_losses(&self, w: &[f64], out: &mut [f64]) {
        let hd = self.model.heads * self.model.hidden;
        let (mut hid, mut lp) = (vec![0.0; hd], vec![0.0; self.model.vocab]);
        let mut last = usize::MAX;
        for (o, &(x, y)) in out.iter_mut().zip(&self.pairs) {
            if x != last {
                self.model.forward(w, &self.task.contexts[x], &mut hid, &mut lp);
                log_softmax(&mut lp);
                last = x;
            }
            *o = -lp[y];
        }
    }

    fn population_loss(&self, w: &[f64]) -> f64 {
        let hd = self.model.heads * self.model.hidden;
        let (mut hid, mut lp) = (vec![0.0; hd], vec![0.0; self.model.vocab]);
        let mut terms = Vec::with_capacity(self.train_pairs.len());
        for (x, ctx) in self.task.contexts.iter().enumerate() {
            self.model.forward(w, ctx, &mut hid, &mut lp);
            log_softmax(&mut lp);
            for (y, &p) in self.task.dist.q_y_given_x[x].iter().enumerate() {
                if p > 0.0 {
                    terms.push(-self.task.dist.q_x[x] * p * lp[y]);
                }
            }
        }
        exact_sum(terms)
    }

    fn batch_grad(&self, w: &[f64], batch: usize, rng: &mut ChaCha8Rng, grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let (v, hd) = (self.model.vocab, self.model.heads * self.model.hidden);
        let (mut hid, mut lp, mut d) = (vec![0.0; hd], vec![0.0; v], vec![0.0; v]);
        let scale = 1.0 / batch as f64;
        let mut loss = 0.0;
        for _ in 0..batch {
            let (x, y) = self.train_pairs[self.sampler.sample(rng)];
            let ctx = &self.task.contexts[x];
            self.model.forward(w, ctx, &mut hid, &mut lp);
            log_softmax(&mut lp);
            loss -= scale * lp[y];
            for (t, dt) in d.iter_mut().enumerate() {
                *dt = scale * (lp[t].exp() - if t == y { 1.0 } else { 0.0 });
            }
            self.model.backward(w, ctx, &hid, &d, grad);
        }
        loss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub w_star: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
}

/// Full-batch Adam on the exact population loss.
pub fn train(tm: &TaskModel, spec: &ModelSpec, train: &TrainSpec) -> TrainResult {
    let mut w = tm.model.init(spec);
    let n = w.len();
    let (mut m, mut v, mut g) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let initial_loss = tm.population_loss(&w);
    for t in 1..=train.steps {
        tm.full_grad(&w, &mut g);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            w[i] -= train.learning_rate * mh / (vh.sqrt() + eps);
        }
    }
    let final_loss = tm.full_grad(&w, &mut g);
    TrainResult {
        w_star: w,
        initial_loss,
        final_loss,
        grad_norm: g.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    TwoMode { per_mode: usize, fidelity: f64 },
    Custom(SequenceTask),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::TwoMode {
            per_mode: 4,
            fidelity: 0.85,
        }
    }
}

impl TaskSpec {
    pub fn build(&self) -> Result<SequenceTask, LabError> {
        match self {
            TaskSpec::TwoMode { per_mode, fidelity } => two_mode_task(*per_mode, *fidelity),
            TaskSpec::Custom(t) => {
                t.validate()?;
                Ok(t.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    #[default]
    Sgld,
    Gaussian {
        lambda: f64,
    },
}

/// Experiment configuration: sampler fields at the top level, plus task,
/// model, training and posterior sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub training: TrainSpec,
    pub posterior: PosteriorKind,
    /// Evaluate only pairs with `q(y|x)` at least this large.
    pub eval_min_conditional: f64,
}

/// Evaluation pair metadata written next to a draws file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub row_ids: Vec<String>,
    pub component_ids: Vec<String>,
    pub pairs: Vec<(usize, usize)>,
    pub contexts: Vec<Vec<u32>>,
    pub labels: Option<Vec<usize>>,
    pub initial_loss: f64,
    pub trained_loss: f64,
}

pub struct LabRun {
    pub draws: PosteriorDraws,
    pub meta: DrawsMeta,
}

/// Build the task, train, and sample.
pub fn run_lab(cfg: &LabConfig) -> Result<LabRun, LabError> {
    let task = cfg.task.build()?;
    let tm = TaskModel::with_eval_threshold(task, &cfg.model, cfg.eval_min_conditional)?;
    let trained = train(&tm, &cfg.model, &cfg.training);
    let draws = match cfg.posterior {
        PosteriorKind::Sgld => sgld_sample(&tm, &trained.w_star, &cfg.sampler)?,
        PosteriorKind::Gaussian { lambda } => gaussian_sample(&tm, &trained.w_star, lambda, &cfg.sampler)?,
    };
    let meta = DrawsMeta {
        row_ids: tm.pair_ids(),
        component_ids: tm.model.component_names.clone(),
        pairs: tm.pairs.clone(),
        contexts: tm.pairs.iter().map(|&(x, _)| tm.task.contexts[x].clone()).collect(),
        labels: tm.pair_labels(),
        initial_loss: trained.initial_loss,
        trained_loss: trained.final_loss,
    };
    Ok(LabRun { draws, meta })
}

/// Quadratic test model: `l_i(w) = w^T B_i w / 2` for evaluation item `i`,
/// population loss `w^T A w / 2` with `A = sum_i q_i B_i`. Gradients are
/// exact (no minibatch noise).
#[derive(Clone, Debug)]
pub struct QuadraticModel {
    pub items: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    pub dim: usize,
    pub components: Vec<Vec<usize>>,
}

impl QuadraticModel {
    /// `items` are row-major symmetric `dim x dim` matrices.
    pub fn new(dim: usize, items: Vec<Vec<f64>>, q: Vec<f64>, components: Vec<Vec<usize>>) -> Result<Self, LabError> {
        if items.len() != q.len() || items.iter().any(|b| b.len() != dim * dim) {
            return Err(LabError::Shape("quadratic items do not match".into()));
        }
        let mut a = vec![0.0; dim * dim];
        for (b, &qi) in items.iter().zip(&q) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += qi * y;
            }
        }
        Ok(Self {
            items,
            q,
            a,
            dim,
            components,
        })
    }

    /// Isotropic model `L(w) = lambda |w|^2 / 2` with one evaluation item.
    pub fn isotropic(dim: usize, lambda: f64) -> Self {
        let mut b = vec![0.0; dim * dim];
        for i in 0..dim {
            b[i * dim + i] = lambda;
        }
        Self::new(dim, vec![b], vec![1.0], vec![(0..dim).collect()]).expect("consistent shapes")
    }

    fn quad(&self, m: &[f64], w: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            let mut r = 0.0;
            for j in 0..self.dim {
                r += m[i * self.dim + j] * w[j];
            }
            s += w[i] * r;
        }
        0.5 * s
    }
}

impl Posterior for QuadraticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    fn eval_weights(&self) -> &[f64] {
        &self.q
    }

    fn eval_losses(&self, w: &[f64], out: &mut [f64]) {
        for (o, b) in out.iter_mut().zip(&self.items) {
            *o = self.quad(b, w);
        }
    }

    fn population_loss(&self, w: &[f64]) -> f64 {
        self.quad(&self.a, w)
    }

    fn batch_grad(&self, w: &[f64], _batch: usize, _rng: &mut ChaCha8Rng, grad: &mut [f64]) -> f64 {
        for i in 0..self.dim {
            grad[i] = (0..self.dim).map(|j| self.a[i * self.dim + j] * w[j]).sum();
        }
        self.quad(&self.a, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task_model() -> TaskModel {
        let task = two_mode_task(2, 0.8).unwrap();
        TaskModel::new(
            task,
            &ModelSpec {
                heads: 1,
                hidden: 2,
                init_scale: 0.5,
                seed: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let cfg = SamplerConfig {
            steps_between_draws: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
        let cfg: LabConfig =
            serde_json::from_str(r#"{"gamma": 100, "task": {"kind": "two_mode", "per_mode": 3, "fidelity": 0.9}}"#)
                .unwrap();
        assert_eq!(cfg.sampler.gamma, 100.0);
        assert_eq!(cfg.sampler.steps_between_draws, 55);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let tm = small_task_model();
        let w = tm.model.init(&ModelSpec {
            seed: 11,
            ..Default::default()
        });
        let mut g = vec![0.0; tm.dim()];
        let l0 = tm.full_grad(&w, &mut g);
        assert!((l0 - tm.population_loss(&w)).abs() < 1e-12);
        for i in (0..tm.dim()).step_by(3) {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += 1e-6;
            wm[i] -= 1e-6;
            let fd = (tm.population_loss(&wp) - tm.population_loss(&wm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn phi_is_local_and_zero_at_optimum() {
        let tm = small_task_model();
        let w_star = tm.model.init(&ModelSpec::default());
        for c in 0..2 {
            assert_eq!(observable_phi(&tm, &w_star, &w_star, c), 0.0);
        }
        let mut w = w_star.clone();
        for &i in &tm.components()[0] {
            w[i] += 0.1;
        }
        assert_eq!(observable_phi(&tm, &w_star, &w, 1), 0.0);
        assert!(observable_phi(&tm, &w_star, &w, 0) != 0.0);
        // moving the bias touches no component
        let mut wb = w_star.clone();
        *wb.last_mut().unwrap() += 1.0;
        assert_eq!(observable_phi(&tm, &w_star, &wb, 0), 0.0);
    }

    #[test]
    fn phi_matches_naive_reevaluation() {
        let tm = small_task_model();
        let w_star = tm.model.init(&ModelSpec::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = w_star
            .iter()
            .map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // independent path: softmax probabilities, then sum q log p
        let naive = |w: &[f64]| {
            let m = &tm.model;
            let mut total = 0.0;
            for (x, ctx) in tm.task.contexts.iter().enumerate() {
                let mut logits = vec![0.0; m.vocab];
                for (v, l) in logits.iter_mut().enumerate() {
                    *l = w[m.bias_offset + v];
                    for k in 0..m.heads {
                        for j in 0..m.hidden {
                            let pre: f64 = ctx
                                .iter()
                                .enumerate()
                                .map(|(p, &t)| w[m.emb_index(k, p, t as usize) + j])
                                .sum();
                            *l += pre.tanh() * w[m.out_index(k, j) + v];
                        }
                    }
                }
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (y, &p) in tm.task.dist.q_y_given_x[x].iter().enumerate() {
                    if p > 0.0 {
                        total -= tm.task.dist.q_x[x] * p * (logits[y].exp() / z).ln();
                    }
                }
            }
            total
        };
        for c in 0..2 {
            let mut hybrid = w_star.clone();
            for &i in &tm.components()[c] {
                hybrid[i] = w[i];
            }
            let want = naive(&hybrid) - naive(&w_star);
            assert!((observable_phi(&tm, &w_star, &w, c) - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_covariance() {
        let draws = PosteriorDraws {
            chains: 1,
            draws: 2,
            h: 1,
            n_eval: 2,
            phi: vec![0.0, 1.0],
            // item 0 carries all weight, so L = l_0 and item 1 deviates by (0, 1)
            losses: vec![5.0, 5.0, 7.0, 8.0],
            population: vec![5.0, 7.0],
            eval_q: vec![1.0, 0.0],
        };
        let m = per_token_susceptibility(&draws, Pooling::Pooled).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 0), -0.25);
        let one = PosteriorDraws {
            draws: 1,
            phi: vec![0.0],
            losses: vec![5.0, 5.0],
            population: vec![5.0],
            ..draws
        };
        assert!(per_token_susceptibility(&one, Pooling::Pooled).is_err());
    }

    fn sample_toy(seed: u64) -> (TaskModel, PosteriorDraws) {
        let tm = small_task_model();
        let spec = ModelSpec::default();
        let w_star = train(
            &tm,
            &spec,
            &TrainSpec {
                steps: 200,
                learning_rate: 0.05,
            },
        )
        .w_star;
        let cfg = SamplerConfig {
            chains: 3,
            draws: 20,
            steps_between_draws: 5,
            rng_seed: seed,
            ..Default::default()
        };
        let d = sgld_sample(&tm, &w_star, &cfg).unwrap();
        (tm, d)
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let (tm, a) = sample_toy(7);
        let (_, b) = sample_toy(7);
        assert_eq!(a, b);
        let (_, c) = sample_toy(8);
        assert_ne!(a.phi, c.phi);
        let m = per_token_susceptibility(&a, Pooling::Pooled).unwrap();
        for comp in 0..m.cols() {
            let s = exact_sum((0..m.rows()).map(|i| tm.eval_weights()[i] * m.get(i, comp)));
            assert!(s.abs() <= 1e-12, "{s}");
        }
        let per = per_token_susceptibility(&a, Pooling::PerChain).unwrap();
        assert_eq!(per.rows(), m.rows());
    }

    #[test]
    fn chain_order_does_not_matter() {
        let (_, d) = sample_toy(9);
        let a = per_token_susceptibility(&d, Pooling::Pooled).unwrap();
        let b = per_token_susceptibility(&d.select_chains(&[2, 0, 1]), Pooling::Pooled).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn draws_file_round_trip() {
        let (_, d) = sample_toy(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.drws");
        d.save(&p).unwrap();
        let back = PosteriorDraws::load(&p).unwrap();
        assert_eq!(back.eval_q, d.eval_q);
        for (a, b) in back.phi.iter().zip(&d.phi) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = std::fs::read(&p).unwrap();
        assert!(matches!(
            PosteriorDraws::decode(&bytes[..bytes.len() - 3]),
            Err(LabError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PosteriorDraws::decode(&bad), Err(LabError::Format(_))));
    }

    #[test]
    fn divergence_names_chain_and_step() {
        let model = QuadraticModel::isotropic(3, 1.0);
        let cfg = SamplerConfig {
            step_eps: 1e9,
            chains: 2,
            draws: 5,
            steps_between_draws: 5,
            ..Default::default()
        };
        match sgld_sample(&model, &[0.0; 3], &cfg) {
            Err(LabError::Divergence { chain, step, .. }) => {
                assert!(chain < 2 && step >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_point_mass_limit() {
        let tm = small_task_model();
        let w_star = tm.model.init(&ModelSpec::default());
        let cfg = SamplerConfig {
            chains: 2,
            draws: 10,
            ..Default::default()
        };
        let d = gaussian_sample(&tm, &w_star, 1e-20, &cfg).unwrap();
        // draws sit within ~1e-10 of w*, so phi is first order in that offset
        assert!(d.phi.iter().all(|p| p.abs() < 1e-8));
        let m = per_token_susceptibility(&d, Pooling::Pooled).unwrap();
        assert!(m.values().iter().all(|v| v.abs() < 1e-18));
        assert!(matches!(
            gaussian_sample(&tm, &w_star, 0.0, &cfg),
            Err(LabError::Domain(_))
        ));
        assert_eq!(d, gaussian_sample(&tm, &w_star, 1e-20, &cfg).unwrap());
    }

    #[test]
    fn pattern_and_perturbation_aggregates() {
        let m = SusceptibilityMatrix::new(3, 2, vec![1.0, 2.0, -3.0, 0.5, 2.0, -2.5]).unwrap();
        assert_eq!(per_pattern_susceptibility(&m, &[1]).unwrap(), vec![-3.0, 0.5]);
        assert_eq!(per_pattern_susceptibility(&m, &[0, 1]).unwrap(), vec![-1.0, 1.25]);
        assert!(per_pattern_susceptibility(&m, &[]).is_err());
        assert_eq!(
            perturbation_susceptibility(&m, &[0.0, 1.0, 0.0]).unwrap(),
            vec![-3.0, 0.5]
        );
        assert!(perturbation_susceptibility(&m, &[0.5, 0.6, 0.0]).is_err());
        // all rows of a centered matrix under uniform weights
        let all = per_pattern_susceptibility(&m, &[0, 1, 2]).unwrap();
        assert!(all.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mixture_with_base_distribution() {
        let (tm, d) = sample_toy(5);
        let m = per_token_susceptibility(&d, Pooling::Pooled).unwrap();
        let q = tm.eval_weights();
        let base = perturbation_susceptibility(&m, q).unwrap();
        assert!(base.iter().all(|v| v.abs() <= 1e-10));
        let p = 3;
        let mix: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(i, v)| 0.9 * v + if i == p { 0.1 } else { 0.0 })
            .collect();
        let got = perturbation_susceptibility(&m, &mix).unwrap();
        for (g, r) in got.iter().zip(m.row(p)) {
            assert!((g - 0.1 * r).abs() <= 1e-10);
        }
    }

    #[test]
    fn two_mode_task_shape() {
        let t = two_mode_task(4, 0.85).unwrap();
        assert_eq!(t.contexts.len(), 64);
        assert_eq!(t.vocab, 10);
        assert_eq!(t.support().len(), 64 * 9);
        let labels = t.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 32);
        assert_eq!(t.dist.q_y_given_x[0][8], 0.85);
        assert_eq!(t.dist.q_y_given_x[63][9], 0.85);
        assert!(two_mode_task(0, 0.5).is_err() && two_mode_task(3, 1.0).is_err());
    }
}
