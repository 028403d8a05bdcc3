//! Mode decomposition of a finite conditional distribution q(y|x).
//!
//! The whitened operator `M'[y][x] = sqrt(q(x)) q(y|x)` is decomposed with a
//! dense SVD. Right vectors are stored in the `1/q(x)`-weighted context
//! geometry (`v_a(x) = sqrt(q(x)) * vt_a(x)`), left vectors in the plain
//! token geometry. Both bases are completed to full orthonormal bases, so
//! mode pairs `(a, b)` range over all contexts times all tokens and the
//! basis functions
//!
//! ```text
//! e_ab(x)(y) = v_a(x) / q(x) * u_b(y)
//! ```
//!
//! are orthonormal in `L2(q(x); R^tokens)`. The propensity of a pair is
//! `s_ab(xy) = e_ab(x)(y)`.
//!
//! Inverting `chi_xy = sum s_ab(xy) chi_ab - chibar` is only possible up to
//! the gauge direction `c_ab = <1, e_ab>`: adding `c_ab * g` to every
//! `chi_ab` leaves every `chi_xy` unchanged. The inversion therefore takes
//! an anchor, either the known `chibar` or the minimum-norm gauge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::exact_sum;

/// Tolerance for probability normalization.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Largest acceptable `|sum_xy q(x, y) chi_xy|` for an inversion input.
pub const CENTERING_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModeError {
    #[error("invalid distribution: {0}")]
    Validation(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("toy parameter a = {0} must lie strictly between 0 and 1")]
    Domain(f64),
    #[error("susceptibility table is not centered: |E_q chi| = {0:.3e}")]
    NotCentered(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Finite joint distribution `q(x) q(y|x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub contexts: Vec<String>,
    pub tokens: Vec<String>,
    pub q_x: Vec<f64>,
    /// Rows are contexts, columns tokens.
    pub q_y_given_x: Vec<Vec<f64>>,
}

impl DiscreteDistribution {
    pub fn new(q_x: Vec<f64>, q_y_given_x: Vec<Vec<f64>>) -> Result<Self, ModeError> {
        let nx = q_x.len();
        let ny = q_y_given_x.first().map_or(0, Vec::len);
        let d = Self {
            contexts: (0..nx).map(|i| format!("x{i}")).collect(),
            tokens: (0..ny).map(|j| format!("y{j}")).collect(),
            q_x,
            q_y_given_x,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ModeError> {
        let bad = |m: String| Err(ModeError::Validation(m));
        let nx = self.q_x.len();
        if nx == 0 || self.tokens.is_empty() {
            return bad("need at least one context and one token".into());
        }
        if self.contexts.len() != nx || self.q_y_given_x.len() != nx {
            return bad(format!(
                "{} context ids, {} marginals, {} conditional rows",
                self.contexts.len(),
                nx,
                self.q_y_given_x.len()
            ));
        }
        if let Some(i) = self.q_x.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
            return bad(format!("q(x) must be positive, got {} at context {i}", self.q_x[i]));
        }
        let total = exact_sum(self.q_x.iter().copied());
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return bad(format!("q(x) sums to {total}"));
        }
        for (i, row) in self.q_y_given_x.iter().enumerate() {
            if row.len() != self.tokens.len() {
                return bad(format!("conditional row {i} has {} entries", row.len()));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("conditional row {i} has an entry outside [0, 1]"));
            }
            let s = exact_sum(row.iter().copied());
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("conditional row {i} sums to {s}"));
            }
        }
        Ok(())
    }

    pub fn n_contexts(&self) -> usize {
        self.q_x.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Joint probability `q(x, y)`.
    pub fn joint(&self, x: usize, y: usize) -> f64 {
        self.q_x[x] * self.q_y_given_x[x][y]
    }

    /// The whitened operator, tokens by contexts.
    pub fn whitened(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_tokens(), self.n_contexts(), |y, x| {
            self.q_x[x].sqrt() * self.q_y_given_x[x][y]
        })
    }
}

/// Full mode basis of a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDecomposition {
    /// `s_a` for every context-side index `a`, descending; zero past the rank.
    pub singular_values: Vec<f64>,
    /// Number of singular values above the numerical rank cutoff.
    pub rank: usize,
    /// `right[a][x] = v_a(x)`, orthonormal under `<x, x'> = delta / q(x)`.
    pub right: Vec<Vec<f64>>,
    /// `left[b][y] = u_b(y)`, orthonormal under the plain inner product.
    pub left: Vec<Vec<f64>>,
    /// Whitening record: the context marginal defining the weighted geometry.
    pub q_x: Vec<f64>,
}

fn first_nonzero_negative(v: &[f64]) -> bool {
    v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0)
}

/// Extend orthonormal columns to a full orthonormal basis of `R^n` by
/// Gram-Schmidt over the standard basis, taking the largest residual first.
fn complete_basis(mut cols: Vec<DVector<f64>>, n: usize) -> Vec<DVector<f64>> {
    while cols.len() < n {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            // twice for numerical orthogonality
            for _ in 0..2 {
                for c in &cols {
                    let p = c.dot(&e);
                    e -= c * p;
                }
            }
            let norm = e.norm();
            if best.as_ref().is_none_or(|b| norm > b.0 + 1e-12) {
                best = Some((norm, e));
            }
        }
        let (norm, e) = best.expect("n > 0");
        let mut e = e / norm;
        if first_nonzero_negative(e.as_slice()) {
            e = -e;
        }
        cols.push(e);
    }
    cols
}

/// Whitened SVD with sign convention (first nonzero entry of each left
/// vector positive) and completed bases.
pub fn mode_decompose(d: &DiscreteDistribution) -> Result<ModeDecomposition, ModeError> {
    d.validate()?;
    let (nx, ny) = (d.n_contexts(), d.n_tokens());
    let m = d.whitened();
    let svd = m.svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * 1e-12 * nx.max(ny) as f64;

    let mut s = Vec::with_capacity(nx);
    let mut lefts = Vec::new();
    let mut rights = Vec::new();
    for &i in &order {
        let mut ui: DVector<f64> = u.column(i).into_owned();
        let mut vi: DVector<f64> = vt.row(i).transpose().into_owned();
        let si = svd.singular_values[i];
        if si > cutoff {
            if first_nonzero_negative(ui.as_slice()) {
                ui = -ui;
                vi = -vi;
            }
            s.push(si);
            lefts.push(ui);
            rights.push(vi);
        }
    }
    let rank = s.len();
    let lefts = complete_basis(lefts, ny);
    let rights = complete_basis(rights, nx);
    s.resize(nx, 0.0);
    Ok(ModeDecomposition {
        singular_values: s,
        rank,
        right: rights
            .iter()
            .map(|v| v.iter().zip(&d.q_x).map(|(a, q)| a * q.sqrt()).collect())
            .collect(),
        left: lefts.iter().map(|c| c.iter().copied().collect()).collect(),
        q_x: d.q_x.clone(),
    })
}

impl ModeDecomposition {
    pub fn n_contexts(&self) -> usize {
        self.q_x.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.left.len()
    }

    /// `s_a`, zero for indices past the number of contexts.
    pub fn s(&self, a: usize) -> f64 {
        self.singular_values.get(a).copied().unwrap_or(0.0)
    }

    /// Dual evaluation `v_a(x) / q(x)`.
    pub fn v_dual(&self, a: usize, x: usize) -> f64 {
        self.right[a][x] / self.q_x[x]
    }

    /// Basis function value `e_ab(x)(y)`.
    pub fn e(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.v_dual(a, x) * self.left[b][y]
    }

    fn check(&self, x: usize, y: usize) -> Result<(), ModeError> {
        if x >= self.n_contexts() || y >= self.n_tokens() {
            return Err(ModeError::Index(format!(
                "(x = {x}, y = {y}) outside {} contexts x {} tokens",
                self.n_contexts(),
                self.n_tokens()
            )));
        }
        Ok(())
    }

    /// Propensity profile `s_ab(xy)`, indexed `[a][b]`.
    pub fn propensity(&self, x: usize, y: usize) -> Result<Vec<Vec<f64>>, ModeError> {
        self.check(x, y)?;
        Ok((0..self.n_contexts())
            .map(|a| {
                let va = self.v_dual(a, x);
                (0..self.n_tokens()).map(|b| va * self.left[b][y]).collect()
            })
            .collect())
    }

    /// Gauge coefficients `c_ab = <1, e_ab> = (sum_x v_a(x)) (sum_y u_b(y))`.
    pub fn gauge(&self) -> Vec<Vec<f64>> {
        let vs: Vec<f64> = self.right.iter().map(|v| v.iter().sum()).collect();
        let us: Vec<f64> = self.left.iter().map(|u| u.iter().sum()).collect();
        vs.iter().map(|a| us.iter().map(|b| a * b).collect()).collect()
    }

    /// Coefficient of `chibar` in the diagonal self-consistency equation,
    /// `1 - sum_a s_a c_aa`. It vanishes identically (the diagonal system
    /// cannot determine `chibar`); its size is a round-off diagnostic.
    pub fn diagonal_coefficient(&self) -> f64 {
        let c = self.gauge();
        let k = self.n_contexts().min(self.n_tokens());
        1.0 - (0..k).map(|a| self.s(a) * c[a][a]).sum::<f64>()
    }

    /// Mean propensity over a set of pairs, indexed `[a][b]`.
    pub fn average_propensity(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<f64>>, ModeError> {
        let (nx, ny) = (self.n_contexts(), self.n_tokens());
        let mut acc = vec![vec![0.0; ny]; nx];
        for &(x, y) in pairs {
            let p = self.propensity(x, y)?;
            for a in 0..nx {
                for b in 0..ny {
                    acc[a][b] += p[a][b];
                }
            }
        }
        let n = pairs.len().max(1) as f64;
        for row in &mut acc {
            for v in row {
                *v /= n;
            }
        }
        Ok(acc)
    }
}

/// Loss table `l[x][y]` in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub loss: Vec<Vec<f64>>,
}

impl LossProfile {
    pub fn population_loss(&self, d: &DiscreteDistribution) -> f64 {
        let mut terms = Vec::new();
        for x in 0..d.n_contexts() {
            for y in 0..d.n_tokens() {
                terms.push(d.joint(x, y) * self.loss[x][y]);
            }
        }
        exact_sum(terms)
    }

    fn check(&self, md: &ModeDecomposition) -> Result<(), ModeError> {
        if self.loss.len() != md.n_contexts() || self.loss.iter().any(|r| r.len() != md.n_tokens()) {
            return Err(ModeError::Shape("loss table does not match the distribution".into()));
        }
        if self.loss.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModeError::Shape("loss table has non-finite entries".into()));
        }
        Ok(())
    }
}

/// `Phi_ab = <Phi, e_ab>` with `Phi(x) = sum_y l_xy y`, indexed `[a][b]`.
pub fn loss_modes(md: &ModeDecomposition, lp: &LossProfile) -> Result<Vec<Vec<f64>>, ModeError> {
    lp.check(md)?;
    let (nx, ny) = (md.n_contexts(), md.n_tokens());
    // <Phi, e_ab> = sum_x q(x) sum_y l_xy e_ab(x)(y) = sum_x v_a(x) sum_y l_xy u_b(y)
    let proj: Vec<Vec<f64>> = (0..nx)
        .map(|x| {
            (0..ny)
                .map(|b| (0..ny).map(|y| lp.loss[x][y] * md.left[b][y]).sum())
                .collect()
        })
        .collect();
    Ok((0..nx)
        .map(|a| {
            (0..ny)
                .map(|b| (0..nx).map(|x| md.right[a][x] * proj[x][b]).sum())
                .collect()
        })
        .collect())
}

/// Right-hand side of `l_xy - L = sum_ab (s_ab(xy) - delta_ab s_a) Phi_ab`.
pub fn decompose_loss_deviation(
    md: &ModeDecomposition,
    lp: &LossProfile,
    x: usize,
    y: usize,
) -> Result<f64, ModeError> {
    let phi = loss_modes(md, lp)?;
    deviation_from_modes(md, &phi, x, y)
}

/// Same as [`decompose_loss_deviation`] with precomputed `Phi_ab`.
pub fn deviation_from_modes(md: &ModeDecomposition, phi: &[Vec<f64>], x: usize, y: usize) -> Result<f64, ModeError> {
    let p = md.propensity(x, y)?;
    let mut acc = 0.0;
    for (a, row) in p.iter().enumerate() {
        for (b, &sab) in row.iter().enumerate() {
            let diag = if a == b { md.s(a) } else { 0.0 };
            acc += (sab - diag) * phi[a][b];
        }
    }
    Ok(acc)
}

/// Mode susceptibilities: one `H`-vector per pair `(a, b)`, row-major over
/// `a * n_tokens + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeChi {
    pub n_contexts: usize,
    pub n_tokens: usize,
    pub h: usize,
    pub values: Vec<Vec<f64>>,
}

impl ModeChi {
    pub fn zeros(n_contexts: usize, n_tokens: usize, h: usize) -> Self {
        Self {
            n_contexts,
            n_tokens,
            h,
            values: vec![vec![0.0; h]; n_contexts * n_tokens],
        }
    }

    pub fn get(&self, a: usize, b: usize) -> &[f64] {
        &self.values[a * self.n_tokens + b]
    }

    pub fn get_mut(&mut self, a: usize, b: usize) -> &mut Vec<f64> {
        &mut self.values[a * self.n_tokens + b]
    }
}

/// `chibar = sum_a s_a chi_aa`.
pub fn chi_bar(md: &ModeDecomposition, chi: &ModeChi) -> Vec<f64> {
    let k = md.n_contexts().min(md.n_tokens());
    let mut out = vec![0.0; chi.h];
    for a in 0..k {
        for (o, v) in out.iter_mut().zip(chi.get(a, a)) {
            *o += md.s(a) * v;
        }
    }
    out
}

/// Forward map `chi_xy = sum_ab s_ab(xy) chi_ab - chibar`; rows are
/// `x * n_tokens + y`.
pub fn forward_chi(md: &ModeDecomposition, chi: &ModeChi) -> Result<Vec<Vec<f64>>, ModeError> {
    let (nx, ny) = (md.n_contexts(), md.n_tokens());
    if chi.n_contexts != nx || chi.n_tokens != ny {
        return Err(ModeError::Shape(format!(
            "mode table is {} x {}, decomposition is {nx} x {ny}",
            chi.n_contexts, chi.n_tokens
        )));
    }
    let bar = chi_bar(md, chi);
    let mut out = Vec::with_capacity(nx * ny);
    for x in 0..nx {
        for y in 0..ny {
            let mut v: Vec<f64> = bar.iter().map(|b| -b).collect();
            for a in 0..nx {
                let va = md.v_dual(a, x);
                for b in 0..ny {
                    let sab = va * md.left[b][y];
                    for (o, c) in v.iter_mut().zip(chi.get(a, b)) {
                        *o += sab * c;
                    }
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// How the inversion fixes the unidentifiable gauge direction.
#[derive(Clone, Debug, PartialEq)]
pub enum ChiBarAnchor {
    /// `chibar` is known (for instance `-Cov[phi, L]` from posterior draws).
    Known(Vec<f64>),
    /// Pick the solution with `sum_ab c_ab chi_ab = 0`, which is the one of
    /// minimum norm.
    MinNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub chi: ModeChi,
    pub chi_bar: Vec<f64>,
    /// `m_ab = sum_xy s_ab(xy) q(x) chi_xy`.
    pub projections: ModeChi,
    pub gauge: Vec<Vec<f64>>,
    /// See [`ModeDecomposition::diagonal_coefficient`].
    pub diagonal_coefficient: f64,
    /// `|sum_xy q(x, y) chi_xy|` (max over components).
    pub centering: f64,
}

/// Recover mode susceptibilities from per-token ones.
///
/// Uses `sum_xy s_ab(xy) q(x) chi_xy = chi_ab - c_ab chibar`, with the
/// measure `q(x)` times counting over `y` (not the joint `q(x, y)`).
pub fn mode_susceptibilities(
    md: &ModeDecomposition,
    d: &DiscreteDistribution,
    chi_xy: &[Vec<f64>],
    anchor: &ChiBarAnchor,
) -> Result<InversionResult, ModeError> {
    let (nx, ny) = (md.n_contexts(), md.n_tokens());
    if d.n_contexts() != nx || d.n_tokens() != ny {
        return Err(ModeError::Shape("distribution does not match the decomposition".into()));
    }
    if chi_xy.len() != nx * ny {
        return Err(ModeError::Shape(format!(
            "{} rows of chi for {nx} x {ny} pairs",
            chi_xy.len()
        )));
    }
    let h = chi_xy.first().map_or(0, Vec::len);
    if chi_xy.iter().any(|r| r.len() != h) {
        return Err(ModeError::Shape("ragged chi table".into()));
    }
    let centering = (0..h)
        .map(|k| exact_sum((0..nx * ny).map(|i| d.joint(i / ny, i % ny) * chi_xy[i][k])).abs())
        .fold(0.0, f64::max);
    if centering > CENTERING_TOL {
        return Err(ModeError::NotCentered(centering));
    }
    // m_ab = sum_x v_a(x) sum_y u_b(y) chi_xy, since s_ab(xy) q(x) = v_a(x) u_b(y)
    let mut proj_y = vec![vec![vec![0.0; h]; ny]; nx];
    for x in 0..nx {
        for b in 0..ny {
            for y in 0..ny {
                let ub = md.left[b][y];
                for (o, c) in proj_y[x][b].iter_mut().zip(&chi_xy[x * ny + y]) {
                    *o += ub * c;
                }
            }
        }
    }
    let mut m = ModeChi::zeros(nx, ny, h);
    for a in 0..nx {
        for b in 0..ny {
            let dst = m.get_mut(a, b);
            for x in 0..nx {
                let va = md.right[a][x];
                for (o, c) in dst.iter_mut().zip(&proj_y[x][b]) {
                    *o += va * c;
                }
            }
        }
    }
    let gauge = md.gauge();
    let bar = match anchor {
        ChiBarAnchor::Known(v) => {
            if v.len() != h {
                return Err(ModeError::Shape(format!(
                    "anchor has {} components, chi has {h}",
                    v.len()
                )));
            }
            v.clone()
        }
        ChiBarAnchor::MinNorm => {
            // chi_ab = m_ab + c_ab g with sum c_ab chi_ab = 0, and sum c^2 = n_tokens
            let cc: f64 = gauge.iter().flatten().map(|c| c * c).sum();
            let mut g = vec![0.0; h];
            for a in 0..nx {
                for b in 0..ny {
                    for (o, v) in g.iter_mut().zip(m.get(a, b)) {
                        *o -= gauge[a][b] * v / cc;
                    }
                }
            }
            g
        }
    };
    let mut chi = m.clone();
    for a in 0..nx {
        for b in 0..ny {
            let c = gauge[a][b];
            for (o, g) in chi.get_mut(a, b).iter_mut().zip(&bar) {
                *o += c * g;
            }
        }
    }
    let chi_bar = chi_bar(md, &chi);
    Ok(InversionResult {
        chi,
        chi_bar,
        projections: m,
        gauge,
        diagonal_coefficient: md.diagonal_coefficient(),
        centering,
    })
}

/// The three-context, two-token distribution of the capitalize/newline toy:
/// contexts `(x_C, x_N, x_E)`, tokens `(y_C, y_N)`, `q(x) = 1/3`.
pub fn toy_distribution(a: f64) -> Result<DiscreteDistribution, ModeError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(ModeError::Domain(a));
    }
    let b = 1.0 - a;
    let third = 1.0 / 3.0;
    Ok(DiscreteDistribution {
        contexts: vec!["x_C".into(), "x_N".into(), "x_E".into()],
        tokens: vec!["y_C".into(), "y_N".into()],
        q_x: vec![third, third, 1.0 - 2.0 * third],
        q_y_given_x: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![a, b]],
    })
}

/// Closed-form modes of the toy distribution (vectors unnormalized).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyModes {
    pub a: f64,
    pub s: [f64; 2],
    pub u: [[f64; 2]; 2],
    pub v: [[f64; 3]; 2],
}

pub fn toy_oracle(a: f64) -> Result<ToyModes, ModeError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(ModeError::Domain(a));
    }
    let b = 1.0 - a;
    Ok(ToyModes {
        a,
        s: [(2.0 * (1.0 - a * b) / 3.0).sqrt(), 1.0 / 3f64.sqrt()],
        u: [[a, b], [b, -a]],
        v: [[a, b, 1.0 - 2.0 * a * b], [b, -a, 0.0]],
    })
}
