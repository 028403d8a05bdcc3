//! Acceptance suite. Each test prints one `acceptance N ... PASS|FAIL` line
//! to the real stdout (not captured) and then asserts.
//!
//! Run with `cargo test --release -p spectro --test acceptance`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectro::cluster::{
    conductance, iterative_discover, push_ppr, sweep_cut, sweep_ordering, ClusterRunParams, MaskedGraph, SweepOrder,
};
use spectro::graph::{knn_graph, Points, WeightedGraph};
use spectro::ingest::preprocess;
use spectro::lab::{
    gaussian_sample, per_token_susceptibility, run_lab, sgld_sample, LabConfig, ModelSpec, Pooling, PosteriorDraws,
    PosteriorKind, QuadraticModel, SamplerConfig, TaskSpec,
};
use spectro::modes::{
    chi_bar, decompose_loss_deviation, forward_chi, mode_decompose, mode_susceptibilities, toy_distribution,
    ChiBarAnchor, DiscreteDistribution, LossProfile, ModeChi,
};
use spectro::numeric::exact_sum;
use spectro::sae::{match_clusters, ActivationContext, MatchParams};

/// Criteria run one at a time so wall-clock budgets are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "\nacceptance {n:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "acceptance {n} {name} failed: {detail}");
}

fn random_distribution(rng: &mut ChaCha8Rng, nx: usize, ny: usize) -> DiscreteDistribution {
    let mut simplex = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let q_x = simplex(nx);
    let rows = (0..nx).map(|_| simplex(ny)).collect();
    DiscreteDistribution::new(q_x, rows).unwrap()
}

#[test]
fn toy_modes_match_closed_form() {
    let _g = serial();
    let t = Instant::now();
    let mut worst_s: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    let mut half = (0.0, 0.0);
    for k in 1..=9 {
        let a = k as f64 / 10.0;
        let b = 1.0 - a;
        let md = mode_decompose(&toy_distribution(a).unwrap()).unwrap();
        let s1 = (2.0 * (1.0 - a * b) / 3.0).sqrt();
        let s2 = 1.0 / 3f64.sqrt();
        worst_s = worst_s.max((md.s(0) - s1).abs()).max((md.s(1) - s2).abs());
        // x_E is the third context
        worst_v = worst_v.max(md.right[1][2].abs());
    }
    let md = mode_decompose(&toy_distribution(0.5).unwrap()).unwrap();
    half.0 = (md.s(0) - 0.5f64.sqrt()).abs();
    half.1 = (md.s(1) - 1.0 / 3f64.sqrt()).abs();
    let elapsed = t.elapsed();
    let pass =
        worst_s <= 1e-10 && worst_v <= 1e-10 && half.0 <= 1e-10 && half.1 <= 1e-10 && elapsed < Duration::from_secs(1);
    report(
        1,
        "toy-model modes",
        pass,
        &format!(
            "max |s - closed form| {worst_s:.2e}, max |v2(x_E)| {worst_v:.2e}, a=1/2 errors {:.1e}/{:.1e}, {elapsed:.2?}",
            half.0, half.1
        ),
    );
}

#[test]
fn decomposition_identities() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut lemma, mut lib_lemma, mut round_trip): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let nx = rng.random_range(1..=20);
        let ny = rng.random_range(1..=10);
        let d = random_distribution(&mut rng, nx, ny);
        let md = mode_decompose(&d).unwrap();
        let loss: Vec<Vec<f64>> = (0..nx)
            .map(|_| (0..ny).map(|_| rng.random_range(0.0..5.0)).collect())
            .collect();
        let lp = LossProfile { loss: loss.clone() };
        let pop: f64 = (0..nx)
            .flat_map(|x| (0..ny).map(move |y| (x, y)))
            .map(|(x, y)| d.q_x[x] * d.q_y_given_x[x][y] * loss[x][y])
            .sum();
        // test-side Phi_ab = sum_x q(x) sum_y l_xy e_ab(x)(y), e_ab(x)(y) = v_a(x) / q(x) u_b(y)
        let e = |a: usize, b: usize, x: usize, y: usize| md.right[a][x] / d.q_x[x] * md.left[b][y];
        let phi: Vec<Vec<f64>> = (0..nx)
            .map(|a| {
                (0..ny)
                    .map(|b| {
                        (0..nx)
                            .map(|x| d.q_x[x] * (0..ny).map(|y| loss[x][y] * e(a, b, x, y)).sum::<f64>())
                            .sum()
                    })
                    .collect()
            })
            .collect();
        for x in 0..nx {
            for y in 0..ny {
                let lhs = loss[x][y] - pop;
                let mut rhs = 0.0;
                for a in 0..nx {
                    for b in 0..ny {
                        let diag = if a == b { md.s(a) } else { 0.0 };
                        rhs += (e(a, b, x, y) - diag) * phi[a][b];
                    }
                }
                lemma = lemma.max((lhs - rhs).abs());
                lib_lemma = lib_lemma.max((lhs - decompose_loss_deviation(&md, &lp, x, y).unwrap()).abs());
            }
        }
        let h = 3;
        let mut chi = ModeChi::zeros(nx, ny, h);
        for a in 0..nx {
            for b in 0..ny {
                for v in chi.get_mut(a, b).iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let planted_bar = chi_bar(&md, &chi);
        let chi_xy = forward_chi(&md, &chi).unwrap();
        let inv = mode_susceptibilities(&md, &d, &chi_xy, &ChiBarAnchor::Known(planted_bar)).unwrap();
        for a in 0..nx {
            for b in 0..ny {
                for (p, r) in chi.get(a, b).iter().zip(inv.chi.get(a, b)) {
                    round_trip = round_trip.max((p - r).abs());
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = lemma <= 1e-8 && lib_lemma <= 1e-8 && round_trip <= 1e-8 && elapsed < Duration::from_secs(30);
    report(
        2,
        "decomposition identities",
        pass,
        &format!("loss identity {lemma:.2e} (library {lib_lemma:.2e}), round trip {round_trip:.2e}, {elapsed:.2?}"),
    );
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> WeightedGraph {
    let p = rng.random_range(0.02..0.15);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u as u32, v as u32, rng.random_range(0.1..2.0)));
            }
        }
    }
    WeightedGraph::from_edges(n, edges)
}

/// Dense power iteration for `pi = alpha e_s + (1 - alpha) pi D^-1 A`.
fn exact_ppr(g: &WeightedGraph, seed: usize, alpha: f64) -> Vec<f64> {
    let n = g.node_count();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for u in 0..n {
        let du = g.degree(u);
        for (v, wt) in g.neighbors(u) {
            w[(u, v)] = wt / du;
        }
    }
    let mut pi = vec![0.0; n];
    pi[seed] = 1.0;
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        next[seed] = alpha;
        for u in 0..n {
            if pi[u] == 0.0 {
                continue;
            }
            for (v, _) in g.neighbors(u) {
                next[v] += (1.0 - alpha) * pi[u] * w[(u, v)];
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

#[test]
fn push_matches_exact_pagerank() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_resid, mut worst_mass, mut worst_excess) = (f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    let mut isolated_resid: f64 = 0.0;
    let mut graphs = 0;
    while graphs < 50 {
        let n = rng.random_range(10..=200);
        let g = random_graph(&mut rng, n);
        let seed = rng.random_range(0..n);
        if g.degree(seed) == 0.0 {
            continue;
        }
        graphs += 1;
        let alpha = rng.random_range(0.05..0.5);
        let eps = 10f64.powf(rng.random_range(-7.0..-3.0));
        let ppr = push_ppr(&MaskedGraph::new(&g), seed, alpha, eps).unwrap();
        let exact = exact_ppr(&g, seed, alpha);
        for u in 0..n {
            if g.degree(u) > 0.0 {
                // r(u) - eps d(u) must be negative
                worst_resid = worst_resid.max(ppr.residual_of(u) - eps * g.degree(u));
            } else {
                // isolated nodes are never reached
                isolated_resid = isolated_resid.max(ppr.residual_of(u));
            }
            worst_excess = worst_excess.max(ppr.rank_of(u) - exact[u]);
        }
        worst_mass = worst_mass.max((ppr.total_mass() - 1.0).abs());
    }
    let elapsed = t.elapsed();
    let pass = worst_resid < 0.0
        && isolated_resid == 0.0
        && worst_mass <= 1e-9
        && worst_excess <= 1e-9
        && elapsed < Duration::from_secs(30);
    report(
        3,
        "push vs exact pagerank",
        pass,
        &format!(
            "max r(u) - eps d(u) {worst_resid:.2e}, mass error {worst_mass:.2e}, max p - pi {worst_excess:.2e}, {elapsed:.2?}"
        ),
    );
}

/// Conductance of one prefix from scratch, exactly rounded sums.
fn prefix_conductance(g: &MaskedGraph<'_>, prefix: &[usize]) -> f64 {
    let mut in_set = vec![false; g.node_count()];
    for &u in prefix {
        in_set[u] = true;
    }
    let cut = exact_sum(prefix.iter().flat_map(|&u| {
        g.neighbors(u)
            .filter(|&(v, _)| !in_set[v])
            .map(|(_, w)| w)
            .collect::<Vec<_>>()
    }));
    let vol_s = exact_sum(prefix.iter().map(|&u| g.degree(u)));
    let vol_c = exact_sum(g.alive_nodes().into_iter().filter(|&u| !in_set[u]).map(|u| g.degree(u)));
    let den = vol_s.min(vol_c);
    if den > 0.0 {
        cut / den
    } else {
        1.0
    }
}

#[test]
fn sweep_is_exhaustive_minimum() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut cases, mut mismatches) = (0, 0);
    while cases < 40 {
        let n = rng.random_range(10..=500);
        let g = random_graph(&mut rng, n);
        let mut masked = MaskedGraph::new(&g);
        if cases % 2 == 1 {
            let drop: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.1)).collect();
            masked.remove(&drop);
        }
        let alive = masked.alive_nodes();
        let Some(&seed) = alive.iter().find(|&&u| masked.degree(u) > 0.0) else {
            continue;
        };
        let ppr = push_ppr(&masked, seed, rng.random_range(0.01..0.3), 1e-6).unwrap();
        let eligible = vec![true; n];
        for order in [SweepOrder::RawRank, SweepOrder::DegreeNormalized] {
            cases += 1;
            let ordering = sweep_ordering(&masked, &ppr, &eligible, order);
            let mut best: Option<(f64, usize)> = None;
            for len in 1..=ordering.len() {
                if len == masked.alive_count() {
                    break;
                }
                let c = prefix_conductance(&masked, &ordering[..len]);
                if best.is_none_or(|(b, _)| c < b) {
                    best = Some((c, len));
                }
            }
            let got = sweep_cut(&masked, &ppr, &eligible, order);
            let same = match (got, best) {
                (Some(r), Some((c, len))) => r.conductance.to_bits() == c.to_bits() && r.prefix.len() == len,
                (None, None) => true,
                _ => false,
            };
            if !same {
                mismatches += 1;
            }
        }
    }
    report(
        4,
        "sweep optimality",
        mismatches == 0,
        &format!("{mismatches} of {cases} sweeps differ from exhaustive minimization"),
    );
}

fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.values().map(|&x| c2(x)).sum();
    let sa: f64 = ra.values().map(|&x| c2(x)).sum();
    let sb: f64 = rb.values().map(|&x| c2(x)).sum();
    let expected = sa * sb / c2(a.len() as f64);
    (index - expected) / ((sa + sb) / 2.0 - expected)
}

const CLOUD_DIM: usize = 32;

fn uniform_cloud(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * CLOUD_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Two unit-spread blobs at +-10 on the first axis plus a uniform
/// background box of half-width 20; labels 0, 1 and 2 (background).
fn planted_blobs(seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pts, mut labels) = (Vec::new(), Vec::new());
    for b in 0..2 {
        let centre = if b == 0 { 10.0 } else { -10.0 };
        for _ in 0..2300 {
            for j in 0..CLOUD_DIM {
                let z: f64 = rng.sample(StandardNormal);
                pts.push(z + if j == 0 { centre } else { 0.0 });
            }
            labels.push(b);
        }
    }
    for _ in 0..400 {
        for _ in 0..CLOUD_DIM {
            pts.push(rng.random_range(-20.0..20.0));
        }
        labels.push(2);
    }
    (pts, labels)
}

#[test]
fn planted_clustering() {
    let _g = serial();
    let t = Instant::now();
    let mut outcomes = Vec::new();
    let mut all_ok = true;
    for seed in 1..=10u64 {
        let (pts, labels) = planted_blobs(seed);
        let g = knn_graph(Points::new(&pts, CLOUD_DIM).unwrap(), 45).unwrap();
        let params = ClusterRunParams {
            rng_seed: seed,
            ..Default::default()
        };
        let run = iterative_discover(&g, &params).unwrap();
        let mut pred = vec![0usize; labels.len()];
        for (i, c) in run.clusters.iter().enumerate() {
            for &u in &c.members {
                pred[u] = i + 1;
            }
        }
        let ari = adjusted_rand(&labels, &pred);
        all_ok &= run.clusters.len() == 2 && ari >= 0.9;
        outcomes.push(format!("{}:{ari:.3}", run.clusters.len()));
    }
    let cloud = uniform_cloud(5, 5000);
    let g = knn_graph(Points::new(&cloud, CLOUD_DIM).unwrap(), 45).unwrap();
    let uniform = iterative_discover(&g, &ClusterRunParams::default())
        .unwrap()
        .clusters
        .len();
    let elapsed = t.elapsed();
    let pass = all_ok && uniform == 0 && elapsed < Duration::from_secs(120);
    report(
        5,
        "planted clustering",
        pass,
        &format!(
            "clusters:ARI per seed [{}], uniform blob {uniform} clusters, {elapsed:.2?}",
            outcomes.join(" ")
        ),
    );
}

#[test]
fn random_sets_have_high_conductance() {
    let _g = serial();
    let n = 5000;
    let cloud = uniform_cloud(6, n);
    let g = knn_graph(Points::new(&cloud, CLOUD_DIM).unwrap(), 45).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let size = n / 100;
    let total: f64 = (0..100)
        .map(|_| {
            let set = rand::seq::index::sample(&mut rng, n, size).into_vec();
            conductance(&g, &set).unwrap()
        })
        .sum();
    let mean = total / 100.0;
    report(
        6,
        "random-set conductance",
        mean >= 0.9,
        &format!("mean over 100 sets of {size} nodes {mean:.4}"),
    );
}

/// Effective sample size of one chain (initial positive sequence).
fn geyer_ess(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let rho = |k: usize| (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    n as f64 / tau.max(1.0)
}

fn mean_sd(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let m = z.iter().sum::<f64>() / n;
    (m, (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn max_centering(draws: &PosteriorDraws, q: &[f64]) -> f64 {
    let chi = per_token_susceptibility(draws, Pooling::Pooled).unwrap();
    (0..chi.cols())
        .map(|c| (0..chi.rows()).map(|i| q[i] * chi.get(i, c)).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

#[test]
fn sampler_oracles() {
    let _g = serial();
    // SGLD on L = lambda |w|^2 / 2: stationary variance 1 / (n_beta lambda + gamma)
    let (dim, lambda) = (10, 1.0);
    let model = QuadraticModel::isotropic(dim, lambda);
    let cfg = SamplerConfig {
        step_eps: 1e-3,
        draws: 500,
        burnin_steps: 3000,
        freeze_preconditioner_after: Some(3000),
        rng_seed: 17,
        ..Default::default()
    };
    let target = 1.0 / (cfg.n_beta * lambda + cfg.gamma);
    let draws = sgld_sample(&model, &vec![0.0; dim], &cfg).unwrap();
    let stat: Vec<f64> = (0..draws.total())
        .map(|d| 2.0 * draws.losses_of(d)[0] / (lambda * dim as f64))
        .collect();
    let (var_hat, sd) = mean_sd(&stat);
    let ess: f64 = stat.chunks(draws.draws).map(geyer_ess).sum();
    let se = sd / ess.sqrt();
    let z_var = (var_hat - target) / se;
    let sgld_centering = max_centering(&draws, &[1.0]);

    // Gaussian baseline against Isserlis: chi = -(s^2 / 2) tr(A_CC (B_i - A)_CC)
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (d, n_items) = (6, 100);
    let items: Vec<Vec<f64>> = (0..n_items)
        .map(|_| {
            let m = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
            let b = m.transpose() * &m / d as f64;
            (0..d * d).map(|k| b[(k / d, k % d)]).collect()
        })
        .collect();
    let raw: Vec<f64> = (0..n_items).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let q: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    let components = vec![vec![0, 1, 2], vec![3, 4, 5]];
    let model = QuadraticModel::new(d, items.clone(), q.clone(), components.clone()).unwrap();
    let s2 = 0.5;
    let gcfg = SamplerConfig {
        chains: 4,
        draws: 5000,
        rng_seed: 29,
        ..Default::default()
    };
    let gdraws = gaussian_sample(&model, &vec![0.0; d], s2, &gcfg).unwrap();
    let chi = per_token_susceptibility(&gdraws, Pooling::Pooled).unwrap();
    let pop: Vec<f64> = (0..gdraws.total())
        .map(|t| gdraws.losses_of(t).iter().zip(&q).map(|(l, w)| l * w).sum())
        .collect();
    let mut within = 0;
    for i in 0..n_items {
        let c = i % 2;
        let comp = &components[c];
        let mut tr = 0.0;
        for &r in comp {
            for &s in comp {
                tr += model.a[r * d + s] * (items[i][s * d + r] - model.a[s * d + r]);
            }
        }
        let oracle = -(s2 * s2 / 2.0) * tr;
        let phi: Vec<f64> = (0..gdraws.total()).map(|t| gdraws.phi_of(t)[c]).collect();
        let dl: Vec<f64> = (0..gdraws.total()).map(|t| gdraws.losses_of(t)[i] - pop[t]).collect();
        let (pm, _) = mean_sd(&phi);
        let (lm, _) = mean_sd(&dl);
        let prod: Vec<f64> = phi.iter().zip(&dl).map(|(p, l)| (p - pm) * (l - lm)).collect();
        let (_, psd) = mean_sd(&prod);
        let se = psd / (prod.len() as f64).sqrt();
        if (chi.get(i, c) - oracle).abs() <= 3.0 * se {
            within += 1;
        }
    }
    let gauss_centering = max_centering(&gdraws, &q);
    let centering = sgld_centering.max(gauss_centering);
    let pass = z_var.abs() <= 3.0 && within >= 95 && centering <= 1e-12;
    report(
        7,
        "sampler oracles",
        pass,
        &format!(
            "SGLD variance {var_hat:.5} vs {target:.5} (z = {z_var:+.2}, ESS {ess:.0}), Isserlis {within}/100 within 3 SE, centering {centering:.1e}"
        ),
    );
}

#[test]
fn sae_matcher_planted_features() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (n_clusters, per_cluster, window, target) = (50usize, 40usize, 61usize, 30usize);
    let total = n_clusters * per_cluster;
    let mut dump = Vec::new();
    let mut clusters = vec![Vec::new(); n_clusters];
    for i in 0..total {
        let owner = i / per_cluster;
        let mut acts = vec![(target, owner as u32, rng.random_range(1.0..3.0))];
        for f in 0..n_clusters {
            if f != owner && rng.random_bool(0.02) {
                acts.push((target, f as u32, rng.random_range(1.0..3.0)));
            }
        }
        // weak off-target activity
        for _ in 0..3 {
            let pos = rng.random_range(0..window);
            if pos != target {
                acts.push((pos, rng.random_range(0..n_clusters as u32), rng.random_range(0.0..0.3)));
            }
        }
        let id = format!("ctx{i}");
        clusters[owner].push(id.clone());
        dump.push(ActivationContext {
            context_id: id,
            window_tokens: (0..window as u32).collect(),
            target_pos: target,
            acts,
        });
    }
    let params = MatchParams {
        rng_seed: 3,
        ..Default::default()
    };
    let reports = match_clusters(&dump, &clusters, &params).unwrap();
    let recalled = reports
        .iter()
        .enumerate()
        .filter(|(i, r)| r.matched_feature == Some(*i as u32))
        .count();
    let baselines: Vec<f64> = reports.iter().filter_map(|r| r.baseline_frequency).collect();
    let low = baselines.iter().filter(|&&b| b < 0.05).count();
    let low_frac = low as f64 / baselines.len().max(1) as f64;
    let elapsed = t.elapsed();
    let pass = recalled == n_clusters && low_frac >= 0.9 && elapsed < Duration::from_secs(30);
    report(
        8,
        "SAE matcher",
        pass,
        &format!(
            "recall {recalled}/{n_clusters}, baselines below 0.05: {low}/{}, {elapsed:.2?}",
            baselines.len()
        ),
    );
}

#[test]
fn end_to_end_two_mode() {
    let _g = serial();
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=4u64 {
        let cfg = LabConfig {
            sampler: SamplerConfig {
                gamma: 100.0,
                n_beta: 3.0,
                step_eps: 3e-2,
                batch_size: 16,
                chains: 4,
                draws: 4000,
                steps_between_draws: 5,
                burnin_steps: 1000,
                rng_seed: seed,
                ..Default::default()
            },
            task: TaskSpec::TwoMode {
                per_mode: 4,
                fidelity: 0.85,
            },
            model: ModelSpec {
                heads: 4,
                hidden: 4,
                init_scale: 0.5,
                seed,
            },
            posterior: PosteriorKind::Sgld,
            eval_min_conditional: 0.5,
            ..Default::default()
        };
        let run = run_lab(&cfg).unwrap();
        let chi = per_token_susceptibility(&run.draws, Pooling::Pooled).unwrap();
        let prep = preprocess(&chi).unwrap();
        let k = 10;
        let g = knn_graph(Points::new(prep.values(), prep.matrix.cols()).unwrap(), k).unwrap();
        let params = ClusterRunParams {
            k,
            alpha: 0.05,
            sweep_order: SweepOrder::DegreeNormalized,
            rng_seed: seed,
            ..Default::default()
        };
        let found = iterative_discover(&g, &params).unwrap();
        let labels = run.meta.labels.unwrap();
        let purities: Vec<f64> = found
            .clusters
            .iter()
            .map(|c| {
                let zero = c.members.iter().filter(|&&i| labels[i] == 0).count();
                zero.max(c.members.len() - zero) as f64 / c.members.len() as f64
            })
            .collect();
        pass &= !purities.is_empty() && purities.iter().all(|&p| p >= 0.8);
        lines.push(format!(
            "seed {seed}: [{}]",
            purities.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" ")
        ));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    report(
        9,
        "end-to-end two-mode pipeline",
        pass,
        &format!("cluster purities {}, {elapsed:.2?}", lines.join("; ")),
    );
}

#[test]
fn full_scale_results_not_reproducible() {
    let _g = serial();
    let line = "\nacceptance 10 full-scale results: NOT REPRODUCIBLE (needs language-model checkpoints, \
                the training corpus and multi-GPU sampling; criteria 1 to 9 substitute)\n";
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}
