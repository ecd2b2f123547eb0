//! Self-contained trainer for PWA Lyapunov fixtures.
//!
//! The network is warm-started from a polyhedral gauge in the modal
//! coordinates of the linearised closed loop: `|z_i|` for every real mode and
//! `Σ_m |u_m · (z_a, z_b)|` over `k` evenly spaced directions for every complex
//! pair. Such a gauge contracts whenever the modes do, which gives the hinge
//! loss on positivity and decrease a valid starting point. The warm start is
//! perturbed and then trained with Adam, mining violating samples each round.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_lyapunov, LyapunovReport, SystemSpec};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::pwanet::{Activation, Layer, PwaNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub zero_bias: bool,
    pub max_rounds: usize,
    pub epochs_per_round: usize,
    pub fresh_samples: usize,
    pub max_hard_samples: usize,
    pub learning_rate: f64,
    /// Required relative decrease `V(f(x)) ≤ (1 - α) V(x)` in the loss.
    pub decrease_margin: f64,
    /// Required `V(x) ≥ β ‖x‖∞` in the loss.
    pub positivity_margin: f64,
    /// Relative size of the random perturbation applied to the warm start.
    pub perturbation: f64,
    /// Samples of the final clean check.
    pub check_samples: usize,
    /// Mean of `V` over `D` after scaling; `None` keeps the raw scale.
    pub mean_level: Option<f64>,
}

impl TrainConfig {
    pub fn new(hidden: Vec<usize>, zero_bias: bool, seed: u64) -> Self {
        TrainConfig {
            seed,
            hidden,
            zero_bias,
            max_rounds: 40,
            epochs_per_round: 40,
            fresh_samples: 2000,
            max_hard_samples: 4000,
            learning_rate: 1e-3,
            decrease_margin: 1e-3,
            positivity_margin: 1e-3,
            perturbation: 0.02,
            check_samples: 50_000,
            mean_level: None,
        }
    }
}

/// Rows of the polyhedral gauge with their mode group.
#[derive(Clone, Debug)]
pub struct ModalGauge {
    /// Direction `d`; the gauge term is `|d·x|`.
    pub rows: Vec<Vec<f64>>,
    pub group: Vec<usize>,
    pub groups: usize,
}

fn jacobian(system: &SystemSpec) -> DMatrix<f64> {
    let n = system.state_dim();
    let r0 = vec![0.0; system.reference_dim()];
    let h = 1e-6;
    DMatrix::from_fn(n, n, |i, j| {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        a[j] = h;
        b[j] = -h;
        (system.closed_loop(&a, &r0)[i] - system.closed_loop(&b, &r0)[i]) / (2.0 * h)
    })
}

fn null_vector(m: DMatrix<f64>) -> Vec<f64> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    v_t.row(k).iter().copied().collect()
}

fn normalize(v: &mut [f64]) {
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Gauge of the closed loop linearised at the origin, using `k` directions
/// per complex pair.
pub fn modal_gauge(system: &SystemSpec, k: usize) -> Result<ModalGauge> {
    let n = system.state_dim();
    let j = jacobian(system);
    let eig = j.clone().complex_eigenvalues();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    // (column index, is complex pair)
    let mut modes: Vec<(usize, bool)> = Vec::new();
    let mut seen_pair = Vec::<(f64, f64)>::new();
    for lam in eig.iter() {
        if lam.im.abs() < 1e-9 {
            let m = &j - DMatrix::identity(n, n) * lam.re;
            let mut v = null_vector(m);
            normalize(&mut v);
            modes.push((cols.len(), false));
            cols.push(v);
        } else {
            let key = (lam.re, lam.im.abs());
            if seen_pair
                .iter()
                .any(|p| (p.0 - key.0).abs() < 1e-9 && (p.1 - key.1).abs() < 1e-9)
            {
                continue;
            }
            seen_pair.push(key);
            let (a, b) = (lam.re, lam.im.abs());
            let big = DMatrix::from_fn(2 * n, 2 * n, |r, c| {
                let (br, bc) = (r / n, c / n);
                let (i, jj) = (r % n, c % n);
                let id = if i == jj { 1.0 } else { 0.0 };
                match (br, bc) {
                    (0, 0) | (1, 1) => j[(i, jj)] - a * id,
                    (0, 1) => b * id,
                    _ => -b * id,
                }
            });
            let v = null_vector(big);
            let mut p = v[..n].to_vec();
            let mut q = v[n..].to_vec();
            let s = p.iter().chain(&q).map(|x| x * x).sum::<f64>().sqrt();
            p.iter_mut().for_each(|x| *x /= s);
            q.iter_mut().for_each(|x| *x /= s);
            modes.push((cols.len(), true));
            cols.push(p);
            cols.push(q);
        }
    }
    if cols.len() != n {
        return Err(Error::TrainingFailed("defective linearisation: no modal basis".into()));
    }
    let b = DMatrix::from_fn(n, n, |r, c| cols[c][r]);
    let t = b
        .try_inverse()
        .ok_or_else(|| Error::TrainingFailed("modal basis is singular".into()))?;
    let row = |i: usize| -> Vec<f64> { t.row(i).iter().copied().collect() };
    let mut rows = Vec::new();
    let mut group = Vec::new();
    for (g, &(c, pair)) in modes.iter().enumerate() {
        if !pair {
            rows.push(row(c));
            group.push(g);
        } else {
            let (tp, tq) = (row(c), row(c + 1));
            for m in 0..k {
                let ang = std::f64::consts::PI * m as f64 / k as f64;
                let (s, co) = ang.sin_cos();
                rows.push(tp.iter().zip(&tq).map(|(a, b)| co * a + s * b).collect());
                group.push(g);
            }
        }
    }
    Ok(ModalGauge {
        rows,
        group,
        groups: modes.len(),
    })
}

fn gauge_value(g: &ModalGauge, w: &[f64], x: &[f64]) -> f64 {
    g.rows
        .iter()
        .zip(&g.group)
        .map(|(d, &gi)| w[gi] * d.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs())
        .sum()
}

/// Mode weights from a small grid, minimising sampled decrease violations.
fn choose_weights(g: &ModalGauge, system: &SystemSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r0 = vec![0.0; system.reference_dim()];
    let xs: Vec<Vec<f64>> = (0..2000).map(|_| system.sample_domain(rng)).collect();
    let nexts: Vec<Vec<f64>> = xs.iter().map(|x| system.closed_loop(x, &r0)).collect();
    let levels = [0.5, 1.0, 2.0, 4.0];
    let free = g.groups.saturating_sub(1);
    let mut best = (usize::MAX, f64::INFINITY, vec![1.0; g.groups]);
    for code in 0..levels.len().pow(free as u32) {
        let mut w = vec![1.0; g.groups];
        let mut c = code;
        for wi in w.iter_mut().skip(1) {
            *wi = levels[c % levels.len()];
            c /= levels.len();
        }
        let mut bad = 0;
        let mut worst = 0.0f64;
        for (x, nx) in xs.iter().zip(&nexts) {
            let ratio = gauge_value(g, &w, nx) / gauge_value(g, &w, x);
            worst = worst.max(ratio);
            if ratio > 1.0 {
                bad += 1;
            }
        }
        if (bad, worst) < (best.0, best.1) {
            best = (bad, worst, w);
        }
    }
    best.2
}

fn random_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize, scale: f64, bias: bool) -> Layer {
    Layer::new(
        (0..out)
            .map(|_| (0..inp).map(|_| rng.gen_range(-scale..scale)).collect())
            .collect(),
        (0..out)
            .map(|_| if bias { rng.gen_range(-0.5..0.5) } else { 0.0 })
            .collect(),
    )
}

/// Gauge-based initial network, or `None` if the first layer is too narrow.
fn warm_start(system: &SystemSpec, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Option<PwaNetwork>> {
    let n = system.state_dim();
    let w1 = cfg.hidden[0];
    let j = jacobian(system);
    let eig = j.complex_eigenvalues();
    let real = eig.iter().filter(|l| l.im.abs() < 1e-9).count();
    let pairs = (n - real) / 2;
    let budget = w1 / 2;
    if budget < real || (pairs > 0 && budget < real + 2 * pairs) {
        return Ok(None);
    }
    let k = (budget - real).checked_div(pairs).map_or(0, |q| q.min(4));
    let g = modal_gauge(system, k.max(1))?;
    let weights = choose_weights(&g, system, rng);
    let gauge_neurons = 2 * g.rows.len();
    if cfg.hidden.iter().skip(1).any(|&w| w < gauge_neurons) {
        return Ok(None);
    }
    let mut layers = Vec::new();
    let mut first = random_layer(rng, w1, n, 0.5, !cfg.zero_bias);
    for (i, d) in g.rows.iter().enumerate() {
        first.weights[2 * i] = d.clone();
        first.weights[2 * i + 1] = d.iter().map(|v| -v).collect();
        first.bias[2 * i] = 0.0;
        first.bias[2 * i + 1] = 0.0;
    }
    layers.push(first);
    let mut prev = w1;
    for &w in &cfg.hidden[1..] {
        // pass-through of the (non-negative) previous activations
        let mut l = random_layer(rng, w, prev, 0.05, !cfg.zero_bias);
        for (i, row) in l.weights.iter_mut().enumerate().take(prev.min(w)) {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[i] = 1.0;
            l.bias[i] = 0.0;
        }
        layers.push(l);
        prev = w;
    }
    let mut out = vec![0.0; prev];
    for i in 0..g.rows.len() {
        out[2 * i] = weights[g.group[i]];
        out[2 * i + 1] = weights[g.group[i]];
    }
    for v in out.iter_mut().skip(gauge_neurons) {
        *v = rng.gen_range(0.0..0.05);
    }
    layers.push(Layer::new(vec![out], vec![0.0]));
    let mut net = PwaNetwork::new(n, layers, Activation::Relu)?;
    net.zero_at_origin();
    Ok(Some(net))
}

fn random_start(system: &SystemSpec, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PwaNetwork> {
    let mut layers = Vec::new();
    let mut prev = system.state_dim();
    for &w in &cfg.hidden {
        layers.push(random_layer(rng, w, prev, 1.0, !cfg.zero_bias));
        prev = w;
    }
    layers.push(random_layer(rng, 1, prev, 1.0, false));
    let mut net = PwaNetwork::new(system.state_dim(), layers, Activation::Relu)?;
    net.zero_at_origin();
    Ok(net)
}

fn check_stable(system: &SystemSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    let r0 = vec![0.0; system.reference_dim()];
    for _ in 0..20 {
        let x0 = system.sample_domain(rng);
        let mut x = x0.clone();
        for _ in 0..600 {
            x = system.closed_loop(&x, &r0);
        }
        let (a, b) = (norm_inf(&x), norm_inf(&x0));
        if !(a <= 0.1 * b) {
            return Err(Error::TrainingFailed(format!(
                "closed loop does not converge from {x0:?}"
            )));
        }
    }
    Ok(())
}

fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Mask of trainable parameters (biases frozen for zero-bias nets, output bias always).
fn trainable(net: &PwaNetwork, zero_bias: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(net.num_params());
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        mask.extend(std::iter::repeat_n(true, layer.out_dim() * layer.in_dim()));
        mask.extend(std::iter::repeat_n(!zero_bias && l != last, layer.out_dim()));
    }
    mask
}

/// Hinge loss over `batch` (pairs of state and successor); accumulates its gradient.
fn hinge_loss(net: &PwaNetwork, batch: &[(Vec<f64>, Vec<f64>)], cfg: &TrainConfig, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (x, nx) in batch {
        let v = net.eval(x);
        let pos = cfg.positivity_margin * norm_inf(x) - v;
        if pos > 0.0 {
            loss += pos * inv;
            net.backprop(x, -inv, grad);
        }
        let v1 = net.eval(nx);
        let dec = v1 - (1.0 - cfg.decrease_margin) * v;
        if dec > 0.0 {
            loss += dec * inv;
            net.backprop(nx, inv, grad);
            net.backprop(x, -(1.0 - cfg.decrease_margin) * inv, grad);
        }
    }
    loss
}

fn scale_output(net: &mut PwaNetwork, factor: f64) {
    let mut p = net.params();
    let last = net.layers().last().unwrap();
    let k = last.in_dim() + 1;
    let len = p.len();
    p[len - k..].iter_mut().for_each(|v| *v *= factor);
    net.set_params(&p);
}

/// Trains a Lyapunov network for `system` and returns it with its final clean report.
pub fn train_lyapunov_fixture(system: &SystemSpec, cfg: &TrainConfig) -> Result<(PwaNetwork, LyapunovReport)> {
    if cfg.hidden.is_empty() {
        return Err(Error::Input("at least one hidden layer is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    check_stable(system, &mut rng)?;
    let mut net = match warm_start(system, cfg, &mut rng)? {
        Some(n) => n,
        None => random_start(system, cfg, &mut rng)?,
    };
    // perturb weights only so the gauge neurons stay exact at the origin
    let mask = trainable(&net, cfg.zero_bias);
    let mut p = net.params();
    for (v, &m) in p.iter_mut().zip(&trainable(&net, true)) {
        if m {
            *v += cfg.perturbation * (v.abs() + 0.05) * rng.gen_range(-1.0..1.0);
        }
    }
    net.set_params(&p);
    if !cfg.zero_bias {
        net.zero_at_origin();
    }
    if let Some(target) = cfg.mean_level {
        let mean = (0..4000)
            .map(|_| net.eval(&system.sample_domain(&mut rng)))
            .sum::<f64>()
            / 4000.0;
        if mean > 0.0 {
            scale_output(&mut net, target / mean);
            if !cfg.zero_bias {
                net.zero_at_origin();
            }
        }
    }
    let r0 = vec![0.0; system.reference_dim()];
    let mut adam = Adam::new(net.num_params(), cfg.learning_rate);
    let mut grad = vec![0.0; net.num_params()];
    let mut hard: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut last_report = None;
    for round in 0..cfg.max_rounds {
        let report = check_lyapunov(&net, system, cfg.check_samples, cfg.seed.wrapping_add(1 + round as u64))?;
        if report.is_clean() {
            return Ok((net, report));
        }
        last_report = Some(report);
        // mine violating samples
        let mut batch: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.fresh_samples + hard.len());
        for _ in 0..cfg.fresh_samples * 5 {
            let x = system.sample_domain(&mut rng);
            let nx = system.closed_loop(&x, &r0);
            let v = net.eval(&x);
            let bad = net.eval(&nx) - (1.0 - cfg.decrease_margin) * v > 0.0 || v < cfg.positivity_margin * norm_inf(&x);
            if bad && hard.len() < cfg.max_hard_samples {
                hard.push((x, nx));
            } else if batch.len() < cfg.fresh_samples {
                batch.push((x, nx));
            }
        }
        batch.extend(hard.iter().cloned());
        for _ in 0..cfg.epochs_per_round {
            hinge_loss(&net, &batch, cfg, &mut grad);
            let mut p = net.params();
            adam.step(&mut p, &grad, &mask);
            net.set_params(&p);
            if !cfg.zero_bias {
                net.zero_at_origin();
            }
        }
    }
    let rep = last_report.unwrap_or_default();
    Err(Error::TrainingFailed(format!(
        "{} rounds left {} equilibrium, {} positivity and {} decrease violations out of {} samples",
        cfg.max_rounds, rep.equilibrium.violations, rep.positivity.violations, rep.decrease.violations, rep.samples
    )))
}
