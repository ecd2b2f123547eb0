//! Test helpers that recompute network quantities without the library's
//! affine-map code.
#![allow(dead_code)]

use capiset::geometry::{Lp, LpStatus};
use capiset::pwanet::{Activation, Layer, PwaNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_net(input: usize, widths: &[usize], seed: u64, bias: bool, act: Activation) -> PwaNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut prev = input;
    for &w in widths.iter().chain(std::iter::once(&1)) {
        layers.push(Layer::new(
            (0..w)
                .map(|_| (0..prev).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            (0..w)
                .map(|_| if bias { rng.gen_range(-0.5..0.5) } else { 0.0 })
                .collect(),
        ));
        prev = w;
    }
    PwaNetwork::new(input, layers, act).unwrap()
}

fn slope(act: Activation) -> f64 {
    match act {
        Activation::Relu => 0.0,
        Activation::LeakyRelu(s) => s,
    }
}

/// Plain forward pass.
pub fn ref_eval(net: &PwaNetwork, x: &[f64]) -> f64 {
    let s = slope(net.activation());
    let mut h = x.to_vec();
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        let mut z: Vec<f64> = layer
            .weights
            .iter()
            .zip(&layer.bias)
            .map(|(row, b)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        if l < last {
            z.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= s
                }
            });
        }
        h = z;
    }
    h[0]
}

/// Rows `a·x ≤ b` of the region where the network follows `pattern`, and the
/// affine output `(c, d)` on it.
pub fn ref_pattern_region(net: &PwaNetwork, pattern: &[Vec<bool>]) -> (Vec<(Vec<f64>, f64)>, Vec<f64>, f64) {
    let n = net.input_dim();
    let s = slope(net.activation());
    // current layer input = m x + o
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut o = vec![0.0; n];
    let mut rows = Vec::new();
    let layers = net.layers();
    for (l, layer) in layers.iter().enumerate() {
        let zm: Vec<Vec<f64>> = layer
            .weights
            .iter()
            .map(|w| (0..n).map(|j| w.iter().zip(&m).map(|(a, r)| a * r[j]).sum()).collect())
            .collect();
        let zo: Vec<f64> = layer
            .weights
            .iter()
            .zip(&layer.bias)
            .map(|(w, b)| w.iter().zip(&o).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect();
        if l == layers.len() - 1 {
            return (rows, zm[0].clone(), zo[0]);
        }
        let mut nm = Vec::new();
        let mut no = Vec::new();
        for (k, &on) in pattern[l].iter().enumerate() {
            let vanishes = zm[k].iter().all(|v| *v == 0.0) && zo[k] == 0.0;
            if on && vanishes {
                // pre ≡ 0 is inactive by convention; the active side is empty
                rows.push((vec![0.0; n], -1.0));
                nm.push(zm[k].clone());
                no.push(zo[k]);
            } else if on {
                rows.push((zm[k].iter().map(|v| -v).collect(), zo[k]));
                nm.push(zm[k].clone());
                no.push(zo[k]);
            } else {
                rows.push((zm[k].clone(), -zo[k]));
                nm.push(zm[k].iter().map(|v| v * s).collect());
                no.push(zo[k] * s);
            }
        }
        m = nm;
        o = no;
    }
    unreachable!("network has an output layer")
}

/// Radius of the largest ball inside `rows ∩ [lo, hi]`; negative if empty.
pub fn chebyshev_radius(rows: &[(Vec<f64>, f64)], lo: &[f64], hi: &[f64]) -> f64 {
    let n = lo.len();
    let mut lp = Lp::new(n + 1);
    let mut push = |a: &[f64], b: f64| {
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut row = a.to_vec();
        row.push(norm);
        lp.push_le(&row, b);
    };
    for (a, b) in rows {
        push(a, *b);
    }
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        push(&e, hi[i]);
        e[i] = -1.0;
        push(&e, -lo[i]);
    }
    let mut cap = vec![0.0; n + 1];
    cap[n] = 1.0;
    lp.push_le(&cap, 1.0);
    let res = lp.maximize(&cap).unwrap();
    match res.status {
        LpStatus::Optimal => res.value,
        _ => -1.0,
    }
}

pub fn sample_box(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(&l, &h)| rng.gen_range(l..=h)).collect()
}

pub fn all_patterns(widths: &[usize]) -> Vec<Vec<Vec<bool>>> {
    let total: usize = widths.iter().sum();
    (0..1usize << total)
        .map(|code| {
            let mut bit = 0;
            widths
                .iter()
                .map(|&w| {
                    (0..w)
                        .map(|_| {
                            let b = code >> bit & 1 == 1;
                            bit += 1;
                            b
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Same network with a nonnegative output layer, so a ReLU net is ≥ 0.
pub fn with_positive_output(net: PwaNetwork) -> PwaNetwork {
    let mut layers = net.layers().to_vec();
    let last = layers.last_mut().unwrap();
    for row in &mut last.weights {
        row.iter_mut().for_each(|v| *v = v.abs());
    }
    last.bias.iter_mut().for_each(|v| *v = v.abs());
    PwaNetwork::new(net.input_dim(), layers, net.activation()).unwrap()
}

/// Product of layer Frobenius norms, a Lipschitz bound in the 2-norm.
pub fn lipschitz_bound(net: &PwaNetwork) -> f64 {
    net.layers()
        .iter()
        .map(|l| l.weights.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
        .product()
}
