//! Central finite differences for every student parameter against an
//! independent loop forward pass. A perturbation is carried through the
//! network as a change map rather than as two full forward passes, so the
//! loss difference is not lost to cancellation against the loss itself.

use graspxfer::net::{build_network, forward_dense, forward_graph, Layer, NetworkParams};
use graspxfer_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Conv {
    w: Vec<f64>,
    b: Vec<f64>,
    cout: usize,
    cin: usize,
    k: usize,
    pad: usize,
}

impl Conv {
    fn wi(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.cin + c) * self.k + ky) * self.k + kx
    }
}

/// Stride-1 "same" convolution of a `[cin, n, n]` map.
fn conv(x: &[f64], n: usize, c: &Conv) -> Vec<f64> {
    let mut out = vec![0.0; c.cout * n * n];
    for o in 0..c.cout {
        for p in 0..n * n {
            out[o * n * n + p] = c.b[o];
        }
        for ci in 0..c.cin {
            add_channel(&x[ci * n * n..(ci + 1) * n * n], ci, n, c, o, &mut out[o * n * n..(o + 1) * n * n]);
        }
    }
    out
}

/// Adds the contribution of input channel `ci` to output channel `o`.
fn add_channel(x: &[f64], ci: usize, n: usize, c: &Conv, o: usize, out: &mut [f64]) {
    for ky in 0..c.k {
        for kx in 0..c.k {
            let w = c.w[c.wi(o, ci, ky, kx)];
            for y in 0..n {
                let sy = y as isize + ky as isize - c.pad as isize;
                if sy < 0 || sy >= n as isize {
                    continue;
                }
                for xx in 0..n {
                    let sx = xx as isize + kx as isize - c.pad as isize;
                    if sx < 0 || sx >= n as isize {
                        continue;
                    }
                    out[y * n + xx] += w * x[sy as usize * n + sx as usize];
                }
            }
        }
    }
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn pool2(x: &[f64], ch: usize, n: usize) -> Vec<f64> {
    let m = n / 2;
    let mut out = vec![0.0; ch * m * m];
    for c in 0..ch {
        for y in 0..m {
            for xx in 0..m {
                let at = |dy: usize, dx: usize| x[c * n * n + (2 * y + dy) * n + 2 * xx + dx];
                out[c * m * m + y * m + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

struct Net {
    convs: Vec<Conv>,
    /// Spatial size entering each conv.
    sizes: Vec<usize>,
    /// Whether a 2×2 pool follows the ReLU after each conv.
    pooled: Vec<bool>,
}

impl Net {
    fn new(p: &NetworkParams, n: usize) -> Net {
        let mut convs = Vec::new();
        let mut pooled = Vec::new();
        let mut cin = p.input_channels();
        let mut wi = 0;
        for layer in p.layers() {
            match *layer {
                Layer::Conv { out_channels, kernel, stride, pad } => {
                    assert_eq!(stride, 1);
                    assert_eq!(2 * pad + 1, kernel);
                    convs.push(Conv {
                        w: p.weights()[wi].data().to_vec(),
                        b: p.weights()[wi + 1].data().to_vec(),
                        cout: out_channels,
                        cin,
                        k: kernel,
                        pad,
                    });
                    pooled.push(false);
                    cin = out_channels;
                    wi += 2;
                }
                Layer::MaxPool { window } => {
                    assert_eq!(window, 2);
                    *pooled.last_mut().unwrap() = true;
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
        }
        let mut sizes = vec![n];
        for &pl in &pooled[..pooled.len() - 1] {
            let s = *sizes.last().unwrap();
            sizes.push(if pl { s / 2 } else { s });
        }
        Net { convs, sizes, pooled }
    }

    fn act(&self, k: usize, pre: &[f64], ch: usize) -> Vec<f64> {
        let r = relu(pre);
        if self.pooled[k] {
            pool2(&r, ch, self.sizes[k])
        } else {
            r
        }
    }

    /// Pre-activations of every conv.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::new();
        let mut a = x.to_vec();
        for k in 0..self.convs.len() {
            let p = conv(&a, self.sizes[k], &self.convs[k]);
            if k + 1 < self.convs.len() {
                a = self.act(k, &p, self.convs[k].cout);
            }
            pre.push(p);
        }
        pre
    }

    /// Change of the activation after conv `k` when its pre-activation
    /// `pre` moves by `d`. Written so unchanged branches give exact
    /// differences rather than differences of rounded values.
    fn act_delta(&self, k: usize, pre: &[f64], d: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = pre
            .iter()
            .zip(d)
            .map(|(&p, &d)| {
                if d == 0.0 || (p <= 0.0 && p + d <= 0.0) {
                    0.0
                } else if p > 0.0 && p + d > 0.0 {
                    d
                } else {
                    (p + d).max(0.0) - p.max(0.0)
                }
            })
            .collect();
        if !self.pooled[k] {
            return r;
        }
        let (n, ch) = (self.sizes[k], self.convs[k].cout);
        let m = n / 2;
        let mut out = vec![0.0; ch * m * m];
        for c in 0..ch {
            for y in 0..m {
                for x in 0..m {
                    let idx = [0, 1, n, n + 1].map(|o| c * n * n + 2 * y * n + 2 * x + o);
                    if idx.iter().all(|&i| r[i] == 0.0) {
                        continue;
                    }
                    let first_max = |v: &dyn Fn(usize) -> f64| {
                        idx.iter().copied().fold(idx[0], |b, i| if v(i) > v(b) { i } else { b })
                    };
                    let base = first_max(&|i| pre[i].max(0.0));
                    let moved = first_max(&|i| pre[i].max(0.0) + r[i]);
                    out[c * m * m + y * m + x] = if base == moved {
                        r[base]
                    } else {
                        pre[moved].max(0.0) + r[moved] - pre[base].max(0.0)
                    };
                }
            }
        }
        out
    }

    /// Change of the loss when the pre-activation of conv `k` moves by `d`.
    fn loss_delta(&self, mut k: usize, pre: &[Vec<f64>], mut d: Vec<f64>, target: &[f64]) -> f64 {
        while k + 1 < self.convs.len() {
            let a = self.act_delta(k, &pre[k], &d);
            d = conv_delta(&a, self.sizes[k + 1], &self.convs[k + 1]);
            k += 1;
        }
        let z = &pre[k];
        let total: f64 = z
            .iter()
            .zip(&d)
            .zip(target)
            .map(|((&z, &d), &t)| {
                if d == 0.0 {
                    0.0
                } else if z.abs() < 25.0 && (z + d).abs() < 25.0 {
                    // softplus(z + d) - softplus(z) - t d
                    (sigmoid(z) * d.exp_m1()).ln_1p() - t * d
                } else {
                    bce(&[z + d], &[t]) - bce(&[z], &[t])
                }
            })
            .sum();
        total / z.len() as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Bias-free convolution of a sparse change map, scattered from its
/// nonzero entries.
fn conv_delta(x: &[f64], n: usize, c: &Conv) -> Vec<f64> {
    let plane = n * n;
    let mut out = vec![0.0; c.cout * plane];
    for ci in 0..c.cin {
        for sy in 0..n {
            for sx in 0..n {
                let v = x[ci * plane + sy * n + sx];
                if v == 0.0 {
                    continue;
                }
                for ky in 0..c.k {
                    let y = sy as isize - ky as isize + c.pad as isize;
                    if y < 0 || y >= n as isize {
                        continue;
                    }
                    for kx in 0..c.k {
                        let xx = sx as isize - kx as isize + c.pad as isize;
                        if xx < 0 || xx >= n as isize {
                            continue;
                        }
                        let at = y as usize * n + xx as usize;
                        for o in 0..c.cout {
                            out[o * plane + at] += c.w[c.wi(o, ci, ky, kx)] * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn bce(logits: &[f64], target: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / logits.len() as f64
}

pub struct FdResult {
    pub parameters: usize,
    pub worst_rel: f64,
    pub forward_gap: f64,
}

/// Relative error with an absolute floor for gradients that vanish.
pub const REL_FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-6;
pub const SIZE: usize = 8;

pub fn check_seed(seed: u64) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = if seed % 2 == 0 { 3 } else { 4 };
    let params = build_network(channels, seed).unwrap();
    let n = SIZE;
    let image = Tensor::from_fn(&[channels, n, n], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let target = Tensor::from_fn(&[16, n / 4, n / 4], |_| rng.gen::<f64>()).unwrap();

    let mut g = Graph::new();
    let (out, pnodes) = forward_graph(&params, &mut g, &image).unwrap();
    let t = g.constant(target.clone());
    let loss = g.bce(out, t).unwrap();
    let grads = g.backward(loss).unwrap();

    let net = Net::new(&params, n);
    let pre = net.forward(image.data());
    let last = pre.last().unwrap();
    let dense = forward_dense(&params, &image).unwrap();
    let forward_gap = last
        .iter()
        .zip(dense.scores().data())
        .map(|(&z, &p)| (1.0 / (1.0 + (-z).exp()) - p).abs())
        .fold(0.0, f64::max);

    let mut inputs: Vec<Vec<f64>> = vec![image.data().to_vec()];
    for k in 0..net.convs.len() - 1 {
        inputs.push(net.act(k, &pre[k], net.convs[k].cout));
    }

    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, c) in net.convs.iter().enumerate() {
        let m = net.sizes[k];
        let plane = m * m;
        let x = &inputs[k];
        let wgrad = grads.get(pnodes[2 * k]).unwrap().data();
        let bgrad = grads.get(pnodes[2 * k + 1]).unwrap().data();
        // (output channel, weight index or None for bias)
        let mut items: Vec<(usize, Option<(usize, usize, usize)>)> = Vec::new();
        for o in 0..c.cout {
            for ci in 0..c.cin {
                for ky in 0..c.k {
                    for kx in 0..c.k {
                        items.push((o, Some((ci, ky, kx))));
                    }
                }
            }
            items.push((o, None));
        }
        for (o, which) in items {
            let mut delta = vec![0.0; plane];
            match which {
                None => delta.iter_mut().for_each(|d| *d = 1.0),
                Some((ci, ky, kx)) => {
                    for y in 0..m {
                        for xx in 0..m {
                            let sy = y as isize + ky as isize - c.pad as isize;
                            let sx = xx as isize + kx as isize - c.pad as isize;
                            if sy >= 0 && sx >= 0 && sy < m as isize && sx < m as isize {
                                delta[y * m + xx] = x[ci * plane + sy as usize * m + sx as usize];
                            }
                        }
                    }
                }
            }
            let eval = |s: f64| -> f64 {
                let mut d = vec![0.0; pre[k].len()];
                for i in 0..plane {
                    d[o * plane + i] = s * STEP * delta[i];
                }
                net.loss_delta(k, &pre, d, target.data())
            };
            let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * STEP);
            let analytic = match which {
                None => bgrad[o],
                Some((ci, ky, kx)) => wgrad[c.wi(o, ci, ky, kx)],
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            count += 1;
        }
    }
    assert_eq!(count, params.parameter_count());
    FdResult {
        parameters: count,
        worst_rel: worst,
        forward_gap,
    }
}
