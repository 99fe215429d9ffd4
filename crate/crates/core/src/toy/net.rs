use crate::numerics::SeededRng;

/// `z + W2 tanh(W1 z + b1) + b2` on the plane. `w1` is `hidden x 2` and
/// `w2` is `2 x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// `post(block(pre(x)))` with `pre = tanh(Wp x + bp)` from `R^4` to the
/// plane, a block of three residual layers and an affine `post`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub hidden: usize,
    pub pre_w: Vec<f64>,
    pub pre_b: Vec<f64>,
    pub layers: Vec<ResidualLayer>,
    pub post_w: Vec<f64>,
    pub post_b: Vec<f64>,
}

pub const N_RESIDUAL: usize = 3;

fn gaussian(rng: &mut SeededRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

fn affine<const I: usize>(w: &[f64], b: &[f64], x: &[f64; I]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + (0..I).map(|c| w[r * I + c] * x[c]).sum::<f64>())
        .collect()
}

impl ResidualLayer {
    /// Forward pass that also stores the hidden activations in `act`.
    fn forward(&self, z: &[f64; 2], act: &mut [f64]) -> [f64; 2] {
        let h = act.len();
        let mut s = [0.0; 2];
        for (c, a) in act.iter_mut().enumerate() {
            *a = (self.b1[c] + self.w1[c * 2] * z[0] + self.w1[c * 2 + 1] * z[1]).tanh();
            s[0] += self.w2[c] * *a;
            s[1] += self.w2[h + c] * *a;
        }
        [z[0] + (self.b2[0] + s[0]), z[1] + (self.b2[1] + s[1])]
    }

    pub fn apply(&self, z: &[f64; 2]) -> [f64; 2] {
        self.forward(z, &mut vec![0.0; self.b1.len()])
    }
}

impl ToyNet {
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed).fork(2);
        let pre_w = gaussian(&mut rng, 8, 0.5);
        let pre_b = vec![0.0; 2];
        let layers = (0..N_RESIDUAL)
            .map(|_| ResidualLayer {
                w1: gaussian(&mut rng, hidden * 2, 1.0),
                b1: gaussian(&mut rng, hidden, 0.5),
                w2: gaussian(&mut rng, 2 * hidden, 0.3 / (hidden as f64).sqrt()),
                b2: vec![0.0; 2],
            })
            .collect();
        let post_w = gaussian(&mut rng, 4, 0.7);
        let post_b = vec![0.0; 2];
        Self {
            hidden,
            pre_w,
            pre_b,
            layers,
            post_w,
            post_b,
        }
    }

    /// Same shapes, all zeros; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["pre.w".to_string(), "pre.b".to_string()];
        for i in 0..self.layers.len() {
            for p in ["w1", "b1", "w2", "b2"] {
                names.push(format!("block.{i}.{p}"));
            }
        }
        names.push("post.w".into());
        names.push("post.b".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.pre_w, &self.pre_b];
        for l in &self.layers {
            out.extend([&l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.push(&self.post_w);
        out.push(&self.post_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.pre_w, &mut self.pre_b];
        for l in &mut self.layers {
            out.extend([&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2]);
        }
        out.push(&mut self.post_w);
        out.push(&mut self.post_b);
        out
    }

    pub fn pre(&self, x: &[f64; 4]) -> [f64; 2] {
        let a = affine(&self.pre_w, &self.pre_b, x);
        [a[0].tanh(), a[1].tanh()]
    }

    /// One pass through the residual block; this is the loop operator `g`.
    pub fn block(&self, z: &[f64; 2]) -> [f64; 2] {
        self.layers.iter().fold(*z, |z, l| l.apply(&z))
    }

    pub fn post(&self, z: &[f64; 2]) -> [f64; 2] {
        let a = affine(&self.post_w, &self.post_b, z);
        [a[0], a[1]]
    }

    pub fn predict(&self, x: &[f64; 4]) -> [f64; 2] {
        self.post(&self.block(&self.pre(x)))
    }

    /// Mean over points of the squared error norm.
    pub fn loss(&self, xs: &[[f64; 4]], ys: &[[f64; 2]]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| sq_err(&self.predict(x), y))
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, xs: &[[f64; 4]], ys: &[[f64; 2]]) -> (f64, ToyNet) {
        let n = xs.len() as f64;
        let h = self.hidden;
        let n_layers = self.layers.len();
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let mut inputs = vec![[0.0; 2]; n_layers];
        let mut acts = vec![0.0; n_layers * h];
        for (x, y) in xs.iter().zip(ys) {
            let z0 = self.pre(x);
            let mut z = z0;
            for (li, l) in self.layers.iter().enumerate() {
                inputs[li] = z;
                z = l.forward(&z, &mut acts[li * h..(li + 1) * h]);
            }
            let out = self.post(&z);
            total += sq_err(&out, y);

            let dout = [2.0 * (out[0] - y[0]) / n, 2.0 * (out[1] - y[1]) / n];
            for r in 0..2 {
                grad.post_b[r] += dout[r];
                for c in 0..2 {
                    grad.post_w[r * 2 + c] += dout[r] * z[c];
                }
            }
            let mut dz = [0.0; 2];
            for (c, d) in dz.iter_mut().enumerate() {
                *d = (0..2).map(|r| self.post_w[r * 2 + c] * dout[r]).sum();
            }

            for li in (0..n_layers).rev() {
                let l = &self.layers[li];
                let g = &mut grad.layers[li];
                let act = &acts[li * h..(li + 1) * h];
                let input = inputs[li];
                let mut dinput = dz;
                for r in 0..2 {
                    g.b2[r] += dz[r];
                }
                for c in 0..h {
                    g.w2[c] += dz[0] * act[c];
                    g.w2[h + c] += dz[1] * act[c];
                    let ds = l.w2[c] * dz[0] + l.w2[h + c] * dz[1];
                    let du = ds * (1.0 - act[c] * act[c]);
                    g.b1[c] += du;
                    g.w1[c * 2] += du * input[0];
                    g.w1[c * 2 + 1] += du * input[1];
                    dinput[0] += l.w1[c * 2] * du;
                    dinput[1] += l.w1[c * 2 + 1] * du;
                }
                dz = dinput;
            }

            for r in 0..2 {
                let da = dz[r] * (1.0 - z0[r] * z0[r]);
                grad.pre_b[r] += da;
                for c in 0..4 {
                    grad.pre_w[r * 4 + c] += da * x[c];
                }
            }
        }
        (total / n, grad)
    }
}

pub(crate) fn sq_err(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Relative error `|manual - fd| / |fd|` per parameter tensor, using
/// central differences of step `h`.
pub fn finite_difference_check(
    net: &ToyNet,
    xs: &[[f64; 4]],
    ys: &[[f64; 2]],
    h: f64,
) -> Vec<(String, f64)> {
    let (_, manual) = net.loss_and_grad(xs, ys);
    let manual = manual.tensors().into_iter().cloned().collect::<Vec<_>>();
    let names = net.tensor_names();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let len = manual[t].len();
        let mut num = 0.0;
        let mut den = 0.0;
        for e in 0..len {
            let orig = probe.tensors()[t][e];
            probe.tensors_mut()[t][e] = orig + h;
            let plus = probe.loss(xs, ys);
            probe.tensors_mut()[t][e] = orig - h;
            let minus = probe.loss(xs, ys);
            probe.tensors_mut()[t][e] = orig;
            let fd = (plus - minus) / (2.0 * h);
            num += (manual[t][e] - fd).powi(2);
            den += fd * fd;
        }
        out.push((name, num.sqrt() / den.sqrt().max(1e-12)));
    }
    out
}
