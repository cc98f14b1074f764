use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer, `weights` row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// `n × out_dim` row-major output for `n × in_dim` row-major input.
    fn apply_batch(&self, input: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), n * self.in_dim);
        let mut out = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            out.extend_from_slice(&self.bias);
        }
        // out += input · Wᵀ
        unsafe {
            matrixmultiply::dgemm(
                n,
                self.in_dim,
                self.out_dim,
                1.0,
                input.as_ptr(),
                self.in_dim as isize,
                1,
                self.weights.as_ptr(),
                1,
                self.in_dim as isize,
                1.0,
                out.as_mut_ptr(),
                self.out_dim as isize,
                1,
            );
        }
        out
    }
}

/// Feed-forward net with tanh on every hidden layer and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Row-major inputs of every dense layer from one batched forward pass.
#[derive(Debug, Default, Clone)]
pub struct MlpCache {
    n: usize,
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// Hidden layers drawn uniformly in ±1/√fan_in, output layer zeroed.
    pub fn new<R: Rng>(in_dim: usize, hidden: usize, depth: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = in_dim;
        for _ in 0..depth {
            let bound = 1.0 / (fan_in as f64).sqrt();
            layers.push(Dense {
                in_dim: fan_in,
                out_dim: hidden,
                weights: (0..fan_in * hidden).map(|_| rng.random_range(-bound..bound)).collect(),
                bias: (0..hidden).map(|_| rng.random_range(-bound..bound)).collect(),
            });
            fan_in = hidden;
        }
        layers.push(Dense {
            in_dim: fan_in,
            out_dim,
            weights: vec![0.0; fan_in * out_dim],
            bias: vec![0.0; out_dim],
        });
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn is_consistent(&self) -> bool {
        !self.layers.is_empty()
            && self.layers.windows(2).all(|w| w[0].out_dim == w[1].in_dim)
            && self
                .layers
                .iter()
                .all(|l| l.weights.len() == l.in_dim * l.out_dim && l.bias.len() == l.out_dim)
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_batch(input, 1, &mut MlpCache::default())
    }

    /// Forward pass over `n` row-major inputs, keeping what
    /// [`Mlp::backward_batch`] needs.
    pub fn forward_batch(&self, input: &[f64], n: usize, cache: &mut MlpCache) -> Vec<f64> {
        cache.n = n;
        cache.inputs.clear();
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.apply_batch(&cur, n);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cache.inputs.push(std::mem::replace(&mut cur, next));
        }
        cur
    }

    /// Accumulates parameter gradients into `grads` (this net's slice, same
    /// layout as [`Mlp::write_params`]) row by row, and returns the
    /// row-major input gradients.
    pub fn backward_batch(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let n = cache.n;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (ni, no) = (layer.in_dim, layer.out_dim);
            let input = &cache.inputs[i];
            let base = offsets[i];
            let (gw, gb) = grads[base..base + layer.param_count()].split_at_mut(ni * no);
            for (g_row, in_row) in g.chunks_exact(no).zip(input.chunks_exact(ni)) {
                for (o, &go) in g_row.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    for (w, x) in gw[o * ni..(o + 1) * ni].iter_mut().zip(in_row) {
                        *w += go * x;
                    }
                }
            }
            let mut g_in = vec![0.0; n * ni];
            // g_in = g · W
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    no,
                    ni,
                    1.0,
                    g.as_ptr(),
                    no as isize,
                    1,
                    layer.weights.as_ptr(),
                    ni as isize,
                    1,
                    0.0,
                    g_in.as_mut_ptr(),
                    ni as isize,
                    1,
                );
            }
            if i > 0 {
                // input of layer i is tanh of the previous pre-activation
                for (gi, a) in g_in.iter_mut().zip(input) {
                    *gi *= 1.0 - a * a;
                }
            }
            g = g_in;
        }
        g
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters from the front of `src`, returning how many were used.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&src[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[pos..pos + nb]);
            pos += nb;
        }
        pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::new(3, 5, 2, 2, &mut rng);
        let mut p = Vec::new();
        net.write_params(&mut p);
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        net.read_params(&p);
        let x = [0.3, -0.8, 1.1];
        let up = [0.7, -1.3];
        let loss = |n: &Mlp, x: &[f64]| n.forward(x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let mut cache = MlpCache::default();
        let out = net.forward_batch(&x, 1, &mut cache);
        assert_eq!(out, net.forward(&x));
        let mut grads = vec![0.0; net.param_count()];
        let gx = net.backward_batch(&cache, &up, &mut grads);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            let mut a = net.clone();
            a.read_params(&q);
            q[i] -= 2.0 * h;
            let mut b = net.clone();
            b.read_params(&q);
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grads[i]);
        }
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gx[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(4, 8, 1, 3, &mut rng);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 3]);
        assert_eq!(net.param_count(), 4 * 8 + 8 + 8 * 3 + 3);
    }
}
