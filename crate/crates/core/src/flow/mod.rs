//! Invertible affine-coupling flow `x = f(z)`.
//!
//! Each layer leaves its masked coordinates unchanged and applies an affine
//! map to the rest, conditioned on the masked ones:
//!
//! ```text
//! f⁻¹ (x → z):  z_free = (x_free - t(x_mask)) · exp(-s(x_mask))
//! f   (z → x):  x_free = z_free · exp(s(z_mask)) + t(z_mask)
//! ```
//!
//! with `s = cap · tanh(scale_net(·))` and `t = shift_net(·)`. The inverse
//! pass runs layers `0..L`, the forward pass runs them in reverse, and
//! `log |det ∂f⁻¹/∂x| = -Σ s` over all layers.
//!
//! Parameters are flattened layer-major, then scale net before shift net,
//! then per dense layer the row-major weights followed by the biases.

mod mlp;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{Dense, Mlp, MlpCache};

use crate::error::{Error, Result};

pub const DEFAULT_SCALE_CAP: f64 = 2.0;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 10;
pub const FLOW_FORMAT: &str = "nda-flow";

/// Architecture knobs for [`init_flow_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden: usize,
    /// Hidden layers per conditioner net; `None` picks 2 for dim ≤ 64, else 1.
    pub depth: Option<usize>,
    pub scale_cap: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            depth: None,
            scale_cap: DEFAULT_SCALE_CAP,
        }
    }
}

impl FlowConfig {
    pub fn depth_for(&self, dim: usize) -> usize {
        self.depth.unwrap_or(if dim <= 64 { 2 } else { 1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    pub scale_cap: f64,
    #[serde(skip)]
    masked: Vec<usize>,
    #[serde(skip)]
    free: Vec<usize>,
}

/// Row-major (`n × free`) intermediates of one batched inverse pass.
struct LayerCache {
    output_free: Vec<f64>,
    tanh_raw: Vec<f64>,
    scale: Vec<f64>,
    scale_cache: MlpCache,
    shift_cache: MlpCache,
}

impl CouplingLayer {
    fn new(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp, scale_cap: f64) -> Result<Self> {
        let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if masked.is_empty() || free.is_empty() {
            return Err(Error::invalid("coupling mask needs both pass-through and transformed coordinates"));
        }
        if !(scale_cap > 0.0 && scale_cap.is_finite()) {
            return Err(Error::invalid("scale cap must be positive and finite"));
        }
        for net in [&scale_net, &shift_net] {
            if !net.is_consistent() || net.in_dim() != masked.len() || net.out_dim() != free.len() {
                return Err(Error::invalid("conditioner net shape does not match the mask"));
            }
        }
        Ok(CouplingLayer {
            mask,
            scale_net,
            shift_net,
            scale_cap,
            masked,
            free,
        })
    }

    fn rebuild(self) -> Result<Self> {
        CouplingLayer::new(self.mask, self.scale_net, self.shift_net, self.scale_cap)
    }

    /// Masked coordinates of each of the `n` rows of `v`.
    fn conditioner(&self, v: &[f64]) -> Vec<f64> {
        let d = self.mask.len();
        v.chunks_exact(d)
            .flat_map(|row| self.masked.iter().map(move |&i| row[i]))
            .collect()
    }

    /// x → z in place on `n` row-major vectors, subtracting this layer's
    /// scales from each row's log-det.
    fn inverse(&self, v: &mut [f64], n: usize, logdet: &mut [f64]) -> LayerCache {
        let d = self.mask.len();
        let nf = self.free.len();
        let cond = self.conditioner(v);
        let mut scale_cache = MlpCache::default();
        let mut shift_cache = MlpCache::default();
        let raw = self.scale_net.forward_batch(&cond, n, &mut scale_cache);
        let t = self.shift_net.forward_batch(&cond, n, &mut shift_cache);
        let tanh_raw: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
        let scale: Vec<f64> = tanh_raw.iter().map(|th| self.scale_cap * th).collect();
        let mut output_free = Vec::with_capacity(n * nf);
        for b in 0..n {
            let row = &mut v[b * d..(b + 1) * d];
            for (k, &i) in self.free.iter().enumerate() {
                let s = scale[b * nf + k];
                row[i] = (row[i] - t[b * nf + k]) * (-s).exp();
                output_free.push(row[i]);
                logdet[b] -= s;
            }
        }
        LayerCache {
            output_free,
            tanh_raw,
            scale,
            scale_cache,
            shift_cache,
        }
    }

    /// z → x in place on `n` row-major vectors, adding this layer's
    /// `log |det ∂x/∂z|` to each row.
    fn forward(&self, v: &mut [f64], n: usize, logdet: &mut [f64]) {
        let d = self.mask.len();
        let nf = self.free.len();
        let cond = self.conditioner(v);
        let mut cache = MlpCache::default();
        let raw = self.scale_net.forward_batch(&cond, n, &mut cache);
        let t = self.shift_net.forward_batch(&cond, n, &mut cache);
        for b in 0..n {
            let row = &mut v[b * d..(b + 1) * d];
            for (k, &i) in self.free.iter().enumerate() {
                let s = self.scale_cap * raw[b * nf + k].tanh();
                row[i] = row[i] * s.exp() + t[b * nf + k];
                logdet[b] += s;
            }
        }
    }

    /// Back-propagates `grad` (w.r.t. this layer's output rows) to its
    /// input rows. `grad_logj[b]` is the upstream weight of row b's log-det.
    fn backward(&self, cache: &LayerCache, grad: &mut [f64], grad_logj: &[f64], param_grads: &mut [f64]) {
        let d = self.mask.len();
        let nf = self.free.len();
        let n = grad_logj.len();
        let mut g_shift = Vec::with_capacity(n * nf);
        let mut g_raw = Vec::with_capacity(n * nf);
        for b in 0..n {
            let row = &mut grad[b * d..(b + 1) * d];
            for (k, &i) in self.free.iter().enumerate() {
                let j = b * nf + k;
                let e = (-cache.scale[j]).exp();
                let gv = row[i];
                g_shift.push(-gv * e);
                let g_scale = -gv * cache.output_free[j] - grad_logj[b];
                g_raw.push(g_scale * self.scale_cap * (1.0 - cache.tanh_raw[j] * cache.tanh_raw[j]));
                row[i] = gv * e;
            }
        }
        let (gs, gt) = param_grads.split_at_mut(self.scale_net.param_count());
        let cond_s = self.scale_net.backward_batch(&cache.scale_cache, &g_raw, gs);
        let cond_t = self.shift_net.backward_batch(&cache.shift_cache, &g_shift, gt);
        let nm = self.masked.len();
        for b in 0..n {
            let row = &mut grad[b * d..(b + 1) * d];
            for (k, &i) in self.masked.iter().enumerate() {
                row[i] += cond_s[b * nm + k] + cond_t[b * nm + k];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.scale_net.param_count() + self.shift_net.param_count()
    }
}

/// Flat gradient vector in the flow's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads(vec![0.0; n])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Intermediates of [`FlowModel::inverse_cached`].
pub struct FlowCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

/// Half/half mask for layer `index`: first half passes through on even
/// layers, second half on odd layers.
pub fn alternating_mask(dim: usize, index: usize) -> Vec<bool> {
    let half = dim / 2;
    (0..dim).map(|i| (i < half) == (index % 2 == 0)).collect()
}

pub fn init_flow(dim: usize, n_layers: usize, hidden: usize, seed: u64) -> Result<FlowModel> {
    init_flow_with(
        dim,
        &FlowConfig {
            n_layers,
            hidden,
            ..FlowConfig::default()
        },
        seed,
    )
}

/// Identity-initialized flow: every conditioner's output layer is zero.
pub fn init_flow_with(dim: usize, config: &FlowConfig, seed: u64) -> Result<FlowModel> {
    if dim < 2 {
        return Err(Error::invalid("a coupling flow needs dim >= 2"));
    }
    if config.n_layers == 0 || config.hidden == 0 {
        return Err(Error::invalid("flow needs at least one layer and one hidden unit"));
    }
    let depth = config.depth_for(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..config.n_layers)
        .map(|l| {
            let mask = alternating_mask(dim, l);
            let n_mask = mask.iter().filter(|&&m| m).count();
            let n_free = dim - n_mask;
            let scale_net = Mlp::new(n_mask, config.hidden, depth, n_free, &mut rng);
            let shift_net = Mlp::new(n_mask, config.hidden, depth, n_free, &mut rng);
            CouplingLayer::new(mask, scale_net, shift_net, config.scale_cap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowModel { dim, layers })
}

impl FlowModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            l.scale_net.write_params(&mut out);
            l.shift_net.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            pos += l.scale_net.read_params(&params[pos..]);
            pos += l.shift_net.read_params(&params[pos..]);
        }
        Ok(())
    }

    /// Adds uniform noise in ±`scale` to every parameter.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-scale..=scale));
        self.set_params(&p).expect("length unchanged");
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    fn check_layer(v: &[f64], logdet: &[f64], layer: usize) -> Result<()> {
        if logdet.iter().chain(v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("flow output at layer {layer}")));
        }
        Ok(())
    }

    fn stack<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(rows.len() * self.dim);
        for r in rows {
            self.check_input(r.as_ref())?;
            v.extend_from_slice(r.as_ref());
        }
        Ok(v)
    }

    fn unstack(&self, v: &[f64]) -> Vec<Vec<f64>> {
        v.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// `z = f⁻¹(x)` and `log J_x = log |det ∂f⁻¹/∂x|`.
    pub fn inverse_with_logdet(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (mut z, lj) = self.inverse_batch(&[x])?;
        Ok((z.pop().expect("one row"), lj[0]))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inverse_with_logdet(x).map(|(z, _)| z)
    }

    /// [`FlowModel::inverse_with_logdet`] for many vectors at once.
    pub fn inverse_batch<R: AsRef<[f64]>>(&self, x: &[R]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.inverse_cached(x).map(|(z, lj, _)| (z, lj))
    }

    /// Batched inverse that also keeps the intermediates needed by
    /// [`FlowModel::backprop_cached`].
    pub fn inverse_cached<R: AsRef<[f64]>>(&self, x: &[R]) -> Result<(Vec<Vec<f64>>, Vec<f64>, FlowCache)> {
        let n = x.len();
        let mut v = self.stack(x)?;
        let mut logdet = vec![0.0; n];
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(l.inverse(&mut v, n, &mut logdet));
            Self::check_layer(&v, &logdet, i)?;
        }
        Ok((self.unstack(&v), logdet, FlowCache { layers }))
    }

    /// `x = f(z)` and `log |det ∂f/∂z|`.
    pub fn forward_with_logdet(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut v = self.stack(&[z])?;
        let mut logdet = [0.0];
        for (i, l) in self.layers.iter().enumerate().rev() {
            l.forward(&mut v, 1, &mut logdet);
            Self::check_layer(&v, &logdet, i)?;
        }
        Ok((v, logdet[0]))
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward_with_logdet(z).map(|(x, _)| x)
    }

    /// Gradients of `Σ_b grad_z[b]·z(x_b) + grad_logj[b]·log J(x_b)` with
    /// respect to every flow parameter and every input vector. Each
    /// parameter's contributions are summed in batch order.
    pub fn backprop<R: AsRef<[f64]>, G: AsRef<[f64]>>(
        &self,
        x: &[R],
        grad_z: &[G],
        grad_logj: &[f64],
    ) -> Result<(ParamGrads, Vec<Vec<f64>>)> {
        if x.len() != grad_z.len() || x.len() != grad_logj.len() {
            return Err(Error::invalid(format!(
                "backprop batch sizes differ: {} inputs, {} z-gradients, {} log-det gradients",
                x.len(),
                grad_z.len(),
                grad_logj.len()
            )));
        }
        let (_, _, cache) = self.inverse_cached(x)?;
        self.backprop_cached(&cache, grad_z, grad_logj)
    }

    /// Backward half of [`FlowModel::backprop`], reusing a cached inverse pass.
    pub fn backprop_cached<G: AsRef<[f64]>>(
        &self,
        cache: &FlowCache,
        grad_z: &[G],
        grad_logj: &[f64],
    ) -> Result<(ParamGrads, Vec<Vec<f64>>)> {
        let n = grad_logj.len();
        if grad_z.len() != n || cache.layers.first().is_some_and(|c| c.scale.len() != n * self.layers[0].free.len()) {
            return Err(Error::invalid("backprop gradients do not match the cached batch"));
        }
        let mut g = self.stack(grad_z)?;
        let mut grads = ParamGrads::zeros(self.param_count());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        for (i, l) in self.layers.iter().enumerate().rev() {
            let pc = l.param_count();
            l.backward(&cache.layers[i], &mut g, grad_logj, &mut grads.0[offsets[i]..offsets[i] + pc]);
        }
        Ok((grads, self.unstack(&g)))
    }

    pub fn to_doc(&self) -> FlowDoc {
        FlowDoc {
            format: FLOW_FORMAT.into(),
            version: 1,
            dim: self.dim,
            layers: self.layers.clone(),
        }
    }

    pub fn from_doc(doc: FlowDoc) -> Result<Self> {
        if doc.format != FLOW_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!("unsupported flow document {} v{}", doc.format, doc.version)));
        }
        if doc.layers.is_empty() {
            return Err(Error::invalid("flow document has no layers"));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                if l.mask.len() != doc.dim {
                    return Err(Error::Dimension {
                        expected: doc.dim,
                        found: l.mask.len(),
                    });
                }
                l.rebuild()
            })
            .collect::<Result<Vec<_>>>()?;
        let flow = FlowModel { dim: doc.dim, layers };
        if flow.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow parameters".into()));
        }
        Ok(flow)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowDoc {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}
