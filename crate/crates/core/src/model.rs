//! A one-block attention network with named linear submodules.
//!
//! Input is a token matrix of shape `(batch·seq_len) × embed_dim`, rows grouped
//! by sample. The block computes single-head scaled dot-product attention with
//! `q, k, v, o` projections, mean-pools the tokens of each sample, applies the
//! head activation and a linear head.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapter::checkpoint::{self, ArraySpec, SectionHeader, SectionKind};
use crate::adapter::{AdapterConfig, AdapterLayer, BackwardOptions, ForwardCache, GradientBundle, Mode};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, matmul, matmul_nt, matmul_tn, seeded_gaussian, DetRng, Matrix, Vector};

pub const SEQ_LEN: usize = 8;
pub const MODULE_NAMES: [&str; 5] = ["q", "k", "v", "o", "head"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModule {
    name: String,
    w: Matrix,
    b: Vector,
    adapter: Option<AdapterLayer>,
}

impl LinearModule {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The frozen weight (`d_out × d_in`).
    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> &Vector {
        &self.b
    }

    pub fn adapter(&self) -> Option<&AdapterLayer> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut AdapterLayer> {
        self.adapter.as_mut()
    }

    fn forward(&self, x: &Matrix, mode: Mode, rng: &mut DetRng) -> Result<(Matrix, Option<ForwardCache>)> {
        match &self.adapter {
            Some(a) if a.is_merged() => Ok((a.merged_forward(x)?, None)),
            Some(a) => {
                let (y, cache) = a.forward(x, mode, rng)?;
                Ok((y, Some(cache)))
            }
            None => {
                if x.cols() != self.w.cols() {
                    return Err(Error::Shape(format!(
                        "module {}: input has {} features, expects {}",
                        self.name,
                        x.cols(),
                        self.w.cols()
                    )));
                }
                let mut y = matmul_nt(x, &self.w)?;
                y.add_row_broadcast(&self.b)?;
                Ok((y, None))
            }
        }
    }

    /// Replace the frozen weight of a module that has no adapter.
    pub(crate) fn set_weight(&mut self, w: Matrix) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::State(format!("module {} is adapted; its frozen weight is fixed", self.name)));
        }
        if w.shape() != self.w.shape() {
            return Err(Error::Shape(format!("module {}: weight {:?} vs {:?}", self.name, w.shape(), self.w.shape())));
        }
        self.w = w;
        Ok(())
    }

    fn backward(
        &self,
        cache: Option<&ForwardCache>,
        dy: &Matrix,
        opts: BackwardOptions,
    ) -> Result<(Option<GradientBundle>, Matrix)> {
        match (&self.adapter, cache) {
            (Some(a), Some(c)) => {
                let (g, dx) = a.backward_with(c, dy, opts)?;
                Ok((Some(g), dx))
            }
            (Some(_), None) => Err(Error::State(format!("module {}: merged adapters have no backward", self.name))),
            (None, _) => Ok((None, matmul(dy, &self.w)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    embed_dim: usize,
    n_classes: usize,
    seq_len: usize,
    activation: Activation,
    modules: Vec<LinearModule>,
}

/// Intermediate values of one forward pass, consumed by [`net_backward`].
#[derive(Debug, Clone)]
pub struct NetCache {
    mode: Mode,
    batch: usize,
    module_caches: Vec<Option<ForwardCache>>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities, one `seq_len × seq_len` block per sample.
    probs: Vec<Matrix>,
    /// Pooled features after the activation.
    act: Matrix,
}

impl NetCache {
    /// Clamped columns across every adapter forward in this pass.
    pub fn clamp_count(&self) -> usize {
        self.module_caches.iter().flatten().map(ForwardCache::clamp_count).sum()
    }
}

/// Adapter gradients in module order (only adapted modules) and `∂L/∂x`.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub adapters: Vec<(String, GradientBundle)>,
    pub d_input: Matrix,
}

impl NetGrads {
    pub fn bundles_mut(&mut self) -> Vec<&mut GradientBundle> {
        self.adapters.iter_mut().map(|(_, g)| g).collect()
    }
}

impl ToyNet {
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn modules(&self) -> &[LinearModule] {
        &self.modules
    }

    pub fn module(&self, name: &str) -> Option<&LinearModule> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut LinearModule> {
        self.modules.iter_mut().find(|m| m.name == name)
    }

    fn idx(&self, name: &str) -> usize {
        self.modules.iter().position(|m| m.name == name).expect("fixed module layout")
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterLayer> {
        self.modules.iter().filter_map(|m| m.adapter.as_ref())
    }

    /// Trainable tensors of every adapter in module order, with their decay flags.
    pub fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        let mut out = Vec::new();
        for m in &mut self.modules {
            if let Some(a) = &mut m.adapter {
                out.extend(a.parameters_mut()?);
            }
        }
        Ok(out)
    }

    pub fn trainable_parameters(&self) -> usize {
        self.adapters().map(|a| a.count_parameters().trainable).sum()
    }

    /// Turn a `batch × (seq_len·embed_dim)` sample matrix into token rows.
    pub fn tokens_from_samples(&self, samples: &Matrix) -> Result<Matrix> {
        if samples.cols() != self.seq_len * self.embed_dim {
            return Err(Error::Shape(format!(
                "sample width {} is not seq_len·embed_dim = {}",
                samples.cols(),
                self.seq_len * self.embed_dim
            )));
        }
        Matrix::new(samples.rows() * self.seq_len, self.embed_dim, samples.data().to_vec())
    }
}

/// Deterministic Gaussian-initialised network. Attention projections have
/// zero bias; the head bias is Gaussian.
pub fn build_toy_net(embed_dim: usize, n_classes: usize, seed: u64) -> Result<ToyNet> {
    if embed_dim < 2 {
        return Err(Error::Config(format!("embed_dim must be >= 2, got {embed_dim}")));
    }
    if n_classes == 0 {
        return Err(Error::Config("n_classes must be >= 1".into()));
    }
    let std = 1.0 / (embed_dim as f64).sqrt();
    let modules = MODULE_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let stream = derive_seed(seed, 10 + i as u64);
            let d_out = if name == "head" { n_classes } else { embed_dim };
            let w = seeded_gaussian(d_out, embed_dim, std, stream);
            let b = if name == "head" {
                Vector::new(seeded_gaussian(1, d_out, 0.1, derive_seed(stream, 1)).into_data())
            } else {
                Vector::zeros(d_out)
            };
            LinearModule { name: name.to_string(), w, b, adapter: None }
        })
        .collect();
    Ok(ToyNet { embed_dim, n_classes, seq_len: SEQ_LEN, activation: Activation::Tanh, modules })
}

/// Wrap each targeted module's frozen weight in an adapter. Each module draws
/// its factors from its own stream of `cfg.seed`.
pub fn inject_adapters(net: &mut ToyNet, targets: &[&str], cfg: &AdapterConfig) -> Result<usize> {
    for t in targets {
        if !MODULE_NAMES.contains(t) {
            return Err(Error::Config(format!("unknown target module {t:?}; expected one of {MODULE_NAMES:?}")));
        }
    }
    let mut injected = 0;
    for (i, m) in net.modules.iter_mut().enumerate() {
        if !targets.contains(&m.name.as_str()) {
            continue;
        }
        if m.adapter.is_some() {
            return Err(Error::State(format!("module {} already has an adapter", m.name)));
        }
        let module_cfg = AdapterConfig { seed: derive_seed(cfg.seed, 100 + i as u64), ..cfg.clone() };
        m.adapter = Some(AdapterLayer::new(m.w.clone(), m.b.clone(), module_cfg)?);
        injected += 1;
    }
    Ok(injected)
}

fn block(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(len, m.cols(), |r, c| m.get(start + r, c))
}

fn softmax_rows(s: &mut Matrix) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Logits (`batch × n_classes`) and the cache for a backward pass.
///
/// Adapter dropout masks are drawn from `rng` module by module in the order
/// `q, k, v, o, head`.
pub fn net_forward(net: &ToyNet, x: &Matrix, mode: Mode, rng: &mut DetRng) -> Result<(Matrix, NetCache)> {
    let (t, e) = (net.seq_len, net.embed_dim);
    if x.cols() != e || !x.rows().is_multiple_of(t) {
        return Err(Error::Shape(format!("token matrix {}x{} is not (batch·{t})x{e}", x.rows(), x.cols())));
    }
    let batch = x.rows() / t;
    let mut module_caches = Vec::with_capacity(net.modules.len());
    let mut run = |name: &str, input: &Matrix, caches: &mut Vec<Option<ForwardCache>>| -> Result<Matrix> {
        let (y, c) = net.modules[net.idx(name)].forward(input, mode, rng)?;
        caches.push(c);
        Ok(y)
    };
    let q = run("q", x, &mut module_caches)?;
    let k = run("k", x, &mut module_caches)?;
    let v = run("v", x, &mut module_caches)?;

    let inv_sqrt = 1.0 / (e as f64).sqrt();
    let mut probs = Vec::with_capacity(batch);
    let mut z = Matrix::zeros(x.rows(), e);
    for s in 0..batch {
        let (qs, ks, vs) = (block(&q, s * t, t), block(&k, s * t, t), block(&v, s * t, t));
        let mut scores = matmul_nt(&qs, &ks)?.scale(inv_sqrt);
        softmax_rows(&mut scores);
        let zs = matmul(&scores, &vs)?;
        for r in 0..t {
            z.row_mut(s * t + r).copy_from_slice(zs.row(r));
        }
        probs.push(scores);
    }
    let o = run("o", &z, &mut module_caches)?;

    let act = Matrix::from_fn(batch, e, |s, c| {
        let mean = (0..t).map(|r| o.get(s * t + r, c)).sum::<f64>() / t as f64;
        net.activation.apply(mean)
    });
    let logits = run("head", &act, &mut module_caches)?;
    let cache = NetCache { mode, batch, module_caches, q, k, v, probs, act };
    Ok((logits, cache))
}

/// Back-propagate `∂L/∂logits` through the block.
pub fn net_backward(net: &ToyNet, cache: &NetCache, dlogits: &Matrix) -> Result<NetGrads> {
    net_backward_with(net, cache, dlogits, BackwardOptions::default())
}

pub fn net_backward_with(net: &ToyNet, cache: &NetCache, dlogits: &Matrix, opts: BackwardOptions) -> Result<NetGrads> {
    if cache.mode != Mode::Train {
        return Err(Error::State("net_backward needs a train-mode cache".into()));
    }
    if dlogits.shape() != (cache.batch, net.n_classes) {
        return Err(Error::Shape(format!(
            "logit gradient {}x{} vs {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            cache.batch,
            net.n_classes
        )));
    }
    let (t, e) = (net.seq_len, net.embed_dim);
    let mut grads: Vec<Option<GradientBundle>> = vec![None; net.modules.len()];
    let back = |name: &str, dy: &Matrix, grads: &mut Vec<Option<GradientBundle>>| -> Result<Matrix> {
        let i = net.idx(name);
        let (g, dx) = net.modules[i].backward(cache.module_caches[i].as_ref(), dy, opts)?;
        grads[i] = g;
        Ok(dx)
    };

    let d_act = back("head", dlogits, &mut grads)?;
    let d_pooled =
        Matrix::from_fn(cache.batch, e, |s, c| d_act.get(s, c) * net.activation.grad_from_output(cache.act.get(s, c)));
    let d_o = Matrix::from_fn(cache.batch * t, e, |r, c| d_pooled.get(r / t, c) / t as f64);
    let d_z = back("o", &d_o, &mut grads)?;

    let inv_sqrt = 1.0 / (e as f64).sqrt();
    let mut d_q = Matrix::zeros(cache.batch * t, e);
    let mut d_k = Matrix::zeros(cache.batch * t, e);
    let mut d_v = Matrix::zeros(cache.batch * t, e);
    for s in 0..cache.batch {
        let p = &cache.probs[s];
        let (qs, ks, vs) = (block(&cache.q, s * t, t), block(&cache.k, s * t, t), block(&cache.v, s * t, t));
        let dzs = block(&d_z, s * t, t);
        let dp = matmul_nt(&dzs, &vs)?;
        let dvs = matmul_tn(p, &dzs)?;
        // Softmax Jacobian, row by row: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
        let mut ds = Matrix::zeros(t, t);
        for r in 0..t {
            let inner: f64 = dp.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
            for c in 0..t {
                ds.set(r, c, p.get(r, c) * (dp.get(r, c) - inner) * inv_sqrt);
            }
        }
        let dqs = matmul(&ds, &ks)?;
        let dks = matmul_tn(&ds, &qs)?;
        for r in 0..t {
            d_q.row_mut(s * t + r).copy_from_slice(dqs.row(r));
            d_k.row_mut(s * t + r).copy_from_slice(dks.row(r));
            d_v.row_mut(s * t + r).copy_from_slice(dvs.row(r));
        }
    }
    let mut d_input = back("q", &d_q, &mut grads)?;
    d_input.add_assign(&back("k", &d_k, &mut grads)?)?;
    d_input.add_assign(&back("v", &d_v, &mut grads)?)?;

    let adapters = net.modules.iter().zip(grads).filter_map(|(m, g)| g.map(|g| (m.name.clone(), g))).collect();
    Ok(NetGrads { adapters, d_input })
}

fn merge_state(net: &ToyNet) -> Result<Option<bool>> {
    let mut state = None;
    for a in net.adapters() {
        match state {
            None => state = Some(a.is_merged()),
            Some(s) if s != a.is_merged() => {
                return Err(Error::State("adapters are in a mixed merge state".into()));
            }
            _ => {}
        }
    }
    Ok(state)
}

pub fn merge_all(net: &mut ToyNet) -> Result<()> {
    if merge_state(net)? == Some(true) {
        return Err(Error::State("network is already merged".into()));
    }
    for m in &mut net.modules {
        if let Some(a) = &mut m.adapter {
            a.merge()?;
        }
    }
    Ok(())
}

pub fn unmerge_all(net: &mut ToyNet) -> Result<()> {
    if merge_state(net)? == Some(false) {
        return Err(Error::State("network is not merged".into()));
    }
    for m in &mut net.modules {
        if let Some(a) = &mut m.adapter {
            a.unmerge()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    embed_dim: usize,
    n_classes: usize,
    seq_len: usize,
    activation: Activation,
    modules: Vec<String>,
}

/// A network section carrying the manifest, then one section per module.
pub fn encode_net(net: &ToyNet) -> Result<Vec<u8>> {
    let manifest = Manifest {
        embed_dim: net.embed_dim,
        n_classes: net.n_classes,
        seq_len: net.seq_len,
        activation: net.activation,
        modules: net.modules.iter().map(|m| m.name.clone()).collect(),
    };
    let header = SectionHeader {
        kind: SectionKind::Network,
        d_in: net.embed_dim,
        d_out: net.n_classes,
        rank_plus: 0,
        rank_minus: 0,
        merged: merge_state(net)? == Some(true),
        config: None,
        arrays: Vec::new(),
        manifest: Some(json!(manifest)),
    };
    let mut out = checkpoint::encode_section(&header, &[])?;
    for m in &net.modules {
        match &m.adapter {
            Some(a) => out.extend(checkpoint::encode_layer(a)?),
            None => {
                let header = SectionHeader {
                    kind: SectionKind::Linear,
                    d_in: m.w.cols(),
                    d_out: m.w.rows(),
                    rank_plus: 0,
                    rank_minus: 0,
                    merged: false,
                    config: None,
                    arrays: vec![
                        ArraySpec { name: "W".into(), rows: m.w.rows(), cols: m.w.cols() },
                        ArraySpec { name: "b".into(), rows: 1, cols: m.b.len() },
                    ],
                    manifest: None,
                };
                out.extend(checkpoint::encode_section(&header, &[m.w.data(), m.b.as_slice()])?);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode_net`]. A module loaded from a merged adapter section
/// reports `Ŵ` as its weight since the frozen weight is not stored.
pub fn decode_net(bytes: &[u8]) -> Result<ToyNet> {
    let (header, _, mut pos) = checkpoint::decode_section(bytes)?;
    if header.kind != SectionKind::Network {
        return Err(Error::Format(format!("expected a network section first, found {:?}", header.kind)));
    }
    let manifest: Manifest = serde_json::from_value(
        header.manifest.ok_or_else(|| Error::Format("network section without manifest".into()))?,
    )?;
    if manifest.modules != MODULE_NAMES {
        return Err(Error::Format(format!("unexpected module list {:?}", manifest.modules)));
    }
    let mut modules = Vec::with_capacity(manifest.modules.len());
    for name in &manifest.modules {
        let (h, arrays, used) = checkpoint::decode_section(&bytes[pos..])?;
        pos += used;
        let module = match h.kind {
            SectionKind::Adapter => {
                let a = checkpoint::layer_from_section(h, arrays)?;
                let w = match a.merged_weight() {
                    Some(w_hat) => w_hat.clone(),
                    None => a.params()?.w0().clone(),
                };
                LinearModule { name: name.clone(), w, b: a.bias().clone(), adapter: Some(a) }
            }
            SectionKind::Linear => {
                let mut it = arrays.into_iter();
                let w = Matrix::new(h.d_out, h.d_in, it.next().unwrap_or_default())
                    .map_err(|e| Error::Format(format!("module {name}: {e}")))?;
                let b = Vector::new(it.next().unwrap_or_default());
                if b.len() != h.d_out {
                    return Err(Error::Format(format!("module {name}: bias length {}", b.len())));
                }
                LinearModule { name: name.clone(), w, b, adapter: None }
            }
            SectionKind::Network => return Err(Error::Format("nested network section".into())),
        };
        modules.push(module);
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after network checkpoint".into()));
    }
    let net = ToyNet {
        embed_dim: manifest.embed_dim,
        n_classes: manifest.n_classes,
        seq_len: manifest.seq_len,
        activation: manifest.activation,
        modules,
    };
    let e = net.embed_dim;
    for m in &net.modules {
        let d_out = if m.name == "head" { net.n_classes } else { e };
        if m.w.shape() != (d_out, e) {
            return Err(Error::Format(format!("module {} has shape {:?}", m.name, m.w.shape())));
        }
    }
    Ok(net)
}
