//! The adapter layer: signed low-rank residual, columnwise directional
//! projection, dual-path forward, hand-derived backward, merge and unmerge.
//!
//! Orientation: the frozen weight `W0` is `d_out × d_in` and column `j`
//! belongs to input feature `j`. The residual is produced transposed,
//!
//! ```text
//! ΔWᵀ = (α/r₊)(A₊B₊ − τ A₋B₋)        A± : d_in × r±,  B± : r± × d_out
//! ```
//!
//! so column `j` of `W0 + ΔW` is row `j` of `W0ᵀ + ΔWᵀ`. All hot paths work on
//! the transposed (`d_in × d_out`) matrices and treat rows as columns.
//!
//! Training forward: `y = x·W*ᵀ + D(x)·ΔWᵀ + b` with
//! `W* = (W0 + ΔW)·diag(m / max(d, ε))`, `m` the frozen column norms of `W0`
//! and `d` the column norms of `W0 + ΔW`. Eval forward drops `D` and merging
//! folds both paths into `Ŵ = W* + ΔW`.

pub mod checkpoint;
mod config;

pub use config::{AdapterConfig, Variant};

use crate::error::{Error, Result};
use crate::linalg::{
    column_norms, derive_seed, dot, gaussian_from, matmul, matmul_nt, matmul_tn, rng_from_seed, row_norms, DetRng,
    Matrix, Vector,
};
use crate::optim::tangent_project;
use rand::Rng;

/// Forward mode. Dropout is only active in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of the columnwise projection.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `W*`, same orientation as the inputs.
    pub w_star: Matrix,
    /// Raw column norms of `W0 + ΔW`.
    pub d: Vector,
    /// `max(d, ε)`.
    pub d_eps: Vector,
    /// `d_j < ε`.
    pub clamp_active: Vec<bool>,
}

/// Row-wise projection on transposed matrices: row `j` of `u_t` is scaled by
/// `m_j / max(‖u_j‖, ε)`.
struct RowProjection {
    w_star_t: Matrix,
    d: Vector,
    d_eps: Vector,
    scale: Vec<f64>,
    clamp_active: Vec<bool>,
}

fn project_rows(u_t: &Matrix, m: &Vector, eps: f64) -> RowProjection {
    let d = row_norms(u_t);
    let d_eps: Vec<f64> = d.as_slice().iter().map(|&v| v.max(eps)).collect();
    let clamp_active = d.as_slice().iter().map(|&v| v < eps).collect();
    let scale: Vec<f64> = m.as_slice().iter().zip(&d_eps).map(|(mj, dj)| mj / dj).collect();
    RowProjection { w_star_t: u_t.scale_rows(&scale), d, d_eps: Vector::new(d_eps), scale, clamp_active }
}

/// `W* = (W0 + ΔW)·diag(m / max(d, ε))` for `W0`, `ΔW` of shape `d_out × d_in`.
pub fn project_directional(w0: &Matrix, delta_w: &Matrix, m: &Vector, eps: f64) -> Result<Projection> {
    if m.len() != w0.cols() {
        return Err(Error::Shape(format!("m has {} entries for {} columns", m.len(), w0.cols())));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("epsilon must be > 0, got {eps}")));
    }
    let u = w0.add(delta_w)?;
    let p = project_rows(&u.transpose(), m, eps);
    Ok(Projection { w_star: p.w_star_t.transpose(), d: p.d, d_eps: p.d_eps, clamp_active: p.clamp_active })
}

/// Subtractive factor pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MinusBranch {
    pub a: Matrix,
    pub b: Matrix,
}

/// Frozen base weight plus the trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    w0: Matrix,
    w0_t: Matrix,
    a_plus: Matrix,
    b_plus: Matrix,
    minus: Option<MinusBranch>,
    tau: f64,
}

impl AdapterParams {
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }
    pub fn a_plus(&self) -> &Matrix {
        &self.a_plus
    }
    pub fn b_plus(&self) -> &Matrix {
        &self.b_plus
    }
    pub fn minus(&self) -> Option<&MinusBranch> {
        self.minus.as_ref()
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MergedWeights {
    w_hat: Matrix,
    w_hat_t: Matrix,
}

/// Intermediates of a forward pass, consumed by [`AdapterLayer::backward`].
///
/// `u_t`, `w_star_t` and `delta_t` are stored transposed (`d_in × d_out`).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub x: Matrix,
    /// Residual-branch input after dropout.
    pub x_dropped: Matrix,
    /// Per-entry input-dropout multiplier (0 or 1/(1−p)); `None` when inactive.
    pub input_mask: Option<Matrix>,
    /// Per-entry multiplier on `ΔWᵀ` in the residual branch; `None` when inactive.
    pub matrix_mask: Option<Matrix>,
    pub delta_t: Matrix,
    pub u_t: Matrix,
    pub w_star_t: Matrix,
    pub d: Vector,
    pub d_eps: Vector,
    /// `m_j / d_j^ε`.
    pub scale: Vec<f64>,
    pub clamp_active: Vec<bool>,
    version: u64,
}

impl ForwardCache {
    pub fn clamp_count(&self) -> usize {
        self.clamp_active.iter().filter(|&&c| c).count()
    }
}

/// Gradients of the loss with respect to the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_a_plus: Matrix,
    pub d_b_plus: Matrix,
    pub d_a_minus: Option<Matrix>,
    pub d_b_minus: Option<Matrix>,
    /// Present iff τ is trainable.
    pub d_tau: Option<f64>,
}

impl GradientBundle {
    /// Flat views in parameter order `A₊, B₊, A₋, B₋, τ`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.d_a_plus.data(), self.d_b_plus.data()];
        if let (Some(a), Some(b)) = (&self.d_a_minus, &self.d_b_minus) {
            out.push(a.data());
            out.push(b.data());
        }
        if let Some(t) = &self.d_tau {
            out.push(std::slice::from_ref(t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.d_a_plus.data_mut(), self.d_b_plus.data_mut()];
        if let (Some(a), Some(b)) = (&mut self.d_a_minus, &mut self.d_b_minus) {
            out.push(a.data_mut());
            out.push(b.data_mut());
        }
        if let Some(t) = &mut self.d_tau {
            out.push(std::slice::from_mut(t));
        }
        out
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }
}

/// `∂L/∂(ΔWᵀ)` split by branch, in `d_in × d_out` orientation.
#[derive(Debug, Clone)]
pub struct DeltaGrad {
    /// Directional-branch contribution; `None` with projection disabled.
    pub directional: Option<Matrix>,
    pub residual: Matrix,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Remove the radial component (relative to `u_j`) of every unclamped row
    /// of `∂L/∂(ΔWᵀ)` before forming factor gradients.
    pub tangent_projection: bool,
}

/// Trainable and frozen scalar counts of one adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

/// Columns of `W0 + ΔW` whose norm is below ε.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClampReport {
    pub count: usize,
    pub columns: Vec<usize>,
}

/// One adapted linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    config: AdapterConfig,
    d_in: usize,
    d_out: usize,
    bias: Vector,
    m: Vector,
    /// Live parameters, or the merge cache while merged. `None` only for a
    /// layer restored from a merged checkpoint.
    params: Option<AdapterParams>,
    merged: Option<MergedWeights>,
    version: u64,
}

impl AdapterLayer {
    /// Wrap a frozen `W0` (`d_out × d_in`) and bias with freshly initialised factors.
    ///
    /// `A₊ ~ N(0, σ²)`, `A₋ ~ N(0, (ratio·σ)²)`, `B± = 0`. Each factor has its
    /// own generator stream derived from `config.seed`, so toggling the minus
    /// branch never changes `A₊`.
    pub fn new(w0: Matrix, bias: Vector, config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let (d_out, d_in) = w0.shape();
        if bias.len() != d_out {
            return Err(Error::Shape(format!("bias len {} != d_out {d_out}", bias.len())));
        }
        let max_rank = d_in.min(d_out);
        if config.rank_plus > max_rank || config.effective_rank_minus() > max_rank {
            return Err(Error::Config(format!(
                "ranks ({}, {}) exceed min(d_in, d_out) = {max_rank}",
                config.rank_plus,
                config.effective_rank_minus()
            )));
        }
        let std_plus = config.init_std_plus.unwrap_or(1.0 / (d_in as f64).sqrt());
        let a_plus = gaussian_from(&mut rng_from_seed(derive_seed(config.seed, 1)), d_in, config.rank_plus, std_plus);
        let b_plus = Matrix::zeros(config.rank_plus, d_out);
        let r_minus = config.effective_rank_minus();
        let minus = (r_minus > 0).then(|| MinusBranch {
            a: gaussian_from(
                &mut rng_from_seed(derive_seed(config.seed, 2)),
                d_in,
                r_minus,
                config.minus_std_ratio * std_plus,
            ),
            b: Matrix::zeros(r_minus, d_out),
        });
        let m = column_norms(&w0);
        let tau = config.tau;
        Ok(Self {
            d_in,
            d_out,
            bias,
            m,
            params: Some(AdapterParams { w0_t: w0.transpose(), w0, a_plus, b_plus, minus, tau }),
            merged: None,
            version: 0,
            config,
        })
    }

    /// Restore a merged layer that has no cached factors (checkpoint loading).
    pub(crate) fn from_merged(w_hat: Matrix, bias: Vector, m: Vector, config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let (d_out, d_in) = w_hat.shape();
        if bias.len() != d_out || m.len() != d_in {
            return Err(Error::Shape("merged weight, bias and m disagree".into()));
        }
        Ok(Self {
            config,
            d_in,
            d_out,
            bias,
            m,
            params: None,
            merged: Some(MergedWeights { w_hat_t: w_hat.transpose(), w_hat }),
            version: 0,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }
    pub fn d_in(&self) -> usize {
        self.d_in
    }
    pub fn d_out(&self) -> usize {
        self.d_out
    }
    pub fn bias(&self) -> &Vector {
        &self.bias
    }
    /// Cached column norms of `W0`.
    pub fn m(&self) -> &Vector {
        &self.m
    }
    pub fn is_merged(&self) -> bool {
        self.merged.is_some()
    }

    /// Parameters (the merge cache when merged).
    pub fn params(&self) -> Result<&AdapterParams> {
        self.params.as_ref().ok_or_else(|| Error::State("layer was loaded merged and has no cached factors".into()))
    }

    /// Merged weight `Ŵ` (`d_out × d_in`), if merged.
    pub fn merged_weight(&self) -> Option<&Matrix> {
        self.merged.as_ref().map(|m| &m.w_hat)
    }

    fn live(&self) -> Result<&AdapterParams> {
        if self.is_merged() {
            return Err(Error::State("layer is merged; use merged_forward or unmerge first".into()));
        }
        self.params()
    }

    fn live_mut(&mut self) -> Result<&mut AdapterParams> {
        if self.is_merged() {
            return Err(Error::State("cannot modify a merged layer".into()));
        }
        self.version += 1;
        self.params.as_mut().ok_or_else(|| Error::State("layer has no parameters".into()))
    }

    /// Replace the trainable factors (shapes must match the current ones).
    pub fn set_factors(&mut self, a_plus: Matrix, b_plus: Matrix, minus: Option<MinusBranch>) -> Result<()> {
        let p = self.live_mut()?;
        if a_plus.shape() != p.a_plus.shape() || b_plus.shape() != p.b_plus.shape() {
            return Err(Error::Shape("plus factors do not match layer shape".into()));
        }
        match (&p.minus, &minus) {
            (Some(old), Some(new)) if old.a.shape() == new.a.shape() && old.b.shape() == new.b.shape() => {}
            (None, None) => {}
            _ => return Err(Error::Shape("minus factors do not match layer shape".into())),
        }
        p.a_plus = a_plus;
        p.b_plus = b_plus;
        p.minus = minus;
        Ok(())
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        self.live_mut()?.tau = tau;
        Ok(())
    }

    /// Mutable flat views of the trainable tensors, in the order of
    /// [`GradientBundle::tensors`], each paired with whether weight decay applies.
    /// Invalidates outstanding forward caches.
    pub fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        let tau_trainable = self.config.tau_trainable;
        let p = self.live_mut()?;
        let mut out: Vec<(&mut [f64], bool)> = vec![(p.a_plus.data_mut(), true), (p.b_plus.data_mut(), true)];
        if let Some(mb) = &mut p.minus {
            out.push((mb.a.data_mut(), true));
            out.push((mb.b.data_mut(), true));
        }
        if tau_trainable {
            out.push((std::slice::from_mut(&mut p.tau), false));
        }
        Ok(out)
    }

    /// `ΔWᵀ = (α/r₊)(A₊B₊ − τA₋B₋)`, shape `d_in × d_out`.
    pub fn delta_w_t(&self) -> Result<Matrix> {
        let p = self.params()?;
        delta_from_params(p, &self.config)
    }

    /// Train- or eval-mode forward of the unmerged layer.
    ///
    /// Dropout masks are drawn from `rng`: input dropout first (one uniform per
    /// entry of `x`), then matrix dropout (one per entry of `ΔWᵀ`); a zero rate
    /// consumes nothing.
    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &mut DetRng) -> Result<(Matrix, ForwardCache)> {
        let p = self.live()?;
        if x.cols() != self.d_in {
            return Err(Error::Shape(format!("input has {} features, layer expects {}", x.cols(), self.d_in)));
        }
        let cfg = &self.config;
        let delta_t = delta_from_params(p, cfg)?;
        let u_t = p.w0_t.add(&delta_t)?;
        let proj = project_rows(&u_t, &self.m, cfg.epsilon);

        let (input_mask, matrix_mask) = match mode {
            Mode::Train => (
                dropout_mask(rng, x.rows(), x.cols(), cfg.input_dropout_p),
                dropout_mask(rng, delta_t.rows(), delta_t.cols(), cfg.matrix_dropout_p),
            ),
            Mode::Eval => (None, None),
        };
        let x_dropped = match &input_mask {
            Some(mask) => x.hadamard(mask)?,
            None => x.clone(),
        };

        let base_t = if cfg.projection_enabled { &proj.w_star_t } else { &p.w0_t };
        let mut y = matmul(x, base_t)?;
        let residual = match &matrix_mask {
            Some(mask) => matmul(&x_dropped, &delta_t.hadamard(mask)?)?,
            None => matmul(&x_dropped, &delta_t)?,
        };
        y.add_assign(&residual)?;
        y.add_row_broadcast(&self.bias)?;

        let cache = ForwardCache {
            mode,
            x: x.clone(),
            x_dropped,
            input_mask,
            matrix_mask,
            delta_t,
            u_t,
            w_star_t: proj.w_star_t,
            d: proj.d,
            d_eps: proj.d_eps,
            scale: proj.scale,
            clamp_active: proj.clamp_active,
            version: self.version,
        };
        Ok((y, cache))
    }

    /// Single-matrix inference path `x·Ŵᵀ + b`: exactly one matrix product.
    pub fn merged_forward(&self, x: &Matrix) -> Result<Matrix> {
        let merged = self.merged.as_ref().ok_or_else(|| Error::State("merged_forward on an unmerged layer".into()))?;
        if x.cols() != self.d_in {
            return Err(Error::Shape(format!("input has {} features, layer expects {}", x.cols(), self.d_in)));
        }
        let mut y = matmul(x, &merged.w_hat_t)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    fn check_cache(&self, cache: &ForwardCache, dldy: &Matrix) -> Result<()> {
        self.live()?;
        if cache.mode != Mode::Train {
            return Err(Error::State("backward needs a train-mode forward cache".into()));
        }
        if cache.version != self.version {
            return Err(Error::State("stale forward cache: parameters changed since forward".into()));
        }
        if dldy.shape() != (cache.x.rows(), self.d_out) {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} vs output {}x{}",
                dldy.rows(),
                dldy.cols(),
                cache.x.rows(),
                self.d_out
            )));
        }
        Ok(())
    }

    /// `∂L/∂(ΔWᵀ)` from each branch.
    ///
    /// Directional branch, per row `j` with `g_j` the row of `xᵀ·∂L/∂y`:
    /// `(m_j/d_j)(g_j − (u_jᵀg_j/d_j²)u_j)` when `d_j ≥ ε`, else `(m_j/ε)g_j`.
    /// Residual branch: `(D(x)ᵀ·∂L/∂y) ⊙ matrix_mask`.
    pub fn delta_grad_parts(&self, cache: &ForwardCache, dldy: &Matrix) -> Result<DeltaGrad> {
        self.check_cache(cache, dldy)?;
        let directional = if self.config.projection_enabled {
            let g = matmul_tn(&cache.x, dldy)?;
            let mut e = Matrix::zeros(self.d_in, self.d_out);
            for j in 0..self.d_in {
                let gj = g.row(j);
                let uj = cache.u_t.row(j);
                let out = e.row_mut(j);
                if cache.clamp_active[j] {
                    let s = cache.scale[j];
                    for (o, gv) in out.iter_mut().zip(gj) {
                        *o = s * gv;
                    }
                } else {
                    let dj = cache.d[j];
                    let s = self.m[j] / dj;
                    let radial = dot(uj, gj) / (dj * dj);
                    for ((o, gv), uv) in out.iter_mut().zip(gj).zip(uj) {
                        *o = s * (gv - radial * uv);
                    }
                }
            }
            Some(e)
        } else {
            None
        };
        let mut residual = matmul_tn(&cache.x_dropped, dldy)?;
        if let Some(mask) = &cache.matrix_mask {
            residual = residual.hadamard(mask)?;
        }
        Ok(DeltaGrad { directional, residual })
    }

    pub fn backward(&self, cache: &ForwardCache, dldy: &Matrix) -> Result<(GradientBundle, Matrix)> {
        self.backward_with(cache, dldy, BackwardOptions::default())
    }

    /// Factor gradients and `∂L/∂x` from a train-mode cache.
    pub fn backward_with(
        &self,
        cache: &ForwardCache,
        dldy: &Matrix,
        opts: BackwardOptions,
    ) -> Result<(GradientBundle, Matrix)> {
        let p = self.live()?;
        let parts = self.delta_grad_parts(cache, dldy)?;
        let cfg = &self.config;

        let mut e = parts.residual;
        if let Some(dir) = &parts.directional {
            e.add_assign(dir)?;
        }
        if opts.tangent_projection {
            for j in 0..self.d_in {
                if cache.clamp_active[j] {
                    continue;
                }
                let u = Vector::new(cache.u_t.row(j).to_vec());
                let g = Vector::new(e.row(j).to_vec());
                let t = tangent_project(&u, &g)?;
                e.row_mut(j).copy_from_slice(t.as_slice());
            }
        }

        let s = cfg.scale();
        let d_a_plus = matmul_nt(&e, &p.b_plus)?.scale(s);
        let d_b_plus = matmul_tn(&p.a_plus, &e)?.scale(s);
        let (d_a_minus, d_b_minus, minus_tau_grad) = match &p.minus {
            Some(mb) if cfg.minus_detached => {
                (Some(Matrix::zeros(mb.a.rows(), mb.a.cols())), Some(Matrix::zeros(mb.b.rows(), mb.b.cols())), 0.0)
            }
            Some(mb) => {
                let st = -s * p.tau;
                let da = matmul_nt(&e, &mb.b)?.scale(st);
                let db = matmul_tn(&mb.a, &e)?.scale(st);
                let dtau = -s * e.inner(&matmul(&mb.a, &mb.b)?)?;
                (Some(da), Some(db), dtau)
            }
            None => (None, None, 0.0),
        };
        let d_tau = cfg.tau_trainable.then_some(minus_tau_grad);

        // dL/dx: directional (or frozen) path plus the dropout-masked residual path.
        let base_t = if cfg.projection_enabled { &cache.w_star_t } else { &p.w0_t };
        let mut dx = matmul_nt(dldy, base_t)?;
        let res_weight = match &cache.matrix_mask {
            Some(mask) => cache.delta_t.hadamard(mask)?,
            None => cache.delta_t.clone(),
        };
        let mut dx_res = matmul_nt(dldy, &res_weight)?;
        if let Some(mask) = &cache.input_mask {
            dx_res = dx_res.hadamard(mask)?;
        }
        dx.add_assign(&dx_res)?;

        Ok((GradientBundle { d_a_plus, d_b_plus, d_a_minus, d_b_minus, d_tau }, dx))
    }

    /// Fold both paths into `Ŵ = W* + ΔW` (or `W0 + ΔW` with projection
    /// disabled), computed in `f64`. The factors stay cached for [`unmerge`](Self::unmerge).
    pub fn merge(&mut self) -> Result<()> {
        let p = self.live()?;
        let delta_t = delta_from_params(p, &self.config)?;
        let w_hat_t = if self.config.projection_enabled {
            let u_t = p.w0_t.add(&delta_t)?;
            project_rows(&u_t, &self.m, self.config.epsilon).w_star_t.add(&delta_t)?
        } else {
            p.w0_t.add(&delta_t)?
        };
        self.merged = Some(MergedWeights { w_hat: w_hat_t.transpose(), w_hat_t });
        self.version += 1;
        Ok(())
    }

    /// Drop the merged weight and return to the cached parameters.
    pub fn unmerge(&mut self) -> Result<()> {
        if self.merged.is_none() {
            return Err(Error::State("unmerge on a layer that is not merged".into()));
        }
        if self.params.is_none() {
            return Err(Error::State("layer was loaded merged and has no cached factors".into()));
        }
        self.merged = None;
        self.version += 1;
        Ok(())
    }

    /// Columns of `W0 + ΔW` at the current parameters with norm below ε.
    pub fn clamp_diagnostics(&self) -> Result<ClampReport> {
        let p = self.params()?;
        let u_t = p.w0_t.add(&delta_from_params(p, &self.config)?)?;
        let columns: Vec<usize> = row_norms(&u_t)
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d < self.config.epsilon)
            .map(|(j, _)| j)
            .collect();
        Ok(ClampReport { count: columns.len(), columns })
    }

    /// `trainable = (r₊ + r₋)(d_in + d_out) [+1 for trainable τ]`,
    /// `frozen = d_out·d_in + d_out`.
    pub fn count_parameters(&self) -> ParamCount {
        let per_rank = self.d_in + self.d_out;
        let ranks = self.config.rank_plus + self.config.effective_rank_minus();
        ParamCount {
            trainable: ranks * per_rank + usize::from(self.config.tau_trainable),
            frozen: self.d_out * self.d_in + self.d_out,
        }
    }
}

fn delta_from_params(p: &AdapterParams, cfg: &AdapterConfig) -> Result<Matrix> {
    let s = cfg.scale();
    let plus = matmul(&p.a_plus, &p.b_plus)?;
    match &p.minus {
        Some(mb) => {
            let minus = matmul(&mb.a, &mb.b)?;
            let tau = p.tau;
            plus.zip_map(&minus, "signed residual", |a, b| s * (a - tau * b))
        }
        None => Ok(plus.scale(s)),
    }
}

/// Inverted Bernoulli mask: entry kept with probability `1 − p` and scaled by `1/(1 − p)`.
fn dropout_mask(rng: &mut DetRng, rows: usize, cols: usize, p: f64) -> Option<Matrix> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() >= p { keep } else { 0.0 }))
}
