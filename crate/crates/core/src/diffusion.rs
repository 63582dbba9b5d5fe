//! Variance-exploding forward process `x_t = x_0 + t * eps`, analytic
//! Gaussian-mixture scores, the preconditioned denoiser network and
//! denoising score matching.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, ForwardCache, LrSchedule, Mlp, Tensor};

pub const T_MIN: f64 = 0.01;
pub const T_MAX: f64 = 156.6155;
pub const SIGMA_DATA: f64 = 0.5;

/// Label a sample is conditioned on; `Null` selects the unconditional model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Label(usize),
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { t_min: T_MIN, t_max: T_MAX }
    }
}

impl DiffusionSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < t_max && t_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < t_min < t_max, got [{t_min}, {t_max}]")));
        }
        Ok(Self { t_min, t_max })
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Schedule {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    /// `x_t = x_0 + t * noise`, with one `t` per row of the `dim`-wide batch.
    pub fn perturb(&self, x0: &[f64], t: &[f64], noise: &[f64], dim: usize) -> Result<Vec<f64>> {
        if x0.len() != t.len() * dim || noise.len() != x0.len() {
            return Err(Error::dim("forward_perturb", &[t.len() * dim], &[x0.len(), noise.len()]));
        }
        for &ti in t {
            self.check(ti)?;
        }
        Ok(x0
            .chunks_exact(dim)
            .zip(noise.chunks_exact(dim))
            .zip(t)
            .flat_map(|((x, n), &ti)| x.iter().zip(n).map(move |(a, b)| a + ti * b))
            .collect())
    }
}

/// Log-normal noise-level distribution, `t = exp(s)`, `s ~ N(p_mean, p_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    pub p_mean: f64,
    pub p_std: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self {
            p_mean: -2.0,
            p_std: 2.0,
            t_min: T_MIN,
            t_max: T_MAX,
        }
    }
}

impl TimeSampler {
    /// Draw clipped to `[t_min, t_max]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.p_mean + self.p_std * z).exp().clamp(self.t_min, self.t_max)
    }

    /// Draw from the log-normal conditioned on the interval (rejection).
    pub fn sample_truncated<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let t = (self.p_mean + self.p_std * z).exp();
            if t >= self.t_min && t <= self.t_max {
                return t;
            }
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// EDM loss weighting `(t^2 + s^2) / (t s)^2` for data scale `s`.
pub fn lambda_edm(t: f64, sigma_data: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("lambda_edm needs t > 0, got {t}")));
    }
    Ok((t * t + sigma_data * sigma_data) / (t * sigma_data).powi(2))
}

/// Score implied by a denoiser output: `(d - x_t) / t^2`.
pub fn score_from_denoiser(d_out: &[f64], x_t: &[f64], t: f64, t_min: f64) -> Result<Vec<f64>> {
    if t < t_min {
        return Err(Error::Domain(format!(
            "score conversion at t = {t} below t_min = {t_min}"
        )));
    }
    if d_out.len() != x_t.len() {
        return Err(Error::dim("score_from_denoiser", &[x_t.len()], &[d_out.len()]));
    }
    let inv = 1.0 / (t * t);
    Ok(d_out.iter().zip(x_t).map(|(d, x)| (d - x) * inv).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Per-condition isotropic Gaussian mixtures. The null condition is the
/// marginal under a uniform condition prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub dim: usize,
    pub conditions: Vec<Vec<MixtureComponent>>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GaussianMixture {
    /// Validates the layout and normalizes weights per condition.
    pub fn new(dim: usize, mut conditions: Vec<Vec<MixtureComponent>>) -> Result<Self> {
        if dim == 0 || conditions.is_empty() {
            return Err(Error::Config("mixture needs dim > 0 and at least one condition".into()));
        }
        for (c, comps) in conditions.iter_mut().enumerate() {
            if comps.is_empty() {
                return Err(Error::Config(format!("condition {c} has no components")));
            }
            let total: f64 = comps.iter().map(|k| k.weight).sum();
            for k in comps.iter_mut() {
                if !(k.weight > 0.0 && k.variance > 0.0) || k.mean.len() != dim {
                    return Err(Error::Config(format!(
                        "condition {c}: components need positive weight/variance and {dim}-dim means"
                    )));
                }
                k.weight /= total;
            }
        }
        Ok(Self { dim, conditions })
    }

    /// Single isotropic Gaussian `N(mean, variance I)` as a one-condition mixture.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(dim, vec![vec![MixtureComponent { weight: 1.0, mean, variance }]])
    }

    /// 2-D benchmark: nine modes on a radius-4 ring, three adjacent modes per
    /// condition, standard deviation 0.5.
    pub fn default_benchmark() -> Self {
        let n_cond = 3;
        let per = 3;
        let total = n_cond * per;
        let conditions = (0..n_cond)
            .map(|c| {
                (0..per)
                    .map(|k| {
                        let angle = 2.0 * std::f64::consts::PI * (c * per + k) as f64 / total as f64;
                        MixtureComponent {
                            weight: 1.0,
                            mean: vec![4.0 * angle.cos(), 4.0 * angle.sin()],
                            variance: 0.25,
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(2, conditions).expect("benchmark mixture is valid")
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    /// `(weight, component)` pairs that make up the density for `cond`.
    fn components(&self, cond: Condition) -> Result<Vec<(f64, &MixtureComponent)>> {
        match cond {
            Condition::Label(c) => {
                let comps = self.conditions.get(c).ok_or_else(|| {
                    Error::Config(format!("condition {c} out of range (have {})", self.n_conditions()))
                })?;
                Ok(comps.iter().map(|k| (k.weight, k)).collect())
            }
            Condition::Null => {
                let pc = 1.0 / self.n_conditions() as f64;
                Ok(self
                    .conditions
                    .iter()
                    .flat_map(|comps| comps.iter().map(move |k| (pc * k.weight, k)))
                    .collect())
            }
        }
    }

    fn component_log_terms(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<(f64, f64, &MixtureComponent)>> {
        if x.len() != self.dim {
            return Err(Error::dim("mixture point", &[self.dim], &[x.len()]));
        }
        let d = self.dim as f64;
        Ok(self
            .components(cond)?
            .into_iter()
            .map(|(w, k)| {
                let var = k.variance + t * t;
                let sq: f64 = x.iter().zip(&k.mean).map(|(a, b)| (a - b).powi(2)).sum();
                let lp = w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var;
                (lp, var, k)
            })
            .collect())
    }

    /// `log q_t(x | cond)` of the mixture diffused to time `t`.
    pub fn log_density(&self, x: &[f64], t: f64, cond: Condition) -> Result<f64> {
        let terms = self.component_log_terms(x, t, cond)?;
        let lps: Vec<f64> = terms.iter().map(|(lp, _, _)| *lp).collect();
        Ok(log_sum_exp(&lps))
    }

    /// `grad_x log q_t(x | cond)` with log-sum-exp stabilized responsibilities.
    pub fn score(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("analytic score needs t >= 0, got {t}")));
        }
        let terms = self.component_log_terms(x, t, cond)?;
        let lps: Vec<f64> = terms.iter().map(|(lp, _, _)| *lp).collect();
        let lse = log_sum_exp(&lps);
        let mut s = vec![0.0; self.dim];
        for (lp, var, k) in &terms {
            let r = (lp - lse).exp();
            for ((si, xi), mi) in s.iter_mut().zip(x).zip(&k.mean) {
                *si -= r * (xi - mi) / var;
            }
        }
        Ok(s)
    }

    /// Posterior mean `E[x_0 | x_t]`, i.e. the ideal denoiser, via Tweedie.
    pub fn denoise(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        let s = self.score(x, t, cond)?;
        Ok(x.iter().zip(&s).map(|(xi, si)| xi + t * t * si).collect())
    }

    pub fn mean(&self, cond: Condition) -> Result<Vec<f64>> {
        let mut m = vec![0.0; self.dim];
        for (w, k) in self.components(cond)? {
            for (mi, ki) in m.iter_mut().zip(&k.mean) {
                *mi += w * ki;
            }
        }
        Ok(m)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        let label = match cond {
            Condition::Label(c) => c,
            Condition::Null => rng.random_range(0..self.n_conditions()),
        };
        let comps = self.components(Condition::Label(label))?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = comps[comps.len() - 1].1;
        for (w, k) in &comps {
            acc += w;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        Ok(chosen
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect())
    }
}

/// A source of clean samples `x_0` for given condition labels.
pub trait CleanSource {
    fn dim(&self) -> usize;
    fn n_conditions(&self) -> usize;
    /// Flat `[conds.len(), dim]` batch.
    fn sample_clean(&self, conds: &[Condition], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

impl CleanSource for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_conditions(&self) -> usize {
        GaussianMixture::n_conditions(self)
    }

    fn sample_clean(&self, conds: &[Condition], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(conds.len() * self.dim);
        for &c in conds {
            out.extend(self.sample_one(c, rng)?);
        }
        Ok(out)
    }
}

/// Something that maps `(x_t, t, c)` batches to clean-sample estimates.
pub trait Denoise {
    fn dim(&self) -> usize;
    fn denoise_batch(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<Vec<f64>>;
}

impl Denoise for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise_batch(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len());
        for ((xi, &ti), &c) in x.chunks_exact(self.dim).zip(t).zip(conds) {
            out.extend(self.denoise(xi, ti, c)?);
        }
        Ok(out)
    }
}

/// Width of the time embedding: `log(t)/4` plus sin/cos at four frequencies.
pub const TIME_EMBED: usize = 9;

fn time_embedding(t: f64, out: &mut Vec<f64>) {
    let u = t.ln() / 4.0;
    out.push(u);
    for k in 0..4 {
        let f = (1u32 << k) as f64;
        out.push((f * u).sin());
        out.push((f * u).cos());
    }
}

/// EDM-preconditioned denoiser
/// `d(x, t, c) = c_skip(t) x + c_out(t) F(c_in(t) x, emb(t), onehot(c))`.
/// The one-hot has an extra slot for the null condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    net: Mlp,
    dim: usize,
    n_conditions: usize,
    sigma_data: f64,
}

#[derive(Clone, Copy, Debug)]
struct Precond {
    c_skip: f64,
    c_out: f64,
    c_in: f64,
}

fn precond(t: f64, sigma_data: f64) -> Precond {
    let s2 = sigma_data * sigma_data;
    let r = (t * t + s2).sqrt();
    Precond {
        c_skip: s2 / (t * t + s2),
        c_out: t * sigma_data / r,
        c_in: 1.0 / r,
    }
}

/// Intermediates needed to back-propagate through [`Denoiser::forward_cached`].
#[derive(Clone, Debug)]
pub struct DenoiseCache {
    net: ForwardCache,
    pre: Vec<Precond>,
    output: Vec<f64>,
}

impl DenoiseCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Denoiser {
    pub fn input_width(dim: usize, n_conditions: usize) -> usize {
        dim + TIME_EMBED + n_conditions + 1
    }

    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        n_conditions: usize,
        hidden: &[usize],
        sigma_data: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![Self::input_width(dim, n_conditions)];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let net = Mlp::init(widths, Activation::Tanh, rng)?;
        Self::from_net(net, dim, n_conditions, sigma_data)
    }

    pub fn from_net(net: Mlp, dim: usize, n_conditions: usize, sigma_data: f64) -> Result<Self> {
        if net.input_width() != Self::input_width(dim, n_conditions) || net.output_width() != dim {
            return Err(Error::Config(format!(
                "network widths {:?} do not fit dim {dim} with {n_conditions} conditions",
                net.widths()
            )));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::Config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Self {
            net,
            dim,
            n_conditions,
            sigma_data,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn same_architecture(&self, other: &Denoiser) -> bool {
        self.dim == other.dim
            && self.n_conditions == other.n_conditions
            && self.sigma_data == other.sigma_data
            && self.net.widths() == other.net.widths()
            && self.net.activation() == other.net.activation()
    }

    fn features(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<(Tensor, Vec<Precond>)> {
        let n = t.len();
        if x.len() != n * self.dim || conds.len() != n {
            return Err(Error::dim("denoiser batch", &[n * self.dim, n], &[x.len(), conds.len()]));
        }
        let width = Self::input_width(self.dim, self.n_conditions);
        let mut feats = Vec::with_capacity(n * width);
        let mut pre = Vec::with_capacity(n);
        for ((xi, &ti), &c) in x.chunks_exact(self.dim).zip(t).zip(conds) {
            if !(ti > 0.0) {
                return Err(Error::Domain(format!("denoiser needs t > 0, got {ti}")));
            }
            let p = precond(ti, self.sigma_data);
            feats.extend(xi.iter().map(|v| p.c_in * v));
            time_embedding(ti, &mut feats);
            let slot = match c {
                Condition::Label(l) if l < self.n_conditions => l,
                Condition::Label(l) => {
                    return Err(Error::Config(format!(
                        "condition {l} out of range (have {})",
                        self.n_conditions
                    )))
                }
                Condition::Null => self.n_conditions,
            };
            for j in 0..=self.n_conditions {
                feats.push(if j == slot { 1.0 } else { 0.0 });
            }
            pre.push(p);
        }
        Ok((Tensor::matrix(n, width, feats)?, pre))
    }

    pub fn forward_cached(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<DenoiseCache> {
        let (feats, pre) = self.features(x, t, conds)?;
        let net = self.net.forward_cached(&feats)?;
        let f = net.output();
        let mut output = Vec::with_capacity(x.len());
        for ((xi, fi), p) in x.chunks_exact(self.dim).zip(f.chunks_exact(self.dim)).zip(&pre) {
            output.extend(xi.iter().zip(fi).map(|(a, b)| p.c_skip * a + p.c_out * b));
        }
        Ok(DenoiseCache { net, pre, output })
    }

    /// Gradients of `<cotangent, d>` with respect to the parameters and to `x`.
    pub fn backward(&self, cache: &DenoiseCache, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if cotangent.len() != cache.output.len() {
            return Err(Error::dim("denoiser cotangent", &[cache.output.len()], &[cotangent.len()]));
        }
        let n = cache.pre.len();
        let mut cot_f = Vec::with_capacity(cotangent.len());
        for (g, p) in cotangent.chunks_exact(self.dim).zip(&cache.pre) {
            cot_f.extend(g.iter().map(|v| p.c_out * v));
        }
        let (grads, feat_grad) = self.net.backward(&cache.net, &Tensor::matrix(n, self.dim, cot_f)?)?;
        let width = self.net.input_width();
        let mut x_grad = Vec::with_capacity(cotangent.len());
        for ((g, fg), p) in cotangent.chunks_exact(self.dim).zip(feat_grad.values().chunks_exact(width)).zip(&cache.pre) {
            x_grad.extend(g.iter().zip(&fg[..self.dim]).map(|(gi, fgi)| p.c_skip * gi + p.c_in * fgi));
        }
        Ok((grads, x_grad))
    }

    pub fn denoise(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, conds)?.output)
    }

    /// Converted score `(d - x) / t^2` for a batch.
    pub fn score(&self, x: &[f64], t: &[f64], conds: &[Condition], t_min: f64) -> Result<Vec<f64>> {
        let d = self.denoise(x, t, conds)?;
        let mut out = Vec::with_capacity(x.len());
        for ((di, xi), &ti) in d.chunks_exact(self.dim).zip(x.chunks_exact(self.dim)).zip(t) {
            out.extend(score_from_denoiser(di, xi, ti, t_min)?);
        }
        Ok(out)
    }
}

impl Denoise for Denoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise_batch(&self, x: &[f64], t: &[f64], conds: &[Condition]) -> Result<Vec<f64>> {
        self.denoise(x, t, conds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub steps: usize,
    pub batch: usize,
    /// Probability of replacing a label with the null condition.
    pub p_uncond: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

/// Mean over the batch of `lambda(t) * ||d(x_t, t, c) - x_0||^2` and the
/// cotangent of that mean with respect to the denoiser output.
fn dsm_loss(d: &[f64], x0: &[f64], t: &[f64], dim: usize, sigma_data: f64) -> Result<(f64, Vec<f64>)> {
    let n = t.len() as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(d.len());
    for ((di, xi), &ti) in d.chunks_exact(dim).zip(x0.chunks_exact(dim)).zip(t) {
        let lam = lambda_edm(ti, sigma_data)?;
        for (a, b) in di.iter().zip(xi) {
            let r = a - b;
            loss += lam * r * r / n;
            cot.push(2.0 * lam * r / n);
        }
    }
    Ok((loss, cot))
}

/// One DSM regression step on a fresh batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn dsm_step<R: Rng>(
    model: &mut Denoiser,
    source: &dyn CleanSource,
    sampler: &TimeSampler,
    adam: &mut AdamState,
    batch: usize,
    p_uncond: f64,
    lr_scale: f64,
    rng: &mut R,
) -> Result<f64> {
    let dim = model.dim;
    let labels: Vec<Condition> = (0..batch)
        .map(|_| Condition::Label(rng.random_range(0..source.n_conditions())))
        .collect();
    let x0 = source.sample_clean(&labels, rng)?;
    let t = sampler.sample_batch(batch, rng);
    let mut xt = x0.clone();
    for (xi, &ti) in xt.chunks_exact_mut(dim).zip(&t) {
        for v in xi {
            let z: f64 = StandardNormal.sample(rng);
            *v += ti * z;
        }
    }
    let conds: Vec<Condition> = labels
        .into_iter()
        .map(|c| if p_uncond > 0.0 && rng.random::<f64>() < p_uncond { Condition::Null } else { c })
        .collect();
    let cache = model.forward_cached(&xt, &t, &conds)?;
    let (loss, cot) = dsm_loss(cache.output(), &x0, &t, dim, model.sigma_data)?;
    let (grads, _) = model.backward(&cache, &cot)?;
    model.net.adam_step_scaled(adam, &grads, lr_scale)?;
    Ok(loss)
}

/// Denoising score matching in the denoiser form. Returns the per-step
/// loss trace.
pub fn dsm_train<R: Rng>(
    model: &mut Denoiser,
    source: &dyn CleanSource,
    sampler: &TimeSampler,
    adam: &mut AdamState,
    cfg: &DsmConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if source.dim() != model.dim || source.n_conditions() != model.n_conditions {
        return Err(Error::Config(format!(
            "data source ({} dims, {} conditions) does not match denoiser ({} dims, {} conditions)",
            source.dim(),
            source.n_conditions(),
            model.dim,
            model.n_conditions
        )));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scale = cfg.lr_schedule.factor(step, cfg.steps);
        let loss = dsm_step(model, source, sampler, adam, cfg.batch, cfg.p_uncond, scale, rng)
            .map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("dsm step {step}: {msg}")),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("dsm loss is {loss} at step {step}")));
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Relative L2 error `sqrt(sum |s_hat - s|^2 / sum |s|^2)` of a denoiser's
/// converted score against the analytic mixture score.
///
/// For every time in `times` and every condition (plus the null condition)
/// the grid is a 5x5 lattice of offsets in `{-2, -1, 0, 1, 2}` diffused
/// standard deviations around each component mean. Only the first two
/// coordinates are offset; higher dimensions stay at the mean.
pub fn score_error_on_grid(model: &Denoiser, mix: &GaussianMixture, times: &[f64]) -> Result<f64> {
    let mut conds: Vec<Condition> = (0..mix.n_conditions()).map(Condition::Label).collect();
    conds.push(Condition::Null);
    let (mut num, mut den) = (0.0, 0.0);
    for &t in times {
        for &c in &conds {
            let comps = mix.components(c)?;
            let mut xs = Vec::new();
            for (_, k) in &comps {
                let spread = (k.variance + t * t).sqrt();
                for i in -2..=2 {
                    for j in -2..=2 {
                        let mut x = k.mean.clone();
                        x[0] += spread * i as f64;
                        if x.len() > 1 {
                            x[1] += spread * j as f64;
                        } else if j != 0 {
                            continue;
                        }
                        xs.extend(x);
                    }
                }
            }
            let n = xs.len() / mix.dim;
            let s_hat = model.score(&xs, &vec![t; n], &vec![c; n], t.min(T_MIN))?;
            for (x, sh) in xs.chunks_exact(mix.dim).zip(s_hat.chunks_exact(mix.dim)) {
                let s = mix.score(x, t, c)?;
                num += s.iter().zip(sh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                den += s.iter().map(|a| a * a).sum::<f64>();
            }
        }
    }
    Ok((num / den).sqrt())
}
