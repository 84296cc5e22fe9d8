//! Domain-routed normalization.
//!
//! A [`NormSite`] owns one parameter set per source domain (individual
//! branches), one shared aggregated branch that mixes batch and instance
//! statistics through a per-channel sigmoid coefficient, and the machinery for
//! the random-affine forward used as a feature-level perturbation.
//!
//! Domain identifiers are 1-based throughout: `d ∈ [1, K]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Grads;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-5;

/// Fraction of the old running estimate kept per update (0.9 keeps 90%, i.e. a 0.1 update rate).
pub const DEFAULT_RUNNING_MOMENTUM: f32 = 0.9;

/// Per-channel mean and biased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Per-(sample, channel) mean and biased variance, indexed `n * C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub channels: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl InstanceStats {
    pub fn mean_at(&self, n: usize, c: usize) -> f32 {
        self.mean[n * self.channels + c]
    }

    pub fn var_at(&self, n: usize, c: usize) -> f32 {
        self.var[n * self.channels + c]
    }
}

fn stats_over(x: &Tensor, samples: &[usize]) -> ChannelStats {
    let c = x.c();
    let count = (samples.len() * x.plane_len()) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for &s in samples {
            sum += x.plane(s, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0f64;
        for &s in samples {
            sq += x
                .plane(s, ch)
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / count) as f32;
    }
    ChannelStats { mean, var }
}

/// Population mean and variance of every channel over all `N·H·W` entries.
pub fn compute_batch_stats(x: &Tensor) -> Result<ChannelStats> {
    if x.n() == 0 || x.plane_len() == 0 || x.c() == 0 {
        return Err(Error::invalid(format!("empty activation batch {:?}", x.shape())));
    }
    let all: Vec<usize> = (0..x.n()).collect();
    Ok(stats_over(x, &all))
}

/// Mean and variance of every (sample, channel) plane over its spatial positions.
pub fn compute_instance_stats(x: &Tensor) -> Result<InstanceStats> {
    if x.plane_len() == 0 {
        return Err(Error::invalid("instance statistics need a nonempty spatial extent"));
    }
    let c = x.c();
    let m = x.plane_len() as f64;
    let mut mean = Vec::with_capacity(x.n() * c);
    let mut var = Vec::with_capacity(x.n() * c);
    for n in 0..x.n() {
        for ch in 0..c {
            let p = x.plane(n, ch);
            let mu = p.iter().map(|&v| v as f64).sum::<f64>() / m;
            let v = p
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>()
                / m;
            mean.push(mu as f32);
            var.push(v as f32);
        }
    }
    Ok(InstanceStats {
        channels: c,
        mean,
        var,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub running_momentum: f32,
}

impl BranchParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            running_momentum: DEFAULT_RUNNING_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blends batch statistics into the running estimates:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, mean: &[f32], var: &[f32], momentum: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("running momentum {momentum} outside [0, 1]")));
        }
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::invalid("running statistics channel mismatch"));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::invalid(format!("negative or NaN variance {v}")));
        }
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
        Ok(())
    }

    fn update_self(&mut self, stats: &ChannelStats) -> Result<()> {
        let m = self.running_momentum;
        self.update_running_stats(&stats.mean, &stats.var, m)
    }

    fn running(&self) -> ChannelStats {
        ChannelStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }
}

/// Free-function form of [`BranchParams::update_running_stats`].
pub fn update_running_stats(
    branch: &BranchParams,
    mean: &[f32],
    var: &[f32],
    momentum: f32,
) -> Result<BranchParams> {
    let mut out = branch.clone();
    out.update_running_stats(mean, var, momentum)?;
    Ok(out)
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-channel mixing weight between batch (weight α) and instance (weight 1 − α) statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficient {
    pub logit: Vec<f32>,
    /// Frozen coefficients receive no gradient (used for batch-only / instance-only ablations).
    pub trainable: bool,
}

impl MixCoefficient {
    pub fn from_alpha(alpha: f32, channels: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha init {alpha} must lie in (0, 1)")));
        }
        Ok(Self {
            logit: vec![(alpha / (1.0 - alpha)).ln(); channels],
            trainable: true,
        })
    }

    pub fn from_logit(logit: f32, channels: usize) -> Self {
        Self {
            logit: vec![logit; channels],
            trainable: true,
        }
    }

    pub fn values(&self) -> Vec<f32> {
        self.logit.iter().map(|&l| sigmoid(l)).collect()
    }
}

/// How an activation is routed through a [`NormSite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    Individual,
    Aggregated,
    Random,
}

impl std::fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForwardMode::Individual => "IF",
            ForwardMode::Aggregated => "AF",
            ForwardMode::Random => "RF",
        })
    }
}

/// Samples grouped by domain, in order of first appearance.
pub(crate) fn group_by_domain(domains: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &d) in domains.iter().enumerate() {
        match groups.iter_mut().find(|(gd, _)| *gd == d) {
            Some((_, v)) => v.push(i),
            None => groups.push((d, vec![i])),
        }
    }
    groups
}

/// Running-statistic updates produced by a training-mode forward; key 0 is the aggregated
/// branch, `d ≥ 1` the individual branch of domain `d`.
#[derive(Clone, Debug, Default)]
pub struct StatsUpdate(Vec<(usize, ChannelStats)>);

/// Output of a non-mutating normalization call.
#[derive(Clone, Debug)]
pub struct Routed {
    pub out: Tensor,
    pub cache: NormCache,
    pub update: StatsUpdate,
}

/// Saved state for the backward pass of one normalization call.
#[derive(Clone, Debug)]
pub struct NormCache {
    x_hat: Tensor,
    kind: CacheKind,
}

#[derive(Clone, Debug)]
enum CacheKind {
    /// Per-group batch normalization; `affine` names the parameter set that scaled the output.
    Grouped {
        groups: Vec<GroupCache>,
        param_grads: bool,
    },
    Aggregated {
        alpha: Vec<f32>,
        batch_mean: Vec<f32>,
        batch_var: Vec<f32>,
        inst: InstanceStats,
        /// `1/sqrt(σ²_agg + ε)` per (n, c).
        inv_std: Vec<f32>,
        mixed_mean: Vec<f32>,
    },
}

#[derive(Clone, Debug)]
struct GroupCache {
    samples: Vec<usize>,
    /// 0-based index into `individual` whose affine was applied.
    affine: usize,
    inv_std: Vec<f32>,
}

/// Plain batch normalization: one parameter set, statistics over the whole batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardNorm {
    pub name: String,
    pub branch: BranchParams,
    pub epsilon: f32,
}

impl StandardNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            branch: BranchParams::new(channels),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.branch.channels()
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }

    /// Training mode normalizes with statistics over `groups` of samples (one group for
    /// ordinary batch norm); the running estimates track whole-batch statistics.
    pub fn forward(
        &mut self,
        x: &Tensor,
        groups: &[Vec<usize>],
        training: bool,
        update_running: bool,
    ) -> Result<(Tensor, NormCache)> {
        let routed = self.route(x, groups, training)?;
        if update_running {
            self.commit(routed.update)?;
        }
        Ok((routed.out, routed.cache))
    }

    pub fn route(&self, x: &Tensor, groups: &[Vec<usize>], training: bool) -> Result<Routed> {
        check_channels(&self.name, self.channels(), x)?;
        let affine = (self.branch.gamma.as_slice(), self.branch.beta.as_slice());
        let mut out = Tensor::zeros(x.shape());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut caches = Vec::new();
        for g in groups {
            let stats = if training { stats_over(x, g) } else { self.branch.running() };
            let inv_std = inv_std(&stats.var, self.epsilon);
            apply_group(x, g, &stats.mean, &inv_std, affine, &mut out, &mut x_hat);
            caches.push(GroupCache {
                samples: g.clone(),
                affine: 0,
                inv_std,
            });
        }
        let update = if training {
            let all: Vec<usize> = (0..x.n()).collect();
            StatsUpdate(vec![(0, stats_over(x, &all))])
        } else {
            StatsUpdate::default()
        };
        Ok(Routed {
            out,
            cache: NormCache {
                x_hat,
                kind: CacheKind::Grouped {
                    groups: caches,
                    param_grads: true,
                },
            },
            update,
        })
    }

    pub fn commit(&mut self, update: StatsUpdate) -> Result<()> {
        for (_, stats) in update.0 {
            self.branch.update_self(&stats)?;
        }
        Ok(())
    }

    pub fn backward(&self, cache: &NormCache, grad_out: &Tensor, grads: &mut Grads) -> Tensor {
        let CacheKind::Grouped { groups, param_grads } = &cache.kind else {
            unreachable!("standard norm produces grouped caches");
        };
        let gamma = [self.branch.gamma.as_slice()];
        let names = [(self.gamma_name(), self.beta_name())];
        grouped_backward(&cache.x_hat, groups, &gamma, &names, *param_grads, grad_out, grads)
    }
}

fn check_channels(name: &str, channels: usize, x: &Tensor) -> Result<()> {
    if x.c() != channels {
        return Err(Error::invalid(format!(
            "{name}: expected {channels} channels, got {}",
            x.c()
        )));
    }
    if x.n() == 0 || x.plane_len() == 0 {
        return Err(Error::invalid(format!("{name}: empty activation batch")));
    }
    Ok(())
}

fn inv_std(var: &[f32], eps: f32) -> Vec<f32> {
    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
}

fn apply_group(
    x: &Tensor,
    samples: &[usize],
    mean: &[f32],
    inv_std: &[f32],
    (gamma, beta): (&[f32], &[f32]),
    out: &mut Tensor,
    x_hat: &mut Tensor,
) {
    for &s in samples {
        for c in 0..x.c() {
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let src = x.plane(s, c);
            let xh = x_hat.plane_mut(s, c);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mu) * is;
            }
            let xh = x_hat.plane(s, c);
            for (o, &h) in out.plane_mut(s, c).iter_mut().zip(xh) {
                *o = g * h + b;
            }
        }
    }
}

fn grouped_backward(
    x_hat: &Tensor,
    groups: &[GroupCache],
    gammas: &[&[f32]],
    names: &[(String, String)],
    param_grads: bool,
    grad_out: &Tensor,
    grads: &mut Grads,
) -> Tensor {
    let c = x_hat.c();
    let mut grad_in = Tensor::zeros(x_hat.shape());
    for g in groups {
        let count = (g.samples.len() * x_hat.plane_len()) as f32;
        let gamma = gammas[g.affine];
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for &s in &g.samples {
                for (&go, &xh) in grad_out.plane(s, ch).iter().zip(x_hat.plane(s, ch)) {
                    sum_g += go as f64;
                    sum_gx += (go * xh) as f64;
                }
            }
            dgamma[ch] = sum_gx as f32;
            dbeta[ch] = sum_g as f32;
            // dx = γ·s/B · (B·g − Σg − x̂·Σ(g·x̂))
            let scale = gamma[ch] * g.inv_std[ch] / count;
            let (sg, sgx) = (sum_g as f32, sum_gx as f32);
            for &s in &g.samples {
                let go = grad_out.plane(s, ch);
                let xh = x_hat.plane(s, ch);
                for ((gi, &gv), &h) in grad_in.plane_mut(s, ch).iter_mut().zip(go).zip(xh) {
                    *gi = scale * (count * gv - sg - h * sgx);
                }
            }
        }
        if param_grads {
            let (gn, bn) = &names[g.affine];
            for (a, d) in grads.slot(gn, c).iter_mut().zip(&dgamma) {
                *a += d;
            }
            for (a, d) in grads.slot(bn, c).iter_mut().zip(&dbeta) {
                *a += d;
            }
        }
    }
    grad_in
}

/// Converted normalization site with `K` individual branches, one aggregated branch and
/// a per-channel mixing coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSite {
    pub name: String,
    pub n_domains: usize,
    pub channels: usize,
    pub individual: Vec<BranchParams>,
    pub aggregated: BranchParams,
    pub mix: MixCoefficient,
    pub epsilon: f32,
}

impl NormSite {
    pub fn new(name: impl Into<String>, channels: usize, n_domains: usize, mix: MixCoefficient) -> Result<Self> {
        Self::from_branch(name, &BranchParams::new(channels), n_domains, mix, DEFAULT_EPSILON)
    }

    /// Builds a site whose `K + 1` branches all start as copies of `template`.
    pub fn from_branch(
        name: impl Into<String>,
        template: &BranchParams,
        n_domains: usize,
        mix: MixCoefficient,
        epsilon: f32,
    ) -> Result<Self> {
        let name = name.into();
        let channels = template.channels();
        if n_domains == 0 || channels == 0 {
            return Err(Error::invalid(format!("{name}: need K ≥ 1 and C ≥ 1")));
        }
        if mix.logit.len() != channels {
            return Err(Error::invalid(format!("{name}: mixing coefficient length mismatch")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("{name}: epsilon must be positive")));
        }
        Ok(Self {
            name,
            n_domains,
            channels,
            individual: vec![template.clone(); n_domains],
            aggregated: template.clone(),
            mix,
            epsilon,
        })
    }

    pub fn gamma_name(&self, d: usize) -> String {
        format!("{}.sib{d}.gamma", self.name)
    }

    pub fn beta_name(&self, d: usize) -> String {
        format!("{}.sib{d}.beta", self.name)
    }

    pub fn agg_gamma_name(&self) -> String {
        format!("{}.sab.gamma", self.name)
    }

    pub fn agg_beta_name(&self) -> String {
        format!("{}.sab.beta", self.name)
    }

    pub fn mix_name(&self) -> String {
        format!("{}.mix.logit", self.name)
    }

    fn check_domains(&self, domains: &[usize], n: usize) -> Result<()> {
        if domains.len() != n {
            return Err(Error::invalid(format!(
                "{}: {} domain ids for a batch of {n}",
                self.name,
                domains.len()
            )));
        }
        if let Some(d) = domains.iter().find(|&&d| d == 0 || d > self.n_domains) {
            return Err(Error::invalid(format!(
                "{}: domain id {d} outside [1, {}]",
                self.name, self.n_domains
            )));
        }
        Ok(())
    }

    /// Individual forward of a single-domain batch.
    pub fn normalize_individual(&mut self, x: &Tensor, d: usize, training: bool) -> Result<Tensor> {
        let domains = vec![d; x.n()];
        Ok(self.forward_individual(x, &domains, training, true)?.0)
    }

    /// Aggregated forward; see [`NormSite::forward_aggregated`].
    pub fn normalize_aggregated(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        Ok(self.forward_aggregated(x, training, true)?.0)
    }

    /// Random-affine forward of a single-domain batch.
    pub fn normalize_random<R: Rng + ?Sized>(&mut self, x: &Tensor, d: usize, p: f32, rng: &mut R) -> Result<Tensor> {
        let domains = vec![d; x.n()];
        Ok(self.forward_random(x, &domains, p, true, true, rng)?.0)
    }

    /// Each domain's samples are normalized with that domain's batch statistics (training)
    /// or running statistics (evaluation) and that domain's affine parameters.
    pub fn forward_individual(
        &mut self,
        x: &Tensor,
        domains: &[usize],
        training: bool,
        update_running: bool,
    ) -> Result<(Tensor, NormCache)> {
        let routed = self.route_individual(x, domains, training)?;
        self.finish(routed, update_running)
    }

    /// Like [`NormSite::forward_individual`], but at every call each domain group independently,
    /// with probability `p`, borrows the affine parameters of a uniformly drawn other branch.
    /// The returned cache never produces affine-parameter gradients.
    pub fn forward_random<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        domains: &[usize],
        p: f32,
        training: bool,
        update_running: bool,
        rng: &mut R,
    ) -> Result<(Tensor, NormCache)> {
        let routed = self.route_random(x, domains, p, training, rng)?;
        self.finish(routed, update_running)
    }

    /// Normalizes every sample with `α·batch + (1 − α)·instance` statistics and the aggregated
    /// affine. In evaluation the batch term comes from the aggregated running estimates.
    pub fn forward_aggregated(
        &mut self,
        x: &Tensor,
        training: bool,
        update_running: bool,
    ) -> Result<(Tensor, NormCache)> {
        let routed = self.route_aggregated(x, training)?;
        self.finish(routed, update_running)
    }

    fn finish(&mut self, routed: Routed, update_running: bool) -> Result<(Tensor, NormCache)> {
        if update_running {
            self.commit(routed.update)?;
        }
        Ok((routed.out, routed.cache))
    }

    /// Non-mutating individual forward; running-statistic updates are returned, not applied.
    pub fn route_individual(&self, x: &Tensor, domains: &[usize], training: bool) -> Result<Routed> {
        self.grouped_forward(x, domains, training, |d| Ok(d), true)
    }

    pub fn route_random<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        domains: &[usize],
        p: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Routed> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("random-forward probability {p} outside [0, 1]")));
        }
        let k = self.n_domains;
        if k == 1 && p > 0.0 {
            log::warn!("{}: random forward with a single branch degrades to individual forward", self.name);
        }
        self.grouped_forward(
            x,
            domains,
            training,
            |d| {
                if k < 2 || p == 0.0 || !rng.gen_bool(p as f64) {
                    return Ok(d);
                }
                // uniform over the K − 1 other branches
                let pick = rng.gen_range(1..k);
                Ok(if pick >= d { pick + 1 } else { pick })
            },
            false,
        )
    }

    pub fn route_aggregated(&self, x: &Tensor, training: bool) -> Result<Routed> {
        check_channels(&self.name, self.channels, x)?;
        let batch = if training {
            compute_batch_stats(x)?
        } else {
            self.aggregated.running()
        };
        let (out, cache) = aggregated_forward(x, &batch, &self.mix, &self.aggregated, self.epsilon)?;
        let update = if training {
            StatsUpdate(vec![(0, batch)])
        } else {
            StatsUpdate::default()
        };
        Ok(Routed { out, cache, update })
    }

    /// Applies updates produced by a `route_*` call on this site.
    pub fn commit(&mut self, update: StatsUpdate) -> Result<()> {
        for (d, stats) in update.0 {
            if d == 0 {
                self.aggregated.update_self(&stats)?;
            } else {
                self.individual[d - 1].update_self(&stats)?;
            }
        }
        Ok(())
    }

    fn grouped_forward(
        &self,
        x: &Tensor,
        domains: &[usize],
        training: bool,
        mut affine_for: impl FnMut(usize) -> Result<usize>,
        param_grads: bool,
    ) -> Result<Routed> {
        check_channels(&self.name, self.channels, x)?;
        self.check_domains(domains, x.n())?;
        let mut out = Tensor::zeros(x.shape());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut caches = Vec::new();
        let mut pending = Vec::new();
        for (d, samples) in group_by_domain(domains) {
            let stats = if training {
                stats_over(x, &samples)
            } else {
                self.individual[d - 1].running()
            };
            let inv = inv_std(&stats.var, self.epsilon);
            let a = affine_for(d)?;
            let branch = &self.individual[a - 1];
            apply_group(
                x,
                &samples,
                &stats.mean,
                &inv,
                (&branch.gamma, &branch.beta),
                &mut out,
                &mut x_hat,
            );
            caches.push(GroupCache {
                samples,
                affine: a - 1,
                inv_std: inv,
            });
            if training {
                pending.push((d, stats));
            }
        }
        Ok(Routed {
            out,
            cache: NormCache {
                x_hat,
                kind: CacheKind::Grouped {
                    groups: caches,
                    param_grads,
                },
            },
            update: StatsUpdate(pending),
        })
    }

    /// Backward for a cache produced by this site. Parameter gradients go to `grads`.
    pub fn backward(&self, cache: &NormCache, grad_out: &Tensor, grads: &mut Grads) -> Tensor {
        match &cache.kind {
            CacheKind::Grouped { groups, param_grads } => {
                let gammas: Vec<&[f32]> = self.individual.iter().map(|b| b.gamma.as_slice()).collect();
                let names: Vec<(String, String)> = (1..=self.n_domains)
                    .map(|d| (self.gamma_name(d), self.beta_name(d)))
                    .collect();
                grouped_backward(&cache.x_hat, groups, &gammas, &names, *param_grads, grad_out, grads)
            }
            CacheKind::Aggregated { .. } => aggregated_backward(
                cache,
                &self.aggregated.gamma,
                &self.mix,
                (&self.agg_gamma_name(), &self.agg_beta_name(), &self.mix_name()),
                grad_out,
                grads,
            ),
        }
    }

    /// Learnable scalars: `K·2C` individual affine + `2C` aggregated affine + `C` logits.
    pub fn learnable_count(&self) -> usize {
        self.n_domains * 2 * self.channels + 2 * self.channels + self.channels
    }

    pub fn strip(&self) -> AggregatedSite {
        AggregatedSite {
            name: self.name.clone(),
            channels: self.channels,
            aggregated: self.aggregated.clone(),
            mix: self.mix.clone(),
            epsilon: self.epsilon,
        }
    }
}

fn aggregated_forward(
    x: &Tensor,
    batch: &ChannelStats,
    mix: &MixCoefficient,
    affine: &BranchParams,
    eps: f32,
) -> Result<(Tensor, NormCache)> {
    let inst = compute_instance_stats(x)?;
    let alpha = mix.values();
    let c = x.c();
    let mut out = Tensor::zeros(x.shape());
    let mut x_hat = Tensor::zeros(x.shape());
    let mut inv = vec![0.0f32; x.n() * c];
    let mut mixed_mean = vec![0.0f32; x.n() * c];
    for n in 0..x.n() {
        for ch in 0..c {
            let a = alpha[ch];
            let mu = a * batch.mean[ch] + (1.0 - a) * inst.mean_at(n, ch);
            let var = a * batch.var[ch] + (1.0 - a) * inst.var_at(n, ch);
            let is = 1.0 / (var + eps).sqrt();
            inv[n * c + ch] = is;
            mixed_mean[n * c + ch] = mu;
            let (g, b) = (affine.gamma[ch], affine.beta[ch]);
            let src = x.plane(n, ch);
            for (h, &v) in x_hat.plane_mut(n, ch).iter_mut().zip(src) {
                *h = (v - mu) * is;
            }
            let xh = x_hat.plane(n, ch);
            for (o, &h) in out.plane_mut(n, ch).iter_mut().zip(xh) {
                *o = g * h + b;
            }
        }
    }
    Ok((
        out,
        NormCache {
            x_hat,
            kind: CacheKind::Aggregated {
                alpha,
                batch_mean: batch.mean.clone(),
                batch_var: batch.var.clone(),
                inst,
                inv_std: inv,
                mixed_mean,
            },
        },
    ))
}

fn aggregated_backward(
    cache: &NormCache,
    gamma: &[f32],
    mix: &MixCoefficient,
    (gamma_name, beta_name, mix_name): (&str, &str, &str),
    grad_out: &Tensor,
    grads: &mut Grads,
) -> Tensor {
    let CacheKind::Aggregated {
        alpha,
        batch_mean,
        batch_var,
        inst,
        inv_std,
        mixed_mean,
    } = &cache.kind
    else {
        unreachable!()
    };
    let x_hat = &cache.x_hat;
    let [n_samples, c, _, _] = x_hat.shape();
    let m = x_hat.plane_len() as f32;
    let b = (n_samples * x_hat.plane_len()) as f32;
    let mut grad_in = Tensor::zeros(x_hat.shape());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dlogit = vec![0.0f32; c];
    let mut d_mixed_mean = vec![0.0f32; n_samples];
    let mut d_mixed_var = vec![0.0f32; n_samples];
    for ch in 0..c {
        let a = alpha[ch];
        let g_c = gamma[ch];
        let (mut d_bmean, mut d_bvar, mut d_alpha) = (0.0f64, 0.0f64, 0.0f64);
        for n in 0..n_samples {
            let idx = n * c + ch;
            let s = inv_std[idx];
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for (&go, &h) in grad_out.plane(n, ch).iter().zip(x_hat.plane(n, ch)) {
                sg += go as f64;
                sgx += (go * h) as f64;
            }
            dgamma[ch] += sgx as f32;
            dbeta[ch] += sg as f32;
            // ĝ = γ·g; Σĝ(x − μ̃) = γ·Σ(g·x̂)/s
            let dmu = -(s as f64) * g_c as f64 * sg;
            let dvar = -0.5 * (s as f64).powi(2) * g_c as f64 * sgx;
            d_mixed_mean[n] = dmu as f32;
            d_mixed_var[n] = dvar as f32;
            d_bmean += a as f64 * dmu;
            d_bvar += a as f64 * dvar;
            d_alpha += dmu * (batch_mean[ch] - inst.mean_at(n, ch)) as f64
                + dvar * (batch_var[ch] - inst.var_at(n, ch)) as f64;
        }
        if mix.trainable {
            dlogit[ch] = (d_alpha * (a * (1.0 - a)) as f64) as f32;
        }
        let (d_bmean, d_bvar) = (d_bmean as f32, d_bvar as f32);
        for n in 0..n_samples {
            let idx = n * c + ch;
            let s = inv_std[idx];
            let mu_t = mixed_mean[idx];
            let to_batch = mu_t - batch_mean[ch];
            let to_inst = mu_t - inst.mean_at(n, ch);
            let d_imean = (1.0 - a) * d_mixed_mean[n];
            let d_ivar = (1.0 - a) * d_mixed_var[n];
            let go = grad_out.plane(n, ch);
            let xh = x_hat.plane(n, ch);
            for ((gi, &gv), &h) in grad_in.plane_mut(n, ch).iter_mut().zip(go).zip(xh) {
                let centered = h / s;
                *gi = g_c * gv * s
                    + d_bmean / b
                    + d_bvar * 2.0 * (centered + to_batch) / b
                    + d_imean / m
                    + d_ivar * 2.0 * (centered + to_inst) / m;
            }
        }
    }
    for (a, d) in grads.slot(gamma_name, c).iter_mut().zip(&dgamma) {
        *a += d;
    }
    for (a, d) in grads.slot(beta_name, c).iter_mut().zip(&dbeta) {
        *a += d;
    }
    if mix.trainable {
        for (a, d) in grads.slot(mix_name, c).iter_mut().zip(&dlogit) {
            *a += d;
        }
    }
    grad_in
}

/// Inference-only remainder of a [`NormSite`] after the individual branches are discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSite {
    pub name: String,
    pub channels: usize,
    pub aggregated: BranchParams,
    pub mix: MixCoefficient,
    pub epsilon: f32,
}

impl AggregatedSite {
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        check_channels(&self.name, self.channels, x)?;
        let batch = if training {
            compute_batch_stats(x)?
        } else {
            self.aggregated.running()
        };
        Ok(aggregated_forward(x, &batch, &self.mix, &self.aggregated, self.epsilon)?.0)
    }

    pub fn route(&self, x: &Tensor, training: bool) -> Result<Routed> {
        check_channels(&self.name, self.channels, x)?;
        let batch = if training {
            compute_batch_stats(x)?
        } else {
            self.aggregated.running()
        };
        let (out, cache) = aggregated_forward(x, &batch, &self.mix, &self.aggregated, self.epsilon)?;
        Ok(Routed {
            out,
            cache,
            update: StatsUpdate::default(),
        })
    }

    pub fn learnable_count(&self) -> usize {
        3 * self.channels
    }
}
