//! U-shaped segmentation network with swappable normalization sites.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, Grads};
use crate::norm::{
    group_by_domain, AggregatedSite, ForwardMode, MixCoefficient, NormCache, NormSite, Routed,
    StandardNorm, StatsUpdate,
};
use crate::tensor::Tensor;

/// Encoder/decoder layout. `widths[i]` is the channel count at resolution level `i`;
/// the deepest level is the bottleneck.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub n_classes: usize,
    pub widths: Vec<usize>,
}

impl Architecture {
    /// Four-stage U-Net with widths (16, 32, 64, 128).
    pub fn unet(in_channels: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            n_classes,
            widths: vec![16, 32, 64, 128],
        }
    }

    pub fn with_widths(in_channels: usize, n_classes: usize, widths: &[usize]) -> Self {
        Self {
            in_channels,
            n_classes,
            widths: widths.to_vec(),
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.stages().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::invalid("architecture needs ≥ 1 input channel and ≥ 2 classes"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("architecture needs ≥ 1 stage with nonzero widths"));
        }
        Ok(())
    }

    /// Learnable parameters of the unconverted network.
    pub fn plain_param_count(&self) -> Result<usize> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(SegmentationNet::new(self.clone(), &mut rng)?.learnable_param_count())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormLayer {
    Standard(StandardNorm),
    Site(NormSite),
    Stripped(AggregatedSite),
}

impl NormLayer {
    pub fn name(&self) -> &str {
        match self {
            NormLayer::Standard(n) => &n.name,
            NormLayer::Site(s) => &s.name,
            NormLayer::Stripped(s) => &s.name,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            NormLayer::Standard(n) => n.channels(),
            NormLayer::Site(s) => s.channels,
            NormLayer::Stripped(s) => s.channels,
        }
    }

    fn route(&self, x: &Tensor, ctx: &mut RoutingContext<'_>, training: bool) -> Result<Routed> {
        match (self, ctx.mode) {
            (NormLayer::Standard(n), ForwardMode::Aggregated) => {
                n.route(x, &[(0..x.n()).collect()], training)
            }
            (NormLayer::Standard(n), ForwardMode::Individual) => {
                let groups: Vec<Vec<usize>> = group_by_domain(ctx.domains_checked(x.n())?)
                    .into_iter()
                    .map(|(_, g)| g)
                    .collect();
                n.route(x, &groups, training)
            }
            (NormLayer::Site(s), ForwardMode::Individual) => {
                s.route_individual(x, ctx.domains_checked(x.n())?, training)
            }
            (NormLayer::Site(s), ForwardMode::Aggregated) => s.route_aggregated(x, training),
            (NormLayer::Site(s), ForwardMode::Random) => {
                let p = ctx.rand_p;
                let domains = ctx.domains.ok_or_else(|| Error::invalid("random forward needs domain ids"))?;
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::invalid("random forward needs a random source"))?;
                s.route_random(x, domains, p, training, rng)
            }
            (NormLayer::Stripped(s), ForwardMode::Aggregated) => s.route(x, training),
            (layer, mode) => Err(Error::invalid(format!(
                "{}: {mode} forward is not available on this normalization layer",
                layer.name()
            ))),
        }
    }

    fn commit(&mut self, update: StatsUpdate) -> Result<()> {
        match self {
            NormLayer::Standard(n) => n.commit(update),
            NormLayer::Site(s) => s.commit(update),
            NormLayer::Stripped(_) => Ok(()),
        }
    }

    fn backward(&self, cache: &NormCache, grad_out: &Tensor, grads: &mut Grads) -> Tensor {
        match self {
            NormLayer::Standard(n) => n.backward(cache, grad_out, grads),
            NormLayer::Site(s) => s.backward(cache, grad_out, grads),
            NormLayer::Stripped(_) => unreachable!("stripped nets never record a tape"),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_>)) {
        let w = ParamGroup::Weights;
        match self {
            NormLayer::Standard(n) => {
                f(ParamView::new(n.gamma_name(), &n.branch.gamma, w, true));
                f(ParamView::new(n.beta_name(), &n.branch.beta, w, true));
            }
            NormLayer::Site(s) => {
                for (i, b) in s.individual.iter().enumerate() {
                    f(ParamView::new(s.gamma_name(i + 1), &b.gamma, w, true));
                    f(ParamView::new(s.beta_name(i + 1), &b.beta, w, true));
                }
                f(ParamView::new(s.agg_gamma_name(), &s.aggregated.gamma, w, true));
                f(ParamView::new(s.agg_beta_name(), &s.aggregated.beta, w, true));
                f(ParamView::new(s.mix_name(), &s.mix.logit, ParamGroup::Mixing, s.mix.trainable));
            }
            NormLayer::Stripped(s) => {
                f(ParamView::new(format!("{}.sab.gamma", s.name), &s.aggregated.gamma, w, true));
                f(ParamView::new(format!("{}.sab.beta", s.name), &s.aggregated.beta, w, true));
                f(ParamView::new(format!("{}.mix.logit", s.name), &s.mix.logit, ParamGroup::Mixing, s.mix.trainable));
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_>)) {
        let w = ParamGroup::Weights;
        match self {
            NormLayer::Standard(n) => {
                let (gn, bn) = (n.gamma_name(), n.beta_name());
                f(ParamViewMut::new(gn, &mut n.branch.gamma, w, true));
                f(ParamViewMut::new(bn, &mut n.branch.beta, w, true));
            }
            NormLayer::Site(s) => {
                for (i, b) in s.individual.iter_mut().enumerate() {
                    f(ParamViewMut::new(format!("{}.sib{}.gamma", s.name, i + 1), &mut b.gamma, w, true));
                    f(ParamViewMut::new(format!("{}.sib{}.beta", s.name, i + 1), &mut b.beta, w, true));
                }
                f(ParamViewMut::new(format!("{}.sab.gamma", s.name), &mut s.aggregated.gamma, w, true));
                f(ParamViewMut::new(format!("{}.sab.beta", s.name), &mut s.aggregated.beta, w, true));
                let trainable = s.mix.trainable;
                f(ParamViewMut::new(format!("{}.mix.logit", s.name), &mut s.mix.logit, ParamGroup::Mixing, trainable));
            }
            NormLayer::Stripped(s) => {
                f(ParamViewMut::new(format!("{}.sab.gamma", s.name), &mut s.aggregated.gamma, w, true));
                f(ParamViewMut::new(format!("{}.sab.beta", s.name), &mut s.aggregated.beta, w, true));
                let trainable = s.mix.trainable;
                f(ParamViewMut::new(format!("{}.mix.logit", s.name), &mut s.mix.logit, ParamGroup::Mixing, trainable));
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        let mut branch = |prefix: String, b: &mut crate::norm::BranchParams| {
            f(&format!("{prefix}.running_mean"), &mut b.running_mean);
            f(&format!("{prefix}.running_var"), &mut b.running_var);
        };
        match self {
            NormLayer::Standard(n) => branch(n.name.clone(), &mut n.branch),
            NormLayer::Site(s) => {
                for (i, b) in s.individual.iter_mut().enumerate() {
                    branch(format!("{}.sib{}", s.name, i + 1), b);
                }
                branch(format!("{}.sab", s.name), &mut s.aggregated);
            }
            NormLayer::Stripped(s) => branch(format!("{}.sab", s.name), &mut s.aggregated),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Weights,
    /// Sigmoid logits of the statistics-mixing coefficients.
    Mixing,
}

pub struct ParamView<'a> {
    pub name: String,
    pub values: &'a [f32],
    pub group: ParamGroup,
    pub trainable: bool,
}

impl<'a> ParamView<'a> {
    fn new(name: String, values: &'a [f32], group: ParamGroup, trainable: bool) -> Self {
        Self {
            name,
            values,
            group,
            trainable,
        }
    }
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub values: &'a mut Vec<f32>,
    pub group: ParamGroup,
    pub trainable: bool,
}

impl<'a> ParamViewMut<'a> {
    fn new(name: String, values: &'a mut Vec<f32>, group: ParamGroup, trainable: bool) -> Self {
        Self {
            name,
            values,
            group,
            trainable,
        }
    }
}

/// Routing for one forward pass: which branch normalizes, for which per-sample domains.
pub struct RoutingContext<'a> {
    pub mode: ForwardMode,
    /// Per-sample domain ids (1-based); required by individual and random forward.
    pub domains: Option<&'a [usize]>,
    pub rand_p: f32,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> RoutingContext<'a> {
    pub fn individual(domains: &'a [usize]) -> Self {
        Self {
            mode: ForwardMode::Individual,
            domains: Some(domains),
            rand_p: 0.0,
            rng: None,
        }
    }

    pub fn aggregated() -> Self {
        Self {
            mode: ForwardMode::Aggregated,
            domains: None,
            rand_p: 0.0,
            rng: None,
        }
    }

    pub fn random(domains: &'a [usize], p: f32, rng: &'a mut dyn RngCore) -> Self {
        Self {
            mode: ForwardMode::Random,
            domains: Some(domains),
            rand_p: p,
            rng: Some(rng),
        }
    }

    fn domains_checked(&self, n: usize) -> Result<&'a [usize]> {
        let d = self
            .domains
            .ok_or_else(|| Error::invalid(format!("{} forward needs domain ids", self.mode)))?;
        if d.len() != n {
            return Err(Error::invalid(format!("{} domain ids for a batch of {n}", d.len())));
        }
        Ok(d)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self.mode {
            ForwardMode::Aggregated => {
                if self.domains.is_some() {
                    return Err(Error::invalid("aggregated forward takes no domain ids"));
                }
            }
            ForwardMode::Individual => {
                self.domains_checked(n)?;
            }
            ForwardMode::Random => {
                self.domains_checked(n)?;
                if self.rng.is_none() {
                    return Err(Error::invalid("random forward needs a random source"));
                }
                if !(0.0..=1.0).contains(&self.rand_p) {
                    return Err(Error::invalid(format!("random-forward probability {} outside [0, 1]", self.rand_p)));
                }
            }
        }
        if let Some(d) = self.domains {
            if d.contains(&0) {
                return Err(Error::invalid("domain ids are 1-based"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NetState {
    Plain,
    Converted { n_domains: usize },
    Stripped,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    conv1: Conv2d,
    norm1: NormLayer,
    conv2: Conv2d,
    norm2: NormLayer,
}

impl ConvBlock {
    fn new<R: Rng>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, rng),
            norm1: NormLayer::Standard(StandardNorm::new(format!("{name}.norm1"), cout)),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, rng),
            norm2: NormLayer::Standard(StandardNorm::new(format!("{name}.norm2"), cout)),
        }
    }

    fn norms_mut(&mut self) -> [&mut NormLayer; 2] {
        [&mut self.norm1, &mut self.norm2]
    }
}

struct BlockTape {
    input: Tensor,
    cache1: NormCache,
    act1: Tensor,
    cache2: NormCache,
    act2: Tensor,
}

/// Intermediate values of one training-mode forward pass.
pub struct Tape {
    encoder: Vec<BlockTape>,
    pools: Vec<([usize; 4], Vec<u32>)>,
    decoder: Vec<BlockTape>,
    head_input: Tensor,
}

/// Whether normalization uses the current batch or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsSource {
    Batch,
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationNet {
    arch: Architecture,
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
    state: NetState,
}

struct Pass {
    logits: Tensor,
    tape: Option<Tape>,
    updates: Vec<StatsUpdate>,
}

impl SegmentationNet {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let w = &arch.widths;
        let mut encoder = Vec::new();
        let mut cin = arch.in_channels;
        for (i, &width) in w.iter().enumerate() {
            encoder.push(ConvBlock::new(&format!("enc{i}"), cin, width, rng));
            cin = width;
        }
        let decoder = (0..w.len() - 1)
            .map(|i| ConvBlock::new(&format!("dec{i}"), w[i] + w[i + 1], w[i], rng))
            .collect();
        let head = Conv2d::new("head", w[0], arch.n_classes, 1, rng);
        Ok(Self {
            arch,
            encoder,
            decoder,
            head,
            state: NetState::Plain,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn state(&self) -> &NetState {
        &self.state
    }

    pub fn n_domains(&self) -> Option<usize> {
        match self.state {
            NetState::Converted { n_domains } => Some(n_domains),
            _ => None,
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.blocks().flat_map(|b| [&b.norm1, &b.norm2])
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.blocks_mut().flat_map(|b| b.norms_mut())
    }

    pub fn norm_site_count(&self) -> usize {
        self.norm_layers().count()
    }

    /// Replaces every standard normalization layer with a [`NormSite`] of `n_domains`
    /// individual branches plus one aggregated branch, all copied from the original layer.
    pub fn convert(&self, n_domains: usize, alpha_init: f32) -> Result<Self> {
        if self.state != NetState::Plain {
            return Err(Error::invalid("network is already converted"));
        }
        if self.norm_site_count() == 0 {
            return Err(Error::invalid("network has no normalization layers to convert"));
        }
        if n_domains == 0 {
            return Err(Error::invalid("conversion needs at least one domain"));
        }
        let mut out = self.clone();
        for layer in out.norm_layers_mut() {
            let NormLayer::Standard(std) = layer else {
                unreachable!("plain nets hold standard layers only");
            };
            let mix = MixCoefficient::from_alpha(alpha_init, std.channels())?;
            let site = NormSite::from_branch(std.name.clone(), &std.branch, n_domains, mix, std.epsilon)?;
            *layer = NormLayer::Site(site);
        }
        out.state = NetState::Converted { n_domains };
        Ok(out)
    }

    /// Drops the individual branches, keeping only what aggregated forward needs.
    pub fn strip_individual_branches(&self) -> Result<Self> {
        if !matches!(self.state, NetState::Converted { .. }) {
            return Err(Error::invalid("only converted networks can be stripped"));
        }
        let mut out = self.clone();
        for layer in out.norm_layers_mut() {
            let NormLayer::Site(site) = layer else {
                unreachable!("converted nets hold norm sites only");
            };
            *layer = NormLayer::Stripped(site.strip());
        }
        out.state = NetState::Stripped;
        Ok(out)
    }

    /// Fixes every mixing logit to `logit` and stops its training.
    pub fn freeze_mixing(&mut self, logit: f32) -> Result<()> {
        if self.state == NetState::Plain {
            return Err(Error::invalid("plain networks have no mixing coefficients"));
        }
        for layer in self.norm_layers_mut() {
            let mix = match layer {
                NormLayer::Site(s) => &mut s.mix,
                NormLayer::Stripped(s) => &mut s.mix,
                NormLayer::Standard(_) => unreachable!(),
            };
            mix.logit.iter_mut().for_each(|l| *l = logit);
            mix.trainable = false;
        }
        Ok(())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamView<'_>)) {
        for b in self.blocks() {
            f(ParamView::new(b.conv1.weight_name(), &b.conv1.weight, ParamGroup::Weights, true));
            f(ParamView::new(b.conv1.bias_name(), &b.conv1.bias, ParamGroup::Weights, true));
            b.norm1.visit_params(f);
            f(ParamView::new(b.conv2.weight_name(), &b.conv2.weight, ParamGroup::Weights, true));
            f(ParamView::new(b.conv2.bias_name(), &b.conv2.bias, ParamGroup::Weights, true));
            b.norm2.visit_params(f);
        }
        f(ParamView::new(self.head.weight_name(), &self.head.weight, ParamGroup::Weights, true));
        f(ParamView::new(self.head.bias_name(), &self.head.bias, ParamGroup::Weights, true));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_>)) {
        fn conv(c: &mut Conv2d, f: &mut dyn FnMut(ParamViewMut<'_>)) {
            let (wn, bn) = (c.weight_name(), c.bias_name());
            f(ParamViewMut::new(wn, &mut c.weight, ParamGroup::Weights, true));
            f(ParamViewMut::new(bn, &mut c.bias, ParamGroup::Weights, true));
        }
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            conv(&mut b.conv1, f);
            b.norm1.visit_params_mut(f);
            conv(&mut b.conv2, f);
            b.norm2.visit_params_mut(f);
        }
        conv(&mut self.head, f);
    }

    /// Non-learnable running statistics.
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        for layer in self.norm_layers_mut() {
            layer.visit_buffers_mut(f);
        }
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f32>)> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit_buffers_mut(&mut |name, v| out.push((name.to_string(), v.clone())));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name));
        names
    }

    /// Number of learnable scalars (mixing logits included).
    pub fn learnable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.values.len());
        n
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let div = self.arch.spatial_divisor();
        if x.c() != self.arch.in_channels {
            return Err(Error::invalid(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels,
                x.c()
            )));
        }
        if x.n() == 0 || x.h() == 0 || x.w() == 0 || x.h() % div != 0 || x.w() % div != 0 {
            return Err(Error::invalid(format!(
                "input {:?} must be nonempty with spatial size divisible by {div}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn block_forward(
        block: &ConvBlock,
        x: Tensor,
        ctx: &mut RoutingContext<'_>,
        training: bool,
        keep: bool,
        updates: &mut Vec<StatsUpdate>,
    ) -> Result<(Tensor, Option<BlockTape>)> {
        let h = block.conv1.forward(&x)?;
        let r1 = block.norm1.route(&h, ctx, training)?;
        updates.push(r1.update);
        let mut act1 = r1.out;
        layers::relu_in_place(&mut act1);
        let h = block.conv2.forward(&act1)?;
        let r2 = block.norm2.route(&h, ctx, training)?;
        updates.push(r2.update);
        let mut act2 = r2.out;
        layers::relu_in_place(&mut act2);
        let tape = keep.then(|| BlockTape {
            input: x,
            cache1: r1.cache,
            act1,
            cache2: r2.cache,
            act2: act2.clone(),
        });
        Ok((act2, tape))
    }

    fn run(&self, x: &Tensor, ctx: &mut RoutingContext<'_>, training: bool, keep: bool) -> Result<Pass> {
        self.check_input(x)?;
        ctx.validate(x.n())?;
        let stages = self.arch.stages();
        let mut updates = Vec::with_capacity(self.norm_site_count());
        let mut enc_tapes = Vec::new();
        let mut pools = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                let (pooled, arg) = layers::max_pool2(&cur)?;
                if keep {
                    pools.push((cur.shape(), arg));
                }
                cur = pooled;
            }
            let (out, tape) = Self::block_forward(block, cur, ctx, training, keep, &mut updates)?;
            enc_tapes.extend(tape);
            if i + 1 < stages {
                skips.push(out.clone());
            }
            cur = out;
        }
        let mut dec_tapes: Vec<Option<BlockTape>> = (0..stages - 1).map(|_| None).collect();
        let mut dec_updates: Vec<Vec<StatsUpdate>> = (0..stages - 1).map(|_| Vec::new()).collect();
        for i in (0..stages - 1).rev() {
            let up = layers::upsample2(&cur);
            let cat = layers::concat_channels(&skips[i], &up)?;
            let (out, tape) =
                Self::block_forward(&self.decoder[i], cat, ctx, training, keep, &mut dec_updates[i])?;
            dec_tapes[i] = tape;
            cur = out;
        }
        updates.extend(dec_updates.into_iter().flatten());
        let logits = self.head.forward(&cur)?;
        let tape = keep.then(|| Tape {
            encoder: enc_tapes,
            pools,
            decoder: dec_tapes.into_iter().map(|t| t.unwrap()).collect(),
            head_input: cur,
        });
        Ok(Pass { logits, tape, updates })
    }

    fn commit(&mut self, updates: Vec<StatsUpdate>) -> Result<()> {
        for (layer, update) in self.norm_layers_mut().zip(updates) {
            layer.commit(update)?;
        }
        Ok(())
    }

    /// Forward pass returning per-class logits `N×classes×H×W`. Training mode normalizes with
    /// batch statistics and updates the running estimates.
    pub fn forward(&mut self, x: &Tensor, ctx: &mut RoutingContext<'_>, training: bool) -> Result<Tensor> {
        let pass = self.run(x, ctx, training, false)?;
        if training {
            self.commit(pass.updates)?;
        }
        Ok(pass.logits)
    }

    /// Forward pass that never mutates the network.
    pub fn infer(&self, x: &Tensor, ctx: &mut RoutingContext<'_>, stats: StatsSource) -> Result<Tensor> {
        Ok(self.run(x, ctx, stats == StatsSource::Batch, false)?.logits)
    }

    /// Training-mode forward that records a tape for [`SegmentationNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor, ctx: &mut RoutingContext<'_>) -> Result<(Tensor, Tape)> {
        if self.state == NetState::Stripped {
            return Err(Error::invalid("stripped networks are inference-only"));
        }
        let pass = self.run(x, ctx, true, true)?;
        self.commit(pass.updates)?;
        Ok((pass.logits, pass.tape.unwrap()))
    }

    fn block_backward(block: &ConvBlock, tape: &BlockTape, grad: &Tensor, grads: &mut Grads) -> Tensor {
        let g = layers::relu_backward(&tape.act2, grad);
        let g = block.norm2.backward(&tape.cache2, &g, grads);
        let g = block.conv2.backward(&tape.act1, &g, grads);
        let g = layers::relu_backward(&tape.act1, &g);
        let g = block.norm1.backward(&tape.cache1, &g, grads);
        block.conv1.backward(&tape.input, &g, grads)
    }

    /// Accumulates parameter gradients of `Σ grad_logits · logits` into `grads` and returns
    /// the input gradient.
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor, grads: &mut Grads) -> Tensor {
        let stages = self.arch.stages();
        let mut g = self.head.backward(&tape.head_input, grad_logits, grads);
        let mut skip_grads = Vec::with_capacity(stages - 1);
        for i in 0..stages - 1 {
            let g_cat = Self::block_backward(&self.decoder[i], &tape.decoder[i], &g, grads);
            let (g_skip, g_up) = layers::concat_channels_backward(&g_cat, self.arch.widths[i]);
            skip_grads.push(g_skip);
            g = layers::upsample2_backward(&g_up);
        }
        for i in (0..stages).rev() {
            if i + 1 < stages {
                for (a, b) in g.data_mut().iter_mut().zip(skip_grads[i].data()) {
                    *a += b;
                }
            }
            let gi = Self::block_backward(&self.encoder[i], &tape.encoder[i], &g, grads);
            g = if i > 0 {
                let (shape, arg) = &tape.pools[i - 1];
                layers::max_pool2_backward(*shape, arg, &gi)
            } else {
                gi
            };
        }
        g
    }
}
