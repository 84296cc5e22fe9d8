//! Mean-teacher training with domain-routed normalization.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{histogram_match, sample_style_reference, strong_augment, weak_augment, StrongAugmentConfig};
use crate::config::{EvalModel, TrainConfig};
use crate::data::{Domain, SplitRegistry};
use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::layers::Grads;
use crate::loss::{ce_dice, masked_cross_entropy, softmax, LossGrad, MaskedMean, PseudoLabelBatch};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::model::{Architecture, NetState, RoutingContext, SegmentationNet, StatsSource};
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// Student and its exponential-moving-average teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub student: SegmentationNet,
    pub teacher: SegmentationNet,
    pub ema_momentum: f32,
}

impl ModelPair {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: SegmentationNet, ema_momentum: f32) -> Self {
        Self {
            teacher: student.clone(),
            student,
            ema_momentum,
        }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_momentum)
    }
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for every parameter; running statistics are copied.
pub fn ema_update(teacher: &mut SegmentationNet, student: &SegmentationNet, momentum: f32) -> Result<()> {
    let mut source: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    student.visit_params(&mut |p| {
        source.insert(p.name, p.values.to_vec());
    });
    let mut failure = None;
    teacher.visit_params_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match source.remove(&p.name) {
            Some(s) if s.len() == p.values.len() => {
                let m = momentum as f64;
                for (t, s) in p.values.iter_mut().zip(&s) {
                    *t = (m * *t as f64 + (1.0 - m) * *s as f64) as f32;
                }
            }
            Some(s) => {
                failure = Some(Error::invalid(format!(
                    "`{}`: teacher has {} values, student {}",
                    p.name,
                    p.values.len(),
                    s.len()
                )))
            }
            None => failure = Some(Error::invalid(format!("student has no parameter `{}`", p.name))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = source.keys().next() {
        return Err(Error::invalid(format!("teacher has no parameter `{name}`")));
    }
    let buffers: BTreeMap<String, Vec<f32>> = student.buffers().into_iter().collect();
    teacher.visit_buffers_mut(&mut |name, dst| {
        if let Some(src) = buffers.get(name) {
            dst.clone_from(src);
        }
    });
    Ok(())
}

/// Teacher pseudo-labels on `u_w` using batch statistics. Converted teachers ensemble
/// their individual and aggregated forwards with weight `t`; plain teachers use their
/// single normalization over the whole batch.
pub fn pseudo_label(
    teacher: &SegmentationNet,
    u_w: &Tensor,
    domains: &[usize],
    t: f32,
    tau: f32,
) -> Result<PseudoLabelBatch> {
    match teacher.state() {
        NetState::Converted { .. } => {
            let p_if = softmax(&teacher.infer(u_w, &mut RoutingContext::individual(domains), StatsSource::Batch)?);
            let p_af = softmax(&teacher.infer(u_w, &mut RoutingContext::aggregated(), StatsSource::Batch)?);
            PseudoLabelBatch::from_probs(&p_if, Some(&p_af), t, tau)
        }
        NetState::Plain => {
            let p = softmax(&teacher.infer(u_w, &mut RoutingContext::aggregated(), StatsSource::Batch)?);
            PseudoLabelBatch::from_probs(&p, None, 1.0, tau)
        }
        NetState::Stripped => Err(Error::invalid("stripped networks cannot produce training pseudo-labels")),
    }
}

/// Runs one training forward, evaluates `loss`, and accumulates `weight`·gradient.
fn stream(
    net: &mut SegmentationNet,
    x: &Tensor,
    ctx: &mut RoutingContext<'_>,
    weight: f32,
    grads: &mut Grads,
    loss: impl FnOnce(&Tensor) -> Result<LossGrad>,
) -> Result<f64> {
    let (logits, tape) = net.forward_train(x, ctx)?;
    let LossGrad { value, mut grad } = loss(&logits)?;
    if weight != 0.0 && value.is_finite() {
        grad.data_mut().iter_mut().for_each(|g| *g *= weight);
        net.backward(&tape, &grad, grads);
    }
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLoss {
    pub l_if: f64,
    pub l_af: Option<f64>,
    pub total: f64,
}

/// `L_IF + λ_AF·L_AF` with CE + soft Dice on each branch. Plain networks have a single
/// branch normalized over the whole batch. Gradients accumulate into `grads`.
pub fn supervised_loss(
    student: &mut SegmentationNet,
    x_w: &Tensor,
    labels: &[u8],
    domains: &[usize],
    lambda_af: f32,
    grads: &mut Grads,
) -> Result<SupervisedLoss> {
    if x_w.n() == 0 {
        log::warn!("empty labeled batch; supervised loss is 0");
        return Ok(SupervisedLoss {
            l_if: 0.0,
            l_af: None,
            total: 0.0,
        });
    }
    if *student.state() == NetState::Plain {
        let l = stream(student, x_w, &mut RoutingContext::aggregated(), 1.0, grads, |z| ce_dice(z, labels))?;
        return Ok(SupervisedLoss {
            l_if: l,
            l_af: None,
            total: l,
        });
    }
    let l_if = stream(student, x_w, &mut RoutingContext::individual(domains), 1.0, grads, |z| ce_dice(z, labels))?;
    let l_af = if lambda_af > 0.0 {
        Some(stream(student, x_w, &mut RoutingContext::aggregated(), lambda_af, grads, |z| ce_dice(z, labels))?)
    } else {
        None
    };
    Ok(SupervisedLoss {
        l_if,
        l_af,
        total: l_if + lambda_af as f64 * l_af.unwrap_or(0.0),
    })
}

/// The three aligned unlabeled views of a batch.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub u_w: Tensor,
    pub u_s: Tensor,
    pub u_h: Tensor,
    pub domains: Vec<usize>,
    pub reference_domains: Vec<usize>,
    pub sample_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnsupervisedWeights {
    pub lambda_h: f32,
    pub lambda_r: f32,
    /// Multiplies every stream gradient (λ_u of the total loss).
    pub scale: f32,
    pub p_rand: f32,
    pub masked_mean: MaskedMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupervisedLoss {
    pub l_s: f64,
    pub l_h: Option<f64>,
    pub l_r: Option<f64>,
    pub total: f64,
}

/// `L_s + λ_h·L_h + λ_r·L_r`: aggregated forward on the strong and style views,
/// random-affine forward on the weak view, all against the same pseudo-labels.
/// Streams with zero weight are skipped.
pub fn unsupervised_loss(
    student: &mut SegmentationNet,
    batch: &TripletBatch,
    pseudo: &PseudoLabelBatch,
    w: &UnsupervisedWeights,
    rng: &mut dyn rand::RngCore,
    grads: &mut Grads,
) -> Result<UnsupervisedLoss> {
    let mce = |z: &Tensor| masked_cross_entropy(z, pseudo, w.masked_mean);
    let l_s = stream(student, &batch.u_s, &mut RoutingContext::aggregated(), w.scale, grads, mce)?;
    let l_h = if w.lambda_h > 0.0 {
        Some(stream(student, &batch.u_h, &mut RoutingContext::aggregated(), w.scale * w.lambda_h, grads, mce)?)
    } else {
        None
    };
    let l_r = if w.lambda_r > 0.0 {
        if *student.state() == NetState::Plain {
            return Err(Error::invalid("random-affine forward needs a converted network"));
        }
        let mut ctx = RoutingContext::random(&batch.domains, w.p_rand, rng);
        Some(stream(student, &batch.u_w, &mut ctx, w.scale * w.lambda_r, grads, mce)?)
    } else {
        None
    };
    let total = l_s + w.lambda_h as f64 * l_h.unwrap_or(0.0) + w.lambda_r as f64 * l_r.unwrap_or(0.0);
    Ok(UnsupervisedLoss { l_s, l_h, l_r, total })
}

/// Loss components of one optimization step. Skipped streams are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    #[serde(rename = "L_x")]
    pub l_x: f64,
    #[serde(rename = "L_if")]
    pub l_if: f64,
    #[serde(rename = "L_af")]
    pub l_af: Option<f64>,
    #[serde(rename = "L_s")]
    pub l_s: Option<f64>,
    #[serde(rename = "L_h")]
    pub l_h: Option<f64>,
    #[serde(rename = "L_r")]
    pub l_r: Option<f64>,
    #[serde(rename = "L_u")]
    pub l_u: f64,
    pub total: f64,
    pub mask_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    #[serde(flatten)]
    pub step: StepReport,
    /// Mean foreground Dice (%) per unseen domain, when evaluated at this step.
    pub unseen_dice: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<u8>,
    pub domains: Vec<usize>,
    pub sample_ids: Vec<String>,
}

fn pick<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize, what: &str, domain: &str) -> Result<Vec<usize>> {
    if amount > len {
        return Err(Error::Dataset(format!(
            "domain `{domain}` has {len} {what} samples, {amount} needed per step"
        )));
    }
    Ok(index::sample(rng, len, amount).into_vec())
}

/// Weakly augmented labeled images, `per_domain` from every source domain.
pub fn draw_labeled<R: Rng + ?Sized>(split: &SplitRegistry, per_domain: usize, rng: &mut R) -> Result<LabeledBatch> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    let mut sample_ids = Vec::new();
    for d in &split.domains {
        for i in pick(rng, d.labeled.len(), per_domain, "labeled", &d.name)? {
            let s = &d.labeled[i];
            let mask = s.mask.as_ref().expect("labeled samples carry masks");
            let (img, m) = weak_augment(&s.image, Some(mask), rng)?;
            images.push(img);
            labels.extend_from_slice(&m.expect("mask was supplied").data);
            domains.push(d.id);
            sample_ids.push(s.sample_id.clone());
        }
    }
    Ok(LabeledBatch {
        x: stack_images(&images)?,
        labels,
        domains,
        sample_ids,
    })
}

/// Weak, strong and histogram-matched views of `per_domain` unlabeled images per domain.
pub fn draw_unlabeled<R: Rng + ?Sized>(
    split: &SplitRegistry,
    per_domain: usize,
    strong: &StrongAugmentConfig,
    style: bool,
    rng: &mut R,
) -> Result<TripletBatch> {
    let mut weak = Vec::new();
    let mut strong_views = Vec::new();
    let mut style_views: Vec<Image> = Vec::new();
    let mut domains = Vec::new();
    let mut reference_domains = Vec::new();
    let mut sample_ids = Vec::new();
    for d in &split.domains {
        for i in pick(rng, d.unlabeled.len(), per_domain, "unlabeled", &d.name)? {
            let s = &d.unlabeled[i];
            let (u_w, _) = weak_augment(&s.image, None, rng)?;
            strong_views.push(strong_augment(&u_w, strong, rng)?);
            if style {
                let (ref_d, reference) = sample_style_reference(d.id, split, rng)?;
                style_views.push(histogram_match(&u_w, reference)?);
                reference_domains.push(ref_d);
            }
            weak.push(u_w);
            domains.push(d.id);
            sample_ids.push(s.sample_id.clone());
        }
    }
    let u_w = stack_images(&weak)?;
    let u_h = if style { stack_images(&style_views)? } else { u_w.clone() };
    Ok(TripletBatch {
        u_s: stack_images(&strong_views)?,
        u_w,
        u_h,
        domains,
        reference_domains,
        sample_ids,
    })
}

/// Training state that survives checkpoints.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pair: ModelPair,
    pub optimizer: AdamW,
    pub iteration: usize,
    data_rng: ChaCha8Rng,
    model_rng: ChaCha8Rng,
}

/// Builds the student network for `cfg` on data with `in_channels` and `n_classes`.
pub fn build_student(cfg: &TrainConfig, in_channels: usize, n_classes: usize, n_domains: usize) -> Result<SegmentationNet> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = Architecture::with_widths(in_channels, n_classes, &cfg.widths);
    let plain = SegmentationNet::new(arch, &mut init_rng)?;
    if !cfg.siab {
        return Ok(plain);
    }
    let mut net = plain.convert(n_domains, cfg.alpha_init)?;
    if let Some(logit) = cfg.sab_stats.frozen_logit() {
        net.freeze_mixing(logit)?;
    }
    Ok(net)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_finite(component: &str, value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
            iteration,
        })
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, split: &SplitRegistry) -> Result<Self> {
        cfg.validate()?;
        let (c, h, w) = split
            .image_shape()
            .ok_or_else(|| Error::Dataset("training registry has no samples".into()))?;
        let student = build_student(&cfg, c, split.n_classes, split.domain_count())?;
        let div = student.architecture().spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be divisible by {div} for {} stages",
                cfg.widths.len()
            )));
        }
        if cfg.siab && cfg.lambda_r > 0.0 && split.domain_count() < 2 {
            log::warn!("single source domain; random affine swapping falls back to the true domain");
        }
        let optimizer = AdamW::new(
            cfg.lr,
            cfg.weight_decay,
            cfg.alpha_lr_multiplier,
            (cfg.adam_beta1, cfg.adam_beta2),
            cfg.adam_eps,
        );
        Ok(Self {
            pair: ModelPair::new(student, cfg.ema_momentum),
            optimizer,
            iteration: 0,
            data_rng: stream_rng(cfg.seed, 1),
            model_rng: stream_rng(cfg.seed, 2),
            cfg,
        })
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self, split: &SplitRegistry) -> Result<StepReport> {
        let cfg = &self.cfg;
        let it = self.iteration + 1;
        let labeled = draw_labeled(split, cfg.labeled_per_domain, &mut self.data_rng)?;
        let use_unlabeled = cfg.lambda_u > 0.0
            && cfg.unlabeled_per_domain > 0
            && split.domains.iter().all(|d| !d.unlabeled.is_empty());
        let triplets = if use_unlabeled {
            Some(draw_unlabeled(
                split,
                cfg.unlabeled_per_domain,
                &cfg.strong_augment(),
                cfg.lambda_h > 0.0,
                &mut self.data_rng,
            )?)
        } else {
            None
        };

        let mut grads = Grads::new();
        let sup = supervised_loss(
            &mut self.pair.student,
            &labeled.x,
            &labeled.labels,
            &labeled.domains,
            cfg.lambda_af,
            &mut grads,
        )?;
        check_finite("L_if", sup.l_if, it)?;
        if let Some(v) = sup.l_af {
            check_finite("L_af", v, it)?;
        }

        let (unsup, mask_rate) = match &triplets {
            Some(tb) => {
                let pseudo = pseudo_label(&self.pair.teacher, &tb.u_w, &tb.domains, cfg.t_ensemble, cfg.tau)?;
                let weights = UnsupervisedWeights {
                    lambda_h: cfg.lambda_h,
                    lambda_r: if cfg.siab { cfg.lambda_r } else { 0.0 },
                    scale: cfg.lambda_u,
                    p_rand: cfg.p_rand,
                    masked_mean: cfg.masked_mean,
                };
                let u = unsupervised_loss(&mut self.pair.student, tb, &pseudo, &weights, &mut self.model_rng, &mut grads)?;
                (Some(u), pseudo.mask_rate())
            }
            None => (None, 0.0),
        };
        if let Some(u) = &unsup {
            check_finite("L_s", u.l_s, it)?;
            if let Some(v) = u.l_h {
                check_finite("L_h", v, it)?;
            }
            if let Some(v) = u.l_r {
                check_finite("L_r", v, it)?;
            }
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                component: format!("gradient of {name}"),
                iteration: it,
            });
        }

        self.optimizer.step(&mut self.pair.student, &grads)?;
        self.pair.ema_update()?;
        self.iteration = it;

        let l_u = unsup.as_ref().map_or(0.0, |u| u.total);
        Ok(StepReport {
            iteration: it,
            l_x: sup.total,
            l_if: sup.l_if,
            l_af: sup.l_af,
            l_s: unsup.as_ref().map(|u| u.l_s),
            l_h: unsup.as_ref().and_then(|u| u.l_h),
            l_r: unsup.as_ref().and_then(|u| u.l_r),
            l_u,
            total: sup.total + cfg.lambda_u as f64 * l_u,
            mask_rate,
        })
    }

    pub fn eval_net(&self) -> &SegmentationNet {
        match self.cfg.eval_model {
            EvalModel::Teacher => &self.pair.teacher,
            EvalModel::Student => &self.pair.student,
        }
    }

    /// Foreground Dice on each test domain via the inference path.
    pub fn evaluate(&self, test: &[&Domain], n_classes: usize) -> Result<EvalReport> {
        let net = inference_net(self.eval_net())?;
        evaluate_domains(&net, test, n_classes, self.cfg.eval_batch)
    }

    /// Runs until `cfg.iterations`, handing every record to `sink` as it is produced.
    pub fn run(
        &mut self,
        split: &SplitRegistry,
        test: &[&Domain],
        mut sink: impl FnMut(&HistoryRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<HistoryRecord>> {
        let mut history = Vec::new();
        while self.iteration < self.cfg.iterations {
            let step = self.step(split)?;
            let due = self.iteration == self.cfg.iterations
                || (self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0);
            let unseen_dice = if due && !test.is_empty() {
                let report = self.evaluate(test, split.n_classes)?;
                Some(report.domains().into_iter().map(|d| {
                    let v = report.mean_dice(Some(&d));
                    (d, v)
                }).collect())
            } else {
                None
            };
            let record = HistoryRecord { step, unseen_dice };
            sink(&record, self)?;
            history.push(record);
        }
        Ok(history)
    }

    /// Checkpoint metadata and extra arrays that, with both networks, restore this trainer.
    pub fn state_metadata(&self) -> BTreeMap<String, serde_json::Value> {
        let mut meta = BTreeMap::new();
        meta.insert("iteration".into(), serde_json::json!(self.iteration));
        meta.insert("data_rng_word_pos".into(), serde_json::json!(self.data_rng.get_word_pos().to_string()));
        meta.insert("model_rng_word_pos".into(), serde_json::json!(self.model_rng.get_word_pos().to_string()));
        meta.insert("config".into(), serde_json::to_value(&self.cfg).expect("config serializes"));
        meta
    }

    /// Restores a trainer from saved networks and metadata; `cfg` may extend `iterations`.
    pub fn restore(
        cfg: TrainConfig,
        split: &SplitRegistry,
        student: SegmentationNet,
        teacher: SegmentationNet,
        meta: &BTreeMap<String, serde_json::Value>,
        optimizer_state: &[(String, Vec<f32>)],
    ) -> Result<Self> {
        let mut trainer = Trainer::new(cfg, split)?;
        if student.param_names() != trainer.pair.student.param_names() {
            return Err(Error::checkpoint("student", "parameters do not match the configuration"));
        }
        let get_u128 = |key: &str| -> Result<u128> {
            meta.get(key)
                .and_then(|v| v.as_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::checkpoint(key, "missing or malformed"))
        };
        trainer.iteration = meta
            .get("iteration")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::checkpoint("iteration", "missing or malformed"))? as usize;
        trainer.data_rng.set_word_pos(get_u128("data_rng_word_pos")?);
        trainer.model_rng.set_word_pos(get_u128("model_rng_word_pos")?);
        trainer.optimizer.load_state_arrays(optimizer_state)?;
        trainer.pair.student = student;
        trainer.pair.teacher = teacher;
        Ok(trainer)
    }
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub pair: ModelPair,
    pub history: Vec<HistoryRecord>,
}

/// Trains from scratch for `cfg.iterations` steps, evaluating on `test` along the way.
pub fn train_loop(split: &SplitRegistry, test: &[&Domain], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), split)?;
    let history = trainer.run(split, test, |_, _| Ok(()))?;
    Ok(TrainOutcome {
        pair: trainer.pair,
        history,
    })
}

/// The network used at test time: converted nets lose their individual branches.
pub fn inference_net(net: &SegmentationNet) -> Result<SegmentationNet> {
    match net.state() {
        NetState::Converted { .. } => net.strip_individual_branches(),
        _ => Ok(net.clone()),
    }
}

/// Hard predictions from the aggregated path with running statistics.
pub fn predict(net: &SegmentationNet, images: &[&Image], batch: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = stack_images(chunk.iter().copied())?;
        let logits = net.infer(&x, &mut RoutingContext::aggregated(), StatsSource::Running)?;
        let [n, k, h, w] = logits.shape();
        let plane = h * w;
        for s in 0..n {
            let z = logits.sample(s);
            let labels = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if z[c * plane + i] > z[best * plane + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(labels);
        }
    }
    Ok(out)
}

pub fn evaluate_domains(net: &SegmentationNet, test: &[&Domain], n_classes: usize, batch: usize) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(n_classes);
    for d in test {
        let images: Vec<&Image> = d.samples.iter().map(|s| &s.image).collect();
        let preds = predict(net, &images, batch)?;
        for (s, p) in d.samples.iter().zip(&preds) {
            let gt = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("test sample `{}` has no mask", s.sample_id)))?;
            acc.add(&d.name, p, &gt.data, gt.width)?;
        }
    }
    Ok(acc.finish())
}
