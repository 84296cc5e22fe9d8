//! Overlap and surface-distance metrics on 2D binary masks, plus evaluation reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::SplitRegistry;
use crate::error::{Error, Result};
use crate::image::stack_images;
use crate::loss::{softmax, PseudoLabelBatch};
use crate::model::{NetState, RoutingContext, SegmentationNet, StatsSource};
use crate::trainer::pseudo_label;

fn check_shapes(pred: usize, gt: usize, width: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::invalid(format!("mask sizes differ: {pred} vs {gt}")));
    }
    if width == 0 || pred % width != 0 {
        return Err(Error::invalid(format!(
            "mask of {pred} pixels is not a multiple of width {width}"
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground pixels with at least one background 4-neighbour. Pixels outside
/// the image count as background.
pub fn boundary(mask: &[bool], width: usize) -> Vec<bool> {
    let height = mask.len() / width;
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest `true` pixel
/// (Meijster, Roerdink and Hesselink). `features` must be non-empty.
fn squared_distance_transform(features: &[bool], width: usize) -> Vec<i64> {
    let height = features.len() / width;
    let inf = (width + height) as i64 + 1;
    // column pass: vertical distance to the nearest feature
    let mut g = vec![0i64; features.len()];
    for x in 0..width {
        g[x] = if features[x] { 0 } else { inf };
        for y in 1..height {
            let i = y * width + x;
            g[i] = if features[i] { 0 } else { g[i - width] + 1 };
        }
        for y in (0..height.saturating_sub(1)).rev() {
            let i = y * width + x;
            if g[i + width] < g[i] {
                g[i] = g[i + width] + 1;
            }
        }
    }
    // row pass: lower envelope of parabolas
    let mut out = vec![0i64; features.len()];
    let mut s = vec![0i64; width];
    let mut t = vec![0i64; width];
    for y in 0..height {
        let row = &g[y * width..(y + 1) * width];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            let gi = row[i as usize];
            let gu = row[u as usize];
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q: i64 = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..width as i64 {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w < width as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w;
                }
            }
        }
        for u in (0..width as i64).rev() {
            out[y * width + u as usize] = f(u, s[q as usize]);
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Average surface distance in pixels: mean over both boundaries of the
/// distance to the nearest point of the other boundary. `None` when either
/// mask is empty.
pub fn asd(pred: &[bool], gt: &[bool], width: usize) -> Result<Option<f64>> {
    check_shapes(pred.len(), gt.len(), width)?;
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return Ok(None);
    }
    let bp = boundary(pred, width);
    let bg = boundary(gt, width);
    let dp = squared_distance_transform(&bp, width);
    let dg = squared_distance_transform(&bg, width);
    let directed = |from: &[bool], dist: &[i64]| {
        from.iter()
            .zip(dist)
            .filter(|(&b, _)| b)
            .fold((0.0f64, 0usize), |(s, n), (_, &d2)| (s + (d2 as f64).sqrt(), n + 1))
    };
    let (sp, np) = directed(&bp, &dg);
    let (sg, ng) = directed(&bg, &dp);
    Ok(Some((sp + sg) / (np + ng) as f64))
}

/// Per-(domain, class) aggregate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub domain: String,
    pub class: u8,
    /// Mean Dice in percent.
    pub dice: f64,
    /// Mean ASD in pixels over samples where it is defined.
    pub asd: Option<f64>,
    pub samples: usize,
    pub asd_undefined: usize,
}

/// Accumulates per-sample scores and produces a flat report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ClassScore>,
}

#[derive(Default)]
struct Acc {
    dice: f64,
    asd: f64,
    defined: usize,
    samples: usize,
}

/// Collects per-sample predictions for one domain at a time.
pub struct EvalAccumulator {
    n_classes: usize,
    domains: Vec<(String, Vec<Acc>)>,
}

impl EvalAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            domains: Vec::new(),
        }
    }

    /// Scores one sample; classes `1..n_classes` are evaluated one-vs-rest.
    pub fn add(&mut self, domain: &str, pred: &[u8], gt: &[u8], width: usize) -> Result<()> {
        check_shapes(pred.len(), gt.len(), width)?;
        let idx = match self.domains.iter().position(|(d, _)| d == domain) {
            Some(i) => i,
            None => {
                let accs = (1..self.n_classes).map(|_| Acc::default()).collect();
                self.domains.push((domain.to_string(), accs));
                self.domains.len() - 1
            }
        };
        for class in 1..self.n_classes {
            let p: Vec<bool> = pred.iter().map(|&v| v as usize == class).collect();
            let g: Vec<bool> = gt.iter().map(|&v| v as usize == class).collect();
            let acc = &mut self.domains[idx].1[class - 1];
            acc.dice += dice(&p, &g)?;
            acc.samples += 1;
            if let Some(d) = asd(&p, &g, width)? {
                acc.asd += d;
                acc.defined += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> EvalReport {
        let mut rows = Vec::new();
        for (domain, accs) in self.domains {
            for (i, acc) in accs.into_iter().enumerate() {
                rows.push(ClassScore {
                    domain: domain.clone(),
                    class: (i + 1) as u8,
                    dice: 100.0 * acc.dice / acc.samples.max(1) as f64,
                    asd: (acc.defined > 0).then(|| acc.asd / acc.defined as f64),
                    samples: acc.samples,
                    asd_undefined: acc.samples - acc.defined,
                });
            }
        }
        EvalReport { rows }
    }
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "domain,class,dice,asd,samples,asd_undefined";

    /// Macro mean Dice (%) over the rows of one domain, or all rows for `None`.
    pub fn mean_dice(&self, domain: Option<&str>) -> f64 {
        let rows: Vec<_> = self
            .rows
            .iter()
            .filter(|r| domain.map_or(true, |d| r.domain == d))
            .collect();
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64
    }

    /// Macro mean ASD over rows with a defined value.
    pub fn mean_asd(&self, domain: Option<&str>) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| domain.map_or(true, |d| r.domain == d))
            .filter_map(|r| r.asd)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.domain) {
                out.push(r.domain.clone());
            }
        }
        out
    }

    /// One row per (domain, class) plus a trailing `mean` row per class
    /// when several domains are present.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let fmt_asd = |a: Option<f64>| a.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{},{},{}",
                r.domain,
                r.class,
                r.dice,
                fmt_asd(r.asd),
                r.samples,
                r.asd_undefined
            );
        }
        if self.domains().len() > 1 {
            let classes: Vec<u8> = {
                let mut c: Vec<u8> = self.rows.iter().map(|r| r.class).collect();
                c.sort_unstable();
                c.dedup();
                c
            };
            for class in classes {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.class == class).collect();
                let dice = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
                let asds: Vec<f64> = rows.iter().filter_map(|r| r.asd).collect();
                let asd = (!asds.is_empty()).then(|| asds.iter().sum::<f64>() / asds.len() as f64);
                let samples: usize = rows.iter().map(|r| r.samples).sum();
                let undefined: usize = rows.iter().map(|r| r.asd_undefined).sum();
                let _ = writeln!(
                    s,
                    "mean,{class},{dice:.4},{},{samples},{undefined}",
                    fmt_asd(asd)
                );
            }
        }
        s
    }
}

/// How pseudo-labels are normalized for [`pseudo_label_quality`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Per-domain statistics, ensembled with the aggregated branch by weight `t`.
    IfEnsemble,
    /// One normalization over the whole mixed batch.
    SingleBn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoQualityRow {
    pub domain: String,
    /// Mean foreground Dice of hard pseudo-labels against the hidden masks, in [0, 1].
    pub dice: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoQuality {
    pub mode: PseudoMode,
    pub rows: Vec<PseudoQualityRow>,
}

impl PseudoQuality {
    /// Unweighted mean over domains.
    pub fn mean(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len() as f64
    }

    pub fn get(&self, domain: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.domain == domain).map(|r| r.dice)
    }
}

/// Scores teacher pseudo-labels on every unlabeled pool. Batches mix `per_domain`
/// samples from each domain, as during training, and use batch statistics.
/// `IfEnsemble` needs a converted network; `SingleBn` uses the aggregated route.
pub fn pseudo_label_quality(
    teacher: &SegmentationNet,
    split: &SplitRegistry,
    mode: PseudoMode,
    t: f32,
    per_domain: usize,
) -> Result<PseudoQuality> {
    if per_domain == 0 {
        return Err(Error::invalid("per-domain batch size must be positive"));
    }
    for d in &split.domains {
        if d.unlabeled.is_empty() {
            return Err(Error::Dataset(format!("domain `{}` has no unlabeled pool", d.name)));
        }
        if d.diagnostic_masks().iter().any(|m| m.is_none()) {
            return Err(Error::Dataset(format!("domain `{}` has no hidden masks", d.name)));
        }
    }
    if mode == PseudoMode::IfEnsemble && !matches!(teacher.state(), NetState::Converted { .. }) {
        return Err(Error::invalid("individual-branch pseudo-labels need a converted network"));
    }
    let mut sums = vec![(0.0f64, 0usize); split.domains.len()];
    let longest = split.domains.iter().map(|d| d.unlabeled.len()).max().unwrap_or(0);
    for start in (0..longest).step_by(per_domain) {
        let mut images = Vec::new();
        let mut owners = Vec::new();
        for (di, d) in split.domains.iter().enumerate() {
            for i in start..(start + per_domain).min(d.unlabeled.len()) {
                images.push(&d.unlabeled[i].image);
                owners.push((di, i));
            }
        }
        let domains: Vec<usize> = owners.iter().map(|&(di, _)| split.domains[di].id).collect();
        let x = stack_images(images.iter().copied())?;
        let labels = match mode {
            PseudoMode::IfEnsemble => pseudo_label(teacher, &x, &domains, t, 1.0)?,
            PseudoMode::SingleBn => {
                let p = softmax(&teacher.infer(&x, &mut RoutingContext::aggregated(), StatsSource::Batch)?);
                PseudoLabelBatch::from_probs(&p, None, 1.0, 1.0)?
            }
        };
        let plane = labels.height * labels.width;
        for (s, &(di, i)) in owners.iter().enumerate() {
            let gt = split.domains[di].diagnostic_masks()[i].as_ref().expect("checked above");
            let pred = &labels.hard_labels[s * plane..(s + 1) * plane];
            let mut total = 0.0;
            for class in 1..split.n_classes {
                let p: Vec<bool> = pred.iter().map(|&v| v as usize == class).collect();
                total += dice(&p, &gt.binary(class as u8))?;
            }
            sums[di].0 += total / (split.n_classes - 1) as f64;
            sums[di].1 += 1;
        }
    }
    let rows = split
        .domains
        .iter()
        .zip(sums)
        .map(|(d, (sum, n))| PseudoQualityRow {
            domain: d.name.clone(),
            dice: sum / n as f64,
            samples: n,
        })
        .collect();
    Ok(PseudoQuality { mode, rows })
}
