//! Multi-domain dataset registry, splits, and the synthetic ellipse generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::StylePool;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub image: Image,
    pub mask: Option<Mask>,
    /// 1-based.
    pub domain_id: usize,
    pub sample_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: usize,
    pub name: String,
    pub samples: Vec<DomainSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRegistry {
    n_classes: usize,
    domains: Vec<Domain>,
}

impl DatasetRegistry {
    /// Domains must carry ids `1..=K` in order; masks must use valid classes.
    pub fn new(n_classes: usize, domains: Vec<Domain>) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {n_classes}")));
        }
        let mut shape = None;
        for (i, d) in domains.iter().enumerate() {
            if d.id != i + 1 {
                return Err(Error::Dataset(format!(
                    "domain `{}` has id {} but sits at position {}",
                    d.name,
                    d.id,
                    i + 1
                )));
            }
            for s in &d.samples {
                if s.domain_id != d.id {
                    return Err(Error::Dataset(format!(
                        "sample `{}` tagged with domain {} inside domain {}",
                        s.sample_id, s.domain_id, d.id
                    )));
                }
                let dims = (s.image.channels, s.image.height, s.image.width);
                match shape {
                    None => shape = Some(dims),
                    Some(prev) if prev != dims => {
                        return Err(Error::Dataset(format!(
                            "sample `{}` has shape {dims:?}, expected {prev:?}",
                            s.sample_id
                        )))
                    }
                    _ => {}
                }
                if let Some(m) = &s.mask {
                    if (m.height, m.width) != (s.image.height, s.image.width) {
                        return Err(Error::Dataset(format!(
                            "mask of `{}` does not match its image",
                            s.sample_id
                        )));
                    }
                    if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= n_classes) {
                        return Err(Error::Dataset(format!(
                            "mask of `{}` contains class {bad} but n_classes = {n_classes}",
                            s.sample_id
                        )));
                    }
                }
            }
        }
        Ok(Self { n_classes, domains })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: usize) -> Result<&Domain> {
        id.checked_sub(1)
            .and_then(|i| self.domains.get(i))
            .ok_or_else(|| Error::Dataset(format!("no domain with id {id}")))
    }

    pub fn domain_by_name(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)` of the samples, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.domains
            .iter()
            .flat_map(|d| d.samples.first())
            .next()
            .map(|s| (s.image.channels, s.image.height, s.image.width))
    }
}

/// Original-to-training domain id mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRemap {
    /// `(original id, training id)` pairs.
    pub entries: Vec<(usize, usize)>,
}

impl DomainRemap {
    pub fn to_training(&self, original: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.0 == original).map(|e| e.1)
    }

    pub fn to_original(&self, training: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.1 == training).map(|e| e.0)
    }
}

#[derive(Clone, Debug)]
pub struct LeaveOneOut {
    pub train: DatasetRegistry,
    /// The held-out domain with its original id.
    pub test: Domain,
    pub remap: DomainRemap,
}

/// Holds out `unseen` and renumbers the remaining domains contiguously.
pub fn leave_one_out(registry: &DatasetRegistry, unseen: usize) -> Result<LeaveOneOut> {
    let k_total = registry.domain_count();
    if k_total < 2 {
        return Err(Error::Dataset(format!(
            "leave-one-domain-out needs at least 2 domains, registry has {k_total}"
        )));
    }
    let test = registry.domain(unseen)?.clone();
    let mut entries = Vec::new();
    let mut train = Vec::new();
    for d in registry.domains.iter().filter(|d| d.id != unseen) {
        let new_id = train.len() + 1;
        entries.push((d.id, new_id));
        let samples = d
            .samples
            .iter()
            .map(|s| DomainSample {
                domain_id: new_id,
                ..s.clone()
            })
            .collect();
        train.push(Domain {
            id: new_id,
            name: d.name.clone(),
            samples,
        });
    }
    if train.len() == 1 {
        log::warn!("single source domain after holding out {unseen}; random affine swapping has no effect");
    }
    Ok(LeaveOneOut {
        train: DatasetRegistry::new(registry.n_classes, train)?,
        test,
        remap: DomainRemap { entries },
    })
}

/// One training domain with its labeled/unlabeled partition. Unlabeled samples
/// carry no mask; the ground truth stays behind [`SplitDomain::diagnostic_masks`].
#[derive(Clone, Debug)]
pub struct SplitDomain {
    pub id: usize,
    pub name: String,
    pub labeled: Vec<DomainSample>,
    pub unlabeled: Vec<DomainSample>,
    hidden: Vec<Option<Mask>>,
}

impl SplitDomain {
    /// Ground truth of the unlabeled pool, aligned with `unlabeled`.
    /// For pseudo-label diagnostics only.
    pub fn diagnostic_masks(&self) -> &[Option<Mask>] {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SplitRegistry {
    pub n_classes: usize,
    pub labeled_fraction: f64,
    pub domains: Vec<SplitDomain>,
}

impl SplitRegistry {
    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: usize) -> &SplitDomain {
        &self.domains[id - 1]
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.domains
            .iter()
            .flat_map(|d| d.labeled.first().or(d.unlabeled.first()))
            .next()
            .map(|s| (s.image.channels, s.image.height, s.image.width))
    }
}

impl StylePool for SplitRegistry {
    fn domain_count(&self) -> usize {
        self.domains.len()
    }

    fn domain_len(&self, domain: usize) -> usize {
        self.domains[domain - 1].len()
    }

    fn domain_image(&self, domain: usize, index: usize) -> &Image {
        let d = &self.domains[domain - 1];
        if index < d.labeled.len() {
            &d.labeled[index].image
        } else {
            &d.unlabeled[index - d.labeled.len()].image
        }
    }
}

/// Per-domain random split keeping `round(fraction * N)` labeled samples.
pub fn split_labeled_unlabeled(
    registry: &DatasetRegistry,
    fraction: f64,
    seed: u64,
) -> Result<SplitRegistry> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Dataset(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domains = Vec::new();
    for d in &registry.domains {
        let n = d.samples.len();
        let n_labeled = (fraction * n as f64).round() as usize;
        if n_labeled == 0 {
            return Err(Error::Dataset(format!(
                "fraction {fraction} leaves domain `{}` ({n} samples) without labels",
                d.name
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (lab, unl) = order.split_at(n_labeled);
        let mut lab = lab.to_vec();
        let mut unl = unl.to_vec();
        lab.sort_unstable();
        unl.sort_unstable();
        let labeled: Vec<DomainSample> = lab.iter().map(|&i| d.samples[i].clone()).collect();
        if let Some(s) = labeled.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Dataset(format!(
                "sample `{}` was drawn as labeled but has no mask",
                s.sample_id
            )));
        }
        let mut unlabeled = Vec::with_capacity(unl.len());
        let mut hidden = Vec::with_capacity(unl.len());
        for &i in &unl {
            let mut s = d.samples[i].clone();
            hidden.push(s.mask.take());
            unlabeled.push(s);
        }
        domains.push(SplitDomain {
            id: d.id,
            name: d.name.clone(),
            labeled,
            unlabeled,
            hidden,
        });
    }
    Ok(SplitRegistry {
        n_classes: registry.n_classes,
        labeled_fraction: fraction,
        domains,
    })
}

/// Appearance of one synthetic imaging site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAppearance {
    pub name: String,
    pub gamma: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub noise: f32,
    pub texture_freq: f32,
}

impl DomainAppearance {
    /// Monotone intensity transform `c·(v^γ − ½) + ½ + b`, clipped.
    pub fn transform(&self, v: f32) -> f32 {
        (self.contrast * (v.max(0.0).powf(self.gamma) - 0.5) + 0.5 + self.brightness).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Semi-axis range as a fraction of the image size.
    pub radius_min: f32,
    pub radius_max: f32,
    pub domains: Vec<DomainAppearance>,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        let site = |name: &str, gamma, brightness, contrast, noise, texture_freq| DomainAppearance {
            name: name.to_string(),
            gamma,
            brightness,
            contrast,
            noise,
            texture_freq,
        };
        Self {
            image_size: 64,
            n_classes: 2,
            min_objects: 1,
            max_objects: 3,
            radius_min: 0.08,
            radius_max: 0.22,
            domains: vec![
                site("site1", 1.0, 0.0, 1.0, 0.04, 3.0),
                site("site2", 0.5, 0.0, 0.8, 0.05, 5.0),
                site("site3", 2.0, 0.05, 1.2, 0.06, 2.0),
                site("site4", 1.4, 0.12, 0.6, 0.05, 4.0),
            ],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f32,
    pub cx: f32,
    pub ry: f32,
    pub rx: f32,
    pub angle: f32,
}

impl Ellipse {
    /// Normalized radius; `<= 1` is inside.
    fn rho(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

/// Object layout of one sample, independent of appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub size: usize,
    pub ellipses: Vec<Ellipse>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Dataset("image size must be positive".into()));
        }
        if !(2..=3).contains(&self.n_classes) {
            return Err(Error::Dataset(format!(
                "synthetic data supports 2 or 3 classes, got {}",
                self.n_classes
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Dataset(format!(
                "object count range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < 1.0) {
            return Err(Error::Dataset(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        for d in &self.domains {
            if !(d.gamma > 0.0 && d.contrast > 0.0 && d.noise >= 0.0) {
                return Err(Error::Dataset(format!(
                    "domain `{}` needs gamma > 0, contrast > 0 and noise >= 0",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn sample_geometry(&self, seed: u64) -> Geometry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.image_size as f32;
        let count = rng.gen_range(self.min_objects..=self.max_objects);
        let ellipses = (0..count)
            .map(|_| {
                let ry = rng.gen_range(self.radius_min..=self.radius_max) * size;
                let rx = rng.gen_range(self.radius_min..=self.radius_max) * size;
                let margin = ry.max(rx) * 0.5;
                Ellipse {
                    cy: rng.gen_range(margin..size - margin),
                    cx: rng.gen_range(margin..size - margin),
                    ry,
                    rx,
                    angle: rng.gen_range(0.0..std::f32::consts::PI),
                }
            })
            .collect();
        Geometry {
            size: self.image_size,
            ellipses,
        }
    }

    /// Class 1 inside any ellipse; with 3 classes the inner half is class 2.
    pub fn render_mask(&self, geometry: &Geometry) -> Mask {
        let n = geometry.size;
        let mut mask = Mask::zeros(n, n);
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let mut class = 0u8;
                for e in &geometry.ellipses {
                    let r = e.rho(py, px);
                    if r <= 1.0 {
                        class = class.max(1);
                        if self.n_classes == 3 && r <= 0.25 {
                            class = 2;
                        }
                    }
                }
                mask.data[y * n + x] = class;
            }
        }
        mask
    }

    /// Renders the base scene for `mask`, then applies the site appearance.
    pub fn render_image(&self, mask: &Mask, appearance: &DomainAppearance, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mask.width;
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let (st, ct) = theta.sin_cos();
        let noise = Normal::new(0.0f32, appearance.noise.max(0.0)).expect("finite sigma");
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let base = match mask.data[y * n + x] {
                    0 => 0.35,
                    1 => 0.6,
                    _ => 0.85,
                };
                let wave = std::f32::consts::TAU * appearance.texture_freq * (x as f32 * ct + y as f32 * st)
                    / n as f32
                    + phase;
                let v = (base + 0.06 * wave.sin()).clamp(0.0, 1.0);
                let v = appearance.transform(v) + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        Image {
            channels: 1,
            height: n,
            width: n,
            data,
        }
    }
}

/// `k_domains × n_per_domain` labeled samples with shared geometry statistics.
pub fn make_synthetic_registry(
    spec: &SyntheticDomainSpec,
    k_domains: usize,
    n_per_domain: usize,
) -> Result<DatasetRegistry> {
    spec.validate()?;
    if k_domains < 2 {
        return Err(Error::Dataset(format!(
            "synthetic registry needs at least 2 domains, got {k_domains}"
        )));
    }
    if k_domains > spec.domains.len() {
        return Err(Error::Dataset(format!(
            "{k_domains} domains requested but the spec defines {}",
            spec.domains.len()
        )));
    }
    let mut domains = Vec::with_capacity(k_domains);
    for (di, appearance) in spec.domains.iter().take(k_domains).enumerate() {
        let samples = (0..n_per_domain)
            .map(|i| {
                let geometry = spec.sample_geometry(mix_seed(&[spec.seed, di as u64, i as u64, 0]));
                let mask = spec.render_mask(&geometry);
                let image = spec.render_image(&mask, appearance, mix_seed(&[spec.seed, di as u64, i as u64, 1]));
                DomainSample {
                    image,
                    mask: Some(mask),
                    domain_id: di + 1,
                    sample_id: format!("{}_{i:04}", appearance.name),
                }
            })
            .collect();
        domains.push(Domain {
            id: di + 1,
            name: appearance.name.clone(),
            samples,
        });
    }
    DatasetRegistry::new(spec.n_classes, domains)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_classes: usize,
    /// Domain directory names, in id order.
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDomainSpec>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<root>/<domain>/{images,masks}/<sample_id>.png` plus the manifest.
pub fn write_registry(
    registry: &DatasetRegistry,
    root: &Path,
    synthetic: Option<&SyntheticDomainSpec>,
) -> Result<()> {
    let manifest = DatasetManifest {
        n_classes: registry.n_classes,
        domains: registry.domains.iter().map(|d| d.name.clone()).collect(),
        synthetic: synthetic.cloned(),
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    for d in &registry.domains {
        let images = root.join(&d.name).join("images");
        let masks = root.join(&d.name).join("masks");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for s in &d.samples {
            let img = &s.image;
            let path = images.join(format!("{}.png", s.sample_id));
            let (w, h) = (img.width as u32, img.height as u32);
            let result = match img.channels {
                1 => ::image::GrayImage::from_raw(w, h, img.data.iter().map(|&v| to_u8(v)).collect())
                    .expect("buffer size")
                    .save(&path),
                3 => {
                    let plane = img.plane_len();
                    let raw = (0..plane)
                        .flat_map(|i| (0..3).map(move |c| (c, i)))
                        .map(|(c, i)| to_u8(img.data[c * plane + i]))
                        .collect();
                    ::image::RgbImage::from_raw(w, h, raw).expect("buffer size").save(&path)
                }
                c => {
                    return Err(Error::Dataset(format!(
                        "cannot store {c}-channel image `{}` as PNG",
                        s.sample_id
                    )))
                }
            };
            result.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            if let Some(m) = &s.mask {
                let path = masks.join(format!("{}.png", s.sample_id));
                ::image::GrayImage::from_raw(m.width as u32, m.height as u32, m.data.clone())
                    .expect("buffer size")
                    .save(&path)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            }
        }
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))
}

/// Loads a dataset laid out as written by [`write_registry`]. Images may be
/// grayscale or RGB; a sample without a mask file is loaded unlabeled.
pub fn load_registry(root: &Path) -> Result<DatasetRegistry> {
    let manifest = read_manifest(root)?;
    let mut domains = Vec::new();
    for (i, name) in manifest.domains.iter().enumerate() {
        let images = root.join(name).join("images");
        let mut entries: Vec<_> = fs::read_dir(&images)
            .map_err(|e| Error::io(&images, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut samples = Vec::with_capacity(entries.len());
        for path in entries {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let dyn_img = ::image::open(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
            let image = if dyn_img.color().channel_count() >= 3 {
                let rgb = dyn_img.to_rgb8();
                let mut data = vec![0.0; 3 * w * h];
                for (p, px) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * w * h + p] = px[c] as f32 / 255.0;
                    }
                }
                Image::new(3, h, w, data)?
            } else {
                let gray = dyn_img.to_luma8();
                Image::new(1, h, w, gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect())?
            };
            let mask_path = root.join(name).join("masks").join(format!("{stem}.png"));
            let mask = if mask_path.exists() {
                let m = ::image::open(&mask_path)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?
                    .to_luma8();
                Some(Mask::new(m.height() as usize, m.width() as usize, m.into_raw())?)
            } else {
                None
            };
            samples.push(DomainSample {
                image,
                mask,
                domain_id: i + 1,
                sample_id: stem.to_string(),
            });
        }
        domains.push(Domain {
            id: i + 1,
            name: name.clone(),
            samples,
        });
    }
    DatasetRegistry::new(manifest.n_classes, domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            image_size: 24,
            ..SyntheticDomainSpec::default()
        }
    }

    fn ks(a: &[f32], b: &[f32]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        best
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = small_spec();
        let a = make_synthetic_registry(&spec, 3, 5).unwrap();
        let b = make_synthetic_registry(&spec, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
    }

    #[test]
    fn generator_rejects_degenerate_specs() {
        let spec = SyntheticDomainSpec {
            image_size: 0,
            ..small_spec()
        };
        assert!(make_synthetic_registry(&spec, 2, 3).is_err());
        assert!(make_synthetic_registry(&small_spec(), 1, 3).is_err());
        assert!(make_synthetic_registry(&small_spec(), 9, 3).is_err());
    }

    #[test]
    fn mask_is_invariant_to_appearance() {
        let spec = small_spec();
        let g = spec.sample_geometry(42);
        let m = spec.render_mask(&g);
        let a = spec.render_image(&m, &spec.domains[0], 1);
        let b = spec.render_image(&m, &spec.domains[2], 1);
        assert_ne!(a, b);
        assert_eq!(spec.render_mask(&spec.sample_geometry(42)), m);
        assert!(m.count(1) > 0);
    }

    #[test]
    fn identical_transforms_give_matching_histograms() {
        let mut spec = SyntheticDomainSpec::default();
        spec.domains[1] = DomainAppearance {
            name: "twin".into(),
            ..spec.domains[0].clone()
        };
        let reg = make_synthetic_registry(&spec, 2, 100).unwrap();
        let pixels = |d: usize| -> Vec<f32> {
            reg.domains()[d].samples.iter().flat_map(|s| s.image.data.clone()).collect()
        };
        assert!(ks(&pixels(0), &pixels(1)) < 0.05);
    }

    #[test]
    fn gamma_changes_foreground_intensity() {
        let mut spec = SyntheticDomainSpec::default();
        spec.domains[0].gamma = 0.5;
        spec.domains[1].gamma = 2.0;
        for d in &mut spec.domains[..2] {
            d.brightness = 0.0;
            d.contrast = 1.0;
        }
        let reg = make_synthetic_registry(&spec, 2, 20).unwrap();
        let fg_mean = |d: usize| {
            let (mut s, mut n) = (0.0f64, 0usize);
            for smp in &reg.domains()[d].samples {
                let m = smp.mask.as_ref().unwrap();
                for (v, &c) in smp.image.data.iter().zip(&m.data) {
                    if c == 1 {
                        s += *v as f64;
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        assert!(fg_mean(0) - fg_mean(1) > 0.15);
    }

    #[test]
    fn appearance_transform_is_monotone() {
        for d in &SyntheticDomainSpec::default().domains {
            let mut prev = d.transform(0.0);
            for i in 1..=100 {
                let v = d.transform(i as f32 / 100.0);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn three_class_masks() {
        let spec = SyntheticDomainSpec {
            n_classes: 3,
            ..small_spec()
        };
        let reg = make_synthetic_registry(&spec, 2, 4).unwrap();
        let has_core = reg.domains()[0].samples.iter().any(|s| s.mask.as_ref().unwrap().count(2) > 0);
        assert!(has_core);
    }

    #[test]
    fn split_counts_and_determinism() {
        let reg = make_synthetic_registry(&small_spec(), 2, 10).unwrap();
        let s = split_labeled_unlabeled(&reg, 0.3, 1).unwrap();
        for d in &s.domains {
            assert_eq!(d.labeled.len(), 3);
            assert_eq!(d.unlabeled.len(), 7);
            assert!(d.unlabeled.iter().all(|u| u.mask.is_none()));
            assert!(d.diagnostic_masks().iter().all(Option::is_some));
            let mut ids: Vec<&str> = d
                .labeled
                .iter()
                .chain(&d.unlabeled)
                .map(|s| s.sample_id.as_str())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 10);
        }
        let again = split_labeled_unlabeled(&reg, 0.3, 1).unwrap();
        let ids = |s: &SplitRegistry| -> Vec<String> {
            s.domains.iter().flat_map(|d| d.labeled.iter().map(|x| x.sample_id.clone())).collect()
        };
        assert_eq!(ids(&s), ids(&again));
        let all = split_labeled_unlabeled(&reg, 1.0, 1).unwrap();
        assert!(all.domains.iter().all(|d| d.unlabeled.is_empty()));
        assert!(split_labeled_unlabeled(&reg, 0.01, 1).is_err());
        assert!(split_labeled_unlabeled(&reg, 0.0, 1).is_err());
    }

    #[test]
    fn leave_one_out_remaps_ids() {
        let reg = make_synthetic_registry(&small_spec(), 4, 3).unwrap();
        let loo = leave_one_out(&reg, 3).unwrap();
        assert_eq!(loo.remap.entries, vec![(1, 1), (2, 2), (4, 3)]);
        assert_eq!(loo.train.domain_count(), 3);
        assert_eq!(loo.test.id, 3);
        let held: Vec<&str> = loo.test.samples.iter().map(|s| s.sample_id.as_str()).collect();
        for d in loo.train.domains() {
            for s in &d.samples {
                assert!(!held.contains(&s.sample_id.as_str()));
                assert_eq!(s.domain_id, d.id);
            }
        }
        assert!(leave_one_out(&reg, 0).is_err());
        assert!(leave_one_out(&reg, 5).is_err());
        let two = make_synthetic_registry(&small_spec(), 2, 3).unwrap();
        assert_eq!(leave_one_out(&two, 1).unwrap().train.domain_count(), 1);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let reg = make_synthetic_registry(&spec, 2, 3).unwrap();
        write_registry(&reg, dir.path(), Some(&spec)).unwrap();
        let back = load_registry(dir.path()).unwrap();
        assert_eq!(back.domain_count(), 2);
        assert_eq!(back.n_classes(), 2);
        for (a, b) in reg.domains().iter().zip(back.domains()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x.sample_id, y.sample_id);
                assert_eq!(x.mask, y.mask);
                assert!(x.image.data.iter().zip(&y.image.data).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
            }
        }
        assert_eq!(read_manifest(dir.path()).unwrap().synthetic, Some(spec));
    }

    #[test]
    fn registry_validation() {
        let reg = make_synthetic_registry(&small_spec(), 2, 2).unwrap();
        let mut domains = reg.domains().to_vec();
        domains[0].samples[0].mask.as_mut().unwrap().data[0] = 5;
        assert!(DatasetRegistry::new(2, domains).is_err());
        let mut domains = reg.domains().to_vec();
        domains[1].id = 7;
        assert!(DatasetRegistry::new(2, domains).is_err());
    }
}
