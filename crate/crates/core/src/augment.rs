//! Weak (geometric), strong (photometric) and histogram-matching augmentations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// One geometric draw: `rot` quarter turns counter-clockwise, then flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeakDraw {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl WeakDraw {
    pub const IDENTITY: WeakDraw = WeakDraw {
        quarter_turns: 0,
        flip_horizontal: false,
        flip_vertical: false,
    };

    /// Non-square inputs only get half turns so the shape is kept.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let quarter_turns = if square {
            rng.gen_range(0..4u8)
        } else {
            2 * rng.gen_range(0..2u8)
        };
        Self {
            quarter_turns,
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
        }
    }

    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinate feeding output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let y = if self.flip_vertical { oh - 1 - y } else { y };
        let x = if self.flip_horizontal { ow - 1 - x } else { x };
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        }
    }

    fn remap<T: Copy>(&self, plane: &[T], h: usize, w: usize, out: &mut Vec<T>) {
        let (oh, ow) = self.output_dims(h, w);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let (oh, ow) = self.output_dims(image.height, image.width);
        let mut data = Vec::with_capacity(image.data.len());
        for c in 0..image.channels {
            self.remap(image.plane(c), image.height, image.width, &mut data);
        }
        Image {
            channels: image.channels,
            height: oh,
            width: ow,
            data,
        }
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (oh, ow) = self.output_dims(mask.height, mask.width);
        let mut data = Vec::with_capacity(mask.data.len());
        self.remap(&mask.data, mask.height, mask.width, &mut data);
        Mask {
            height: oh,
            width: ow,
            data,
        }
    }
}

/// Random 90° rotation plus independent flips, applied identically to image and mask.
pub fn weak_augment<R: Rng + ?Sized>(
    image: &Image,
    mask: Option<&Mask>,
    rng: &mut R,
) -> Result<(Image, Option<Mask>)> {
    if let Some(m) = mask {
        if m.height != image.height || m.width != image.width {
            return Err(Error::invalid(format!(
                "mask {}x{} does not match image {}x{}",
                m.height, m.width, image.height, image.width
            )));
        }
    }
    let draw = WeakDraw::sample(rng, image.height == image.width);
    Ok((draw.apply_image(image), mask.map(|m| draw.apply_mask(m))))
}

/// Strong augmentation ranges. Jitter factors are drawn from `[1 - s, 1 + s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongAugmentConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
    pub probability: f64,
}

impl Default for StrongAugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 2.0,
            probability: 0.5,
        }
    }
}

impl StrongAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} strength {s} outside [0, 1]")));
            }
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config(format!(
                "blur sigma range [{}, {}] is invalid",
                self.blur_sigma_min, self.blur_sigma_max
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augment probability {} outside [0, 1]",
                self.probability
            )));
        }
        Ok(())
    }
}

/// Concrete photometric parameters; `None` skips the sub-op.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StrongDraw {
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
    pub saturation: Option<f32>,
    pub blur_sigma: Option<f32>,
}

impl StrongDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &StrongAugmentConfig, rng: &mut R) -> Self {
        let factor = |s: f32, rng: &mut R| {
            let on = rng.gen_bool(cfg.probability);
            let f = if s > 0.0 {
                rng.gen_range(1.0 - s..=1.0 + s)
            } else {
                1.0
            };
            on.then_some(f)
        };
        let brightness = factor(cfg.brightness, rng);
        let contrast = factor(cfg.contrast, rng);
        let saturation = factor(cfg.saturation, rng);
        let blur_on = rng.gen_bool(cfg.probability);
        let sigma = if cfg.blur_sigma_max > cfg.blur_sigma_min {
            rng.gen_range(cfg.blur_sigma_min..=cfg.blur_sigma_max)
        } else {
            cfg.blur_sigma_min
        };
        Self {
            brightness,
            contrast,
            saturation,
            blur_sigma: blur_on.then_some(sigma),
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        if let Some(b) = self.brightness {
            out.data.iter_mut().for_each(|v| *v *= b);
            out.clamp_unit();
        }
        if let Some(c) = self.contrast {
            let gray = grayscale(&out);
            let mean = gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len().max(1) as f64;
            let mean = mean as f32;
            out.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
            out.clamp_unit();
        }
        if let Some(s) = self.saturation {
            if out.channels == 3 {
                let gray = grayscale(&out);
                for ch in 0..3 {
                    for (v, g) in out.plane_mut(ch).iter_mut().zip(&gray) {
                        *v = g + (*v - g) * s;
                    }
                }
                out.clamp_unit();
            }
        }
        if let Some(sigma) = self.blur_sigma {
            out = gaussian_blur(&out, sigma);
            out.clamp_unit();
        }
        out
    }
}

/// Luma for three channels, the single plane otherwise.
fn grayscale(image: &Image) -> Vec<f32> {
    if image.channels == 3 {
        let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
        (0..image.plane_len())
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    } else {
        let n = image.channels.max(1) as f32;
        (0..image.plane_len())
            .map(|i| (0..image.channels).map(|c| image.plane(c)[i]).sum::<f32>() / n)
            .collect()
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..image.channels {
        let src = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += k * src[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Random brightness/contrast/saturation jitter and Gaussian blur, clipped to `[0, 1]`.
pub fn strong_augment<R: Rng + ?Sized>(
    image: &Image,
    cfg: &StrongAugmentConfig,
    rng: &mut R,
) -> Result<Image> {
    if image.is_empty() {
        return Err(Error::invalid("strong augmentation of an empty image"));
    }
    Ok(StrongDraw::sample(cfg, rng).apply(image))
}

/// Quantile mapping of one plane: each value `v` goes to the smallest reference
/// value whose empirical CDF reaches `F_src(v)`.
fn match_plane(source: &[f32], reference: &[f32]) -> Vec<f32> {
    let n = source.len();
    let m = reference.len();
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f32::total_cmp);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| source[a].total_cmp(&source[b]));

    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let v = source[order[start]];
        let mut end = start + 1;
        while end < n && source[order[end]] == v {
            end += 1;
        }
        // `end` source values are <= v; ceil(end * m / n) - 1 indexes the reference
        let idx = (end * m).div_ceil(n) - 1;
        let mapped = sorted_ref[idx];
        for &i in &order[start..end] {
            out[i] = mapped;
        }
        start = end;
    }
    out
}

/// Per-channel histogram matching of `source` onto `reference`.
pub fn histogram_match(source: &Image, reference: &Image) -> Result<Image> {
    if source.is_empty() || reference.is_empty() {
        return Err(Error::invalid("histogram matching needs non-empty images"));
    }
    if source.channels != reference.channels {
        return Err(Error::invalid(format!(
            "channel mismatch: source {} vs reference {}",
            source.channels, reference.channels
        )));
    }
    let mut out = source.clone();
    for c in 0..source.channels {
        let mapped = match_plane(source.plane(c), reference.plane(c));
        out.plane_mut(c).copy_from_slice(&mapped);
    }
    Ok(out)
}

/// Anything that can hand out images per (1-based) domain.
pub trait StylePool {
    fn domain_count(&self) -> usize;
    fn domain_len(&self, domain: usize) -> usize;
    fn domain_image(&self, domain: usize, index: usize) -> &Image;
}

/// Picks a uniformly random other domain, then a uniformly random image from it.
pub fn sample_style_reference<'a, P: StylePool + ?Sized, R: Rng + ?Sized>(
    sample_domain: usize,
    pool: &'a P,
    rng: &mut R,
) -> Result<(usize, &'a Image)> {
    let k = pool.domain_count();
    if k < 2 {
        return Err(Error::invalid(
            "style reference needs at least two source domains",
        ));
    }
    if sample_domain == 0 || sample_domain > k {
        return Err(Error::invalid(format!(
            "domain id {sample_domain} outside 1..={k}"
        )));
    }
    let mut d = rng.gen_range(1..k);
    if d >= sample_domain {
        d += 1;
    }
    let len = pool.domain_len(d);
    if len == 0 {
        return Err(Error::Dataset(format!("domain {d} has no images")));
    }
    let i = rng.gen_range(0..len);
    Ok((d, pool.domain_image(d, i)))
}

/// The three aligned views of one unlabeled image.
#[derive(Clone, Debug)]
pub struct AugmentedTriplet {
    pub u_w: Image,
    pub u_s: Image,
    pub u_h: Image,
    pub reference_domain: usize,
}

impl AugmentedTriplet {
    pub fn build<P: StylePool + ?Sized, R: Rng + ?Sized>(
        image: &Image,
        domain: usize,
        pool: &P,
        strong: &StrongAugmentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (u_w, _) = weak_augment(image, None, rng)?;
        let u_s = strong_augment(&u_w, strong, rng)?;
        let (reference_domain, reference) = sample_style_reference(domain, pool, rng)?;
        let u_h = histogram_match(&u_w, reference)?;
        Ok(Self {
            u_w,
            u_s,
            u_h,
            reference_domain,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| i as f32 / (h * w) as f32).collect();
        Image::new(1, h, w, data).unwrap()
    }

    fn brute_match(source: &[f32], reference: &[f32]) -> Vec<f32> {
        let mut sorted = reference.to_vec();
        sorted.sort_by(f32::total_cmp);
        let n = source.len() as f64;
        source
            .iter()
            .map(|&v| {
                let q = source.iter().filter(|&&s| s <= v).count() as f64 / n;
                // smallest reference value r with F_ref(r) >= q
                *sorted
                    .iter()
                    .find(|&&r| {
                        sorted.iter().filter(|&&t| t <= r).count() as f64 / sorted.len() as f64
                            >= q - 1e-12
                    })
                    .unwrap()
            })
            .collect()
    }

    fn ks(a: &[f32], b: &[f32]) -> f64 {
        let mut xs: Vec<f32> = a.iter().chain(b).copied().collect();
        xs.sort_by(f32::total_cmp);
        xs.iter()
            .map(|&x| {
                let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_draw_and_half_turn_involution() {
        let img = ramp(4, 5);
        assert_eq!(WeakDraw::IDENTITY.apply_image(&img), img);
        let half = WeakDraw {
            quarter_turns: 2,
            ..WeakDraw::IDENTITY
        };
        assert_eq!(half.apply_image(&half.apply_image(&img)), img);
    }

    #[test]
    fn quarter_turn_moves_corner() {
        let img = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = WeakDraw {
            quarter_turns: 1,
            ..WeakDraw::IDENTITY
        };
        // counter-clockwise: top row becomes [2, 4]
        assert_eq!(q.apply_image(&img).data, vec![2.0, 4.0, 1.0, 3.0]);
        let four = (0..4).fold(img.clone(), |acc, _| q.apply_image(&acc));
        assert_eq!(four, img);
    }

    #[test]
    fn weak_augment_rejects_mismatched_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ramp(4, 4);
        let mask = Mask::zeros(4, 3);
        assert!(weak_augment(&img, Some(&mask), &mut rng).is_err());
    }

    #[test]
    fn non_square_keeps_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ramp(3, 5);
        for _ in 0..20 {
            let (out, _) = weak_augment(&img, None, &mut rng).unwrap();
            assert_eq!((out.height, out.width), (3, 5));
        }
    }

    #[test]
    fn brightness_rule() {
        let img = Image::filled(1, 4, 4, 0.5);
        let draw = StrongDraw {
            brightness: Some(1.2),
            ..Default::default()
        };
        let out = draw.apply(&img);
        assert!(out.data.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn zero_strength_is_identity() {
        let cfg = StrongAugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            probability: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ramp(8, 8);
        let out = strong_augment(&img, &cfg, &mut rng).unwrap();
        assert!(img.data.iter().zip(&out.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn saturation_only_touches_color() {
        let rgb = Image::new(3, 1, 1, vec![0.8, 0.2, 0.4]).unwrap();
        let draw = StrongDraw {
            saturation: Some(0.0),
            ..Default::default()
        };
        let out = draw.apply(&rgb);
        let g = 0.299 * 0.8 + 0.587 * 0.2 + 0.114 * 0.4;
        assert!(out.data.iter().all(|&v| (v - g).abs() < 1e-6));
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(1, 9, 9, 0.3);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn two_level_matching() {
        let src = Image::new(1, 2, 2, vec![0.2, 0.8, 0.8, 0.2]).unwrap();
        let reference = Image::new(1, 2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let out = histogram_match(&src, &reference).unwrap();
        assert_eq!(out.data, vec![0.1, 0.9, 0.9, 0.1]);
        assert_eq!(out.data, brute_match(&src.data, &reference.data));
    }

    #[test]
    fn constant_source_maps_to_reference_maximum() {
        let src = Image::filled(1, 3, 3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..9).map(|_| rng.gen()).collect();
        let reference = Image::new(1, 3, 3, data.clone()).unwrap();
        let out = histogram_match(&src, &reference).unwrap();
        let expected = brute_match(&src.data, &data)[0];
        assert!(out.data.iter().all(|&v| v == expected));
        assert_eq!(expected, data.iter().copied().fold(f32::MIN, f32::max));
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..256).map(|_| rng.gen_range(0..256) as f32 / 255.0).collect();
        let img = Image::new(1, 16, 16, data).unwrap();
        let out = histogram_match(&img, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn matched_output_follows_reference_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let a: Vec<f32> = (0..4096).map(|_| rng.gen::<f32>().powf(2.0)).collect();
            let b: Vec<f32> = (0..4096).map(|_| rng.gen::<f32>().sqrt()).collect();
            let out = histogram_match(
                &Image::new(1, 64, 64, a).unwrap(),
                &Image::new(1, 64, 64, b.clone()).unwrap(),
            )
            .unwrap();
            assert!(ks(&out.data, &b) < 0.05);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let empty = Image::new(1, 0, 0, vec![]).unwrap();
        let one = Image::filled(1, 2, 2, 0.5);
        let rgb = Image::filled(3, 2, 2, 0.5);
        assert!(histogram_match(&empty, &one).is_err());
        assert!(histogram_match(&one, &empty).is_err());
        assert!(histogram_match(&one, &rgb).is_err());
    }

    struct Pool(Vec<Vec<Image>>);

    impl StylePool for Pool {
        fn domain_count(&self) -> usize {
            self.0.len()
        }
        fn domain_len(&self, d: usize) -> usize {
            self.0[d - 1].len()
        }
        fn domain_image(&self, d: usize, i: usize) -> &Image {
            &self.0[d - 1][i]
        }
    }

    fn pool(k: usize) -> Pool {
        Pool(
            (0..k)
                .map(|d| vec![Image::filled(1, 2, 2, d as f32 / 10.0); 3])
                .collect(),
        )
    }

    #[test]
    fn style_reference_excludes_own_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = pool(2);
        for _ in 0..100 {
            assert_eq!(sample_style_reference(1, &p, &mut rng).unwrap().0, 2);
        }
        assert!(sample_style_reference(1, &pool(1), &mut rng).is_err());
    }

    #[test]
    fn style_reference_is_uniform_over_other_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = pool(3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_style_reference(2, &p, &mut rng).unwrap().0] += 1;
        }
        assert_eq!(counts[2], 0);
        for d in [1, 3] {
            let frac = counts[d] as f64 / 10_000.0;
            assert!((frac - 0.5).abs() < 0.03, "domain {d}: {frac}");
        }
    }

    #[test]
    fn style_reference_is_seeded() {
        let p = pool(4);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_style_reference(1, &p, &mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn triplet_views_are_aligned() {
        let p = pool(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = ramp(8, 8);
        let t = AugmentedTriplet::build(&img, 1, &p, &StrongAugmentConfig::default(), &mut rng)
            .unwrap();
        assert_ne!(t.reference_domain, 1);
        for v in [&t.u_s, &t.u_h] {
            assert_eq!((v.channels, v.height, v.width), (1, 8, 8));
        }
    }

    proptest! {
        #[test]
        fn matching_agrees_with_brute_force(
            src in proptest::collection::vec(0u8..12, 256),
            reference in proptest::collection::vec(0u8..12, 256),
        ) {
            let s: Vec<f32> = src.iter().map(|&v| v as f32).collect();
            let r: Vec<f32> = reference.iter().map(|&v| v as f32).collect();
            let out = histogram_match(
                &Image::new(1, 16, 16, s.clone()).unwrap(),
                &Image::new(1, 16, 16, r.clone()).unwrap(),
            ).unwrap();
            prop_assert_eq!(out.data, brute_match(&s, &r));
        }

        #[test]
        fn matching_preserves_order(
            src in proptest::collection::vec(0.0f32..1.0, 64),
            reference in proptest::collection::vec(0.0f32..1.0, 100),
        ) {
            let out = match_plane(&src, &reference);
            for i in 0..src.len() {
                for j in 0..src.len() {
                    if src[i] <= src[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }

        #[test]
        fn weak_augment_preserves_class_counts(seed in 0u64..1000, fill in proptest::collection::vec(0u8..3, 36)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Mask::new(6, 6, fill).unwrap();
            let img = Image::new(1, 6, 6, mask.data.iter().map(|&v| v as f32 / 2.0).collect()).unwrap();
            let (oi, om) = weak_augment(&img, Some(&mask), &mut rng).unwrap();
            let om = om.unwrap();
            for c in 0..3u8 {
                prop_assert_eq!(om.count(c), mask.count(c));
            }
            // image and mask moved together
            for (v, m) in oi.data.iter().zip(&om.data) {
                prop_assert_eq!(*v, *m as f32 / 2.0);
            }
        }

        #[test]
        fn strong_output_in_unit_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::new(3, 8, 8, (0..192).map(|_| rng.gen()).collect()).unwrap();
            let out = strong_augment(&img, &StrongAugmentConfig::default(), &mut rng).unwrap();
            prop_assert_eq!((out.height, out.width), (8, 8));
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
