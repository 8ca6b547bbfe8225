//! Strong photometric perturbation shared by both networks' augmented branches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Intensities are scaled by a factor drawn from `[1 - jitter, 1 + jitter]`.
    pub intensity_jitter: f32,
    pub blur_sigma_range: (f32, f32),
    pub noise_sigma: f32,
    pub erase_count: usize,
    pub erase_size_range: (usize, usize),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            intensity_jitter: 0.2,
            blur_sigma_range: (0.5, 1.5),
            noise_sigma: 4.0,
            erase_count: 2,
            erase_size_range: (8, 24),
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            intensity_jitter: 0.0,
            blur_sigma_range: (0.0, 0.0),
            noise_sigma: 0.0,
            erase_count: 0,
            erase_size_range: (0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(Error::param("augment.intensity_jitter", "must lie in [0, 1)"));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::param("augment.blur_sigma_range", "must be ordered and non-negative"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("augment.noise_sigma", "must be non-negative"));
        }
        if self.erase_size_range.0 > self.erase_size_range.1 {
            return Err(Error::param("augment.erase_size_range", "must be ordered"));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (h, w) = img.dims();
    let horiz = Image::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * img.get(r, reflect(c as isize + i as isize - radius, w)))
            .sum()
    });
    Image::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horiz.get(reflect(r as isize + i as isize - radius, h), c))
            .sum()
    })
}

/// Jitter, blur, noise, then rectangular erasing; geometry never changes.
pub fn strong_perturb(img: &Image, policy: &AugmentationPolicy, seed: u64) -> Image {
    let mut rng = seeded(seed);
    let mut out = img.clone();
    if policy.intensity_jitter > 0.0 {
        let j = policy.intensity_jitter;
        let f = rng.gen_range(1.0 - j..=1.0 + j);
        for v in out.data_mut() {
            *v *= f;
        }
    }
    let (lo, hi) = policy.blur_sigma_range;
    if hi > 0.0 {
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        out = gaussian_blur(&out, sigma);
    }
    if policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, policy.noise_sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let (h, w) = out.dims();
    let (smin, smax) = policy.erase_size_range;
    for _ in 0..policy.erase_count {
        if smax == 0 {
            break;
        }
        let eh = rng.gen_range(smin.max(1)..=smax).min(h);
        let ew = rng.gen_range(smin.max(1)..=smax).min(w);
        let r0 = rng.gen_range(0..=h - eh);
        let c0 = rng.gen_range(0..=w - ew);
        let fill = rng.gen_range(0.0f32..255.0);
        for r in r0..r0 + eh {
            for c in c0..c0 + ew {
                out.set(r, c, fill);
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 255.0);
    }
    out
}
