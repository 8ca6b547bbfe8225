//! Procedural source scenes, target-style backgrounds, and the
//! structure-preserving compositor that pastes labeled wire pixels onto
//! background patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{label_components, DomainTag, Image, Mask, Sample};
use crate::rng::{derive_seed, seeded};

/// Smallest scene edge that still leaves room for a meaningful curve.
pub const MIN_SCENE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub control_point_count: usize,
    pub wire_width_px: f32,
    pub wire_intensity: f32,
    pub background_intensity: f32,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 256,
            width: 256,
            control_point_count: 6,
            wire_width_px: 2.0,
            wire_intensity: 60.0,
            background_intensity: 200.0,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SCENE_DIM || self.width < MIN_SCENE_DIM {
            return Err(Error::param(
                "scene.size",
                format!("{}x{} is below the {MIN_SCENE_DIM}x{MIN_SCENE_DIM} minimum", self.height, self.width),
            ));
        }
        if self.control_point_count < 4 {
            return Err(Error::param("scene.control_point_count", "must be at least 4"));
        }
        if !(self.wire_width_px > 0.0) {
            return Err(Error::param("scene.wire_width_px", "must be positive"));
        }
        for (name, v) in [
            ("scene.wire_intensity", self.wire_intensity),
            ("scene.background_intensity", self.background_intensity),
        ] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 255]")));
            }
        }
        if self.wire_intensity == self.background_intensity {
            return Err(Error::param("scene.wire_intensity", "must differ from background_intensity"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub sigma: f32,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { sigma: 6.0, seed: 0 }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::param("noise.sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// Appearance of the procedural target domain: low-frequency illumination,
/// soft vessel-like tubes, the relative darkening of the wire, and sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetStyle {
    pub base_intensity: (f32, f32),
    pub blob_count: usize,
    pub blob_amplitude: f32,
    pub vessel_count: usize,
    pub vessel_width: (f32, f32),
    pub vessel_darkening: (f32, f32),
    /// Fractional darkening applied at full wire coverage.
    pub wire_contrast: (f32, f32),
    pub noise_sigma: f32,
}

impl Default for TargetStyle {
    fn default() -> Self {
        TargetStyle {
            base_intensity: (130.0, 170.0),
            blob_count: 6,
            blob_amplitude: 35.0,
            vessel_count: 3,
            vessel_width: (4.0, 10.0),
            vessel_darkening: (20.0, 45.0),
            wire_contrast: (0.3, 0.45),
            noise_sigma: 7.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundPool {
    patches: Vec<Image>,
    provenance: Vec<String>,
}

impl BackgroundPool {
    pub fn new(patches: Vec<Image>, provenance: Vec<String>) -> Result<Self> {
        let Some(first) = patches.first() else {
            return Err(Error::EmptyDataset("background pool has no patches".into()));
        };
        if provenance.len() != patches.len() {
            return Err(Error::shape(patches.len(), provenance.len()));
        }
        for p in &patches {
            first.check_dims(p)?;
        }
        Ok(BackgroundPool { patches, provenance })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[Image] {
        &self.patches
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        self.patches[0].dims()
    }
}

/// Where pool patches are cropped from.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchOffsets {
    /// Uniform random top-left corners.
    Random(u64),
    /// Explicit `(row, col)` per patch; cycles if shorter than `K`.
    Fixed(Vec<(usize, usize)>),
}

/// Stroke geometry of a rasterized curve: per-pixel distance to the curve,
/// `f32::INFINITY` beyond the stamping margin.
struct DistanceField {
    width: usize,
    dist: Vec<f32>,
}

impl DistanceField {
    fn stamp(height: usize, width: usize, polyline: &[(f32, f32)], margin: f32) -> Self {
        let mut dist = vec![f32::INFINITY; height * width];
        for seg in polyline.windows(2) {
            let ((r0, c0), (r1, c1)) = (seg[0], seg[1]);
            let rmin = (r0.min(r1) - margin).floor().max(0.0) as usize;
            let rmax = ((r0.max(r1) + margin).ceil() as isize).min(height as isize - 1);
            let cmin = (c0.min(c1) - margin).floor().max(0.0) as usize;
            let cmax = ((c0.max(c1) + margin).ceil() as isize).min(width as isize - 1);
            if rmax < 0 || cmax < 0 {
                continue;
            }
            let (dr, dc) = (r1 - r0, c1 - c0);
            let len2 = dr * dr + dc * dc;
            for r in rmin..=rmax as usize {
                for c in cmin..=cmax as usize {
                    let (pr, pc) = (r as f32 - r0, c as f32 - c0);
                    let t = if len2 > 0.0 {
                        ((pr * dr + pc * dc) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (er, ec) = (pr - t * dr, pc - t * dc);
                    let d = (er * er + ec * ec).sqrt();
                    let slot = &mut dist[r * width + c];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
        DistanceField { width, dist }
    }

    fn at(&self, r: usize, c: usize) -> f32 {
        self.dist[r * self.width + c]
    }
}

/// Dense polyline through `points` along a uniform Catmull-Rom spline.
pub fn catmull_rom(points: &[(f32, f32)], max_step: f32) -> Vec<(f32, f32)> {
    if points.len() < 2 {
        return points.to_vec();
    }
    let n = points.len();
    let p = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = vec![points[0]];
    for i in 0..n - 1 {
        let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
        let chord = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        let steps = ((chord * 1.5 / max_step).ceil() as usize).max(1);
        for s in 1..=steps {
            let t = s as f32 / steps as f32;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f32, b: f32, c: f32, d: f32| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out
}

/// Mask radius for a stroke; never below half a pixel so the stroke stays connected.
fn mask_radius(wire_width: f32) -> f32 {
    (wire_width / 2.0).max(0.5)
}

/// Rasterize a wire through explicit control points on a flat background.
/// The mask is the hard set of pixels within the stroke radius; the image
/// gets a one-pixel linear anti-aliasing fringe outside it.
pub fn render_curve(params: &SceneParams, control_points: &[(f32, f32)]) -> Result<(Image, Mask)> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let polyline = catmull_rom(control_points, 0.25);
    let radius = mask_radius(params.wire_width_px);
    let field = DistanceField::stamp(h, w, &polyline, radius + 1.5);
    let (bg, wire) = (params.background_intensity, params.wire_intensity);
    let mut image = Image::filled(h, w, bg);
    let mut mask = Mask::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            let d = field.at(r, c);
            if d <= radius {
                mask.set(r, c, 1);
            }
            let coverage = (radius + 1.0 - d).clamp(0.0, 1.0);
            if coverage > 0.0 {
                image.set(r, c, bg + (wire - bg) * coverage);
            }
        }
    }
    Ok((image, mask))
}

/// Random-walk control points that stay inside a margin of the frame.
pub fn sample_control_points<R: Rng>(params: &SceneParams, rng: &mut R) -> Vec<(f32, f32)> {
    let (h, w) = (params.height as f32, params.width as f32);
    let margin = (0.08 * h.min(w)).max(4.0);
    let (lo_r, hi_r, lo_c, hi_c) = (margin, h - 1.0 - margin, margin, w - 1.0 - margin);
    let n = params.control_point_count;
    let step = 0.9 * h.min(w) / (n - 1) as f32;

    // Enter from a random edge, heading roughly toward the centre.
    let edge = rng.gen_range(0..4);
    let u = rng.gen_range(0.2f32..0.8);
    let start = match edge {
        0 => (lo_r, lo_c + u * (hi_c - lo_c)),
        1 => (hi_r, lo_c + u * (hi_c - lo_c)),
        2 => (lo_r + u * (hi_r - lo_r), lo_c),
        _ => (lo_r + u * (hi_r - lo_r), hi_c),
    };
    let centre = (h / 2.0, w / 2.0);
    let mut heading = (centre.0 - start.0).atan2(centre.1 - start.1) + rng.gen_range(-0.6f32..0.6);
    let mut points = vec![start];
    let mut cur = start;
    for _ in 1..n {
        let len = step * rng.gen_range(0.6f32..1.0);
        heading += rng.gen_range(-0.7f32..0.7);
        let mut next = (cur.0 + len * heading.sin(), cur.1 + len * heading.cos());
        if next.0 < lo_r || next.0 > hi_r {
            heading = -heading;
            next.0 = cur.0 + len * heading.sin();
        }
        if next.1 < lo_c || next.1 > hi_c {
            heading = std::f32::consts::PI - heading;
            next.1 = cur.1 + len * heading.cos();
        }
        next = (next.0.clamp(lo_r, hi_r), next.1.clamp(lo_c, hi_c));
        points.push(next);
        cur = next;
    }
    points
}

fn scene_geometry(params: &SceneParams) -> Result<(Image, Mask)> {
    params.validate()?;
    // A handful of retries under derived seeds; a single 8-connected stroke is
    // part of the contract.
    for attempt in 0..32u64 {
        let mut rng = seeded(derive_seed(params.seed, attempt));
        let points = sample_control_points(params, &mut rng);
        let (image, mask) = render_curve(params, &points)?;
        if label_components(&mask).1 == 1 {
            return Ok((image, mask));
        }
    }
    Err(Error::param("scene.seed", "could not draw a connected wire"))
}

/// One labeled source-domain scene: a spline wire on a flat background.
pub fn generate_guidewire_scene(params: &SceneParams) -> Result<Sample> {
    let (image, mask) = scene_geometry(params)?;
    Sample::new(format!("src_{:016x}", params.seed), image, Some(mask), DomainTag::Source)
}

/// Broad Gaussian bumps of random sign: low-frequency illumination.
fn add_blobs<R: Rng>(img: &mut Image, count: usize, amplitude: f32, rng: &mut R) {
    let (height, width) = img.dims();
    let scale = height.min(width) as f32;
    for _ in 0..count {
        let (cr, cc) = (rng.gen_range(0.0..height as f32), rng.gen_range(0.0..width as f32));
        let sigma = rng.gen_range(0.15f32..0.45) * scale;
        let amp = rng.gen_range(-amplitude..=amplitude);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f32 - cr).powi(2) + (c as f32 - cc).powi(2);
                let v = img.get(r, c) + amp * (-d2 * inv).exp();
                img.set(r, c, v);
            }
        }
    }
}

/// Generic scene for pretraining the promptable backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericScene {
    /// Mask is the union of all strokes.
    pub sample: Sample,
    /// One mask per stroke.
    pub parts: Vec<Mask>,
}

/// One to three strokes of random width and polarity over random
/// illumination and noise. It shares no generator with either benchmark
/// domain beyond the spline primitive.
pub fn generic_scene(height: usize, width: usize, seed: u64) -> Result<GenericScene> {
    if height < MIN_SCENE_DIM || width < MIN_SCENE_DIM {
        return Err(Error::param("generic.size", format!("{height}x{width} below minimum")));
    }
    let mut rng = seeded(seed);
    let mut img = Image::filled(height, width, rng.gen_range(50.0f32..210.0));
    add_blobs(&mut img, rng.gen_range(0..5), 50.0, &mut rng);
    let mut mask = Mask::filled(height, width, 0);
    let mut parts = Vec::new();
    let geometry = SceneParams {
        height,
        width,
        ..SceneParams::default()
    };
    for _ in 0..rng.gen_range(1..=3) {
        let points = sample_control_points(
            &SceneParams {
                control_point_count: rng.gen_range(4..=7),
                ..geometry.clone()
            },
            &mut rng,
        );
        let radius = rng.gen_range(0.5f32..3.0);
        let contrast = rng.gen_range(25.0f32..90.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let field = DistanceField::stamp(height, width, &catmull_rom(&points, 0.25), radius + 1.5);
        let mut part = Mask::filled(height, width, 0);
        for r in 0..height {
            for c in 0..width {
                let d = field.at(r, c);
                if d <= radius {
                    part.set(r, c, 1);
                    mask.set(r, c, 1);
                }
                let coverage = (radius + 1.0 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = img.get(r, c) + contrast * coverage;
                    img.set(r, c, v);
                }
            }
        }
        parts.push(part);
    }
    let sigma = rng.gen_range(0.0f32..10.0);
    add_noise(&mut img, sigma, &mut rng);
    let sample = Sample::new(format!("gen_{seed:016x}"), img, Some(mask), DomainTag::Source)?;
    Ok(GenericScene { sample, parts })
}

/// Smooth illumination plus dark soft tubes plus noise; contains no wire.
pub fn vessel_background(height: usize, width: usize, style: &TargetStyle, seed: u64) -> Image {
    let mut rng = seeded(seed);
    let base = rng.gen_range(style.base_intensity.0..=style.base_intensity.1);
    let mut img = Image::filled(height, width, base);
    add_blobs(&mut img, style.blob_count, style.blob_amplitude, &mut rng);
    let vessel_scene = SceneParams {
        height,
        width,
        control_point_count: 5,
        ..SceneParams::default()
    };
    for _ in 0..style.vessel_count {
        let points = sample_control_points(&vessel_scene, &mut rng);
        let radius = rng.gen_range(style.vessel_width.0..=style.vessel_width.1) / 2.0;
        let dark = rng.gen_range(style.vessel_darkening.0..=style.vessel_darkening.1);
        let field = DistanceField::stamp(height, width, &catmull_rom(&points, 0.5), 3.0 * radius);
        for r in 0..height {
            for c in 0..width {
                let d = field.at(r, c);
                if d.is_finite() {
                    let v = img.get(r, c) - dark * (-(d / radius).powi(2)).exp();
                    img.set(r, c, v);
                }
            }
        }
    }
    add_noise(&mut img, style.noise_sigma, &mut rng);
    img
}

/// One target-domain frame: a wire that darkens the vessel background
/// multiplicatively, followed by sensor noise. The mask is kept as ground truth.
pub fn render_target_frame(scene: &SceneParams, style: &TargetStyle, seed: u64) -> Result<Sample> {
    let scene = SceneParams {
        seed: derive_seed(seed, 1),
        ..scene.clone()
    };
    let (wire_image, mask) = scene_geometry(&scene)?;
    let clean_style = TargetStyle {
        noise_sigma: 0.0,
        ..style.clone()
    };
    let mut img = vessel_background(scene.height, scene.width, &clean_style, derive_seed(seed, 2));
    let mut rng = seeded(derive_seed(seed, 3));
    let contrast = rng.gen_range(style.wire_contrast.0..=style.wire_contrast.1);
    let (bg, wire) = (scene.background_intensity, scene.wire_intensity);
    for (v, &s) in img.data_mut().iter_mut().zip(wire_image.data()) {
        let coverage = (s - bg) / (wire - bg);
        if coverage > 0.0 {
            *v *= 1.0 - contrast * coverage;
        }
    }
    add_noise(&mut img, style.noise_sigma, &mut rng);
    Sample::new(format!("tgt_{seed:016x}"), img, Some(mask), DomainTag::Target)
}

pub fn add_noise<R: Rng>(img: &mut Image, sigma: f32, rng: &mut R) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).expect("sigma is finite and positive");
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 255.0);
    }
}

pub fn build_background_pool(
    images: &[Image],
    patch: (usize, usize),
    k: usize,
    offsets: &PatchOffsets,
) -> Result<BackgroundPool> {
    if k == 0 {
        return Err(Error::param("pool.k", "must be at least 1"));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset("no background images".into()));
    }
    let (ph, pw) = patch;
    if ph == 0 || pw == 0 {
        return Err(Error::param("pool.patch_size", "must be non-zero"));
    }
    for img in images {
        if img.height() < ph || img.width() < pw {
            return Err(Error::shape(
                format!("image at least {ph}x{pw}"),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
    }
    let mut rng = match offsets {
        PatchOffsets::Random(seed) => Some(seeded(*seed)),
        PatchOffsets::Fixed(list) if list.is_empty() => {
            return Err(Error::param("pool.offsets", "fixed offset list is empty"))
        }
        PatchOffsets::Fixed(_) => None,
    };
    let mut patches = Vec::with_capacity(k);
    let mut provenance = Vec::with_capacity(k);
    for i in 0..k {
        let src_idx = i % images.len();
        let src = &images[src_idx];
        let (r0, c0) = match (&mut rng, offsets) {
            (Some(rng), _) => (
                rng.gen_range(0..=src.height() - ph),
                rng.gen_range(0..=src.width() - pw),
            ),
            (None, PatchOffsets::Fixed(list)) => list[i % list.len()],
            _ => unreachable!(),
        };
        if r0 + ph > src.height() || c0 + pw > src.width() {
            return Err(Error::param("pool.offsets", format!("({r0}, {c0}) leaves the image")));
        }
        patches.push(Image::from_fn(ph, pw, |r, c| *src.get(r0 + r, c0 + c)));
        provenance.push(format!("image{src_idx}@{r0},{c0}"));
    }
    BackgroundPool::new(patches, provenance)
}

/// Paste the masked source pixels over `patch` and add noise.
pub fn composite_with_patch(sample: &Sample, patch: &Image, noise: &NoiseParams) -> Result<Sample> {
    noise.validate()?;
    let mask = sample.require_mask()?;
    sample.image.check_dims(patch)?;
    let data = sample
        .image
        .data()
        .iter()
        .zip(mask.data())
        .zip(patch.data())
        .map(|((&s, &m), &b)| if m == 1 { s } else { b })
        .collect();
    let mut image = Image::from_vec(patch.height(), patch.width(), data)?;
    // Noise stream is independent of the one that picked the patch.
    add_noise(&mut image, noise.sigma, &mut seeded(derive_seed(noise.seed, 0)));
    Sample::new(
        format!("syn_{}", sample.id),
        image,
        Some(mask.clone()),
        DomainTag::Synthesized,
    )
}

/// Composite onto a patch chosen uniformly from the pool under `noise.seed`.
pub fn composite(sample: &Sample, pool: &BackgroundPool, noise: &NoiseParams) -> Result<Sample> {
    let k = seeded(noise.seed).gen_range(0..pool.len());
    composite_with_patch(sample, &pool.patches[k], noise)
}

/// `n` synthesized frames cycling through `source`; frame `i` composites
/// `source[i % len]` with noise seed `derive_seed(noise.seed, i)` onto a
/// patch drawn uniformly under `seed`.
pub fn synthesize_dataset(
    source: &[Sample],
    pool: &BackgroundPool,
    n: usize,
    noise: &NoiseParams,
    seed: u64,
) -> Result<Vec<Sample>> {
    if source.is_empty() {
        return Err(Error::EmptyDataset("no source samples".into()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyDataset("empty background pool".into()));
    }
    if n == 0 {
        return Err(Error::param("synth.count", "must be at least 1"));
    }
    let mut rng = seeded(seed);
    let picks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..pool.len())).collect();
    let frames: Vec<Result<Sample>> = crate::par::map_range(n, |i| {
        let frame_noise = NoiseParams {
            sigma: noise.sigma,
            seed: derive_seed(noise.seed, i as u64),
        };
        let mut s = composite_with_patch(&source[i % source.len()], &pool.patches[picks[i]], &frame_noise)?;
        s.id = format!("syn_{i:05}");
        Ok(s)
    });
    frames.into_iter().collect()
}
