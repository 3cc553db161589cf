//! Deterministic procedural renderer: stylized images (palette + texture
//! background, one shape in the foreground), raw "natural-like" images, and
//! ground-truth masks. Every sample is a pure function of its specs and seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, subseed};

pub const IMG_SIZE: usize = 32;
pub const NUM_SHAPES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Plain,
    Stripes,
    Dots,
    Checker,
    Grain,
    RadialGradient,
}

pub const ALL_TEXTURES: [Texture; 6] = [
    Texture::Plain,
    Texture::Stripes,
    Texture::Dots,
    Texture::Checker,
    Texture::Grain,
    Texture::RadialGradient,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
    Diamond,
    Heart,
}

pub const ALL_SHAPES: [Shape; NUM_SHAPES] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Star,
    Shape::Ring,
    Shape::Diamond,
    Shape::Heart,
];

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Star => "star",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Heart => "heart",
        }
    }

    pub fn index(&self) -> usize {
        ALL_SHAPES.iter().position(|s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Shape {
        ALL_SHAPES[i % NUM_SHAPES]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: u32,
    /// 3-5 RGB colors in [0,1]^3, pairwise L2-distinct by >= 0.15.
    pub palette: Vec<[f32; 3]>,
    pub texture: Texture,
    /// cycles per image width, 1-8
    pub texture_freq: f32,
    /// radians in [0, pi)
    pub texture_angle: f32,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.len() < 3 || self.palette.len() > 5 {
            // degenerate palettes are allowed in tests through render_unchecked
            return Err(Error::InvalidSpec(format!(
                "palette must have 3-5 colors, got {}",
                self.palette.len()
            )));
        }
        for c in &self.palette {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidSpec("palette color out of [0,1]".into()));
            }
        }
        for i in 0..self.palette.len() {
            for j in (i + 1)..self.palette.len() {
                if color_dist(&self.palette[i], &self.palette[j]) < 0.15 {
                    return Err(Error::InvalidSpec(format!(
                        "palette colors {i} and {j} closer than 0.15"
                    )));
                }
            }
        }
        if !(1.0..=8.0).contains(&self.texture_freq) {
            return Err(Error::InvalidSpec(format!(
                "texture_freq {} outside [1,8]",
                self.texture_freq
            )));
        }
        if !(0.0..std::f32::consts::PI).contains(&self.texture_angle) {
            return Err(Error::InvalidSpec("texture_angle outside [0,pi)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContentSpec {
    pub content_id: u32,
    pub shape: Shape,
    /// shape bounding-box fraction of image width, [0.3, 0.7]
    pub size_frac: f32,
    /// center in [0.25, 0.75]^2
    pub center: (f32, f32),
}

impl ContentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.3..=0.7).contains(&self.size_frac) {
            return Err(Error::InvalidSpec(format!(
                "size_frac {} outside [0.3,0.7]",
                self.size_frac
            )));
        }
        for v in [self.center.0, self.center.1] {
            if !(0.25..=0.75).contains(&v) {
                return Err(Error::InvalidSpec("center outside [0.25,0.75]^2".into()));
            }
        }
        // shape bounding box must sit fully inside the frame
        let half = self.size_frac / 2.0;
        for v in [self.center.0, self.center.1] {
            if v - half < 0.0 || v + half > 1.0 {
                return Err(Error::InvalidSpec("shape extends outside the frame".into()));
            }
        }
        if self.content_id as usize != self.shape.index() {
            return Err(Error::InvalidSpec("content_id must equal shape index".into()));
        }
        Ok(())
    }
}

/// Row-major HWC image with values in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let o = (y * self.w + x) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderedSample {
    pub image: Image,
    /// true on shape pixels
    pub mask: Vec<bool>,
    /// None for raw images
    pub style_id: Option<u32>,
    pub content_id: u32,
    pub prompt: String,
    pub seed: u64,
}

impl RenderedSample {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn color_dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Map a texture value in [0,1] onto the palette gradient; output stays in
/// the palette's convex hull.
fn palette_color(palette: &[[f32; 3]], t: f32) -> [f32; 3] {
    let n = palette.len();
    if n == 1 {
        return palette[0];
    }
    let t = t.clamp(0.0, 1.0) * (n - 1) as f32;
    let i = (t.floor() as usize).min(n - 2);
    lerp3(palette[i], palette[i + 1], t - i as f32)
}

/// Texture field in [0,1] at normalized coordinates. `grain` is the seeded
/// per-pixel noise buffer (only read for the Grain texture).
fn texture_value(style: &StyleSpec, u: f32, v: f32, pix: usize, grain: &[f32]) -> f32 {
    let (s, c) = style.texture_angle.sin_cos();
    let proj = u * c + v * s;
    match style.texture {
        Texture::Plain => 0.0,
        Texture::Stripes => {
            let ph = proj * style.texture_freq;
            if (ph.rem_euclid(1.0)) < 0.5 {
                0.0
            } else {
                1.0
            }
        }
        Texture::Dots => {
            let f = style.texture_freq;
            let gu = (u * f).rem_euclid(1.0) - 0.5;
            let gv = (v * f).rem_euclid(1.0) - 0.5;
            if gu * gu + gv * gv < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        Texture::Checker => {
            let f = style.texture_freq;
            let a = (u * f).floor() as i64 + (v * f).floor() as i64;
            if a.rem_euclid(2) == 0 {
                0.0
            } else {
                1.0
            }
        }
        Texture::Grain => grain[pix],
        Texture::RadialGradient => {
            let du = u - 0.5;
            let dv = v - 0.5;
            let r = (du * du + dv * dv).sqrt() * 2.0 * style.texture_freq;
            (r.rem_euclid(2.0) - 1.0).abs()
        }
    }
}

fn shape_mask(content: &ContentSpec, u: f32, v: f32) -> bool {
    let dx = u - content.center.0;
    let dy = v - content.center.1;
    let r = content.size_frac / 2.0;
    match content.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // upward triangle inscribed in the bounding box
            if dy < -r || dy > r {
                return false;
            }
            let t = (dy + r) / (2.0 * r); // 0 at apex, 1 at base
            dx.abs() <= r * t
        }
        Shape::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        Shape::Star => {
            let rho = (dx * dx + dy * dy).sqrt();
            if rho > r {
                return false;
            }
            let theta = dy.atan2(dx);
            // 5-point star: radius oscillates between r and 0.4r
            let k = ((theta * 5.0 / (2.0 * std::f32::consts::PI)).rem_euclid(1.0) - 0.5).abs() * 2.0;
            rho <= r * (0.4 + 0.6 * k)
        }
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Heart => {
            // classic implicit heart, scaled to the bounding box
            let x = dx / r * 1.2;
            let y = -dy / r * 1.2 + 0.25;
            let a = x * x + y * y - 1.0;
            a * a * a - x * x * y * y * y <= 0.0
        }
    }
}

/// Foreground color: the palette entry farthest from the palette mean, so the
/// shape contrasts with the modal background.
fn foreground_color(palette: &[[f32; 3]]) -> [f32; 3] {
    let n = palette.len() as f32;
    let mean = palette.iter().fold([0.0f32; 3], |acc, c| {
        [acc[0] + c[0] / n, acc[1] + c[1] / n, acc[2] + c[2] / n]
    });
    *palette
        .iter()
        .max_by(|a, b| {
            color_dist(a, &mean)
                .partial_cmp(&color_dist(b, &mean))
                .unwrap()
        })
        .unwrap()
}

fn render_impl(style: &StyleSpec, content: &ContentSpec, seed: u64) -> RenderedSample {
    let n = IMG_SIZE;
    // grain noise depends on style and seed, not content, so backgrounds of
    // same-style renders share statistics exactly
    let mut grain_rng = rng_from(subseed(
        seed.wrapping_add(style.style_id as u64),
        "grain",
    ));
    let grain: Vec<f32> = (0..n * n).map(|_| grain_rng.random::<f32>()).collect();

    let fg = foreground_color(&style.palette);
    let mut image = Image::new(n, n);
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f32 + 0.5) / n as f32;
            let v = (y as f32 + 0.5) / n as f32;
            let pix = y * n + x;
            let tv = texture_value(style, u, v, pix, &grain);
            let bg = palette_color(&style.palette, tv);
            if shape_mask(content, u, v) {
                mask[pix] = true;
                // foreground keeps the style's texture modulation
                image.set_pixel(y, x, lerp3(fg, bg, 0.25 * tv));
            } else {
                image.set_pixel(y, x, bg);
            }
        }
    }
    RenderedSample {
        image,
        mask,
        style_id: Some(style.style_id),
        content_id: content.content_id,
        prompt: prompt_of(content),
        seed,
    }
}

/// Render a stylized sample. Pure in (style, content, seed).
pub fn render(style: &StyleSpec, content: &ContentSpec, seed: u64) -> Result<RenderedSample> {
    style.validate()?;
    content.validate()?;
    Ok(render_impl(style, content, seed))
}

/// Render without validating spec invariants (test hook for degenerate specs).
pub fn render_unchecked(style: &StyleSpec, content: &ContentSpec, seed: u64) -> RenderedSample {
    render_impl(style, content, seed)
}

/// An unstylized "natural-like" sample: smooth 2-color gradient background
/// plus one shape in a desaturated dark color. style_id is None.
///
/// Backgrounds stay bright (every channel >= 0.45) and foregrounds dark
/// (every channel <= 0.25), a figure-ground contrast guarantee that keeps
/// the domain legible after patch quantization at desk-scale codebook sizes.
pub fn make_raw(seed: u64) -> RenderedSample {
    let n = IMG_SIZE;
    let mut rng = rng_from(subseed(seed, "raw"));
    let bright = |rng: &mut rand_chacha::ChaCha8Rng| -> [f32; 3] {
        [
            0.45 + 0.55 * rng.random::<f32>(),
            0.45 + 0.55 * rng.random::<f32>(),
            0.45 + 0.55 * rng.random::<f32>(),
        ]
    };
    let c1 = bright(&mut rng);
    let c2 = bright(&mut rng);
    let angle: f32 = rng.random::<f32>() * std::f32::consts::PI;
    let content = sample_content(&mut rng);
    // desaturated dark foreground: gray base with a small channel jitter
    let v: f32 = 0.08 + 0.13 * rng.random::<f32>();
    let fg = [
        (v + 0.04 * (rng.random::<f32>() - 0.5)).clamp(0.0, 0.25),
        (v + 0.04 * (rng.random::<f32>() - 0.5)).clamp(0.0, 0.25),
        (v + 0.04 * (rng.random::<f32>() - 0.5)).clamp(0.0, 0.25),
    ];

    let (s, c) = angle.sin_cos();
    let mut image = Image::new(n, n);
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f32 + 0.5) / n as f32;
            let vv = (y as f32 + 0.5) / n as f32;
            let t = ((u - 0.5) * c + (vv - 0.5) * s + 0.5).clamp(0.0, 1.0);
            if shape_mask(&content, u, vv) {
                mask[y * n + x] = true;
                image.set_pixel(y, x, fg);
            } else {
                image.set_pixel(y, x, lerp3(c1, c2, t));
            }
        }
    }
    RenderedSample {
        image,
        mask,
        style_id: None,
        content_id: content.content_id,
        prompt: prompt_of(&content),
        seed,
    }
}

/// Fixed prompt template, bijective with content_id.
pub fn prompt_of(content: &ContentSpec) -> String {
    format!("a {}", content.shape.name())
}

/// Sample a valid ContentSpec.
pub fn sample_content(rng: &mut rand_chacha::ChaCha8Rng) -> ContentSpec {
    let shape = ALL_SHAPES[rng.random_range(0..NUM_SHAPES)];
    let size_frac = 0.3 + 0.2 * rng.random::<f32>(); // keep away from frame edges
    let half = size_frac / 2.0;
    let lo = 0.25f32.max(half);
    let hi = 0.75f32.min(1.0 - half);
    let cx = lo + (hi - lo) * rng.random::<f32>();
    let cy = lo + (hi - lo) * rng.random::<f32>();
    ContentSpec {
        content_id: shape.index() as u32,
        shape,
        size_frac,
        center: (cx, cy),
    }
}

/// Sample a content spec with a fixed shape.
pub fn sample_content_for_shape(shape: Shape, rng: &mut rand_chacha::ChaCha8Rng) -> ContentSpec {
    let mut c = sample_content(rng);
    c.shape = shape;
    c.content_id = shape.index() as u32;
    c
}

fn sample_palette(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<[f32; 3]> {
    let count = 3 + rng.random_range(0..3usize);
    let mut palette: Vec<[f32; 3]> = Vec::new();
    let mut guard = 0;
    while palette.len() < count {
        guard += 1;
        assert!(guard < 10_000, "palette rejection sampling stuck");
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        if palette.iter().all(|p| color_dist(p, &c) >= 0.2) {
            palette.push(c);
        }
    }
    palette
}

/// Generate a style set and split it into train / held-out styles.
/// Held-out styles never appear in training data.
pub fn make_style_set(
    n_styles: usize,
    seed: u64,
    holdout: usize,
) -> Result<(Vec<StyleSpec>, Vec<StyleSpec>)> {
    if holdout > n_styles || holdout < 1 {
        return Err(Error::InvalidArgument(format!(
            "need n_styles >= holdout >= 1, got n_styles={n_styles} holdout={holdout}"
        )));
    }
    let mut rng = rng_from(subseed(seed, "style-set"));
    let mut styles = Vec::with_capacity(n_styles);
    for id in 0..n_styles {
        let palette = sample_palette(&mut rng);
        let texture = ALL_TEXTURES[rng.random_range(0..ALL_TEXTURES.len())];
        let texture_freq = 1.0 + 7.0 * rng.random::<f32>();
        let texture_angle = rng.random::<f32>() * (std::f32::consts::PI - 1e-4);
        let s = StyleSpec {
            style_id: id as u32,
            palette,
            texture,
            texture_freq,
            texture_angle,
        };
        s.validate().expect("sampled style must be valid");
        styles.push(s);
    }
    let train = styles[..n_styles - holdout].to_vec();
    let held = styles[n_styles - holdout..].to_vec();
    Ok((train, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style0() -> StyleSpec {
        make_style_set(4, 7, 1).unwrap().0[0].clone()
    }

    fn circle_half() -> ContentSpec {
        ContentSpec {
            content_id: Shape::Circle.index() as u32,
            shape: Shape::Circle,
            size_frac: 0.5,
            center: (0.5, 0.5),
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = style0();
        let c = circle_half();
        let a = render(&s, &c, 42).unwrap();
        let b = render(&s, &c, 42).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn circle_mask_area_matches_geometry() {
        // circle with size_frac 0.5 on a 32px image: area ~ pi * 8^2 = 201
        let s = style0();
        let sample = render(&s, &circle_half(), 1).unwrap();
        let count = sample.mask_count() as f32;
        let expect = std::f32::consts::PI * 8.0 * 8.0;
        assert!(
            (count - expect).abs() <= 0.1 * expect,
            "mask count {count} vs expected {expect}"
        );
    }

    #[test]
    fn plain_single_color_background_is_constant() {
        let s = StyleSpec {
            style_id: 0,
            palette: vec![[0.2, 0.4, 0.6]],
            texture: Texture::Plain,
            texture_freq: 1.0,
            texture_angle: 0.0,
        };
        let sample = render_unchecked(&s, &circle_half(), 3);
        for (pix, m) in sample.mask.iter().enumerate() {
            if !m {
                let y = pix / IMG_SIZE;
                let x = pix % IMG_SIZE;
                assert_eq!(sample.image.pixel(y, x), [0.2, 0.4, 0.6]);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = style0();
        s.texture_freq = 99.0;
        assert!(render(&s, &circle_half(), 0).is_err());
        let s = style0();
        let mut c = circle_half();
        c.size_frac = 0.9;
        assert!(render(&s, &c, 0).is_err());
    }

    #[test]
    fn raw_samples_deterministic_and_unstyled() {
        let a = make_raw(5);
        let b = make_raw(5);
        assert_eq!(a.image.data, b.image.data);
        assert!(a.style_id.is_none());
        assert!(a.mask_count() > 0);
    }

    #[test]
    fn raw_samples_cover_all_shapes() {
        let mut seen = [false; NUM_SHAPES];
        for seed in 0..1000u64 {
            seen[make_raw(seed).content_id as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "shape coverage: {seen:?}");
    }

    #[test]
    fn style_set_split_sizes_and_determinism() {
        let (train, held) = make_style_set(90, 11, 10).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(held.len(), 10);
        let train_ids: Vec<u32> = train.iter().map(|s| s.style_id).collect();
        assert!(held.iter().all(|h| !train_ids.contains(&h.style_id)));

        let (train2, _) = make_style_set(90, 11, 10).unwrap();
        assert_eq!(
            serde_json::to_string(&train).unwrap(),
            serde_json::to_string(&train2).unwrap()
        );

        let (t1, h1) = make_style_set(2, 3, 1).unwrap();
        assert_eq!((t1.len(), h1.len()), (1, 1));
        assert_ne!(t1[0].style_id, h1[0].style_id);

        assert!(make_style_set(3, 0, 5).is_err());
        assert!(make_style_set(3, 0, 0).is_err());
    }

    #[test]
    fn prompts_are_bijective_with_shapes() {
        let mut prompts: Vec<String> = ALL_SHAPES
            .iter()
            .map(|&sh| {
                let c = ContentSpec {
                    content_id: sh.index() as u32,
                    shape: sh,
                    size_frac: 0.5,
                    center: (0.5, 0.5),
                };
                prompt_of(&c)
            })
            .collect();
        assert_eq!(prompts[0], "a circle");
        assert_eq!(prompts[4], "a star");
        prompts.sort();
        prompts.dedup();
        assert_eq!(prompts.len(), NUM_SHAPES);
    }

    #[test]
    fn background_mean_stays_in_palette_hull() {
        // per-channel mean of non-mask pixels must lie within the palette's
        // per-channel min/max envelope (a superset check of the convex hull
        // in each coordinate), tolerance 0.05
        for style_seed in 0..5u64 {
            let (train, _) = make_style_set(3, style_seed, 1).unwrap();
            let s = &train[0];
            let sample = render(s, &circle_half(), 9).unwrap();
            let mut mean = [0.0f32; 3];
            let mut count = 0;
            for pix in 0..IMG_SIZE * IMG_SIZE {
                if !sample.mask[pix] {
                    let p = sample.image.pixel(pix / IMG_SIZE, pix % IMG_SIZE);
                    for k in 0..3 {
                        mean[k] += p[k];
                    }
                    count += 1;
                }
            }
            for k in 0..3 {
                mean[k] /= count as f32;
                let lo = s.palette.iter().map(|c| c[k]).fold(f32::INFINITY, f32::min);
                let hi = s
                    .palette
                    .iter()
                    .map(|c| c[k])
                    .fold(f32::NEG_INFINITY, f32::max);
                assert!(
                    mean[k] >= lo - 0.05 && mean[k] <= hi + 0.05,
                    "channel {k} mean {} outside [{lo},{hi}]",
                    mean[k]
                );
            }
        }
    }

    #[test]
    fn same_style_different_content_shares_background_pixels() {
        let s = style0();
        let c1 = circle_half();
        let c2 = ContentSpec {
            content_id: Shape::Diamond.index() as u32,
            shape: Shape::Diamond,
            size_frac: 0.4,
            center: (0.4, 0.6),
        };
        let a = render(&s, &c1, 21).unwrap();
        let b = render(&s, &c2, 21).unwrap();
        for pix in 0..IMG_SIZE * IMG_SIZE {
            if !a.mask[pix] && !b.mask[pix] {
                let (y, x) = (pix / IMG_SIZE, pix % IMG_SIZE);
                assert_eq!(a.image.pixel(y, x), b.image.pixel(y, x));
            }
        }
    }
}
