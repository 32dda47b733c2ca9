//! Synthetic corpus: scenes of colored shapes at known boxes, a painter's
//! renderer, deterministic template descriptions, the programmatic crop
//! verifier, and corpus I/O (PNG + layout JSON + a JSON-lines manifest).

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::iou;
use crate::layout::{rasterize, BBox, Instance, LayoutSpec};
use crate::{Error, Result};

/// Canvas edge, pixels.
pub const IMG_SIZE: usize = 64;
/// Height of one stripe band, pixels.
pub const BAND_PX: usize = 4;
/// A crop matches a solid color when at least this fraction of its pixels
/// classify to that color.
pub const DOMINANT_MASS: f64 = 0.60;
/// Each stripe color must hold at least this fraction of the crop.
pub const STRIPE_MASS: f64 = 0.25;
/// Corner-occupancy ratio separating squares (above) from circles (below).
pub const CORNER_THRESHOLD: f64 = 0.5;
/// Minimum row-dominance alternations for a striped verdict.
pub const MIN_ALTERNATIONS: usize = 3;

/// The six instance colors: RGB cube corners, maximally separated so
/// nearest-anchor classification is unambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 6] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Magenta,
        PaletteColor::Cyan,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PaletteColor::Red => [255, 0, 0],
            PaletteColor::Green => [0, 255, 0],
            PaletteColor::Blue => [0, 0, 255],
            PaletteColor::Yellow => [255, 255, 0],
            PaletteColor::Magenta => [255, 0, 255],
            PaletteColor::Cyan => [0, 255, 255],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Magenta => "magenta",
            PaletteColor::Cyan => "cyan",
        }
    }

    pub fn from_name(name: &str) -> Option<PaletteColor> {
        PaletteColor::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Background tones, deliberately far from every palette color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Background {
    Black,
    Gray,
    White,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Black, Background::Gray, Background::White];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [10, 10, 10],
            Background::Gray => [128, 128, 128],
            Background::White => [245, 245, 245],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::Gray => "gray",
            Background::White => "white",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
    StripedSquare,
}

/// One shape in a scene. `stripe_color` is present exactly for
/// `StripedSquare` and always differs from the primary color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub shape: ShapeKind,
    pub color: PaletteColor,
    pub stripe_color: Option<PaletteColor>,
    pub bbox: BBox,
}

/// Ground-truth scene: what the renderer paints, in paint order (later
/// instances over earlier ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub instances: Vec<SceneInstance>,
    pub background: Background,
    pub seed: u64,
}

impl ShapeScene {
    /// Structural invariants: 1-4 instances, stripe colors well-formed,
    /// pairwise IoU capped at 0.3.
    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() || self.instances.len() > 4 {
            return Err(Error::Validation(format!(
                "scene has {} instances, expected 1-4",
                self.instances.len()
            )));
        }
        for inst in &self.instances {
            match (inst.shape, inst.stripe_color) {
                (ShapeKind::StripedSquare, None) => {
                    return Err(Error::Validation("striped square without a stripe color".into()))
                }
                (ShapeKind::StripedSquare, Some(s)) if s == inst.color => {
                    return Err(Error::Validation("stripe color equals primary color".into()))
                }
                (ShapeKind::Square | ShapeKind::Circle, Some(_)) => {
                    return Err(Error::Validation("solid shape carries a stripe color".into()))
                }
                _ => {}
            }
        }
        for i in 0..self.instances.len() {
            for j in i + 1..self.instances.len() {
                let o = iou(&self.instances[i].bbox, &self.instances[j].bbox);
                if o > 0.3 + 1e-12 {
                    return Err(Error::Validation(format!(
                        "instances {i} and {j} overlap at IoU {o:.3} > 0.3"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A scene with its render and the layout handed to the model. Layout boxes
/// equal scene boxes exactly; descriptions come from the template.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub layout: LayoutSpec,
    pub scene: ShapeScene,
}

/// Corpus-generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_samples: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Pairwise box overlap cap. 0 enforces full disjointness with a 2-pixel
    /// gap, which is what keeps the crop verifier exact on clean renders;
    /// anything above 0 permits occlusion and is for stress experiments only.
    pub max_iou: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            n_samples: 200,
            min_instances: 1,
            max_instances: 3,
            max_iou: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Validation("n_samples must be >= 1".into()));
        }
        if self.min_instances == 0
            || self.min_instances > self.max_instances
            || self.max_instances > 4
        {
            return Err(Error::Validation(format!(
                "instance counts {}..{} outside 1..=4",
                self.min_instances, self.max_instances
            )));
        }
        if !(0.0..=0.3).contains(&self.max_iou) {
            return Err(Error::Validation(format!(
                "max_iou {} outside [0, 0.3]",
                self.max_iou
            )));
        }
        Ok(())
    }
}

const MARGIN: f64 = 0.04;
const BOX_LO: f64 = 0.24;
const STRIPED_LO_H: f64 = 0.30;
const MAX_ATTEMPTS: usize = 1000;
const MAX_SCENE_RESTARTS: usize = 64;

/// Deterministically generate one scene from a seed: rejection-sample boxes
/// until the separation constraint holds, at most 1000 attempts per box.
/// If a box cannot be placed the whole arrangement re-rolls (the instance
/// count stays fixed), so one early oversized box cannot wedge a scene.
pub fn gen_scene(seed: u64, cfg: &GenConfig) -> Result<ShapeScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Background::ALL[rng.gen_range(0..Background::ALL.len())];
    let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    // Shrink boxes as the scene fills up. The 0.72 numerator keeps the
    // two-instance worst case solvable: even a maximal box dead-center
    // leaves a strip wider than BOX_LO plus margins and gap on some side.
    let hi = (0.72 / n as f64).clamp(0.26, 0.55);
    let gap = 2.0 / IMG_SIZE as f64;
    let mut instances: Vec<SceneInstance> = Vec::with_capacity(n);
    for restart in 0..MAX_SCENE_RESTARTS {
        instances.clear();
        'boxes: for _ in 0..n {
            let shape = match rng.gen_range(0..3) {
                0 => ShapeKind::Square,
                1 => ShapeKind::Circle,
                _ => ShapeKind::StripedSquare,
            };
            let color = PaletteColor::ALL[rng.gen_range(0..PaletteColor::ALL.len())];
            let stripe_color = if shape == ShapeKind::StripedSquare {
                let mut s = color;
                while s == color {
                    s = PaletteColor::ALL[rng.gen_range(0..PaletteColor::ALL.len())];
                }
                Some(s)
            } else {
                None
            };
            // stripes need enough height for >= 3 band alternations
            let (h_lo, h_hi) = if shape == ShapeKind::StripedSquare {
                (STRIPED_LO_H, hi.max(STRIPED_LO_H + 0.02))
            } else {
                (BOX_LO, hi)
            };
            for _ in 0..MAX_ATTEMPTS {
                let w = rng.gen_range(BOX_LO..=hi);
                let h = rng.gen_range(h_lo..=h_hi);
                let x = rng.gen_range(MARGIN..=1.0 - MARGIN - w);
                let y = rng.gen_range(MARGIN..=1.0 - MARGIN - h);
                let bbox = BBox::new(x, y, w, h)?;
                let ok = instances.iter().all(|other| {
                    if cfg.max_iou == 0.0 {
                        let sep_x =
                            bbox.x1() + gap <= other.bbox.x || other.bbox.x1() + gap <= bbox.x;
                        let sep_y =
                            bbox.y1() + gap <= other.bbox.y || other.bbox.y1() + gap <= bbox.y;
                        sep_x || sep_y
                    } else {
                        iou(&bbox, &other.bbox) <= cfg.max_iou
                    }
                });
                if ok {
                    instances.push(SceneInstance {
                        shape,
                        color,
                        stripe_color,
                        bbox,
                    });
                    continue 'boxes;
                }
            }
            // this box was unplaceable: re-roll the whole arrangement
            break 'boxes;
        }
        if instances.len() == n {
            break;
        }
        if restart + 1 == MAX_SCENE_RESTARTS {
            return Err(Error::Validation(format!(
                "could not arrange {n} instances within {MAX_SCENE_RESTARTS} rerolls \
                 of {MAX_ATTEMPTS} attempts each"
            )));
        }
    }
    Ok(ShapeScene {
        instances,
        background,
        seed,
    })
}

/// Paint the scene onto a 64x64 canvas. Pixel membership follows the same
/// center rule the layout rasterizer uses, so rendered extents and region
/// masks agree cell for cell.
pub fn render(scene: &ShapeScene) -> RgbImage {
    let size = IMG_SIZE as u32;
    let bg = scene.background.rgb();
    let mut img = RgbImage::from_pixel(size, size, image::Rgb(bg));
    for inst in &scene.instances {
        paint_instance(&mut img, inst);
    }
    img
}

fn paint_instance(img: &mut RgbImage, inst: &SceneInstance) {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mask = rasterize(&inst.bbox, h, w).expect("valid bbox rasterizes");
    let rows: Vec<usize> = (0..h).filter(|&r| (0..w).any(|c| mask.covers(r, c))).collect();
    let row0 = *rows.first().expect("mask is never empty");
    let b = &inst.bbox;
    let (ecx, ecy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    for r in 0..h {
        for c in 0..w {
            if !mask.covers(r, c) {
                continue;
            }
            let rgb = match inst.shape {
                ShapeKind::Square => inst.color.rgb(),
                ShapeKind::StripedSquare => {
                    let band = (r - row0) / BAND_PX;
                    if band % 2 == 0 {
                        inst.color.rgb()
                    } else {
                        inst.stripe_color.expect("validated striped instance").rgb()
                    }
                }
                ShapeKind::Circle => {
                    // inscribed ellipse, tested at the pixel center
                    let px = (c as f64 + 0.5) / w as f64;
                    let py = (r as f64 + 0.5) / h as f64;
                    let dx = (px - ecx) / rx;
                    let dy = (py - ecy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        inst.color.rgb()
                    } else {
                        continue;
                    }
                }
            };
            img.put_pixel(c as u32, r as u32, image::Rgb(rgb));
        }
    }
}

pub(crate) fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Deterministic template description of one instance.
pub fn describe(inst: &SceneInstance) -> String {
    let color = inst.color.name();
    match inst.shape {
        ShapeKind::Square => format!("{} {color} square", article(color)),
        ShapeKind::Circle => format!("{} {color} circle", article(color)),
        ShapeKind::StripedSquare => {
            let stripe = inst.stripe_color.expect("validated striped instance").name();
            format!("{} {color} and {stripe} striped square", article(color))
        }
    }
}

/// Global caption for a scene.
pub fn scene_caption(scene: &ShapeScene) -> String {
    let n = scene.instances.len();
    format!(
        "{n} shape{} on a {} background",
        if n == 1 { "" } else { "s" },
        scene.background.name()
    )
}

/// The layout the model sees: scene boxes verbatim, template descriptions.
pub fn scene_layout(scene: &ShapeScene) -> LayoutSpec {
    LayoutSpec {
        caption: scene_caption(scene),
        instances: scene
            .instances
            .iter()
            .map(|inst| Instance {
                bbox: inst.bbox,
                desc: describe(inst),
            })
            .collect(),
    }
}

/// Generate, render, and annotate one sample.
pub fn render_sample(seed: u64, cfg: &GenConfig) -> Result<RenderedSample> {
    let scene = gen_scene(seed, cfg)?;
    let image = render(&scene);
    let layout = scene_layout(&scene);
    Ok(RenderedSample {
        image,
        layout,
        scene,
    })
}

/// What a description claims about its crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedDesc {
    pub shape: ShapeKind,
    pub color: PaletteColor,
    pub stripe: Option<PaletteColor>,
}

/// Parse a template description back into its claim. Anything outside the
/// grammar is a validation error, distinct from a false verdict.
pub fn parse_description(desc: &str) -> Result<ParsedDesc> {
    let words: Vec<&str> = desc.split_whitespace().collect();
    let bad = || Error::Validation(format!("description '{desc}' does not match the template"));
    match words.as_slice() {
        [art, color, shape] if *art == "a" || *art == "an" => {
            let color = PaletteColor::from_name(color).ok_or_else(bad)?;
            let shape = match *shape {
                "square" => ShapeKind::Square,
                "circle" => ShapeKind::Circle,
                _ => return Err(bad()),
            };
            Ok(ParsedDesc {
                shape,
                color,
                stripe: None,
            })
        }
        [art, color, "and", stripe, "striped", "square"] if *art == "a" || *art == "an" => {
            let color = PaletteColor::from_name(color).ok_or_else(bad)?;
            let stripe = PaletteColor::from_name(stripe).ok_or_else(bad)?;
            if stripe == color {
                return Err(bad());
            }
            Ok(ParsedDesc {
                shape: ShapeKind::StripedSquare,
                color,
                stripe: Some(stripe),
            })
        }
        _ => Err(bad()),
    }
}

/// Nearest-anchor class of one pixel: a palette color or a background tone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Color(PaletteColor),
    Bg(Background),
}

/// Classify a pixel by squared RGB distance over the 9 anchors.
pub fn classify_pixel(rgb: [u8; 3]) -> PixelClass {
    let dist = |anchor: [u8; 3]| -> i64 {
        (0..3)
            .map(|i| {
                let d = rgb[i] as i64 - anchor[i] as i64;
                d * d
            })
            .sum()
    };
    let mut best = PixelClass::Bg(Background::Black);
    let mut best_d = i64::MAX;
    for c in PaletteColor::ALL {
        let d = dist(c.rgb());
        if d < best_d {
            best_d = d;
            best = PixelClass::Color(c);
        }
    }
    for b in Background::ALL {
        let d = dist(b.rgb());
        if d < best_d {
            best_d = d;
            best = PixelClass::Bg(b);
        }
    }
    best
}

/// Deterministic stand-in for VLM crop checking: crop the box, classify
/// pixels against the palette, and test the description's claim.
///
/// Solid claims need the named color to hold >= 60% of the crop and the
/// corner-occupancy shape test to agree. Striped claims need both named
/// colors (>= 25% each, >= 60% combined) and >= 3 row-dominance alternations.
pub fn verify(image: &RgbImage, bbox: &BBox, desc: &str) -> Result<bool> {
    let claim = parse_description(desc)?;
    let (h, w) = (image.height() as usize, image.width() as usize);
    let mask = rasterize(bbox, h, w)?;
    let mut total = 0usize;
    let mut counts: Vec<(PixelClass, usize)> = Vec::new();
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
    let mut row_classes: Vec<Vec<PixelClass>> = vec![Vec::new(); h];
    for r in 0..h {
        for c in 0..w {
            if !mask.covers(r, c) {
                continue;
            }
            total += 1;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            let class = classify_pixel(image.get_pixel(c as u32, r as u32).0);
            row_classes[r].push(class);
            match counts.iter_mut().find(|(k, _)| *k == class) {
                Some((_, n)) => *n += 1,
                None => counts.push((class, 1)),
            }
        }
    }
    debug_assert!(total > 0, "rasterize never yields an empty mask");
    let mass = |class: PixelClass| -> f64 {
        counts
            .iter()
            .find(|(k, _)| *k == class)
            .map_or(0.0, |(_, n)| *n as f64)
            / total as f64
    };

    let color_ok = match claim.stripe {
        None => mass(PixelClass::Color(claim.color)) >= DOMINANT_MASS,
        Some(stripe) => {
            let m1 = mass(PixelClass::Color(claim.color));
            let m2 = mass(PixelClass::Color(stripe));
            let alternations = row_alternations(&row_classes, claim.color, stripe);
            m1 >= STRIPE_MASS
                && m2 >= STRIPE_MASS
                && m1 + m2 >= DOMINANT_MASS
                && alternations >= MIN_ALTERNATIONS
        }
    };
    if !color_ok {
        return Ok(false);
    }

    // shape: how much of the crop's corners the claimed colors occupy
    let crop_h = r1 - r0 + 1;
    let crop_w = c1 - c0 + 1;
    let side = ((0.2 * crop_h.min(crop_w) as f64).floor() as usize).max(1);
    let mut corner_total = 0usize;
    let mut corner_hit = 0usize;
    let is_claimed = |class: PixelClass| match class {
        PixelClass::Color(c) => c == claim.color || claim.stripe == Some(c),
        PixelClass::Bg(_) => false,
    };
    for (corner_r, corner_c) in [
        (r0, c0),
        (r0, c1 + 1 - side),
        (r1 + 1 - side, c0),
        (r1 + 1 - side, c1 + 1 - side),
    ] {
        for r in corner_r..corner_r + side {
            for c in corner_c..corner_c + side {
                corner_total += 1;
                let class = classify_pixel(image.get_pixel(c as u32, r as u32).0);
                if is_claimed(class) {
                    corner_hit += 1;
                }
            }
        }
    }
    let occupancy = corner_hit as f64 / corner_total as f64;
    let looks_square = occupancy >= CORNER_THRESHOLD;
    let want_square = claim.shape != ShapeKind::Circle;
    Ok(looks_square == want_square)
}

/// Count changes of per-row dominance between the two stripe colors.
fn row_alternations(
    row_classes: &[Vec<PixelClass>],
    c1: PaletteColor,
    c2: PaletteColor,
) -> usize {
    let mut last: Option<PaletteColor> = None;
    let mut flips = 0;
    for row in row_classes {
        if row.is_empty() {
            continue;
        }
        let n1 = row.iter().filter(|&&k| k == PixelClass::Color(c1)).count();
        let n2 = row.iter().filter(|&&k| k == PixelClass::Color(c2)).count();
        if n1 == 0 && n2 == 0 {
            continue;
        }
        let dominant = if n1 >= n2 { c1 } else { c2 };
        if let Some(prev) = last {
            if prev != dominant {
                flips += 1;
            }
        }
        last = Some(dominant);
    }
    flips
}

/// One `manifest.jsonl` line; paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image_path: String,
    pub layout_path: String,
    pub seed: u64,
}

/// One corpus sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub image: RgbImage,
    pub layout: LayoutSpec,
    pub seed: u64,
}

/// Decorrelated per-sample seed: golden-ratio stride off the base seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

/// Write a corpus: `img_NNNN.png` + `layout_NNNN.json` per sample plus
/// `manifest.jsonl`. Pure function of the config.
pub fn write_corpus(dir: &Path, cfg: &GenConfig) -> Result<Vec<ManifestLine>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut lines = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let seed = sample_seed(cfg.seed, i);
        let sample = render_sample(seed, cfg)?;
        let image_path = format!("img_{i:04}.png");
        let layout_path = format!("layout_{i:04}.json");
        sample.image.save(dir.join(&image_path))?;
        fs::write(dir.join(&layout_path), sample.layout.to_json()?)?;
        lines.push(ManifestLine {
            image_path,
            layout_path,
            seed,
        });
    }
    let mut manifest = String::new();
    for line in &lines {
        manifest.push_str(&serde_json::to_string(line)?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(lines)
}

/// Load a corpus back through its manifest.
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusSample>> {
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut samples = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let entry: ManifestLine = serde_json::from_str(line)?;
        let image = image::open(dir.join(&entry.image_path))?.to_rgb8();
        let layout = LayoutSpec::from_json(&fs::read_to_string(dir.join(&entry.layout_path))?)?;
        samples.push(CorpusSample {
            image,
            layout,
            seed: entry.seed,
        });
    }
    Ok(samples)
}

/// Image to a flat `[h][w][rgb]` buffer in [0, 1].
pub fn image_to_pixels(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .flat_map(|p| p.0.into_iter().map(|v| v as f64 / 255.0))
        .collect()
}

/// Flat `[h][w][rgb]` buffer in [0, 1] back to an image (clamped, rounded).
pub fn pixels_to_image(px: &[f64], h: usize, w: usize) -> Result<RgbImage> {
    if px.len() != h * w * 3 {
        return Err(Error::Shape(format!(
            "pixel buffer has {} values, {h}x{w} RGB needs {}",
            px.len(),
            h * w * 3
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let at = (r * w + c) * 3;
            let rgb = [
                (px[at].clamp(0.0, 1.0) * 255.0).round() as u8,
                (px[at + 1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (px[at + 2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(c as u32, r as u32, image::Rgb(rgb));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(shape: ShapeKind, color: PaletteColor, bbox: BBox) -> SceneInstance {
        SceneInstance {
            shape,
            color,
            stripe_color: None,
            bbox,
        }
    }

    fn one_shape_scene(inst: SceneInstance, bg: Background) -> ShapeScene {
        ShapeScene {
            instances: vec![inst],
            background: bg,
            seed: 0,
        }
    }

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let cfg = GenConfig::default();
        for seed in 0..20 {
            assert_eq!(gen_scene(seed, &cfg).unwrap(), gen_scene(seed, &cfg).unwrap());
        }
    }

    #[test]
    fn generated_scenes_satisfy_their_invariants() {
        let cfg = GenConfig::default();
        for seed in 0..300 {
            let scene = gen_scene(seed, &cfg).unwrap();
            scene.validate().unwrap();
            let n = scene.instances.len();
            assert!((cfg.min_instances..=cfg.max_instances).contains(&n));
            // default config keeps boxes fully disjoint
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(iou(&scene.instances[i].bbox, &scene.instances[j].bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn overlap_cap_holds_across_a_large_corpus() {
        let cfg = GenConfig {
            max_iou: 0.3,
            max_instances: 4,
            ..GenConfig::default()
        };
        for seed in 0..10_000u64 {
            let scene = gen_scene(seed, &cfg).unwrap();
            for i in 0..scene.instances.len() {
                for j in i + 1..scene.instances.len() {
                    let o = iou(&scene.instances[i].bbox, &scene.instances[j].bbox);
                    assert!(o <= 0.3 + 1e-12, "seed {seed}: IoU {o}");
                }
            }
        }
    }

    #[test]
    fn single_instance_never_rejects() {
        let cfg = GenConfig {
            min_instances: 1,
            max_instances: 1,
            ..GenConfig::default()
        };
        for seed in 0..100 {
            let scene = gen_scene(seed, &cfg).unwrap();
            assert_eq!(scene.instances.len(), 1);
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = GenConfig::default();
        ok.validate().unwrap();
        assert!(GenConfig { n_samples: 0, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { min_instances: 0, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { min_instances: 3, max_instances: 2, ..ok.clone() }
            .validate()
            .is_err());
        assert!(GenConfig { max_instances: 5, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { max_iou: 0.5, ..ok }.validate().is_err());
    }

    #[test]
    fn red_square_fills_the_top_left_quadrant() {
        let scene = one_shape_scene(
            solid(
                ShapeKind::Square,
                PaletteColor::Red,
                BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            ),
            Background::Black,
        );
        let img = render(&scene);
        // the center rule puts columns/rows 0..=31 inside the box
        assert_eq!(img.get_pixel(10, 10).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(31, 31).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(32, 10).0, [10, 10, 10]);
        assert_eq!(img.get_pixel(40, 40).0, [10, 10, 10]);
    }

    #[test]
    fn circle_leaves_its_corners_unpainted() {
        let scene = one_shape_scene(
            solid(
                ShapeKind::Circle,
                PaletteColor::Blue,
                BBox::new(0.25, 0.25, 0.5, 0.5).unwrap(),
            ),
            Background::White,
        );
        let img = render(&scene);
        // box spans pixels 16..=47; center is blue, box corners stay white
        assert_eq!(img.get_pixel(32, 32).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(17, 17).0, [245, 245, 245]);
        assert_eq!(img.get_pixel(46, 17).0, [245, 245, 245]);
    }

    #[test]
    fn stripes_alternate_in_four_pixel_bands() {
        let inst = SceneInstance {
            shape: ShapeKind::StripedSquare,
            color: PaletteColor::Red,
            stripe_color: Some(PaletteColor::Blue),
            bbox: BBox::new(0.25, 0.25, 0.4, 0.4).unwrap(),
        };
        let scene = one_shape_scene(inst.clone(), Background::Black);
        let img = render(&scene);
        // independent pixel-row oracle: recompute every box pixel's color
        // from the band arithmetic and compare the full region
        let mask = rasterize(&inst.bbox, IMG_SIZE, IMG_SIZE).unwrap();
        let row0 = (0..IMG_SIZE)
            .find(|&r| (0..IMG_SIZE).any(|c| mask.covers(r, c)))
            .unwrap();
        let mut checked = 0;
        for r in 0..IMG_SIZE {
            for c in 0..IMG_SIZE {
                if !mask.covers(r, c) {
                    continue;
                }
                let want = if ((r - row0) / BAND_PX) % 2 == 0 {
                    PaletteColor::Red.rgb()
                } else {
                    PaletteColor::Blue.rgb()
                };
                assert_eq!(img.get_pixel(c as u32, r as u32).0, want, "pixel ({r},{c})");
                checked += 1;
            }
        }
        assert!(checked > 400, "oracle covered only {checked} pixels");
    }

    #[test]
    fn later_instances_paint_over_earlier_ones() {
        let a = solid(
            ShapeKind::Square,
            PaletteColor::Red,
            BBox::new(0.2, 0.2, 0.4, 0.4).unwrap(),
        );
        let b = solid(
            ShapeKind::Square,
            PaletteColor::Green,
            BBox::new(0.4, 0.4, 0.4, 0.4).unwrap(),
        );
        let scene = ShapeScene {
            instances: vec![a, b],
            background: Background::Black,
            seed: 0,
        };
        let img = render(&scene);
        // overlap region belongs to the later (green) instance
        assert_eq!(img.get_pixel(28, 28).0, [0, 255, 0]);
        assert_eq!(img.get_pixel(15, 15).0, [255, 0, 0]);
    }

    #[test]
    fn describe_matches_the_template() {
        let red_circle = solid(
            ShapeKind::Circle,
            PaletteColor::Red,
            BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
        );
        assert_eq!(describe(&red_circle), "a red circle");
        let striped = SceneInstance {
            shape: ShapeKind::StripedSquare,
            color: PaletteColor::Red,
            stripe_color: Some(PaletteColor::Blue),
            bbox: BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
        };
        assert_eq!(describe(&striped), "a red and blue striped square");
    }

    #[test]
    fn captions_follow_the_template() {
        let cfg = GenConfig::default();
        for seed in 0..30 {
            let scene = gen_scene(seed, &cfg).unwrap();
            let n = scene.instances.len();
            let want = if n == 1 {
                format!("1 shape on a {} background", scene.background.name())
            } else {
                format!("{n} shapes on a {} background", scene.background.name())
            };
            assert_eq!(scene_caption(&scene), want);
        }
    }

    #[test]
    fn parse_roundtrips_every_describable_instance() {
        let bbox = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        for color in PaletteColor::ALL {
            for shape in [ShapeKind::Square, ShapeKind::Circle] {
                let inst = solid(shape, color, bbox);
                let parsed = parse_description(&describe(&inst)).unwrap();
                assert_eq!(parsed, ParsedDesc { shape, color, stripe: None });
            }
            for stripe in PaletteColor::ALL {
                if stripe == color {
                    continue;
                }
                let inst = SceneInstance {
                    shape: ShapeKind::StripedSquare,
                    color,
                    stripe_color: Some(stripe),
                    bbox,
                };
                let parsed = parse_description(&describe(&inst)).unwrap();
                assert_eq!(parsed.shape, ShapeKind::StripedSquare);
                assert_eq!(parsed.color, color);
                assert_eq!(parsed.stripe, Some(stripe));
            }
        }
    }

    #[test]
    fn off_template_descriptions_are_errors_not_false() {
        for bad in [
            "",
            "red square",
            "a mauve square",
            "a red and blue square",
            "a red triangle",
            "a red and red striped square",
            "the red square",
            "a red circle please",
        ] {
            assert!(
                matches!(parse_description(bad), Err(crate::Error::Validation(_))),
                "'{bad}' should be a validation error"
            );
        }
    }

    #[test]
    fn classify_pixel_hits_exact_anchors() {
        for c in PaletteColor::ALL {
            assert_eq!(classify_pixel(c.rgb()), PixelClass::Color(c));
        }
        for b in Background::ALL {
            assert_eq!(classify_pixel(b.rgb()), PixelClass::Bg(b));
        }
        // mild noise stays with the nearest anchor
        assert_eq!(
            classify_pixel([240, 20, 15]),
            PixelClass::Color(PaletteColor::Red)
        );
        assert_eq!(classify_pixel([120, 130, 126]), PixelClass::Bg(Background::Gray));
    }

    #[test]
    fn verifier_is_self_consistent_on_a_thousand_clean_crops() {
        let cfg = GenConfig {
            max_instances: 3,
            ..GenConfig::default()
        };
        let mut crops = 0;
        let mut seed = 0u64;
        while crops < 1000 {
            let sample = render_sample(seed, &cfg).unwrap();
            for inst in &sample.layout.instances {
                let ok = verify(&sample.image, &inst.bbox, &inst.desc).unwrap();
                assert!(ok, "seed {seed}: '{}' failed on its own render", inst.desc);
                crops += 1;
            }
            seed += 1;
        }
    }

    #[test]
    fn verifier_discriminates_colors_and_shapes() {
        let cfg = GenConfig::default();
        for seed in 100..140 {
            let sample = render_sample(seed, &cfg).unwrap();
            for (inst, scene_inst) in sample.layout.instances.iter().zip(&sample.scene.instances) {
                // swap the primary color word for a different palette color
                let wrong_color = PaletteColor::ALL
                    .into_iter()
                    .find(|c| *c != scene_inst.color && Some(*c) != scene_inst.stripe_color)
                    .unwrap();
                let lied = inst
                    .desc
                    .replacen(scene_inst.color.name(), wrong_color.name(), 1);
                assert!(
                    !verify(&sample.image, &inst.bbox, &lied).unwrap(),
                    "seed {seed}: '{lied}' accepted over a {} render",
                    inst.desc
                );
                // swap the shape word
                if scene_inst.shape != ShapeKind::StripedSquare {
                    let (from, to) = match scene_inst.shape {
                        ShapeKind::Square => ("square", "circle"),
                        _ => ("circle", "square"),
                    };
                    let lied = inst.desc.replacen(from, to, 1);
                    assert!(
                        !verify(&sample.image, &inst.bbox, &lied).unwrap(),
                        "seed {seed}: '{lied}' accepted over a {} render",
                        inst.desc
                    );
                }
            }
        }
    }

    #[test]
    fn layout_boxes_equal_scene_boxes() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let sample = render_sample(seed, &cfg).unwrap();
            assert_eq!(sample.layout.instances.len(), sample.scene.instances.len());
            for (li, si) in sample.layout.instances.iter().zip(&sample.scene.instances) {
                assert_eq!(li.bbox, si.bbox);
            }
            sample.layout.validate(4).unwrap();
        }
    }

    #[test]
    fn corpus_roundtrips_and_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_samples: 4,
            ..GenConfig::default()
        };
        let lines = write_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(lines.len(), 4);
        let manifest_text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest_text.lines().count(), 4);

        let samples = read_corpus(dir.path()).unwrap();
        assert_eq!(samples.len(), 4);
        for (i, s) in samples.iter().enumerate() {
            let expect = render_sample(lines[i].seed, &cfg).unwrap();
            assert_eq!(s.layout, expect.layout);
            assert_eq!(s.image.as_raw(), expect.image.as_raw());
        }

        // a second write under the same config is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        write_corpus(dir2.path(), &cfg).unwrap();
        for name in ["img_0000.png", "layout_0000.json", "manifest.jsonl"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn pixel_buffer_roundtrips_exactly() {
        let sample = render_sample(3, &GenConfig::default()).unwrap();
        let px = image_to_pixels(&sample.image);
        assert_eq!(px.len(), IMG_SIZE * IMG_SIZE * 3);
        let back = pixels_to_image(&px, IMG_SIZE, IMG_SIZE).unwrap();
        assert_eq!(back.as_raw(), sample.image.as_raw());
        assert!(pixels_to_image(&px[..10], 64, 64).is_err());
    }

    #[test]
    fn scene_validation_catches_malformed_scenes() {
        let bbox = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let mut scene = one_shape_scene(solid(ShapeKind::Square, PaletteColor::Red, bbox), Background::Black);
        scene.validate().unwrap();
        scene.instances[0].stripe_color = Some(PaletteColor::Blue);
        assert!(scene.validate().is_err());
        scene.instances[0].shape = ShapeKind::StripedSquare;
        scene.instances[0].stripe_color = Some(PaletteColor::Red);
        assert!(scene.validate().is_err());
        scene.instances[0].stripe_color = None;
        assert!(scene.validate().is_err());
        scene.instances.clear();
        assert!(scene.validate().is_err());
        // heavy overlap trips the IoU cap
        let a = solid(ShapeKind::Square, PaletteColor::Red, BBox::new(0.1, 0.1, 0.5, 0.5).unwrap());
        let b = solid(
            ShapeKind::Square,
            PaletteColor::Blue,
            BBox::new(0.15, 0.15, 0.5, 0.5).unwrap(),
        );
        let scene = ShapeScene {
            instances: vec![a, b],
            background: Background::Gray,
            seed: 0,
        };
        assert!(scene.validate().is_err());
    }
}
