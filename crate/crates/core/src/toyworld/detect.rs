//! Programmatic image oracles: attribute detectors, the alignment reward, and
//! the subject-fidelity feature map.
//!
//! Glyph statistics start from a per-pixel saliency inside the glyph area:
//! `s = ramp(‖p - bg‖∞)`, where `bg` is the mean color of the background
//! strips flanking the area. From there:
//!
//! * class nouns: saliency-weighted share of pixels within `pixel_color`
//!   distance of the class color, ignoring stripe-colored pixels;
//! * `triangular`: correlation of the centroid-centered saliency crop with the
//!   canonical triangle's crop;
//! * `tall`: ratio of vertical to horizontal second moments of the saliency;
//! * `striped`: saliency-weighted share of stripe-colored pixels;
//! * contexts: distance of a region's mean color from the context color.
//!
//! Glyph statistics are attenuated when the salient mass is below `min_mass`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::vocab::{PromptTokens, Token};

use super::{ball_pixels, max_dist, pen_pixels, World, WorldManifest};

/// One score in `[0, 1]` per attribute token, in [`Token::ATTRIBUTES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector(Vec<f64>);

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != Token::ATTRIBUTES.len() {
            return Err(Error::shape(Token::ATTRIBUTES.len(), values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "attribute scores outside [0, 1]: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, token: Token) -> Option<f64> {
        token.attribute_index().map(|i| self.0[i])
    }

    pub fn cosine(&self, other: &AttributeVector) -> f64 {
        cosine(&self.0, &other.0)
    }
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Linear map of `x` onto `[0, 1]` with 0 at `zero_at` and 1 at `full_at`.
pub fn ramp(x: f64, zero_at: f64, full_at: f64) -> f64 {
    ((x - zero_at) / (full_at - zero_at)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub(crate) struct GlyphPixel {
    row: usize,
    col: usize,
    saliency: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct Analysis {
    glyph: Vec<GlyphPixel>,
    mass: f64,
}

pub(crate) fn analyze(m: &WorldManifest, img: &Image) -> Analysis {
    let r = &m.regions;
    let mut bg = [0.0; 3];
    let mut n = 0.0;
    for row in r.glyph_rows.0..=r.glyph_rows.1 {
        for &col in &r.side_cols {
            for (b, v) in bg.iter_mut().zip(img.pixel(row, col)) {
                *b += v;
            }
            n += 1.0;
        }
    }
    bg.iter_mut().for_each(|b| *b /= n);
    let (lo, hi) = m.detectors.saliency;
    let mut glyph = Vec::new();
    let mut mass = 0.0;
    for row in r.glyph_rows.0..=r.glyph_rows.1 {
        for col in r.glyph_cols.0..=r.glyph_cols.1 {
            let p = img.pixel(row, col);
            let color = [p[0], p[1], p[2]];
            let saliency = ramp(max_dist(&color, &bg), lo, hi);
            mass += saliency;
            glyph.push(GlyphPixel {
                row,
                col,
                saliency,
                color,
            });
        }
    }
    Analysis { glyph, mass }
}

fn mass_factor(m: &WorldManifest, a: &Analysis) -> f64 {
    (a.mass / m.detectors.min_mass).min(1.0)
}

/// Saliency-weighted centroid, rounded to the pixel grid.
fn centroid(a: &Analysis) -> Option<(i64, i64)> {
    if a.mass <= 0.0 {
        return None;
    }
    let (mut y, mut x) = (0.0, 0.0);
    for p in &a.glyph {
        y += p.saliency * p.row as f64;
        x += p.saliency * p.col as f64;
    }
    Some(((y / a.mass).round() as i64, (x / a.mass).round() as i64))
}

/// Centroid-centered crop of `value(pixel)` with `k` entries per pixel;
/// positions outside the glyph area contribute zeros.
fn crop<const K: usize>(
    m: &WorldManifest,
    a: &Analysis,
    value: impl Fn(&GlyphPixel) -> [f64; K],
) -> Vec<f64> {
    let side = m.detectors.crop;
    let mut out = vec![0.0; side * side * K];
    let Some((cy, cx)) = centroid(a) else {
        return out;
    };
    let half = (side / 2) as i64;
    for p in &a.glyph {
        let (u, v) = (p.row as i64 - cy + half, p.col as i64 - cx + half);
        if (0..side as i64).contains(&u) && (0..side as i64).contains(&v) {
            let at = (u as usize * side + v as usize) * K;
            out[at..at + K].copy_from_slice(&value(p));
        }
    }
    out
}

pub(crate) fn saliency_crop(m: &WorldManifest, a: &Analysis) -> Vec<f64> {
    crop(m, a, |p| [p.saliency])
}

/// Zero mean, unit norm; the zero vector stays zero.
pub(crate) fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn color_membership(m: &WorldManifest, color: &[f64], target: &[f64]) -> f64 {
    let (full, zero) = m.detectors.pixel_color;
    ramp(max_dist(color, target), zero, full)
}

fn class_score(m: &WorldManifest, a: &Analysis, class: Token) -> f64 {
    let target = m.class(class).expect("class has a definition").color;
    let (mut hit, mut body) = (0.0, 0.0);
    for p in &a.glyph {
        let stripe = color_membership(m, &p.color, &m.palette.stripe);
        hit += p.saliency * color_membership(m, &p.color, &target);
        body += p.saliency * (1.0 - stripe);
    }
    (hit / body.max(m.detectors.min_mass)).clamp(0.0, 1.0)
}

fn triangular_score(world: &World, a: &Analysis) -> f64 {
    let m = &world.manifest;
    let corr: f64 = normalized(saliency_crop(m, a))
        .iter()
        .zip(&world.triangle_template)
        .map(|(x, y)| x * y)
        .sum();
    let (lo, hi) = m.detectors.triangle;
    ramp(corr, lo, hi) * mass_factor(m, a)
}

fn tall_score(m: &WorldManifest, a: &Analysis) -> f64 {
    if a.mass <= 0.0 {
        return 0.0;
    }
    let (mut y, mut x, mut yy, mut xx) = (0.0, 0.0, 0.0, 0.0);
    for p in &a.glyph {
        let (r, c) = (p.row as f64, p.col as f64);
        y += p.saliency * r;
        x += p.saliency * c;
        yy += p.saliency * r * r;
        xx += p.saliency * c * c;
    }
    let var_y = (yy / a.mass - (y / a.mass).powi(2)).max(0.0);
    let var_x = (xx / a.mass - (x / a.mass).powi(2)).max(0.0);
    let ratio = if var_x > 1e-12 {
        var_y / var_x
    } else if var_y > 1e-12 {
        f64::INFINITY
    } else {
        0.0
    };
    let (lo, hi) = m.detectors.tall;
    ramp(ratio, lo, hi) * mass_factor(m, a)
}

fn striped_score(m: &WorldManifest, a: &Analysis) -> f64 {
    let stripe: f64 = a
        .glyph
        .iter()
        .map(|p| p.saliency * color_membership(m, &p.color, &m.palette.stripe))
        .sum();
    let (lo, hi) = m.detectors.striped;
    ramp(stripe / a.mass.max(m.detectors.min_mass), lo, hi)
}

fn region_score(m: &WorldManifest, img: &Image, pixels: &[(usize, usize)], target: &[f64]) -> f64 {
    let mut mean = [0.0; 3];
    for &(row, col) in pixels {
        for (acc, v) in mean.iter_mut().zip(img.pixel(row, col)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= pixels.len() as f64);
    let (full, zero) = m.detectors.region_color;
    ramp(max_dist(&mean, target), zero, full)
}

fn context_score(m: &WorldManifest, img: &Image, token: Token) -> f64 {
    let r = &m.regions;
    let p = &m.palette;
    let shape = m.image;
    match token {
        Token::Grass | Token::Snow => {
            let pixels: Vec<_> = (r.ground_rows.0..=r.ground_rows.1)
                .flat_map(|row| (0..shape.width).map(move |col| (row, col)))
                .collect();
            let target = if token == Token::Grass {
                p.grass
            } else {
                p.snow
            };
            region_score(m, img, &pixels, &target)
        }
        Token::Night => {
            let pixels: Vec<_> = (r.glyph_rows.0..=r.glyph_rows.1)
                .flat_map(|row| r.side_cols.iter().map(move |&col| (row, col)))
                .collect();
            region_score(m, img, &pixels, &p.night)
        }
        Token::Ball => region_score(m, img, &ball_pixels(r, shape), &p.ball),
        Token::Pens => region_score(m, img, &pen_pixels(r), &p.pens),
        _ => unreachable!("not a context token"),
    }
}

fn check_image(world: &World, image: &Image) {
    assert_eq!(
        image.shape(),
        world.manifest.image,
        "image shape does not match the world"
    );
}

/// Every detector on one image.
pub fn image_embed(world: &World, image: &Image) -> AttributeVector {
    check_image(world, image);
    let m = &world.manifest;
    let a = analyze(m, image);
    let values = Token::ATTRIBUTES
        .iter()
        .map(|&t| match t {
            Token::Plushie | Token::Cup | Token::Pot => class_score(m, &a, t),
            Token::Triangular => triangular_score(world, &a),
            Token::Striped => striped_score(m, &a),
            Token::Tall => tall_score(m, &a),
            _ => context_score(m, image, t),
        })
        .collect();
    AttributeVector(values)
}

/// Indicator of the prompt's attribute tokens.
pub fn text_embed(prompt: &PromptTokens) -> Result<AttributeVector> {
    let indices = attribute_indices(prompt)?;
    let mut v = vec![0.0; Token::ATTRIBUTES.len()];
    for i in indices {
        v[i] = 1.0;
    }
    Ok(AttributeVector(v))
}

fn attribute_indices(prompt: &PromptTokens) -> Result<Vec<usize>> {
    if prompt.is_null() {
        return Err(Error::Prompt("the null prompt has no attributes".into()));
    }
    let mut idx: Vec<usize> = prompt
        .attributes()
        .filter_map(|t| t.attribute_index())
        .collect();
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Err(Error::Prompt(format!("'{prompt}' names no attribute")));
    }
    Ok(idx)
}

/// Mean detector score over the prompt's attributes. The identifier is
/// ignored unless the world disables stripping, in which case it adds a zero.
pub fn reward(world: &World, image: &Image, prompt: &PromptTokens) -> Result<f64> {
    let idx = attribute_indices(prompt)?;
    let e = image_embed(world, image);
    let extra = usize::from(!world.strip_identifier && prompt.has_identifier());
    Ok(idx.iter().map(|&i| e.0[i]).sum::<f64>() / (idx.len() + extra) as f64)
}

/// Centroid-centered crop of saliency-weighted glyph colors, zero mean and
/// unit norm. All-background images map to the zero vector.
pub fn subject_features(world: &World, image: &Image) -> Vec<f64> {
    check_image(world, image);
    let m = &world.manifest;
    let a = analyze(m, image);
    let raw = crop(m, &a, |p| p.color.map(|c| p.saliency * c));
    normalized(raw)
}
