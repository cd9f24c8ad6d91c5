//! A synthetic prompt-describable world.
//!
//! Scenes are a single colored glyph in a fixed central area plus at most one
//! context decoration in its own region. Every constant lives in
//! [`WorldManifest`]; the reward and embedding oracles in [`detect`] read the
//! same constants, so renders and detectors cannot drift apart.

pub mod detect;
mod manifest;

use rand::Rng as _;

pub use detect::AttributeVector;
pub use manifest::{
    ClassDef, DetectorConstants, GlyphShape, Palette, RareSubject, Regions, Rgb, WorldManifest,
};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::Rng;
use crate::vocab::{PromptTokens, Token, TokenKind};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub class: Token,
    pub shape: GlyphShape,
    pub color: Rgb,
    pub size: usize,
    /// Alternate glyph rows are painted in the stripe color.
    pub striped: bool,
    /// Glyph is compressed 2x horizontally.
    pub tall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub subject: SubjectSpec,
    pub context: Option<Token>,
    /// `(rows, cols)` offset of the glyph center from the default position.
    pub offset: (i32, i32),
}

#[derive(Debug, Clone)]
pub struct World {
    manifest: WorldManifest,
    /// Saliency crop of the canonical triangle, zero-mean and unit-norm.
    triangle_template: Vec<f64>,
    strip_identifier: bool,
}

impl World {
    pub fn new(manifest: WorldManifest) -> Result<Self> {
        validate_manifest(&manifest)?;
        let mut world = Self {
            manifest,
            triangle_template: Vec::new(),
            strip_identifier: true,
        };
        let mut subject = world.canonical_subject(Token::Plushie)?;
        subject.shape = GlyphShape::Triangle;
        let img = world.render_scene(&SceneSpec {
            subject,
            context: None,
            offset: (0, 0),
        })?;
        let a = detect::analyze(&world.manifest, &img);
        world.triangle_template = detect::normalized(detect::saliency_crop(&world.manifest, &a));
        Ok(world)
    }

    /// When disabled, the identifier counts toward the reward as an attribute
    /// no detector recognizes.
    pub fn with_identifier_stripping(mut self, strip: bool) -> Self {
        self.strip_identifier = strip;
        self
    }

    pub fn strips_identifier(&self) -> bool {
        self.strip_identifier
    }

    pub fn manifest(&self) -> &WorldManifest {
        &self.manifest
    }

    pub fn shape(&self) -> Shape {
        self.manifest.image
    }

    pub fn digest_hex(&self) -> String {
        self.manifest.digest_hex()
    }

    pub fn canonical_subject(&self, class: Token) -> Result<SubjectSpec> {
        let def = self
            .manifest
            .class(class)
            .ok_or_else(|| Error::Prompt(format!("{} is not a class noun", class.word())))?;
        Ok(SubjectSpec {
            class,
            shape: def.shape,
            color: def.color,
            size: self.manifest.regions.glyph_radius,
            striped: false,
            tall: false,
        })
    }

    /// The unique subject the personalization stage learns.
    pub fn rare_subject(&self) -> SubjectSpec {
        let s = &self.manifest.subject;
        SubjectSpec {
            class: s.class,
            shape: s.shape,
            color: s.color,
            size: self.manifest.regions.glyph_radius,
            striped: false,
            tall: false,
        }
    }

    /// Reference images of the rare subject on a plain background.
    pub fn reference_images(&self) -> Vec<Image> {
        self.manifest
            .subject
            .reference_offsets
            .iter()
            .map(|&dx| {
                self.render_scene(&SceneSpec {
                    subject: self.rare_subject(),
                    context: None,
                    offset: (0, dx),
                })
                .expect("reference offsets are validated with the manifest")
            })
            .collect()
    }

    fn check_subject(&self, s: &SubjectSpec) -> Result<()> {
        if s.class.kind() != TokenKind::Class {
            return Err(Error::Parameter(format!(
                "{} is not a class noun",
                s.class.word()
            )));
        }
        if s.size == 0 || s.color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(Error::Parameter(format!("invalid subject {s:?}")));
        }
        let p = &self.manifest.palette;
        for bg in [p.neutral, p.night] {
            if max_dist(&s.color, &bg) < 0.5 {
                return Err(Error::Parameter(format!(
                    "subject color {:?} is within 0.5 of background {bg:?}",
                    s.color
                )));
            }
        }
        Ok(())
    }

    /// Rasterize a scene: background, context decoration, then the glyph.
    pub fn render_scene(&self, spec: &SceneSpec) -> Result<Image> {
        self.check_subject(&spec.subject)?;
        let m = &self.manifest;
        let r = &m.regions;
        let p = &m.palette;
        let shape = m.image;
        let bg = if spec.context == Some(Token::Night) {
            p.night
        } else {
            p.neutral
        };
        let mut img = Image::zeros(shape);
        for row in 0..shape.height {
            for col in 0..shape.width {
                img.set_pixel(row, col, &bg);
            }
        }
        match spec.context {
            None | Some(Token::Night) => {}
            Some(Token::Grass) | Some(Token::Snow) => {
                let color = if spec.context == Some(Token::Grass) {
                    p.grass
                } else {
                    p.snow
                };
                for row in r.ground_rows.0..=r.ground_rows.1 {
                    for col in 0..shape.width {
                        img.set_pixel(row, col, &color);
                    }
                }
            }
            Some(Token::Ball) => {
                for (row, col) in ball_pixels(r, shape) {
                    img.set_pixel(row, col, &p.ball);
                }
            }
            Some(Token::Pens) => {
                for (row, col) in pen_pixels(r) {
                    img.set_pixel(row, col, &p.pens);
                }
            }
            Some(other) => {
                return Err(Error::Parameter(format!(
                    "{} is not a context",
                    other.word()
                )));
            }
        }
        for (row, col, stripe) in self.glyph_pixels(&spec.subject, spec.offset)? {
            let color = if stripe { p.stripe } else { spec.subject.color };
            img.set_pixel(row, col, &color);
        }
        Ok(img)
    }

    /// Pixels covered by the glyph, with whether each lies on a stripe row.
    fn glyph_pixels(
        &self,
        s: &SubjectSpec,
        offset: (i32, i32),
    ) -> Result<Vec<(usize, usize, bool)>> {
        let r = &self.manifest.regions;
        let size = s.size as i32;
        let cy = r.glyph_center.0 as i32 + offset.0;
        let cx = r.glyph_center.1 as i32 + offset.1;
        let (top, bottom) = (r.glyph_rows.0 as i32, r.glyph_rows.1 as i32);
        let (left, right) = (r.glyph_cols.0 as i32, r.glyph_cols.1 as i32);
        if cy - size < top || cy + size > bottom || cx - size < left || cx + size > right {
            return Err(Error::Parameter(format!(
                "glyph of size {size} at offset {offset:?} leaves the glyph area"
            )));
        }
        let mut out = Vec::new();
        for dy in -size..=size {
            for dx in -size..=size {
                let sx = if s.tall { 2 * dx } else { dx };
                if s.shape.contains(sx, dy, size) {
                    let stripe = s.striped && (dy + size) % 2 == 1;
                    out.push(((cy + dy) as usize, (cx + dx) as usize, stripe));
                }
            }
        }
        Ok(out)
    }

    /// Prompt that exactly describes a scene.
    pub fn scene_prompt(&self, spec: &SceneSpec) -> PromptTokens {
        let mut tokens = Vec::new();
        let canonical = self.manifest.class(spec.subject.class).map(|c| c.shape);
        if spec.subject.shape == GlyphShape::Triangle && canonical != Some(GlyphShape::Triangle) {
            tokens.push(Token::Triangular);
        }
        if spec.subject.striped {
            tokens.push(Token::Striped);
        }
        if spec.subject.tall {
            tokens.push(Token::Tall);
        }
        tokens.push(spec.subject.class);
        tokens.extend(spec.context);
        PromptTokens::new(tokens).expect("scene prompts are well formed")
    }

    /// A scene matching a prompt. The identifier selects the rare subject.
    pub fn scene_for_prompt(&self, prompt: &PromptTokens, offset: (i32, i32)) -> Result<SceneSpec> {
        let mut class = None;
        let mut context = None;
        let (mut triangular, mut striped, mut tall) = (false, false, false);
        for &t in prompt.tokens() {
            match t {
                Token::Null | Token::Identifier => {}
                Token::Plushie | Token::Cup | Token::Pot => {
                    if class.replace(t).is_some() {
                        return Err(Error::Prompt(format!("'{prompt}' names two classes")));
                    }
                }
                Token::Triangular => triangular = true,
                Token::Striped => striped = true,
                Token::Tall => tall = true,
                _ => {
                    if context.replace(t).is_some() {
                        return Err(Error::Prompt(format!("'{prompt}' names two contexts")));
                    }
                }
            }
        }
        let class = class.ok_or_else(|| Error::Prompt(format!("'{prompt}' names no class")))?;
        let mut subject = if prompt.has_identifier() && class == self.manifest.subject.class {
            self.rare_subject()
        } else {
            self.canonical_subject(class)?
        };
        if triangular {
            subject.shape = GlyphShape::Triangle;
        }
        subject.striped = striped;
        subject.tall = tall;
        Ok(SceneSpec {
            subject,
            context,
            offset,
        })
    }

    /// One scene from the pretraining distribution. Never the rare combination.
    pub fn sample_pretrain_scene(&self, rng: &mut Rng) -> SceneSpec {
        let m = &self.manifest;
        let class = Token::CLASSES[rng.gen_range(0..Token::CLASSES.len())];
        let mut subject = self
            .canonical_subject(class)
            .expect("class nouns have definitions");
        if !rng.gen_bool(m.pretrain_no_modifier) {
            let allowed: Vec<Token> = Token::MODIFIERS
                .iter()
                .copied()
                .filter(|&t| !(t == m.subject.description && class == m.subject.class))
                .collect();
            match allowed[rng.gen_range(0..allowed.len())] {
                Token::Triangular => subject.shape = GlyphShape::Triangle,
                Token::Striped => subject.striped = true,
                _ => subject.tall = true,
            }
        }
        let context = if rng.gen_bool(m.pretrain_no_context) {
            None
        } else {
            Some(Token::CONTEXTS[rng.gen_range(0..Token::CONTEXTS.len())])
        };
        let dx = m.regions.offsets[rng.gen_range(0..m.regions.offsets.len())];
        SceneSpec {
            subject,
            context,
            offset: (0, dx),
        }
    }

    pub fn sample_pretrain_example(&self, rng: &mut Rng) -> (Image, PromptTokens) {
        let spec = self.sample_pretrain_scene(rng);
        let img = self
            .render_scene(&spec)
            .expect("pretraining scenes are in bounds");
        (img, self.scene_prompt(&spec))
    }

    pub fn image_embed(&self, image: &Image) -> AttributeVector {
        detect::image_embed(self, image)
    }

    pub fn text_embed(&self, prompt: &PromptTokens) -> Result<AttributeVector> {
        detect::text_embed(prompt)
    }

    pub fn reward(&self, image: &Image, prompt: &PromptTokens) -> Result<f64> {
        detect::reward(self, image, prompt)
    }

    pub fn subject_features(&self, image: &Image) -> Vec<f64> {
        detect::subject_features(self, image)
    }
}

pub(crate) fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn ball_pixels(r: &Regions, shape: Shape) -> Vec<(usize, usize)> {
    let (cy, cx) = r.ball_center;
    let mut out = Vec::new();
    for row in 0..shape.height {
        for col in 0..shape.width {
            let (dy, dx) = (row as f64 - cy, col as f64 - cx);
            if dy * dy + dx * dx <= r.ball_radius * r.ball_radius {
                out.push((row, col));
            }
        }
    }
    out
}

pub(crate) fn pen_pixels(r: &Regions) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for row in r.pen_rows.0..=r.pen_rows.1 {
        for &col in &r.pen_cols {
            out.push((row, col));
        }
    }
    out
}

fn validate_manifest(m: &WorldManifest) -> Result<()> {
    let r = &m.regions;
    let s = m.image;
    let bad = |msg: &str| Err(Error::Config(format!("world manifest: {msg}")));
    if s.channels != 3 {
        return bad("images must have 3 channels");
    }
    if r.glyph_rows.1 >= s.height || r.glyph_cols.1 >= s.width || r.ground_rows.1 >= s.height {
        return bad("region outside the image");
    }
    if r.side_cols
        .iter()
        .any(|&c| c >= s.width || (r.glyph_cols.0..=r.glyph_cols.1).contains(&c))
    {
        return bad("background strips must lie outside the glyph area");
    }
    let glyph_rows = r.glyph_rows.0..=r.glyph_rows.1;
    if glyph_rows.contains(&r.ground_rows.0) || glyph_rows.contains(&r.pen_rows.1) {
        return bad("context regions overlap the glyph area");
    }
    if ball_pixels(r, s)
        .iter()
        .any(|(row, _)| glyph_rows.contains(row))
    {
        return bad("ball overlaps the glyph area");
    }
    for c in Token::CLASSES {
        if m.class(c).is_none() {
            return bad(&format!("no definition for class {}", c.word()));
        }
    }
    if m.class(m.subject.class).map(|c| c.shape) == Some(m.subject.shape) {
        return bad("rare subject must differ from its class's canonical shape");
    }
    let d = &m.detectors;
    if d.crop % 2 == 0 || d.min_mass <= 0.0 {
        return bad("crop must be odd and min_mass positive");
    }
    if !(0.0..=1.0).contains(&m.pretrain_no_modifier)
        || !(0.0..=1.0).contains(&m.pretrain_no_context)
    {
        return bad("pretraining probabilities must lie in [0, 1]");
    }
    let radius = r.glyph_radius as i32;
    for &dx in r.offsets.iter().chain(&m.subject.reference_offsets) {
        let cx = r.glyph_center.1 as i32 + dx;
        if cx - radius < r.glyph_cols.0 as i32 || cx + radius > r.glyph_cols.1 as i32 {
            return bad(&format!("offset {dx} leaves the glyph area"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
