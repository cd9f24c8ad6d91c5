//! Every constant that defines the synthetic world, in one serializable record.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::Shape;
use crate::vocab::Token;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Disc,
    Square,
    Cross,
    Triangle,
}

impl GlyphShape {
    /// Whether offset `(dx, dy)` from the glyph center is inside a glyph of radius `r`.
    pub fn contains(self, dx: i32, dy: i32, r: i32) -> bool {
        match self {
            GlyphShape::Disc => dx * dx + dy * dy <= r * r,
            GlyphShape::Square => dx.abs() < r && dy.abs() < r,
            GlyphShape::Cross => {
                (dx.abs() <= 1 && dy.abs() <= r) || (dy.abs() <= 1 && dx.abs() <= r)
            }
            GlyphShape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub token: Token,
    pub shape: GlyphShape,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub neutral: Rgb,
    pub night: Rgb,
    pub grass: Rgb,
    pub snow: Rgb,
    pub ball: Rgb,
    pub pens: Rgb,
    pub stripe: Rgb,
}

/// Pixel regions. Row/column bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    pub glyph_rows: (usize, usize),
    pub glyph_cols: (usize, usize),
    /// Background probe strips left and right of the glyph area.
    pub side_cols: Vec<usize>,
    pub ground_rows: (usize, usize),
    pub ball_center: (f64, f64),
    pub ball_radius: f64,
    pub pen_rows: (usize, usize),
    pub pen_cols: Vec<usize>,
    pub glyph_center: (usize, usize),
    pub glyph_radius: usize,
    /// Horizontal glyph offsets used by the pretraining distribution and the references.
    pub offsets: Vec<i32>,
}

/// Detector constants. Every ramp maps a statistic linearly onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConstants {
    /// Saliency ramp on the max-channel distance from the estimated background.
    pub saliency: (f64, f64),
    /// Per-pixel color membership: full at the first distance, zero at the second.
    pub pixel_color: (f64, f64),
    /// Region-mean color match: full at the first distance, zero at the second.
    pub region_color: (f64, f64),
    /// Salient mass below which glyph statistics are attenuated.
    pub min_mass: f64,
    /// Side of the square subject crop.
    pub crop: usize,
    /// Triangle template correlation ramp.
    pub triangle: (f64, f64),
    /// Vertical/horizontal second-moment ratio ramp.
    pub tall: (f64, f64),
    /// Stripe-colored fraction ramp.
    pub striped: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareSubject {
    pub class: Token,
    pub shape: GlyphShape,
    pub color: Rgb,
    pub description: Token,
    pub reference_offsets: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub version: u32,
    pub image: Shape,
    pub palette: Palette,
    pub classes: Vec<ClassDef>,
    pub regions: Regions,
    pub detectors: DetectorConstants,
    pub subject: RareSubject,
    /// Probability of each modifier slot being empty during pretraining.
    pub pretrain_no_modifier: f64,
    pub pretrain_no_context: f64,
}

impl Default for WorldManifest {
    fn default() -> Self {
        Self {
            version: 1,
            image: Shape::new(16, 16, 3),
            palette: Palette {
                neutral: [0.0, 0.0, 0.0],
                night: [-0.7, -0.7, -0.4],
                grass: [-0.5, 0.6, -0.6],
                snow: [0.9, 0.9, 0.9],
                ball: [0.9, -0.6, -0.6],
                pens: [0.9, 0.8, -0.7],
                stripe: [1.0, 1.0, 1.0],
            },
            classes: vec![
                ClassDef {
                    token: Token::Plushie,
                    shape: GlyphShape::Disc,
                    color: [0.9, 0.2, -0.6],
                },
                ClassDef {
                    token: Token::Cup,
                    shape: GlyphShape::Square,
                    color: [-0.4, -0.2, 0.9],
                },
                ClassDef {
                    token: Token::Pot,
                    shape: GlyphShape::Cross,
                    color: [0.7, -0.7, 0.7],
                },
            ],
            regions: Regions {
                glyph_rows: (4, 10),
                glyph_cols: (2, 13),
                side_cols: vec![0, 1, 14, 15],
                ground_rows: (11, 15),
                ball_center: (1.5, 13.5),
                ball_radius: 2.0,
                pen_rows: (0, 3),
                pen_cols: vec![0, 2, 4],
                glyph_center: (7, 7),
                glyph_radius: 3,
                offsets: vec![-1, 0, 1],
            },
            detectors: DetectorConstants {
                saliency: (0.15, 0.5),
                pixel_color: (0.2, 0.8),
                region_color: (0.15, 0.5),
                min_mass: 6.0,
                crop: 9,
                triangle: (0.8, 0.95),
                tall: (1.8, 3.0),
                striped: (0.1, 0.3),
            },
            subject: RareSubject {
                class: Token::Plushie,
                shape: GlyphShape::Triangle,
                color: [0.9, 0.6, -0.2],
                description: Token::Triangular,
                reference_offsets: vec![-1, 0, 1],
            },
            pretrain_no_modifier: 0.25,
            pretrain_no_context: 1.0 / 6.0,
        }
    }
}

impl WorldManifest {
    pub fn class(&self, token: Token) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.token == token)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(bytes).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}
