//! Image-shaped tensors.
//!
//! Rendered scenes and final samples live in `[-1, 1]`; intermediate diffusion
//! states use the same container without the range restriction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// H×W×C grid of reals, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.shape.channels]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, color: &[f64]) {
        let i = self.index(row, col, 0);
        self.data[i..i + self.shape.channels].copy_from_slice(color);
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Copy with every entry clamped to `[-1, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn scaled(&self, a: f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }
}

/// Plain-text dump of equally shaped images.
///
/// ```text
/// grid <count> <height> <width> <channels>
/// image 0
/// <height lines of width*channels space-separated values>
/// image 1
/// ...
/// ```
///
/// Values use the shortest decimal that parses back to the same `f64`.
/// Lines starting with `#` are comments.
pub fn write_grid_text<W: std::io::Write>(out: &mut W, images: &[Image]) -> Result<()> {
    let shape = grid_shape(images)?;
    writeln!(
        out,
        "grid {} {} {} {}",
        images.len(),
        shape.height,
        shape.width,
        shape.channels
    )?;
    let row_len = shape.width * shape.channels;
    for (i, img) in images.iter().enumerate() {
        writeln!(out, "image {i}")?;
        for row in img.data.chunks(row_len) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_grid_text(text: &str) -> Result<Vec<Image>> {
    let bad = |msg: &str| Error::Parameter(format!("image grid: {msg}"));
    let mut lines = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file"))?
        .split_whitespace()
        .collect();
    if header.len() != 5 || header[0] != "grid" {
        return Err(bad("missing `grid` header"));
    }
    let dims: Vec<usize> = header[1..]
        .iter()
        .map(|v| v.parse().map_err(|_| bad("header sizes must be integers")))
        .collect::<Result<_>>()?;
    let shape = Shape::new(dims[1], dims[2], dims[3]);
    let mut images = Vec::with_capacity(dims[0]);
    for i in 0..dims[0] {
        if lines.next().map(str::trim) != Some(&format!("image {i}")) {
            return Err(bad(&format!("expected `image {i}`")));
        }
        let mut data = Vec::with_capacity(shape.len());
        for _ in 0..shape.height {
            let line = lines.next().ok_or_else(|| bad("truncated image"))?;
            for v in line.split_whitespace() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| bad(&format!("bad value {v:?}")))?,
                );
            }
        }
        images.push(Image::from_vec(shape, data)?);
    }
    if lines.next().is_some() {
        return Err(bad("trailing content"));
    }
    Ok(images)
}

/// Lossless 8-bit RGB raster of the images tiled `columns` wide, each pixel
/// drawn as a `scale`×`scale` block. Values are clamped to `[-1, 1]` first.
pub fn write_grid_png(
    path: &std::path::Path,
    images: &[Image],
    columns: usize,
    scale: usize,
) -> Result<()> {
    let shape = grid_shape(images)?;
    if shape.channels != 3 || columns == 0 || scale == 0 {
        return Err(Error::Parameter(
            "png grids need 3-channel images, columns > 0 and scale > 0".into(),
        ));
    }
    let rows = images.len().div_ceil(columns);
    let (cell_h, cell_w) = (shape.height * scale + 1, shape.width * scale + 1);
    let mut canvas = ::image::RgbImage::new((columns * cell_w) as u32, (rows * cell_h) as u32);
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / columns) * cell_h, (i % columns) * cell_w);
        for y in 0..shape.height * scale {
            for x in 0..shape.width * scale {
                let p = img.pixel(y / scale, x / scale);
                let rgb = [0, 1, 2].map(|c| ((p[c].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
                canvas.put_pixel((ox + x) as u32, (oy + y) as u32, ::image::Rgb(rgb));
            }
        }
    }
    canvas
        .save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn grid_shape(images: &[Image]) -> Result<Shape> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("image grid is empty".into()))?;
    for img in images {
        first.ensure_same_shape(img)?;
    }
    Ok(first.shape)
}
