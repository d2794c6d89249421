//! Deterministic rasterizer for micro-markup documents.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::grammar::Node;
use super::MarkupDoc;

pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 128;
pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const LEFT_MARGIN: usize = 2;
pub const CENTER_ROW: i64 = 16;
/// Vertical shift of superscripts (up) and subscripts (down).
pub const SCRIPT_SHIFT: i64 = 4;
/// Distance from the fraction bar to the centre row of numerator/denominator.
pub const FRAC_SHIFT: i64 = 5;

const FONT_SRC: &str = include_str!("../../data/font5x7.txt");

type Glyph = [[bool; GLYPH_W]; GLYPH_H];

fn font() -> &'static HashMap<char, Glyph> {
    static FONT: OnceLock<HashMap<char, Glyph>> = OnceLock::new();
    FONT.get_or_init(|| {
        let mut map = HashMap::new();
        let mut lines = FONT_SRC.lines().filter(|l| !l.starts_with("# ") && !l.trim().is_empty());
        while let Some(header) = lines.next() {
            let c = header.strip_prefix(": ").and_then(|s| s.chars().next()).expect("glyph header");
            let mut g = [[false; GLYPH_W]; GLYPH_H];
            for row in g.iter_mut() {
                let line = lines.next().expect("glyph row");
                for (cell, ch) in row.iter_mut().zip(line.chars()) {
                    *cell = ch == '#';
                }
            }
            map.insert(c, g);
        }
        map
    })
}

/// Number of ink cells in the font glyph for `c`.
pub fn glyph_ink(c: char) -> usize {
    font().get(&c).map_or(0, |g| g.iter().flatten().filter(|&&b| b).count())
}

/// A single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl RenderedImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count");
        Self { height, width, pixels }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Count of pixels with any ink.
    pub fn ink_pixels(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }

    /// Total ink mass.
    pub fn ink_mass(&self) -> f64 {
        self.pixels.iter().sum()
    }

    fn set(&mut self, y: i64, x: i64) {
        if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
            let w = self.width;
            self.pixels[y as usize * w + x as usize] = 1.0;
        }
    }
}

/// Ink width of a laid-out sequence (no trailing gap).
fn seq_width(nodes: &[Node]) -> i64 {
    let advance: i64 = nodes.iter().map(node_advance).sum();
    (advance - 1).max(0)
}

fn node_advance(n: &Node) -> i64 {
    match n {
        Node::Glyph(_) => GLYPH_W as i64 + 1,
        Node::Script { body, .. } => GLYPH_W as i64 + 1 + seq_width(body) + 1,
        Node::Frac { num, den } => seq_width(num).max(seq_width(den)) + 1,
    }
}

/// Horizontal extent in pixels a document occupies, margin included.
pub fn layout_width(nodes: &[Node]) -> usize {
    LEFT_MARGIN + seq_width(nodes) as usize
}

fn draw_glyph(img: &mut RenderedImage, c: char, x: i64, center: i64) {
    let Some(g) = font().get(&c) else { return };
    let top = center - (GLYPH_H as i64 / 2);
    for (r, row) in g.iter().enumerate() {
        for (col, &on) in row.iter().enumerate() {
            if on {
                img.set(top + r as i64, x + col as i64);
            }
        }
    }
}

fn draw_seq(img: &mut RenderedImage, nodes: &[Node], mut x: i64, center: i64) {
    for n in nodes {
        match n {
            Node::Glyph(c) => draw_glyph(img, *c, x, center),
            Node::Script { base, raised, body } => {
                draw_glyph(img, *base, x, center);
                let shift = if *raised { -SCRIPT_SHIFT } else { SCRIPT_SHIFT };
                draw_seq(img, body, x + GLYPH_W as i64 + 1, center + shift);
            }
            Node::Frac { num, den } => {
                let (wn, wd) = (seq_width(num), seq_width(den));
                let w = wn.max(wd);
                for dx in 0..w {
                    img.set(center, x + dx);
                }
                draw_seq(img, num, x + (w - wn) / 2, center - FRAC_SHIFT);
                draw_seq(img, den, x + (w - wd) / 2, center + FRAC_SHIFT);
            }
        }
        x += node_advance(n);
    }
}

/// Rasterizes a document into a 32×128 binary image. Content past the
/// image bounds is clipped.
pub fn render(doc: &MarkupDoc) -> RenderedImage {
    let mut img = RenderedImage::blank(IMAGE_HEIGHT, IMAGE_WIDTH);
    draw_seq(&mut img, doc.layout(), LEFT_MARGIN as i64, CENTER_ROW);
    img
}
