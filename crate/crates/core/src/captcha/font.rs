//! Embedded 7×9 glyph atlas.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const GLYPH_WIDTH: usize = 7;
pub const GLYPH_HEIGHT: usize = 9;

const ATLAS: &str = include_str!("../../data/font7x9.txt");

/// Row-major ink mask, `GLYPH_HEIGHT × GLYPH_WIDTH`.
pub type Bitmap = [bool; GLYPH_WIDTH * GLYPH_HEIGHT];

fn parse(text: &str) -> HashMap<char, Bitmap> {
    let mut glyphs = HashMap::new();
    let mut lines = text.lines().filter(|l| !l.starts_with('#') || l.len() == GLYPH_WIDTH);
    while let Some(header) = lines.next() {
        let Some(rest) = header.strip_prefix("= ") else {
            panic!("font atlas: expected '= <char>', got {header:?}");
        };
        let mut chars = rest.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            panic!("font atlas: bad header {header:?}");
        };
        let mut bitmap = [false; GLYPH_WIDTH * GLYPH_HEIGHT];
        for row in 0..GLYPH_HEIGHT {
            let line = lines.next().unwrap_or_else(|| panic!("font atlas: glyph {c:?} truncated"));
            assert_eq!(line.len(), GLYPH_WIDTH, "font atlas: glyph {c:?} row {row}");
            for (col, cell) in line.bytes().enumerate() {
                bitmap[row * GLYPH_WIDTH + col] = cell == b'#';
            }
        }
        glyphs.insert(c, bitmap);
    }
    glyphs
}

fn atlas() -> &'static HashMap<char, Bitmap> {
    static GLYPHS: OnceLock<HashMap<char, Bitmap>> = OnceLock::new();
    GLYPHS.get_or_init(|| parse(ATLAS))
}

pub fn glyph(c: char) -> Option<&'static Bitmap> {
    atlas().get(&c)
}

/// Characters available in the atlas, sorted.
pub fn available() -> Vec<char> {
    let mut cs: Vec<char> = atlas().keys().copied().collect();
    cs.sort_unstable();
    cs
}
