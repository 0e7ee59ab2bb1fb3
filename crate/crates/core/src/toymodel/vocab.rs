//! Fixed token vocabulary for toy captions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;

const TOKENS: [&str; 15] = [
    "<pad>", "<bos>", "<sep>", "circle", "square", "triangle", "cross", "red", "green", "blue",
    "yellow", "purple", "white", "solid", "striped",
];

pub const VOCAB_SIZE: usize = TOKENS.len();
/// Longest caption accepted by the denoiser.
pub const MAX_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Striped,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn token(self) -> usize {
        3 + self as usize
    }

    pub fn name(self) -> &'static str {
        TOKENS[self.token()]
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::White,
    ];

    pub fn token(self) -> usize {
        7 + self as usize
    }

    pub fn name(self) -> &'static str {
        TOKENS[self.token()]
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Purple => [160, 32, 240],
            Color::White => [255, 255, 255],
        }
    }

    /// Half-intensity variant used for stripe bands.
    pub fn dark_rgb(self) -> [u8; 3] {
        self.rgb().map(|c| c / 2)
    }
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Solid, Texture::Striped];

    pub fn token(self) -> usize {
        13 + self as usize
    }

    pub fn name(self) -> &'static str {
        TOKENS[self.token()]
    }
}

/// Token table. The ids are fixed; the table is stored with the weights so
/// a mismatched file is rejected at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            tokens: TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::TokenId(id))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.word(i).map(str::to_string)).collect()
    }
}

pub fn shape_of_token(id: usize) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.token() == id)
}

pub fn color_of_token(id: usize) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.token() == id)
}

pub fn texture_of_token(id: usize) -> Option<Texture> {
    Texture::ALL.into_iter().find(|t| t.token() == id)
}

/// Caption used for the unconditional branch of classifier-free guidance.
pub fn null_caption() -> Vec<usize> {
    vec![BOS, SEP]
}
