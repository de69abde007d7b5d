//! Synthetic grounded question-answer samples: vocabulary, shapes, polygon
//! rasterization, generation and on-disk persistence.

mod generate;
mod io;
mod raster;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{BinaryGrid, GroundingMask, QuerySpan};
use crate::model::ImageGrid;

pub use generate::{generate_synthetic, GeneratorConfig};
pub use io::{read_dataset, write_dataset, IMAGES_FILE, MANIFEST_FILE, SAMPLES_FILE, VOCAB_FILE};
pub use raster::{point_on_boundary, rasterize_polygon, Point};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

const WORDS: &[&str] = &[
    PAD, BOS, EOS, SEP, "where", "is", "the", "how", "many", "there", "a", "square", "circle",
    "triangle", "yes", "no", "zero", "one", "two", "three", "top-left", "top-right",
    "bottom-left", "bottom-right",
];

/// Closed word-level vocabulary; whitespace tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        Vocabulary::from_words(WORDS.iter().map(|w| w.to_string()).collect())
            .expect("built-in vocabulary has unique words")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Data(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("token id {id} not in vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    /// Image channel that carries this shape.
    pub fn channel(self) -> usize {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Circle => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Where,
    HowMany,
    IsThere,
}

/// One shape instance with its clockwise outline in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub vertices: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: usize,
    pub image: ImageGrid,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub query_span: QuerySpan,
    /// Present iff the sample takes part in guidance.
    pub mask: Option<GroundingMask>,
    pub kind: QuestionKind,
    pub queried: ShapeKind,
    pub shapes: Vec<PlacedShape>,
}

impl GroundingSample {
    /// First answer token.
    pub fn answer(&self) -> usize {
        self.target[0]
    }

    pub fn is_guided(&self) -> bool {
        self.mask.is_some()
    }

    /// Outline of the first instance of the queried shape.
    pub fn polygon(&self) -> Option<&[Point]> {
        self.shapes
            .iter()
            .find(|s| s.kind == self.queried)
            .map(|s| s.vertices.as_slice())
    }

    /// Union of the footprints of every instance of the queried shape.
    pub fn footprint(&self) -> Result<BinaryGrid> {
        let size = [self.image.height(), self.image.width()];
        let mut grid = BinaryGrid::zeros(size[0], size[1]);
        for s in self.shapes.iter().filter(|s| s.kind == self.queried) {
            let fp = rasterize_polygon(&s.vertices, size)?;
            for (r, c) in (0..size[0]).flat_map(|r| (0..size[1]).map(move |c| (r, c))) {
                if fp.get(r, c) {
                    grid.set(r, c, true);
                }
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub guided_fraction: f64,
    pub guided_count: usize,
    /// File name of the vocabulary, relative to the dataset directory.
    pub vocabulary: String,
    pub grid: [usize; 2],
    pub image_size: [usize; 2],
    /// Visual-grid rows of blank padding at the top and at the bottom.
    pub pad_rows: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub samples: Vec<GroundingSample>,
}

impl Dataset {
    pub fn guided_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_guided()).count()
    }

    /// Visual-grid cells covered by padding.
    pub fn pad_region(&self) -> BinaryGrid {
        let [h, w] = self.manifest.grid;
        let mut grid = BinaryGrid::zeros(h, w);
        for r in (0..self.manifest.pad_rows).chain(h.saturating_sub(self.manifest.pad_rows)..h) {
            for c in 0..w {
                grid.set(r, c, true);
            }
        }
        grid
    }

    pub fn first_samples(&self, n: usize) -> Vec<&GroundingSample> {
        self.samples.iter().take(n).collect()
    }
}
