//! Synthetic paired RGB / IR scenes with modality-tagged questions.
//!
//! A scene is a `g x g` lattice of cells, one per encoder patch. Occupied
//! cells hold an object with a palette color and a heat intensity. The RGB
//! rendering shows the colors on a textured gray background; the IR rendering
//! shows heat only and is blind to color. Color questions therefore need RGB,
//! while counting works from either modality on clean inputs and from IR
//! alone once RGB is degraded.

use serde::{Deserialize, Serialize};

use crate::degrade::ImageBuf;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::vocab::{Vocab, EOS};

/// Object colors, indexed like [`super::vocab::COLOR_NAMES`].
const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.22, 0.20],
    [0.22, 0.75, 0.28],
    [0.22, 0.32, 0.88],
    [0.88, 0.82, 0.22],
    [0.20, 0.80, 0.82],
    [0.82, 0.25, 0.80],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub palette: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Ask counts as yes/no statements instead of open questions.
    pub binary_counts: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            patch: 8,
            palette: 4,
            min_objects: 0,
            max_objects: 5,
            binary_counts: false,
        }
    }
}

impl SceneConfig {
    pub fn cells_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            )));
        }
        let g = self.cells_per_side();
        if g < 2 {
            return Err(Error::InvalidArgument(format!(
                "scene grid must be at least 2x2, got {g}x{g}"
            )));
        }
        if self.patch < 3 {
            return Err(Error::InvalidArgument("patch must be at least 3 pixels".into()));
        }
        if !(2..=PALETTE.len()).contains(&self.palette) {
            return Err(Error::InvalidArgument(format!(
                "palette size must be in 2..={}, got {}",
                PALETTE.len(),
                self.palette
            )));
        }
        if self.max_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > 9
            || self.max_objects > g * g
        {
            return Err(Error::InvalidArgument(format!(
                "object range {}..={} must fit the grid and single-digit answers",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "IR")]
    Ir,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rgb => "RGB",
            Self::Ir => "IR",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGB" => Ok(Self::Rgb),
            "IR" => Ok(Self::Ir),
            _ => Err(Error::InvalidArgument(format!("unknown modality tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub occupied: bool,
    pub color: usize,
    pub heat: f64,
}

impl Cell {
    pub const EMPTY: Cell = Cell {
        occupied: false,
        color: 0,
        heat: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub side: usize,
    pub cells: Vec<Cell>,
    pub rgb: ImageBuf,
    pub ir: ImageBuf,
}

impl SyntheticScene {
    /// Renders a scene from explicit cell contents.
    pub fn from_cells(rng: &mut Rng, config: &SceneConfig, cells: Vec<Cell>) -> Result<Self> {
        config.validate()?;
        let side = config.cells_per_side();
        if cells.len() != side * side {
            return Err(Error::InvalidArgument(format!(
                "{} cells for a {side}x{side} scene",
                cells.len()
            )));
        }
        let (rgb, ir) = render(rng, config, &cells)?;
        Ok(Self { side, cells, rgb, ir })
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.occupied).count()
    }

    pub fn has_color(&self, color: usize) -> bool {
        self.cells.iter().any(|c| c.occupied && c.color == color)
    }
}

fn render(rng: &mut Rng, config: &SceneConfig, cells: &[Cell]) -> Result<(ImageBuf, ImageBuf)> {
    let s = config.image_size;
    let p = config.patch;
    let side = config.cells_per_side();
    let mut rgb = vec![0.0; s * s * 3];
    let mut ir = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let t = 0.2 + 0.06 * (rng.uniform() - 0.5);
            for c in 0..3 {
                rgb[(y * s + x) * 3 + c] = t;
            }
            ir[y * s + x] = 0.12 + 0.06 * (rng.uniform() - 0.5);
        }
    }
    for (idx, cell) in cells.iter().enumerate() {
        if !cell.occupied {
            continue;
        }
        if cell.color >= config.palette {
            return Err(Error::InvalidArgument(format!(
                "color {} outside palette of {}",
                cell.color, config.palette
            )));
        }
        let (cr, cc) = (idx / side, idx % side);
        let shade = 0.85 + 0.15 * rng.uniform();
        let col = PALETTE[cell.color];
        for y in cr * p + 1..(cr + 1) * p - 1 {
            for x in cc * p + 1..(cc + 1) * p - 1 {
                for c in 0..3 {
                    rgb[(y * s + x) * 3 + c] = col[c] * shade;
                }
                ir[y * s + x] = cell.heat;
            }
        }
    }
    let rgb = ImageBuf::new(s, s, 3, rgb)?.quantize_u8();
    let ir = ImageBuf::new(s, s, 1, ir)?.quantize_u8();
    Ok((rgb, ir))
}

/// A question / answer pair in token ids; answers end with the EOS marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub modality: Modality,
    pub binary: bool,
}

/// Draws a scene and its questions: one count question (IR-tagged) and one
/// color-presence question (RGB-tagged). The presence answer is a fair coin;
/// layouts that cannot produce the drawn answer are redrawn.
pub fn gen_scene(rng: &mut Rng, config: &SceneConfig) -> Result<(SyntheticScene, Vec<QaSample>)> {
    config.validate()?;
    let want_yes = rng.bernoulli(0.5);
    let cells = loop {
        let cells = draw_cells(rng, config);
        let mut seen = vec![false; config.palette];
        for c in cells.iter().filter(|c| c.occupied) {
            seen[c.color] = true;
        }
        if seen.contains(&want_yes) {
            break cells;
        }
    };
    let scene = SyntheticScene::from_cells(rng, config, cells)?;
    let qa = questions_with(rng, config, &scene, want_yes);
    Ok((scene, qa))
}

fn draw_cells(rng: &mut Rng, config: &SceneConfig) -> Vec<Cell> {
    let side = config.cells_per_side();
    let n_obj = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
    let mut order: Vec<usize> = (0..side * side).collect();
    rng.shuffle(&mut order);
    let mut cells = vec![Cell::EMPTY; side * side];
    for &idx in &order[..n_obj] {
        cells[idx] = Cell {
            occupied: true,
            color: rng.below(config.palette),
            heat: rng.uniform_range(0.55, 1.0),
        };
    }
    cells
}

/// Questions for an existing scene. The presence answer falls back to the
/// other polarity when the scene cannot support the drawn one.
pub fn questions_for(rng: &mut Rng, config: &SceneConfig, scene: &SyntheticScene) -> Vec<QaSample> {
    let want_yes = rng.bernoulli(0.5);
    questions_with(rng, config, scene, want_yes)
}

fn questions_with(rng: &mut Rng, config: &SceneConfig, scene: &SyntheticScene, want_yes: bool) -> Vec<QaSample> {
    let v = Vocab;
    let w = |s: &str| v.id(s).expect("template words are in the vocabulary");
    let count = scene.object_count();
    let mut out = Vec::with_capacity(2);

    if config.binary_counts {
        let claim_true = rng.bernoulli(0.5);
        let claimed = if claim_true {
            count
        } else {
            let mut k = rng.below(config.max_objects);
            if k >= count {
                k += 1;
            }
            k
        };
        out.push(QaSample {
            question: vec![w("is"), w("the"), w("object"), w("count"), v.digit(claimed)],
            answer: vec![v.yes_no(claimed == count), EOS],
            modality: Modality::Ir,
            binary: true,
        });
    } else {
        out.push(QaSample {
            question: vec![w("how"), w("many"), w("objects")],
            answer: vec![v.digit(count), EOS],
            modality: Modality::Ir,
            binary: false,
        });
    }

    let present: Vec<usize> = (0..config.palette).filter(|&c| scene.has_color(c)).collect();
    let absent: Vec<usize> = (0..config.palette).filter(|&c| !scene.has_color(c)).collect();
    let (pool, answer) = match (want_yes && !present.is_empty(), absent.is_empty()) {
        (true, _) | (false, true) => (&present, true),
        _ => (&absent, false),
    };
    let color = pool[rng.below(pool.len())];
    out.push(QaSample {
        question: vec![w("is"), w("any"), w("object"), v.color(color)],
        answer: vec![v.yes_no(answer), EOS],
        modality: Modality::Rgb,
        binary: true,
    });
    out
}
