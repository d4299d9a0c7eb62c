use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::GridMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    fn token(self) -> usize {
        8 + self as usize
    }

    fn plural_token(self) -> usize {
        11 + self as usize
    }

    /// Whether inner-block pixel `(u, v)` of an `m × m` box is inked.
    fn covers(self, u: usize, v: usize, m: usize) -> bool {
        let c = (m as f64 - 1.0) / 2.0;
        let (x, y) = (u as f64 - c, v as f64 - c);
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let r2 = x * x + y * y;
                r2 <= (m as f64 / 2.0).powi(2) && r2 >= (m as f64 / 4.0).powi(2)
            }
            // apex up, base on the last row
            Shape::Triangle => x.abs() <= (v as f64 + 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Magenta => [255, 0, 255],
            Color::Cyan => [0, 255, 255],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    ColorOf,
    CountOf,
    Exists,
}

/// Answer classes: six colors, counts 1..=3, then yes/no.
pub const ANSWER_CLASSES: usize = 11;
const COUNT_BASE: usize = 6;
const YES: usize = 9;
const NO: usize = 10;

const WORDS: [&str; 14] = [
    "what", "color", "is", "the", "how", "many", "there", "a", "circle", "square", "triangle",
    "circles", "squares", "triangles",
];
pub const VOCAB_SIZE: usize = WORDS.len();

pub fn vocabulary() -> &'static [&'static str] {
    &WORDS
}

pub fn answer_label(class: usize) -> &'static str {
    const LABELS: [&str; ANSWER_CLASSES] = [
        "red", "green", "blue", "yellow", "magenta", "cyan", "1", "2", "3", "yes", "no",
    ];
    LABELS.get(class).copied().unwrap_or("?")
}

/// One question about one rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    /// `height × width × 3`, row-major, values `k/255`.
    pub image: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: usize,
    /// Uniform over the cells of the queried objects; uniform over the whole
    /// grid when the queried object is absent.
    pub gt_attention: GridMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub grid: usize,
    /// Side of the square cell block one object occupies.
    pub object_cells: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            image_size: 28,
            grid: 7,
            object_cells: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub grid: usize,
    pub samples: Vec<VqaSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Leading `train_fraction` of samples for training, the rest held out.
    pub fn split(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.samples.len() as f64) * train_fraction).round() as usize;
        let cut = cut.min(self.samples.len());
        let part = |s: &[VqaSample]| Dataset {
            image_size: self.image_size,
            grid: self.grid,
            samples: s.to_vec(),
        };
        (part(&self.samples[..cut]), part(&self.samples[cut..]))
    }
}

struct Object {
    shape: Shape,
    color: Color,
    row: usize,
    col: usize,
}

/// Maximum number of objects the lattice can hold without overlap.
fn capacity(spec: &DatasetSpec) -> usize {
    (spec.grid / spec.object_cells).pow(2)
}

const MAX_OBJECTS: usize = 5;

fn validate(spec: &DatasetSpec) -> Result<()> {
    if spec.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if spec.grid == 0 || spec.object_cells == 0 || spec.image_size % spec.grid != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {} must be a positive multiple of grid {}",
            spec.image_size, spec.grid
        )));
    }
    let block = spec.image_size / spec.grid * spec.object_cells;
    if block < 5 {
        return Err(Error::InvalidArgument(format!(
            "objects of {block} px are too small to draw"
        )));
    }
    if capacity(spec) < MAX_OBJECTS {
        return Err(Error::InvalidArgument(format!(
            "a {g}×{g} grid holds {} objects of {c}×{c} cells, scenes need up to {MAX_OBJECTS}",
            capacity(spec),
            g = spec.grid,
            c = spec.object_cells
        )));
    }
    Ok(())
}

/// Deterministic dataset; sample `i` depends only on `(seed, i)`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    validate(spec)?;
    let samples = (0..spec.n_samples)
        .map(|i| generate_one(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: spec.image_size,
        grid: spec.grid,
        samples,
    })
}


fn generate_one(spec: &DatasetSpec, index: usize) -> Result<VqaSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(spec.seed, index as u64));
    let template = [Template::ColorOf, Template::CountOf, Template::Exists][index % 3];
    let round = index / 3;
    let target = Shape::ALL[rng.gen_range(0..3)];
    let others: Vec<Shape> = Shape::ALL.iter().copied().filter(|&s| s != target).collect();

    // (shape, color) of every object; queried objects first
    let mut wanted: Vec<(Shape, Color)> = Vec::new();
    let (question, answer, n_queried) = match template {
        Template::ColorOf => {
            let color = Color::ALL[round % 6];
            wanted.push((target, color));
            let distractor_colors: Vec<Color> =
                Color::ALL.iter().copied().filter(|&c| c != color).collect();
            for _ in 0..rng.gen_range(1..=2) {
                let s = others[rng.gen_range(0..2)];
                wanted.push((s, *distractor_colors.choose(&mut rng).unwrap()));
            }
            (vec![0, 1, 2, 3, target.token()], color as usize, 1)
        }
        Template::CountOf => {
            let count = 1 + round % 3;
            for _ in 0..count {
                wanted.push((target, random_color(&mut rng)));
            }
            for _ in 0..rng.gen_range(0..=2) {
                wanted.push((others[rng.gen_range(0..2)], random_color(&mut rng)));
            }
            (vec![4, 5, target.plural_token()], COUNT_BASE + count - 1, count)
        }
        Template::Exists => {
            let present = round % 2 == 0;
            let n_distract = if present {
                wanted.push((target, random_color(&mut rng)));
                rng.gen_range(0..=2)
            } else {
                rng.gen_range(1..=3)
            };
            for _ in 0..n_distract {
                wanted.push((others[rng.gen_range(0..2)], random_color(&mut rng)));
            }
            let answer = if present { YES } else { NO };
            (vec![2, 6, 7, target.token()], answer, usize::from(present))
        }
    };

    let objects = place(spec, &wanted, &mut rng)?;
    let image = render(spec, &objects, &mut rng);

    let g = spec.grid;
    let mut weights = vec![0.0; g * g];
    for o in &objects[..n_queried] {
        for r in o.row..o.row + spec.object_cells {
            for c in o.col..o.col + spec.object_cells {
                weights[r * g + c] = 1.0;
            }
        }
    }
    let (gt_attention, _) = GridMap::normalize(g, weights)?;
    Ok(VqaSample {
        image,
        question,
        answer,
        gt_attention,
    })
}

fn random_color(rng: &mut ChaCha8Rng) -> Color {
    Color::ALL[rng.gen_range(0..6)]
}

fn place(spec: &DatasetSpec, wanted: &[(Shape, Color)], rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let span = spec.grid - spec.object_cells + 1;
    let k = spec.object_cells;
    let mut objects: Vec<Object> = Vec::with_capacity(wanted.len());
    for &(shape, color) in wanted {
        let free: Vec<(usize, usize)> = (0..span)
            .flat_map(|r| (0..span).map(move |c| (r, c)))
            .filter(|&(r, c)| {
                objects
                    .iter()
                    .all(|o| r + k <= o.row || o.row + k <= r || c + k <= o.col || o.col + k <= c)
            })
            .collect();
        let &(row, col) = free.choose(rng).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "cannot place {} objects on a {}×{} grid",
                wanted.len(),
                spec.grid,
                spec.grid
            ))
        })?;
        objects.push(Object {
            shape,
            color,
            row,
            col,
        });
    }
    Ok(objects)
}

fn render(spec: &DatasetSpec, objects: &[Object], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = spec.image_size;
    let cell_px = size / spec.grid;
    let mut levels: Vec<u8> = (0..size * size * 3).map(|_| rng.gen_range(0..=40)).collect();
    let block = cell_px * spec.object_cells;
    let inner = block - 2;
    for o in objects {
        let (y0, x0) = (o.row * cell_px + 1, o.col * cell_px + 1);
        let rgb = o.color.rgb();
        for v in 0..inner {
            for u in 0..inner {
                if o.shape.covers(u, v, inner) {
                    let p = ((y0 + v) * size + x0 + u) * 3;
                    levels[p..p + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    levels.into_iter().map(|l| l as f64 / 255.0).collect()
}
