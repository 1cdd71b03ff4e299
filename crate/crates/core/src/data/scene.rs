//! Scene records, rendering, and the question grammar.

use std::fmt;

use crate::encoders::ImageGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
}

/// Quadrant of the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    /// 8-bit RGB.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
        }
    }
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::UpperLeft,
        Position::UpperRight,
        Position::LowerLeft,
        Position::LowerRight,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Position::UpperLeft => "upper left",
            Position::UpperRight => "upper right",
            Position::LowerLeft => "lower left",
            Position::LowerRight => "lower right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// (row, column) of the quadrant.
    pub fn cell(self) -> (usize, usize) {
        (self.index() / 2, self.index() % 2)
    }
}

fn parse_word<T: Copy>(all: &[T], word: impl Fn(T) -> &'static str, s: &str) -> Option<T> {
    all.iter().copied().find(|&x| word(x) == s)
}

impl Shape {
    pub fn parse(s: &str) -> Option<Self> {
        parse_word(&Self::ALL, Self::word, s)
    }
}

impl Color {
    pub fn parse(s: &str) -> Option<Self> {
        parse_word(&Self::ALL, Self::word, s)
    }
}

impl Position {
    pub fn parse(s: &str) -> Option<Self> {
        parse_word(&Self::ALL, Self::phrase, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
}

/// Objects in distinct quadrants with distinct shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn at(&self, p: Position) -> Option<&Object> {
        self.objects.iter().find(|o| o.position == p)
    }

    pub fn find(&self, color: Color, shape: Shape) -> Option<&Object> {
        self.objects.iter().find(|o| o.color == color && o.shape == shape)
    }

    pub fn with_shape(&self, shape: Shape) -> Option<&Object> {
        self.objects.iter().find(|o| o.shape == shape)
    }

    /// Compact record: `color:shape:quadrant` joined by commas.
    pub fn encode(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{}:{}:{}", o.color.word(), o.shape.word(), o.position.index()))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn decode(s: &str) -> Option<Self> {
        let objects = s
            .split(',')
            .map(|part| {
                let mut it = part.split(':');
                let color = Color::parse(it.next()?)?;
                let shape = Shape::parse(it.next()?)?;
                let position = *Position::ALL.get(it.next()?.parse::<usize>().ok()?)?;
                it.next().is_none().then_some(Object { shape, color, position })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { objects })
    }

    /// Renders onto a dark background; `size` must be even.
    pub fn render(&self, size: usize) -> ImageGrid {
        let mut bytes = vec![20u8; size * size * 3];
        let q = size / 2;
        for o in &self.objects {
            let (row, col) = o.position.cell();
            let (oy, ox) = (row * q, col * q);
            let c = (q as f64 - 1.0) / 2.0;
            let half = 0.3 * q as f64;
            for y in 0..q {
                for x in 0..q {
                    let (dy, dx) = (y as f64 - c, x as f64 - c);
                    let inside = match o.shape {
                        Shape::Square => dy.abs() <= half && dx.abs() <= half,
                        Shape::Circle => dy * dy + dx * dx <= half * half * 1.1,
                        Shape::Triangle => {
                            let t = (dy + half) / (2.0 * half);
                            (0.0..=1.0).contains(&t) && dx.abs() <= t * half * 1.1
                        }
                    };
                    if inside {
                        let i = ((oy + y) * size + ox + x) * 3;
                        bytes[i..i + 3].copy_from_slice(&o.color.rgb());
                    }
                }
            }
        }
        image_from_bytes(size, size, 3, &bytes)
    }
}

pub(crate) fn image_from_bytes(h: usize, w: usize, c: usize, bytes: &[u8]) -> ImageGrid {
    ImageGrid::new(h, w, c, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).expect("byte image is in range")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    /// "is there a {color} {shape}"
    HasObject(Color, Shape),
    /// "is there a {shape} in the {position}"
    ShapeAt(Shape, Position),
    /// "what shape is in the {position}"
    ShapeIn(Position),
    /// "what color is the {shape}"
    ColorOf(Shape),
    /// "how many shapes are there"
    Count,
}

pub const COUNT_WORDS: [&str; 3] = ["one shape", "two shapes", "three shapes"];

pub fn shape_answer(s: Shape) -> String {
    format!("a {}", s.word())
}

pub fn color_answer(c: Color) -> String {
    format!("it is {}", c.word())
}

impl Question {
    pub fn is_open(self) -> bool {
        matches!(self, Question::ShapeIn(_) | Question::ColorOf(_) | Question::Count)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let w: Vec<&str> = text.split_whitespace().collect();
        match w.as_slice() {
            ["is", "there", "a", c, s] => Some(Question::HasObject(Color::parse(c)?, Shape::parse(s)?)),
            ["is", "there", "a", s, "in", "the", p1, p2] => Some(Question::ShapeAt(
                Shape::parse(s)?,
                Position::parse(&format!("{p1} {p2}"))?,
            )),
            ["what", "shape", "is", "in", "the", p1, p2] => {
                Some(Question::ShapeIn(Position::parse(&format!("{p1} {p2}"))?))
            }
            ["what", "color", "is", "the", s] => Some(Question::ColorOf(Shape::parse(s)?)),
            ["how", "many", "shapes", "are", "there"] => Some(Question::Count),
            _ => None,
        }
    }

    /// Answer read from the scene record; `None` when the question has no
    /// answer in this scene.
    pub fn answer(self, scene: &Scene) -> Option<String> {
        let yes_no = |b: bool| Some(if b { "yes" } else { "no" }.to_string());
        match self {
            Question::HasObject(c, s) => yes_no(scene.find(c, s).is_some()),
            Question::ShapeAt(s, p) => yes_no(scene.at(p).is_some_and(|o| o.shape == s)),
            Question::ShapeIn(p) => scene.at(p).map(|o| shape_answer(o.shape)),
            Question::ColorOf(s) => scene.with_shape(s).map(|o| color_answer(o.color)),
            Question::Count => COUNT_WORDS
                .get(scene.objects.len().checked_sub(1)?)
                .map(|s| s.to_string()),
        }
    }
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Question::HasObject(c, s) => write!(f, "is there a {} {}", c.word(), s.word()),
            Question::ShapeAt(s, p) => write!(f, "is there a {} in the {}", s.word(), p.phrase()),
            Question::ShapeIn(p) => write!(f, "what shape is in the {}", p.phrase()),
            Question::ColorOf(s) => write!(f, "what color is the {}", s.word()),
            Question::Count => write!(f, "how many shapes are there"),
        }
    }
}

/// Every word the grammar can emit, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec![
        "is", "there", "a", "in", "the", "what", "color", "how", "many", "shapes", "are", "yes", "no", "it",
    ];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(Shape::ALL.iter().map(|s| s.word()));
    words.extend(["upper", "lower", "left", "right", "one", "two", "three", "shape"]);
    words
}
