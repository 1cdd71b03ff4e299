//! Synthetic shape-scene question answering data: generation, on-disk
//! layout, loading, and batching.

mod ppm;
pub mod scene;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::parse_kv;
use crate::encoders::{ImageGrid, Vocab};
use crate::error::{Error, Result};

pub use ppm::{read_ppm, write_ppm};
pub use scene::{Color, Object, Position, Question, Scene, Shape};

/// Class id given to evaluation answers never seen in training.
pub const OUT_OF_SET: usize = usize::MAX;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub open_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Also ask "is there a {shape} in the {position}" yes/no questions.
    pub positional_closed: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            train: 512,
            val: 64,
            test: 128,
            open_fraction: 0.5,
            min_objects: 1,
            max_objects: 3,
            positional_closed: false,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if !(0.0..=1.0).contains(&self.open_fraction) {
            return bad("open fraction must lie in [0, 1]");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return bad("object count range must satisfy 1 <= min <= max <= 3");
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(2) {
            return bad("image size must be even and at least 8");
        }
        Ok(())
    }

    pub fn count(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// One generated question with its scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub scene: Scene,
    pub question: String,
    pub answer: String,
    pub is_open: bool,
}

fn random_scene(rng: &mut impl Rng, spec: &GeneratorSpec) -> Scene {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut positions = Position::ALL.to_vec();
    positions.shuffle(rng);
    let mut shapes = Shape::ALL.to_vec();
    shapes.shuffle(rng);
    let mut objects: Vec<Object> = (0..n)
        .map(|i| Object {
            color: *Color::ALL.choose(rng).expect("colors"),
            shape: shapes[i],
            position: positions[i],
        })
        .collect();
    objects.sort_by_key(|o| o.position);
    Scene { objects }
}

fn closed_question(rng: &mut impl Rng, scene: &Scene, yes: bool, positional: bool) -> (Question, &'static str) {
    if !positional || rng.random_bool(0.5) {
        if yes {
            let o = scene.objects.choose(rng).expect("non-empty scene");
            (Question::HasObject(o.color, o.shape), "yes")
        } else {
            let absent: Vec<(Color, Shape)> = Color::ALL
                .iter()
                .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
                .filter(|&(c, s)| scene.find(c, s).is_none())
                .collect();
            let &(c, s) = absent.choose(rng).expect("at most 3 of 9 kinds present");
            (Question::HasObject(c, s), "no")
        }
    } else if yes {
        let o = scene.objects.choose(rng).expect("non-empty scene");
        (Question::ShapeAt(o.shape, o.position), "yes")
    } else {
        let p = *Position::ALL.choose(rng).expect("four positions");
        let shapes: Vec<Shape> = Shape::ALL
            .iter()
            .copied()
            .filter(|&s| scene.at(p).is_none_or(|o| o.shape != s))
            .collect();
        (
            Question::ShapeAt(*shapes.choose(rng).expect("some shape absent"), p),
            "no",
        )
    }
}

fn open_question(rng: &mut impl Rng, scene: &Scene) -> (Question, String) {
    let o = *scene.objects.choose(rng).expect("non-empty scene");
    match rng.random_range(0..3) {
        0 => (Question::ShapeIn(o.position), scene::shape_answer(o.shape)),
        1 => (Question::ColorOf(o.shape), scene::color_answer(o.color)),
        _ => (Question::Count, scene::COUNT_WORDS[scene.objects.len() - 1].to_string()),
    }
}

/// Deterministic samples for one split.
pub fn generate_split(spec: &GeneratorSpec, split: &str, seed: u64) -> Result<Vec<RawSample>> {
    spec.validate()?;
    let split_index = SPLITS.iter().position(|&s| s == split).unwrap_or(SPLITS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split_index);
    let n = spec.count(split);
    let n_open = (n as f64 * spec.open_fraction).round() as usize;
    let mut open_flags: Vec<bool> = (0..n).map(|i| i < n_open).collect();
    open_flags.shuffle(&mut rng);
    let n_closed = n - n_open;
    let mut yes_flags: Vec<bool> = (0..n_closed).map(|i| i < n_closed.div_ceil(2)).collect();
    yes_flags.shuffle(&mut rng);
    let mut yes_flags = yes_flags.into_iter();
    Ok(open_flags
        .into_iter()
        .map(|is_open| {
            let scene = random_scene(&mut rng, spec);
            let (q, answer) = if is_open {
                open_question(&mut rng, &scene)
            } else {
                let yes = yes_flags.next().expect("one flag per closed sample");
                let (q, a) = closed_question(&mut rng, &scene, yes, spec.positional_closed);
                (q, a.to_string())
            };
            RawSample {
                scene,
                question: q.to_string(),
                answer,
                is_open,
            }
        })
        .collect())
}

/// Vocabulary covering the whole question/answer grammar.
pub fn grammar_vocab() -> Vocab {
    Vocab::from_words(scene::grammar_words())
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Per-split summary stored as `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub open_count: usize,
    pub closed_count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub vocab_sha: String,
    pub samples_sha: String,
    pub images_sha: String,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "open_count={}", self.open_count);
        let _ = writeln!(s, "closed_count={}", self.closed_count);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "vocab_sha={}", self.vocab_sha);
        let _ = writeln!(s, "samples_sha={}", self.samples_sha);
        let _ = writeln!(s, "images_sha={}", self.images_sha);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let kv: HashMap<String, String> = parse_kv(text)?.into_iter().collect();
        let field = |k: &str| {
            kv.get(k).cloned().ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                what: "manifest",
                detail: format!("missing {k}"),
            })
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                what: "manifest",
                detail: format!("{k} is not an integer"),
            })
        };
        let m = Self {
            split: field("split")?,
            count: num("count")? as usize,
            open_count: num("open_count")? as usize,
            closed_count: num("closed_count")? as usize,
            seed: num("seed")?,
            image_size: num("image_size")? as usize,
            vocab_sha: field("vocab_sha")?,
            samples_sha: field("samples_sha")?,
            images_sha: field("images_sha")?,
        };
        if m.open_count + m.closed_count != m.count {
            return Err(Error::Format {
                path: path.to_path_buf(),
                what: "manifest",
                detail: "open and closed counts do not add up".into(),
            });
        }
        Ok(m)
    }
}

fn escape(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

/// Writes `vocab.txt` and one directory per split under `root`.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64, root: &Path) -> Result<Vec<DatasetManifest>> {
    spec.validate()?;
    let vocab = grammar_vocab();
    let vocab_text = vocab.to_lines();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join("vocab.txt"), vocab_text.as_bytes())?;
    let vocab_sha = sha_hex(vocab_text.as_bytes());
    let mut manifests = Vec::new();
    for split in SPLITS {
        let samples = generate_split(spec, split, seed)?;
        let dir = root.join(split);
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut lines = String::new();
        let mut images = Sha256::new();
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{i:05}.ppm");
            let bytes = ppm::encode_ppm(&s.scene.render(spec.image_size));
            images.update(&bytes);
            write_file(&dir.join(&rel), &bytes)?;
            let _ = writeln!(
                lines,
                "image={rel}\tquestion={}\tanswer={}\tis_open={}\tscene={}",
                escape(&s.question),
                escape(&s.answer),
                u8::from(s.is_open),
                s.scene.encode()
            );
        }
        write_file(&dir.join("samples.txt"), lines.as_bytes())?;
        let open_count = samples.iter().filter(|s| s.is_open).count();
        let m = DatasetManifest {
            split: split.to_string(),
            count: samples.len(),
            open_count,
            closed_count: samples.len() - open_count,
            seed,
            image_size: spec.image_size,
            vocab_sha: vocab_sha.clone(),
            samples_sha: sha_hex(lines.as_bytes()),
            images_sha: hex::encode(images.finalize()),
        };
        write_file(&dir.join("manifest.txt"), m.to_text().as_bytes())?;
        manifests.push(m);
    }
    Ok(manifests)
}

/// Dense answer classes in first-appearance order over the training split.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AnswerVocab {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers<'a>(answers: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for a in answers {
            if !v.index.contains_key(a) {
                v.index.insert(a.to_string(), v.classes.len());
                v.classes.push(a.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class id, or [`OUT_OF_SET`].
    pub fn class(&self, answer: &str) -> usize {
        self.index.get(answer).copied().unwrap_or(OUT_OF_SET)
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.classes.get(class).map(String::as_str)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    pub id: usize,
    pub image: ImageGrid,
    pub question: String,
    pub answer: String,
    pub is_open: bool,
    pub answer_class: usize,
    pub scene: Option<Scene>,
}

/// One loaded split.
#[derive(Clone, Debug)]
pub struct Split {
    pub manifest: DatasetManifest,
    pub samples: Vec<VqaSample>,
}

impl Split {
    pub fn open_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_open).count()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Contract(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

struct Record {
    image: String,
    question: String,
    answer: String,
    is_open: bool,
    scene: Option<Scene>,
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<Record>> {
    let bad = |line: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        what: "sample record",
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for part in line.split('\t') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("field {part:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(i + 1, format!("missing {k}")));
        out.push(Record {
            image: get("image")?.to_string(),
            question: get("question")?.to_string(),
            answer: get("answer")?.to_string(),
            is_open: match get("is_open")? {
                "1" | "true" => true,
                "0" | "false" => false,
                v => return Err(bad(i + 1, format!("is_open={v}"))),
            },
            scene: fields.get("scene").and_then(|s| Scene::decode(s)),
        });
    }
    Ok(out)
}

fn check_hash(path: &Path, what: &'static str, expected: &str, found: String) -> Result<()> {
    if expected != found {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            what,
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}

struct RawSplit {
    manifest: DatasetManifest,
    records: Vec<Record>,
    images: Vec<ImageGrid>,
}

fn read_split(root: &Path, split: &str, vocab_sha: &str) -> Result<RawSplit> {
    let dir = root.join(split);
    let mpath = dir.join("manifest.txt");
    let manifest = DatasetManifest::parse(&read_text(&mpath)?, &mpath)?;
    check_hash(&mpath, "vocabulary", &manifest.vocab_sha, vocab_sha.to_string())?;
    let spath = dir.join("samples.txt");
    let text = read_text(&spath)?;
    check_hash(&spath, "samples", &manifest.samples_sha, sha_hex(text.as_bytes()))?;
    let records = parse_records(&text, &spath)?;
    if records.len() != manifest.count {
        return Err(Error::Format {
            path: spath,
            what: "sample file",
            detail: format!("{} records, manifest says {}", records.len(), manifest.count),
        });
    }
    let mut hasher = Sha256::new();
    let mut images = Vec::with_capacity(records.len());
    for r in &records {
        let p = dir.join(&r.image);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        hasher.update(&bytes);
        images.push(ppm::decode_ppm(&bytes).map_err(|detail| Error::Format {
            path: p.clone(),
            what: "pixmap",
            detail,
        })?);
    }
    check_hash(
        &dir.join("images"),
        "images",
        &manifest.images_sha,
        hex::encode(hasher.finalize()),
    )?;
    Ok(RawSplit {
        manifest,
        records,
        images,
    })
}

fn into_split(raw: RawSplit, answers: &AnswerVocab) -> Split {
    let samples = raw
        .records
        .into_iter()
        .zip(raw.images)
        .enumerate()
        .map(|(id, (r, image))| VqaSample {
            id,
            image,
            answer_class: answers.class(&r.answer),
            question: r.question,
            answer: r.answer,
            is_open: r.is_open,
            scene: r.scene,
        })
        .collect();
    Split {
        manifest: raw.manifest,
        samples,
    }
}

/// Loads all splits, verifying every manifest hash.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let vpath = root.join("vocab.txt");
    let vtext = read_text(&vpath)?;
    let vocab = Vocab::from_lines(&vtext)?;
    let vsha = sha_hex(vtext.as_bytes());
    let train = read_split(root, "train", &vsha)?;
    let answers = AnswerVocab::from_answers(train.records.iter().map(|r| r.answer.as_str()));
    let val = read_split(root, "val", &vsha)?;
    let test = read_split(root, "test", &vsha)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        vocab,
        train: into_split(train, &answers),
        val: into_split(val, &answers),
        test: into_split(test, &answers),
        answers,
    })
}

/// Index batches for one epoch; shuffled deterministically from
/// `(seed, epoch)` when `shuffle` is set. The last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
