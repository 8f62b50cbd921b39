//! Procedural feature-grid datasets.
//!
//! A scene is a `W×H` grid of patch features: one background prototype fills
//! the grid and a single rectangular object sits on top of it. Object patches
//! are a class prototype plus a color offset. The specialist domain applies a
//! fixed orthogonal map to every patch, which a generically trained backbone
//! cannot read until the encoder learns to undo it.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::FeatureGrid;
use crate::losses::{augment_caption, qa_to_declarative, TextSet};
use crate::rng::substream;
use crate::trainer::AdaptExample;
use crate::vocab::{Vocab, CLASS_NAMES, COLOR_NAMES, DOMAIN_NAMES};
use crate::Error;

pub const MCQ_OPTIONS: usize = 4;
pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Generic,
    Specialist,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Generic => DOMAIN_NAMES[0],
            Domain::Specialist => DOMAIN_NAMES[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Four-option multiple choice over class names.
    Classification,
    /// "What color is the X?"
    AttributeVqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: usize,
    pub objects: Vec<ObjectSpec>,
    pub sigma: f64,
    pub domain: Domain,
}

impl SceneSpec {
    pub fn validate(&self, bank: &FeatureBank) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Data(m));
        if self.width == 0 || self.height == 0 {
            return bad("empty grid".into());
        }
        if self.background >= bank.backgrounds.len() {
            return bad(format!("background {} out of range", self.background));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {}", self.sigma));
        }
        let mut covered = 0;
        for o in &self.objects {
            if o.class >= bank.classes.len() || o.color >= bank.colors.len() {
                return bad(format!("object class/color out of range: {o:?}"));
            }
            if o.height == 0 || o.width == 0 || o.row + o.height > self.height || o.col + o.width > self.width {
                return bad(format!("object footprint outside grid: {o:?}"));
            }
            covered += o.height * o.width;
        }
        if self.background_patches() == 0 || covered >= self.width * self.height {
            return bad("scene has no background patch".into());
        }
        Ok(())
    }

    /// Index of the object covering a raster position; later objects win.
    pub fn object_at(&self, pos: usize) -> Option<&ObjectSpec> {
        let (r, c) = (pos / self.width, pos % self.width);
        self.objects
            .iter()
            .rev()
            .find(|o| r >= o.row && r < o.row + o.height && c >= o.col && c < o.col + o.width)
    }

    pub fn background_patches(&self) -> usize {
        (0..self.width * self.height).filter(|&p| self.object_at(p).is_none()).count()
    }
}

/// Prototype vectors for backgrounds, classes and colors, plus the specialist
/// domain map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub backgrounds: Vec<Vec<f64>>,
    pub classes: Vec<Vec<f64>>,
    pub colors: Vec<Vec<f64>>,
    /// Row-major `dim × dim` orthogonal matrix; specialist patches are `x Q`.
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankSpec {
    pub dim: usize,
    pub backgrounds: usize,
    pub background_scale: f64,
    pub class_scale: f64,
    pub color_scale: f64,
    /// Rotation angle of each coordinate pair in the specialist map.
    pub shift_angle: f64,
    pub seed: u64,
}

impl Default for BankSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            backgrounds: 3,
            background_scale: 1.0,
            class_scale: 1.0,
            color_scale: 0.6,
            shift_angle: 1.2,
            seed: 0,
        }
    }
}

fn gaussian_vectors(n: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let dist = Normal::new(0.0, scale).expect("positive scale");
    (0..n).map(|_| (0..dim).map(|_| dist.sample(rng)).collect()).collect()
}

impl FeatureBank {
    pub fn new(spec: &BankSpec) -> Self {
        let d = spec.dim;
        let mut rng = substream(spec.seed, "feature-bank");
        let backgrounds = gaussian_vectors(spec.backgrounds, d, spec.background_scale, &mut rng);
        let classes = gaussian_vectors(CLASS_NAMES.len(), d, spec.class_scale, &mut rng);
        let colors = gaussian_vectors(COLOR_NAMES.len(), d, spec.color_scale, &mut rng);
        // Givens rotations on a random pairing of coordinates.
        let mut axes: Vec<usize> = (0..d).collect();
        axes.shuffle(&mut rng);
        let mut shift = vec![0.0; d * d];
        for i in 0..d {
            shift[i * d + i] = 1.0;
        }
        let (s, c) = spec.shift_angle.sin_cos();
        for pair in axes.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            shift[a * d + a] = c;
            shift[b * d + b] = c;
            shift[a * d + b] = s;
            shift[b * d + a] = -s;
        }
        Self { dim: d, backgrounds, classes, colors, shift }
    }

    fn apply_shift(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d).map(|j| (0..d).map(|i| v[i] * self.shift[i * d + j]).sum()).collect()
    }
}

/// Patch features of a scene; deterministic in `(scene, seed)`.
pub fn render_features(scene: &SceneSpec, bank: &FeatureBank, seed: u64) -> Result<FeatureGrid, Error> {
    scene.validate(bank)?;
    let d = bank.dim;
    let n = scene.width * scene.height;
    let mut rng = substream(seed, "render");
    let noise = Normal::new(0.0, scene.sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(n * d);
    for p in 0..n {
        let mut v: Vec<f64> = match scene.object_at(p) {
            Some(o) => bank.classes[o.class].iter().zip(&bank.colors[o.color]).map(|(a, b)| a + b).collect(),
            None => bank.backgrounds[scene.background].clone(),
        };
        if scene.sigma > 0.0 {
            v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        if scene.domain == Domain::Specialist {
            v = bank.apply_shift(&v);
        }
        data.extend(v.into_iter().map(|x| x as f32 as f64));
    }
    Ok(FeatureGrid::new(scene.width, scene.height, d, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: TaskKind,
    pub domain: Domain,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Inclusive range of object side lengths.
    pub object_side: (usize, usize),
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub held_out_fraction: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            domain: Domain::Generic,
            grid_width: 8,
            grid_height: 8,
            object_side: (2, 3),
            classes: CLASS_NAMES.len(),
            train_size: 400,
            test_size: 200,
            held_out_fraction: HELD_OUT_FRACTION,
            sigma: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: SceneSpec,
    pub prompt: String,
    pub target: String,
    pub label: usize,
    pub color: usize,
    pub options: Vec<String>,
    pub domain: Domain,
    pub split: Split,
    pub task: TaskKind,
    #[serde(with = "hex_features")]
    pub features: FeatureGrid,
}

impl Sample {
    /// Label used to pick contrastive negatives: class for classification,
    /// (class, color) for attribute questions.
    pub fn contrast_label(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.label,
            TaskKind::AttributeVqa => self.label * COLOR_NAMES.len() + self.color,
        }
    }

    /// Ground truth sentence first, then templated captions.
    pub fn text_set(&self) -> Result<TextSet, Error> {
        let label = CLASS_NAMES[self.label];
        let color = COLOR_NAMES[self.color];
        let dom = self.domain.name();
        Ok(match self.task {
            TaskKind::Classification => TextSet::new(
                augment_caption(dom, label)?,
                vec![format!("a photo of a {label}"), format!("this {dom} is a {label}"), format!("an image of a {color} {label}")],
            ),
            TaskKind::AttributeVqa => TextSet::new(
                qa_to_declarative(&self.prompt, &self.target).sentence,
                vec![format!("a {color} {label}"), augment_caption(dom, label)?],
            ),
        })
    }

    pub fn to_adapt_example(&self, vocab: &Vocab) -> Result<AdaptExample, Error> {
        Ok(AdaptExample {
            input: self.features.clone(),
            prompt: vocab.encode_prompt(&self.prompt),
            target: vocab.encode_target(&self.target),
            label: self.contrast_label(),
            texts: self.text_set()?,
        })
    }
}

mod hex_features {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::codebook::FeatureGrid;

    #[derive(Serialize, Deserialize)]
    struct Encoded {
        width: usize,
        height: usize,
        dim: usize,
        /// Little-endian binary32 values, hex encoded.
        data: String,
    }

    pub fn serialize<S: Serializer>(g: &FeatureGrid, s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = g.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        Encoded { width: g.width, height: g.height, dim: g.dim, data: hex::encode(bytes) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FeatureGrid, D::Error> {
        use serde::de::Error;
        let e = Encoded::deserialize(d)?;
        let bytes = hex::decode(&e.data).map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom("feature payload is not a whole number of binary32 values"));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        FeatureGrid::new(e.width, e.height, e.dim, data).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub held_out: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn mcq_prompt(domain: Domain, options: &[String]) -> String {
    format!("Which {} is this? Options: {}", domain.name(), options.join(", "))
}

fn make_sample(spec: &DatasetSpec, bank: &FeatureBank, label: usize, split: Split, index: usize) -> Result<Sample, Error> {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut rng = substream(spec.seed, &format!("sample-{tag}-{index}"));
    let color = rng.random_range(0..COLOR_NAMES.len());
    let (lo, hi) = spec.object_side;
    let height = rng.random_range(lo..=hi);
    let width = rng.random_range(lo..=hi);
    let object = ObjectSpec {
        class: label,
        color,
        row: rng.random_range(0..=spec.grid_height - height),
        col: rng.random_range(0..=spec.grid_width - width),
        height,
        width,
    };
    let scene = SceneSpec {
        width: spec.grid_width,
        height: spec.grid_height,
        background: rng.random_range(0..bank.backgrounds.len()),
        objects: vec![object],
        sigma: spec.sigma,
        domain: spec.domain,
    };
    let features = render_features(&scene, bank, rng.random())?;
    let (prompt, target, options) = match spec.task {
        TaskKind::Classification => {
            let mut others: Vec<usize> = (0..spec.classes).filter(|&c| c != label).collect();
            others.shuffle(&mut rng);
            let mut opts: Vec<usize> = others[..MCQ_OPTIONS - 1].to_vec();
            opts.push(label);
            opts.shuffle(&mut rng);
            let options: Vec<String> = opts.iter().map(|&c| CLASS_NAMES[c].to_string()).collect();
            (mcq_prompt(spec.domain, &options), CLASS_NAMES[label].to_string(), options)
        }
        TaskKind::AttributeVqa => {
            (format!("What color is the {}?", CLASS_NAMES[label]), COLOR_NAMES[color].to_string(), Vec::new())
        }
    };
    Ok(Sample { scene, prompt, target, label, color, options, domain: spec.domain, split, task: spec.task, features })
}

/// Train/test splits with a held-out label subset that appears only in test.
pub fn generate_dataset(spec: &DatasetSpec, bank: &FeatureBank) -> Result<Dataset, Error> {
    if spec.classes < 5 || spec.classes > CLASS_NAMES.len() {
        return Err(Error::Data(format!("need 5..={} classes, got {}", CLASS_NAMES.len(), spec.classes)));
    }
    let (lo, hi) = spec.object_side;
    if lo == 0 || lo > hi || hi > spec.grid_width.min(spec.grid_height) {
        return Err(Error::Data(format!("object side range {lo}..={hi} does not fit the grid")));
    }
    if !(0.0..1.0).contains(&spec.held_out_fraction) {
        return Err(Error::Data(format!("held-out fraction {}", spec.held_out_fraction)));
    }
    let n_held = (spec.held_out_fraction * spec.classes as f64).round() as usize;
    let mut classes: Vec<usize> = (0..spec.classes).collect();
    classes.shuffle(&mut substream(spec.seed, "held-out-labels"));
    let mut held_out = classes[..n_held].to_vec();
    held_out.sort_unstable();
    let kept: Vec<usize> = (0..spec.classes).filter(|c| !held_out.contains(c)).collect();

    let mut label_rng = substream(spec.seed, "labels");
    let mut train = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let label = kept[label_rng.random_range(0..kept.len())];
        train.push(make_sample(spec, bank, label, Split::Train, i)?);
    }
    let mut test = Vec::with_capacity(spec.test_size);
    for i in 0..spec.test_size {
        // Cycle through every class so each one, held out or not, is present.
        let label = i % spec.classes;
        test.push(make_sample(spec, bank, label, Split::Test, i)?);
    }
    Ok(Dataset { spec: spec.clone(), held_out, train, test })
}

impl Dataset {
    pub fn to_jsonl(&self) -> Result<String, Error> {
        let mut out = String::new();
        for s in self.train.iter().chain(&self.test) {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), Error> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Read samples back from a JSONL file.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>, Error> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
