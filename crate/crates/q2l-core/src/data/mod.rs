//! Synthetic multi-label shapes dataset.
//!
//! Each sample composites 1..n colored geometric objects (category = shape x
//! color) onto a noisy gradient background. Labels are the distinct object
//! categories; ground-truth boxes are retained so attention maps can be
//! scored against object locations and objects can be bucketed by pixel
//! area. Generation is deterministic: sample i draws from a ChaCha stream
//! derived from (seed, split, i), so datasets are byte-identical across
//! runs. On-disk layout per split: `images/NNNNNN.ppm`, `labels.jsonl`,
//! `meta.json`, with strict parsers that reject any deviation.

pub mod ppm;
pub mod render;

use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};
use ppm::PpmError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: PpmError,
    },
    #[error("{path} line {line}: {source}")]
    Labels {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Meta {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {what}")]
    Invalid { path: String, what: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(path: &Path, what: impl Into<String>) -> DataError {
    DataError::Invalid {
        path: path.display().to_string(),
        what: what.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const ALL_SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const ALL_COLORS: [ColorName; 4] = [
    ColorName::Red,
    ColorName::Green,
    ColorName::Blue,
    ColorName::Yellow,
];

/// category id = shape index * n_colors + color index.
pub fn shape_of(category: usize, colors: usize) -> Shape {
    ALL_SHAPES[category / colors]
}

pub fn color_of(category: usize, colors: usize) -> ColorName {
    ALL_COLORS[category % colors]
}

/// Human-readable category name, e.g. `circle-blue`.
pub fn category_name(category: usize, colors: usize) -> String {
    let shape = match shape_of(category, colors) {
        Shape::Square => "square",
        Shape::Circle => "circle",
        Shape::Triangle => "triangle",
    };
    let color = match color_of(category, colors) {
        ColorName::Red => "red",
        ColorName::Green => "green",
        ColorName::Blue => "blue",
        ColorName::Yellow => "yellow",
    };
    format!("{shape}-{color}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub category: usize,
    pub shape: Shape,
    pub color: ColorName,
    pub x: usize,
    pub y: usize,
    /// Side of the square bounding box; circles and triangles inscribe it.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub bg_seed: u64,
}

/// Axis-aligned ground-truth box with its category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub category: usize,
}

impl ObjBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// One loaded or generated sample: raw RGB bytes plus ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: usize,
    /// h*w*3 interleaved RGB.
    pub image: Vec<u8>,
    /// Sorted distinct category ids.
    pub labels: Vec<usize>,
    pub boxes: Vec<ObjBox>,
}

impl SampleRecord {
    pub fn multi_hot(&self, k: usize) -> Vec<bool> {
        let mut y = vec![false; k];
        for &l in &self.labels {
            y[l] = true;
        }
        y
    }
}

/// Image bytes scaled to [0,1] as an [h, w, 3] tensor.
pub fn image_tensor<S: Scalar>(image: &[u8], h: usize, w: usize) -> Tensor<S> {
    let data: Vec<S> = image
        .iter()
        .map(|&b| S::from_f64(f64::from(b) / 255.0))
        .collect();
    Tensor::from_vec(&[h, w, 3], data).expect("image length checked by caller")
}

/// Horizontal mirror of an interleaved RGB image. Labels are unaffected:
/// every generated shape is symmetric across its vertical axis.
pub fn hflip_image(image: &[u8], h: usize, w: usize) -> Vec<u8> {
    debug_assert_eq!(image.len(), h * w * 3);
    let mut out = vec![0u8; image.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * 3;
            let dst = (y * w + (w - 1 - x)) * 3;
            out[dst..dst + 3].copy_from_slice(&image[src..src + 3]);
        }
    }
    out
}

const SMALL_SIDE: RangeInclusive<usize> = 4..=8;
const MEDIUM_SIDE: RangeInclusive<usize> = 9..=20;
const LARGE_SIDE: RangeInclusive<usize> = 21..=36;

/// Area cutoffs: small <= a_s < medium <= a_m < large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub a_s: usize,
    pub a_m: usize,
}

impl Default for SizeThresholds {
    fn default() -> Self {
        // 8x8 and 20x20 on a 48x48 canvas.
        SizeThresholds { a_s: 64, a_m: 400 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub const ALL_BUCKETS: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

impl SizeBucket {
    pub fn name(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

/// Boundary areas are inclusive on the smaller bucket.
pub fn bucket_of_area(area: usize, t: SizeThresholds) -> SizeBucket {
    if area <= t.a_s {
        SizeBucket::Small
    } else if area <= t.a_m {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Bucket of a category within one sample: decided by the category's
/// largest object. `None` when the category is absent.
pub fn category_bucket(sample: &SampleRecord, category: usize, t: SizeThresholds) -> Option<SizeBucket> {
    sample
        .boxes
        .iter()
        .filter(|b| b.category == category)
        .map(ObjBox::area)
        .max()
        .map(|area| bucket_of_area(area, t))
}

/// Generation settings; `k` must equal `shapes * colors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub shapes: usize,
    pub colors: usize,
    pub k: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Distinct categories per image drawn uniformly from this range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative draw weights for small / medium / large objects.
    pub size_mix: [f64; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 500,
            shapes: 3,
            colors: 4,
            k: 12,
            canvas_h: 48,
            canvas_w: 48,
            min_objects: 2,
            max_objects: 4,
            size_mix: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidConfig(m));
        if self.shapes == 0 || self.shapes > ALL_SHAPES.len() {
            return fail(format!("shapes must be 1..={}", ALL_SHAPES.len()));
        }
        if self.colors == 0 || self.colors > ALL_COLORS.len() {
            return fail(format!("colors must be 1..={}", ALL_COLORS.len()));
        }
        if self.k != self.shapes * self.colors {
            return fail(format!(
                "k = {} but shapes x colors = {}",
                self.k,
                self.shapes * self.colors
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "objects-per-image range [{}, {}] is empty or zero",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.k {
            return fail(format!(
                "max_objects = {} exceeds the {} distinct categories",
                self.max_objects, self.k
            ));
        }
        if self.size_mix.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return fail("size_mix weights must be finite and nonnegative".into());
        }
        if self.size_mix.iter().sum::<f64>() <= 0.0 {
            return fail("size_mix must have positive total weight".into());
        }
        let min_hw = self.canvas_h.min(self.canvas_w);
        for (weight, range, name) in [
            (self.size_mix[0], SMALL_SIDE, "small"),
            (self.size_mix[1], MEDIUM_SIDE, "medium"),
            (self.size_mix[2], LARGE_SIDE, "large"),
        ] {
            if weight > 0.0 && min_hw < *range.start() {
                return fail(format!(
                    "canvas {}x{} cannot hold {name} objects (side >= {})",
                    self.canvas_h,
                    self.canvas_w,
                    range.start()
                ));
            }
        }
        if self.n_train == 0 && self.n_test == 0 {
            return fail("dataset would be empty".into());
        }
        Ok(())
    }

    fn side_range(&self, bucket: usize) -> RangeInclusive<usize> {
        let range = [SMALL_SIDE, MEDIUM_SIDE, LARGE_SIDE][bucket].clone();
        let min_hw = self.canvas_h.min(self.canvas_w);
        *range.start()..=(*range.end()).min(min_hw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

fn distinct_categories(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.random_range(i..k);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

fn pick_bucket(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> usize {
    let total: f64 = mix.iter().sum();
    let r = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (i, &w) in mix.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    2
}

fn gen_scene(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> SceneSpec {
    let m = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let objects = distinct_categories(rng, cfg.k, m)
        .into_iter()
        .map(|category| {
            let mut bucket = pick_bucket(rng, &cfg.size_mix);
            while cfg.size_mix[bucket] <= 0.0 {
                bucket = (bucket + 1) % 3;
            }
            let size = rng.random_range(cfg.side_range(bucket));
            let x = rng.random_range(0..=cfg.canvas_w - size);
            let y = rng.random_range(0..=cfg.canvas_h - size);
            SceneObject {
                category,
                shape: shape_of(category, cfg.colors),
                color: color_of(category, cfg.colors),
                x,
                y,
                size,
            }
        })
        .collect();
    SceneSpec {
        objects,
        bg_seed: rng.random(),
    }
}

/// Rewrites object categories until every category appears in at least
/// `min_count` scenes. Deterministic: walks scenes in order and converts
/// the most-overrepresented object that does not collide with an existing
/// label. Returns the number of conversions.
fn repair_coverage(
    specs: &mut [SceneSpec],
    cfg: &DataConfig,
    min_count: usize,
) -> Result<usize, DataError> {
    let mut counts = vec![0usize; cfg.k];
    for spec in specs.iter() {
        for obj in &spec.objects {
            counts[obj.category] += 1;
        }
    }
    let mut changed = 0usize;
    for cat in 0..cfg.k {
        let mut i = 0usize;
        while counts[cat] < min_count {
            let Some(spec) = specs.get_mut(i) else {
                return Err(DataError::InvalidConfig(format!(
                    "cannot reach {min_count} occurrences of category {cat}"
                )));
            };
            i += 1;
            if spec.objects.iter().any(|o| o.category == cat) {
                continue;
            }
            // Donate from the currently most frequent category in this
            // scene, provided it stays above the floor itself.
            let donor = spec
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| counts[o.category] > min_count)
                .max_by_key(|(_, o)| counts[o.category])
                .map(|(j, _)| j);
            let Some(j) = donor else { continue };
            let old = spec.objects[j].category;
            counts[old] -= 1;
            counts[cat] += 1;
            spec.objects[j].category = cat;
            spec.objects[j].shape = shape_of(cat, cfg.colors);
            spec.objects[j].color = color_of(cat, cfg.colors);
            changed += 1;
        }
    }
    Ok(changed)
}

fn record_from_spec(id: usize, spec: &SceneSpec, cfg: &DataConfig) -> SampleRecord {
    let mut labels: Vec<usize> = spec.objects.iter().map(|o| o.category).collect();
    labels.sort_unstable();
    labels.dedup();
    SampleRecord {
        id,
        image: render::render_scene(spec, cfg.canvas_h, cfg.canvas_w),
        labels,
        boxes: spec
            .objects
            .iter()
            .map(|o| ObjBox {
                x: o.x,
                y: o.y,
                w: o.size,
                h: o.size,
                category: o.category,
            })
            .collect(),
    }
}

/// Generates one split in memory. Train splits get coverage repair: every
/// category ends up in at least 1% of scenes (at least one).
pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Vec<SampleRecord>, DataError> {
    cfg.validate()?;
    let n = match split {
        Split::Train => cfg.n_train,
        Split::Test => cfg.n_test,
    };
    let mut specs: Vec<SceneSpec> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(split.stream_base() + i as u64);
            gen_scene(cfg, &mut rng)
        })
        .collect();
    if split == Split::Train && n > 0 {
        let min_count = n.div_ceil(100).max(1);
        repair_coverage(&mut specs, cfg, min_count)?;
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(id, spec)| record_from_spec(id, spec, cfg))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub k: usize,
    pub colors: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub seed: u64,
    pub thresholds: SizeThresholds,
    pub n_samples: usize,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn image_tensor<S: Scalar>(&self, idx: usize) -> Tensor<S> {
        image_tensor(
            &self.samples[idx].image,
            self.meta.canvas_h,
            self.meta.canvas_w,
        )
    }

    /// `image_tensor` with an optional horizontal mirror, for augmentation.
    pub fn image_tensor_flipped<S: Scalar>(&self, idx: usize, flip: bool) -> Tensor<S> {
        if !flip {
            return self.image_tensor(idx);
        }
        let (h, w) = (self.meta.canvas_h, self.meta.canvas_w);
        image_tensor(&hflip_image(&self.samples[idx].image, h, w), h, w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    id: usize,
    labels: Vec<usize>,
    boxes: Vec<[usize; 5]>,
}

fn image_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join("images").join(format!("{id:06}.ppm"))
}

/// Writes one split to `dir` in the canonical layout.
pub fn write_split(dir: &Path, cfg: &DataConfig, split: Split, samples: &[SampleRecord]) -> Result<(), DataError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    for s in samples {
        let path = image_path(dir, s.id);
        let bytes = ppm::encode_ppm(cfg.canvas_w, cfg.canvas_h, &s.image).map_err(|e| DataError::Image {
            path: path.display().to_string(),
            source: e,
        })?;
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    let mut jsonl = String::new();
    for s in samples {
        let line = LabelLine {
            id: s.id,
            labels: s.labels.clone(),
            boxes: s
                .boxes
                .iter()
                .map(|b| [b.x, b.y, b.w, b.h, b.category])
                .collect(),
        };
        jsonl.push_str(&serde_json::to_string(&line).expect("plain struct"));
        jsonl.push('\n');
    }
    let labels_path = dir.join("labels.jsonl");
    fs::write(&labels_path, jsonl).map_err(|e| io_err(&labels_path, e))?;
    let meta = DatasetMeta {
        k: cfg.k,
        colors: cfg.colors,
        canvas_h: cfg.canvas_h,
        canvas_w: cfg.canvas_w,
        seed: cfg.seed,
        thresholds: SizeThresholds::default(),
        n_samples: samples.len(),
        split: split.dir_name().to_string(),
    };
    let meta_path = dir.join("meta.json");
    let mut meta_json = serde_json::to_string_pretty(&meta).expect("plain struct");
    meta_json.push('\n');
    fs::write(&meta_path, meta_json).map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

/// Mean labels per image, reported after generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub mean_labels_train: f64,
}

/// Generates and writes `out/train` and `out/test`.
pub fn generate_dataset(cfg: &DataConfig, out: &Path) -> Result<DataSummary, DataError> {
    cfg.validate()?;
    let train = generate_split(cfg, Split::Train)?;
    write_split(&out.join(Split::Train.dir_name()), cfg, Split::Train, &train)?;
    let test = generate_split(cfg, Split::Test)?;
    write_split(&out.join(Split::Test.dir_name()), cfg, Split::Test, &test)?;
    let mean_labels_train = if train.is_empty() {
        0.0
    } else {
        train.iter().map(|s| s.labels.len()).sum::<usize>() as f64 / train.len() as f64
    };
    Ok(DataSummary {
        n_train: train.len(),
        n_test: test.len(),
        mean_labels_train,
    })
}

/// Loads one split directory, validating layout, ids, label/box consistency,
/// and image dimensions.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes).map_err(|e| DataError::Meta {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    if meta.k == 0 || meta.canvas_h == 0 || meta.canvas_w == 0 {
        return Err(invalid(&meta_path, "degenerate metadata"));
    }

    let labels_path = dir.join("labels.jsonl");
    let text = fs::read_to_string(&labels_path).map_err(|e| io_err(&labels_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let parsed: LabelLine =
            serde_json::from_str(line).map_err(|e| DataError::Labels {
                path: labels_path.display().to_string(),
                line: lineno + 1,
                source: e,
            })?;
        if parsed.id != lineno {
            return Err(invalid(
                &labels_path,
                format!("line {} has id {}, expected {}", lineno + 1, parsed.id, lineno),
            ));
        }
        if !parsed.labels.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid(
                &labels_path,
                format!("sample {}: labels must be sorted and distinct", parsed.id),
            ));
        }
        if let Some(&bad) = parsed.labels.iter().find(|&&l| l >= meta.k) {
            return Err(invalid(
                &labels_path,
                format!("sample {}: label {bad} out of range for k={}", parsed.id, meta.k),
            ));
        }
        let boxes: Vec<ObjBox> = parsed
            .boxes
            .iter()
            .map(|&[x, y, w, h, category]| ObjBox { x, y, w, h, category })
            .collect();
        for b in &boxes {
            if b.w == 0 || b.h == 0 || b.x + b.w > meta.canvas_w || b.y + b.h > meta.canvas_h {
                return Err(invalid(
                    &labels_path,
                    format!("sample {}: box outside {}x{} canvas", parsed.id, meta.canvas_w, meta.canvas_h),
                ));
            }
            if b.category >= meta.k {
                return Err(invalid(
                    &labels_path,
                    format!("sample {}: box category {} out of range", parsed.id, b.category),
                ));
            }
        }
        let mut from_boxes: Vec<usize> = boxes.iter().map(|b| b.category).collect();
        from_boxes.sort_unstable();
        from_boxes.dedup();
        if from_boxes != parsed.labels {
            return Err(invalid(
                &labels_path,
                format!("sample {}: labels disagree with box categories", parsed.id),
            ));
        }
        samples.push(SampleRecord {
            id: parsed.id,
            image: Vec::new(),
            labels: parsed.labels,
            boxes,
        });
    }
    if samples.len() != meta.n_samples {
        return Err(invalid(
            &labels_path,
            format!("{} label lines but meta says {}", samples.len(), meta.n_samples),
        ));
    }

    for s in &mut samples {
        let path = image_path(dir, s.id);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let (w, h, rgb) = ppm::decode_ppm(&bytes).map_err(|e| DataError::Image {
            path: path.display().to_string(),
            source: e,
        })?;
        if w != meta.canvas_w || h != meta.canvas_h {
            return Err(invalid(
                &path,
                format!("image is {w}x{h}, meta says {}x{}", meta.canvas_w, meta.canvas_h),
            ));
        }
        s.image = rgb;
    }
    Ok(Dataset { meta, samples })
}

/// Per-bucket, per-category ranked lists for size-restricted ranking
/// metrics. For bucket b and category c, positives are samples whose
/// category-c objects put c in bucket b; samples holding c in another
/// bucket are skipped; samples without c count as negatives everywhere.
pub fn bucket_ranked(
    samples: &[SampleRecord],
    probs: &[Vec<f64>],
    k: usize,
    t: SizeThresholds,
) -> Result<[Vec<Vec<(f64, bool)>>; 3], DataError> {
    if samples.len() != probs.len() {
        return Err(DataError::InvalidConfig(format!(
            "{} samples but {} probability rows",
            samples.len(),
            probs.len()
        )));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(DataError::InvalidConfig(format!(
                "probability row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
    }
    for s in samples {
        if !s.labels.is_empty() && s.boxes.is_empty() {
            return Err(DataError::InvalidConfig(format!(
                "sample {} has labels but no boxes",
                s.id
            )));
        }
    }
    let mut out: [Vec<Vec<(f64, bool)>>; 3] =
        std::array::from_fn(|_| (0..k).map(|_| Vec::new()).collect());
    for (s, row) in samples.iter().zip(probs) {
        for c in 0..k {
            match category_bucket(s, c, t) {
                Some(bucket) => {
                    let b = ALL_BUCKETS.iter().position(|&x| x == bucket).unwrap();
                    out[b][c].push((row[c], true));
                }
                None => {
                    for list in &mut out {
                        list[c].push((row[c], false));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            n_train: 120,
            n_test: 30,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_config() {
        let cfg = small_cfg();
        let a = generate_split(&cfg, Split::Train).unwrap();
        let b = generate_split(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        let other = DataConfig {
            seed: 1,
            ..small_cfg()
        };
        let c = generate_split(&other, Split::Train).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn train_and_test_streams_do_not_collide() {
        let cfg = small_cfg();
        let train = generate_split(&cfg, Split::Train).unwrap();
        let test = generate_split(&cfg, Split::Test).unwrap();
        assert_ne!(train[0].image, test[0].image);
    }

    #[test]
    fn single_object_config_yields_single_labels() {
        let cfg = DataConfig {
            min_objects: 1,
            max_objects: 1,
            n_train: 40,
            n_test: 5,
            ..DataConfig::default()
        };
        for s in generate_split(&cfg, Split::Train).unwrap() {
            assert_eq!(s.labels.len(), 1);
            assert_eq!(s.boxes.len(), 1);
        }
    }

    #[test]
    fn label_counts_stay_in_range_and_match_boxes() {
        let cfg = small_cfg();
        for s in generate_split(&cfg, Split::Train).unwrap() {
            assert!((cfg.min_objects..=cfg.max_objects).contains(&s.labels.len()));
            assert_eq!(s.boxes.len(), s.labels.len(), "one object per distinct category");
            let mut cats: Vec<usize> = s.boxes.iter().map(|b| b.category).collect();
            cats.sort_unstable();
            assert_eq!(cats, s.labels);
            for b in &s.boxes {
                assert!(b.x + b.w <= cfg.canvas_w && b.y + b.h <= cfg.canvas_h);
            }
        }
    }

    #[test]
    fn mean_labels_per_image_near_three() {
        let cfg = DataConfig {
            n_train: 400,
            n_test: 0,
            ..DataConfig::default()
        };
        let train = generate_split(&cfg, Split::Train).unwrap();
        let mean = train.iter().map(|s| s.labels.len()).sum::<usize>() as f64 / train.len() as f64;
        assert!((2.4..=3.4).contains(&mean), "mean labels {mean}");
    }

    #[test]
    fn every_category_reaches_one_percent_coverage() {
        let cfg = DataConfig {
            n_train: 400,
            n_test: 0,
            ..DataConfig::default()
        };
        let train = generate_split(&cfg, Split::Train).unwrap();
        let mut counts = vec![0usize; cfg.k];
        for s in &train {
            for &l in &s.labels {
                counts[l] += 1;
            }
        }
        let floor = train.len().div_ceil(100);
        for (cat, &c) in counts.iter().enumerate() {
            assert!(c >= floor, "category {cat} appears {c} < {floor} times");
        }
    }

    #[test]
    fn repair_fills_in_a_missing_category() {
        let cfg = DataConfig {
            n_train: 50,
            ..DataConfig::default()
        };
        // All scenes hold categories 1 and 2 only; category 0 is absent.
        let mut specs: Vec<SceneSpec> = (0..50)
            .map(|i| SceneSpec {
                bg_seed: i,
                objects: vec![
                    SceneObject {
                        category: 1,
                        shape: shape_of(1, cfg.colors),
                        color: color_of(1, cfg.colors),
                        x: 0,
                        y: 0,
                        size: 6,
                    },
                    SceneObject {
                        category: 2,
                        shape: shape_of(2, cfg.colors),
                        color: color_of(2, cfg.colors),
                        x: 10,
                        y: 10,
                        size: 6,
                    },
                ],
            })
            .collect();
        // Categories 0 and 3..=11 are all deficient: ten conversions.
        let changed = repair_coverage(&mut specs, &cfg, 1).unwrap();
        assert_eq!(changed, 10);
        for cat in [0usize, 3, 4, 5, 6, 7, 8, 9, 10, 11] {
            let with_cat = specs
                .iter()
                .filter(|s| s.objects.iter().any(|o| o.category == cat))
                .count();
            assert_eq!(with_cat, 1, "category {cat} must appear exactly once");
        }
        // The converted object matches its new category's look.
        let conv = specs[0].objects.iter().find(|o| o.category == 0).unwrap();
        assert_eq!(conv.shape, shape_of(0, cfg.colors));
        assert_eq!(conv.color, color_of(0, cfg.colors));
    }

    #[test]
    fn repair_reports_unsatisfiable_floors() {
        let cfg = DataConfig::default();
        let mut specs = vec![SceneSpec {
            bg_seed: 0,
            objects: vec![SceneObject {
                category: 1,
                shape: shape_of(1, cfg.colors),
                color: color_of(1, cfg.colors),
                x: 0,
                y: 0,
                size: 5,
            }],
        }];
        assert!(matches!(
            repair_coverage(&mut specs, &cfg, 1),
            Err(DataError::InvalidConfig(_))
        ));
    }

    #[test]
    fn disk_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            n_train: 12,
            n_test: 4,
            ..DataConfig::default()
        };
        let summary = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!((summary.n_train, summary.n_test), (12, 4));
        let train = load_dataset(&dir.path().join("train")).unwrap();
        assert_eq!(train.meta.k, 12);
        assert_eq!(train.meta.split, "train");
        let regenerated = generate_split(&cfg, Split::Train).unwrap();
        assert_eq!(train.samples, regenerated);
        let test = load_dataset(&dir.path().join("test")).unwrap();
        assert_eq!(test.samples.len(), 4);
    }

    #[test]
    fn generated_files_are_byte_identical_across_runs() {
        let cfg = DataConfig {
            n_train: 20,
            n_test: 2,
            ..DataConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, d1.path()).unwrap();
        generate_dataset(&cfg, d2.path()).unwrap();
        for rel in [
            "train/images/000000.ppm",
            "train/labels.jsonl",
            "train/meta.json",
            "test/images/000001.ppm",
        ] {
            let a = fs::read(d1.path().join(rel)).unwrap();
            let b = fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between runs");
        }
    }

    #[test]
    fn loader_rejects_corruption_with_file_context() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            n_train: 0,
            n_test: 3,
            ..DataConfig::default()
        };
        let samples = generate_split(&cfg, Split::Test).unwrap();
        let split_dir = dir.path().join("test");
        write_split(&split_dir, &cfg, Split::Test, &samples).unwrap();

        // Truncated image names the file.
        let img = split_dir.join("images/000001.ppm");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_dataset(&split_dir).unwrap_err();
        assert!(err.to_string().contains("000001.ppm"), "{err}");
        fs::write(&img, &bytes).unwrap();

        // Unknown JSON key.
        let labels = split_dir.join("labels.jsonl");
        let text = fs::read_to_string(&labels).unwrap();
        let patched = text.replacen("\"id\"", "\"id2\"", 1);
        fs::write(&labels, patched).unwrap();
        assert!(matches!(load_dataset(&split_dir), Err(DataError::Labels { line: 1, .. })));

        // Out-of-range category (appended, so the list stays sorted).
        let patched = text.replace("],\"boxes\"", ",99],\"boxes\"");
        fs::write(&labels, patched).unwrap();
        let err = load_dataset(&split_dir).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
        fs::write(&labels, text).unwrap();

        // Meta disagreeing with line count.
        let meta = split_dir.join("meta.json");
        let mtext = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, mtext.replace("\"n_samples\": 3", "\"n_samples\": 4")).unwrap();
        assert!(load_dataset(&split_dir).is_err());
    }

    #[test]
    fn bucket_boundaries_are_inclusive_below() {
        let t = SizeThresholds::default();
        assert_eq!(bucket_of_area(64, t), SizeBucket::Small);
        assert_eq!(bucket_of_area(65, t), SizeBucket::Medium);
        assert_eq!(bucket_of_area(400, t), SizeBucket::Medium);
        assert_eq!(bucket_of_area(401, t), SizeBucket::Large);
    }

    #[test]
    fn category_bucket_uses_the_largest_object() {
        let sample = SampleRecord {
            id: 0,
            image: Vec::new(),
            labels: vec![3],
            boxes: vec![
                ObjBox { x: 0, y: 0, w: 5, h: 5, category: 3 },
                ObjBox { x: 9, y: 9, w: 22, h: 22, category: 3 },
            ],
        };
        let t = SizeThresholds::default();
        assert_eq!(category_bucket(&sample, 3, t), Some(SizeBucket::Large));
        assert_eq!(category_bucket(&sample, 0, t), None);
    }

    #[test]
    fn bucket_lists_partition_positive_pairs() {
        let cfg = small_cfg();
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let probs: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| (0..cfg.k).map(|c| if s.labels.contains(&c) { 0.9 } else { 0.1 }).collect())
            .collect();
        let t = SizeThresholds::default();
        let buckets = bucket_ranked(&samples, &probs, cfg.k, t).unwrap();
        let total_pos: usize = samples.iter().map(|s| s.labels.len()).sum();
        let bucket_pos: usize = buckets
            .iter()
            .flat_map(|per_cat| per_cat.iter())
            .map(|list| list.iter().filter(|&&(_, p)| p).count())
            .sum();
        assert_eq!(bucket_pos, total_pos);
        // A sample positive in one bucket is absent from the other two
        // bucket lists of that category.
        for c in 0..cfg.k {
            let lens: Vec<usize> = buckets.iter().map(|b| b[c].len()).collect();
            let negatives = samples.iter().filter(|s| !s.labels.contains(&c)).count();
            let positives_by_bucket: Vec<usize> = buckets
                .iter()
                .map(|b| b[c].iter().filter(|&&(_, p)| p).count())
                .collect();
            for (len, pos) in lens.iter().zip(&positives_by_bucket) {
                assert_eq!(*len, negatives + pos);
            }
        }
    }

    #[test]
    fn single_large_objects_land_in_the_large_bucket() {
        let cfg = DataConfig {
            min_objects: 1,
            max_objects: 1,
            size_mix: [0.0, 0.0, 1.0],
            n_train: 20,
            n_test: 0,
            ..DataConfig::default()
        };
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let t = SizeThresholds::default();
        for s in &samples {
            assert_eq!(category_bucket(s, s.labels[0], t), Some(SizeBucket::Large));
        }
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let bad_k = DataConfig { k: 11, ..DataConfig::default() };
        assert!(bad_k.validate().is_err());
        let too_many = DataConfig { shapes: 4, ..DataConfig::default() };
        assert!(too_many.validate().is_err());
        let empty_range = DataConfig { min_objects: 5, max_objects: 4, ..DataConfig::default() };
        assert!(empty_range.validate().is_err());
        let too_small = DataConfig { canvas_h: 16, canvas_w: 16, ..DataConfig::default() };
        assert!(too_small.validate().is_err(), "large objects cannot fit a 16px canvas");
        let ok_small = DataConfig {
            canvas_h: 16,
            canvas_w: 16,
            size_mix: [1.0, 1.0, 0.0],
            ..DataConfig::default()
        };
        assert!(ok_small.validate().is_ok());
        let bad_mix = DataConfig { size_mix: [0.0, 0.0, 0.0], ..DataConfig::default() };
        assert!(bad_mix.validate().is_err());
    }

    #[test]
    fn image_tensor_scales_to_unit_range() {
        let cfg = DataConfig {
            n_train: 0,
            n_test: 1,
            ..DataConfig::default()
        };
        let samples = generate_split(&cfg, Split::Test).unwrap();
        let t: Tensor<f32> = image_tensor(&samples[0].image, 48, 48);
        assert_eq!(t.shape(), &[48, 48, 3]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.data()[0], samples[0].image[0] as f32 / 255.0);
    }

    #[test]
    fn hflip_mirrors_pixels_and_is_an_involution() {
        // 1x3 image with distinct pixels: flip reverses their order.
        let img = vec![1, 2, 3, 4, 5, 6, 7, 8, 9];
        let flipped = hflip_image(&img, 1, 3);
        assert_eq!(flipped, vec![7, 8, 9, 4, 5, 6, 1, 2, 3]);
        assert_eq!(hflip_image(&flipped, 1, 3), img);

        let cfg = DataConfig {
            n_train: 0,
            n_test: 2,
            ..DataConfig::default()
        };
        let samples = generate_split(&cfg, Split::Test).unwrap();
        let img = &samples[1].image;
        assert_eq!(hflip_image(&hflip_image(img, 48, 48), 48, 48), *img);
    }
}
