//! Synthetic shape scenes, netpbm file IO and scale/flip/crop augmentation.

mod netpbm;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::boundary::{make_boundary_targets, BoundaryError, BoundaryTargets, LabelMap, DEFAULT_GAMMA, IGNORE};
use crate::numerics::Tensor;

pub use netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_pgm, load_ppm, save_pgm, save_ppm};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disc, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::Spec(format!("unknown shape kind {s:?}")))
    }
}

/// Class colours; class `k` is drawn with `CLASS_COLORS[k % 16]`.
pub const CLASS_COLORS: [[f64; 3]; 16] = [
    [0.15, 0.15, 0.15],
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.25, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.20],
    [0.60, 0.60, 0.60],
    [0.50, 0.85, 0.50],
    [0.95, 0.60, 0.70],
    [0.10, 0.40, 0.40],
    [0.45, 0.10, 0.45],
    [0.85, 0.85, 0.85],
    [0.40, 0.45, 0.10],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Square canvas side in pixels, a multiple of 32.
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Classes including background 0.
    pub classes: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Shape extent range in pixels (rectangle sides, disc and triangle diameters).
    pub min_extent: usize,
    pub max_extent: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 2,
            max_shapes: 5,
            kinds: ShapeKind::ALL.to_vec(),
            classes: 4,
            noise: 0.05,
            min_extent: 16,
            max_extent: 32,
            seed: 0,
            train_samples: 512,
            val_samples: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return bad(format!("canvas size {} must be a positive multiple of 32", self.size));
        }
        if self.min_shapes > self.max_shapes {
            return bad(format!("shape range {}..={} is empty", self.min_shapes, self.max_shapes));
        }
        if self.max_shapes > 0 && self.kinds.is_empty() {
            return bad("no shape kinds".into());
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent || self.max_extent > self.size {
            return bad(format!("extent range {}..={} invalid for size {}", self.min_extent, self.max_extent, self.size));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_manifest(&self) -> String {
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        format!(
            "size={}\nmin_shapes={}\nmax_shapes={}\nkinds={}\nclasses={}\nnoise={}\nmin_extent={}\nmax_extent={}\nseed={}\ntrain_samples={}\nval_samples={}\n",
            self.size,
            self.min_shapes,
            self.max_shapes,
            kinds.join(","),
            self.classes,
            self.noise,
            self.min_extent,
            self.max_extent,
            self.seed,
            self.train_samples,
            self.val_samples,
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self, DataError> {
        let mut spec = Self::default();
        for (key, value) in parse_key_values(text)? {
            spec.set(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field from its manifest key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DataError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, DataError> {
            value.parse().map_err(|_| DataError::Spec(format!("bad value {value:?} for {key}")))
        }
        match key {
            "size" => self.size = num(key, value)?,
            "min_shapes" => self.min_shapes = num(key, value)?,
            "max_shapes" => self.max_shapes = num(key, value)?,
            "kinds" => {
                self.kinds = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
                }
            }
            "classes" => self.classes = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "min_extent" => self.min_extent = num(key, value)?,
            "max_extent" => self.max_extent = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "val_samples" => self.val_samples = num(key, value)?,
            _ => return Err(DataError::Spec(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped and
/// a repeated key is an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, DataError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(DataError::Format(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(DataError::Format(format!("line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub targets: Option<BoundaryTargets>,
}

impl Sample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self, DataError> {
        match *image.shape() {
            [3, h, w] if h == labels.height() && w == labels.width() => {}
            ref s => {
                return Err(DataError::Shape(format!(
                    "image {s:?} against {}×{} labels",
                    labels.height(),
                    labels.width()
                )))
            }
        }
        Ok(Self { image, labels, targets: None })
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// Cached targets, computed at the default width when absent.
    pub fn boundary_targets(&self) -> Result<BoundaryTargets, DataError> {
        match &self.targets {
            Some(t) => Ok(t.clone()),
            None => Ok(make_boundary_targets(&self.labels, DEFAULT_GAMMA)?),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { r0: f64, c0: f64, h: f64, w: f64 },
    Disc { cy: f64, cx: f64, radius: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn random(kind: ShapeKind, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let size = spec.size as f64;
        let extent = |rng: &mut ChaCha8Rng| rng.gen_range(spec.min_extent..=spec.max_extent);
        match kind {
            ShapeKind::Rectangle => {
                let (h, w) = (extent(rng), extent(rng));
                let r0 = rng.gen_range(0..=spec.size - h);
                let c0 = rng.gen_range(0..=spec.size - w);
                Shape::Rect { r0: r0 as f64, c0: c0 as f64, h: h as f64, w: w as f64 }
            }
            ShapeKind::Disc => {
                let radius = extent(rng) as f64 / 2.0;
                let cy = rng.gen_range(radius..=size - radius);
                let cx = rng.gen_range(radius..=size - radius);
                Shape::Disc { cy, cx, radius }
            }
            ShapeKind::Triangle => {
                let radius = extent(rng) as f64 / 2.0;
                let cy = rng.gen_range(radius..=size - radius);
                let cx = rng.gen_range(radius..=size - radius);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = std::array::from_fn(|i| {
                    let a = theta + i as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.3..0.3);
                    (cy + radius * a.sin(), cx + radius * a.cos())
                });
                Shape::Triangle { v }
            }
        }
    }

    /// Whether the point `(y, x)` (a pixel centre) lies inside.
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { r0, c0, h, w } => y >= r0 && y < r0 + h && x >= c0 && x < c0 + w,
            Shape::Disc { cy, cx, radius } => (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius,
            Shape::Triangle { v } => {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let s = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                s.iter().all(|&e| e >= 0.0) || s.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws scene `index` of `spec`: a class-0 background with shapes painted
/// back to front, each in its class colour plus Gaussian noise.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Sample, DataError> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let n = spec.size;
    let mut labels = LabelMap::filled(n, n, 0);
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..count {
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let class = rng.gen_range(1..spec.classes) as u8;
        let shape = Shape::random(kind, spec, &mut rng);
        for r in 0..n {
            for c in 0..n {
                if shape.contains(r as f64 + 0.5, c as f64 + 0.5) {
                    labels.set(r, c, class);
                }
            }
        }
    }
    let normal = Normal::new(0.0, spec.noise).map_err(|e| DataError::Spec(e.to_string()))?;
    let plane = n * n;
    let mut image = Tensor::zeros(&[3, n, n]);
    let data = image.data_mut();
    for (p, &label) in labels.labels().iter().enumerate() {
        let color = CLASS_COLORS[label as usize % CLASS_COLORS.len()];
        for (ch, base) in color.iter().enumerate() {
            data[ch * plane + p] = (base + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Sample::new(image, labels)
}

/// Explicit augmentation parameters; `offset` is the position of the output
/// canvas within the rescaled image and is negative when padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub ratio: f64,
    pub flip: bool,
    pub offset: (isize, isize),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { ratio: 1.0, flip: false, offset: (0, 0) };

    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let ratio = rng.gen_range(0.5..=2.0);
        let flip = rng.gen_bool(0.5);
        let (sh, sw) = scaled_dims(height, width, ratio);
        let mut pick = |scaled: usize, canvas: usize| -> isize {
            if scaled >= canvas {
                rng.gen_range(0..=scaled - canvas) as isize
            } else {
                -(rng.gen_range(0..=canvas - scaled) as isize)
            }
        };
        let offset = (pick(sh, height), pick(sw, width));
        Self { ratio, flip, offset }
    }
}

fn scaled_dims(h: usize, w: usize, ratio: f64) -> (usize, usize) {
    let s = |n: usize| ((n as f64 * ratio).round() as usize).max(1);
    (s(h), s(w))
}

/// Random rescale in `[0.5, 2]`, horizontal flip with probability ½ and a
/// crop or pad back to the original canvas.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let params = AugmentParams::random(sample.height(), sample.width(), rng);
    augment_with(sample, params)
}

/// Bilinear image and nearest-neighbour label resampling; padding is 0 in
/// the image and [`IGNORE`] in the labels. Cached targets are dropped.
pub fn augment_with(sample: &Sample, params: AugmentParams) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = scaled_dims(h, w, params.ratio);
    let (fy, fx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    let src = sample.image.data();
    let plane = h * w;
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut labels = LabelMap::filled(h, w, IGNORE);
    let out = image.data_mut();
    for r in 0..h {
        let sr = r as isize + params.offset.0;
        if sr < 0 || sr >= sh as isize {
            continue;
        }
        let sr = sr as usize;
        let y = ((sr as f64 + 0.5) * fy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        let ly = (((sr as f64 + 0.5) * fy) as usize).min(h - 1);
        for c in 0..w {
            let sc = c as isize + params.offset.1;
            if sc < 0 || sc >= sw as isize {
                continue;
            }
            let sc = if params.flip { sw - 1 - sc as usize } else { sc as usize };
            let x = ((sc as f64 + 0.5) * fx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let lx = (((sc as f64 + 0.5) * fx) as usize).min(w - 1);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| src[ch * plane + yy * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[ch * plane + r * w + c] = top * (1.0 - ty) + bottom * ty;
            }
            labels.set(r, c, sample.labels.get(ly, lx));
        }
    }
    Sample { image, labels, targets: None }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Training scenes use indices `0..train_samples`, validation scenes the
    /// following `val_samples` indices.
    pub fn generate(spec: &SceneSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let train_n = spec.train_samples as u64;
        let train = (0..train_n).map(|i| generate_scene(spec, i)).collect::<Result<_, _>>()?;
        let val = (0..spec.val_samples as u64).map(|i| generate_scene(spec, train_n + i)).collect::<Result<_, _>>()?;
        Ok(Self { spec: spec.clone(), train, val })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Writes images, labels, the manifest and, with `cache_targets`, the
    /// boundary (0/1) and direction (bin or 255) maps.
    pub fn write(&self, dir: &Path, cache_targets: bool) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dataset.txt"), self.spec.to_manifest())?;
        for split in [Split::Train, Split::Val] {
            let name = split.name();
            let mut kinds = vec!["images", "labels"];
            if cache_targets {
                kinds.extend(["boundary", "direction"]);
            }
            for kind in &kinds {
                fs::create_dir_all(dir.join(kind).join(name))?;
            }
            for (i, sample) in self.split(split).iter().enumerate() {
                save_ppm(&dir.join("images").join(name).join(format!("{i}.ppm")), &sample.image)?;
                save_pgm(&dir.join("labels").join(name).join(format!("{i}.pgm")), &sample.labels)?;
                if cache_targets {
                    let t = sample.boundary_targets()?;
                    let (h, w) = (t.height, t.width);
                    let boundary = LabelMap::new(h, w, t.boundary.iter().map(|&b| b as u8).collect())?;
                    let direction = LabelMap::new(h, w, t.direction.iter().map(|d| d.unwrap_or(IGNORE)).collect())?;
                    save_pgm(&dir.join("boundary").join(name).join(format!("{i}.pgm")), &boundary)?;
                    save_pgm(&dir.join("direction").join(name).join(format!("{i}.pgm")), &direction)?;
                }
            }
        }
        Ok(())
    }

    /// Reads a dataset directory; cached targets are loaded when present.
    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let spec = SceneSpec::from_manifest(&fs::read_to_string(dir.join("dataset.txt"))?)?;
        let load = |split: Split, count: usize| -> Result<Vec<Sample>, DataError> {
            let name = split.name();
            (0..count)
                .map(|i| {
                    let file = format!("{i}.ppm");
                    let image = load_ppm(&dir.join("images").join(name).join(&file))?;
                    let labels = load_pgm(&dir.join("labels").join(name).join(format!("{i}.pgm")))?;
                    let mut sample = Sample::new(image, labels)?;
                    let bpath = dir.join("boundary").join(name).join(format!("{i}.pgm"));
                    let dpath = dir.join("direction").join(name).join(format!("{i}.pgm"));
                    if bpath.exists() && dpath.exists() {
                        sample.targets = Some(read_targets(&load_pgm(&bpath)?, &load_pgm(&dpath)?)?);
                    }
                    Ok(sample)
                })
                .collect()
        };
        let train = load(Split::Train, spec.train_samples)?;
        let val = load(Split::Val, spec.val_samples)?;
        Ok(Self { spec, train, val })
    }
}

fn read_targets(boundary: &LabelMap, direction: &LabelMap) -> Result<BoundaryTargets, DataError> {
    let (h, w) = (boundary.height(), boundary.width());
    if direction.height() != h || direction.width() != w {
        return Err(DataError::Shape("boundary and direction caches disagree in size".into()));
    }
    let mut offsets = Vec::with_capacity(h * w);
    let mut dirs = Vec::with_capacity(h * w);
    for (&b, &d) in boundary.labels().iter().zip(direction.labels()) {
        let dir = match (b, d) {
            (0, IGNORE) => None,
            (1, bin) if (bin as usize) < crate::boundary::DIRECTION_BINS => Some(bin),
            _ => return Err(DataError::Format(format!("inconsistent cache entry boundary={b} direction={d}"))),
        };
        let (oy, ox) = match dir {
            Some(bin) => crate::boundary::bin_to_offset(bin as usize)?,
            None => (0, 0),
        };
        dirs.push(dir);
        offsets.push((oy as i8, ox as i8));
    }
    Ok(BoundaryTargets {
        height: h,
        width: w,
        boundary: boundary.labels().iter().map(|&b| b == 1).collect(),
        direction: dirs,
        offsets,
    })
}
