//! Data model, synthetic scene generation and incremental task splitting.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::tensor::Tensor;

pub type ClassId = i32;

pub const BACKGROUND: ClassId = 0;
/// Reserved sentinel excluded from every loss and metric.
pub const IGNORE: ClassId = -1;

/// Round-half-up with a small slack so decimal products like `0.7 × 5`
/// land on the intended side of the half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<ClassId>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: ClassId) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.data.contains(&class)
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.data.iter().copied().collect()
    }

    /// Majority vote inside each `factor × factor` cell. `IGNORE` only wins
    /// when the whole cell is ignored; ties go to the smallest class id.
    pub fn downsample_majority(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(contract(format!(
                "cannot downsample {}×{} by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(h * w);
        let mut cell = Vec::with_capacity(factor * factor);
        for y in 0..h {
            for x in 0..w {
                cell.clear();
                for dy in 0..factor {
                    for dx in 0..factor {
                        let v = self.get(y * factor + dy, x * factor + dx);
                        if v != IGNORE {
                            cell.push(v);
                        }
                    }
                }
                if cell.is_empty() {
                    out.push(IGNORE);
                    continue;
                }
                cell.sort_unstable();
                let (mut best, mut best_n) = (cell[0], 0);
                let mut i = 0;
                while i < cell.len() {
                    let j = cell[i..].iter().take_while(|&&v| v == cell[i]).count();
                    if j > best_n {
                        best = cell[i];
                        best_n = j;
                    }
                    i += j;
                }
                out.push(best);
            }
        }
        Ok(LabelMap {
            height: h,
            width: w,
            data: out,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    /// `channels × H × W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: LabelMap,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, labels: LabelMap) -> Result<Self> {
        let (_, h, w) = pixels.chw()?;
        if (h, w) != (labels.height, labels.width) {
            return Err(contract(format!(
                "pixels are {h}×{w} but labels are {}×{}",
                labels.height, labels.width
            )));
        }
        Ok(Self { pixels, labels })
    }
}

/// Class bookkeeping for one incremental step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub old_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    pub background_id: ClassId,
    pub unknown_id: ClassId,
    pub step_index: usize,
}

impl ClassPartition {
    pub fn new(
        old_classes: Vec<ClassId>,
        new_classes: Vec<ClassId>,
        background_id: ClassId,
        unknown_id: ClassId,
        step_index: usize,
    ) -> Result<Self> {
        let old: BTreeSet<_> = old_classes.iter().copied().collect();
        let new: BTreeSet<_> = new_classes.iter().copied().collect();
        if old.len() != old_classes.len() || new.len() != new_classes.len() {
            return Err(contract("duplicate class ids in partition"));
        }
        if !old.is_disjoint(&new) {
            return Err(contract("old and new classes overlap"));
        }
        if old.contains(&background_id) || new.contains(&background_id) {
            return Err(contract("background id inside a class set"));
        }
        if unknown_id == background_id
            || unknown_id == IGNORE
            || old.contains(&unknown_id)
            || new.contains(&unknown_id)
        {
            return Err(contract("unknown id collides with another id"));
        }
        if step_index == 0 && !old_classes.is_empty() {
            return Err(contract("step 0 cannot have old classes"));
        }
        Ok(Self {
            old_classes,
            new_classes,
            background_id,
            unknown_id,
            step_index,
        })
    }

    /// Old then new classes, in learning order.
    pub fn known_classes(&self) -> Vec<ClassId> {
        self.old_classes
            .iter()
            .chain(&self.new_classes)
            .copied()
            .collect()
    }

    /// Class id of every head row: background first, then known classes.
    pub fn output_classes(&self) -> Vec<ClassId> {
        std::iter::once(self.background_id)
            .chain(self.known_classes())
            .collect()
    }

    pub fn num_outputs(&self) -> usize {
        1 + self.old_classes.len() + self.new_classes.len()
    }

    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.output_classes().iter().position(|&c| c == class)
    }

    pub fn is_old(&self, class: ClassId) -> bool {
        self.old_classes.contains(&class)
    }

    pub fn is_new(&self, class: ClassId) -> bool {
        self.new_classes.contains(&class)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Overlapped,
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSchedule {
    /// Class ids introduced at each step, step 0 first.
    pub steps: Vec<Vec<ClassId>>,
    pub protocol: Protocol,
    /// Fraction of matching images kept at steps ≥ 1.
    pub data_ratio: f64,
}

impl TaskSchedule {
    pub fn validate(&self, universe: &[ClassId]) -> Result<()> {
        if self.steps.is_empty() {
            return Err(config("schedule has no steps"));
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return Err(config(format!("data ratio {} outside (0, 1]", self.data_ratio)));
        }
        let mut seen = BTreeSet::new();
        for (t, classes) in self.steps.iter().enumerate() {
            if classes.is_empty() {
                return Err(config(format!("step {t} introduces no classes")));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(config(format!("class {c} appears in more than one step")));
                }
            }
        }
        let universe: BTreeSet<_> = universe.iter().copied().collect();
        if seen != universe {
            return Err(config(format!(
                "schedule classes {seen:?} do not cover the class universe {universe:?}"
            )));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn partition(&self, step: usize, unknown_id: ClassId) -> Result<ClassPartition> {
        if step >= self.steps.len() {
            return Err(Error::Protocol(format!(
                "step {step} outside a {}-step schedule",
                self.steps.len()
            )));
        }
        let old = self.steps[..step].iter().flatten().copied().collect();
        ClassPartition::new(old, self.steps[step].clone(), BACKGROUND, unknown_id, step)
    }

    /// Number of images kept out of `available` at `step`.
    pub fn limited_count(&self, step: usize, available: usize) -> usize {
        if step == 0 || available == 0 {
            return available;
        }
        round_half_up(self.data_ratio * available as f64).clamp(1, available)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl ShapeKind {
    /// Whether offset `(dy, dx)` from the centre falls inside a shape of radius `r`.
    fn covers(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Cross => {
                (dy.abs() <= r && dx.abs() <= r / 3.0) || (dx.abs() <= r && dy.abs() <= r / 3.0)
            }
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub shape: ShapeKind,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Relative sampling frequency; defaults to 1.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class `i` of the universe gets id `i + 1`; 0 is background.
    pub classes: Vec<ClassStyle>,
    pub shapes_per_image: [usize; 2],
    /// Shape radius range in pixels.
    pub radius: [usize; 2],
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// A spec with `n` built-in class styles (at most 6).
    pub fn with_classes(n: usize, height: usize, width: usize, seed: u64) -> Self {
        let palette = [
            (ShapeKind::Square, [0.90, 0.15, 0.15]),
            (ShapeKind::Circle, [0.15, 0.85, 0.20]),
            (ShapeKind::Triangle, [0.20, 0.30, 0.95]),
            (ShapeKind::Cross, [0.95, 0.85, 0.10]),
            (ShapeKind::Diamond, [0.85, 0.20, 0.90]),
            (ShapeKind::Ring, [0.10, 0.90, 0.90]),
        ];
        Self {
            height,
            width,
            classes: palette
                .iter()
                .take(n)
                .map(|&(shape, color)| ClassStyle {
                    shape,
                    color,
                    weight: 1.0,
                })
                .collect(),
            shapes_per_image: [2, 3],
            radius: [3, 6],
            noise: 0.08,
            seed,
        }
    }

    pub fn universe(&self) -> Vec<ClassId> {
        (1..=self.classes.len() as ClassId).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(config("synthetic spec has zero classes"));
        }
        if self.classes.len() > 250 {
            return Err(config("at most 250 classes fit the label raster format"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(config("synthetic spec has zero image size"));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(config(format!("invalid shapes-per-image range [{lo}, {hi}]")));
        }
        let [rlo, rhi] = self.radius;
        if rlo == 0 || rlo > rhi || 2 * rhi >= self.height.min(self.width) {
            return Err(config(format!("invalid radius range [{rlo}, {rhi}]")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(config("noise amplitude must lie in [0, 1]"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) || !(c.weight > 0.0) {
                return Err(config(format!("class {} has an invalid color or weight", i + 1)));
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders `count` scenes. Image `i` always contains class `i mod |universe|`,
/// drawn last so it stays visible; pixel values are multiples of 1/255.
pub fn generate_dataset(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if count == 0 {
        return Err(config("dataset count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let n_classes = spec.classes.len();
    let total_weight: f64 = spec.classes.iter().map(|c| c.weight).sum();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.45));
        let mut pixels = vec![0.0; 3 * h * w];
        for (ch, &b) in base.iter().enumerate() {
            for p in 0..h * w {
                pixels[ch * h * w + p] = b;
            }
        }
        let mut labels = LabelMap::filled(h, w, BACKGROUND);
        let n_shapes = rng.random_range(spec.shapes_per_image[0]..=spec.shapes_per_image[1]);
        let mut chosen: Vec<usize> = (1..n_shapes)
            .map(|_| {
                let mut r = rng.random_range(0.0..total_weight);
                spec.classes
                    .iter()
                    .position(|c| {
                        r -= c.weight;
                        r < 0.0
                    })
                    .unwrap_or(n_classes - 1)
            })
            .collect();
        chosen.push(i % n_classes);
        for class in chosen {
            let style = &spec.classes[class];
            let r = rng.random_range(spec.radius[0]..=spec.radius[1]) as f64;
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            for y in 0..h {
                for x in 0..w {
                    if style.shape.covers(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                        labels.data[y * w + x] = class as ClassId + 1;
                        for ch in 0..3 {
                            pixels[ch * h * w + y * w + x] = style.color[ch];
                        }
                    }
                }
            }
        }
        for v in &mut pixels {
            let n = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            *v = quantize(*v + n);
        }
        out.push(LabeledImage::new(Tensor::new(vec![3, h, w], pixels)?, labels)?);
    }
    Ok(out)
}

/// Training images of `step`, relabelled so only current-step classes remain.
///
/// Overlapped keeps every image with at least one current-class pixel;
/// disjoint additionally drops images showing a future-step class. Steps
/// after the first keep the leading `round_half_up(δ·n)` images in dataset order.
pub fn split_for_step(
    dataset: &[LabeledImage],
    schedule: &TaskSchedule,
    step: usize,
) -> Result<Vec<LabeledImage>> {
    Ok(select_for_step(dataset, schedule, step)?
        .into_iter()
        .map(|i| relabel_for_step(&dataset[i], &schedule.steps[step]))
        .collect())
}

/// Indices into `dataset` that [`split_for_step`] keeps, in order.
pub fn select_for_step(
    dataset: &[LabeledImage],
    schedule: &TaskSchedule,
    step: usize,
) -> Result<Vec<usize>> {
    if step >= schedule.steps.len() {
        return Err(Error::Protocol(format!(
            "step {step} outside a {}-step schedule",
            schedule.steps.len()
        )));
    }
    let current: BTreeSet<ClassId> = schedule.steps[step].iter().copied().collect();
    let future: BTreeSet<ClassId> = schedule.steps[step + 1..].iter().flatten().copied().collect();
    let matching: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, img)| {
            let present = img.labels.classes();
            let has_current = !present.is_disjoint(&current);
            match schedule.protocol {
                Protocol::Overlapped => has_current,
                Protocol::Disjoint => has_current && present.is_disjoint(&future),
            }
        })
        .map(|(i, _)| i)
        .collect();
    let keep = schedule.limited_count(step, matching.len());
    Ok(matching[..keep].to_vec())
}

fn relabel_for_step(img: &LabeledImage, current: &[ClassId]) -> LabeledImage {
    let mut out = img.clone();
    for v in &mut out.labels.data {
        if *v != IGNORE && !current.contains(v) {
            *v = BACKGROUND;
        }
    }
    out
}

/// Relabels every class outside `seen` to background (validation ground truth).
pub fn restrict_labels(labels: &LabelMap, seen: &[ClassId]) -> LabelMap {
    let mut out = labels.clone();
    for v in &mut out.data {
        if *v != IGNORE && *v != BACKGROUND && !seen.contains(v) {
            *v = BACKGROUND;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSceneSpec,
    pub seed: u64,
    pub universe: Vec<ClassId>,
    pub count: usize,
    /// `(image, label)` file names relative to the dataset directory.
    pub files: Vec<(String, String)>,
}

const LABEL_IGNORE_BYTE: u8 = 255;

/// Writes images as 8-bit RGB PNG, labels as 8-bit grayscale PNG
/// (ignore stored as 255) and a `manifest.json`.
pub fn save_dataset(dir: &Path, spec: &SyntheticSceneSpec, images: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (c, h, w) = img.pixels.chw()?;
        if c != 3 {
            return Err(contract("only 3-channel images can be persisted"));
        }
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|ch| (img.pixels.data()[ch * h * w + y * w + x] * 255.0).round() as u8);
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = img.labels.get(y, x);
                let byte = if v == IGNORE {
                    LABEL_IGNORE_BYTE
                } else if (0..LABEL_IGNORE_BYTE as ClassId).contains(&v) {
                    v as u8
                } else {
                    return Err(contract(format!("label {v} does not fit a byte raster")));
                };
                gray.put_pixel(x as u32, y as u32, image::Luma([byte]));
            }
        }
        let (iname, lname) = (format!("{i:05}_image.png"), format!("{i:05}_label.png"));
        rgb.save(dir.join(&iname))?;
        gray.save(dir.join(&lname))?;
        files.push((iname, lname));
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        seed: spec.seed,
        universe: spec.universe(),
        count: images.len(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut images = Vec::with_capacity(manifest.files.len());
    for (iname, lname) in &manifest.files {
        let rgb = image::open(dir.join(iname))?.to_rgb8();
        let gray = image::open(dir.join(lname))?.to_luma8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut pixels = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                pixels[ch * h * w + y as usize * w + x as usize] = px.0[ch] as f64 / 255.0;
            }
        }
        let data = gray
            .pixels()
            .map(|p| if p.0[0] == LABEL_IGNORE_BYTE { IGNORE } else { p.0[0] as ClassId })
            .collect();
        images.push(LabeledImage::new(
            Tensor::new(vec![3, h, w], pixels)?,
            LabelMap {
                height: gray.height() as usize,
                width: gray.width() as usize,
                data,
            },
        )?);
    }
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(steps: Vec<Vec<ClassId>>, protocol: Protocol, ratio: f64) -> TaskSchedule {
        TaskSchedule {
            steps,
            protocol,
            data_ratio: ratio,
        }
    }

    fn image_with(labels: Vec<ClassId>) -> LabeledImage {
        let n = labels.len();
        LabeledImage::new(
            Tensor::zeros(vec![3, 1, n]),
            LabelMap {
                height: 1,
                width: n,
                data: labels,
            },
        )
        .unwrap()
    }

    #[test]
    fn generator_contract() {
        let spec = SyntheticSceneSpec::with_classes(2, 32, 32, 7);
        let images = generate_dataset(&spec, 8).unwrap();
        assert_eq!(images.len(), 8);
        for img in &images {
            let present = img.labels.classes();
            assert!(present.contains(&BACKGROUND));
            assert!(present.iter().any(|&c| c > 0));
            assert!(present.iter().all(|&c| (0..=2).contains(&c)));
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(images, generate_dataset(&spec, 8).unwrap());
    }

    #[test]
    fn every_class_appears() {
        let spec = SyntheticSceneSpec::with_classes(5, 32, 32, 3);
        let images = generate_dataset(&spec, 20).unwrap();
        for c in spec.universe() {
            assert!(images.iter().any(|i| i.labels.contains(c)), "class {c} missing");
        }
    }

    #[test]
    fn labels_match_rendered_colors() {
        let mut spec = SyntheticSceneSpec::with_classes(3, 24, 24, 11);
        spec.noise = 0.0;
        for img in generate_dataset(&spec, 6).unwrap() {
            for p in 0..24 * 24 {
                let l = img.labels.data[p];
                if l > 0 {
                    let color = spec.classes[(l - 1) as usize].color;
                    for (ch, &c) in color.iter().enumerate() {
                        assert_eq!(img.pixels.data()[ch * 576 + p], quantize(c));
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSceneSpec::with_classes(0, 32, 32, 7);
        assert!(matches!(generate_dataset(&spec, 4), Err(Error::Config(_))));
        spec = SyntheticSceneSpec::with_classes(2, 0, 32, 7);
        assert!(matches!(generate_dataset(&spec, 4), Err(Error::Config(_))));
        spec = SyntheticSceneSpec::with_classes(2, 32, 32, 7);
        assert!(matches!(generate_dataset(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn overlapped_split_relabels_everything_else_to_background() {
        let data = vec![
            image_with(vec![0, 1, 2]),
            image_with(vec![0, 2, 3]),
            image_with(vec![0, 1, 1]),
            image_with(vec![IGNORE, 2, 0]),
        ];
        let s = schedule(vec![vec![1], vec![2], vec![3]], Protocol::Overlapped, 1.0);
        let step1 = split_for_step(&data, &s, 1).unwrap();
        assert_eq!(step1.len(), 3);
        assert_eq!(step1[0].labels.data, vec![0, 0, 2]);
        assert_eq!(step1[1].labels.data, vec![0, 2, 0]);
        assert_eq!(step1[2].labels.data, vec![IGNORE, 2, 0]);
        // input untouched
        assert_eq!(data[1].labels.data, vec![0, 2, 3]);
    }

    #[test]
    fn disjoint_split_drops_future_classes() {
        let data = vec![image_with(vec![0, 1, 2]), image_with(vec![0, 2, 3]), image_with(vec![2, 2, 0]), image_with(vec![1, 0, 0])];
        let s = schedule(vec![vec![1], vec![2], vec![3]], Protocol::Disjoint, 1.0);
        assert_eq!(select_for_step(&data, &s, 1).unwrap(), vec![0, 2]);
        assert_eq!(select_for_step(&data, &s, 0).unwrap(), vec![3]);
    }

    #[test]
    fn ratio_limits_are_prefixes() {
        let data: Vec<_> = (0..10).map(|_| image_with(vec![0, 2])).collect();
        let full = schedule(vec![vec![1], vec![2]], Protocol::Overlapped, 1.0);
        assert_eq!(split_for_step(&data, &full, 1).unwrap().len(), 10);
        let half = schedule(vec![vec![1], vec![2]], Protocol::Overlapped, 0.25);
        assert_eq!(select_for_step(&data, &half, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn out_of_range_step_is_protocol_error() {
        let s = schedule(vec![vec![1]], Protocol::Overlapped, 1.0);
        assert!(matches!(split_for_step(&[], &s, 1), Err(Error::Protocol(_))));
        assert!(matches!(s.partition(3, 9), Err(Error::Protocol(_))));
    }

    #[test]
    fn limited_counts_follow_round_half_up() {
        let s = |r| schedule(vec![vec![1], vec![2]], Protocol::Overlapped, r);
        assert_eq!(s(0.5).limited_count(1, 487), 244);
        assert_eq!(s(0.1).limited_count(1, 487), 49);
        assert_eq!(s(0.1).limited_count(0, 487), 487);
        assert_eq!(s(0.01).limited_count(1, 3), 1);
    }

    #[test]
    fn schedule_validation() {
        let u = vec![1, 2, 3];
        assert!(schedule(vec![vec![1, 2], vec![3]], Protocol::Overlapped, 1.0).validate(&u).is_ok());
        assert!(schedule(vec![vec![1, 2], vec![2, 3]], Protocol::Overlapped, 1.0).validate(&u).is_err());
        assert!(schedule(vec![vec![1, 2]], Protocol::Overlapped, 1.0).validate(&u).is_err());
        assert!(schedule(vec![vec![1, 2], vec![3]], Protocol::Overlapped, 0.0).validate(&u).is_err());
    }

    #[test]
    fn partition_invariants() {
        assert!(ClassPartition::new(vec![1], vec![1], 0, 9, 1).is_err());
        assert!(ClassPartition::new(vec![], vec![0], 0, 9, 0).is_err());
        assert!(ClassPartition::new(vec![1], vec![2], 0, 2, 1).is_err());
        assert!(ClassPartition::new(vec![1], vec![2], 0, 9, 0).is_err());
        let p = ClassPartition::new(vec![3, 1], vec![2], 0, 9, 1).unwrap();
        assert_eq!(p.output_classes(), vec![0, 3, 1, 2]);
        assert_eq!(p.row_of(2), Some(3));
    }

    #[test]
    fn majority_downsampling() {
        let l = LabelMap {
            height: 2,
            width: 4,
            data: vec![1, 1, IGNORE, IGNORE, 2, 3, IGNORE, IGNORE],
        };
        let d = l.downsample_majority(2).unwrap();
        assert_eq!(d.data, vec![1, IGNORE]);
        let tie = LabelMap {
            height: 2,
            width: 2,
            data: vec![3, 2, 2, 3],
        };
        assert_eq!(tie.downsample_majority(2).unwrap().data, vec![2]);
    }

    #[test]
    fn dataset_round_trips_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec::with_classes(3, 16, 16, 5);
        let mut images = generate_dataset(&spec, 4).unwrap();
        images[0].labels.data[0] = IGNORE;
        save_dataset(dir.path(), &spec, &images).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.universe, vec![1, 2, 3]);
        assert_eq!(loaded, images);
    }
}
