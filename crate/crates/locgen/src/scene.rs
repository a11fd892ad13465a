//! Synthetic scenes and their ground-truth placement rules.
//!
//! A scene is a stack of binary channels on a square pixel grid: one
//! occupancy channel per object class, one support-surface channel, and one
//! derived free-space channel. Whether a box is a plausible placement for a
//! class is decided by four deterministic rules:
//!
//! - R1: the box's bottom edge rests on a support row (supported across its
//!   whole horizontal span),
//! - R2: the box's interior does not overlap any existing object,
//! - R3: the box's area fraction lies inside the class's size band,
//! - R4: the box's aspect ratio lies inside the class's shape band.
//!
//! The rule set plays the role human annotators play for real photographs:
//! it labels arbitrary candidate boxes as positive or negative, and the
//! annotation sampler below uses it to emit sparse labeled sets — a handful
//! of positives, a larger handful of negatives, far fewer than the anchor
//! lattice the sparsity statistic is measured against. Negatives are not
//! uniformly dumb: some float above surfaces, some clip existing objects by
//! a small margin, some are oversized — graded difficulty near the boundary
//! of the rule set, which is what makes the downstream preference signal
//! informative.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quantize, BBox};
use crate::rng::Rng;

/// Dense class index. The class universe is the fixed table in
/// [`CLASS_SPECS`]; configs may use a prefix of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

/// Size and shape bands for one object class.
#[derive(Debug, Clone, Copy)]
pub struct ClassSpec {
    pub name: &'static str,
    /// Allowed box area as a fraction of the image area, inclusive band.
    pub area_frac: (f64, f64),
    /// Allowed width/height ratio, inclusive band.
    pub aspect: (f64, f64),
}

/// The class universe. Bands are disjoint enough that classes look
/// different, wide enough that every class fits on a typical surface.
pub const CLASS_SPECS: [ClassSpec; 4] = [
    ClassSpec { name: "crate", area_frac: (0.020, 0.060), aspect: (0.9, 1.8) },
    ClassSpec { name: "bottle", area_frac: (0.004, 0.020), aspect: (0.25, 0.60) },
    ClassSpec { name: "book", area_frac: (0.010, 0.040), aspect: (1.6, 3.5) },
    ClassSpec { name: "ball", area_frac: (0.008, 0.030), aspect: (0.85, 1.18) },
];

/// Looks up the band spec for a class id, erroring on unknown ids.
pub fn class_spec(num_classes: u32, class: ClassId) -> Result<&'static ClassSpec> {
    if class.0 >= num_classes || class.0 as usize >= CLASS_SPECS.len() {
        return Err(Error::InvalidArgument(format!(
            "unknown class id {} (num_classes {num_classes})",
            class.0
        )));
    }
    Ok(&CLASS_SPECS[class.0 as usize])
}

// ---------------------------------------------------------------------------
// Scene.

/// A synthetic background: binary channels over an `image_size²` grid.
///
/// Channel layout: `0..num_classes` are per-class occupancy, then the
/// support-surface channel, then the free-space channel (the complement of
/// everything occupied or supporting).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    scene_id: String,
    image_size: u32,
    num_classes: u32,
    seed: u64,
    channels: Vec<Vec<u8>>,
}

impl Scene {
    /// Reassembles a scene from raw channels (e.g. decoded from disk),
    /// validating every invariant.
    pub fn from_channels(
        scene_id: String,
        image_size: u32,
        num_classes: u32,
        seed: u64,
        channels: Vec<Vec<u8>>,
    ) -> Result<Scene> {
        let scene = Scene { scene_id, image_size, num_classes, seed, channels };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_size as usize * self.image_size as usize;
        if self.channels.len() != self.num_channels() {
            return Err(Error::Invariant(format!(
                "scene {}: {} channels, expected {}",
                self.scene_id,
                self.channels.len(),
                self.num_channels()
            )));
        }
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::Invariant(format!(
                    "scene {}: channel {c} has {} cells, expected {n}",
                    self.scene_id,
                    ch.len()
                )));
            }
            if ch.iter().any(|&v| v > 1) {
                return Err(Error::Invariant(format!(
                    "scene {}: channel {c} is not binary",
                    self.scene_id
                )));
            }
        }
        // Free space is exactly the complement of occupancy and support.
        let free = self.free();
        for i in 0..n {
            let occupied = (0..=self.num_classes as usize).any(|c| self.channels[c][i] == 1);
            if free[i] != u8::from(!occupied) {
                return Err(Error::Invariant(format!(
                    "scene {}: free-space channel wrong at cell {i}",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Class occupancy channels + support + free.
    pub fn num_channels(&self) -> usize {
        self.num_classes as usize + 2
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        &self.channels[c]
    }

    pub fn class_occupancy(&self, class: ClassId) -> &[u8] {
        &self.channels[class.0 as usize]
    }

    pub fn support(&self) -> &[u8] {
        &self.channels[self.num_classes as usize]
    }

    pub fn free(&self) -> &[u8] {
        &self.channels[self.num_classes as usize + 1]
    }

    fn cell(&self, c: usize, x: u32, y: u32) -> u8 {
        self.channels[c][(y * self.image_size + x) as usize]
    }

    /// True if any class-occupancy channel is set at (x, y).
    fn occupied(&self, x: u32, y: u32) -> bool {
        (0..self.num_classes as usize).any(|c| self.cell(c, x, y) == 1)
    }
}

/// Scene-generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub image_size: u32,
    pub num_classes: u32,
    /// Inclusive range for the number of support surfaces.
    pub min_surfaces: u32,
    pub max_surfaces: u32,
    /// Inclusive range for the number of pre-existing objects.
    pub min_objects: u32,
    pub max_objects: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            num_classes: 4,
            min_surfaces: 1,
            max_surfaces: 3,
            min_objects: 0,
            max_objects: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} too small for scene generation",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.num_classes as usize > CLASS_SPECS.len() {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 1..={}, got {}",
                CLASS_SPECS.len(),
                self.num_classes
            )));
        }
        if self.min_surfaces == 0 || self.min_surfaces > self.max_surfaces {
            return Err(Error::InvalidConfig(
                "surface count range must be nonempty and ≥ 1".into(),
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidConfig("object count range is empty".into()));
        }
        Ok(())
    }
}

/// One support surface: a horizontal run of support pixels on a single row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Surface {
    pub row: u32,
    /// Column span [x0, x1).
    pub x0: u32,
    pub x1: u32,
}

impl Surface {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
}

/// Extracts the support surfaces of a scene as row segments.
pub fn surface_segments(scene: &Scene) -> Vec<Surface> {
    let w = scene.image_size;
    let support = scene.support();
    let mut out = Vec::new();
    for y in 0..w {
        let mut x = 0;
        while x < w {
            if support[(y * w + x) as usize] == 1 {
                let x0 = x;
                while x < w && support[(y * w + x) as usize] == 1 {
                    x += 1;
                }
                out.push(Surface { row: y, x0, x1: x });
            } else {
                x += 1;
            }
        }
    }
    out
}

/// Column extents `[x0, x1)` of objects resting on a surface, found by
/// scanning the occupancy union one row above the surface row.
fn objects_on(scene: &Scene, surf: &Surface) -> Vec<(u32, u32)> {
    if surf.row == 0 {
        return Vec::new();
    }
    let y = surf.row - 1;
    let mut out = Vec::new();
    let mut x = surf.x0;
    while x < surf.x1 {
        if scene.occupied(x, y) {
            let x0 = x;
            while x < surf.x1 && scene.occupied(x, y) {
                x += 1;
            }
            out.push((x0, x));
        } else {
            x += 1;
        }
    }
    out
}

/// Generates a scene deterministically from (config, seed): support
/// surfaces at distinct rows, then existing objects resting on them without
/// mutual overlap, then the derived free-space channel.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let size = config.image_size;
    let n = (size * size) as usize;
    let mut channels = vec![vec![0u8; n]; config.num_classes as usize + 2];
    let mut rng = Rng::new(seed);

    // Support surfaces: distinct, vertically separated rows in the lower
    // two-thirds of the image, wide enough to host every class.
    let n_surfaces = rng.range_u32(config.min_surfaces, config.max_surfaces);
    let mut surfaces: Vec<Surface> = Vec::new();
    let min_row = size / 3;
    let max_row = size - 2;
    for _ in 0..n_surfaces {
        for _attempt in 0..30 {
            let row = rng.range_u32(min_row, max_row);
            if surfaces.iter().any(|s| row.abs_diff(s.row) < 5) {
                continue;
            }
            let max_width = size - 4;
            let width = rng.range_u32((size * 3 / 8).max(8).min(max_width), max_width);
            let x0 = rng.range_u32(2, size - 2 - width);
            surfaces.push(Surface { row, x0, x1: x0 + width });
            break;
        }
    }
    if surfaces.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "could not place any support surface at image_size {size}"
        )));
    }
    let support_idx = config.num_classes as usize;
    for s in &surfaces {
        for x in s.x0..s.x1 {
            channels[support_idx][(s.row * size + x) as usize] = 1;
        }
    }

    // Existing objects: class-shaped boxes resting on surfaces, mutually
    // non-overlapping. Placement failures after bounded retries are skipped
    // rather than fatal — a sparser scene is still a valid scene.
    let n_objects = rng.range_u32(config.min_objects, config.max_objects);
    let mut placed: Vec<(u32, u32, u32, u32)> = Vec::new(); // x0, y0, x1, y1
    for _ in 0..n_objects {
        'attempts: for _attempt in 0..40 {
            let class = rng.range_u32(0, config.num_classes - 1);
            let spec = &CLASS_SPECS[class as usize];
            let surf = surfaces[rng.gen_range(surfaces.len() as u64) as usize];
            let Some((w, h)) = sample_extent(&mut rng, spec, size) else {
                continue;
            };
            if h >= surf.row || w > surf.width() {
                continue;
            }
            let x0 = rng.range_u32(surf.x0, surf.x1 - w);
            let (y0, y1) = (surf.row - h, surf.row);
            for &(px0, py0, px1, py1) in &placed {
                if x0 < px1 && px0 < x0 + w && y0 < py1 && py0 < y1 {
                    continue 'attempts;
                }
            }
            for y in y0..y1 {
                for x in x0..x0 + w {
                    channels[class as usize][(y * size + x) as usize] = 1;
                }
            }
            placed.push((x0, y0, x0 + w, y1));
            break;
        }
    }

    // Free space: complement of everything drawn so far.
    let free_idx = config.num_classes as usize + 1;
    for i in 0..n {
        let occupied = (0..=support_idx).any(|c| channels[c][i] == 1);
        channels[free_idx][i] = u8::from(!occupied);
    }

    Scene::from_channels(
        format!("{seed:016x}"),
        size,
        config.num_classes,
        seed,
        channels,
    )
}

/// Draws integer box extents (w, h) from a class band: log-uniform area,
/// log-uniform aspect.
fn sample_extent(rng: &mut Rng, spec: &ClassSpec, image_size: u32) -> Option<(u32, u32)> {
    let img_area = f64::from(image_size) * f64::from(image_size);
    let area = (rng.range_f64(spec.area_frac.0.ln(), spec.area_frac.1.ln())).exp() * img_area;
    let aspect = (rng.range_f64(spec.aspect.0.ln(), spec.aspect.1.ln())).exp();
    let h = (area / aspect).sqrt().round().max(2.0);
    let w = (h * aspect).round().max(2.0);
    if w >= f64::from(image_size) || h >= f64::from(image_size) {
        return None;
    }
    Some((w as u32, h as u32))
}

// ---------------------------------------------------------------------------
// Plausibility oracle.

/// Decides whether `b` is a plausible placement of `class` in `scene`.
///
/// The box is reduced to its integer pixel footprint (floor/ceil of the
/// continuous corners); rules R1–R4 from the module docs are then evaluated
/// on that footprint and on the continuous area/aspect. Pure and
/// deterministic.
pub fn plausibility(scene: &Scene, class: ClassId, b: &BBox) -> Result<bool> {
    let spec = class_spec(scene.num_classes, class)?;
    if b.image_size != scene.image_size {
        return Err(Error::InvalidArgument(format!(
            "box image_size {} does not match scene image_size {}",
            b.image_size, scene.image_size
        )));
    }
    if !b.is_canonical() {
        return Err(Error::InvalidArgument(
            "plausibility requires a canonical box".into(),
        ));
    }
    let size = scene.image_size;

    // R3/R4 first: pure arithmetic on the continuous box.
    if b.height() <= 0.0 || b.width() <= 0.0 {
        return Ok(false);
    }
    let area_frac = b.area() / (f64::from(size) * f64::from(size));
    if area_frac < spec.area_frac.0 || area_frac > spec.area_frac.1 {
        return Ok(false);
    }
    let aspect = b.width() / b.height();
    if aspect < spec.aspect.0 || aspect > spec.aspect.1 {
        return Ok(false);
    }

    // Integer footprint. Columns [ix1, ix2), interior rows [iy1, bottom).
    let ix1 = (b.x1.floor() as i64).clamp(0, i64::from(size) - 1) as u32;
    let ix2 = (b.x2.ceil() as i64).clamp(1, i64::from(size)) as u32;
    let iy1 = (b.y1.floor() as i64).clamp(0, i64::from(size) - 1) as u32;
    let bottom = b.y2.floor() as i64;
    if ix2 <= ix1 {
        return Ok(false);
    }

    // R1: the bottom edge must rest on a support row inside the image, and
    // the support must hold across the entire horizontal span.
    if bottom < 0 || bottom >= i64::from(size) {
        return Ok(false);
    }
    let bottom = bottom as u32;
    let support = scene.support();
    for x in ix1..ix2 {
        if support[(bottom * size + x) as usize] == 0 {
            return Ok(false);
        }
    }

    // R2: interior free of existing objects (rows above the resting row).
    for y in iy1..bottom {
        for x in ix1..ix2 {
            if scene.occupied(x, y) {
                return Ok(false);
            }
        }
    }

    Ok(true)
}

// ---------------------------------------------------------------------------
// Annotations.

/// Plausibility verdict attached to a labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub label: Label,
}

/// Sparse labels for one (scene, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub scene_id: String,
    pub class: ClassId,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn positives(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.label == Label::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| a.label == Label::Negative)
    }

    pub fn num_positives(&self) -> usize {
        self.positives().count()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives().count()
    }
}

/// Annotation-sampling knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationConfig {
    /// Hard caps on labels kept per set.
    pub max_pos: u32,
    pub max_neg: u32,
    /// Per-set label-count targets, drawn uniformly from these inclusive
    /// ranges so set sizes vary the way crowd-sourced annotation counts do.
    pub target_pos: (u32, u32),
    pub target_neg: (u32, u32),
    /// Candidate draws before giving up on unmet targets.
    pub proposal_budget: u32,
    /// Corner-lattice stride for the sparsity statistic.
    pub anchor_stride: u32,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            max_pos: 20,
            max_neg: 40,
            target_pos: (3, 20),
            target_neg: (15, 40),
            proposal_budget: 4000,
            anchor_stride: 8,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_pos == 0 || self.max_neg == 0 || self.proposal_budget == 0 {
            return Err(Error::InvalidConfig(
                "annotation caps and budget must be positive".into(),
            ));
        }
        if self.target_pos.0 > self.target_pos.1 || self.target_neg.0 > self.target_neg.1 {
            return Err(Error::InvalidConfig("annotation target ranges are empty".into()));
        }
        if self.target_pos.1 > self.max_pos || self.target_neg.1 > self.max_neg {
            return Err(Error::InvalidConfig(
                "annotation targets exceed the hard caps".into(),
            ));
        }
        if self.anchor_stride == 0 {
            return Err(Error::InvalidConfig("anchor_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Size of the reference anchor lattice: corner coordinates on a
/// `stride`-pixel grid, counted as (image_size/stride + 1)⁴ corner tuples.
/// Annotation sets must stay below 1% of this.
pub fn anchor_count(image_size: u32, stride: u32) -> u64 {
    let per_axis = u64::from(image_size / stride) + 1;
    per_axis.pow(4)
}

/// Draws a labeled annotation set for one (scene, class) pair.
///
/// Candidates come from a fixed mixture: rule-directed surface placements
/// (mostly positive), floated / object-clipping / oversized perturbations
/// (near-boundary negatives), large free boxes, and uniform boxes. Every
/// candidate is labeled by [`plausibility`] — construction only steers the
/// mixture, it never decides a label. Deterministic in (scene, class,
/// config, seed).
pub fn sample_annotations(
    scene: &Scene,
    class: ClassId,
    config: &AnnotationConfig,
    seed: u64,
) -> Result<AnnotationSet> {
    config.validate()?;
    let spec = class_spec(scene.num_classes, class)?;
    let size = scene.image_size;
    let mut rng = Rng::new(seed);

    let target_pos = rng.range_u32(config.target_pos.0, config.target_pos.1).min(config.max_pos);
    let target_neg = rng.range_u32(config.target_neg.0, config.target_neg.1).min(config.max_neg);

    let surfaces = surface_segments(scene);
    let clippable: Vec<(Surface, (u32, u32))> = surfaces
        .iter()
        .flat_map(|s| objects_on(scene, s).into_iter().map(move |o| (*s, o)))
        .collect();

    let mut positives: Vec<BBox> = Vec::new();
    let mut negatives: Vec<BBox> = Vec::new();
    let mut seen: HashSet<[u32; 4]> = HashSet::new();

    for _ in 0..config.proposal_budget {
        if positives.len() as u32 >= target_pos && negatives.len() as u32 >= target_neg {
            break;
        }
        // The negative mix balances two audiences: float/clip/oversize sit
        // next to good placements (hard negatives for a trained proposer),
        // while large-free/uniform sit in the bulk of box space where a
        // scene-blind proposer lands, keeping the baseline's false-positive
        // rate honest.
        let roll = rng.next_f64();
        let candidate = if roll < 0.40 {
            propose_on_surface(&mut rng, &surfaces, spec, size)
        } else if roll < 0.47 {
            propose_float(&mut rng, &surfaces, spec, size)
        } else if roll < 0.53 && !clippable.is_empty() {
            propose_clip(&mut rng, &clippable, spec, size)
        } else if roll < 0.59 {
            propose_oversize(&mut rng, &surfaces, spec, size)
        } else if roll < 0.81 {
            propose_large_free(&mut rng, spec, size)
        } else {
            propose_uniform(&mut rng, size)
        };
        let Some(bbox) = candidate else { continue };
        let key = match quantize(&bbox) {
            Ok(t) => t.tokens(),
            Err(_) => continue,
        };
        if !seen.insert(key) {
            continue;
        }
        if plausibility(scene, class, &bbox)? {
            if (positives.len() as u32) < target_pos {
                positives.push(bbox);
            }
        } else if (negatives.len() as u32) < target_neg {
            negatives.push(bbox);
        }
    }

    let total = (positives.len() + negatives.len()) as u64;
    let lattice = anchor_count(size, config.anchor_stride);
    if total * 100 >= lattice {
        return Err(Error::Invariant(format!(
            "annotation set for scene {} class {} has {total} labels, ≥1% of the {lattice}-anchor lattice",
            scene.scene_id(),
            class.0
        )));
    }

    let mut annotations: Vec<Annotation> = Vec::with_capacity(total as usize);
    annotations.extend(positives.into_iter().map(|bbox| Annotation { bbox, label: Label::Positive }));
    annotations.extend(negatives.into_iter().map(|bbox| Annotation { bbox, label: Label::Negative }));
    Ok(AnnotationSet { scene_id: scene.scene_id().to_string(), class, annotations })
}

/// Integer box resting on a random surface with class-band extents.
fn propose_on_surface(
    rng: &mut Rng,
    surfaces: &[Surface],
    spec: &ClassSpec,
    size: u32,
) -> Option<BBox> {
    if surfaces.is_empty() {
        return None;
    }
    let surf = surfaces[rng.gen_range(surfaces.len() as u64) as usize];
    let (w, h) = sample_extent(rng, spec, size)?;
    if w > surf.width() || h > surf.row {
        return None;
    }
    let x1 = rng.range_u32(surf.x0, surf.x1 - w);
    BBox::new(
        f64::from(x1),
        f64::from(surf.row - h),
        f64::from(x1 + w),
        f64::from(surf.row),
        size,
    )
    .ok()
}

/// Surface placement lifted off its surface by 22–35% of its height — the
/// canonical hard negative (moderate IoU with a real positive, rule R1
/// broken).
fn propose_float(
    rng: &mut Rng,
    surfaces: &[Surface],
    spec: &ClassSpec,
    size: u32,
) -> Option<BBox> {
    let base = propose_on_surface(rng, surfaces, spec, size)?;
    let h = base.height();
    let delta = ((rng.range_f64(0.22, 0.35) * h).round() as u32).max(2);
    if base.y1 < f64::from(delta) {
        return None;
    }
    BBox::new(
        base.x1,
        base.y1 - f64::from(delta),
        base.x2,
        base.y2 - f64::from(delta),
        size,
    )
    .ok()
}

/// Box resting correctly but clipping the side of an existing object by
/// 5–15% of its own width — the negative that false-positive leakage is
/// measured against, because a valid placement exists one small shift away.
fn propose_clip(
    rng: &mut Rng,
    clippable: &[(Surface, (u32, u32))],
    spec: &ClassSpec,
    size: u32,
) -> Option<BBox> {
    let (surf, (ox0, ox1)) = clippable[rng.gen_range(clippable.len() as u64) as usize];
    let (w, h) = sample_extent(rng, spec, size)?;
    if h > surf.row {
        return None;
    }
    let clip = ((rng.range_f64(0.05, 0.15) * f64::from(w)).round() as u32).max(1);
    // Clip the object's right flank or left flank, whichever fits.
    let right_x1 = ox1.checked_sub(clip)?;
    let left_x1 = (ox0 + clip).checked_sub(w);
    let x1 = if right_x1 + w <= surf.x1 && rng.next_f64() < 0.5 {
        right_x1
    } else if let Some(lx) = left_x1 {
        if lx < surf.x0 {
            return None;
        }
        lx
    } else {
        return None;
    };
    if x1 < surf.x0 || x1 + w > surf.x1 {
        return None;
    }
    BBox::new(
        f64::from(x1),
        f64::from(surf.row - h),
        f64::from(x1 + w),
        f64::from(surf.row),
        size,
    )
    .ok()
}

/// Surface placement with area 1.6–2.5× the class maximum (rule R3 broken).
/// The lower bound stays far enough above 1 that a correctly sized box in
/// the same spot cannot reach 0.7 IoU with the oversized one.
fn propose_oversize(
    rng: &mut Rng,
    surfaces: &[Surface],
    spec: &ClassSpec,
    size: u32,
) -> Option<BBox> {
    if surfaces.is_empty() {
        return None;
    }
    let surf = surfaces[rng.gen_range(surfaces.len() as u64) as usize];
    let img_area = f64::from(size) * f64::from(size);
    let area = rng.range_f64(1.6, 2.5) * spec.area_frac.1 * img_area;
    let aspect = (rng.range_f64(spec.aspect.0.ln(), spec.aspect.1.ln())).exp();
    let h = (area / aspect).sqrt().round().max(2.0) as u32;
    let w = ((f64::from(h) * aspect).round().max(2.0)) as u32;
    if w > surf.width() || h > surf.row {
        return None;
    }
    let x1 = rng.range_u32(surf.x0, surf.x1 - w);
    BBox::new(
        f64::from(x1),
        f64::from(surf.row - h),
        f64::from(x1 + w),
        f64::from(surf.row),
        size,
    )
    .ok()
}

/// Large box placed anywhere — breaks both the size band and (almost
/// always) the support rule. These negatives sit in the bulk of uniform
/// box space, so uniform-random baselines hit them at a healthy rate.
fn propose_large_free(rng: &mut Rng, spec: &ClassSpec, size: u32) -> Option<BBox> {
    let img_area = f64::from(size) * f64::from(size);
    let frac = rng.range_f64(3.0 * spec.area_frac.1, (8.0 * spec.area_frac.1).min(0.4));
    let aspect = rng.range_f64(0.6, 1.7);
    let h = ((frac * img_area / aspect).sqrt().round() as u32).clamp(4, size - 2);
    let w = ((f64::from(h) * aspect).round() as u32).clamp(4, size - 2);
    let x1 = rng.range_u32(0, size - w);
    let y1 = rng.range_u32(0, size - h);
    BBox::new(
        f64::from(x1),
        f64::from(y1),
        f64::from(x1 + w),
        f64::from(y1 + h),
        size,
    )
    .ok()
}

/// Uniform integer box (any shape, anywhere).
fn propose_uniform(rng: &mut Rng, size: u32) -> Option<BBox> {
    let x1 = rng.range_u32(0, size - 2);
    let x2 = rng.range_u32(x1 + 1, size - 1) + 1;
    let y1 = rng.range_u32(0, size - 2);
    let y2 = rng.range_u32(y1 + 1, size - 1) + 1;
    BBox::new(f64::from(x1), f64::from(y1), f64::from(x2), f64::from(y2), size).ok()
}

// ---------------------------------------------------------------------------
// Datasets.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One split of the benchmark: scenes plus their annotation sets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub scenes: Vec<Scene>,
    pub sets: Vec<AnnotationSet>,
}

impl Dataset {
    pub fn new(split: Split, scenes: Vec<Scene>, sets: Vec<AnnotationSet>) -> Result<Dataset> {
        let d = Dataset { split, scenes, sets };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<&str> = self.scenes.iter().map(Scene::scene_id).collect();
        if ids.len() != self.scenes.len() {
            return Err(Error::Invariant("duplicate scene_id in dataset".into()));
        }
        for set in &self.sets {
            if !ids.contains(set.scene_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "annotation set references unknown scene {}",
                    set.scene_id
                )));
            }
            if set.num_positives() == 0 {
                return Err(Error::Invariant(format!(
                    "annotation set for scene {} class {} has no positives",
                    set.scene_id, set.class.0
                )));
            }
        }
        Ok(())
    }

    /// Looks up a scene by id (linear scan; datasets are small).
    pub fn scene(&self, scene_id: &str) -> Result<&Scene> {
        self.scenes
            .iter()
            .find(|s| s.scene_id() == scene_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene_id {scene_id}")))
    }
}

/// Full benchmark-generation config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub annotation: AnnotationConfig,
    pub n_train: u32,
    pub n_test: u32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            annotation: AnnotationConfig::default(),
            n_train: 2000,
            n_test: 200,
        }
    }
}

// Stream tags for splitting the dataset seed.
const STREAM_TRAIN_SCENES: u64 = 1;
const STREAM_TEST_SCENES: u64 = 2;
const STREAM_ANNOTATIONS: u64 = 3;

/// Builds the (train, test) dataset pair deterministically from one seed.
///
/// Scenes get per-index seed substreams; every (scene, class) pair gets an
/// annotation substream. Pairs that yield no positive are dropped — the
/// training objective needs at least one positive per example.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    config.scene.validate()?;
    config.annotation.validate()?;
    if config.n_train == 0 || config.n_test == 0 {
        return Err(Error::InvalidConfig("dataset splits must be nonempty".into()));
    }
    let root = Rng::new(seed);
    let train = build_split(
        config,
        Split::Train,
        config.n_train,
        &root.split(STREAM_TRAIN_SCENES),
        &root.split(STREAM_ANNOTATIONS).split(0),
    )?;
    let test = build_split(
        config,
        Split::Test,
        config.n_test,
        &root.split(STREAM_TEST_SCENES),
        &root.split(STREAM_ANNOTATIONS).split(1),
    )?;
    let train_ids: HashSet<&str> = train.scenes.iter().map(Scene::scene_id).collect();
    if test.scenes.iter().any(|s| train_ids.contains(s.scene_id())) {
        return Err(Error::Invariant("train/test scene ids overlap".into()));
    }
    Ok((train, test))
}

fn build_split(
    config: &DatasetConfig,
    split: Split,
    count: u32,
    scene_stream: &Rng,
    ann_stream: &Rng,
) -> Result<Dataset> {
    use rayon::prelude::*;

    let scenes: Vec<Scene> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut s = scene_stream.split(u64::from(i));
            generate_scene(&config.scene, s.next_u64())
        })
        .collect::<Result<_>>()?;

    let sets: Vec<AnnotationSet> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut out = Vec::new();
            for class in 0..config.scene.num_classes {
                let mut s = ann_stream.split(i as u64).split(u64::from(class));
                let set =
                    sample_annotations(scene, ClassId(class), &config.annotation, s.next_u64())?;
                if set.num_positives() > 0 {
                    out.push(set);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<AnnotationSet>>>>()?
        .into_iter()
        .flatten()
        .collect();

    Dataset::new(split, scenes, sets)
}

/// A (preferred, rejected) training pair: one positive against one
/// uniformly drawn negative from the same annotation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub scene_id: String,
    pub class: ClassId,
    pub preferred: BBox,
    pub rejected: BBox,
}

/// Pairs every positive in every set with one uniformly sampled negative
/// from the same set. Sets without negatives contribute nothing.
pub fn build_preference_dataset(dataset: &Dataset, seed: u64) -> Vec<PreferencePair> {
    let root = Rng::new(seed);
    let mut pairs = Vec::new();
    for (i, set) in dataset.sets.iter().enumerate() {
        let negatives: Vec<&BBox> = set.negatives().map(|a| &a.bbox).collect();
        if negatives.is_empty() {
            continue;
        }
        let mut rng = root.split(i as u64);
        for pos in set.positives() {
            let neg = negatives[rng.gen_range(negatives.len() as u64) as usize];
            pairs.push(PreferencePair {
                scene_id: set.scene_id.clone(),
                class: set.class,
                preferred: pos.bbox,
                rejected: *neg,
            });
        }
    }
    pairs
}
