//! Procedural 2D tabletop-analogue scenes with ground-truth object layers.
//!
//! Objects are placed back to front. Like a camera looking down at a table,
//! farther objects sit higher in the frame and appear slightly smaller, so
//! depth order follows placement order. Each object casts a flat elliptical
//! shadow onto the background only. All stored values are quantized to
//! 8-bit levels so that a dataset read back from PNG composites to exactly
//! what was written.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{
    apply_shadows, composite, panoptic_project, visibility_fraction, CompositeImage, LayerImage,
    LayerStack, PanopticMap, ShadowMap, CANVAS_GRAY, DEFAULT_DELTA,
};
use crate::error::{Error, Result};

/// Objects whose visible share falls below this are rejected and re-placed.
pub const MIN_VISIBILITY: f64 = 0.05;
pub const DEFAULT_REJECTION_BUDGET: usize = 100;
pub const DEFAULT_SHADOW_STRENGTH: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Centre as `(row, col)` in pixels.
    pub center: (f64, f64),
    /// Half-extent in pixels.
    pub scale: f64,
    /// Width-to-height ratio; only used by rectangles.
    pub aspect: f64,
    pub color: [f64; 3],
    pub noise_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "style")]
pub enum BackgroundStyle {
    Flat { color: [f64; 3] },
    VerticalGradient { top: [f64; 3], bottom: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowConfig {
    /// Shadow displacement `(row, col)` relative to the object centre.
    pub offset: (f64, f64),
    pub strength: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            offset: (1.5, 2.0),
            strength: DEFAULT_SHADOW_STRENGTH,
        }
    }
}

/// Accepted range of pairwise occlusion, measured as the intersection of two
/// object masks over the smaller mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRange {
    /// Lower bound on the largest pairwise overlap of a scene with 2+ objects.
    pub min: f64,
    /// Upper bound on every pairwise overlap.
    pub max: f64,
}

impl Default for OverlapRange {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Drives placement resampling.
    pub seed: u64,
    /// Drives the value-noise textures.
    pub texture_seed: u64,
    pub n_layers: usize,
    pub height: usize,
    pub width: usize,
    /// Back to front.
    pub objects: Vec<ObjectSpec>,
    pub background: BackgroundStyle,
    pub background_noise: f64,
    pub shadow: ShadowConfig,
    pub overlap: OverlapRange,
    pub rejection_budget: usize,
}

impl SceneSpec {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    /// Samples a scene layout with `n_objects` objects.
    pub fn random<R: Rng>(
        rng: &mut R,
        n_objects: usize,
        n_layers: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let (h, w) = (height as f64, width as f64);
        let mut rows: Vec<f64> = (0..n_objects)
            .map(|_| rng.gen_range(0.2 * h..0.8 * h))
            .collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let objects = rows
            .into_iter()
            .map(|row| {
                let depth = row / h;
                let kind = match rng.gen_range(0..3) {
                    0 => ShapeKind::Disc,
                    1 => ShapeKind::Rectangle,
                    _ => ShapeKind::Triangle,
                };
                let base = h.min(w) * (0.13 + 0.1 * depth);
                ObjectSpec {
                    kind,
                    center: (row, rng.gen_range(0.15 * w..0.85 * w)),
                    scale: base * rng.gen_range(0.8..1.25),
                    aspect: rng.gen_range(0.6..1.6),
                    color: random_color(rng),
                    noise_amplitude: rng.gen_range(0.0..0.08),
                }
            })
            .collect();
        let background = if rng.gen_bool(0.5) {
            BackgroundStyle::Flat {
                color: random_color(rng),
            }
        } else {
            BackgroundStyle::VerticalGradient {
                top: random_color(rng),
                bottom: random_color(rng),
            }
        };
        SceneSpec {
            seed: rng.gen(),
            texture_seed: rng.gen(),
            n_layers,
            height,
            width,
            objects,
            background,
            background_noise: rng.gen_range(0.0..0.05),
            shadow: ShadowConfig::default(),
            overlap: OverlapRange::default(),
            rejection_budget: DEFAULT_REJECTION_BUDGET,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.objects.len() > self.n_layers - 1 {
            return Err(Error::Validation(format!(
                "{} objects do not fit in {} layers",
                self.objects.len(),
                self.n_layers
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("canvas must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.shadow.strength) {
            return Err(Error::Validation("shadow strength must be in [0, 1]".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (r, c) = o.center;
            if !(0.0..self.height as f64).contains(&r) || !(0.0..self.width as f64).contains(&c) {
                return Err(Error::Validation(format!("object {i} centre is outside the frame")));
            }
            if !(o.scale > 0.0) || !(o.aspect > 0.0) {
                return Err(Error::Validation(format!("object {i} has non-positive size")));
            }
        }
        Ok(())
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Rounds to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Spec with the placements that were finally accepted.
    pub spec: SceneSpec,
    pub stack: LayerStack,
    pub composite: CompositeImage,
    pub panoptic: PanopticMap,
}

fn shape_mask(o: &ObjectSpec, h: usize, w: usize) -> Array2<f64> {
    let (cr, cc) = o.center;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 + 0.5 - cr;
        let dx = x as f64 + 0.5 - cc;
        let inside = match o.kind {
            ShapeKind::Disc => dy * dy + dx * dx <= o.scale * o.scale,
            ShapeKind::Rectangle => {
                let hw = o.scale * o.aspect.sqrt();
                let hh = o.scale / o.aspect.sqrt();
                dx.abs() <= hw && dy.abs() <= hh
            }
            ShapeKind::Triangle => {
                // Apex up; base at dy = +scale, apex at dy = -scale.
                let t = (dy + o.scale) / (2.0 * o.scale);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * o.scale
            }
        };
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// Smooth value noise in [-1, 1] on a lattice with the given cell size.
fn value_noise(seed: u64, h: usize, w: usize, cell: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(-1.0..1.0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / cell as f64;
        let fx = x as f64 / cell as f64;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let top = grid[[y0, x0]] * (1.0 - sx) + grid[[y0, x0 + 1]] * sx;
        let bottom = grid[[y0 + 1, x0]] * (1.0 - sx) + grid[[y0 + 1, x0 + 1]] * sx;
        top * (1.0 - sy) + bottom * sy
    })
}

fn object_layer(o: &ObjectSpec, index: usize, spec: &SceneSpec) -> LayerImage {
    let (h, w) = (spec.height, spec.width);
    let alpha = shape_mask(o, h, w);
    let noise = value_noise(spec.texture_seed.wrapping_add(index as u64 + 1), h, w, 4);
    let color = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        if alpha[[y, x]] > 0.0 {
            quantize(o.color[c] + o.noise_amplitude * noise[[y, x]])
        } else {
            quantize(CANVAS_GRAY)
        }
    });
    LayerImage { color, alpha }
}

fn background_layer(spec: &SceneSpec) -> LayerImage {
    let (h, w) = (spec.height, spec.width);
    let noise = value_noise(spec.texture_seed, h, w, 8);
    let color = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let base = match &spec.background {
            BackgroundStyle::Flat { color } => color[c],
            BackgroundStyle::VerticalGradient { top, bottom } => {
                let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
                top[c] * (1.0 - t) + bottom[c] * t
            }
        };
        base + spec.background_noise * noise[[y, x]]
    });
    LayerImage {
        color,
        alpha: Array2::ones((h, w)),
    }
}

fn shadow_map(o: &ObjectSpec, spec: &SceneSpec) -> ShadowMap {
    let (cr, cc) = (o.center.0 + spec.shadow.offset.0, o.center.1 + spec.shadow.offset.1);
    let (ry, rx) = (0.6 * o.scale, 1.1 * o.scale);
    let darkening = Array2::from_shape_fn((spec.height, spec.width), |(y, x)| {
        let dy = (y as f64 + 0.5 - cr) / ry;
        let dx = (x as f64 + 0.5 - cc) / rx;
        if dy * dy + dx * dx <= 1.0 {
            spec.shadow.strength
        } else {
            0.0
        }
    });
    ShadowMap { darkening }
}

fn overlap(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += x * y;
        na += x;
        nb += y;
    }
    let smaller = f64::min(na, nb);
    if smaller == 0.0 {
        0.0
    } else {
        inter / smaller
    }
}

fn placement_ok(layers: &[LayerImage], upto: usize, spec: &SceneSpec) -> Result<bool> {
    let (h, w) = (spec.height, spec.width);
    let mut all = vec![LayerImage::empty(h, w)];
    all.extend_from_slice(&layers[..upto]);
    let stack = LayerStack::new(all)?;
    for i in 1..stack.len() {
        let v = visibility_fraction(&stack, i)?;
        if v.empty || v.fraction < MIN_VISIBILITY {
            return Ok(false);
        }
        for j in 1..i {
            if overlap(&stack.layers[i].alpha, &stack.layers[j].alpha) > spec.overlap.max {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn max_overlap(layers: &[LayerImage]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..layers.len() {
        for j in 0..i {
            best = best.max(overlap(&layers[i].alpha, &layers[j].alpha));
        }
    }
    best
}

/// Rasterizes a scene. Objects that end up almost fully hidden (or clash
/// with the overlap range) get a new horizontal position drawn from the
/// spec seed, up to the rejection budget.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut spec = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.width;
    let mut layers: Vec<LayerImage> = Vec::with_capacity(spec.objects.len());
    let n = spec.objects.len();
    for k in 0..n {
        let mut attempts = 0;
        loop {
            let layer = object_layer(&spec.objects[k], k, &spec);
            layers.truncate(k);
            layers.push(layer);
            let mut ok = placement_ok(&layers, k + 1, &spec)?;
            if ok && k + 1 == n && n >= 2 && max_overlap(&layers) < spec.overlap.min {
                ok = false;
            }
            if ok {
                break;
            }
            attempts += 1;
            if attempts > spec.rejection_budget {
                return Err(Error::Generation { object: k, attempts });
            }
            let wf = w as f64;
            spec.objects[k].center.1 = rng.gen_range(0.1 * wf..0.9 * wf);
        }
    }

    let shadows: Vec<ShadowMap> = spec.objects.iter().map(|o| shadow_map(o, &spec)).collect();
    let mut background = apply_shadows(&background_layer(&spec), &shadows)?;
    background.color.mapv_inplace(quantize);

    let mut all = Vec::with_capacity(spec.n_layers);
    all.push(background);
    all.extend(layers);
    let stack = LayerStack::new(all)?.padded(spec.n_layers);
    let mut composite = composite(&stack, DEFAULT_DELTA)?;
    composite.pixels.mapv_inplace(quantize);
    let panoptic = panoptic_project(&stack);
    Ok(Scene {
        spec,
        stack,
        composite,
        panoptic,
    })
}

/// `k` specs with the same geometry and fresh colours and textures.
pub fn texture_variants(spec: &SceneSpec, k: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.seed.rotate_left(17));
    (0..k)
        .map(|_| {
            let mut v = spec.clone();
            v.texture_seed = rng.gen();
            for o in &mut v.objects {
                o.color = random_color(&mut rng);
                o.noise_amplitude = rng.gen_range(0.0..0.08);
            }
            v.background = match &spec.background {
                BackgroundStyle::Flat { .. } => BackgroundStyle::Flat {
                    color: random_color(&mut rng),
                },
                BackgroundStyle::VerticalGradient { .. } => BackgroundStyle::VerticalGradient {
                    top: random_color(&mut rng),
                    bottom: random_color(&mut rng),
                },
            };
            v
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Number of distinct scene geometries.
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub height: usize,
    pub width: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Renderings per geometry with independent textures.
    pub texture_variants: usize,
    /// Share of geometries (taken from the end) held out for validation.
    pub val_fraction: f64,
    pub overlap: OverlapRange,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            min_objects: 2,
            max_objects: 4,
            height: 32,
            width: 32,
            n_layers: 5,
            seed: 0,
            texture_variants: 1,
            val_fraction: 0.0,
            overlap: OverlapRange::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub scene: Scene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Generates independent scenes. Scene `i` draws all of its randomness from
/// stream `i` of the dataset seed, so output does not depend on scheduling.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.min_objects < 1 || config.min_objects > config.max_objects {
        return Err(Error::Validation(format!(
            "object count range ({}, {}) is invalid",
            config.min_objects, config.max_objects
        )));
    }
    if config.max_objects + 1 > config.n_layers {
        return Err(Error::Validation(format!(
            "{} objects do not fit in {} layers",
            config.max_objects, config.n_layers
        )));
    }
    if config.texture_variants < 1 || !(0.0..=1.0).contains(&config.val_fraction) {
        return Err(Error::Validation("bad texture variant count or validation fraction".into()));
    }
    let n_val = (config.n_scenes as f64 * config.val_fraction).round() as usize;
    let per_scene: Vec<Vec<DatasetEntry>> = (0..config.n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let n_obj = rng.gen_range(config.min_objects..=config.max_objects);
            let mut spec =
                SceneSpec::random(&mut rng, n_obj, config.n_layers, config.height, config.width);
            spec.overlap = config.overlap;
            let base = generate_scene(&spec)?;
            let split = if i >= config.n_scenes - n_val { Split::Val } else { Split::Train };
            let mut out = Vec::with_capacity(config.texture_variants);
            let variants = if config.texture_variants > 1 {
                texture_variants(&base.spec, config.texture_variants - 1, rng.gen())
            } else {
                vec![]
            };
            out.push(DatasetEntry {
                id: format!("scene_{i:05}_t0"),
                split,
                scene: base,
            });
            for (t, v) in variants.iter().enumerate() {
                out.push(DatasetEntry {
                    id: format!("scene_{i:05}_t{}", t + 1),
                    split,
                    scene: generate_scene(v)?,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        config: config.clone(),
        entries: per_scene.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(objects: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec {
            seed: 3,
            texture_seed: 4,
            n_layers: 5,
            height: 32,
            width: 32,
            objects,
            background: BackgroundStyle::Flat { color: [0.3, 0.4, 0.5] },
            background_noise: 0.0,
            shadow: ShadowConfig::default(),
            overlap: OverlapRange::default(),
            rejection_budget: DEFAULT_REJECTION_BUDGET,
        }
    }

    fn disc(center: (f64, f64), scale: f64) -> ObjectSpec {
        ObjectSpec {
            kind: ShapeKind::Disc,
            center,
            scale,
            aspect: 1.0,
            color: [0.9, 0.1, 0.1],
            noise_amplitude: 0.0,
        }
    }

    #[test]
    fn no_objects_gives_background_only() {
        let s = generate_scene(&spec_with(vec![])).unwrap();
        assert_eq!(s.stack.len(), 5);
        assert!(s.stack.layers[1..].iter().all(|l| l.is_empty()));
        for (a, b) in s.composite.pixels.iter().zip(s.stack.layers[0].color.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_disc_has_two_labels() {
        let s = generate_scene(&spec_with(vec![disc((16.0, 16.0), 6.0)])).unwrap();
        let mut labels: Vec<u32> = s.panoptic.labels.iter().copied().collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels, vec![0, 2]);
    }

    #[test]
    fn hidden_object_is_resampled() {
        // A large disc placed right in front of a small one must move sideways.
        let s = generate_scene(&spec_with(vec![disc((16.0, 16.0), 3.0), disc((16.0, 16.0), 9.0)])).unwrap();
        for i in 1..3 {
            assert!(visibility_fraction(&s.stack, i).unwrap().fraction >= MIN_VISIBILITY);
        }
        assert_eq!(s.spec.objects[0].center.1, 16.0);
        assert_ne!(s.spec.objects[1].center.1, 16.0);
    }

    #[test]
    fn impossible_placement_reports_object() {
        let mut spec = spec_with(vec![disc((16.0, 16.0), 3.0), disc((16.0, 16.0), 40.0)]);
        spec.rejection_budget = 5;
        match generate_scene(&spec) {
            Err(Error::Generation { object, .. }) => assert_eq!(object, 1),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn too_many_objects_is_invalid() {
        let spec = spec_with((0..5).map(|i| disc((5.0 + 5.0 * i as f64, 16.0), 2.0)).collect());
        assert!(matches!(generate_scene(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn object_count_range_is_covered() {
        let cfg = DatasetConfig {
            n_scenes: 100,
            min_objects: 2,
            max_objects: 4,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut seen = [0usize; 5];
        for e in &ds.entries {
            seen[e.scene.spec.n_objects()] += 1;
        }
        assert_eq!(seen[0] + seen[1], 0);
        assert!(seen[2] > 0 && seen[3] > 0 && seen[4] > 0);
    }

    #[test]
    fn empty_dataset() {
        let cfg = DatasetConfig { n_scenes: 0, ..Default::default() };
        assert!(generate_dataset(&cfg).unwrap().entries.is_empty());
    }

    #[test]
    fn split_sizes_follow_fraction() {
        let cfg = DatasetConfig {
            n_scenes: 9,
            texture_variants: 3,
            val_fraction: 1.0 / 9.0,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.entries.len(), 27);
        assert_eq!(ds.split(Split::Val).count(), 3);
    }

    #[test]
    fn variants_share_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = SceneSpec::random(&mut rng, 3, 5, 32, 32);
        let base = generate_scene(&spec).unwrap();
        let variants = texture_variants(&base.spec, 3, 5);
        assert_eq!(variants.len(), 3);
        for v in &variants {
            let s = generate_scene(v).unwrap();
            assert_eq!(s.panoptic, base.panoptic);
            assert_ne!(v.objects[0].color, base.spec.objects[0].color);
            for (a, b) in v.objects.iter().zip(&base.spec.objects) {
                assert_eq!((a.kind, a.center, a.scale), (b.kind, b.center, b.scale));
            }
        }
    }
}
