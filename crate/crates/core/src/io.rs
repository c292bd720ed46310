//! On-disk formats: 8-bit PNG layers with a JSON stack manifest, RGB
//! composites, gray-level panoptic maps and the dataset manifest.
//!
//! PNG values are treated as linear `[0, 1]` after division by 255.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::compositor::{CompositeImage, LayerImage, LayerStack, PanopticMap};
use crate::error::{Error, Result};
use crate::scenegen::{Dataset, DatasetConfig, DatasetEntry, Scene, SceneSpec, Split};

pub const STACK_MANIFEST: &str = "stack.json";
pub const DATASET_MANIFEST: &str = "manifest.json";
pub const COMPOSITE_PNG: &str = "composite.png";
pub const PANOPTIC_PNG: &str = "panoptic.png";

/// Serialized form of a layer stack directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub n_layers: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<String>,
    /// 1-based index of the background layer.
    pub background_index: usize,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Serializes `value` as pretty JSON with object keys sorted.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_sorted_json(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_layer_png(layer: &LayerImage, path: &Path) -> Result<()> {
    let (h, w) = layer.dims();
    let img = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgba([
            to_u8(layer.color[[y, x, 0]]),
            to_u8(layer.color[[y, x, 1]]),
            to_u8(layer.color[[y, x, 2]]),
            to_u8(layer.alpha[[y, x]]),
        ])
    });
    save(&img, path)
}

pub fn read_layer_png(path: &Path) -> Result<LayerImage> {
    let img = open(path)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    });
    let alpha = Array2::from_shape_fn((h, w), |(y, x)| from_u8(img.get_pixel(x as u32, y as u32)[3]));
    LayerImage::new(color, alpha)
}

pub fn write_rgb_png(image: &CompositeImage, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c| to_u8(image.pixels[[y as usize, x as usize, c]]);
        Rgb([p(0), p(1), p(2)])
    });
    save(&img, path)
}

pub fn read_rgb_png(path: &Path) -> Result<CompositeImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    CompositeImage::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    }))
}

/// Labels are written directly as gray levels.
pub fn write_panoptic_png(map: &PanopticMap, path: &Path) -> Result<()> {
    let (h, w) = map.labels.dim();
    if map.labels.iter().any(|&l| l > 255) {
        return Err(Error::Validation("panoptic label does not fit in 8 bits".into()));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([map.labels[[y as usize, x as usize]] as u8])
    });
    save(&img, path)
}

pub fn read_panoptic_png(path: &Path) -> Result<PanopticMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(PanopticMap {
        labels: Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as u32),
    })
}

pub fn layer_file_name(i: usize) -> String {
    format!("layer_{:03}.png", i + 1)
}

/// Writes one PNG per layer plus `stack.json` into `dir`.
pub fn write_stack(stack: &LayerStack, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = stack.dims();
    let names: Vec<String> = (0..stack.len()).map(layer_file_name).collect();
    for (layer, name) in stack.layers.iter().zip(&names) {
        write_layer_png(layer, &dir.join(name))?;
    }
    write_json(
        &dir.join(STACK_MANIFEST),
        &StackManifest {
            n_layers: stack.len(),
            height: h,
            width: w,
            layers: names,
            background_index: 1,
        },
    )
}

pub fn read_stack(dir: &Path) -> Result<LayerStack> {
    let m: StackManifest = read_json(&dir.join(STACK_MANIFEST))?;
    if m.layers.len() != m.n_layers || m.background_index != 1 {
        return Err(Error::Format(format!(
            "{}: inconsistent stack manifest",
            dir.display()
        )));
    }
    let layers = m
        .layers
        .iter()
        .map(|name| read_layer_png(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let stack = LayerStack::new(layers)?;
    if stack.dims() != (m.height, m.width) {
        return Err(Error::Format(format!(
            "{}: layers are {:?}, manifest says {}x{}",
            dir.display(),
            stack.dims(),
            m.height,
            m.width
        )));
    }
    Ok(stack)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub dir: String,
    pub split: Split,
    pub n_objects: usize,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub n_entries: usize,
    pub scenes: Vec<SceneRecord>,
}

/// Writes `dir/manifest.json` and one sub-directory per scene holding the
/// layer stack, `composite.png` and `panoptic.png`. An empty dataset only
/// writes the manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut scenes = Vec::with_capacity(dataset.entries.len());
    for e in &dataset.entries {
        let scene_dir = dir.join(&e.id);
        write_stack(&e.scene.stack, &scene_dir)?;
        write_rgb_png(&e.scene.composite, &scene_dir.join(COMPOSITE_PNG))?;
        write_panoptic_png(&e.scene.panoptic, &scene_dir.join(PANOPTIC_PNG))?;
        scenes.push(SceneRecord {
            id: e.id.clone(),
            dir: e.id.clone(),
            split: e.split,
            n_objects: e.scene.spec.n_objects(),
            spec: e.scene.spec.clone(),
        });
    }
    write_json(
        &dir.join(DATASET_MANIFEST),
        &DatasetManifest {
            config: dataset.config.clone(),
            n_entries: scenes.len(),
            scenes,
        },
    )
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_json(&dir.join(DATASET_MANIFEST))?;
    let entries = m
        .scenes
        .into_iter()
        .map(|r| {
            let scene_dir: PathBuf = dir.join(&r.dir);
            Ok(DatasetEntry {
                id: r.id,
                split: r.split,
                scene: Scene {
                    spec: r.spec,
                    stack: read_stack(&scene_dir)?,
                    composite: read_rgb_png(&scene_dir.join(COMPOSITE_PNG))?,
                    panoptic: read_panoptic_png(&scene_dir.join(PANOPTIC_PNG))?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: m.config,
        entries,
    })
}
