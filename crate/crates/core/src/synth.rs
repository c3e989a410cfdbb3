//! Deterministic synthetic scenes of coloured rectangles and ellipses with
//! semantic labels, instance ids and visible-pixel boxes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, BBox, LabelMap, Tensor};

const NOISE_SIGMA: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 50;
/// Earlier instances must keep at least this fraction of their drawn pixels.
const MIN_VISIBLE_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub num_categories: usize,
    /// Inclusive `[min, max]` number of shapes per image.
    pub instances_per_image: [usize; 2],
    /// Inclusive `[min, max]` shape extent in pixels.
    pub size_range: [usize; 2],
    /// Relative frequency of each category.
    pub class_skew: Vec<f64>,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 {
            return bad("num_categories must be >= 1".into());
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image dims must be >= 1".into());
        }
        let [lo, hi] = self.size_range;
        if lo < 3 || lo > hi {
            return bad(format!("size_range {:?} needs 3 <= min <= max", self.size_range));
        }
        if hi > self.image_height.min(self.image_width) {
            return bad(format!(
                "size_range max {hi} exceeds image {}x{}",
                self.image_height, self.image_width
            ));
        }
        if self.instances_per_image[0] > self.instances_per_image[1] {
            return bad("instances_per_image min > max".into());
        }
        if self.class_skew.len() != self.num_categories
            || self.class_skew.iter().any(|&f| !(f > 0.0 && f.is_finite()))
        {
            return bad("class_skew needs one positive frequency per category".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    /// 1-based category (0 is background).
    pub category: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub semantic: LabelMap,
    pub instances: LabelMap,
    pub records: Vec<InstanceRecord>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.semantic.height
    }

    pub fn width(&self) -> usize {
        self.semantic.width
    }

    /// Binary mask of instance `id` as a pixel-membership vector.
    pub fn instance_mask(&self, id: u32) -> Vec<bool> {
        self.instances.data.iter().map(|&v| v == id).collect()
    }
}

/// Fixed, well-separated colour per category.
pub fn category_color(category: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 6] = [
        [0.90, 0.15, 0.15],
        [0.15, 0.80, 0.25],
        [0.15, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
    ];
    if category >= 1 && category <= PALETTE.len() {
        return PALETTE[category - 1];
    }
    // golden-angle hues beyond the palette
    let hue = (category as f32 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

fn rasterize(shape: Shape, y0: usize, x0: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::with_capacity(h * w);
    let (cy, cx) = (y0 as f64 + h as f64 / 2.0, x0 as f64 + w as f64 / 2.0);
    let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                }
            };
            if inside {
                px.push((y, x));
            }
        }
    }
    px
}

/// Deterministic in `(config.seed, index)`.
pub fn generate_sample(config: &SceneConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let (hgt, wid) = (config.image_height, config.image_width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    let categories = WeightedIndex::new(&config.class_skew)
        .map_err(|e| Error::Config(format!("class_skew: {e}")))?;
    let [nmin, nmax] = config.instances_per_image;
    let wanted = rng.random_range(nmin..=nmax);
    let [smin, smax] = config.size_range;

    let mut ids = LabelMap::filled(hgt, wid, 0);
    let mut drawn_area: Vec<usize> = Vec::new();
    let mut visible: Vec<usize> = Vec::new();
    let mut cats: Vec<u32> = Vec::new();
    for _ in 0..wanted {
        let category = categories.sample(&mut rng) as u32 + 1;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = if rng.random_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let h = rng.random_range(smin..=smax);
            let w = rng.random_range(smin..=smax);
            let y0 = rng.random_range(0..=hgt - h);
            let x0 = rng.random_range(0..=wid - w);
            let pixels = rasterize(shape, y0, x0, h, w);
            let mut lost = vec![0usize; drawn_area.len()];
            for &(y, x) in &pixels {
                let prev = ids.get(y, x);
                if prev != 0 {
                    lost[prev as usize - 1] += 1;
                }
            }
            let visible_ok = drawn_area
                .iter()
                .zip(&visible)
                .zip(&lost)
                .all(|((&area, &vis), &l)| (vis - l) as f64 >= MIN_VISIBLE_FRACTION * area as f64);
            if !visible_ok {
                continue;
            }
            let id = drawn_area.len() as u32 + 1;
            for &(y, x) in &pixels {
                ids.set(y, x, id);
            }
            for (v, l) in visible.iter_mut().zip(&lost) {
                *v -= l;
            }
            drawn_area.push(pixels.len());
            visible.push(pixels.len());
            cats.push(category);
            break;
        }
    }

    let mut semantic = LabelMap::filled(hgt, wid, 0);
    let mut hull = vec![(usize::MAX, usize::MAX, 0usize, 0usize); cats.len()];
    for y in 0..hgt {
        for x in 0..wid {
            let id = ids.get(y, x);
            if id == 0 {
                continue;
            }
            semantic.set(y, x, cats[id as usize - 1]);
            let b = &mut hull[id as usize - 1];
            b.0 = b.0.min(y);
            b.1 = b.1.min(x);
            b.2 = b.2.max(y + 1);
            b.3 = b.3.max(x + 1);
        }
    }
    let records = hull
        .iter()
        .zip(&cats)
        .enumerate()
        .map(|(i, (&(y0, x0, y1, x1), &category))| {
            Ok(InstanceRecord {
                id: i as u32 + 1,
                category,
                bbox: BBox::new(y0 as f64, x0 as f64, y1 as f64, x1 as f64)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let background = rng.random_range(0.3..0.7f32);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = Tensor::zeros(&[3, hgt, wid]);
    for c in 0..3 {
        let plane = image.channel_mut(c);
        for (p, v) in plane.iter_mut().enumerate() {
            let cat = semantic.data[p] as usize;
            let base = if cat == 0 {
                background
            } else {
                category_color(cat)[c]
            };
            *v = (base + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        image,
        semantic,
        instances: ids,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub semantic: PathBuf,
    pub instances: PathBuf,
    pub records: Vec<InstanceRecord>,
}

/// Index of a generated dataset. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_sample(&self, root: &Path, index: usize) -> Result<Sample> {
        let entry = &self.samples[index];
        let image = read_tensor(root.join(&entry.image))?;
        let semantic = LabelMap::from_tensor(&read_tensor(root.join(&entry.semantic))?)?;
        let instances = LabelMap::from_tensor(&read_tensor(root.join(&entry.instances))?)?;
        let (_, h, w) = image.chw()?;
        if (semantic.height, semantic.width) != (h, w) || (instances.height, instances.width) != (h, w) {
            return Err(Error::Shape(format!(
                "sample {index}: image and label maps disagree in size"
            )));
        }
        Ok(Sample {
            image,
            semantic,
            instances,
            records: entry.records.clone(),
        })
    }
}

/// Loads a manifest and every sample it lists.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(Manifest, Vec<Sample>)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = (0..manifest.samples.len())
        .map(|i| manifest.load_sample(root, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Writes `count` samples plus `manifest.json` under `out_dir`.
pub fn generate_dataset(config: &SceneConfig, count: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = generate_sample(config, i as u64)?;
        let rel = |kind: &str| PathBuf::from("samples").join(format!("{i:06}_{kind}.fcrt"));
        let entry = ManifestEntry {
            image: rel("image"),
            semantic: rel("semantic"),
            instances: rel("instances"),
            records: s.records.clone(),
        };
        write_tensor(out_dir.join(&entry.image), &s.image)?;
        write_tensor(out_dir.join(&entry.semantic), &s.semantic.to_tensor())?;
        write_tensor(out_dir.join(&entry.instances), &s.instances.to_tensor())?;
        samples.push(entry);
    }
    let manifest = Manifest {
        config: config.clone(),
        samples,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
