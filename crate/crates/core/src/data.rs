//! Labelled image datasets: a seeded synthetic shape generator and a
//! class-per-subdirectory loader for PGM/PPM files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::{Real, Tensor};

pub const SHAPE_CLASSES: [&str; 3] = ["disk", "square", "cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Images as `H×W×C` tensors with values in `[0, 1]`.
    pub images: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn images_as<F: Real>(&self) -> Vec<Tensor<F>> {
        self.images.iter().map(Tensor::cast).collect()
    }

    /// Writes one subdirectory per class with `NNNNN.pgm` / `.ppm` files.
    pub fn write_dir(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let dir = root.join(&self.classes[label]);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let &[h, w, c] = img.shape() else {
                return Err(Error::shape("write_dir", img.shape(), &[0, 0, 0]));
            };
            let ext = if c == 1 { "pgm" } else { "ppm" };
            let path = dir.join(format!("{i:05}.{ext}"));
            ppm::write_image(&path, w, h, c, &ppm::to_bytes(img.data()))?;
        }
        Ok(())
    }
}

/// Parameters of the built-in disk / square / cross generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Mixing weight of uniform noise, in `[0, 1)`.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(per_class: usize, image_size: usize, channels: usize, noise: f64) -> Self {
        SyntheticSpec {
            per_class,
            image_size,
            channels,
            noise,
        }
    }

    /// Parses the part after `synthetic:`, e.g. `per_class=100,noise=0.1`,
    /// starting from `base`.
    pub fn parse_over(base: SyntheticSpec, text: &str) -> Result<Self> {
        let mut spec = base;
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic option '{item}' is not key=value")))?;
            let bad = || Error::Config(format!("bad value '{v}' for synthetic option '{k}'"));
            match k.trim() {
                "per_class" | "n" => spec.per_class = v.parse().map_err(|_| bad())?,
                "image_size" | "size" => spec.image_size = v.parse().map_err(|_| bad())?,
                "channels" => spec.channels = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                other => return Err(Error::Config(format!("unknown synthetic option '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("synthetic per_class must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("synthetic image_size must be at least 8".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("synthetic channels must be 1 or 3".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }
}

fn shape_mask(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        _ => {
            let t = r / 3.0;
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
    }
}

/// Balanced samples, classes interleaved; fully determined by `seed`.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let sf = s as f64;
    let n_classes = SHAPE_CLASSES.len();
    let mut images = Vec::with_capacity(spec.per_class * n_classes);
    let mut labels = Vec::with_capacity(images.capacity());
    for i in 0..spec.per_class * n_classes {
        let class = i % n_classes;
        let cx = rng.random_range(0.3..0.7) * sf;
        let cy = rng.random_range(0.3..0.7) * sf;
        let r = rng.random_range(0.18..0.3) * sf;
        let ink = rng.random_range(0.7..1.0);
        let mut data = Vec::with_capacity(s * s * spec.channels);
        for y in 0..s {
            for x in 0..s {
                let inside = shape_mask(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                let base = if inside { ink } else { 0.0 };
                for _ in 0..spec.channels {
                    let v = (1.0 - spec.noise) * base + spec.noise * rng.random::<f64>();
                    data.push(v);
                }
            }
        }
        images.push(Tensor::new(&[s, s, spec.channels], data)?);
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>.{pgm,ppm,pnm}`. Classes are the sorted
/// subdirectory names; images are converted to `channels` and must be
/// `image_size` square.
pub fn load_dir(root: impl AsRef<Path>, image_size: usize, channels: usize) -> Result<Dataset> {
    let root = root.as_ref();
    let mut classes = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = classes.len();
        classes.push(class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image_file(p)) {
            let img = ppm::read_image(&file)?;
            if img.width != image_size || img.height != image_size {
                return Err(Error::Format {
                    path: file,
                    msg: format!(
                        "image is {}x{}, expected {image_size}x{image_size}",
                        img.width, img.height
                    ),
                });
            }
            let img = img.with_channels(channels)?;
            images.push(Tensor::new(&[image_size, image_size, channels], img.data)?);
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: "no class subdirectories with PGM/PPM images".into(),
        });
    }
    Ok(Dataset {
        images,
        labels,
        classes,
    })
}

/// Resolves `synthetic[:opts]` or a directory path. Synthetic defaults:
/// 100 per class, noise 0.1, and the given image size and channel count.
pub fn load_dataset(source: &str, seed: u64, image_size: usize, channels: usize) -> Result<Dataset> {
    if let Some(rest) = source.strip_prefix("synthetic") {
        let opts = match rest {
            "" => "",
            r => r
                .strip_prefix(':')
                .ok_or_else(|| Error::Config(format!("bad synthetic spec '{source}'")))?,
        };
        let spec = SyntheticSpec::parse_over(SyntheticSpec::new(100, image_size, channels, 0.1), opts)?;
        if spec.image_size != image_size || spec.channels != channels {
            return Err(Error::Config(format!(
                "synthetic images are {}x{}x{}, model expects {image_size}x{image_size}x{channels}",
                spec.image_size, spec.image_size, spec.channels
            )));
        }
        return synthetic(&spec, seed);
    }
    load_dir(source, image_size, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_bounded() {
        let d = synthetic(&SyntheticSpec::new(10, 16, 1, 0.2), 1).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.class_counts(), vec![10, 10, 10]);
        for img in &d.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec::new(4, 16, 3, 0.1);
        assert_eq!(synthetic(&spec, 5).unwrap(), synthetic(&spec, 5).unwrap());
        assert_ne!(synthetic(&spec, 5).unwrap(), synthetic(&spec, 6).unwrap());
    }

    #[test]
    fn spec_parsing() {
        let d = load_dataset("synthetic:per_class=2,noise=0", 0, 16, 1).unwrap();
        assert_eq!(d.len(), 6);
        assert!(load_dataset("synthetic:noise=1.0", 0, 16, 1).is_err());
        assert!(load_dataset("synthetic:bogus=1", 0, 16, 1).is_err());
        assert!(load_dataset("synthetic:image_size=8", 0, 16, 1).is_err());
        assert!(load_dataset("synthetically", 0, 16, 1).is_err());
    }

    #[test]
    fn directory_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let d = synthetic(&SyntheticSpec::new(2, 16, 1, 0.1), 3).unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = load_dir(dir.path(), 16, 1).unwrap();
        // classes come back in sorted name order
        assert_eq!(back.classes, vec!["cross", "disk", "square"]);
        assert_eq!(back.len(), 6);
        let first_disk = back.labels.iter().position(|&l| l == 1).unwrap();
        assert!(back.images[first_disk].max_abs_diff(&d.images[0]) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn corrupt_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("a");
        fs::create_dir(&class).unwrap();
        fs::write(class.join("broken.pgm"), b"P5\n16 16\n255\n\x01\x02").unwrap();
        let err = load_dir(dir.path(), 16, 1).unwrap_err().to_string();
        assert!(err.contains("broken.pgm"), "{err}");
    }

    #[test]
    fn wrong_size_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("a");
        fs::create_dir(&class).unwrap();
        ppm::write_image(class.join("small.pgm"), 4, 4, 1, &[0; 16]).unwrap();
        let err = load_dir(dir.path(), 16, 1).unwrap_err().to_string();
        assert!(err.contains("small.pgm") && err.contains("4x4"), "{err}");
    }
}
