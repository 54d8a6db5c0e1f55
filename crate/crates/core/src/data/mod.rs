//! Dataset plumbing: PNG I/O, the paired-image manifest, the procedural
//! vessel/fundus synthesizer, and discriminator-based realism filtering.

mod synth;

pub use synth::{disc_geometry, make_dataset, synth_fundus, synth_vessel_tree, SyntheticTreeParams};

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::networks::{Discriminator, ParamStore};
use crate::numerics::Tensor;

/// A fundus image with its binary vessel map.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub fundus: Tensor<f32>,
    pub vessel: Tensor<f32>,
    pub id: String,
}

impl ImagePair {
    pub fn validate(&self) -> Result<()> {
        let fs = self.fundus.shape();
        let vs = self.vessel.shape();
        if fs.len() != 3 || fs[0] != 3 || vs.len() != 3 || vs[0] != 1 || fs[1..] != vs[1..] {
            return Err(Error::data(format!(
                "pair {}: fundus {fs:?} / vessel {vs:?} malformed",
                self.id
            )));
        }
        if self.vessel.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("pair {}: vessel map not binary", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub fundus: PathBuf,
    pub vessel: PathBuf,
}

/// Line-oriented dataset index: `id split fundus_path vessel_path`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.txt")
    }

    pub fn save(&self) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(Self::manifest_path(
            &self.root,
        ))?);
        for e in &self.entries {
            writeln!(
                f,
                "{} {} {} {}",
                e.id,
                e.split,
                e.fundus.display(),
                e.vessel.display()
            )?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        let file = std::fs::File::open(&path).map_err(|e| {
            Error::data(format!("cannot open manifest {}: {e}", path.display()))
        })?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::data(format!(
                    "manifest line {}: expected 4 fields, got {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let id = parts[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::data(format!(
                    "manifest line {}: duplicate id '{id}' (splits must be disjoint)",
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                id,
                split: Split::parse(parts[1])?,
                fundus: PathBuf::from(parts[2]),
                vessel: PathBuf::from(parts[3]),
            });
        }
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            entries,
        };
        manifest.check_files()?;
        Ok(manifest)
    }

    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.fundus, &e.vessel] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::data(format!(
                        "manifest entry {}: missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Load all pairs of one split into memory.
    pub fn load_pairs(&self, split: Split) -> Result<Vec<ImagePair>> {
        let mut pairs = Vec::new();
        for e in self.split_entries(split) {
            let fundus = load_image(&self.root.join(&e.fundus))?;
            let vessel = load_vessel(&self.root.join(&e.vessel))?;
            let pair = ImagePair {
                fundus,
                vessel,
                id: e.id.clone(),
            };
            pair.validate()?;
            pairs.push(pair);
        }
        Ok(pairs)
    }
}

/// Load an 8-bit grayscale or RGB PNG as a CHW tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor::new(vec![1, h, w], data)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + p] = raw[p * 3 + c] as f32 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
        other => Err(Error::data(format!(
            "unsupported image format {:?} in {} (8-bit gray or RGB PNG expected)",
            other.color(),
            path.display()
        ))),
    }
}

/// Load a vessel map and re-binarize at 0.5.
pub fn load_vessel(path: &Path) -> Result<Tensor<f32>> {
    let t = load_image(path)?;
    if t.shape()[0] != 1 {
        return Err(Error::data(format!(
            "vessel map {} must be grayscale",
            path.display()
        )));
    }
    Ok(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Save a CHW tensor in [0,1] as an 8-bit PNG (1 channel gray, 3 channel RGB).
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::shape(format!(
            "save_image expects CHW, got {:?}",
            t.shape()
        )));
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf: Vec<u8> = t.data().iter().map(|&v| quant(v)).collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)?;
        }
        3 => {
            let mut buf = vec![0u8; 3 * h * w];
            for p in 0..h * w {
                for ci in 0..3 {
                    buf[p * 3 + ci] = quant(t.data()[ci * h * w + p]);
                }
            }
            let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape");
            img.save(path)?;
        }
        other => {
            return Err(Error::shape(format!(
                "save_image supports 1 or 3 channels, got {other}"
            )))
        }
    }
    Ok(())
}

/// Outcome of discriminator-based realism filtering.
#[derive(Debug, Clone)]
pub struct FilterReport {
    /// Index into the input slice for every kept pair.
    pub kept: Vec<usize>,
    pub scores: Vec<f32>,
    pub threshold: f32,
    /// Score histogram over ten equal bins of [0,1].
    pub histogram: [usize; 10],
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.scores.len() - self.kept.len()
    }
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "kept {} of {} pairs at threshold {}",
            self.kept.len(),
            self.scores.len(),
            self.threshold
        )?;
        for (i, count) in self.histogram.iter().enumerate() {
            writeln!(f, "  [{:.1},{:.1}) {}", i as f32 / 10.0, (i + 1) as f32 / 10.0, count)?;
        }
        Ok(())
    }
}

/// Keep pairs the discriminator scores strictly above `threshold`.
pub fn filter_realistic(
    disc: &Discriminator,
    store: &ParamStore,
    pairs: &[ImagePair],
    threshold: f32,
) -> Result<FilterReport> {
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        scores.push(disc.discriminate(store, &pair.fundus, &pair.vessel)?);
    }
    let mut histogram = [0usize; 10];
    for &s in &scores {
        let bin = ((s * 10.0) as usize).min(9);
        histogram[bin] += 1;
    }
    let kept = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(FilterReport {
        kept,
        scores,
        threshold,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut stream = Stream::derive(1, &[0]);
        let rgb = Tensor::<f32>::rand_uniform(&[3, 9, 7], 0.0, 1.0, &mut stream);
        let p = dir.path().join("x.png");
        save_image(&rgb, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), &[3, 9, 7]);
        for (a, b) in rgb.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grayscale_loads_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let g = Tensor::<f32>::full(&[1, 4, 5], 0.25);
        let p = dir.path().join("g.png");
        save_image(&g, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), &[1, 4, 5]);
    }

    #[test]
    fn vessel_maps_rebinarize_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = Tensor::<f32>::from_fn(&[1, 4, 4], |i| if i % 3 == 0 { 0.9 } else { 0.1 });
        let p = dir.path().join("v.png");
        save_image(&v, &p).unwrap();
        let back = load_vessel(&p).unwrap();
        assert!(back.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn unreadable_file_is_a_data_error() {
        let err = load_image(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Data);
    }

    #[test]
    fn manifest_round_trips_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        // create the referenced files
        for sub in ["fundus", "vessel"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        let f = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        let v = Tensor::<f32>::zeros(&[1, 4, 4]);
        save_image(&f, &root.join("fundus/a.png")).unwrap();
        save_image(&v, &root.join("vessel/a.png")).unwrap();
        let m = DatasetManifest {
            root: root.to_path_buf(),
            entries: vec![ManifestEntry {
                id: "a".into(),
                split: Split::Train,
                fundus: "fundus/a.png".into(),
                vessel: "vessel/a.png".into(),
            }],
        };
        m.save().unwrap();
        let loaded = DatasetManifest::load(root).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        assert_eq!(loaded.entries[0].id, "a");
        assert_eq!(loaded.entries[0].split, Split::Train);

        // duplicate id -> error
        let mut text = std::fs::read_to_string(DatasetManifest::manifest_path(root)).unwrap();
        text.push_str("a train fundus/a.png vessel/a.png\n");
        std::fs::write(DatasetManifest::manifest_path(root), text).unwrap();
        assert!(DatasetManifest::load(root).is_err());
    }

    #[test]
    fn manifest_missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(
            DatasetManifest::manifest_path(root),
            "a train fundus/a.png vessel/a.png\n",
        )
        .unwrap();
        assert!(DatasetManifest::load(root).is_err());
    }
}
