//! Procedural retinal data: branching vessel trees rendered as binary maps
//! and matching pseudo-fundus images. A stand-in corpus that makes the whole
//! pipeline trainable on CPU; its statistics are calibrated once and frozen
//! in the tests, with no claim of clinical fidelity.

use std::path::Path;

use super::{save_image, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTreeParams {
    /// Square image extent in pixels.
    pub resolution: usize,
    /// Number of primary vessels leaving the optic disc.
    pub trunks: usize,
    /// Per-step bifurcation probability.
    pub branch_prob: f64,
    /// Walk step length in pixels.
    pub step_len: f64,
    /// Width multiplier applied at each bifurcation.
    pub width_decay: f64,
    /// Std-dev (radians) of the per-step heading jitter.
    pub curvature_jitter: f64,
    /// Optic disc offset from image center, as a fraction of FOV radius.
    pub disc_offset: f64,
    /// Optic disc radius as a fraction of FOV radius.
    pub disc_radius: f64,
    pub seed: u64,
}

impl SyntheticTreeParams {
    pub fn for_resolution(resolution: usize) -> Self {
        let scale = resolution as f64 / 32.0;
        SyntheticTreeParams {
            resolution,
            trunks: 5,
            branch_prob: 0.10,
            step_len: scale.max(1.0),
            width_decay: 0.72,
            curvature_jitter: 0.22,
            disc_offset: 0.55,
            disc_radius: 0.16,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::config(format!(
                "synthesizer resolution {} below minimum 32",
                self.resolution
            )));
        }
        if self.trunks == 0 {
            return Err(Error::config("synthesizer needs at least one trunk"));
        }
        for (name, p) in [
            ("branch_prob", self.branch_prob),
            ("width_decay", self.width_decay),
            ("disc_offset", self.disc_offset),
            ("disc_radius", self.disc_radius),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if self.step_len <= 0.0 {
            return Err(Error::config("step_len must be positive"));
        }
        Ok(())
    }
}

/// Field-of-view and optic-disc geometry shared by the vessel and fundus
/// renderers: (fov_cy, fov_cx, fov_r, disc_cy, disc_cx, disc_r).
pub fn disc_geometry(
    seed: u64,
    resolution: usize,
    disc_offset: f64,
    disc_radius: f64,
) -> (f64, f64, f64, f64, f64, f64) {
    let c = resolution as f64 / 2.0;
    let fov_r = 0.48 * resolution as f64;
    let mut s = Stream::derive(seed, &[0x9e0]);
    // disc sits to the left or right of center, tilted a little
    let side = if s.uniform() < 0.5 { -1.0 } else { 1.0 };
    let angle = s.uniform_in(-0.35, 0.35);
    let dist = disc_offset * fov_r;
    let dcy = c + dist * angle.sin();
    let dcx = c + side * dist * angle.cos();
    (c, c, fov_r, dcy, dcx, disc_radius * fov_r)
}

struct Walker {
    y: f64,
    x: f64,
    heading: f64,
    width: f64,
}

/// Render a branching vessel tree as a binary map [1,H,W].
pub fn synth_vessel_tree(params: &SyntheticTreeParams) -> Result<Tensor<f32>> {
    params.validate()?;
    let res = params.resolution;
    let (fcy, fcx, fov_r, dcy, dcx, disc_r) =
        disc_geometry(params.seed, res, params.disc_offset, params.disc_radius);
    // keep a margin so every vessel pixel stays strictly inside the FOV
    let max_r = fov_r - 2.0;
    let mut grid = vec![0.0f32; res * res];
    let mut stream = Stream::derive(params.seed, &[0x7e55e1]);
    let scale = res as f64 / 32.0;

    let mut stack: Vec<Walker> = Vec::new();
    for k in 0..params.trunks {
        // trunks leave the disc rim roughly away from the disc center
        let base = (k as f64 + 0.5) / params.trunks as f64 * std::f64::consts::TAU;
        let jitter = stream.uniform_in(-0.3, 0.3);
        let theta = base + jitter;
        stack.push(Walker {
            y: dcy + disc_r * theta.sin(),
            x: dcx + disc_r * theta.cos(),
            heading: theta,
            width: 1.9 * scale,
        });
    }

    let max_steps = res * 3;
    let min_width = 0.55 * scale;
    let mut guard = 0usize;
    while let Some(mut w) = stack.pop() {
        guard += 1;
        if guard > 4096 {
            break;
        }
        for _ in 0..max_steps {
            let dy = w.y - fcy;
            let dx = w.x - fcx;
            if (dy * dy + dx * dx).sqrt() + w.width * 0.5 >= max_r {
                break;
            }
            stamp(&mut grid, res, w.y, w.x, w.width * 0.5);
            w.heading += stream.normal_f64() * params.curvature_jitter;
            w.y += params.step_len * w.heading.sin();
            w.x += params.step_len * w.heading.cos();
            if stream.uniform() < params.branch_prob && w.width * params.width_decay >= min_width {
                let split = stream.uniform_in(0.35, 0.8);
                let side = if stream.uniform() < 0.5 { 1.0 } else { -1.0 };
                stack.push(Walker {
                    y: w.y,
                    x: w.x,
                    heading: w.heading + side * split,
                    width: w.width * params.width_decay,
                });
                w.heading -= side * split * 0.5;
                w.width *= params.width_decay.max(0.85);
            }
        }
    }

    Tensor::new(vec![1, res, res], grid)
}

/// Stamp a filled disc of the given radius; at least the center pixel.
fn stamp(grid: &mut [f32], res: usize, cy: f64, cx: f64, radius: f64) {
    let r = radius.max(0.5);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(res - 1);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(res - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                grid[y * res + x] = 1.0;
            }
        }
    }
}

/// Render a pseudo-fundus image for a vessel map: radial red-orange
/// background inside the FOV, a bright optic disc, vessels darkened along
/// the map, and mild bounded noise.
pub fn synth_fundus(vessel: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    let [c, h, w] = vessel.shape()[..] else {
        return Err(Error::shape(format!(
            "synth_fundus expects a CHW vessel map, got {:?}",
            vessel.shape()
        )));
    };
    if c != 1 || h != w {
        return Err(Error::shape(format!(
            "synth_fundus expects a square single-channel map, got {:?}",
            vessel.shape()
        )));
    }
    if vessel.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("synth_fundus: vessel map not binary".to_string()));
    }
    let defaults = SyntheticTreeParams::for_resolution(h.max(32));
    let (fcy, fcx, fov_r, dcy, dcx, disc_r) =
        disc_geometry(seed, h, defaults.disc_offset, defaults.disc_radius);
    let mut stream = Stream::derive(seed, &[0xf0d05]);
    let base = [
        stream.uniform_in(0.74, 0.92) as f32,
        stream.uniform_in(0.40, 0.55) as f32,
        stream.uniform_in(0.10, 0.22) as f32,
    ];
    let disc_color = [0.96f32, 0.86, 0.55];
    let vessel_factor = [0.55f32, 0.40, 0.55];
    let noise_amp = 0.012f32;

    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - fcy;
            let dx = x as f64 + 0.5 - fcx;
            let dist = (dy * dy + dx * dx).sqrt();
            let p = y * w + x;
            if dist >= fov_r {
                continue; // black outside the field of view
            }
            let vignette = (1.0 - 0.22 * (dist / fov_r).powi(2)) as f32;
            let ddy = y as f64 + 0.5 - dcy;
            let ddx = x as f64 + 0.5 - dcx;
            let ddist = (ddy * ddy + ddx * ddx).sqrt();
            // smooth bright blob for the disc
            let blob = (1.0 - (ddist / (1.6 * disc_r)).powi(2)).max(0.0) as f32;
            let on_vessel = vessel.data()[p] == 1.0;
            for ci in 0..3 {
                let mut v = base[ci] * vignette;
                v += (disc_color[ci] - v) * blob;
                if on_vessel {
                    v *= vessel_factor[ci];
                }
                v += noise_amp * (stream.uniform() as f32 * 2.0 - 1.0);
                data[ci * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Generate `n` paired images, write them under `root` and return the
/// manifest. Fully reproducible from (params, seed).
pub fn make_dataset(
    n: usize,
    splits: (usize, usize, usize),
    params: &SyntheticTreeParams,
    root: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    params.validate()?;
    let (tr, va, te) = splits;
    if tr + va + te != n {
        return Err(Error::config(format!(
            "split sizes {tr}+{va}+{te} do not sum to {n}"
        )));
    }
    if root.exists() {
        let non_empty = std::fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(Error::data(format!(
                "output directory {} is not empty (use force to overwrite)",
                root.display()
            )));
        }
    }
    std::fs::create_dir_all(root.join("fundus"))?;
    std::fs::create_dir_all(root.join("vessel"))?;

    let mut entries = Vec::with_capacity(n);
    let mut seed_stream = Stream::derive(params.seed, &[0xda7a_5e7]);
    for i in 0..n {
        let img_seed = seed_stream.int_in(0, u64::MAX - 1);
        let p = params.clone().with_seed(img_seed);
        let vessel = synth_vessel_tree(&p)?;
        let fundus = synth_fundus(&vessel, img_seed)?;
        let id = format!("img{i:05}");
        let split = if i < tr {
            Split::Train
        } else if i < tr + va {
            Split::Val
        } else {
            Split::Test
        };
        let fundus_rel = format!("fundus/{id}.png");
        let vessel_rel = format!("vessel/{id}.png");
        save_image(&fundus, &root.join(&fundus_rel))?;
        save_image(&vessel, &root.join(&vessel_rel))?;
        entries.push(ManifestEntry {
            id,
            split,
            fundus: fundus_rel.into(),
            vessel: vessel_rel.into(),
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{confusion, jaccard};

    fn params32(seed: u64) -> SyntheticTreeParams {
        SyntheticTreeParams::for_resolution(32).with_seed(seed)
    }

    #[test]
    fn vessel_tree_is_deterministic() {
        let a = synth_vessel_tree(&params32(9)).unwrap();
        let b = synth_vessel_tree(&params32(9)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = synth_vessel_tree(&params32(10)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn vessel_fraction_calibrated_over_100_seeds() {
        for seed in 0..100u64 {
            let v = synth_vessel_tree(&params32(seed)).unwrap();
            let frac = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64;
            assert!(
                (0.02..=0.25).contains(&frac),
                "seed {seed}: vessel fraction {frac} out of calibrated band"
            );
        }
    }

    #[test]
    fn vessel_pixels_inside_field_of_view() {
        for seed in [0u64, 7, 23] {
            let p = params32(seed);
            let v = synth_vessel_tree(&p).unwrap();
            let res = p.resolution;
            let (fcy, fcx, fov_r, ..) = disc_geometry(seed, res, p.disc_offset, p.disc_radius);
            for y in 0..res {
                for x in 0..res {
                    if v.data()[y * res + x] == 1.0 {
                        let dy = y as f64 + 0.5 - fcy;
                        let dx = x as f64 + 0.5 - fcx;
                        assert!(
                            (dy * dy + dx * dx).sqrt() < fov_r,
                            "seed {seed}: vessel pixel ({y},{x}) outside FOV"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_params_rejected() {
        let mut p = params32(1);
        p.trunks = 0;
        assert!(synth_vessel_tree(&p).is_err());
        let mut p = params32(1);
        p.resolution = 16;
        assert!(synth_vessel_tree(&p).is_err());
        let mut p = params32(1);
        p.branch_prob = 1.5;
        assert!(synth_vessel_tree(&p).is_err());
    }

    #[test]
    fn fundus_is_deterministic_and_darkens_vessels_locally() {
        let p = params32(4);
        let v = synth_vessel_tree(&p).unwrap();
        let f1 = synth_fundus(&v, 4).unwrap();
        let f2 = synth_fundus(&v, 4).unwrap();
        assert_eq!(f1.data(), f2.data());

        // every vessel pixel is strictly darker than the mean of the
        // non-vessel pixels in its 5x5 neighborhood
        let res = 32usize;
        let lum = |t: &Tensor<f32>, y: usize, x: usize| {
            (0..3)
                .map(|c| t.data()[c * res * res + y * res + x])
                .sum::<f32>()
                / 3.0
        };
        let mut checked = 0;
        for y in 0..res {
            for x in 0..res {
                if v.data()[y * res + x] != 1.0 {
                    continue;
                }
                let mut bg = 0.0f32;
                let mut count = 0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= res as i64 || nx >= res as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        // background inside the FOV only
                        if v.data()[ny * res + nx] == 0.0 && lum(&f1, ny, nx) > 0.05 {
                            bg += lum(&f1, ny, nx);
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    let bg_mean = bg / count as f32;
                    assert!(
                        lum(&f1, y, x) < bg_mean,
                        "vessel pixel ({y},{x}) not darker than local background"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20, "too few vessel pixels checked: {checked}");
    }

    #[test]
    fn threshold_heuristic_recovers_vessels() {
        // green-channel darkness against the FOV median recovers the map
        // well enough to prove the task is learnable
        for seed in [1u64, 12, 77] {
            let p = params32(seed);
            let v = synth_vessel_tree(&p).unwrap();
            let f = synth_fundus(&v, seed).unwrap();
            let res = 32usize;
            let green = &f.data()[res * res..2 * res * res];
            let mut inside: Vec<f32> = green.iter().copied().filter(|&g| g > 0.05).collect();
            inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = inside[inside.len() / 2];
            let pred = Tensor::<f32>::from_fn(&[1, res, res], |i| {
                if green[i] > 0.05 && green[i] < 0.62 * median {
                    1.0
                } else {
                    0.0
                }
            });
            let c = confusion(&pred, &v, 0.5).unwrap();
            let j = jaccard(&c);
            assert!(j >= 0.5, "seed {seed}: heuristic recovery jaccard {j} < 0.5");
        }
    }

    #[test]
    fn dataset_generation_reproducible_and_disjoint() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let p = params32(21);
        let m1 = make_dataset(10, (8, 1, 1), &p, dir1.path(), false).unwrap();
        let m2 = make_dataset(10, (8, 1, 1), &p, dir2.path(), false).unwrap();
        assert_eq!(m1.entries.len(), 10);
        // same params + seed -> identical file bytes
        for (a, b) in m1.entries.iter().zip(&m2.entries) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.split, b.split);
            let fa = std::fs::read(dir1.path().join(&a.fundus)).unwrap();
            let fb = std::fs::read(dir2.path().join(&b.fundus)).unwrap();
            assert_eq!(fa, fb);
        }
        // splits partition the ids
        let train: Vec<_> = m1.split_entries(Split::Train).collect();
        let val: Vec<_> = m1.split_entries(Split::Val).collect();
        let test: Vec<_> = m1.split_entries(Split::Test).collect();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
        // manifest round-trips
        let loaded = DatasetManifest::load(dir1.path()).unwrap();
        assert_eq!(loaded.entries.len(), 10);
        let pairs = loaded.load_pairs(Split::Train).unwrap();
        assert_eq!(pairs.len(), 8);
        pairs[0].validate().unwrap();
    }

    #[test]
    fn existing_nonempty_root_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("marker"), "x").unwrap();
        let p = params32(3);
        assert!(make_dataset(2, (2, 0, 0), &p, dir.path(), false).is_err());
        assert!(make_dataset(2, (2, 0, 0), &p, dir.path(), true).is_ok());
    }

    #[test]
    fn split_sizes_must_sum() {
        let dir = tempfile::tempdir().unwrap();
        let p = params32(3);
        assert!(make_dataset(5, (3, 1, 0), &p, dir.path(), false).is_err());
    }
}
