//! Implementations of the pipeline subcommands.

use std::path::{Path, PathBuf};

use retree_core::data::{
    filter_realistic, load_image, load_vessel, make_dataset, save_image, DatasetManifest,
    ImagePair, ManifestEntry, Split,
};
use retree_core::diffusion::{from_model_range, to_model_range, DenoiserSampler, DiffusionProcess};
use retree_core::error::{Error, Result};
use retree_core::losses::ssim_value;
use retree_core::metrics::{
    confusion, embed, fid, gaussian_stats, jaccard, kappa, mcc, precision_recall_f1_accuracy,
    psnr, ConfusionCounts, DefaultEmbedder,
};
use retree_core::networks::Denoiser;
use retree_core::numerics::Tensor;
use retree_core::training::{
    denoiser_from_checkpoint, discriminator_from_checkpoint, fit_diffusion, fit_disc, fit_seg,
    fit_sr, segunet_from_checkpoint, Checkpoint, DiffusionFit, DiffusionStage, DiscFit, FitSummary,
    SegFit, SrFit, SrMode,
};

use crate::config::RunConfig;

/// Refuse to write into an existing non-empty directory unless forced.
pub fn ensure_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(Error::data(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn ensure_out_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::data(format!(
            "output file {} exists (pass --force to overwrite)",
            path.display()
        )));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Log the fully resolved config to stdout and into the output directory.
pub fn log_config(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    let text = cfg.to_text();
    println!("resolved configuration:");
    for line in text.lines() {
        println!("  {line}");
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved.cfg"), &text)?;
    }
    Ok(())
}

fn parse_splits(s: &str, n: usize) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "--splits expects train,val,test counts, got '{s}'"
        )));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad split count '{p}'")))
        })
        .collect::<Result<_>>()?;
    if nums.iter().sum::<usize>() != n {
        return Err(Error::config(format!(
            "splits {s} do not sum to n = {n}"
        )));
    }
    Ok((nums[0], nums[1], nums[2]))
}

pub fn synth_data(
    cfg: &RunConfig,
    out: &Path,
    n: usize,
    splits: &str,
    force: bool,
) -> Result<()> {
    let splits = parse_splits(splits, n)?;
    ensure_out_dir(out, force)?;
    log_config(cfg, Some(out))?;
    // emptiness already enforced above, resolved.cfg is in place
    let manifest = make_dataset(n, splits, &cfg.synth_params(), out, true)?;
    println!(
        "wrote {} pairs under {} ({} train / {} val / {} test)",
        manifest.entries.len(),
        out.display(),
        splits.0,
        splits.1,
        splits.2
    );
    Ok(())
}

fn print_summary(stage: &str, s: &FitSummary) {
    println!(
        "{stage}: {} epochs, final epoch avg loss {:.6}, best {:.6}",
        s.epochs_run, s.final_epoch_avg, s.best_epoch_avg
    );
    println!("  last checkpoint: {}", s.last_checkpoint.display());
    println!("  best checkpoint: {}", s.best_checkpoint.display());
    println!("  loss log: {}", s.loss_log.display());
}

fn load_resume(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load(p)).transpose()
}

pub fn train_diffusion_cmd(
    cfg: &RunConfig,
    stage: DiffusionStage,
    data_root: &Path,
    out: &Path,
    resume: Option<&PathBuf>,
) -> Result<()> {
    log_config(cfg, Some(out))?;
    let manifest = DatasetManifest::load(data_root)?;
    let pairs = manifest.load_pairs(Split::Train)?;
    let (in_ch, out_ch) = match stage {
        DiffusionStage::Vessel => (1, 1),
        DiffusionStage::Fundus => (4, 3),
    };
    let summary = fit_diffusion(DiffusionFit {
        stage,
        pairs: &pairs,
        denoiser_cfg: &cfg.denoiser(in_ch, out_ch),
        schedule: cfg.schedule()?,
        train: &cfg.train(),
        out_dir: out,
        config_text: cfg.to_text(),
        resume: load_resume(resume)?,
    })?;
    print_summary(
        match stage {
            DiffusionStage::Vessel => "train-vessel",
            DiffusionStage::Fundus => "train-fundus",
        },
        &summary,
    );
    Ok(())
}

pub fn train_seg_cmd(
    cfg: &RunConfig,
    data_root: &Path,
    out: &Path,
    resume: Option<&PathBuf>,
) -> Result<()> {
    log_config(cfg, Some(out))?;
    let manifest = DatasetManifest::load(data_root)?;
    let pairs = manifest.load_pairs(Split::Train)?;
    let summary = fit_seg(SegFit {
        pairs: &pairs,
        seg_cfg: &cfg.segunet(3),
        train: &cfg.train(),
        out_dir: out,
        config_text: cfg.to_text(),
        resume: load_resume(resume)?,
    })?;
    print_summary("train-seg", &summary);
    Ok(())
}

pub fn train_disc_cmd(
    cfg: &RunConfig,
    real_root: &Path,
    fake_root: &Path,
    out: &Path,
    resume: Option<&PathBuf>,
) -> Result<()> {
    log_config(cfg, Some(out))?;
    let real = DatasetManifest::load(real_root)?.load_pairs(Split::Train)?;
    let fake = DatasetManifest::load(fake_root)?.load_pairs(Split::Train)?;
    let summary = fit_disc(DiscFit {
        real: &real,
        fake: &fake,
        disc_cfg: &cfg.discriminator(4),
        train: &cfg.train(),
        out_dir: out,
        config_text: cfg.to_text(),
        resume: load_resume(resume)?,
    })?;
    print_summary("train-disc", &summary);
    Ok(())
}

pub fn train_sr_cmd(
    cfg: &RunConfig,
    data_root: &Path,
    mode: &str,
    out: &Path,
    resume: Option<&PathBuf>,
) -> Result<()> {
    log_config(cfg, Some(out))?;
    let manifest = DatasetManifest::load(data_root)?;
    let pairs = manifest.load_pairs(Split::Train)?;
    let (mode, images): (SrMode, Vec<Tensor<f32>>) = match mode {
        "rgb" => (SrMode::Rgb, pairs.iter().map(|p| p.fundus.clone()).collect()),
        "binary" => (
            SrMode::Binary,
            pairs.iter().map(|p| p.vessel.clone()).collect(),
        ),
        other => {
            return Err(Error::config(format!(
                "--mode must be 'rgb' or 'binary', got '{other}'"
            )))
        }
    };
    let channels = if mode == SrMode::Rgb { 3 } else { 1 };
    let summary = fit_sr(SrFit {
        mode,
        images: &images,
        rrdb_cfg: &cfg.rrdb(channels),
        disc_cfg: &cfg.discriminator(channels),
        weights: cfg.sr_weights(),
        ssim: cfg.ssim(),
        train: &cfg.train(),
        out_dir: out,
        config_text: cfg.to_text(),
        resume: load_resume(resume)?,
    })?;
    print_summary("train-sr", &summary);
    Ok(())
}

/// Rebuild the denoiser recorded in a diffusion checkpoint.
fn denoiser_from(ckpt: &Checkpoint) -> Result<(Denoiser, retree_core::networks::ParamStore, RunConfig)>
{
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ckpt.config_text)
        .map_err(|e| Error::data(format!("checkpoint config does not parse: {e}")))?;
    let (in_ch, out_ch) = match ckpt.stage.as_str() {
        "vessel" => (1, 1),
        "fundus" => (4, 3),
        other => {
            return Err(Error::data(format!(
                "checkpoint stage '{other}' is not a diffusion stage"
            )))
        }
    };
    let (net, store) = denoiser_from_checkpoint(ckpt, &cfg.denoiser(in_ch, out_ch))?;
    Ok((net, store, cfg))
}

/// List PNG files in a directory, sorted by file name.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?
    {
        let p = entry?.path();
        if p.extension().map(|e| e == "png").unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::data(format!(
            "no .png files found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// An optional SR upscaler loaded from a checkpoint; channel count is read
/// off the first conv's weight shape.
struct Upscaler {
    gen: retree_core::networks::RrdbNet,
    store: retree_core::networks::ParamStore,
    channels: usize,
    scale: usize,
}

impl Upscaler {
    fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.stage != "sr" {
            return Err(Error::config(format!(
                "--upscale checkpoint is for stage '{}', expected 'sr'",
                ckpt.stage
            )));
        }
        let mut cfg = RunConfig::default();
        cfg.apply_text(&ckpt.config_text)?;
        let channels = ckpt
            .params
            .iter()
            .find(|(n, _)| n == "first.w")
            .map(|(_, t)| t.shape()[1])
            .ok_or_else(|| Error::data("sr checkpoint is missing its first conv".to_string()))?;
        let (gen, _disc, store) = retree_core::training::rrdb_from_checkpoint(
            &ckpt,
            &cfg.rrdb(channels),
            &cfg.discriminator(channels),
        )?;
        Ok(Upscaler {
            gen,
            store,
            channels,
            scale: cfg.sr_scale,
        })
    }

    fn apply(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        if img.shape()[0] != self.channels {
            return Err(Error::config(format!(
                "--upscale model expects {} channels, sample has {}",
                self.channels,
                img.shape()[0]
            )));
        }
        Ok(self.gen.upscale(&self.store, img)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sample_cmd(
    cfg_cli: &RunConfig,
    ckpt_path: &Path,
    stage: &str,
    n: usize,
    out: &Path,
    cond_dir: Option<&PathBuf>,
    vessel_ckpt: Option<&PathBuf>,
    upscale: Option<&PathBuf>,
    force: bool,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    if ckpt.stage != stage {
        return Err(Error::config(format!(
            "checkpoint is for stage '{}' but --stage {stage} was requested",
            ckpt.stage
        )));
    }
    let (net, store, ckpt_cfg) = denoiser_from(&ckpt)?;
    log_config(&ckpt_cfg, Some(out))?;
    let upscaler = upscale.map(|p| Upscaler::load(p)).transpose()?;
    let schedule = ckpt
        .schedule
        .clone()
        .ok_or_else(|| Error::data("diffusion checkpoint carries no schedule".to_string()))?;
    let res = ckpt_cfg.resolution;
    let seed = cfg_cli.seed;
    let sampler = DenoiserSampler {
        net: &net,
        store: &store,
    };
    let post = |img: Tensor<f32>| -> Result<Tensor<f32>> {
        match &upscaler {
            Some(u) => u.apply(&img),
            None => Ok(img),
        }
    };
    match stage {
        "vessel" => {
            let proc = DiffusionProcess::new(schedule, 1, 0, res, res)?;
            let samples = proc.sample(&sampler, n, None, seed)?;
            for i in 0..n {
                let img = post(from_model_range(&slice_sample(&samples, i)?))?;
                save_image(&img, &out.join(format!("vessel_{i:05}.png")))?;
            }
            println!("wrote {n} vessel maps to {}", out.display());
        }
        "fundus" => {
            // conditioning source: stored maps or a stage-1 checkpoint
            let cond_maps: Vec<Tensor<f32>> = match (cond_dir, vessel_ckpt) {
                (Some(dir), None) => {
                    let files = list_pngs(dir)?;
                    if files.len() < n {
                        return Err(Error::data(format!(
                            "conditioning directory has {} maps, need {n}",
                            files.len()
                        )));
                    }
                    files[..n]
                        .iter()
                        .map(|p| load_vessel(p))
                        .collect::<Result<_>>()?
                }
                (None, Some(vc)) => {
                    let vckpt = Checkpoint::load(vc)?;
                    let (vnet, vstore, vcfg) = denoiser_from(&vckpt)?;
                    if vckpt.stage != "vessel" {
                        return Err(Error::config(
                            "--vessel-ckpt must point at a stage-1 checkpoint".to_string(),
                        ));
                    }
                    let vsched = vckpt.schedule.clone().ok_or_else(|| {
                        Error::data("vessel checkpoint carries no schedule".to_string())
                    })?;
                    let vproc =
                        DiffusionProcess::new(vsched, 1, 0, vcfg.resolution, vcfg.resolution)?;
                    let vsampler = DenoiserSampler {
                        net: &vnet,
                        store: &vstore,
                    };
                    let maps = vproc.sample(&vsampler, n, None, seed ^ 0x7e55e1)?;
                    (0..n)
                        .map(|i| {
                            slice_sample(&maps, i)
                                .map(|m| from_model_range(&m).map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
                        })
                        .collect::<Result<_>>()?
                }
                (Some(_), Some(_)) => {
                    return Err(Error::config(
                        "give either --cond-dir or --vessel-ckpt, not both".to_string(),
                    ))
                }
                (None, None) => {
                    return Err(Error::config(
                        "sampling the fundus stage needs a conditioning source: --cond-dir or --vessel-ckpt"
                            .to_string(),
                    ))
                }
            };
            for (i, m) in cond_maps.iter().enumerate() {
                if m.shape() != [1, res, res] {
                    return Err(Error::shape(format!(
                        "conditioning map {i} has shape {:?}, expected [1, {res}, {res}]",
                        m.shape()
                    )));
                }
            }
            let proc = DiffusionProcess::new(schedule, 3, 1, res, res)?;
            let cond_norm: Vec<Tensor<f32>> = cond_maps.iter().map(to_model_range).collect();
            let refs: Vec<&Tensor<f32>> = cond_norm.iter().collect();
            let cond_batch = retree_core::training::stack_batch(&refs)?;
            let samples = proc.sample(&sampler, n, Some(&cond_batch), seed)?;
            // write a dataset root so downstream stages can consume it
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let id = format!("gen{i:05}");
                let fundus = post(from_model_range(&slice_sample(&samples, i)?))?;
                // keep the saved pair spatially aligned when upscaling
                let vessel_out = match &upscaler {
                    Some(u) => nearest_upscale(&cond_maps[i], u.scale)?,
                    None => cond_maps[i].clone(),
                };
                let fundus_rel = format!("fundus/{id}.png");
                let vessel_rel = format!("vessel/{id}.png");
                save_image(&fundus, &out.join(&fundus_rel))?;
                save_image(&vessel_out, &out.join(&vessel_rel))?;
                entries.push(ManifestEntry {
                    id,
                    split: Split::Train,
                    fundus: fundus_rel.into(),
                    vessel: vessel_rel.into(),
                });
            }
            DatasetManifest {
                root: out.to_path_buf(),
                entries,
            }
            .save()?;
            println!("wrote {n} fundus/vessel pairs to {}", out.display());
        }
        other => {
            return Err(Error::config(format!(
                "--stage must be 'vessel' or 'fundus', got '{other}'"
            )))
        }
    }
    Ok(())
}

/// Nearest-neighbor upscale of a CHW image; binary maps stay binary.
fn nearest_upscale(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::shape("nearest_upscale expects CHW".to_string()));
    };
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::<f32>::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data_mut()[ci * oh * ow + y * ow + x] =
                    img.data()[ci * h * w + (y / factor) * w + x / factor];
            }
        }
    }
    Ok(out)
}

/// Extract sample i of an NCHW batch as a CHW tensor.
fn slice_sample(batch: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = batch.shape()[..] else {
        return Err(Error::shape("expected NCHW batch".to_string()));
    };
    if i >= n {
        return Err(Error::shape(format!("sample index {i} out of range {n}")));
    }
    let plane = c * h * w;
    Tensor::new(
        vec![c, h, w],
        batch.data()[i * plane..(i + 1) * plane].to_vec(),
    )
}

pub fn filter_cmd(
    cfg: &RunConfig,
    data_root: &Path,
    disc_ckpt: &Path,
    out: &Path,
    threshold: Option<f32>,
    force: bool,
) -> Result<()> {
    ensure_out_dir(out, force)?;
    log_config(cfg, Some(out))?;
    let threshold = threshold.unwrap_or(cfg.filter_threshold as f32);
    let manifest = DatasetManifest::load(data_root)?;
    let pairs: Vec<ImagePair> = manifest.load_pairs(Split::Train)?;
    let ckpt = Checkpoint::load(disc_ckpt)?;
    if ckpt.stage != "disc" {
        return Err(Error::config(format!(
            "--disc checkpoint is for stage '{}', expected 'disc'",
            ckpt.stage
        )));
    }
    let mut dcfg = RunConfig::default();
    dcfg.apply_text(&ckpt.config_text)?;
    let (disc, store) = discriminator_from_checkpoint(&ckpt, &dcfg.discriminator(4))?;
    let report = filter_realistic(&disc, &store, &pairs, threshold)?;

    let mut entries = Vec::new();
    for &idx in &report.kept {
        let pair = &pairs[idx];
        let fundus_rel = format!("fundus/{}.png", pair.id);
        let vessel_rel = format!("vessel/{}.png", pair.id);
        save_image(&pair.fundus, &out.join(&fundus_rel))?;
        save_image(&pair.vessel, &out.join(&vessel_rel))?;
        entries.push(ManifestEntry {
            id: pair.id.clone(),
            split: Split::Train,
            fundus: fundus_rel.into(),
            vessel: vessel_rel.into(),
        });
    }
    DatasetManifest {
        root: out.to_path_buf(),
        entries,
    }
    .save()?;
    let text = format!("{report}");
    print!("{text}");
    std::fs::write(out.join("report.txt"), text)?;
    Ok(())
}

/// What to evaluate: two directories of images matched by file name, or a
/// segmentation checkpoint run over a dataset split.
pub enum EvalSource<'a> {
    Dirs { pred: &'a Path, gt: &'a Path },
    Seg {
        ckpt: &'a Path,
        data: &'a Path,
        split: Split,
    },
}

fn gather_eval_pairs(source: &EvalSource) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>, String)> {
    match source {
        EvalSource::Dirs { pred, gt } => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for pf in list_pngs(pred)? {
                let name = pf.file_name().unwrap();
                let gf = gt.join(name);
                if !gf.is_file() {
                    continue;
                }
                preds.push(load_image(&pf)?);
                gts.push(load_image(&gf)?);
            }
            if preds.is_empty() {
                return Err(Error::data(format!(
                    "no file names shared between {} and {}",
                    pred.display(),
                    gt.display()
                )));
            }
            Ok((
                preds,
                gts,
                format!("{} vs {}", pred.display(), gt.display()),
            ))
        }
        EvalSource::Seg { ckpt, data, split } => {
            let ckpt = Checkpoint::load(ckpt)?;
            if ckpt.stage != "seg" {
                return Err(Error::config(format!(
                    "--seg checkpoint is for stage '{}', expected 'seg'",
                    ckpt.stage
                )));
            }
            let mut scfg = RunConfig::default();
            scfg.apply_text(&ckpt.config_text)?;
            let (net, store) = segunet_from_checkpoint(&ckpt, &scfg.segunet(3))?;
            let pairs = DatasetManifest::load(data)?.load_pairs(*split)?;
            if pairs.is_empty() {
                return Err(Error::data(format!(
                    "no pairs in split '{split}' of {}",
                    data.display()
                )));
            }
            let mut preds = Vec::with_capacity(pairs.len());
            let mut gts = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let batch = p.fundus.reshape(&{
                    let mut s = vec![1];
                    s.extend_from_slice(p.fundus.shape());
                    s
                })?;
                let prob = net.segment(&store, &batch)?;
                let s = prob.shape()[1..].to_vec();
                preds.push(prob.reshape(&s)?);
                gts.push(p.vessel.clone());
            }
            Ok((
                preds,
                gts,
                format!("seg({}) on {} [{split}]", ckpt.stage, data.display()),
            ))
        }
    }
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    source: EvalSource,
    threshold: Option<f32>,
    out: Option<&PathBuf>,
    force: bool,
) -> Result<()> {
    let threshold = threshold.unwrap_or(cfg.metric_threshold as f32);
    let (preds, gts, label) = gather_eval_pairs(&source)?;
    let mut lines = Vec::new();
    let mut counts = ConfusionCounts::default();
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    let mut ssim_sum = 0.0;
    let mut ssim_n = 0usize;
    let mut segmentation = false;
    for (pred, gt) in preds.iter().zip(&gts) {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        if pred.shape()[0] == 1 {
            segmentation = true;
            let gt_bin = gt.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            counts.merge(&confusion(pred, &gt_bin, threshold)?);
        }
        let p = psnr(pred, gt, 1.0)?;
        if p.is_finite() {
            psnr_sum += p;
            psnr_n += 1;
        }
        let min_side = pred.shape()[1].min(pred.shape()[2]);
        if min_side >= cfg.ssim().window {
            ssim_sum += ssim_value(pred, gt, &cfg.ssim())?;
            ssim_n += 1;
        }
    }

    lines.push(format!("pairs={}", preds.len()));
    if segmentation {
        let p = precision_recall_f1_accuracy(&counts);
        lines.push(format!("jaccard={}", jaccard(&counts)));
        lines.push(format!("mcc={}", mcc(&counts)));
        lines.push(format!("kappa={}", kappa(&counts)));
        lines.push(format!("f1={}", p.f1));
        lines.push(format!("precision={}", p.precision));
        lines.push(format!("recall={}", p.recall));
        lines.push(format!("accuracy={}", p.accuracy));
    }
    if psnr_n > 0 {
        lines.push(format!("psnr_db={}", psnr_sum / psnr_n as f64));
    }
    if ssim_n > 0 {
        lines.push(format!("ssim={}", ssim_sum / ssim_n as f64));
    }
    if preds.len() >= 2 {
        let embedder = DefaultEmbedder::new(preds[0].shape()[0]);
        let fp = embed(&preds, &embedder)?;
        let fg = embed(&gts, &embedder)?;
        let d = fid(&gaussian_stats(&fp)?, &gaussian_stats(&fg)?)?;
        lines.push(format!("fid={d}"));
    }

    println!("evaluation of {label}");
    println!("{:-<38}", "");
    for l in &lines {
        let (k, v) = l.split_once('=').unwrap();
        println!("{k:<12} {v}");
    }
    println!("{:-<38}", "");
    for l in &lines {
        println!("{l}");
    }
    if let Some(out) = out {
        ensure_out_file(out, force)?;
        std::fs::write(out, lines.join("\n") + "\n")?;
    }
    Ok(())
}

/// Compose (input | ground truth | prediction) rows into one mosaic PNG.
pub fn grid_cmd(
    pred_dir: &Path,
    gt_dir: Option<&PathBuf>,
    input_dir: Option<&PathBuf>,
    out: &Path,
    rows: usize,
    force: bool,
) -> Result<()> {
    ensure_out_file(out, force)?;
    let pred_files = list_pngs(pred_dir)?;
    let take = pred_files.len().min(rows.max(1));
    let mut grid_rows: Vec<Vec<Tensor<f32>>> = Vec::new();
    for pf in pred_files.iter().take(take) {
        let name = pf.file_name().unwrap();
        let mut row = Vec::new();
        if let Some(dir) = input_dir {
            let f = dir.join(name);
            if f.is_file() {
                row.push(load_image(&f)?);
            }
        }
        if let Some(dir) = gt_dir {
            let f = dir.join(name);
            if f.is_file() {
                row.push(load_image(&f)?);
            }
        }
        row.push(load_image(pf)?);
        grid_rows.push(row);
    }
    let mosaic = compose_mosaic(&grid_rows)?;
    save_image(&mosaic, out)?;
    println!(
        "wrote {}x{} mosaic of {} rows to {}",
        mosaic.shape()[2],
        mosaic.shape()[1],
        grid_rows.len(),
        out.display()
    );
    Ok(())
}

const GRID_PAD: usize = 2;

fn to_rgb(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    match t.shape()[0] {
        3 => Ok(t.clone()),
        1 => {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![3, h, w], data)
        }
        c => Err(Error::shape(format!("cannot render {c}-channel image"))),
    }
}

fn compose_mosaic(rows: &[Vec<Tensor<f32>>]) -> Result<Tensor<f32>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::data("nothing to compose into a mosaic".to_string()));
    }
    let (h, w) = (rows[0][0].shape()[1], rows[0][0].shape()[2]);
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let total_h = rows.len() * h + (rows.len() - 1) * GRID_PAD;
    let total_w = cols * w + (cols - 1) * GRID_PAD;
    let mut canvas = Tensor::<f32>::full(&[3, total_h, total_w], 1.0);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.shape()[1] != h || img.shape()[2] != w {
                return Err(Error::shape(format!(
                    "mosaic images disagree in size: {:?} vs {h}x{w}",
                    &img.shape()[1..]
                )));
            }
            let rgb = to_rgb(img)?;
            let oy = ri * (h + GRID_PAD);
            let ox = ci * (w + GRID_PAD);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        canvas.data_mut()[c * total_h * total_w + (oy + y) * total_w + ox + x] =
                            rgb.data()[c * h * w + y * w + x];
                    }
                }
            }
        }
    }
    Ok(canvas)
}
