//! Corpus evaluation: per-image metrics, per-schedule means, a TSV table and
//! rate-distortion plots.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use log::warn;
use rayon::prelude::*;

use crate::bitstream::{compute_bpp, make_mask, MaskSchedule};
use crate::error::Result;
use crate::image::Image;
use crate::metrics::{perceptual_distance, psnr};
use crate::nn::scalar;
use crate::pipeline::codec::{decode_image, encode_image};
use crate::pipeline::model::HdcModel;
use crate::token_predictor::token_loss;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub image_id: String,
    pub schedule: MaskSchedule,
    /// Every transmitted bit, header included.
    pub bpp: f64,
    /// Index and LIC payload bits only.
    pub payload_bpp: f64,
    pub index_bpp: f64,
    pub lic_bpp: f64,
    pub psnr_db: f64,
    pub perceptual: f64,
    pub wall_time_ms: f64,
}

impl MetricRecord {
    pub fn rate(&self, include_header: bool) -> f64 {
        if include_header {
            self.bpp
        } else {
            self.payload_bpp
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSummary {
    pub schedule: MaskSchedule,
    pub count: usize,
    pub mean_bpp: f64,
    pub mean_payload_bpp: f64,
    pub mean_psnr_db: f64,
    pub mean_perceptual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<MetricRecord>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
    pub summaries: Vec<ScheduleSummary>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(records: Vec<MetricRecord>, skipped: Vec<(String, String)>) -> Self {
        let mut schedules: Vec<MaskSchedule> = Vec::new();
        for r in &records {
            if !schedules.contains(&r.schedule) {
                schedules.push(r.schedule);
            }
        }
        let summaries = schedules
            .into_iter()
            .map(|s| {
                let rs = || records.iter().filter(move |r| r.schedule == s);
                ScheduleSummary {
                    schedule: s,
                    count: rs().count(),
                    mean_bpp: mean(rs().map(|r| r.bpp)),
                    mean_payload_bpp: mean(rs().map(|r| r.payload_bpp)),
                    mean_psnr_db: mean(rs().map(|r| r.psnr_db)),
                    mean_perceptual: mean(rs().map(|r| r.perceptual)),
                }
            })
            .collect();
        Self {
            records,
            skipped,
            summaries,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn summary(&self, schedule: MaskSchedule) -> Option<&ScheduleSummary> {
        self.summaries.iter().find(|s| s.schedule == schedule)
    }

    /// Tab-separated, one header line, one row per record.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "image_id\tschedule\tbpp\tpayload_bpp\tindex_bpp\tlic_bpp\tpsnr_db\tperceptual\twall_time_ms"
        )?;
        for r in &self.records {
            writeln!(
                f,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.1}",
                r.image_id,
                r.schedule,
                r.bpp,
                r.payload_bpp,
                r.index_bpp,
                r.lic_bpp,
                r.psnr_db,
                r.perceptual,
                r.wall_time_ms
            )?;
        }
        Ok(())
    }

    /// `rd_psnr.png` and `rd_perceptual.png` in `dir`; nothing for an empty report.
    pub fn write_plots(&self, dir: impl AsRef<Path>, include_header: bool) -> Result<Vec<PathBuf>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let dir = dir.as_ref();
        let mut out = Vec::new();
        for (name, metric) in [
            ("rd_psnr.png", (|r: &MetricRecord| r.psnr_db) as fn(&MetricRecord) -> f64),
            ("rd_perceptual.png", |r: &MetricRecord| r.perceptual),
        ] {
            let series: Vec<(MaskSchedule, Vec<(f64, f64)>)> = self
                .summaries
                .iter()
                .map(|s| {
                    let pts = self
                        .records
                        .iter()
                        .filter(|r| r.schedule == s.schedule)
                        .map(|r| (r.rate(include_header), metric(r)))
                        .collect();
                    (s.schedule, pts)
                })
                .collect();
            let path = dir.join(name);
            plot::scatter(&series, &path)?;
            out.push(path);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    pub include_header: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            include_header: true,
        }
    }
}

/// Encodes and decodes one image under one schedule.
pub fn evaluate_one(id: &str, image: &Image, model: &HdcModel, schedule: MaskSchedule, seed: u64) -> Result<MetricRecord> {
    let start = Instant::now();
    let bs = encode_image(image, model, schedule)?;
    let out = decode_image(&bs, model, seed)?;
    let wall_time_ms = start.elapsed().as_secs_f64() * 1000.0;
    let budget = bs.budget();
    let (h, w) = image.dims();
    let px = (h * w) as f64;
    Ok(MetricRecord {
        image_id: id.to_string(),
        schedule,
        bpp: compute_bpp(&budget, h, w, true),
        payload_bpp: compute_bpp(&budget, h, w, false),
        index_bpp: budget.index_bits as f64 / px,
        lic_bpp: budget.lic_bits as f64 / px,
        psnr_db: psnr(&out, image)?,
        perceptual: perceptual_distance(&out, image, &model.perceptual)?,
        wall_time_ms,
    })
}

/// Every (image, schedule) pair, in parallel across images.
pub fn evaluate_images(
    images: &[(String, Image)],
    model: &HdcModel,
    schedules: &[MaskSchedule],
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let per_image: Vec<Result<Vec<MetricRecord>>> = images
        .par_iter()
        .map(|(id, img)| {
            schedules
                .iter()
                .map(|&s| evaluate_one(id, img, model, s, seed))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(images.len() * schedules.len());
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "ppm" | "tif" | "tiff")
    )
}

/// Named images plus `(file, reason)` for every file that could not be read.
pub type LoadedDir = (Vec<(String, Image)>, Vec<(String, String)>);

/// Loads every image file in `dir` (sorted by name), cropped to multiples of
/// `factor`. Unreadable files are returned as skipped.
pub fn load_dir(dir: impl AsRef<Path>, factor: usize) -> Result<LoadedDir> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match Image::load(&p).and_then(|i| i.crop_to_multiple(factor)) {
            Ok(img) => images.push((id, img)),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                skipped.push((id, e.to_string()));
            }
        }
    }
    Ok((images, skipped))
}

/// Evaluates a directory; writes `report.tsv` and plots into `out` when given.
pub fn eval_corpus(
    dir: impl AsRef<Path>,
    model: &HdcModel,
    schedules: &[MaskSchedule],
    opts: &EvalOptions,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let (images, skipped) = load_dir(&dir, model.cfg.vq.patch_size)?;
    if images.is_empty() {
        warn!("no decodable images in {}", dir.as_ref().display());
    }
    let report = EvalReport::new(evaluate_images(&images, model, schedules, opts.seed)?, skipped);
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        report.write_tsv(out.join("report.tsv"))?;
        report.write_plots(out, opts.include_header)?;
    }
    Ok(report)
}

/// Mean masked-token NLL of the predictor over `images` under `schedule`,
/// with the predictor's DRV either extracted from the ground truth or
/// sampled by diffusion.
pub fn masked_token_nll(model: &HdcModel, images: &[Image], schedule: MaskSchedule, sampled_seed: Option<u64>) -> Result<f64> {
    let dev = Device::Cpu;
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let x = img.to_tensor(DType::F32, &dev)?;
        let (h, w) = img.dims();
        let (gh, gw) = model.grid(h, w);
        let ids = model.vq_ids(&x)?;
        let mask = make_mask(schedule, gh, gw);
        let (yq, x_hat) = model.lic_base(&x)?;
        let (x_lic, v_p) = match sampled_seed {
            None => {
                let x_lic = model.enhanced(&yq, &model.drv_e(&x, &x_hat)?, h, w)?;
                let v_p = model.transformer.uses_drv().then(|| model.drv_p(&x, &x_hat)).transpose()?;
                (x_lic, v_p)
            }
            Some(seed) => {
                let seed = seed.wrapping_add(i as u64);
                let v_e = crate::drv_diffusion::sample_drv(&model.cond_e(&x_hat)?, &model.denoiser_e, &model.schedule, seed)?;
                let x_lic = model.enhanced(&yq, &v_e, h, w)?;
                let v_p = if model.transformer.uses_drv() {
                    let c = model.cond_p(&x_lic)?;
                    Some(crate::drv_diffusion::sample_drv(&c, &model.denoiser_p, &model.schedule, seed ^ 0x5A5A)?)
                } else {
                    None
                };
                (x_lic, v_p)
            }
        };
        let logits = model.predict_logits(&ids, &mask, v_p.as_ref(), &x_lic)?;
        total += scalar(&token_loss(&logits, &ids, &mask)?)?;
    }
    Ok(total / images.len().max(1) as f64)
}

mod plot {
    //! Minimal raster scatter plots: axes, numeric tick labels, one colour per
    //! series, and a line through each series' mean point.

    use std::path::Path;

    use image::{Rgb, RgbImage};

    use crate::bitstream::MaskSchedule;
    use crate::error::Result;

    const W: u32 = 560;
    const H: u32 = 400;
    const LEFT: u32 = 70;
    const RIGHT: u32 = 20;
    const TOP: u32 = 20;
    const BOTTOM: u32 = 50;
    const COLORS: [[u8; 3]; 4] = [[200, 40, 40], [40, 120, 200], [40, 160, 60], [150, 60, 180]];

    // 3x5 glyphs for digits, '.', '-', 'e'.
    fn glyph(c: char) -> Option<[u8; 5]> {
        Some(match c {
            '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
            '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
            '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
            '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
            '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
            '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
            '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
            '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
            '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
            '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
            '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
            '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
            'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
            _ => return None,
        })
    }

    fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, scale: i64) {
        for (i, c) in s.chars().enumerate() {
            let Some(g) = glyph(c) else { continue };
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                put(img, x + (i as i64 * 4 + col) * scale + dx, y + row as i64 * scale + dy, [0, 0, 0]);
                            }
                        }
                    }
                }
            }
        }
    }

    fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            put(img, (x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, c);
        }
    }

    fn label(v: f64) -> String {
        let a = v.abs();
        if a != 0.0 && !(1e-2..1e4).contains(&a) {
            format!("{v:.1e}")
        } else if a < 1.0 {
            format!("{v:.3}")
        } else {
            format!("{v:.1}")
        }
    }

    fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
        let (lo, hi) = vals
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.08).max(1e-6 * hi.abs().max(1.0));
        (lo - pad, hi + pad)
    }

    pub fn scatter(series: &[(MaskSchedule, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let all = || series.iter().flat_map(|(_, p)| p.iter());
        let (x_lo, x_hi) = range(all().map(|p| p.0));
        let (y_lo, y_hi) = range(all().map(|p| p.1));
        let (pw, ph) = ((W - LEFT - RIGHT) as f64, (H - TOP - BOTTOM) as f64);
        let px = |x: f64| LEFT as f64 + (x - x_lo) / (x_hi - x_lo) * pw;
        let py = |y: f64| TOP as f64 + ph - (y - y_lo) / (y_hi - y_lo) * ph;
        let (l, r, t, b) = (LEFT as f64, LEFT as f64 + pw, TOP as f64, TOP as f64 + ph);
        for (a, z) in [((l, t), (r, t)), ((l, b), (r, b)), ((l, t), (l, b)), ((r, t), (r, b))] {
            line(&mut img, a, z, [0, 0, 0]);
        }
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo));
            let (gx, gy) = (px(xv), py(yv));
            line(&mut img, (gx, b), (gx, b + 5.0), [0, 0, 0]);
            line(&mut img, (l - 5.0, gy), (l, gy), [0, 0, 0]);
            let s = label(xv);
            text(&mut img, &s, gx as i64 - (s.len() as i64 * 4), b as i64 + 10, 2);
            let s = label(yv);
            text(&mut img, &s, l as i64 - 10 - s.len() as i64 * 8, gy as i64 - 5, 2);
        }
        for (k, (sched, pts)) in series.iter().enumerate() {
            let c = COLORS[sched.id() as usize % COLORS.len()];
            for &(x, y) in pts {
                for d in -2i64..=2 {
                    put(&mut img, px(x) as i64 + d, py(y) as i64, c);
                    put(&mut img, px(x) as i64, py(y) as i64 + d, c);
                }
            }
            // Legend swatch per series, top-right.
            let lx = (W - RIGHT - 14) as i64;
            let ly = (TOP + 6 + 10 * k as u32) as i64;
            for dx in 0..8 {
                for dy in 0..6 {
                    put(&mut img, lx + dx, ly + dy, c);
                }
            }
        }
        let means: Vec<(f64, f64)> = series
            .iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(_, p)| {
                let n = p.len() as f64;
                (p.iter().map(|q| q.0).sum::<f64>() / n, p.iter().map(|q| q.1).sum::<f64>() / n)
            })
            .collect();
        let mut sorted = means.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in sorted.windows(2) {
            line(&mut img, (px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), [60, 60, 60]);
        }
        img.save(path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, s: MaskSchedule, bpp: f64, psnr: f64, p: f64) -> MetricRecord {
        MetricRecord {
            image_id: id.into(),
            schedule: s,
            bpp,
            payload_bpp: bpp - 0.003,
            index_bpp: 0.0,
            lic_bpp: 0.0,
            psnr_db: psnr,
            perceptual: p,
            wall_time_ms: 1.0,
        }
    }

    #[test]
    fn summaries_are_means() {
        let records = vec![
            rec("a", MaskSchedule::NoMask, 0.06, 20.0, 0.5),
            rec("b", MaskSchedule::NoMask, 0.07, 22.0, 0.3),
            rec("a", MaskSchedule::FullMask, 0.03, 18.0, 0.9),
        ];
        let r = EvalReport::new(records, vec![]);
        let s = r.summary(MaskSchedule::NoMask).unwrap();
        assert_eq!(s.count, 2);
        assert!((s.mean_bpp - 0.065).abs() < 1e-12);
        assert!((s.mean_psnr_db - 21.0).abs() < 1e-12);
        assert!((s.mean_perceptual - 0.4).abs() < 1e-12);
        assert_eq!(r.summary(MaskSchedule::FullMask).unwrap().count, 1);
    }

    #[test]
    fn empty_directory_gives_empty_report_and_no_plots() {
        let model = HdcModel::new(&crate::config::CodecConfig::toy()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let r = eval_corpus(dir.path(), &model, &MaskSchedule::ALL, &EvalOptions::default(), Some(&out)).unwrap();
        assert!(r.is_empty());
        assert!(!out.join("rd_psnr.png").exists());
        assert!(out.join("report.tsv").exists());
    }

    #[test]
    fn unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        crate::corpus::synthetic_image(32, 0).save(dir.path().join("ok.png")).unwrap();
        let (images, skipped) = load_dir(dir.path(), 16).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].0, "broken.png");
    }

    #[test]
    fn plots_and_table_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::new(
            vec![
                rec("a", MaskSchedule::NoMask, 0.06, 20.0, 0.5),
                rec("a", MaskSchedule::Keep1Of4, 0.04, 19.0, 0.6),
            ],
            vec![],
        );
        let files = r.write_plots(dir.path(), true).unwrap();
        assert_eq!(files.len(), 2);
        let img = Image::load(&files[0]).unwrap();
        assert_eq!(img.dims(), (400, 560));
        r.write_tsv(dir.path().join("r.tsv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.tsv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("image_id\tschedule\tbpp"));
    }
}
