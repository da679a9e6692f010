//! Rate-distortion sweep, ablation table and timing study.
//!
//! Per-image CSV columns: see [`ImageRow`]. Aggregate CSV columns:
//! [`AGGREGATE_HEADER`], one row per (codec, variant, quality). The
//! `codec` column is `sgic` for our rows so results from other codecs can
//! be appended to the same file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_dataset, mean, median, write_file, Aggregate, HarnessError, RunConfig, Runtime};
use crate::bitstream::CompressedImage;
use crate::controller::DiffusionPlan;
use crate::image::RasterImage;
use crate::metrics::{full_metrics, normalize_and_group, perceptual_distance, MetricGroup, RangeTable};
use crate::pipeline::Mode;
use crate::scenes::CorpusImage;

/// Reduction percentages reported for the large-model system, shown next
/// to ours for context.
pub const REFERENCE_ENCODE_REDUCTION: f64 = 36.13;
pub const REFERENCE_DECODE_REDUCTION: f64 = 38.17;

pub const CODEC_NAME: &str = "sgic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub codec: String,
    pub variant: String,
    pub quality: u8,
    pub image_id: String,
    /// `ok`, or `failed: <reason>` with NaN measurements.
    pub status: String,
    pub bpp: f64,
    pub semantics_bits: u64,
    pub grid_map_bits: u64,
    pub latent_bits: u64,
    pub steps: f64,
    pub cfg: f64,
    pub decode_seconds: f64,
    pub pixel_group: f64,
    pub similarity_group: f64,
    pub quality_group: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub perceptual_distance: f64,
    /// Same metric for the bicubic-upsampled initial reconstruction.
    pub initial_perceptual_distance: f64,
}

impl ImageRow {
    fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const AGGREGATE_HEADER: [&str; 14] = [
    "codec",
    "variant",
    "quality",
    "images",
    "failed",
    "bpp",
    "pixel_group",
    "similarity_group",
    "quality_group",
    "psnr",
    "perceptual_distance",
    "initial_perceptual_distance",
    "mean_steps",
    "mean_cfg",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub codec: String,
    pub variant: String,
    pub quality: u8,
    pub images: usize,
    pub failed: usize,
    pub bpp: f64,
    pub pixel_group: f64,
    pub similarity_group: f64,
    pub quality_group: f64,
    pub psnr: f64,
    pub perceptual_distance: f64,
    pub initial_perceptual_distance: f64,
    pub mean_steps: f64,
    pub mean_cfg: f64,
}

fn failed_row(variant: Mode, quality: u8, id: &str, reason: String) -> ImageRow {
    ImageRow {
        codec: CODEC_NAME.into(),
        variant: variant.name().into(),
        quality,
        image_id: id.into(),
        status: format!("failed: {reason}"),
        bpp: f64::NAN,
        semantics_bits: 0,
        grid_map_bits: 0,
        latent_bits: 0,
        steps: f64::NAN,
        cfg: f64::NAN,
        decode_seconds: f64::NAN,
        pixel_group: f64::NAN,
        similarity_group: f64::NAN,
        quality_group: f64::NAN,
        psnr: f64::NAN,
        ms_ssim: f64::NAN,
        perceptual_distance: f64::NAN,
        initial_perceptual_distance: f64::NAN,
    }
}

fn measure(
    rt: &Runtime,
    table: &RangeTable,
    original: &RasterImage,
    c: &CompressedImage,
    variant: Mode,
    quality: u8,
    id: &str,
) -> Result<ImageRow, HarnessError> {
    let decoded = rt.decode(c, variant, None)?;
    let emb = rt.providers.embedder.as_ref();
    let raw = full_metrics(original, &decoded.image, emb)?;
    let bpp = c.bpp();
    let report = normalize_and_group(&raw, table, Some(bpp))?;
    let budget = c.budget();
    let group = |g| report.group(g).unwrap_or(f64::NAN);
    Ok(ImageRow {
        codec: CODEC_NAME.into(),
        variant: variant.name().into(),
        quality,
        image_id: id.into(),
        status: "ok".into(),
        bpp,
        semantics_bits: budget.semantics_bits,
        grid_map_bits: budget.grid_map_bits,
        latent_bits: budget.latent_bits,
        steps: decoded.report.steps as f64,
        cfg: decoded.report.cfg,
        decode_seconds: decoded.report.timings.total,
        pixel_group: group(MetricGroup::Pixel),
        similarity_group: group(MetricGroup::Similarity),
        quality_group: group(MetricGroup::Quality),
        psnr: raw["psnr"],
        ms_ssim: raw["ms_ssim"],
        perceptual_distance: raw["perceptual_distance"],
        initial_perceptual_distance: perceptual_distance(original, &decoded.initial_upsampled, emb)?,
    })
}

/// Every requested variant of one image at one quality. `full` and `no_cad`
/// decode the same default-mode bitstream.
fn evaluate_image(rt: &Runtime, table: &RangeTable, ci: &CorpusImage, quality: u8, variants: &[Mode]) -> Vec<ImageRow> {
    let mut streams: BTreeMap<bool, Result<CompressedImage, String>> = BTreeMap::new();
    variants
        .iter()
        .map(|&v| {
            let grid = v == Mode::NoClipseg;
            let stream = streams.entry(grid).or_insert_with(|| {
                let mode = if grid { Mode::NoClipseg } else { Mode::Full };
                rt.encode(&ci.image, mode, quality)
                    .map(|e| e.compressed)
                    .map_err(|e| e.to_string())
            });
            let row = match stream {
                Ok(c) => measure(rt, table, &ci.image, c, v, quality, &ci.id).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            row.unwrap_or_else(|reason| {
                log::warn!("{} q{quality} {}: {reason}", ci.id, v.name());
                failed_row(v, quality, &ci.id, reason)
            })
        })
        .collect()
}

/// Per-image rows ordered by (quality, variant, image).
fn evaluate(rt: &Runtime, images: &[CorpusImage], qualities: &[u8], variants: &[Mode]) -> Result<Vec<ImageRow>, HarnessError> {
    let table = match &rt.config.metric_ranges {
        Some(p) => RangeTable::load(p)?,
        None => RangeTable::default_table(),
    };
    let jobs: Vec<(u8, &CorpusImage)> = qualities
        .iter()
        .flat_map(|&q| images.iter().map(move |ci| (q, ci)))
        .collect();
    let per_job = rt.par_map(&jobs, |(q, ci)| evaluate_image(rt, &table, ci, *q, variants));
    let mut rows: Vec<ImageRow> = per_job.into_iter().flatten().collect();
    let order = |v: &str| Mode::ALL.iter().position(|m| m.name() == v).unwrap_or(usize::MAX);
    // stable sort keeps image order within each group
    rows.sort_by_key(|r| (r.quality, order(&r.variant)));
    Ok(rows)
}

/// Means over the successful rows of each (codec, variant, quality).
pub fn aggregate_rows(rows: &[ImageRow]) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, String, u8), Vec<&ImageRow>)> = Vec::new();
    for r in rows {
        let key = (r.codec.clone(), r.variant.clone(), r.quality);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((codec, variant, quality), members)| {
            let ok: Vec<&ImageRow> = members.iter().copied().filter(|r| r.ok()).collect();
            let avg = |f: fn(&ImageRow) -> f64| mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                codec,
                variant,
                quality,
                images: ok.len(),
                failed: members.len() - ok.len(),
                bpp: avg(|r| r.bpp),
                pixel_group: avg(|r| r.pixel_group),
                similarity_group: avg(|r| r.similarity_group),
                quality_group: avg(|r| r.quality_group),
                psnr: avg(|r| r.psnr),
                perceptual_distance: avg(|r| r.perceptual_distance),
                initial_perceptual_distance: avg(|r| r.initial_perceptual_distance),
                mean_steps: avg(|r| r.steps),
                mean_cfg: avg(|r| r.cfg),
            }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Schema(e.to_string()))?;
    write_file(path, &bytes)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

/// Encodes and decodes every dataset image at every configured quality in
/// all three variants; writes `rd_images.csv` and `rd.csv`.
pub fn cmd_rd(cfg: RunConfig) -> Result<Vec<AggregateRow>, HarnessError> {
    let data = load_dataset(&cfg)?;
    let rt = Runtime::new(cfg, data.fixtures)?;
    rt.require_controller()?;
    let mut qualities = rt.config.qualities.clone();
    qualities.sort_unstable();
    qualities.dedup();
    let rows = evaluate(&rt, &data.images, &qualities, &Mode::ALL)?;
    let out = &rt.config.output_dir;
    write_rows(&out.join("rd_images.csv"), &rows)?;
    let agg = aggregate_rows(&rows);
    write_rows(&out.join("rd.csv"), &agg)?;
    Ok(agg)
}

/// Checks an ablation table: the exact header, one finite row per variant
/// at a single quality, no failed images, the grid map charged to
/// `no_clipseg`, and `no_cad` decoding the default stream at (40, 4).
pub fn check_ablation_csv(text: &str) -> Result<Vec<AggregateRow>, HarnessError> {
    let bad = |m: String| Err(HarnessError::Schema(m));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != AGGREGATE_HEADER {
        return bad(format!("header {header:?}"));
    }
    let rows: Vec<AggregateRow> = r.deserialize().collect::<Result<_, _>>()?;
    if rows.len() != Mode::ALL.len() {
        return bad(format!("{} rows, expected {}", rows.len(), Mode::ALL.len()));
    }
    let find = |m: Mode| rows.iter().filter(|r| r.variant == m.name()).collect::<Vec<_>>();
    for m in Mode::ALL {
        if find(m).len() != 1 {
            return bad(format!("variant {} appears {} times", m.name(), find(m).len()));
        }
    }
    for row in &rows {
        if row.codec != CODEC_NAME || row.quality != rows[0].quality {
            return bad(format!("row {} has codec {} quality {}", row.variant, row.codec, row.quality));
        }
        if row.images == 0 || row.failed != 0 {
            return bad(format!("{}: {} images, {} failed", row.variant, row.images, row.failed));
        }
        let values = [
            row.bpp,
            row.pixel_group,
            row.similarity_group,
            row.quality_group,
            row.psnr,
            row.perceptual_distance,
            row.initial_perceptual_distance,
            row.mean_steps,
            row.mean_cfg,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return bad(format!("{}: non-finite value", row.variant));
        }
        for g in [row.pixel_group, row.similarity_group, row.quality_group] {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("{}: group score {g} outside [0, 1]", row.variant));
            }
        }
    }
    let (full, grid, fixed) = (find(Mode::Full)[0], find(Mode::NoClipseg)[0], find(Mode::NoCad)[0]);
    if grid.bpp <= full.bpp {
        return bad(format!("no_clipseg bpp {} not above full bpp {}", grid.bpp, full.bpp));
    }
    if fixed.bpp != full.bpp {
        return bad(format!("no_cad bpp {} differs from full bpp {}", fixed.bpp, full.bpp));
    }
    let base = DiffusionPlan::baseline();
    if fixed.mean_steps != base.steps as f64 || fixed.mean_cfg != base.cfg {
        return bad(format!("no_cad plan ({}, {})", fixed.mean_steps, fixed.mean_cfg));
    }
    Ok(rows)
}

/// The three variants at `cfg.quality`; writes `ablation_images.csv` and
/// `ablation.csv`, then validates the latter.
pub fn cmd_ablate(cfg: RunConfig) -> Result<Vec<AggregateRow>, HarnessError> {
    let data = load_dataset(&cfg)?;
    let rt = Runtime::new(cfg, data.fixtures)?;
    rt.require_controller()?;
    let rows = evaluate(&rt, &data.images, &[rt.config.quality], &Mode::ALL)?;
    let out = &rt.config.output_dir;
    write_rows(&out.join("ablation_images.csv"), &rows)?;
    let path = out.join("ablation.csv");
    write_rows(&path, &aggregate_rows(&rows))?;
    let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
    check_ablation_csv(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub task: String,
    pub baseline: String,
    pub ours: String,
    pub baseline_seconds: f64,
    pub ours_seconds: f64,
    pub reduction_percent: f64,
    pub reference_reduction_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageTiming {
    pub image_id: String,
    pub default_encode: f64,
    pub grid_encode: f64,
    pub adaptive_decode: f64,
    pub fixed_decode: f64,
    pub steps: u32,
    pub cfg: f64,
    pub default_bits: u64,
    pub grid_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    /// Exactly `Encoding` then `Decoding`.
    pub rows: Vec<TimingRow>,
    pub images: Vec<ImageTiming>,
    pub repetitions: usize,
    pub aggregate: Aggregate,
    pub mean_predicted_steps: f64,
    pub mean_predicted_cfg: f64,
    /// Default-mode streams are smaller than grid-map streams on every
    /// image.
    pub default_fewer_bits_everywhere: bool,
}

fn reduction(baseline: f64, ours: f64) -> f64 {
    100.0 * (baseline - ours) / baseline
}

/// Times encoding (default vs grid map) and decoding (adaptive vs fixed
/// (40, 4)) on the first `timing.images` dataset images. Runs one image at
/// a time so the measurements do not compete for cores.
pub fn cmd_timing(cfg: RunConfig) -> Result<TimingReport, HarnessError> {
    let data = load_dataset(&cfg)?;
    let rt = Runtime::new(cfg, data.fixtures)?;
    rt.require_controller()?;
    let t = rt.config.timing.clone();
    let quality = rt.config.quality;
    let pick = |v: &mut Vec<f64>| match t.aggregate {
        Aggregate::Median => median(v),
        Aggregate::Mean => mean(v),
    };
    let mut per_image = Vec::new();
    for ci in data.images.iter().take(t.images) {
        let (mut enc_d, mut enc_g, mut dec_a, mut dec_f) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut last = None;
        for _ in 0..t.repetitions {
            let d = rt.encode(&ci.image, Mode::Full, quality)?;
            let g = rt.encode(&ci.image, Mode::NoClipseg, quality)?;
            enc_d.push(d.timings.total);
            enc_g.push(g.timings.total);
            let adaptive = rt.decode(&d.compressed, Mode::Full, None)?;
            let fixed = rt.decode(&d.compressed, Mode::NoCad, None)?;
            dec_a.push(adaptive.report.timings.total);
            dec_f.push(fixed.report.timings.total);
            last = Some((d.compressed.total_bits(), g.compressed.total_bits(), adaptive.report));
        }
        let (default_bits, grid_bits, report) = last.expect("at least one repetition");
        per_image.push(ImageTiming {
            image_id: ci.id.clone(),
            default_encode: pick(&mut enc_d),
            grid_encode: pick(&mut enc_g),
            adaptive_decode: pick(&mut dec_a),
            fixed_decode: pick(&mut dec_f),
            steps: report.steps,
            cfg: report.cfg,
            default_bits,
            grid_bits,
        });
    }
    let across = |f: fn(&ImageTiming) -> f64| {
        let mut v: Vec<f64> = per_image.iter().map(f).collect();
        pick(&mut v)
    };
    let (enc_base, enc_ours) = (across(|i| i.grid_encode), across(|i| i.default_encode));
    let (dec_base, dec_ours) = (across(|i| i.fixed_decode), across(|i| i.adaptive_decode));
    let rows = vec![
        TimingRow {
            task: "Encoding".into(),
            baseline: Mode::NoClipseg.name().into(),
            ours: Mode::Full.name().into(),
            baseline_seconds: enc_base,
            ours_seconds: enc_ours,
            reduction_percent: reduction(enc_base, enc_ours),
            reference_reduction_percent: REFERENCE_ENCODE_REDUCTION,
        },
        TimingRow {
            task: "Decoding".into(),
            baseline: "fixed_40_4".into(),
            ours: "adaptive".into(),
            baseline_seconds: dec_base,
            ours_seconds: dec_ours,
            reduction_percent: reduction(dec_base, dec_ours),
            reference_reduction_percent: REFERENCE_DECODE_REDUCTION,
        },
    ];
    write_rows(&rt.config.output_dir.join("timing.csv"), &rows)?;
    write_rows(&rt.config.output_dir.join("timing_images.csv"), &per_image)?;
    Ok(TimingReport {
        mean_predicted_steps: mean(&per_image.iter().map(|i| i.steps as f64).collect::<Vec<_>>()),
        mean_predicted_cfg: mean(&per_image.iter().map(|i| i.cfg).collect::<Vec<_>>()),
        default_fewer_bits_everywhere: per_image.iter().all(|i| i.default_bits < i.grid_bits),
        rows,
        images: per_image,
        repetitions: t.repetitions,
        aggregate: t.aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Mode, bpp: f64, steps: f64, cfg: f64) -> ImageRow {
        let mut r = failed_row(variant, 3, "img", String::new());
        r.status = "ok".into();
        for v in [
            &mut r.pixel_group,
            &mut r.similarity_group,
            &mut r.quality_group,
            &mut r.psnr,
            &mut r.ms_ssim,
            &mut r.perceptual_distance,
            &mut r.initial_perceptual_distance,
            &mut r.decode_seconds,
        ] {
            *v = 0.5;
        }
        r.bpp = bpp;
        r.steps = steps;
        r.cfg = cfg;
        r
    }

    fn table(rows: &[ImageRow]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in aggregate_rows(rows) {
            w.serialize(r).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    fn good() -> Vec<ImageRow> {
        vec![
            row(Mode::Full, 0.5, 5.0, 1.0),
            row(Mode::NoClipseg, 0.6, 5.0, 1.0),
            row(Mode::NoCad, 0.5, 40.0, 4.0),
        ]
    }

    #[test]
    fn ablation_schema_accepts_consistent_table() {
        let rows = check_ablation_csv(&table(&good())).unwrap();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn ablation_schema_rejects_violations() {
        let mut r = good();
        r[1].bpp = 0.5;
        assert!(check_ablation_csv(&table(&r)).is_err());
        let mut r = good();
        r[2].steps = 20.0;
        assert!(check_ablation_csv(&table(&r)).is_err());
        let mut r = good();
        r.push(failed_row(Mode::Full, 3, "img2", "boom".into()));
        assert!(check_ablation_csv(&table(&r)).is_err());
        assert!(check_ablation_csv(&table(&good()[..2])).is_err());
        assert!(check_ablation_csv("codec,variant\n").is_err());
    }

    #[test]
    fn aggregates_skip_failures_and_keep_order() {
        let mut rows = good();
        rows.insert(1, failed_row(Mode::Full, 3, "bad", "x".into()));
        let agg = aggregate_rows(&rows);
        let names: Vec<&str> = agg.iter().map(|a| a.variant.as_str()).collect();
        assert_eq!(names, ["full", "no_clipseg", "no_cad"]);
        assert_eq!((agg[0].images, agg[0].failed), (1, 1));
        assert_eq!(agg[0].bpp, 0.5);
    }

    #[test]
    fn reduction_percentages() {
        assert!((reduction(1930.98, 1194.00) - REFERENCE_DECODE_REDUCTION).abs() < 0.01);
        assert!((reduction(1.19, 0.76) - REFERENCE_ENCODE_REDUCTION).abs() < 0.05);
    }
}
