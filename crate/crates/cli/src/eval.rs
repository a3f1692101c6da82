use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zwm_core::data::list_images;
use zwm_core::distortions::{load_grid, photometric_suite, DistortionPhase, DistortionSpec};
use zwm_core::evaluation::*;
use zwm_core::image::Image;
use zwm_core::store::{Registry, StoreError};
use zwm_core::zerowatermark::{FrozenExtractor, SignatureRecord, WatermarkMessage, DEFAULT_BITS};

/// `file,label` rows written next to generated datasets.
pub const LABELS_FILE: &str = "labels.csv";

/// Images used for the pairwise-cosine heatmap.
const HEATMAP_IMAGES: usize = 30;

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON list of distortion specs; defaults to the full test grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Distortion seeds per cell; the report gives mean and std over them.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File stem of the written reports.
    #[arg(long, default_value = "report")]
    report: String,
    /// Also write PNG charts.
    #[arg(long)]
    plots: bool,
    #[arg(long, default_value = "registry")]
    registry: PathBuf,
    /// JSON list of `{image, record, bits}` for the watermark-robustness sweep.
    #[arg(long)]
    watermarks: Option<PathBuf>,
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Deserialize)]
struct WatermarkEntry {
    image: PathBuf,
    record: String,
    bits: String,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    DEFAULT_BITS
}

#[derive(Serialize)]
struct Summary {
    extractor_checkpoint_id: String,
    n_images: usize,
    seed: u64,
    /// Mean off-diagonal pairwise feature cosine; values near 1 signal collapse.
    off_diagonal_cosine: f64,
    reconstruction_psnr: f64,
    probe: Option<ProbeResult>,
}

pub fn run(a: EvalArgs) -> Result<()> {
    let fe = super::load_extractor(&a.ckpt)?;
    let mut paths = list_images(&a.data)?;
    if let Some(m) = a.max_images {
        paths.truncate(m);
    }
    let images: Vec<Image> = paths.iter().map(|p| Image::load(p)).collect::<Result<_, _>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let grid = match &a.grid {
        Some(p) => load_grid(p)?,
        None => photometric_suite(DistortionPhase::Testing),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let opts = SweepOptions { runs: a.runs, seed: a.seed, with_psnr: true };
    let inv = invariance_sweep(&fe, &refs, &grid, &opts)?;
    inv.save(&a.out, &format!("{}_invariance", a.report))?;

    let heat = collapse_heatmap(&fe, &refs[..refs.len().min(HEATMAP_IMAGES)])?;
    let probe = match read_labels(&a.data)? {
        Some(labels) => probe(&fe, &paths, &images, &labels, a.seed)?,
        None => None,
    };
    let summary = Summary {
        extractor_checkpoint_id: fe.checkpoint_id().to_string(),
        n_images: images.len(),
        seed: a.seed,
        off_diagonal_cosine: mean_off_diagonal(&heat),
        reconstruction_psnr: reconstruction_psnr(&fe, &refs)?,
        probe,
    };
    let summary_path = a.out.join(format!("{}_summary.json", a.report));
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    let robust = match &a.watermarks {
        Some(p) => {
            let rep = robustness(&fe, p, &a.registry, &grid, a.seed)?;
            rep.save(&a.out, &format!("{}_robustness", a.report))?;
            Some(rep)
        }
        None => None,
    };

    if a.plots {
        plot_heatmap(&a.out.join(format!("{}_heatmap.png", a.report)), &heat)?;
        let cell_series = |name: &str, f: &dyn Fn(&MetricsRow) -> Option<f64>, rep: &MetricsReport| Series {
            name: name.into(),
            points: rep.rows.iter().enumerate().filter_map(|(i, r)| f(r).map(|v| (i as f64, v))).collect(),
        };
        plot_lines(
            &a.out.join(format!("{}_invariance.png", a.report)),
            &[cell_series("cosine", &|r| r.cosine_mean, &inv)],
        )?;
        if let Some(rep) = &robust {
            plot_lines(&a.out.join(format!("{}_robustness.png", a.report)), &[cell_series("ber", &|r| r.ber, rep)])?;
        }
    }
    println!("{}", summary_path.display());
    Ok(())
}

fn read_labels(dir: &Path) -> Result<Option<BTreeMap<String, usize>>> {
    let path = dir.join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (file, label) = line.rsplit_once(',').with_context(|| format!("bad row {line:?} in {}", path.display()))?;
        out.insert(file.to_string(), label.trim().parse().with_context(|| format!("bad label in {line:?}"))?);
    }
    Ok(Some(out))
}

/// Linear probe on tile-pooled features over a seeded, class-stratified half split.
fn probe(
    fe: &FrozenExtractor,
    paths: &[PathBuf],
    images: &[Image],
    labels: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Option<ProbeResult>> {
    let refs: Vec<&Image> = images.iter().collect();
    let pooled = fe.pooled(&refs)?;
    let mut rows = Vec::new();
    for (p, f) in paths.iter().zip(pooled) {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(&l) = labels.get(&name) {
            rows.push((f, l));
        }
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // alternate within each class so every test class also appears in training
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for row in rows {
        let n = seen.entry(row.1).or_default();
        if *n % 2 == 0 {
            train.push(row)
        } else {
            test.push(row)
        }
        *n += 1;
    }
    if test.is_empty() {
        log::warn!("every class has a single image; skipping the linear probe");
        return Ok(None);
    }
    Ok(Some(linear_probe(&train, &test, &ProbeOptions { seed, ..Default::default() })?))
}

fn robustness(
    fe: &FrozenExtractor,
    manifest: &Path,
    registry: &Path,
    grid: &[DistortionSpec],
    seed: u64,
) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let entries: Vec<WatermarkEntry> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
    let reg = Registry::open(registry)?;
    let mut images = Vec::with_capacity(entries.len());
    let mut records: Vec<Option<SignatureRecord>> = Vec::with_capacity(entries.len());
    let mut msgs = Vec::with_capacity(entries.len());
    for e in &entries {
        images.push(Image::load(&e.image)?);
        records.push(match reg.get(&e.record) {
            Ok(r) => Some(r),
            Err(StoreError::NotFound(_)) => None,
            Err(err) => return Err(err.into()),
        });
        msgs.push(WatermarkMessage::from_hex(&e.bits, e.k)?);
    }
    let items: Vec<RegisteredImage> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| RegisteredImage {
            name: e.image.display().to_string(),
            image: &images[i],
            record: records[i].as_ref(),
            expected: &msgs[i],
        })
        .collect();
    Ok(watermark_robustness_sweep(fe, &items, grid, seed)?)
}
