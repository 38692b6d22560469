use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LoadedData};
use crate::artifact::{read_artifact, write_artifact_with_meta, write_atomic, Report};
use crate::data::Dataset;
use crate::directions::DirectionPair;
use crate::error::{Error, Result};
use crate::nn::{build_network, ArchSpec, LayerSpec, Network};
use crate::optim::{self, TrainConfig, TrainReport};
use crate::pruning::{self, Mask, MaskMethod, Ticket, TicketRecord};
use crate::render::{self, extract_contours, resolve_levels};
use crate::surface::{self, make_eval_subset, surface_stats, EvalSubset, GridSpec, SurfaceGrid, SurfaceStats};

/// Receives one human-readable progress line at a time.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Per-command knobs that come from the command line rather than the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub resolution: Option<usize>,
}

impl RunOptions {
    fn workers(&self) -> usize {
        self.workers.max(1)
    }

    fn grid(&self, cfg: &ExperimentConfig) -> Result<GridSpec> {
        let mut grid = cfg.grid;
        if let Some(r) = self.resolution {
            grid.resolution_a = r;
            grid.resolution_b = r;
        }
        grid.validate()?;
        Ok(grid)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub preset: String,
    pub param_count: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub checkpoint_digest: String,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub summary: TrainSummary,
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
}

fn train_network(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    arch: &ArchSpec,
    train_cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<(Network, TrainSummary)> {
    let net = build_network(arch, cfg.seed)?;
    let (trained, report) = optim::train_with_progress(&net, None, &data.train, &data.val, train_cfg, &mut |e| {
        progress(&format!(
            "epoch {} train_loss {:.6} val_loss {:.6} val_acc {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ))
    })?;
    let (test_loss, test_accuracy) = optim::evaluate(&trained, None, &data.test)?;
    let summary = TrainSummary {
        preset: cfg.architecture.preset_name().into(),
        param_count: trained.param_count(),
        test_loss,
        test_accuracy,
        checkpoint_digest: trained.digest(),
        report,
    };
    Ok((trained, summary))
}

/// Trains the configured network and writes `checkpoint.lt` and `train_report.lt`.
pub fn cmd_train(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<TrainOutcome> {
    let data = cfg.load_data()?;
    let arch = cfg.arch_spec(&data)?;
    ensure_dir(&cfg.out_dir)?;
    let (network, summary) = train_network(cfg, &data, &arch, &cfg.train, progress)?;
    let meta = cfg.artifact_meta();
    let checkpoint_path = cfg.out_dir.join("checkpoint.lt");
    let report_path = cfg.out_dir.join("train_report.lt");
    write_artifact_with_meta(&network, &meta, &checkpoint_path)?;
    write_artifact_with_meta(&Report::from_serialize("train", &summary)?, &meta, &report_path)?;
    progress(&format!(
        "test_loss {:.6} test_acc {:.4} checkpoint {}",
        summary.test_loss,
        summary.test_accuracy,
        checkpoint_path.display()
    ));
    Ok(TrainOutcome {
        network,
        summary,
        checkpoint_path,
        report_path,
    })
}

/// Paths written for one surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFiles {
    pub surface: PathBuf,
    pub text: PathBuf,
    pub image: PathBuf,
    pub contours: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SurfaceOutcome {
    pub grid: SurfaceGrid,
    pub stats: SurfaceStats,
    pub files: SurfaceFiles,
}

fn compute_surface(
    net: &Network,
    mask: Option<&Mask>,
    seeds: (u64, u64),
    grid: &GridSpec,
    subset: &EvalSubset,
    workers: usize,
    progress: Progress<'_>,
) -> Result<SurfaceGrid> {
    let pair = DirectionPair::for_network(net, mask, seeds)?;
    let rows = std::sync::Mutex::new(Vec::new());
    let grid = surface::evaluate_surface_with_progress(net, mask, &pair, grid, subset, workers, &|done, total| {
        rows.lock().unwrap().push((done, total))
    })?;
    if let Some((done, total)) = rows.into_inner().unwrap().last() {
        progress(&format!(
            "surface {done}/{total} rows in {:.2}s",
            grid.meta.wall_clock_seconds
        ));
    }
    Ok(grid)
}

/// Writes `<stem>.lt`, `<stem>.tsv`, `<stem>.ppm` and `<stem>_contours.txt`.
fn write_surface(cfg: &ExperimentConfig, grid: &SurfaceGrid, dir: &Path, stem: &str) -> Result<SurfaceFiles> {
    let files = SurfaceFiles {
        surface: dir.join(format!("{stem}.lt")),
        text: dir.join(format!("{stem}.tsv")),
        image: dir.join(format!("{stem}.ppm")),
        contours: dir.join(format!("{stem}_contours.txt")),
    };
    write_artifact_with_meta(grid, &cfg.artifact_meta(), &files.surface)?;
    write_atomic(&files.text, render::surface_to_text(grid).as_bytes())?;
    render::render_heatmap_to(grid, &cfg.render, &files.image)?;
    let field = render::cell_field(grid, &cfg.render)?;
    let sets = extract_contours(grid, &resolve_levels(&field, &cfg.render));
    write_atomic(&files.contours, render::contours_to_text(&sets).as_bytes())?;
    Ok(files)
}

fn load_ticket(path: &Path, net: &Network) -> Result<TicketRecord> {
    let ticket: TicketRecord = read_artifact(path)?;
    if &ticket.arch != net.spec() {
        return Err(Error::ShapeMismatch(format!(
            "ticket {} was built for a different architecture",
            path.display()
        )));
    }
    Ok(ticket)
}

/// Surfaces around a checkpoint, optionally restricted to a ticket's mask.
/// Repeat 0 is written as `surface.*`, later repeats as `surface_rep{r}.*`.
pub fn cmd_surface(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    ticket: Option<&Path>,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<Vec<SurfaceOutcome>> {
    let net: Network = read_artifact(checkpoint)?;
    let mask = ticket.map(|t| load_ticket(t, &net)).transpose()?.map(|t| t.mask);
    let data = cfg.load_data()?;
    let grid = opts.grid(cfg)?;
    let subset = make_eval_subset(&data.test, cfg.eval.n, cfg.eval.seed)?;
    ensure_dir(&cfg.out_dir)?;
    let mut out = Vec::new();
    for r in 0..cfg.directions.repeats {
        let seeds = cfg.directions.seeds_for(r);
        progress(&format!("surface repeat {r} direction seeds {} {}", seeds.0, seeds.1));
        let g = compute_surface(&net, mask.as_ref(), seeds, &grid, &subset, opts.workers(), progress)?;
        let stem = if r == 0 { "surface".to_string() } else { format!("surface_rep{r}") };
        let files = write_surface(cfg, &g, &cfg.out_dir, &stem)?;
        let stats = surface_stats(&g, cfg.eval.flat_epsilon)?;
        out.push(SurfaceOutcome { grid: g, stats, files });
    }
    Ok(out)
}

fn checkpoint_or_train(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    checkpoint: Option<&Path>,
    progress: Progress<'_>,
) -> Result<Network> {
    match checkpoint {
        Some(p) => read_artifact(p),
        None => {
            progress("no checkpoint given; training one");
            let arch = cfg.arch_spec(data)?;
            Ok(train_network(cfg, data, &arch, &cfg.train, progress)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCountRow {
    pub n: usize,
    /// Against the surface at the largest count.
    pub pearson: Option<f64>,
    pub wall_clock_seconds: f64,
    pub stats: SurfaceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCountReport {
    pub direction_seeds: (u64, u64),
    pub subset_seed: u64,
    pub rows: Vec<EvalCountRow>,
}

/// One surface per evaluation count, all with the same directions and
/// nested subsets, plus the correlation of each with the largest.
pub fn cmd_sweep_evalcount(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    counts: Option<&[usize]>,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<(EvalCountReport, Vec<SurfaceGrid>)> {
    let counts = counts.unwrap_or(&cfg.sweep.eval_counts).to_vec();
    if counts.is_empty() {
        return Err(Error::Config {
            field: "sweep.eval_counts".into(),
            detail: "must not be empty".into(),
        });
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config {
            field: "sweep.eval_counts".into(),
            detail: "must be strictly ascending".into(),
        });
    }
    let data = cfg.load_data()?;
    let largest = *counts.last().unwrap();
    if largest > data.test.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluation count {largest} exceeds the test set of {}",
            data.test.len()
        )));
    }
    let net = checkpoint_or_train(cfg, &data, checkpoint, progress)?;
    let grid = opts.grid(cfg)?;
    let seeds = cfg.directions.seeds;
    ensure_dir(&cfg.out_dir)?;
    let mut grids = Vec::new();
    for &n in &counts {
        let subset = make_eval_subset(&data.test, n, cfg.eval.seed)?;
        progress(&format!("eval count {n}"));
        let g = compute_surface(&net, None, seeds, &grid, &subset, opts.workers(), progress)?;
        write_surface(cfg, &g, &cfg.out_dir, &format!("surface_n{n}"))?;
        grids.push(g);
    }
    let reference = grids.last().unwrap().losses.clone();
    let rows = counts
        .iter()
        .zip(&grids)
        .map(|(&n, g)| {
            Ok(EvalCountRow {
                n,
                pearson: surface::pearson(&g.losses, &reference),
                wall_clock_seconds: g.meta.wall_clock_seconds,
                stats: surface_stats(g, cfg.eval.flat_epsilon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalCountReport {
        direction_seeds: seeds,
        subset_seed: cfg.eval.seed,
        rows,
    };
    write_artifact_with_meta(
        &Report::from_serialize("sweep_evalcount", &report)?,
        &cfg.artifact_meta(),
        cfg.out_dir.join("sweep_evalcount.lt"),
    )?;
    write_json(&cfg.out_dir.join("sweep_evalcount.json"), &report)?;
    Ok((report, grids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeRow {
    pub batch_size: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub stats: SurfaceStats,
}

/// Independent trainings from the same initialization, one per batch size,
/// each with a surface, plus a table of accuracies and surface statistics.
pub fn cmd_sweep_batchsize(
    cfg: &ExperimentConfig,
    sizes: Option<&[usize]>,
    opts: &RunOptions,
    progress: Progress<'_>,
) -> Result<Vec<BatchSizeRow>> {
    let sizes = sizes.unwrap_or(&cfg.sweep.batch_sizes).to_vec();
    if sizes.is_empty() {
        return Err(Error::Config {
            field: "sweep.batch_sizes".into(),
            detail: "must not be empty".into(),
        });
    }
    let data = cfg.load_data()?;
    if let Some(&b) = sizes.iter().find(|&&b| b == 0 || b > data.train.len()) {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} is invalid for a training set of {}",
            data.train.len()
        )));
    }
    let arch = cfg.arch_spec(&data)?;
    let grid = opts.grid(cfg)?;
    let subset = make_eval_subset(&data.test, cfg.eval.n, cfg.eval.seed)?;
    ensure_dir(&cfg.out_dir)?;
    let meta = cfg.artifact_meta();
    let mut rows = Vec::new();
    for &b in &sizes {
        progress(&format!("batch size {b}"));
        let train_cfg = TrainConfig {
            batch_size: b,
            ..cfg.train.clone()
        };
        let (net, summary) = train_network(cfg, &data, &arch, &train_cfg, progress)?;
        write_artifact_with_meta(&net, &meta, cfg.out_dir.join(format!("checkpoint_bs{b}.lt")))?;
        let g = compute_surface(&net, None, cfg.directions.seeds, &grid, &subset, opts.workers(), progress)?;
        write_surface(cfg, &g, &cfg.out_dir, &format!("surface_bs{b}"))?;
        rows.push(BatchSizeRow {
            batch_size: b,
            test_loss: summary.test_loss,
            test_accuracy: summary.test_accuracy,
            epochs: summary.report.epochs(),
            stats: surface_stats(&g, cfg.eval.flat_epsilon)?,
        });
    }
    write_artifact_with_meta(
        &Report::from_serialize("sweep_batchsize", &rows)?,
        &meta,
        cfg.out_dir.join("sweep_batchsize.lt"),
    )?;
    write_json(&cfg.out_dir.join("sweep_batchsize.json"), &rows)?;
    Ok(rows)
}

/// `(method, P_m, test accuracy)` with percentages.
pub fn ticket_label(method: MaskMethod, sparsity: f64, accuracy: f64) -> String {
    format!("({}, {:.1}%, {:.1}%)", method.label(), sparsity * 100.0, accuracy * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round: usize,
    pub sparsity: f64,
    pub imp_accuracy: f64,
    pub random_accuracy: f64,
    pub imp_label: String,
    pub random_label: String,
    pub imp_stats: Option<SurfaceStats>,
    pub random_stats: Option<SurfaceStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub direction_seeds: (u64, u64),
    pub rows: Vec<ComparisonRow>,
    /// IMP minus random test accuracy at the last round.
    pub final_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub imp: Vec<Ticket>,
    pub random: Vec<Ticket>,
}

/// Trains a per-layer-matched random-mask ticket for each IMP ticket.
/// Round 0 is dense for both methods.
pub fn random_counterparts(
    base: &Network,
    imp: &[Ticket],
    data: &LoadedData,
    train: &TrainConfig,
    mask_seed: u64,
) -> Result<Vec<Ticket>> {
    imp.iter()
        .map(|t| {
            let seed = mask_seed.wrapping_add(t.round as u64);
            let mask = pruning::random_mask(&t.mask, seed);
            let mut ticket = pruning::train_ticket(base, mask, MaskMethod::Random, t.round, data.splits(), train)?;
            ticket.mask_seed = Some(seed);
            Ok(ticket)
        })
        .collect()
}

/// IMP against random masks: tickets, surfaces with shared direction seeds,
/// and a per-round comparison table.
pub fn cmd_imp_compare(cfg: &ExperimentConfig, opts: &RunOptions, progress: Progress<'_>) -> Result<Comparison> {
    let data = cfg.load_data()?;
    let arch = cfg.arch_spec(&data)?;
    let base = build_network(&arch, cfg.seed)?;
    let grid = opts.grid(cfg)?;
    let subset = make_eval_subset(&data.test, cfg.eval.n, cfg.eval.seed)?;
    let round_cfg = TrainConfig {
        max_epochs: cfg.imp.epochs_per_round,
        ..cfg.train.clone()
    };
    let imp = pruning::run_imp_with_progress(
        &base,
        data.splits(),
        &cfg.train,
        cfg.imp.prune_fraction,
        cfg.imp.rounds,
        cfg.imp.epochs_per_round,
        &mut |t| progress(&format!("IMP round {} {}", t.round, ticket_label(t.method, t.sparsity, t.test_accuracy))),
    )?;
    let random = random_counterparts(&base, &imp, &data, &round_cfg, cfg.imp.random_mask_seed)?;
    let meta = cfg.artifact_meta();
    let seeds = cfg.directions.seeds;
    let mut rows = Vec::new();
    for (ti, tr) in imp.iter().zip(&random) {
        progress(&format!(
            "round {} {} vs {}",
            ti.round,
            ticket_label(ti.method, ti.sparsity, ti.test_accuracy),
            ticket_label(tr.method, tr.sparsity, tr.test_accuracy)
        ));
        let want_surface = cfg.imp.surface_rounds.is_empty() || cfg.imp.surface_rounds.contains(&ti.round);
        let mut stats = [None, None];
        for (k, t) in [ti, tr].into_iter().enumerate() {
            let dir = cfg.out_dir.join(if t.method == MaskMethod::Imp { "imp" } else { "random" });
            ensure_dir(&dir)?;
            write_artifact_with_meta(&t.record(cfg.train.seed), &meta, dir.join(t.file_name()))?;
            if want_surface {
                let g = compute_surface(&t.trained, Some(&t.mask), seeds, &grid, &subset, opts.workers(), progress)?;
                write_surface(cfg, &g, &dir, &format!("surface_r{}", t.round))?;
                stats[k] = Some(surface_stats(&g, cfg.eval.flat_epsilon)?);
            }
        }
        rows.push(ComparisonRow {
            round: ti.round,
            sparsity: ti.sparsity,
            imp_accuracy: ti.test_accuracy,
            random_accuracy: tr.test_accuracy,
            imp_label: ticket_label(ti.method, ti.sparsity, ti.test_accuracy),
            random_label: ticket_label(tr.method, tr.sparsity, tr.test_accuracy),
            imp_stats: stats[0],
            random_stats: stats[1],
        });
    }
    let last = rows.last().expect("at least the dense round");
    let report = ComparisonReport {
        direction_seeds: seeds,
        final_gap: last.imp_accuracy - last.random_accuracy,
        rows,
    };
    write_artifact_with_meta(
        &Report::from_serialize("imp_compare", &report)?,
        &meta,
        cfg.out_dir.join("comparison.lt"),
    )?;
    write_json(&cfg.out_dir.join("comparison.json"), &report)?;
    Ok(Comparison { report, imp, random })
}

/// Test accuracy of a softmax-regression model (one dense layer) trained on
/// `train`; a reference point for how separable a dataset is.
pub fn linear_baseline(train: &Dataset, test: &Dataset, config: &TrainConfig, seed: u64) -> Result<f64> {
    let mut layers = Vec::new();
    if train.example_shape().len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    layers.push(LayerSpec::dense(train.example_shape().iter().product(), train.classes()));
    let net = build_network(&ArchSpec::new(train.example_shape().to_vec(), layers), seed)?;
    let (fit, val) = train.holdout(0.1, seed)?;
    let (trained, _) = optim::train(&net, None, &fit, &val, config)?;
    Ok(optim::evaluate(&trained, None, test)?.1)
}
