use std::fs;
use std::path::{Path, PathBuf};

use lottery_landscape::artifact::{read_artifact, read_artifact_file, ArtifactKind};
use lottery_landscape::harness::{
    cmd_imp_compare, cmd_surface, cmd_sweep_batchsize, cmd_sweep_evalcount, cmd_train, ArchitectureConfig,
    DatasetConfig, ExperimentConfig, RunOptions,
};
use lottery_landscape::pruning::TicketRecord;
use lottery_landscape::surface::{GridSpec, SurfaceGrid};
use lottery_landscape::Error;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        architecture: ArchitectureConfig::MlpSmall { hidden: vec![16] },
        dataset: DatasetConfig::Synth {
            classes: 3,
            per_class: 200,
            dims: 8,
            separation: 3.0,
        },
        grid: GridSpec::square(1.0, 7),
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 3;
    cfg.train.batch_size = 16;
    cfg.eval.n = 60;
    cfg.imp.rounds = 2;
    cfg.imp.prune_fraction = 0.3;
    cfg.imp.epochs_per_round = 2;
    cfg.render.width = 40;
    cfg.render.height = 40;
    cfg
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

fn artifacts(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(artifacts(&path));
        } else if path.extension().is_some_and(|e| e == "lt") {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn assert_embeds_config(dir: &Path, cfg: &ExperimentConfig) {
    let files = artifacts(dir);
    assert!(!files.is_empty());
    for path in files {
        let file = read_artifact_file(&path).unwrap();
        assert_eq!(file.meta.get("config_digest"), Some(&cfg.digest()), "{}", path.display());
        let embedded: ExperimentConfig = serde_json::from_str(&file.meta["config"]).unwrap();
        assert_eq!(embedded.digest(), cfg.digest());
    }
}

#[test]
fn train_then_surface_is_reproducible_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let first = cmd_train(&cfg, &mut quiet()).unwrap();
    let again = cmd_train(&cfg, &mut quiet()).unwrap();
    assert_eq!(first.summary.checkpoint_digest, again.summary.checkpoint_digest);
    assert_eq!(read_artifact_file(&first.report_path).unwrap().kind, ArtifactKind::Report);

    let mut digests = Vec::new();
    for workers in [1, 8] {
        let opts = RunOptions { workers, resolution: None };
        let out = cmd_surface(&cfg, &first.checkpoint_path, None, &opts, &mut quiet()).unwrap();
        assert_eq!(out.len(), 1);
        let files = &out[0].files;
        for p in [&files.surface, &files.text, &files.image, &files.contours] {
            assert!(p.exists(), "{} missing", p.display());
        }
        assert_eq!(out[0].grid.meta.eval_n, 60);
        digests.push(fs::read(&files.surface).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
    assert_embeds_config(dir.path(), &cfg);
}

#[test]
fn default_eval_count_and_plot_resolution() {
    assert_eq!(ExperimentConfig::default().eval.n, 250);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.eval.n = 5;
    let trained = cmd_train(&cfg, &mut quiet()).unwrap();
    let opts = RunOptions {
        workers: 4,
        resolution: Some(125),
    };
    let out = cmd_surface(&cfg, &trained.checkpoint_path, None, &opts, &mut quiet()).unwrap();
    let grid: SurfaceGrid = read_artifact(&out[0].files.surface).unwrap();
    assert_eq!((grid.spec.resolution_a, grid.spec.resolution_b), (125, 125));
    assert_eq!(grid.losses.len(), 125 * 125);
}

#[test]
fn eval_sweep_shares_directions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let counts = [5, 20, 120];
    let (report, grids) = cmd_sweep_evalcount(&cfg, None, Some(&counts), &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[2].pearson, Some(1.0));
    for n in counts {
        let g: SurfaceGrid = read_artifact(dir.path().join(format!("surface_n{n}.lt"))).unwrap();
        assert_eq!(g.meta.direction_seeds, cfg.directions.seeds);
        assert_eq!(g.meta.eval_n, n);
    }
    assert!(grids.windows(2).all(|w| w[0].meta.direction_seeds == w[1].meta.direction_seeds));
    assert_embeds_config(dir.path(), &cfg);

    let too_many = [5, 10_000];
    assert!(matches!(
        cmd_sweep_evalcount(&cfg, None, Some(&too_many), &RunOptions::default(), &mut quiet()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        cmd_sweep_evalcount(&cfg, None, Some(&[20, 5]), &RunOptions::default(), &mut quiet()),
        Err(Error::Config { .. })
    ));
}

#[test]
fn batch_sweep_accepts_endpoints_and_rejects_oversize() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.dataset = DatasetConfig::Synth {
        classes: 10,
        per_class: 2250,
        dims: 4,
        separation: 2.0,
    };
    cfg.architecture = ArchitectureConfig::MlpSmall { hidden: vec![4] };
    cfg.train.max_epochs = 1;
    cfg.grid = GridSpec::square(1.0, 3);
    let sizes = [2, 9600, 16000];
    let rows = cmd_sweep_batchsize(&cfg, Some(&sizes), &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(rows.iter().map(|r| r.batch_size).collect::<Vec<_>>(), sizes);
    for b in sizes {
        assert!(dir.path().join(format!("checkpoint_bs{b}.lt")).exists());
        let g: SurfaceGrid = read_artifact(dir.path().join(format!("surface_bs{b}.lt"))).unwrap();
        assert_eq!(g.meta.direction_seeds, cfg.directions.seeds);
    }
    assert_embeds_config(dir.path(), &cfg);
    assert!(matches!(
        cmd_sweep_batchsize(&cfg, Some(&[20_000]), &RunOptions::default(), &mut quiet()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn comparison_report_matches_ticket_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cmp = cmd_imp_compare(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    let rows = &cmp.report.rows;
    assert_eq!(rows.len(), cfg.imp.rounds + 1);
    assert!(rows.windows(2).all(|w| w[0].round < w[1].round && w[0].sparsity >= w[1].sparsity));

    let dense = &rows[0];
    assert_eq!(dense.sparsity, 1.0);
    assert_eq!(dense.imp_accuracy.to_bits(), dense.random_accuracy.to_bits());
    assert_eq!(dense.imp_stats, dense.random_stats);

    for (row, (imp, rnd)) in rows.iter().zip(cmp.imp.iter().zip(&cmp.random)) {
        let imp_file: TicketRecord = read_artifact(dir.path().join("imp").join(imp.file_name())).unwrap();
        let rnd_file: TicketRecord = read_artifact(dir.path().join("random").join(rnd.file_name())).unwrap();
        assert_eq!(imp_file.test_accuracy.to_bits(), row.imp_accuracy.to_bits());
        assert_eq!(rnd_file.test_accuracy.to_bits(), row.random_accuracy.to_bits());
        assert_eq!(imp_file.mask.surviving_counts(), rnd_file.mask.surviving_counts());
        assert!(row.imp_label.starts_with("(IMP, "));
        assert!(row.random_label.starts_with("(random, "));
        for method in ["imp", "random"] {
            let g: SurfaceGrid = read_artifact(dir.path().join(method).join(format!("surface_r{}.lt", row.round))).unwrap();
            assert_eq!(g.meta.direction_seeds, cmp.report.direction_seeds);
        }
    }
    let last = rows.last().unwrap();
    assert_eq!(cmp.report.final_gap, last.imp_accuracy - last.random_accuracy);
    assert_embeds_config(dir.path(), &cfg);
}

#[test]
fn ticket_surface_stays_inside_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.imp.rounds = 1;
    cfg.imp.surface_rounds = vec![0];
    let cmp = cmd_imp_compare(&cfg, &RunOptions::default(), &mut quiet()).unwrap();
    let ticket = &cmp.imp[1];
    let ckpt = dir.path().join("ticket_net.lt");
    lottery_landscape::artifact::write_artifact(&ticket.trained, &ckpt).unwrap();
    let ticket_path = dir.path().join("imp").join(ticket.file_name());
    let surface_cfg = ExperimentConfig {
        out_dir: dir.path().join("ticket_surface"),
        ..cfg
    };
    let out = cmd_surface(&surface_cfg, &ckpt, Some(&ticket_path), &RunOptions::default(), &mut quiet()).unwrap();
    assert_eq!(out[0].grid.meta.mask_digest, Some(ticket.mask.digest()));
    assert!(!dir.path().join("imp").join("surface_r1.lt").exists());
}

#[test]
fn shipped_and_documented_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut parsed = 0;
    for entry in fs::read_dir(root.join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        ExperimentConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        parsed += 1;
    }
    assert!(parsed >= 3);

    let chapter = fs::read_to_string(root.join("book/src/cli.md")).unwrap();
    let full = chapter.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = ExperimentConfig::from_toml_str(full).unwrap();
    assert_eq!(cfg, ExperimentConfig { data_dir: Some("data".into()), ..ExperimentConfig::default() });
    let custom = chapter.split("```toml\n").nth(2).unwrap().split("```").next().unwrap();
    let cfg = ExperimentConfig::from_toml_str(custom).unwrap();
    assert_eq!(cfg.architecture.preset_name(), "custom");
}
