//! Dataset on disk → training from a config file → checkpoint evaluation.

use mvip::data::{save_dataset, synthesize_dataset, validate_root, Split, SynthConfig};
use mvip::harness::{evaluate_checkpoint, stability, sweep, train, RunConfig, SweepPreset};

fn small_synth() -> SynthConfig {
    SynthConfig {
        classes: 3,
        train_rotations: 4,
        val_per_lay: 1,
        test_per_lay: 2,
        image_size: 32,
        ..SynthConfig::default()
    }
}

fn write_config(dir: &std::path::Path, root: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "# small run on a saved dataset\n\
         data.root = {}\n\
         model.classes = 3\n\
         model.width = 16\n\
         model.attn_heads = 4\n\
         fusion = tr_en\n\
         train.epochs = 3\n\
         train.batch = 4\n\
         train.resolution = 16\n\
         output.dir = {}\n",
        root.display(),
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_from_saved_dataset_and_reevaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let index = synthesize_dataset(&small_synth(), 5).unwrap();
    save_dataset(&index, &root).unwrap();
    let report = validate_root(&root);
    assert!(report.ok, "{:?}", report.errors);

    let cfg = RunConfig::resolve(Some(&write_config(dir.path(), &root)), &["seed=3".into()]).unwrap();
    assert_eq!(cfg.seed, 3);
    let run = train(&cfg).unwrap();
    assert_eq!(run.epochs.len(), 3);
    let out = dir.path().join("out");
    for f in ["metrics.jsonl", "best.ckpt", "config.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), run.log.len());

    let ckpt = run.best_checkpoint.clone().unwrap();
    let test = evaluate_checkpoint(&ckpt, Split::Test).unwrap();
    assert_eq!(test, run.test);
    assert!(test.top5 >= test.top3 && test.top3 >= test.top1);

    // the stored config reproduces the run
    let again = RunConfig::resolve(Some(&out.join("config.txt")), &[]).unwrap();
    assert_eq!(again.hash(), cfg.hash());
}

#[test]
fn stability_and_sweep_on_synthetic_data() {
    let mut cfg = RunConfig::profile(mvip::harness::Profile::Toy);
    cfg.data.synth = small_synth();
    cfg.model.classes = 3;
    cfg.model.width = 16;
    cfg.model.attn_heads = 4;
    cfg.train.epochs = 2;
    cfg.train.resolution = 16;
    let s = stability(&cfg, 2, false).unwrap();
    assert_eq!(s.runs.len(), 2);
    assert_eq!(s.runs[1].seed, cfg.seed + 1);
    assert!(s.max >= s.mean);

    let t = sweep(SweepPreset::Rgbd, &cfg, 1).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert!(t.rows.iter().all(|r| r.status == "ok"), "{:?}", t.rows);
}
