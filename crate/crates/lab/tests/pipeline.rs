use std::path::Path;
use std::process::Command;

use csi_llm::config::{ci_profile, ExperimentConfig};
use csi_llm::pipeline::{run_pipeline, RunDir, RunLock, Stage, StageStatus};
use csi_llm::LabError;
use csi_llm_core::config::ModelVariant;

fn small(root: &Path, run_id: &str) -> ExperimentConfig {
    let mut cfg = ci_profile();
    cfg.run_id = run_id.into();
    cfg.paths.runs_root = Some(root.display().to_string());
    cfg.scenario.n_samples = 60;
    cfg.data.split = [40, 10, 10];
    cfg.hparams.max_epochs = 1;
    cfg.sweep.variants = vec![ModelVariant::CsiLlm, ModelVariant::Fixed4];
    cfg
}

// Each test uses its own runs root; `CSI_LLM_RUNS_DIR` must stay unset.
fn no_env_override() {
    assert!(
        std::env::var_os("CSI_LLM_RUNS_DIR").is_none(),
        "unset CSI_LLM_RUNS_DIR to run these tests"
    );
}

#[test]
fn stages_populate_run_directory_and_skip_on_rerun() {
    no_env_override();
    let root = tempfile::tempdir().unwrap();
    let cfg = small(root.path(), "basic");
    let stages = [Stage::GenData, Stage::Train, Stage::Eval];
    let report = run_pipeline(&cfg, &stages, false).unwrap();
    assert!(report.outcomes.iter().all(|(_, s)| *s == StageStatus::Ran));

    let run = RunDir::for_config(&cfg);
    for p in [
        run.config(),
        run.data("30kmh"),
        run.checkpoint("30kmh", "csi-llm"),
        run.checkpoint("30kmh", "fixed4"),
        run.records(),
        run.summary(),
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    let echoed = ExperimentConfig::load(Some(&run.config()), &[]).unwrap();
    assert_eq!(echoed, cfg);

    let again = run_pipeline(&cfg, &stages, false).unwrap();
    assert!(again
        .outcomes
        .iter()
        .all(|(_, s)| *s == StageStatus::Skipped));
    let forced = run_pipeline(&cfg, &[Stage::Eval], true).unwrap();
    assert_eq!(forced.outcomes, vec![(Stage::Eval, StageStatus::Ran)]);

    let mut changed = cfg.clone();
    changed.hparams.lr = 0.5;
    assert!(matches!(
        run_pipeline(&changed, &[Stage::Eval], false),
        Err(LabError::Config { .. })
    ));
}

#[test]
fn eval_without_training_is_a_dependency_error() {
    no_env_override();
    let root = tempfile::tempdir().unwrap();
    let cfg = small(root.path(), "nodeps");
    let err = run_pipeline(&cfg, &[Stage::Eval], false).unwrap_err();
    assert!(
        matches!(err, LabError::Dependency { stage: "train", .. }),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
    let err = run_pipeline(&cfg, &[Stage::Train], false).unwrap_err();
    assert!(
        matches!(
            err,
            LabError::Dependency {
                stage: "gen-data",
                ..
            }
        ),
        "{err}"
    );
    let err = run_pipeline(&cfg, &[Stage::Plot], false).unwrap_err();
    assert!(matches!(err, LabError::Dependency { .. }), "{err}");
}

#[test]
fn pretrained_init_needs_weights() {
    no_env_override();
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small(root.path(), "weights");
    cfg.backbone.init_mode = csi_llm_core::config::InitMode::Pretrained;
    let err = run_pipeline(&cfg, &[Stage::GenData, Stage::Train], false).unwrap_err();
    assert!(
        matches!(&err, LabError::Config { key, .. } if key == "paths.pretrained"),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);

    let weights = root.path().join("w.safetensors");
    csi_llm::pretrained::synthesize_pretrained(&weights, &cfg.backbone, 4).unwrap();
    cfg.paths.pretrained = Some(weights.display().to_string());
    run_pipeline(&cfg, &[Stage::GenData, Stage::Train], true).unwrap();
}

#[test]
fn lock_excludes_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let first = RunLock::acquire(dir.path()).unwrap();
    assert!(matches!(
        RunLock::acquire(dir.path()),
        Err(LabError::Locked(_))
    ));
    drop(first);
    RunLock::acquire(dir.path()).unwrap();
}

#[test]
fn cli_exit_codes_and_outputs() {
    let root = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_csi-llm");
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ci.toml");
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("CSI_LLM_RUNS_DIR", root.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    };
    let cfg = cfg_path.to_str().unwrap();
    let common = [
        "--config",
        cfg,
        "--set",
        "scenario.n_samples=60",
        "--set",
        "data.split=[40,10,10]",
        "--set",
        "hparams.max_epochs=1",
    ];

    let out = run(&[&["run"][..], &common, &["--set", "hparams.ln=16"]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hparams.ln"));

    let out = run(&[&["eval"][..], &common].concat());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(&[
        &["train"][..],
        &common,
        &["--variant", "fixed4", "--init", "random"],
    ]
    .concat());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(&[
        &["run"][..],
        &common,
        &[
            "--set",
            "sweep.variants=[\"fixed4\"]",
            "--set",
            "backbone.init_mode=\"random\"",
            "--stages",
            "eval,rollout,plot",
        ],
    ]
    .concat());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run_dir = root.path().join("ci");
    assert!(run_dir.join("plots/rollout_30kmh.svg").exists());

    let data = root.path().join("d.csds");
    let out = run(&[
        "gen-data",
        "--speed",
        "30,60,120",
        "--samples",
        "12",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
        "--config",
        cfg,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let ck = run_dir.join("checkpoints/30kmh__fixed4.safetensors");
    let rep = root.path().join("standalone");
    let out = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--lengths",
        "2,4",
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Fixed-4"), "{text}");
    assert!(rep.join("records.ndjson").exists());

    let out = run(&[
        "plot",
        "--from",
        run_dir.join("records.ndjson").to_str().unwrap(),
        "--out",
        root.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
