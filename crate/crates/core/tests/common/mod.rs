#![allow(dead_code)]

use std::path::{Path, PathBuf};

use micl_core::pipeline::{self, EvalReport, Overrides, RunConfig};

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

/// Copies the golden config and script into `dir` and loads the config.
pub fn stage(dir: &Path) -> RunConfig {
    for f in ["config.toml", "script.json"] {
        std::fs::copy(golden_dir().join(f), dir.join(f)).unwrap();
    }
    RunConfig::load(dir.join("config.toml")).unwrap()
}

pub struct Artifacts {
    pub coreset: Vec<u8>,
    pub bank: Vec<u8>,
    pub log: Vec<u8>,
    pub transcript: Vec<u8>,
    pub report: Vec<u8>,
    pub predictions: Vec<u8>,
    pub eval: EvalReport,
}

/// synth, optimize, evolve and eval with the golden config.
pub fn run_pipeline(cfg: &RunConfig) -> Artifacts {
    pipeline::cmd_synth(cfg, None, None).unwrap();
    pipeline::cmd_optimize(cfg).unwrap();
    pipeline::cmd_evolve(cfg, &Overrides::default()).unwrap();
    let eval = pipeline::cmd_eval(cfg, &Overrides::default()).unwrap();
    let read = |p: &Option<PathBuf>| std::fs::read(cfg.resolve(p.as_ref().unwrap())).unwrap();
    Artifacts {
        coreset: read(&cfg.paths.coreset),
        bank: read(&cfg.paths.bank),
        log: read(&cfg.paths.evolution_log),
        transcript: read(&cfg.paths.transcript),
        report: read(&cfg.paths.report),
        predictions: read(&cfg.paths.predictions),
        eval,
    }
}
