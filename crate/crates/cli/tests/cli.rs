//! End-to-end behaviour of the `factscope` binary on a tiny configuration.

use std::path::Path;
use std::process::Command;

use factscope_cli::manifest::file_sha256;
use factscope_cli::ExperimentManifest;

const TINY: &str = "\
[kb]
n_subjects = 12
n_relations = 3
pool_size = 12
[model]
n_layers = 4
d_model = 32
n_heads = 2
vocab_size = 128
d_ff = 64
[train]
steps = 300
templates = main,inq_what
[mediate]
facts_per_relation = 3
n_samples = 3
[transplant]
n_sources = 3
[relation]
zero_shot_donors = 3
geometry_relations = 3
geometry_donors = 3
[lens]
facts_per_relation = 1
";

/// Loose thresholds so the tiny model always yields an emergence stage.
const LOOSE: &str = "[stages]\ntau_rel = 0.0\ntau_subj = 1.0\n";

fn factscope(dir: &Path, config: &str, args: &[&str]) -> (i32, String, String) {
    let cfg = dir.join("config-in.ini");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_factscope"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, acc: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, acc);
            } else {
                acc.push((p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc);
    acc.sort();
    acc
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = factscope(dir.path(), "[train]\nstepz = 3\n", &["kb-gen"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("train.stepz"), "{err}");
    let (code, _, _) = factscope(dir.path(), "", &["--jobs", "0", "kb-gen"]);
    assert_eq!(code, 2);
}

#[test]
fn detection_failure_halts_before_transplant_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    // τ_rel = 1 puts the relation onset at the relation curve's peak, τ_subj = 0
    // puts the subject onset at layer 1: no room for an emergence stage
    let cfg = format!("{TINY}[stages]\ntau_rel = 1.0\ntau_subj = 0.0\n");
    let (code, _, err) = factscope(dir.path(), &cfg, &["pipeline"]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("detection failure"), "{err}");
    let out = dir.path().join("out");
    assert!(out.join("trace/stages.json").exists());
    assert!(!out.join("transplant").exists());
    // cached stages still halt
    let (code, _, _) = factscope(dir.path(), &cfg, &["transplant"]);
    assert_eq!(code, 4);
}

#[test]
fn pipeline_caches_verifies_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = format!("{TINY}{LOOSE}");
    let (code, stdout, err) = factscope(a.path(), &cfg, &["pipeline"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("transplant range accuracy"));
    let (code, _, err) = factscope(b.path(), &cfg, &["--quiet", "pipeline"]);
    assert_eq!(code, 0, "{err}");
    assert!(err.is_empty());
    let (ta, tb) = (tree(&a.path().join("out")), tree(&b.path().join("out")));
    assert_eq!(ta.iter().map(|f| &f.0).collect::<Vec<_>>(), tb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (fa, fb) in ta.iter().zip(&tb) {
        assert!(fa.1 == fb.1, "{} differs between runs", fa.0);
    }

    // every artifact is checksummed and every schema carries a version
    let out = a.path().join("out");
    let m = ExperimentManifest::load(&out).unwrap();
    assert_eq!(m.stages.len(), 11);
    assert!(m.verify_files(&out).is_empty());
    for s in &m.stages {
        for art in &s.artifacts {
            if art.path.ends_with(".json") {
                let v: serde_json::Value =
                    serde_json::from_slice(&std::fs::read(out.join(&art.path)).unwrap()).unwrap();
                assert!(v.get("schema_version").is_some(), "{} lacks schema_version", art.path);
            }
        }
    }

    // a second run is fully cached; --verify recomputes and agrees
    let (code, _, err) = factscope(a.path(), &cfg, &["pipeline"]);
    assert_eq!(code, 0);
    assert_eq!(err.matches("cached").count(), 2 * 11, "{err}");
    let (code, _, err) = factscope(a.path(), &cfg, &["--verify", "pipeline"]);
    assert_eq!(code, 0, "{err}");

    // a tampered artifact is recomputed, restoring the recorded bytes
    let lens = out.join("lens/lens.json");
    let before = file_sha256(&lens).unwrap();
    std::fs::write(&lens, "{}").unwrap();
    let (code, _, err) = factscope(a.path(), &cfg, &["lens"]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("[lens] running"), "{err}");
    assert_eq!(file_sha256(&lens).unwrap(), before);

    // a config change only reruns the affected stages
    let (code, _, err) = factscope(a.path(), &cfg.replace("[lens]\n", "[lens]\ntop_k = 3\n"), &["report"]);
    assert_eq!(code, 0, "{err}");
    assert!(
        err.contains("[train] cached") && err.contains("[lens] running") && err.contains("[report] running"),
        "{err}"
    );
}

#[test]
fn ad_hoc_tools_and_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{TINY}{LOOSE}");
    let (code, stdout, _) = factscope(dir.path(), &cfg, &["default-config"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("[mediate]") && stdout.contains("n_layers = 4"));

    let (code, _, err) = factscope(dir.path(), &cfg, &["lens", "--prompt", "What is the capital of Nope ?"]);
    assert_eq!(code, 2, "{err}");
    let kb = std::fs::read_to_string(dir.path().join("out/kb/kb.txt")).unwrap();
    assert!(!kb.is_empty());
    let manifest = ExperimentManifest::load(&dir.path().join("out")).unwrap();
    assert!(manifest.stage("lens").is_some());
}
