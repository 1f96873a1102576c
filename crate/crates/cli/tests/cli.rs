use std::path::Path;
use std::process::{Command, Output};

fn gzsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gzsl")).args(args).env_remove("GZSL_LOG").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// A short CADA run over a dataset directory, written next to it.
fn quick_config(dir: &Path, dataset: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "family": "cada",
        "dataset": dataset,
        "seed": 3,
        "cada": {"latent_dim": 4, "enc_hidden_visual": 32, "enc_hidden_semantic": 16,
                 "dec_hidden_visual": 32, "dec_hidden_semantic": 16, "epochs": 4},
        "head": {"epochs": 5},
        "gate": {"dc_epochs": 5}
    });
    let p = dir.join("quick.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn synth_into(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = gzsl(&["synth", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_into(tmp.path());
    let cfg = quick_config(tmp.path(), &data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = gzsl(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["manifest.json", "latent.ckpt", "head.ckpt", "dc.ckpt", "history.csv", "effective_config.json"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    for f in ["latent.ckpt", "head.ckpt", "dc.ckpt"] {
        assert!(std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let manifest = a.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let both = stdout(&gzsl(&["eval", m]));
    assert!(both.contains("gzsl_with_dc") && both.contains("gzsl_plain"), "{both}");
    assert!(a.join("report_gzsl_with_dc.json").exists() && a.join("curve_gzsl_plain.csv").exists());

    let plain = stdout(&gzsl(&["eval", m, "--no-dc"]));
    assert!(plain.contains("gzsl_plain") && !plain.contains("gzsl_with_dc"), "{plain}");

    let zsl = gzsl(&["eval", m, "--mode", "zsl", "--dataset", data.to_str().unwrap()]);
    assert_eq!(code(&zsl), 0);
    assert!(stdout(&zsl).contains("zsl"));

    let ausuc_out = tmp.path().join("ausuc");
    let o = gzsl(&["ausuc", m, "--grid", "11", "--out", ausuc_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(ausuc_out.join("curve_gzsl_with_dc.csv")).unwrap();
    // header, two endpoints and the 11 grid points
    assert_eq!(curve.lines().count(), 1 + 2 + 11);

    let ckpt = a.join("dc.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&gzsl(&["eval", m])), 2);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gzsl(&["frobnicate"])), 1);
    assert_eq!(code(&gzsl(&["train"])), 1);
    let cfg = tmp.path().join("empty.json");
    std::fs::write(&cfg, r#"{"family":"cada"}"#).unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&gzsl(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])), 1);
    let o = gzsl(&["eval", tmp.path().join("missing").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert_eq!(code(&gzsl(&["--help"])), 0);
}

#[test]
fn synth_is_reproducible_and_guards_its_target() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth_into(tmp.path());
    let b = tmp.path().join("again");
    assert_eq!(code(&gzsl(&["synth", "--seed", "2", "--out", b.to_str().unwrap()])), 0);
    for f in ["visual.f32bin", "semantic.f32bin", "labels.u32bin", "splits.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&gzsl(&["synth", "--seed", "3", "--out", a.to_str().unwrap()])), 1);
    assert_eq!(code(&gzsl(&["synth", "--seed", "3", "--out", a.to_str().unwrap(), "--force"])), 0);
    assert_ne!(std::fs::read(a.join("visual.f32bin")).unwrap(), std::fs::read(b.join("visual.f32bin")).unwrap());
}

#[test]
fn gradcheck_prints_every_loss() {
    let o = gzsl(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains(" PASS ")).count(), gzsl_core::checks::LOSS_NAMES.len(), "{text}");
}
