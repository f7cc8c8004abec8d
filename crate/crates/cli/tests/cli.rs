use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hpcg::octree::PointCloud;
use hpcg::ply::{read_ply, write_ply, PlyFormat};
use hpcg::synth::ood_gopc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn hpcg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpcg"))
        .args(args)
        .env_remove("HPCG_EPOCHS")
        .output()
        .expect("spawn hpcg")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny assets trained once through the CLI itself.
fn assets() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let a = s(dir.path());
        let train = [
            "--assets-dir", a, "--synthetic", "6", "--synthetic-bitdepth", "5", "--toy", "--epochs", "2",
            "--ppn-channels", "4", "--dar-channels", "4", "--coarse-threshold", "16",
        ];
        ok(hpcg(&[&["pretrain-ppn"][..], &train].concat()));
        ok(hpcg(&[&["train-base"][..], &train].concat()));
        dir
    })
    .path()
}

fn frames(dir: &Path, n: usize, seed: u64) -> (Vec<PointCloud>, Vec<PathBuf>) {
    let clouds = ood_gopc(&mut ChaCha8Rng::seed_from_u64(seed), n, 5, 7.0).unwrap();
    let paths = clouds
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let p = dir.join(format!("f{k}.ply"));
            let fmt = if k % 2 == 0 { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            write_ply(c, &p, fmt).unwrap();
            p
        })
        .collect();
    (clouds, paths)
}

#[test]
fn training_writes_assets_and_logs() {
    let dir = assets();
    for f in ["assets.hpca", "pretrain_ppn.csv", "train_base.csv", "train_base_no_ppn.csv", "recipe.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn encode_decode_round_trip_with_subframes() {
    let tmp = TempDir::new().unwrap();
    let (clouds, paths) = frames(tmp.path(), 3, 1);
    let out = tmp.path().join("enc");
    let mut args = vec!["encode", "--assets-dir", s(assets()), "--epochs", "2", "--gopc-size", "2"];
    args.extend(["--subframe-points", "150", "--coarse-threshold", "16", "-o", s(&out)]);
    args.extend(paths.iter().map(|p| s(p)));
    ok(hpcg(&args));
    assert!(out.join("gopc_0000.hpcg").exists() && out.join("report.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let groups = report["gopcs"].as_array().unwrap();
    assert!(groups.len() > 1, "sub-frames should fill several groups");
    let bytes: u64 = groups
        .iter()
        .map(|g| std::fs::metadata(out.join(g["file"].as_str().unwrap())).unwrap().len())
        .sum();
    assert_eq!(report["total_bits"].as_u64().unwrap(), 8 * bytes);

    let dec = tmp.path().join("dec");
    ok(hpcg(&["decode", "--assets-dir", s(assets()), s(&out), "-o", s(&dec)]));
    for (k, c) in clouds.iter().enumerate() {
        assert_eq!(&read_ply(&dec.join(format!("f{k}.ply")), None).unwrap(), c, "frame {k}");
    }

    let single = tmp.path().join("single");
    ok(hpcg(&["decode", "--assets-dir", s(assets()), "--binary", s(&out.join("gopc_0000.hpcg")), "-o", s(&single)]));
    assert!(single.join("frame_0001.ply").exists());
}

#[test]
fn encoding_is_deterministic_and_env_overrides_flags() {
    let tmp = TempDir::new().unwrap();
    let (_, paths) = frames(tmp.path(), 2, 2);
    let run = |name: &str, env_epochs: Option<&str>| {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hpcg"));
        cmd.args(["encode", "--assets-dir", s(assets()), "--coarse-threshold", "16", "-o", s(&out)]);
        cmd.args(paths.iter().map(|p| s(p)));
        match env_epochs {
            Some(e) => cmd.env("HPCG_EPOCHS", e),
            None => cmd.env("HPCG_EPOCHS", "3"),
        };
        ok(cmd.output().unwrap());
        out
    };
    let (a, b) = (run("a", None), run("b", None));
    for f in ["gopc_0000.hpcg", "report.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let z = run("z", Some("0"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(z.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["gopcs"][0]["selected_epoch"], 0);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let (_, paths) = frames(tmp.path(), 1, 3);

    let bad_ply = tmp.path().join("bad.ply");
    std::fs::write(&bad_ply, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.5 1 2\n").unwrap();
    let out = hpcg(&["encode", "--assets-dir", s(assets()), "-o", s(&tmp.path().join("x")), s(&bad_ply)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(hpcg(&["encode", "--no-such-flag"]).status.code(), Some(2));

    let missing = tmp.path().join("none");
    let out = hpcg(&["encode", "--assets-dir", s(&missing), "-o", s(&tmp.path().join("y")), s(&paths[0])]);
    assert_eq!(out.status.code(), Some(3));

    let enc = tmp.path().join("enc");
    ok(hpcg(&["encode", "--assets-dir", s(assets()), "--epochs", "0", "--coarse-threshold", "16", "-o", s(&enc), s(&paths[0])]));
    let stream = enc.join("gopc_0000.hpcg");

    // Same stream, assets with one weight changed.
    let other = tmp.path().join("other");
    std::fs::create_dir_all(&other).unwrap();
    let mut a = hpcg::assets::Assets::load(&assets().join("assets.hpca")).unwrap();
    a.ppn[0] += 1.0;
    a.save(&other.join("assets.hpca")).unwrap();
    let out = hpcg(&["decode", "--assets-dir", s(&other), s(&stream), "-o", s(&tmp.path().join("d1"))]);
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = std::fs::read(&stream).unwrap();
    let garbage = tmp.path().join("garbage.hpcg");
    std::fs::write(&garbage, b"not a stream").unwrap();
    let out = hpcg(&["decode", "--assets-dir", s(assets()), s(&garbage), "-o", s(&tmp.path().join("d2"))]);
    assert_eq!(out.status.code(), Some(4));
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&garbage, &bytes).unwrap();
    let out = hpcg(&["decode", "--assets-dir", s(assets()), s(&garbage), "-o", s(&tmp.path().join("d3"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bench_curve_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("curve.csv");
    let args = [
        "bench", "--assets-dir", s(assets()), "--epochs", "4", "--coarse-threshold", "16", "--synthetic-frames", "2",
        "--synthetic-bitdepth", "5", "--synthetic-radius", "7", "-o", s(&csv),
    ];
    ok(hpcg(&args));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("enc_time_s,bpp"));
    let pts: Vec<(f64, f64)> = lines
        .map(|l| {
            let (t, b) = l.split_once(',').unwrap();
            (t.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(pts.len(), 5);
    for w in pts.windows(2) {
        assert!(w[1].0 > w[0].0 && w[1].1 <= w[0].1, "{w:?}");
    }
}

#[test]
fn ablations_lose_to_full() {
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("ablate.json");
    let args = [
        "ablate", "--assets-dir", s(assets()), "--epochs", "3", "--coarse-threshold", "16", "--synthetic-frames", "2",
        "--synthetic-bitdepth", "5", "--synthetic-radius", "7", "-o", s(&json),
    ];
    ok(hpcg(&args));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert!(v["full"]["tb_rate_vs_full"].is_null());
    for k in ["no_smc", "no_smc_no_ppn"] {
        let tb = v[k]["tb_rate_vs_full"].as_f64().unwrap();
        assert!(tb > 0.0, "{k}: {tb}");
    }
}
