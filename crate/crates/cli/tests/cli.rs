use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use dcchi_core::in2set::ArchConfig;
use dcchi_core::io::{load_tensor, save_tensor};
use dcchi_core::sensing::{MeasurementPair, NoiseModel, SensingSystem};
use dcchi_core::solver::{CgConfig, Model};
use dcchi_core::synth::blob_scene;
use dcchi_core::Tensor;
use nalgebra::{DMatrix, DVector};

fn dcchi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcchi"))
        .current_dir(dir)
        .env("DCCHI_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = dcchi(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        String::from_utf8_lossy(&o.stdout)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    dcchi(dir, args).status.code().expect("exit code")
}

const TINY: &str =
    "stages = 2\nmodel_seed = 3\n[sensing]\nheight = 16\nwidth = 16\nbands = 4\nmask_seed = 5\n[arch]\nwindow = 4\n";

fn tiny_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.toml"), TINY).unwrap();
    d
}

#[test]
fn simulate_is_deterministic_and_noiseless_by_default() {
    let d = tiny_dir();
    let p = d.path();
    ok(p, &["--config", "run.toml", "--out", "a", "simulate", "--synthetic"]);
    ok(p, &["--config", "run.toml", "--out", "b", "simulate", "--synthetic"]);
    for f in ["cassi.dct", "pan.dct", "scene.dct", "sensing.toml"] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let sys = SensingSystem::simulation(16, 16, 4, 5);
    let scene = load_tensor(p.join("a/scene.dct")).unwrap();
    assert_eq!(
        load_tensor(p.join("a/cassi.dct")).unwrap(),
        sys.cassi_forward(&scene).unwrap()
    );
    let sensing = fs::read_to_string(p.join("a/sensing.toml")).unwrap();
    assert!(
        sensing.contains("step = 2") && sensing.contains("direction = \"right\""),
        "{sensing}"
    );
    let manifest = fs::read_to_string(p.join("a/manifest.toml")).unwrap();
    assert!(manifest.contains("config_hash = \""), "{manifest}");
}

#[test]
fn train_reconstruct_round_trip_and_hash_refusal() {
    let d = tiny_dir();
    let p = d.path();
    ok(p, &["--config", "run.toml", "--out", "sim", "simulate", "--synthetic"]);
    ok(
        p,
        &[
            "--config",
            "run.toml",
            "--out",
            "t1",
            "train",
            "--synthetic",
            "2",
            "--steps",
            "2",
        ],
    );
    ok(
        p,
        &[
            "--config",
            "run.toml",
            "--out",
            "t2",
            "train",
            "--synthetic",
            "2",
            "--steps",
            "2",
        ],
    );
    assert_eq!(
        fs::read(p.join("t1/model.dck")).unwrap(),
        fs::read(p.join("t2/model.dck")).unwrap()
    );
    let log = fs::read_to_string(p.join("t1/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    for it in ["1", "2", "5", "10"] {
        let out = ok(
            p,
            &[
                "--config",
                "sim/run.toml",
                "--cg-iters",
                it,
                "--out",
                "r",
                "reconstruct",
                "--checkpoint",
                "t1/model.dck",
            ],
        );
        assert!(out.contains("psnr_db="), "{out}");
        assert_eq!(load_tensor(p.join("r/recon.dct")).unwrap().shape(), [16, 16, 4]);
    }
    let o = dcchi(
        p,
        &[
            "--config",
            "sim/run.toml",
            "--disable-crw",
            "--out",
            "r",
            "reconstruct",
            "--checkpoint",
            "t1/model.dck",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("- crw = false") && err.contains("+ crw = true"), "{err}");
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let d = tiny_dir();
    let p = d.path();
    ok(
        p,
        &[
            "--config",
            "run.toml",
            "--out",
            "a",
            "train",
            "--synthetic",
            "2",
            "--steps",
            "3",
            "--lr",
            "0",
        ],
    );
    ok(
        p,
        &[
            "--config",
            "run.toml",
            "--out",
            "b",
            "train",
            "--synthetic",
            "2",
            "--steps",
            "0",
        ],
    );
    assert_eq!(
        fs::read(p.join("a/model.dck")).unwrap(),
        fs::read(p.join("b/model.dck")).unwrap()
    );
}

fn dense_phi(sys: &SensingSystem) -> DMatrix<f64> {
    let t = sys.dense_matrix();
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

#[test]
fn identity_denoiser_reconstruction_matches_dense_tikhonov_oracle() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let cfg = "stages = 3\nmodel_seed = 1\n[sensing]\nheight = 4\nwidth = 4\nbands = 2\nmask_seed = 2\n[arch]\nwindow = 1\n[cg]\nmax_iters = 32\n";
    fs::write(p.join("run.toml"), cfg).unwrap();
    let sys = Arc::new(SensingSystem::simulation(4, 4, 2, 2));
    let scene = blob_scene(4, 4, 2, 7);
    let y = sys.simulate(&scene, &NoiseModel::noiseless()).unwrap();
    save_tensor(p.join("cassi.dct"), &y.cassi).unwrap();
    save_tensor(p.join("pan.dct"), &y.pan).unwrap();
    ok(
        p,
        &[
            "--config",
            "run.toml",
            "--out",
            "r",
            "reconstruct",
            "--identity",
            "--cassi",
            "cassi.dct",
            "--pan",
            "pan.dct",
        ],
    );
    let got = load_tensor(p.join("r/recon.dct")).unwrap();

    // x0 and the stage penalties come from the same seeded model
    let mut model = Model::new(&ArchConfig::new(4, 4, 2).with_window(1), 3, 1).unwrap();
    model.make_denoisers_identity();
    let y = MeasurementPair::new(&sys, y.cassi, y.pan).unwrap();
    let r = model.reconstruct(&y, &sys, &CgConfig::preset(32)).unwrap();
    let phi = dense_phi(&sys);
    let ata = phi.transpose() * &phi;
    let aty = phi.transpose() * DVector::from_column_slice(y.stacked().data());
    let mut x = DVector::from_column_slice(r.x0.data());
    for &mu in &r.params.mu {
        let a = &ata + DMatrix::identity(32, 32) * mu;
        x = a.cholesky().unwrap().solve(&(&aty + &x * mu));
    }
    let want = Tensor::new(&[4, 4, 2], x.as_slice().to_vec()).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-8, "{}", got.max_abs_diff(&want));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let d = tiny_dir();
    let p = d.path();
    assert_eq!(code(p, &["simulate"]), 2);
    assert_eq!(code(p, &["--config", "missing.toml", "simulate"]), 2);
    fs::write(p.join("bad.dct"), b"DCT1\x02\x01").unwrap();
    assert_eq!(code(p, &["simulate", "--scene", "bad.dct"]), 4);
    assert_eq!(
        code(p, &["--config", "run.toml", "--stages", "0", "gradcheck", "--quick"]),
        2
    );
    // divisibility: 12 is not a multiple of 4 * window
    save_tensor(p.join("odd.dct"), &Tensor::zeros(&[12, 12, 4])).unwrap();
    fs::create_dir(p.join("ds")).unwrap();
    fs::copy(p.join("odd.dct"), p.join("ds/a.dct")).unwrap();
    assert_eq!(code(p, &["train", "--dataset", "ds", "--steps", "1"]), 2);
    // non-finite training data aborts as a numeric failure
    fs::create_dir(p.join("nan")).unwrap();
    let mut cube = blob_scene(16, 16, 4, 1);
    cube.data_mut()[0] = f64::NAN;
    save_tensor(p.join("nan/a.dct"), &cube).unwrap();
    assert_eq!(
        code(
            p,
            &["--config", "run.toml", "train", "--dataset", "nan", "--steps", "1"]
        ),
        3
    );

    let o = Command::new(env!("CARGO_BIN_EXE_dcchi"))
        .current_dir(p)
        .env("DCCHI_THREADS", "zero")
        .args(["gradcheck", "--quick"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_primitive_and_the_worst() {
    let d = tiny_dir();
    let out = ok(d.path(), &["--out", "g", "gradcheck", "--quick"]);
    for name in [
        "matmul",
        "conv2d_s2",
        "softmax_lastdim",
        "layer_norm",
        "apply_linear_phi_adjoint",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(name) && l.contains("PASS")),
            "{name}\n{out}"
        );
    }
    assert!(out.contains("worst: "));
    assert!(fs::read_to_string(d.path().join("g/gradcheck.txt"))
        .unwrap()
        .contains("checks passed"));
}

#[test]
fn ablation_tables_have_the_expected_rows() {
    let d = tiny_dir();
    let out = ok(
        d.path(),
        &["--config", "run.toml", "--out", "a", "ablate", "--repeats", "1"],
    );
    let cg = fs::read_to_string(d.path().join("a/ablation_cg.csv")).unwrap();
    let rows: Vec<&str> = cg.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["CG-1", "CG-2", "CG-5", "CG-10"]);
    let bd = fs::read_to_string(d.path().join("a/ablation_breakdown.csv")).unwrap();
    let rows: Vec<&str> = bd.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["baseline", "+CRW", "+MHA-C", "+MHA-S"]);
    let flops: Vec<u64> = bd
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(flops.windows(2).all(|w| w[0] < w[1]), "{flops:?}");
    assert!(out.contains("variant,psnr_db,ssim,flops,wall_ms"));
}

#[test]
fn analyze_corr_writes_summary_csv() {
    let d = tiny_dir();
    let p = d.path();
    ok(
        p,
        &["--config", "run.toml", "--out", "c", "analyze-corr", "--synthetic", "4"],
    );
    let csv = fs::read_to_string(p.join("c/corr.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scene,rmse,correlation,psnr_db");
    assert_eq!(lines.len(), 6);
    let mean: f64 = lines[5].split(',').nth(2).unwrap().parse().unwrap();
    assert!(mean >= 0.9, "{csv}");

    save_tensor(p.join("s.dct"), &blob_scene(16, 16, 4, 2)).unwrap();
    ok(p, &["--out", "c2", "analyze-corr", "--scene", "s.dct"]);
    assert!(fs::read_to_string(p.join("c2/corr.csv")).unwrap().contains("\ns,"));
}
