mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use crackseg::data::image::{decode_png, encode_png};
use crackseg::data::{load_dataset_root, Dataset, Grid, Sample, SplitTag};
use crackseg::nn::{Family, Model};
use crackseg::train::{load_checkpoint, load_checkpoint_as, save_checkpoint};

fn crackseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = crackseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    crackseg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_dir(root: &Path, n: usize, size: usize) -> PathBuf {
    let dir = root.join("data");
    ok(&["gen-synth", "--n", &n.to_string(), "--size", &size.to_string(), "--seed", "3", "--out", s(&dir)]);
    dir
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_synth_writes_a_reproducible_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-synth", "--n", "16", "--size", "32", "--seed", "7", "--out", s(dir)]);
    }
    assert_eq!(files(&a.join("images")).len(), 16);
    assert_eq!(files(&a.join("masks")).len(), 16);
    for sub in ["images", "masks"] {
        for f in files(&a.join(sub)) {
            assert_eq!(fs::read(a.join(sub).join(&f)).unwrap(), fs::read(b.join(sub).join(&f)).unwrap());
        }
    }
    let ds = load_dataset_root(&a, 32).unwrap();
    assert_eq!(ds.len(), 16);
    assert_eq!(ds.ids()[0], "synth_00000");

    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&["gen-synth", "--n", "1", "--out", s(&blocker.join("sub"))]), 2);
    assert_eq!(code(&["gen-synth", "--n", "1", "--size", "2", "--out", s(&tmp.path().join("c"))]), 2);
}

const TINY: [&str; 8] = ["--set", "depth=2", "--set", "base_filters=2", "--set", "size=32", "--set", "batch_size=4"];

#[test]
fn train_writes_checkpoint_history_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path(), 10, 32);
    let run_model = |name: &str, model: &str, epochs: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["train", "--model", model, "--epochs", epochs];
        args.extend(["--data", s(&data), "--out", s(&out)]);
        args.extend(TINY);
        args.extend(extra);
        (crackseg(&args), out)
    };
    let run = |name: &str, extra: &[&str]| run_model(name, "resunet", "5", extra);
    let (o, out) = run("r1", &["--kernel", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("IoU") && stdout.contains("resunet k=3"), "{stdout}");
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("kernel = 3") && cfg.contains("epochs = 5") && cfg.contains("depth = 2"));
    let model = load_checkpoint_as(out.join("model.ckpt"), Family::ResUNet).unwrap();
    assert_eq!(model.params().num_values(), unet_param_oracle(3, 2, 2, true));

    let (_, again) = run("r2", &[]);
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(history, fs::read_to_string(again.join("history.csv")).unwrap());

    for (tag, family) in [("unet", Family::UNet), ("segnet", Family::SegNet)] {
        // --model on the command line wins over --set
        let (o, out) = run_model(tag, tag, "1", &["--set", "model=resunet"]);
        assert!(o.status.success());
        assert_eq!(load_checkpoint(out.join("model.ckpt")).unwrap().family(), family);
    }

    assert_eq!(run("k4", &["--kernel", "4"]).0.status.code(), Some(2));
    let o = crackseg(&["train", "--kernel", "4", "--data", s(&data), "--out", s(&tmp.path().join("k4b"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = crackseg(&["train", "--model", "ensemble", "--data", s(&data), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = crackseg(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(code(&["train", "--data", s(&data)]), 2, "missing --out");
}

#[test]
fn config_files_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path(), 4, 16);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "epochs = 1\nflavour = mint\n").unwrap();
    let o = crackseg(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("flavour"));
    assert_eq!(code(&["train", "--config", s(&tmp.path().join("absent.cfg")), "--out", "x"]), 2);
    assert_eq!(code(&["train", "--set", "epochs=0", "--data", s(&data), "--out", "x"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

fn tiny_ensemble_config(dir: &Path, data: &Path, out: &Path) -> PathBuf {
    let path = dir.join("ens.cfg");
    let text = format!(
        "# tiny ensemble\ndata = {}\nout = {}\ndepth = 2\nbase_filters = 2\nsize = 16\n\
         batch_size = 4\nepochs = 2\nstage2_epochs = 3\nmeta_channels = 4\nsplit = 0.5,0.25,0.25\n",
        data.display(),
        out.display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_ensemble_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path(), 8, 16);
    let out = tmp.path().join("ens");
    let cfg = tiny_ensemble_config(tmp.path(), &data, &out);
    let stdout = ok(&["train-ensemble", "--config", s(&cfg)]);
    assert!(stdout.contains("ensemble") && stdout.contains("base3_k9"), "{stdout}");
    let names = files(&out);
    for k in ["base0_k3", "base1_k5", "base2_k7", "base3_k9", "ensemble"] {
        assert!(names.contains(&format!("{k}.ckpt")), "{names:?}");
        assert!(names.contains(&format!("history_{k}.csv")), "{names:?}");
    }
    assert!(names.contains(&"summary.csv".to_string()));

    let ens = load_checkpoint_as(out.join("ensemble.ckpt"), Family::Ensemble).unwrap();
    let embedded = ens.bases().unwrap();
    for (i, k) in [3, 5, 7, 9].iter().enumerate() {
        let base = load_checkpoint(out.join(format!("base{i}_k{k}.ckpt"))).unwrap();
        let bits = |m: &Model| m.params().fingerprint(|_| true);
        assert_eq!(bits(&embedded[i]), bits(&base));
    }
    assert!(ens.params().iter().all(|(n, t)| t.requires_grad == n.starts_with("meta.")));

    let merged = tmp.path().join("merged.csv");
    let mut args = vec!["report".to_string()];
    for name in &names {
        if name.starts_with("history_") {
            args.push(s(&out.join(name)).to_string());
        }
    }
    args.extend(["--out".into(), s(&merged).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let text = fs::read_to_string(&merged).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,epoch,train_loss,val_loss,seconds");
    assert_eq!(text.lines().count(), 1 + 4 * 2 + 3);
    assert!(text.contains("\nensemble,3,"));
    assert_eq!(code(&["report", s(&cfg), "--out", s(&merged)]), 3);
}

/// Image equal to its binary mask, so a steep logistic is a perfect model.
fn identity_dataset(root: &Path) -> Dataset {
    let mut r = rng(5);
    let samples = (0..6)
        .map(|i| {
            let m = Grid::new(8, 8, random_mask(&mut r, 64, 0.25)).unwrap();
            Sample::new(format!("p{i}"), m.clone(), m).unwrap()
        })
        .collect();
    let ds = Dataset::new(samples, SplitTag::All).unwrap();
    ds.export(root).unwrap();
    ds
}

#[test]
fn eval_scores_a_known_stub() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("pairs");
    let ds = identity_dataset(&data);
    let perfect = tmp.path().join("perfect.ckpt");
    save_checkpoint(&Model::logistic(20.0, -10.0).unwrap(), &perfect).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&perfect), "--data", s(&data), "--size", "8", "--name", "oracle"]);
    let header: Vec<&str> = stdout.lines().next().unwrap().split('|').map(str::trim).collect();
    assert_eq!(header, ["Model", "Test Loss", "IoU", "DICE Coeff"]);
    let row = stdout.lines().find(|l| l.starts_with("oracle")).unwrap();
    assert_eq!(row.matches("100.00%").count(), 2, "{row}");
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    // a constant 0.5 model at threshold 0 predicts everywhere
    let half = tmp.path().join("half.ckpt");
    save_checkpoint(&Model::logistic(0.0, 0.0).unwrap(), &half).unwrap();
    let out = tmp.path().join("half_eval");
    ok(&["eval", "--checkpoint", s(&half), "--data", s(&data), "--size", "8", "--threshold", "0", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    for (line, sample) in csv.lines().skip(1).zip(ds.samples()) {
        let iou: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        let coverage = sample.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / 64.0;
        assert_eq!(iou, coverage, "{line}");
    }

    assert_eq!(code(&["eval", "--checkpoint", s(&half), "--data", s(&data), "--threshold", "2"]), 2);
    fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&tmp.path().join("junk.ckpt")), "--data", s(&data)]), 3);
    assert_eq!(code(&["eval", "--checkpoint", s(&tmp.path().join("none.ckpt")), "--data", s(&data)]), 3);
}

#[test]
fn predict_writes_probability_and_binary_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path(), 1, 32);
    let ckpt = tmp.path().join("m.ckpt");
    let m = Model::unet(
        crackseg::nn::ResUNetConfig {
            depth: 2,
            base_filters: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    save_checkpoint(&m, &ckpt).unwrap();
    let img = data.join("images/synth_00000.png");
    let (a, b) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    for out in [&a, &b] {
        ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(out), "--threshold", "0.5"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let prob = decode_png(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(prob.dims(), (32, 32));
    assert!(prob.in_unit_range());
    let bin = decode_png(&fs::read(tmp.path().join("a_mask.png")).unwrap()).unwrap();
    assert!(bin.data().iter().all(|&v| v == 0.0 || v == 1.0));

    ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&a), "--size", "64"]);
    assert_eq!(decode_png(&fs::read(&a).unwrap()).unwrap().dims(), (64, 64));
    // 34 is not divisible by 2^depth
    let odd = tmp.path().join("odd.png");
    fs::write(&odd, encode_png(&Grid::filled(34, 34, 0.5).unwrap())).unwrap();
    assert_eq!(code(&["predict", "--checkpoint", s(&ckpt), "--image", s(&odd), "--out", s(&a)]), 3);
}

#[test]
fn gradcheck_command() {
    let stdout = ok(&["gradcheck", "--trials", "2"]);
    for name in crackseg::gradsuite::CHECKS {
        let line = stdout.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        assert!(line.ends_with("PASS"), "{line}");
    }
    let out = crackseg(&["gradcheck", "--trials", "1", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(code(&["gradcheck", "--inject-fault", "nonsense"]), 2);
}
